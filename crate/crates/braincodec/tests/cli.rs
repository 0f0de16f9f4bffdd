//! End-to-end checks of the command-line binary: exit codes, file outputs,
//! reproducibility, and agreement between the file pipeline and the
//! in-process one.

use braincodec::codec::{patch_batch, CodecConfig};
use braincodec::eval;
use braincodec::signal_io::{load_recording, patchify, save_recording, RecordingFormat};
use braincodec::synth::{generate, BurstEvent, SyntheticSpec};
use braincodec::trainer::{Checkpoint, TrainConfig, Trainer};
use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_braincodec")
}

/// Runs the binary with a scrubbed environment so ambient variables cannot
/// leak into path resolution.
fn run_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).args(args).env_remove("BRAINCODEC_DATA_ROOT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn tiny_codec() -> CodecConfig {
    CodecConfig {
        base_channels: 4,
        stride: 2,
        latent_dim: 8,
        num_blocks: 2,
        init_kernel: 3,
        patch_seconds: 1.0,
        max_channels: 64,
        raw_bits_per_sample: 32,
        num_quantizers: 2,
        codebook_size: 16,
    }
}

fn burst_spec(seed: u64, duration_s: f64, onsets: &[f64]) -> SyntheticSpec {
    SyntheticSpec {
        num_channels: 2,
        duration_s,
        burst_events: onsets
            .iter()
            .map(|&onset_s| BurstEvent { onset_s, duration_s: 2.0, amplitude_gain: 5.0 })
            .collect(),
        seed,
        ..SyntheticSpec::default()
    }
}

/// Initialized (untrained) checkpoint over `spec`'s data, written to `path`.
fn write_checkpoint(codec: CodecConfig, seed: u64, spec: &SyntheticSpec, path: &Path) -> Checkpoint {
    let rec = generate(spec).expect("synthetic recording");
    let patches = patchify(&rec, codec.patch_seconds).expect("patchify");
    let batch = patch_batch(&patches).expect("batch");
    let train = TrainConfig { seed, ..TrainConfig::default() };
    let mut trainer = Trainer::new(codec, train, 1).expect("trainer");
    trainer.ensure_initialized(&batch).expect("codebook init");
    let ck = trainer.checkpoint();
    ck.save(path).expect("save checkpoint");
    ck
}

const TRAIN_CONFIG: &str = r#"
[codec]
base_channels = 4
stride = 2
latent_dim = 8
num_blocks = 2
patch_seconds = 1.0
num_quantizers = 2
codebook_size = 16

[train]
epochs = 1
batch_size = 8
seed = 5
lr_generator_min = 1e-4
lr_generator_max = 1e-3

[data]
[[data.synthetic]]
num_channels = 2
duration_s = 16.0
noise_sigma = 0.05
seed = 3

[[data.synthetic.burst_events]]
onset_s = 4.0
duration_s = 2.0
amplitude_gain = 4.0

[output]
checkpoint = "model.bcck"
step_log = "steps.csv"
"#;

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&str, &[&str])] = &[
        ("train", &["--config", "--set", "--seed"]),
        ("compress", &["--input-format", "--sampling-rate-hz", "--modality"]),
        ("decompress", &["--output-format", "--force"]),
        ("evaluate", &["--config", "--set", "--seed"]),
        ("sweep", &["--config", "--set"]),
        ("inspect", &[]),
    ];
    let (code, top, _) = run_in(dir.path(), &["--help"], &[]);
    assert_eq!(code, 0);
    for (sub, flags) in cases {
        assert!(top.contains(sub), "top-level help misses {sub}");
        let (code, help, _) = run_in(dir.path(), &[sub, "--help"], &[]);
        assert_eq!(code, 0, "{sub} --help failed");
        for flag in *flags {
            // Every flag's option row must carry a description, not just
            // the name (usage lines don't count).
            let line = help
                .lines()
                .find(|l| l.trim_start().starts_with('-') && l.contains(flag))
                .unwrap_or_else(|| panic!("{sub} --help misses {flag}"));
            let after = line.split(flag).nth(1).unwrap_or("");
            assert!(
                after.split_whitespace().count() > 1,
                "{sub} --help documents {flag} without a description: {line:?}"
            );
        }
    }
}

#[test]
fn train_is_reproducible_and_logs_validation_prd() {
    let run_once = |dir: &Path| {
        std::fs::write(dir.join("config.toml"), TRAIN_CONFIG).unwrap();
        let (code, stdout, stderr) =
            run_in(dir, &["train", "--config", "config.toml"], &[]);
        assert_eq!(code, 0, "train failed: {stderr}");
        assert!(stdout.contains("validation PRD"), "missing PRD lines: {stdout}");
        (
            std::fs::read(dir.join("model.bcck")).unwrap(),
            std::fs::read_to_string(dir.join("model.bcck.log.csv")).unwrap(),
            std::fs::read_to_string(dir.join("steps.csv")).unwrap(),
        )
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ck_a, log_a, steps_a) = run_once(a.path());
    let (ck_b, log_b, steps_b) = run_once(b.path());
    assert_eq!(ck_a, ck_b, "same config and seed must give byte-identical checkpoints");
    assert_eq!(log_a, log_b);
    assert_eq!(steps_a, steps_b);
    assert!(log_a.starts_with("epoch,validation_prd,mean_step_loss\n"));
    // Baseline row plus one trained epoch.
    assert_eq!(log_a.lines().count(), 3, "unexpected log: {log_a}");
    assert!(steps_a.starts_with("step,lr_generator,"));
}

#[test]
fn train_with_different_seed_changes_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), TRAIN_CONFIG).unwrap();
    let (code, _, stderr) = run_in(dir.path(), &["train", "--config", "config.toml"], &[]);
    assert_eq!(code, 0, "{stderr}");
    let first = std::fs::read(dir.path().join("model.bcck")).unwrap();
    let (code, _, stderr) =
        run_in(dir.path(), &["train", "--config", "config.toml", "--seed", "99"], &[]);
    assert_eq!(code, 0, "{stderr}");
    let second = std::fs::read(dir.path().join("model.bcck")).unwrap();
    assert_ne!(first, second);
}

#[test]
fn train_missing_dataset_path_exits_3_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[data]
inputs = ["no_such_recording.bcraw"]
"#;
    std::fs::write(dir.path().join("config.toml"), config).unwrap();
    let (code, _, stderr) = run_in(dir.path(), &["train", "--config", "config.toml"], &[]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("no_such_recording.bcraw"), "stderr must name the path: {stderr}");
}

#[test]
fn train_zero_epochs_still_writes_a_usable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), TRAIN_CONFIG).unwrap();
    let (code, _, stderr) = run_in(
        dir.path(),
        &["train", "--config", "config.toml", "--set", "train.epochs=0"],
        &[],
    );
    assert_eq!(code, 0, "{stderr}");
    let ck = Checkpoint::load(&dir.path().join("model.bcck")).expect("checkpoint loads");
    assert_eq!(ck.step, 0);
    // Usable end to end: the codebooks were initialized before validation.
    let rec = generate(&burst_spec(3, 4.0, &[])).unwrap();
    eval::reconstruct_recording(&rec, &ck).expect("zero-epoch checkpoint reconstructs");
}

#[test]
fn config_mistakes_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), "[train]\nepochz = 1\n").unwrap();
    let (code, _, stderr) = run_in(dir.path(), &["train", "--config", "config.toml"], &[]);
    assert_eq!(code, 2, "unknown key must be a config error: {stderr}");

    std::fs::write(dir.path().join("ok.toml"), TRAIN_CONFIG).unwrap();
    let (code, _, _) =
        run_in(dir.path(), &["train", "--config", "ok.toml", "--set", "not_key_value"], &[]);
    assert_eq!(code, 2);

    let (code, _, _) = run_in(dir.path(), &["train", "--config", "absent.toml"], &[]);
    assert_eq!(code, 2);
}

#[test]
fn data_root_env_var_rebases_relative_inputs() {
    let data_dir = tempfile::tempdir().unwrap();
    let work_dir = tempfile::tempdir().unwrap();
    let rec = generate(&burst_spec(3, 16.0, &[4.0])).unwrap();
    save_recording(&data_dir.path().join("rec.bcraw"), &rec, &RecordingFormat::BcRaw).unwrap();
    let config = r#"
[codec]
base_channels = 4
stride = 2
latent_dim = 8
num_blocks = 2
patch_seconds = 1.0
num_quantizers = 2
codebook_size = 16

[train]
epochs = 0

[data]
inputs = ["rec.bcraw"]
"#;
    std::fs::write(work_dir.path().join("config.toml"), config).unwrap();
    let (code, _, stderr) = run_in(work_dir.path(), &["train", "--config", "config.toml"], &[]);
    assert_eq!(code, 3, "without the data root the input must be missing: {stderr}");
    let root = data_dir.path().to_str().unwrap();
    let (code, _, stderr) = run_in(
        work_dir.path(),
        &["train", "--config", "config.toml"],
        &[("BRAINCODEC_DATA_ROOT", root)],
    );
    assert_eq!(code, 0, "{stderr}");
}

#[test]
fn compress_prints_nominal_cr_and_matches_the_in_process_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    // Stock architecture: downsample 2^6 = 64 at 32 bits over 4 stages of
    // 256 codes gives a nominal ratio of exactly 64.
    let codec = CodecConfig::default();
    let init_spec = burst_spec(21, 36.0, &[6.0]);
    let ck = write_checkpoint(codec, 1, &init_spec, &dir.path().join("model.bcck"));

    let rec = generate(&burst_spec(22, 8.0, &[2.0])).unwrap();
    save_recording(&dir.path().join("rec.bcraw"), &rec, &RecordingFormat::BcRaw).unwrap();

    let (code, stdout, stderr) = run_in(
        dir.path(),
        &["compress", "rec.bcraw", "model.bcck", "rec.bcc"],
        &[],
    );
    assert_eq!(code, 0, "{stderr}");
    assert!(
        stdout.contains("nominal compression ratio: 64.00"),
        "expected the stock config to print 64.00: {stdout}"
    );
    assert!(stdout.contains("measured compression ratio:"), "{stdout}");

    let (code, _, stderr) = run_in(
        dir.path(),
        &["decompress", "rec.bcc", "model.bcck", "round.bcraw"],
        &[],
    );
    assert_eq!(code, 0, "{stderr}");

    // The file pipeline must agree with the in-process one at every format
    // boundary. Raw recordings store f32 samples, so the in-memory arm reads
    // the source back from disk and pushes its reconstruction through the
    // same raw write before comparing.
    let src = load_recording(&dir.path().join("rec.bcraw"), &RecordingFormat::BcRaw).unwrap();
    let container_mem = eval::compress_recording(&src, &ck).unwrap();
    let container_file = std::fs::read(dir.path().join("rec.bcc")).unwrap();
    assert_eq!(container_mem, container_file, "containers must be byte-identical");

    let mem_rec = eval::decompress_container(&container_file, &ck).unwrap();
    save_recording(&dir.path().join("mem.bcraw"), &mem_rec, &RecordingFormat::BcRaw).unwrap();
    let mem_file = load_recording(&dir.path().join("mem.bcraw"), &RecordingFormat::BcRaw).unwrap();
    let file_rec =
        load_recording(&dir.path().join("round.bcraw"), &RecordingFormat::BcRaw).unwrap();
    assert_eq!(file_rec.samples, mem_file.samples, "decoded recordings must agree");

    let report_file =
        eval::recording_metrics(&src, &file_rec, ck.codec_config.patch_seconds, 64.0).unwrap();
    let report_mem =
        eval::recording_metrics(&src, &mem_file, ck.codec_config.patch_seconds, 64.0).unwrap();
    assert_eq!(report_file.prd, report_mem.prd, "file and in-memory PRD must match exactly");
}

#[test]
fn decompress_refuses_a_foreign_model_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let spec = burst_spec(31, 16.0, &[4.0]);
    write_checkpoint(tiny_codec(), 1, &spec, &dir.path().join("a.bcck"));
    write_checkpoint(tiny_codec(), 2, &spec, &dir.path().join("b.bcck"));

    let rec = generate(&burst_spec(32, 4.0, &[])).unwrap();
    save_recording(&dir.path().join("rec.bcraw"), &rec, &RecordingFormat::BcRaw).unwrap();

    let (code, _, stderr) =
        run_in(dir.path(), &["compress", "rec.bcraw", "a.bcck", "rec.bcc"], &[]);
    assert_eq!(code, 0, "{stderr}");

    let (code, _, stderr) =
        run_in(dir.path(), &["decompress", "rec.bcc", "b.bcck", "out.bcraw"], &[]);
    assert_eq!(code, 3, "foreign model must be refused");
    assert!(stderr.contains("--force"), "refusal must point at --force: {stderr}");
    assert!(!dir.path().join("out.bcraw").exists());

    let (code, _, stderr) = run_in(
        dir.path(),
        &["decompress", "rec.bcc", "b.bcck", "out.bcraw", "--force"],
        &[],
    );
    assert_eq!(code, 0, "forced decode should proceed: {stderr}");
    assert!(stderr.contains("different model"), "{stderr}");
    assert!(dir.path().join("out.bcraw").exists());
}

#[test]
fn sweep_writes_one_csv_row_per_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = burst_spec(41, 16.0, &[4.0]);
    let mut wide = tiny_codec();
    wide.num_quantizers = 1;
    write_checkpoint(tiny_codec(), 1, &spec, &dir.path().join("a.bcck"));
    write_checkpoint(wide, 1, &spec, &dir.path().join("b.bcck"));

    let config = r#"
[data]
[[data.synthetic]]
num_channels = 2
duration_s = 8.0
seed = 42

[sweep]
checkpoints = ["a.bcck", "b.bcck"]
csv = "sweep.csv"
"#;
    std::fs::write(dir.path().join("config.toml"), config).unwrap();
    let (code, stdout, stderr) = run_in(dir.path(), &["sweep", "--config", "config.toml"], &[]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("wrote 2 rows"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus two rows: {csv}");
    assert!(csv.starts_with("compression_ratio,num_quantizers,codebook_size,median_prd,"));

    let (code, _, _) = run_in(
        dir.path(),
        &["sweep", "--config", "config.toml", "--set", "sweep.checkpoints=[]"],
        &[],
    );
    assert_eq!(code, 2, "an empty checkpoint list is a config error");
}

#[test]
fn evaluate_writes_the_documented_csv_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let init_spec = burst_spec(51, 16.0, &[4.0]);
    write_checkpoint(tiny_codec(), 1, &init_spec, &dir.path().join("model.bcck"));

    let config = r#"
[data]
[[data.synthetic]]
num_channels = 2
duration_s = 16.0
seed = 11

[[data.synthetic.burst_events]]
onset_s = 3.0
duration_s = 2.0
amplitude_gain = 5.0

[[data.synthetic.burst_events]]
onset_s = 10.0
duration_s = 2.0
amplitude_gain = 5.0

[[data.synthetic]]
num_channels = 2
duration_s = 16.0
seed = 12

[[data.synthetic.burst_events]]
onset_s = 5.0
duration_s = 2.0
amplitude_gain = 5.0

[protocol]
cv = "fixed_split"
classifier_epochs = 2
window_seconds = 2.0
batch_size = 8

[evaluate]
checkpoint = "model.bcck"
report_csv = "degradation.csv"
report_json = "degradation.json"
"#;
    std::fs::write(dir.path().join("config.toml"), config).unwrap();
    let run_eval = || {
        let (code, stdout, stderr) =
            run_in(dir.path(), &["evaluate", "--config", "config.toml"], &[]);
        assert_eq!(code, 0, "{stderr}");
        assert!(stdout.contains("degradation:"), "{stdout}");
        (
            std::fs::read_to_string(dir.path().join("degradation.csv")).unwrap(),
            std::fs::read_to_string(dir.path().join("degradation.json")).unwrap(),
        )
    };
    let (csv_a, json_a) = run_eval();
    let (csv_b, json_b) = run_eval();
    assert_eq!(csv_a, csv_b, "evaluation must be deterministic");
    assert_eq!(json_a, json_b);

    let mut lines = csv_a.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scope,subject,events,weight,f1_original,f1_reconstructed,degradation"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3, "two subject rows plus the dataset row: {csv_a}");
    assert!(rows[0].starts_with("subject,0,2,"));
    assert!(rows[1].starts_with("subject,1,1,"));
    assert!(rows[2].starts_with("dataset,,3,"));
}

#[test]
fn inspect_summarizes_every_artifact_kind() {
    let dir = tempfile::tempdir().unwrap();
    let spec = burst_spec(61, 16.0, &[4.0]);
    let rec = generate(&spec).unwrap();
    save_recording(&dir.path().join("rec.bcraw"), &rec, &RecordingFormat::BcRaw).unwrap();
    let ck = write_checkpoint(tiny_codec(), 1, &spec, &dir.path().join("model.bcck"));
    let container = eval::compress_recording(&rec, &ck).unwrap();
    std::fs::write(dir.path().join("rec.bcc"), &container).unwrap();

    let (code, stdout, stderr) = run_in(dir.path(), &["inspect", "rec.bcraw"], &[]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("type: recording"), "{stdout}");
    assert!(stdout.contains("channels: 2"), "{stdout}");
    assert!(stdout.contains("annotations: 1"), "{stdout}");

    let (code, stdout, _) = run_in(dir.path(), &["inspect", "rec.bcc"], &[]);
    assert_eq!(code, 0);
    assert!(stdout.contains("type: compressed container"), "{stdout}");
    assert!(stdout.contains("model hash:"), "{stdout}");

    let (code, stdout, _) = run_in(dir.path(), &["inspect", "model.bcck"], &[]);
    assert_eq!(code, 0);
    assert!(stdout.contains("type: checkpoint"), "{stdout}");
    assert!(stdout.contains("variant: base"), "{stdout}");

    std::fs::write(dir.path().join("junk.bin"), b"garbage").unwrap();
    let (code, _, _) = run_in(dir.path(), &["inspect", "junk.bin"], &[]);
    assert_eq!(code, 3);
}

#[test]
fn outputs_land_where_the_config_says() {
    // Idempotence guard: rerunning over existing outputs must succeed and
    // leave identical bytes, never append or mangle.
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), TRAIN_CONFIG).unwrap();
    let (code, _, stderr) = run_in(dir.path(), &["train", "--config", "config.toml"], &[]);
    assert_eq!(code, 0, "{stderr}");
    let first = std::fs::read(dir.path().join("model.bcck")).unwrap();
    let (code, _, stderr) = run_in(dir.path(), &["train", "--config", "config.toml"], &[]);
    assert_eq!(code, 0, "{stderr}");
    let second = std::fs::read(dir.path().join("model.bcck")).unwrap();
    assert_eq!(first, second);
}
