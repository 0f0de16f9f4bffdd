//! Bit-exact container format for compressed recordings.
//!
//! Layout: a 72-byte little-endian header, the packed code indices, and a
//! trailing CRC-32 over header plus payload. Indices are written in
//! (channel, patch, stage, frame) order, MSB-first within each byte, at
//! ceil(log2(codebook_size)) bits each, padded to a byte boundary per patch.

use crate::quantizer::CodeGrid;
use ndarray::Array2;

pub const CONTAINER_MAGIC: [u8; 4] = *b"BCC1";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 72;
pub const CRC_LEN: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad container magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionUnsupported(u16),
    #[error("container truncated: needed {needed} bytes, got {got}")]
    TruncatedPayload { needed: usize, got: usize },
    #[error("container checksum mismatch")]
    ChecksumMismatch,
    #[error("code index {index} out of range for codebook size {limit}")]
    IndexOverflow { index: u32, limit: u16 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}

/// CRC-32 (IEEE reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Fixed-size container header. `downsample_exponent` is log2 of the codec's
/// total downsampling factor, so latent frames per patch are
/// patch_samples >> downsample_exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerHeader {
    pub version: u16,
    pub model_hash: [u8; 32],
    pub sampling_rate_hz: f64,
    pub channels: u32,
    pub total_samples: u64,
    pub patch_samples: u32,
    pub downsample_exponent: u8,
    pub num_quantizers: u8,
    pub codebook_size: u16,
    pub raw_bits_per_sample: u8,
    pub modality: u8,
    pub true_tail_length: u32,
}

impl ContainerHeader {
    /// Bits needed for one index: ceil(log2(codebook_size)).
    pub fn bits_per_index(&self) -> u32 {
        (self.codebook_size as u32 - 1).max(1).ilog2() + 1
    }

    pub fn latent_frames(&self) -> usize {
        (self.patch_samples as usize) >> self.downsample_exponent
    }

    pub fn num_patches(&self) -> usize {
        (self.total_samples as usize).div_ceil(self.patch_samples as usize).max(1)
    }

    /// Payload bytes per patch, byte-aligned.
    pub fn patch_payload_bytes(&self) -> usize {
        let bits = self.num_quantizers as usize * self.latent_frames() * self.bits_per_index() as usize;
        bits.div_ceil(8)
    }

    /// Total container length in bytes, checksum included. Saturates on
    /// geometries too large to exist, so hostile headers fail the length
    /// check instead of overflowing.
    pub fn container_size(&self) -> usize {
        (self.channels as usize)
            .saturating_mul(self.num_patches())
            .saturating_mul(self.patch_payload_bytes())
            .saturating_add(HEADER_LEN + CRC_LEN)
    }

    fn expected_tail(&self) -> u64 {
        self.total_samples - (self.num_patches() as u64 - 1) * self.patch_samples as u64
    }

    pub fn validate(&self) -> Result<(), BitstreamError> {
        let geom = |m: String| Err(BitstreamError::GeometryMismatch(m));
        if self.version != CONTAINER_VERSION {
            return Err(BitstreamError::VersionUnsupported(self.version));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return geom(format!("bad sampling rate {}", self.sampling_rate_hz));
        }
        if self.channels == 0 {
            return geom("zero channels".into());
        }
        if self.patch_samples == 0 {
            return geom("zero patch size".into());
        }
        if self.codebook_size < 2 {
            return geom(format!("codebook size {} below 2", self.codebook_size));
        }
        if self.num_quantizers == 0 {
            return geom("zero quantizer stages".into());
        }
        if self.raw_bits_per_sample == 0 {
            return geom("zero raw bits per sample".into());
        }
        // patch_samples is 32-bit, so any exponent of 32 or more cannot
        // divide it; bounding it here also keeps the shifts below defined.
        if self.downsample_exponent >= 32 {
            return geom(format!("downsample exponent {} out of range", self.downsample_exponent));
        }
        let factor = 1u64 << self.downsample_exponent;
        if self.patch_samples as u64 % factor != 0 || (self.patch_samples as u64) < factor {
            return geom(format!(
                "patch of {} samples not divisible by downsample factor {factor}",
                self.patch_samples
            ));
        }
        if self.true_tail_length as u64 != self.expected_tail() {
            return geom(format!(
                "tail length {} inconsistent with {} total samples",
                self.true_tail_length, self.total_samples
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&CONTAINER_MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..38].copy_from_slice(&self.model_hash);
        out[38..46].copy_from_slice(&self.sampling_rate_hz.to_le_bytes());
        out[46..50].copy_from_slice(&self.channels.to_le_bytes());
        out[50..58].copy_from_slice(&self.total_samples.to_le_bytes());
        out[58..62].copy_from_slice(&self.patch_samples.to_le_bytes());
        out[62] = self.downsample_exponent;
        out[63] = self.num_quantizers;
        out[64..66].copy_from_slice(&self.codebook_size.to_le_bytes());
        out[66] = self.raw_bits_per_sample;
        out[67] = self.modality;
        out[68..72].copy_from_slice(&self.true_tail_length.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BitstreamError> {
        if bytes.len() < 4 {
            return Err(BitstreamError::TruncatedPayload { needed: 4, got: bytes.len() });
        }
        if bytes[0..4] != CONTAINER_MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(BitstreamError::TruncatedPayload { needed: HEADER_LEN, got: bytes.len() });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(BitstreamError::VersionUnsupported(version));
        }
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(&bytes[6..38]);
        let header = ContainerHeader {
            version,
            model_hash,
            sampling_rate_hz: f64::from_le_bytes(bytes[38..46].try_into().unwrap()),
            channels: u32::from_le_bytes(bytes[46..50].try_into().unwrap()),
            total_samples: u64::from_le_bytes(bytes[50..58].try_into().unwrap()),
            patch_samples: u32::from_le_bytes(bytes[58..62].try_into().unwrap()),
            downsample_exponent: bytes[62],
            num_quantizers: bytes[63],
            codebook_size: u16::from_le_bytes(bytes[64..66].try_into().unwrap()),
            raw_bits_per_sample: bytes[66],
            modality: bytes[67],
            true_tail_length: u32::from_le_bytes(bytes[68..72].try_into().unwrap()),
        };
        header.validate()?;
        Ok(header)
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    nbits: u8,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), acc: 0, nbits: 0 }
    }

    fn write(&mut self, value: u32, bits: u32) {
        debug_assert!(bits >= 1 && bits <= 32);
        for i in (0..bits).rev() {
            let bit = ((value >> i) & 1) as u8;
            self.acc = (self.acc << 1) | bit;
            self.nbits += 1;
            if self.nbits == 8 {
                self.bytes.push(self.acc);
                self.acc = 0;
                self.nbits = 0;
            }
        }
    }

    fn align(&mut self) {
        if self.nbits > 0 {
            self.acc <<= 8 - self.nbits;
            self.bytes.push(self.acc);
            self.acc = 0;
            self.nbits = 0;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn read(&mut self, bits: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..bits {
            let byte = self.bytes[self.pos / 8];
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        v
    }
}

fn check_grids(header: &ContainerHeader, grids: &[Vec<CodeGrid>]) -> Result<(), BitstreamError> {
    if grids.len() != header.channels as usize {
        return Err(BitstreamError::GeometryMismatch(format!(
            "{} channels of grids vs header {}",
            grids.len(),
            header.channels
        )));
    }
    let np = header.num_patches();
    let want = (header.num_quantizers as usize, header.latent_frames());
    for (c, patches) in grids.iter().enumerate() {
        if patches.len() != np {
            return Err(BitstreamError::GeometryMismatch(format!(
                "channel {c}: {} patches vs expected {np}",
                patches.len()
            )));
        }
        for (p, grid) in patches.iter().enumerate() {
            if grid.indices.dim() != want {
                return Err(BitstreamError::GeometryMismatch(format!(
                    "channel {c} patch {p}: grid {:?} vs expected {want:?}",
                    grid.indices.dim()
                )));
            }
            for &idx in grid.indices.iter() {
                if idx >= header.codebook_size as u32 {
                    return Err(BitstreamError::IndexOverflow {
                        index: idx,
                        limit: header.codebook_size,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Serializes code grids (indexed [channel][patch]) into a container.
pub fn serialize(
    header: &ContainerHeader,
    grids: &[Vec<CodeGrid>],
) -> Result<Vec<u8>, BitstreamError> {
    header.validate()?;
    check_grids(header, grids)?;
    let bits = header.bits_per_index();
    let mut out = Vec::with_capacity(header.container_size());
    out.extend_from_slice(&header.encode());
    for patches in grids {
        for grid in patches {
            let mut w = BitWriter::new();
            for s in 0..grid.indices.nrows() {
                for f in 0..grid.indices.ncols() {
                    w.write(grid.indices[[s, f]], bits);
                }
            }
            w.align();
            out.extend_from_slice(&w.bytes);
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Exact inverse of `serialize`. The byte slice must hold exactly one
/// container; corruption surfaces as a structural error or checksum mismatch.
pub fn deserialize(bytes: &[u8]) -> Result<(ContainerHeader, Vec<Vec<CodeGrid>>), BitstreamError> {
    let header = ContainerHeader::decode(bytes)?;
    let total = header.container_size();
    if bytes.len() < total {
        return Err(BitstreamError::TruncatedPayload { needed: total, got: bytes.len() });
    }
    if bytes.len() > total {
        return Err(BitstreamError::GeometryMismatch(format!(
            "{} trailing bytes after container",
            bytes.len() - total
        )));
    }
    let stored = u32::from_le_bytes(bytes[total - CRC_LEN..total].try_into().unwrap());
    if crc32(&bytes[..total - CRC_LEN]) != stored {
        return Err(BitstreamError::ChecksumMismatch);
    }
    let bits = header.bits_per_index();
    let (n_q, t_lat) = (header.num_quantizers as usize, header.latent_frames());
    let ppb = header.patch_payload_bytes();
    let np = header.num_patches();
    let mut grids = Vec::with_capacity(header.channels as usize);
    let mut offset = HEADER_LEN;
    for _ in 0..header.channels {
        let mut patches = Vec::with_capacity(np);
        for _ in 0..np {
            let mut r = BitReader::new(&bytes[offset..offset + ppb]);
            let mut indices = Array2::<u32>::zeros((n_q, t_lat));
            for s in 0..n_q {
                for f in 0..t_lat {
                    let idx = r.read(bits);
                    if idx >= header.codebook_size as u32 {
                        return Err(BitstreamError::IndexOverflow {
                            index: idx,
                            limit: header.codebook_size,
                        });
                    }
                    indices[[s, f]] = idx;
                }
            }
            patches.push(CodeGrid { indices });
            offset += ppb;
        }
        grids.push(patches);
    }
    Ok((header, grids))
}

/// End-to-end storage ratio of a container against the original encoding,
/// header and checksum overhead included. The nominal ratio of the codec
/// ignores this overhead; they converge for long recordings.
pub fn measured_compression_ratio(header: &ContainerHeader, original_byte_count: u64) -> f64 {
    assert!(original_byte_count > 0, "original byte count must be positive");
    original_byte_count as f64 / header.container_size() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn header(
        channels: u32,
        total: u64,
        patch: u32,
        nexp: u8,
        n_q: u8,
        k: u16,
    ) -> ContainerHeader {
        let np = (total as usize).div_ceil(patch as usize).max(1) as u64;
        ContainerHeader {
            version: CONTAINER_VERSION,
            model_hash: [7u8; 32],
            sampling_rate_hz: 256.0,
            channels,
            total_samples: total,
            patch_samples: patch,
            downsample_exponent: nexp,
            num_quantizers: n_q,
            codebook_size: k,
            raw_bits_per_sample: 32,
            modality: 0,
            true_tail_length: (total - (np - 1) * patch as u64) as u32,
        }
    }

    fn random_grids(h: &ContainerHeader, seed: u64) -> Vec<Vec<CodeGrid>> {
        let mut rng = Rng::seeded(seed);
        (0..h.channels)
            .map(|_| {
                (0..h.num_patches())
                    .map(|_| {
                        let indices = Array2::from_shape_fn(
                            (h.num_quantizers as usize, h.latent_frames()),
                            |_| rng.below(h.codebook_size as usize) as u32,
                        );
                        CodeGrid { indices }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn crc32_matches_the_standard_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn header_encodes_to_72_bytes_with_magic_and_version_first() {
        let h = header(2, 2048, 1024, 6, 4, 256);
        let bytes = h.encode();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[0..4], b"BCC1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let back = ContainerHeader::decode(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.sampling_rate_hz.to_bits(), h.sampling_rate_hz.to_bits());
    }

    #[test]
    fn byte_sized_indices_give_one_byte_per_index() {
        let h = header(1, 1024, 1024, 6, 4, 256);
        assert_eq!(h.bits_per_index(), 8);
        assert_eq!(h.latent_frames(), 16);
        assert_eq!(h.patch_payload_bytes(), 64);
        let bytes = serialize(&h, &random_grids(&h, 1)).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 64 + CRC_LEN);
    }

    #[test]
    fn six_bit_indices_pack_64_into_48_bytes() {
        // 64 indices at 6 bits each = 384 bits = 48 bytes.
        let h = header(1, 1024, 1024, 4, 1, 64);
        assert_eq!(h.bits_per_index(), 6);
        assert_eq!(h.latent_frames(), 64);
        assert_eq!(h.patch_payload_bytes(), 48);
    }

    #[test]
    fn payload_size_formula_holds_across_the_test_grid() {
        for &n_q in &[1u8, 4, 8, 16] {
            for &k in &[64u16, 256, 1024] {
                for &t_lat in &[4u32, 16, 64] {
                    // patch = t_lat * 2^4 with exponent 4.
                    let h = header(2, (t_lat * 16 * 3) as u64, t_lat * 16, 4, n_q, k);
                    assert_eq!(h.latent_frames() as u32, t_lat);
                    let bits = (k as u32 - 1).ilog2() + 1;
                    let expect_ppb =
                        ((n_q as usize * t_lat as usize * bits as usize) + 7) / 8;
                    assert_eq!(h.patch_payload_bytes(), expect_ppb);
                    let bytes = serialize(&h, &random_grids(&h, 9)).unwrap();
                    assert_eq!(
                        bytes.len(),
                        HEADER_LEN + 2 * h.num_patches() * expect_ppb + CRC_LEN
                    );
                }
            }
        }
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let h = header(3, 5000, 1024, 6, 4, 256);
        let grids = random_grids(&h, 2);
        let bytes = serialize(&h, &grids).unwrap();
        let again = serialize(&h, &grids).unwrap();
        assert_eq!(bytes, again, "serialization must be deterministic");
        let (h2, g2) = deserialize(&bytes).unwrap();
        assert_eq!(h2, h);
        assert_eq!(g2.len(), grids.len());
        for (a, b) in grids.iter().flatten().zip(g2.iter().flatten()) {
            assert_eq!(a.indices, b.indices);
        }
    }

    #[test]
    fn short_recordings_round_trip_with_recorded_tail() {
        // 300 samples in a 1024-sample patch: one padded patch, tail 300.
        let h = header(1, 300, 1024, 6, 4, 256);
        assert_eq!(h.num_patches(), 1);
        assert_eq!(h.true_tail_length, 300);
        let grids = random_grids(&h, 3);
        let (h2, g2) = deserialize(&serialize(&h, &grids).unwrap()).unwrap();
        assert_eq!(h2.true_tail_length, 300);
        assert_eq!(g2[0][0].indices, grids[0][0].indices);
    }

    #[test]
    fn corruption_is_always_reported() {
        let h = header(2, 4096, 1024, 6, 4, 256);
        let bytes = serialize(&h, &random_grids(&h, 4)).unwrap();

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert_eq!(deserialize(&bad), Err(BitstreamError::BadMagic));

        let mut bad = bytes.clone();
        bad[4] ^= 0x02;
        assert!(matches!(deserialize(&bad), Err(BitstreamError::VersionUnsupported(_))));

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(deserialize(truncated), Err(BitstreamError::TruncatedPayload { .. })));

        let mut bad = bytes.clone();
        let mid = HEADER_LEN + 10;
        bad[mid] ^= 0x10;
        assert_eq!(deserialize(&bad), Err(BitstreamError::ChecksumMismatch));

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x01;
        assert_eq!(deserialize(&bad), Err(BitstreamError::ChecksumMismatch));
    }

    #[test]
    fn geometry_and_index_violations_are_rejected_at_serialize_time() {
        let h = header(2, 2048, 1024, 6, 4, 256);
        let grids = random_grids(&h, 5);
        assert!(matches!(
            serialize(&h, &grids[..1]),
            Err(BitstreamError::GeometryMismatch(_))
        ));
        let mut overflow = random_grids(&h, 6);
        overflow[0][0].indices[[0, 0]] = 256;
        assert_eq!(
            serialize(&h, &overflow),
            Err(BitstreamError::IndexOverflow { index: 256, limit: 256 })
        );
        let mut wrong_shape = random_grids(&h, 7);
        wrong_shape[1][0].indices = Array2::zeros((2, 16));
        assert!(matches!(
            serialize(&h, &wrong_shape),
            Err(BitstreamError::GeometryMismatch(_))
        ));
        let mut bad_header = h.clone();
        bad_header.true_tail_length = 5;
        assert!(matches!(
            serialize(&bad_header, &grids),
            Err(BitstreamError::GeometryMismatch(_))
        ));
    }

    #[test]
    fn concatenated_containers_split_by_header_lengths() {
        let h1 = header(1, 1024, 1024, 6, 4, 256);
        let h2 = header(2, 2048, 1024, 4, 2, 64);
        let b1 = serialize(&h1, &random_grids(&h1, 8)).unwrap();
        let b2 = serialize(&h2, &random_grids(&h2, 9)).unwrap();
        let mut joined = b1.clone();
        joined.extend_from_slice(&b2);
        let first = ContainerHeader::decode(&joined).unwrap();
        let split = first.container_size();
        assert_eq!(split, b1.len());
        assert!(deserialize(&joined[..split]).is_ok());
        assert!(deserialize(&joined[split..]).is_ok());
        // The undivided buffer is rejected rather than silently half-read.
        assert!(matches!(deserialize(&joined), Err(BitstreamError::GeometryMismatch(_))));
    }

    #[test]
    fn measured_ratio_approaches_the_nominal_ratio_for_long_recordings() {
        // One hour at 512 Hz, 36 channels, 32-bit samples, nominal ratio 64.
        let t = 512u64 * 3600;
        let h = header(36, t, 1024, 6, 4, 256);
        let original = 36 * t * 4;
        let measured = measured_compression_ratio(&h, original);
        assert!((measured - 64.0).abs() / 64.0 < 0.01, "measured {measured}");

        // A single patch is dominated by header overhead.
        let h1 = header(1, 1024, 1024, 6, 4, 256);
        let single = measured_compression_ratio(&h1, 1024 * 4);
        assert!(single < 64.0);

        // Doubling the recording halves the header's share of the payload:
        // measured = nominal / (1 + overhead), overhead = header bytes per
        // payload byte.
        let h2 = header(1, 2048, 1024, 6, 4, 256);
        let double = measured_compression_ratio(&h2, 2048 * 4);
        assert!(double > single);
        let overhead1 = 64.0 / single - 1.0;
        let overhead2 = 64.0 / double - 1.0;
        assert!((overhead1 / overhead2 - 2.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn serialize_deserialize_round_trips(
            channels in 1u32..4,
            patches in 1usize..4,
            nexp in 1u8..5,
            n_q in 1u8..6,
            k in 2u16..600,
            seed in 0u64..1000,
        ) {
            let patch = 1u32 << (nexp + 2);
            let total = (patches as u64) * patch as u64 - (patch as u64 / 2);
            let h = header(channels, total, patch, nexp, n_q, k);
            let grids = random_grids(&h, seed);
            let bytes = serialize(&h, &grids).unwrap();
            let (h2, g2) = deserialize(&bytes).unwrap();
            prop_assert_eq!(&h2, &h);
            for (a, b) in grids.iter().flatten().zip(g2.iter().flatten()) {
                prop_assert_eq!(&a.indices, &b.indices);
            }
        }
    }
}
