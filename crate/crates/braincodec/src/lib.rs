pub mod bitstream;
pub mod cli;
pub mod codec;
pub mod discriminator;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod quantizer;
pub mod rng;
pub mod signal_io;
pub mod synth;
pub mod tensor;
pub mod trainer;
