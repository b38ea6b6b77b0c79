//! Command implementations behind the `duotts` binary. Every command reads
//! and writes a run directory:
//!
//! ```text
//! data/         corpus, alignment pairs, quadruples, codebook, balance.json
//! checkpoints/  one file per training step
//! reports/      per-step training reports, eval and forgetting results
//! manifests/    config hash, seed, versions and file digests per command
//! ```

pub mod config;
pub mod datagen;
pub mod eval;
pub mod forget;
pub mod pipeline;
pub mod run;
pub mod synth;
pub mod train;

use duotts::Error;

pub const EXIT_ARGUMENT: i32 = 2;
pub const EXIT_DEPENDENCY: i32 = 3;
pub const EXIT_DATA: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => EXIT_ARGUMENT,
        Error::Dependency(_) => EXIT_DEPENDENCY,
        Error::Data(_) | Error::Format(_) => EXIT_DATA,
        _ => 1,
    }
}
