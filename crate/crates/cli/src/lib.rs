//! Library half of the `tadevoc` command-line tool.
//!
//! Each subcommand is an ordinary function over a plain argument struct
//! (the same structs double as the clap definitions), so the whole
//! surface is callable in-process by tests. Commands validate all
//! inputs before touching the filesystem, and every random decision
//! flows from the single `--seed` flag through fixed-salt splits.

pub mod bench;
pub mod copysyn;
pub mod feats;
pub mod pqmf_check;
pub mod train;
pub mod wav;

use std::path::{Path, PathBuf};

use tadevoc_core::features::MelConfig;
use tadevoc_core::generator::GeneratorConfig;
use tadevoc_core::{Error, Result};

/// Audio rate of the feature pipeline and of every WAV this tool reads
/// or writes.
pub const SAMPLE_RATE: u32 = 22050;

/// Normalization statistics live next to the checkpoint under this
/// appended extension.
pub fn stats_sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".msta");
    PathBuf::from(s)
}

/// Feature configuration matching a generator: the band count mirrors
/// the conditioning channels and the hop equals the upsampling factor,
/// so frame count × hop = synthesized samples.
pub fn mel_config_for(gen: &GeneratorConfig) -> Result<MelConfig> {
    let config = MelConfig {
        num_mels: gen.mel_channels,
        hop_size: gen.upsampling_factor(),
        ..MelConfig::default()
    };
    config.validate()?;
    Ok(config)
}

/// Run `f` on a dedicated pool of exactly `threads` workers. Kernel
/// results do not depend on the pool size (work is split at fixed
/// boundaries); the flag only trades wall time for cores.
pub fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return Err(Error::config("thread count must be at least 1".to_string()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("could not build a {threads}-thread pool: {e}")))?;
    pool.install(f)
}

/// Derive an independent seed from the root seed and a fixed salt
/// (splitmix64 of the XOR), so different consumers never share a stream.
pub fn mix_seed(root: u64, salt: u64) -> u64 {
    let mut z = (root ^ salt).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
