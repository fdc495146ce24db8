//! Feature extraction: normalized log-mel features of a recording,
//! written in the binary grid format.

use std::path::PathBuf;

use clap::Args;

use tadevoc_core::features::{
    log_mel_extract, read_stats, write_melf, FeatureStats, MelConfig,
};
use tadevoc_core::Result;

use crate::wav::{ensure_sample_rate, read_wav};
use crate::{run_in_pool, SAMPLE_RATE};

#[derive(Debug, Clone, Args)]
pub struct FeatsArgs {
    /// Input recording (mono 16-bit PCM WAV at 22050 Hz).
    pub input: PathBuf,
    /// Output feature file.
    #[arg(long)]
    pub out: PathBuf,
    /// Normalization statistics file; without it, features are plain
    /// floored log-mel values (zero mean, unit scale assumed).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Worker threads for the numeric kernels.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatsSummary {
    pub frames: usize,
    pub num_mels: usize,
}

impl FeatsSummary {
    pub fn line(&self) -> String {
        format!("frames={} mels={}", self.frames, self.num_mels)
    }
}

pub fn run(args: &FeatsArgs) -> Result<FeatsSummary> {
    let config = MelConfig::default();
    let stats = match &args.stats {
        Some(path) => read_stats(path)?,
        None => FeatureStats::identity(config.num_mels),
    };
    let wav = read_wav(&args.input)?;
    ensure_sample_rate(&wav, SAMPLE_RATE)?;

    run_in_pool(args.threads, || {
        let mel = log_mel_extract(&wav.samples, &config, &stats)?;
        write_melf(&args.out, &mel)?;
        Ok(FeatsSummary { frames: mel.frames(), num_mels: mel.num_mels() })
    })
}
