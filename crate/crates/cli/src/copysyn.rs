//! Copy-synthesis: analyze a recording into normalized log-mel features
//! and drive the generator with them, reconstructing the utterance.

use std::path::PathBuf;

use clap::Args;

use tadevoc_core::features::{log_mel_extract, read_stats};
use tadevoc_core::generator::generate;
use tadevoc_core::train::load_checkpoint;
use tadevoc_core::{Error, Result};

use crate::wav::{ensure_sample_rate, read_wav, write_wav};
use crate::{mel_config_for, run_in_pool, stats_sidecar, SAMPLE_RATE};

#[derive(Debug, Clone, Args)]
pub struct CopysynArgs {
    /// Input recording (mono 16-bit PCM WAV at 22050 Hz).
    pub input: PathBuf,
    /// Model checkpoint; its `.msta` sidecar supplies the feature
    /// normalization statistics.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output WAV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed for the synthesis noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the numeric kernels.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopysynSummary {
    pub frames: usize,
    pub samples: usize,
}

impl CopysynSummary {
    pub fn line(&self) -> String {
        format!("frames={} samples={}", self.frames, self.samples)
    }
}

pub fn run(args: &CopysynArgs) -> Result<CopysynSummary> {
    let state = load_checkpoint(&args.ckpt)?;
    let stats_path = stats_sidecar(&args.ckpt);
    let stats = read_stats(&stats_path).map_err(|e| match e {
        Error::Io(_) => Error::input(format!(
            "normalization statistics not found next to the checkpoint \
             (expected {}): {e}",
            stats_path.display()
        )),
        other => other,
    })?;
    let wav = read_wav(&args.input)?;
    ensure_sample_rate(&wav, SAMPLE_RATE)?;
    let mel_config = mel_config_for(&state.generator.config)?;

    run_in_pool(args.threads, || {
        let mel = log_mel_extract(&wav.samples, &mel_config, &stats)?;
        let frames = mel.frames();
        let wave = generate(&mel, &state.generator, args.seed)?;
        let samples = wave.len();
        write_wav(&args.out, SAMPLE_RATE, &wave)?;
        Ok(CopysynSummary { frames, samples })
    })
}
