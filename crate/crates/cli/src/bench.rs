//! Real-time-factor benchmark: synthesize from standard-normal
//! mel-shaped conditioning (throughput depends only on shapes, so no
//! corpus is needed) and report wall time, RTF, and the parameter count.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tadevoc_core::features::MelSpectrogram;
use tadevoc_core::generator::{count_parameters, generate};
use tadevoc_core::nn::FeatureMap;
use tadevoc_core::train::load_checkpoint;
use tadevoc_core::{Error, Result};

use crate::{mel_config_for, mix_seed, run_in_pool};

const SALT_BENCH_COND: u64 = 0x10;
const SALT_BENCH_NOISE: u64 = 0x11;

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Model checkpoint to benchmark.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Seconds of audio to synthesize.
    #[arg(long, default_value_t = 5.0)]
    pub seconds: f64,
    /// Worker threads for the numeric kernels.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Root seed for the conditioning and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Measured throughput of one synthesis run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub synthesized_seconds: f64,
    pub wall_seconds: f64,
    /// Audio seconds produced per wall second; > 1 is faster than
    /// real time.
    pub rtf: f64,
    pub thread_count: usize,
    pub parameter_count: usize,
}

impl BenchReport {
    /// Line-delimited `key=value` records.
    pub fn lines(&self) -> String {
        format!(
            "synthesized_seconds={:.6}\nwall_seconds={:.6}\nrtf={:.4}\nthread_count={}\nparameter_count={}",
            self.synthesized_seconds,
            self.wall_seconds,
            self.rtf,
            self.thread_count,
            self.parameter_count
        )
    }
}

pub fn run(args: &BenchArgs) -> Result<BenchReport> {
    if !(args.seconds > 0.0) || !args.seconds.is_finite() {
        return Err(Error::config(format!(
            "benchmark duration must be positive, got {}",
            args.seconds
        )));
    }
    let state = load_checkpoint(&args.ckpt)?;
    let config = state.generator.config;
    let mel_config = mel_config_for(&config)?;
    let hop = mel_config.hop_size;
    let sr = mel_config.sample_rate;

    let frames = ((args.seconds * sr / hop as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(args.seed, SALT_BENCH_COND));
    let data: Vec<f32> = (0..mel_config.num_mels * frames)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let map = FeatureMap::from_vec(mel_config.num_mels, frames, data)?;
    let mel = MelSpectrogram::new(map, sr, hop, mel_config.fingerprint());

    let wave = run_in_pool(args.threads, || {
        let t0 = Instant::now();
        let wave = generate(&mel, &state.generator, mix_seed(args.seed, SALT_BENCH_NOISE))?;
        Ok((wave, t0.elapsed().as_secs_f64()))
    })?;
    let (wave, wall) = wave;
    let wall_seconds = wall.max(1e-9);
    let synthesized_seconds = wave.len() as f64 / sr;
    Ok(BenchReport {
        synthesized_seconds,
        wall_seconds,
        rtf: synthesized_seconds / wall_seconds,
        thread_count: args.threads,
        parameter_count: count_parameters(&state.generator),
    })
}
