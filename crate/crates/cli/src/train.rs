//! Two-phase training on a directory of recordings: reconstruction-only
//! warm-up, then adversarial refinement. Writes checkpoints at phase
//! boundaries (and at a configurable interval) plus a training log whose
//! lines are byte-identical across fixed-seed runs — wall-clock timing
//! goes to stderr only.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use tadevoc_core::discriminator::{default_rwd_specs, init_discriminator};
use tadevoc_core::features::{compute_feature_stats, write_stats, MelConfig};
use tadevoc_core::generator::{count_parameters, init_generator, GeneratorConfig};
use tadevoc_core::losses::AuxLossConfig;
use tadevoc_core::train::{
    load_checkpoint, save_checkpoint, AdamState, TrainConfig, TrainState, Trainer,
};
use tadevoc_core::{Error, Result};

use crate::wav::{ensure_sample_rate, read_wav};
use crate::{mix_seed, run_in_pool, stats_sidecar, SAMPLE_RATE};

/// Seed salt for the generator's initial weights; one stream per
/// consumer, all derived from `--seed`.
pub const SALT_GEN_INIT: u64 = 0x01;
/// Seed salt for the discriminator's initial weights.
pub const SALT_DISC_INIT: u64 = 0x02;

/// Minimum total corpus duration in seconds.
const MIN_CORPUS_SECONDS: f64 = 2.0;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Directory of training recordings (mono 16-bit PCM WAV, 22050 Hz).
    pub data_dir: PathBuf,
    /// Checkpoint path; the normalization sidecar and the log are
    /// written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of fresh parameters. A
    /// reconstruction-phase checkpoint (no discriminator inside) gets a
    /// freshly initialized discriminator.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write a checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Width of the generator's residual blocks.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Channels of the generator's input noise.
    #[arg(long, default_value_t = 128)]
    pub noise_channels: usize,
    /// Worker threads for the numeric kernels.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Reconstruction-only steps before the adversarial phase.
    #[arg(long, default_value_t = 2000)]
    pub pretrain_steps: u64,
    /// Adversarial steps (each pairs one discriminator update with one
    /// generator update).
    #[arg(long, default_value_t = 5000)]
    pub adv_steps: u64,
    /// Generator learning rate during the reconstruction phase.
    #[arg(long, default_value_t = 1e-4)]
    pub lr_g_pretrain: f64,
    /// Generator learning rate during the adversarial phase.
    #[arg(long, default_value_t = 5e-5)]
    pub lr_g_adv: f64,
    /// Discriminator learning rate.
    #[arg(long, default_value_t = 2e-4)]
    pub lr_d: f64,
    /// Segments per batch.
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Segment duration in seconds (cropped to whole feature hops).
    #[arg(long, default_value_t = 1.0)]
    pub segment_seconds: f64,
    /// Windows scored per discriminator per segment.
    #[arg(long, default_value_t = 2)]
    pub window_repeats: usize,
    /// Root seed for every random decision in the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional per-entry gradient clip.
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            pretrain_steps: self.pretrain_steps,
            adv_steps: self.adv_steps,
            lr_g_pretrain: self.lr_g_pretrain,
            lr_g_adv: self.lr_g_adv,
            lr_d: self.lr_d,
            batch_size: self.batch_size,
            segment_seconds: self.segment_seconds,
            window_repeats: self.window_repeats,
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSummary {
    pub final_step: u64,
    pub steps_run: u64,
}

/// Load every `*.wav` under `dir` in file-name order.
fn load_corpus(dir: &Path) -> Result<Vec<Vec<f32>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) && p.is_file()
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::input(format!("no WAV files found in {}", dir.display())));
    }
    let mut corpus = Vec::with_capacity(paths.len());
    let mut total_seconds = 0.0;
    for path in &paths {
        let wav = read_wav(path).map_err(|e| match e {
            Error::Input(msg) => Error::input(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        ensure_sample_rate(&wav, SAMPLE_RATE)
            .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        total_seconds += wav.seconds();
        corpus.push(wav.samples);
    }
    if total_seconds < MIN_CORPUS_SECONDS {
        return Err(Error::input(format!(
            "corpus totals {total_seconds:.2} s of audio; training needs at least \
             {MIN_CORPUS_SECONDS} s"
        )));
    }
    Ok(corpus)
}

/// The training log lives next to the checkpoint under this appended
/// extension.
pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

/// Run training end to end. Deterministic log lines go to `log` (and to
/// the `<out>.log` file); timing information goes to stderr only.
pub fn run(args: &TrainArgs, log: &mut (dyn FnMut(&str) + Send)) -> Result<TrainSummary> {
    if let Some(0) = args.checkpoint_interval {
        return Err(Error::config("checkpoint interval must be at least 1".to_string()));
    }
    let corpus = load_corpus(&args.data_dir)?;
    let corpus_seconds: f64 =
        corpus.iter().map(|u| u.len() as f64 / SAMPLE_RATE as f64).sum();

    let mel = MelConfig::default();
    let stats = compute_feature_stats(&corpus, &mel)?;
    let state = match &args.resume {
        Some(path) => {
            let mut st = load_checkpoint(path)?;
            if st.discriminator.is_none() {
                st.discriminator = Some(init_discriminator::<f32>(
                    default_rwd_specs(),
                    mix_seed(args.seed, SALT_DISC_INIT),
                )?);
            }
            st
        }
        None => {
            let gen_config = GeneratorConfig {
                channels: args.channels,
                noise_channels: args.noise_channels,
                ..GeneratorConfig::default()
            };
            TrainState {
                generator: init_generator::<f32>(
                    gen_config,
                    mix_seed(args.seed, SALT_GEN_INIT),
                )?,
                discriminator: Some(init_discriminator::<f32>(
                    default_rwd_specs(),
                    mix_seed(args.seed, SALT_DISC_INIT),
                )?),
                opt_gen: AdamState::new(),
                opt_disc: AdamState::new(),
                step: 0,
            }
        }
    };
    let mut trainer =
        Trainer::with_state(args.train_config(), mel, AuxLossConfig::default(), stats.clone(), state)?;

    // All validation passed — side effects may begin.
    write_stats(&stats_sidecar(&args.out), &stats)?;
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(log_path(&args.out))?);
    let mut emit = |line: &str| -> Result<()> {
        log(line);
        writeln!(log_file, "{line}")?;
        log_file.flush()?;
        Ok(())
    };

    emit(&format!("corpus_files={} corpus_seconds={corpus_seconds:.3}", corpus.len()))?;
    emit(&format!(
        "segment_samples={} parameters={} start_step={}",
        trainer.segment_samples(),
        count_parameters(trainer.generator()),
        trainer.step()
    ))?;

    let save = |trainer: &Trainer, out: &Path| -> Result<&'static str> {
        // No adversarial update has run yet at or before the phase
        // boundary, so those checkpoints carry no discriminator.
        if trainer.step() <= trainer.config().pretrain_steps {
            save_checkpoint(out, &trainer.pretrain_state())?;
            Ok("pretrain")
        } else {
            save_checkpoint(out, &trainer.state())?;
            Ok("full")
        }
    };

    let start_step = trainer.step();
    run_in_pool(args.threads, || {
        let mut last_saved: Option<u64> = None;
        while !trainer.is_complete() {
            let in_pretrain = trainer.in_pretrain_phase();
            let batch = trainer.assemble_batch(&corpus)?;
            let t0 = Instant::now();
            let metrics = if in_pretrain {
                trainer.pretrain_step(&batch)?
            } else {
                trainer.adversarial_step(&batch)?
            };
            let wall_ms = t0.elapsed().as_millis();
            let step = trainer.step();
            let phase = if in_pretrain { "pretrain" } else { "adversarial" };
            emit(&metrics.log_fields(step, phase))?;
            eprintln!("{}", metrics.log_line(step, phase, wall_ms));

            let boundary = in_pretrain && !trainer.in_pretrain_phase();
            let interval_hit =
                args.checkpoint_interval.is_some_and(|iv| step % iv == 0);
            if boundary || interval_hit || trainer.is_complete() {
                let kind = save(&trainer, &args.out)?;
                emit(&format!("checkpoint step={step} kind={kind}"))?;
                last_saved = Some(step);
            }
        }
        if last_saved != Some(trainer.step()) {
            let kind = save(&trainer, &args.out)?;
            emit(&format!("checkpoint step={} kind={kind}", trainer.step()))?;
        }
        Ok(TrainSummary {
            final_step: trainer.step(),
            steps_run: trainer.step() - start_step,
        })
    })
}
