//! Two-phase training loop.
//!
//! Phase one fits the generator alone with the multi-resolution spectral
//! reconstruction loss. Phase two alternates one discriminator update and
//! one generator update per step, where the generator minimizes the hinge
//! adversarial objective plus the same reconstruction loss.
//!
//! Every random decision — batch assembly, noise draws, window positions —
//! is derived statelessly from `(seed, step, purpose, lane)`, so a run is
//! reproducible from its configuration alone and resuming from a checkpoint
//! continues the exact stream the interrupted run would have produced.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discriminator::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::features::{
    log10_floored, mel_filterbank, mel_project, stft_forward_parts, FeatureStats, MelConfig,
    StftPlan,
};
use crate::generator::{generator_forward, sample_noise, GeneratorParams};
use crate::graph::{Backend, Eager};
use crate::losses::{
    aux_loss_on, generator_objective, hinge_discriminator_loss_on, hinge_generator_loss_on,
    reference_magnitudes, AuxLossConfig, NUM_DISCRIMINATORS,
};
use crate::pqmf::PqmfBank;
use crate::tensor::Tensor;
use crate::train::adam::{adam_step, AdamState};
use crate::train::checkpoint::TrainState;
use crate::train::tape::{Tape, TapeGradients};

/// Hyperparameters of the two-phase loop. Defaults are the desk-scale
/// values; the reference-scale batch size is 32.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Reconstruction-only steps before the adversarial phase.
    pub pretrain_steps: u64,
    /// Adversarial steps (each = one discriminator + one generator update).
    pub adv_steps: u64,
    /// Generator learning rate during the reconstruction phase.
    pub lr_g_pretrain: f64,
    /// Generator learning rate during the adversarial phase.
    pub lr_g_adv: f64,
    /// Discriminator learning rate.
    pub lr_d: f64,
    /// Segments per batch.
    pub batch_size: usize,
    /// Requested segment duration; the effective segment is cropped down
    /// to a whole number of feature hops.
    pub segment_seconds: f64,
    /// Windows scored per discriminator per segment.
    pub window_repeats: usize,
    /// Root seed for every random decision in the run.
    pub seed: u64,
    /// Optional per-entry gradient clip; off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_steps: 2_000,
            adv_steps: 5_000,
            lr_g_pretrain: 1e-4,
            lr_g_adv: 5e-5,
            lr_d: 2e-4,
            batch_size: 4,
            segment_seconds: 1.0,
            window_repeats: 2,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Validate against the feature geometry and the widest discriminator
    /// window. Returns the effective segment length in samples.
    pub fn validate(&self, mel: &MelConfig, max_window: usize) -> Result<usize> {
        for (name, lr) in [
            ("lr_g_pretrain", self.lr_g_pretrain),
            ("lr_g_adv", self.lr_g_adv),
            ("lr_d", self.lr_d),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1".to_string()));
        }
        if self.window_repeats == 0 {
            return Err(Error::config(
                "window repeats must be at least 1: zero windows would score nothing".to_string(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config(format!("gradient clip must be positive, got {c}")));
            }
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::config(format!(
                "segment duration must be positive, got {}",
                self.segment_seconds
            )));
        }
        let raw = (self.segment_seconds * mel.sample_rate).floor() as usize;
        let segment = raw - raw % mel.hop_size;
        if segment == 0 {
            return Err(Error::config(format!(
                "segment of {} samples is shorter than one feature hop ({})",
                raw, mel.hop_size
            )));
        }
        if segment < max_window {
            return Err(Error::config(format!(
                "effective segment of {segment} samples cannot fit the widest \
                 discriminator window of {max_window}"
            )));
        }
        Ok(segment)
    }
}

/// Loss values reported for one training step. Reconstruction-phase steps
/// report zero for the adversarial entries.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub d_loss: f32,
    pub g_adv: f32,
    pub g_aux: f32,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        self.d_loss.is_finite() && self.g_adv.is_finite() && self.g_aux.is_finite()
    }

    /// The deterministic part of a `key=value` log record: everything
    /// but the wall time, so fixed-seed runs log byte-identical lines.
    pub fn log_fields(&self, step: u64, phase: &str) -> String {
        format!(
            "step={step} phase={phase} d_loss={:.6} g_adv={:.6} g_aux={:.6}",
            self.d_loss, self.g_adv, self.g_aux
        )
    }

    /// One `key=value` log record including the measured wall time.
    pub fn log_line(&self, step: u64, phase: &str, wall_ms: u128) -> String {
        format!("{} wall_ms={wall_ms}", self.log_fields(step, phase))
    }
}

// Purpose lanes of the stateless per-step randomness.
const LANE_BATCH: u64 = 1;
const LANE_PRETRAIN_NOISE: u64 = 2;
const LANE_D_NOISE: u64 = 3;
const LANE_D_REAL_WINDOWS: u64 = 4;
const LANE_D_FAKE_WINDOWS: u64 = 5;
const LANE_G_NOISE: u64 = 6;
const LANE_G_WINDOWS: u64 = 7;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one (step, purpose, lane) random decision.
fn derive_seed(seed: u64, step: u64, purpose: u64, lane: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ step);
    h = splitmix(h ^ purpose);
    splitmix(h ^ lane)
}

/// The two-phase training loop over a generator/discriminator pair.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    mel: MelConfig,
    stats: FeatureStats<f32>,
    generator: GeneratorParams<Tensor<f32>>,
    discriminator: DiscriminatorParams<Tensor<f32>>,
    opt_gen: AdamState<f32>,
    opt_disc: AdamState<f32>,
    step: u64,
    segment_samples: usize,
    mel_plan: StftPlan<f32>,
    filterbank: Tensor<f32>,
    aux_plans: Vec<Arc<StftPlan<f32>>>,
    banks: Vec<Arc<PqmfBank<f32>>>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        mel: MelConfig,
        aux: AuxLossConfig,
        stats: FeatureStats<f32>,
        generator: GeneratorParams<Tensor<f32>>,
        discriminator: DiscriminatorParams<Tensor<f32>>,
    ) -> Result<Self> {
        Self::with_state(
            config,
            mel,
            aux,
            stats,
            TrainState {
                generator,
                discriminator: Some(discriminator),
                opt_gen: AdamState::new(),
                opt_disc: AdamState::new(),
                step: 0,
            },
        )
    }

    /// Resume from a saved state. A state without a discriminator (written
    /// during the reconstruction phase) needs `fresh_discriminator` to
    /// supply one for the adversarial phase.
    pub fn with_state(
        config: TrainConfig,
        mel: MelConfig,
        aux: AuxLossConfig,
        stats: FeatureStats<f32>,
        state: TrainState,
    ) -> Result<Self> {
        mel.validate()?;
        aux.validate()?;
        let discriminator = state.discriminator.ok_or_else(|| {
            Error::config(
                "training state has no discriminator; supply a fresh one before resuming"
                    .to_string(),
            )
        })?;
        if discriminator.rwds.len() != NUM_DISCRIMINATORS {
            return Err(Error::config(format!(
                "the adversarial objective needs {NUM_DISCRIMINATORS} discriminators, found {}",
                discriminator.rwds.len()
            )));
        }
        let gen_cfg = &state.generator.config;
        if gen_cfg.mel_channels != mel.num_mels {
            return Err(Error::config(format!(
                "generator conditions on {} mel bins but features produce {}",
                gen_cfg.mel_channels, mel.num_mels
            )));
        }
        if gen_cfg.upsampling_factor() != mel.hop_size {
            return Err(Error::config(format!(
                "generator upsamples by {} but the feature hop is {}: frames would not \
                 line up with samples",
                gen_cfg.upsampling_factor(),
                mel.hop_size
            )));
        }
        if stats.num_mels() != mel.num_mels {
            return Err(Error::config(format!(
                "normalization stats cover {} mel bins, features produce {}",
                stats.num_mels(),
                mel.num_mels
            )));
        }
        let segment_samples = config.validate(&mel, discriminator.max_window())?;
        let mel_plan = StftPlan::from_config(&mel)?;
        let filterbank = mel_filterbank::<f32>(&mel)?;
        let aux_plans = aux.plans::<f32>()?;
        let banks = discriminator.build_banks()?;
        Ok(Trainer {
            config,
            mel,
            stats,
            generator: state.generator,
            discriminator,
            opt_gen: state.opt_gen,
            opt_disc: state.opt_disc,
            step: state.step,
            segment_samples,
            mel_plan,
            filterbank,
            aux_plans,
            banks,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Effective segment length in samples (a whole number of hops).
    pub fn segment_samples(&self) -> usize {
        self.segment_samples
    }

    pub fn generator(&self) -> &GeneratorParams<Tensor<f32>> {
        &self.generator
    }

    pub fn discriminator(&self) -> &DiscriminatorParams<Tensor<f32>> {
        &self.discriminator
    }

    /// Snapshot for checkpointing.
    pub fn state(&self) -> TrainState {
        TrainState {
            generator: self.generator.clone(),
            discriminator: Some(self.discriminator.clone()),
            opt_gen: self.opt_gen.clone(),
            opt_disc: self.opt_disc.clone(),
            step: self.step,
        }
    }

    /// Same snapshot without the discriminator, for reconstruction-phase
    /// checkpoints: resuming then starts the adversarial phase fresh.
    pub fn pretrain_state(&self) -> TrainState {
        TrainState { discriminator: None, ..self.state() }
    }

    /// Whether the global step is still inside the reconstruction phase.
    pub fn in_pretrain_phase(&self) -> bool {
        self.step < self.config.pretrain_steps
    }

    /// True once every configured step has run.
    pub fn is_complete(&self) -> bool {
        self.step >= self.config.pretrain_steps + self.config.adv_steps
    }

    /// Deterministically cut `batch_size` training segments out of the
    /// corpus for the current step. Utterances shorter than one segment
    /// are skipped; the corpus must contain at least one long enough.
    pub fn assemble_batch(&self, corpus: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let seg = self.segment_samples;
        let usable: Vec<&Vec<f32>> = corpus.iter().filter(|u| u.len() >= seg).collect();
        if usable.is_empty() {
            return Err(Error::input(format!(
                "no corpus utterance is at least one segment ({seg} samples) long"
            )));
        }
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for lane in 0..self.config.batch_size {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.config.seed,
                self.step,
                LANE_BATCH,
                lane as u64,
            ));
            let utt = usable[rng.gen_range(0..usable.len())];
            let start = rng.gen_range(0..=utt.len() - seg);
            batch.push(utt[start..start + seg].to_vec());
        }
        Ok(batch)
    }

    /// Conditioning features for one segment: one frame per hop, so the
    /// synthesized waveform has exactly the segment's length. Matches the
    /// public extraction pipeline bit for bit (cached tables aside).
    fn extract_features(&self, segment: &[f32]) -> Result<Tensor<f32>> {
        let (mag, _, _) = stft_forward_parts(&self.mel_plan, segment)?;
        let mel = mel_project(&self.filterbank, &mag);
        let frames_full = mel.dims()[1];
        let frames = segment.len() / self.mel.hop_size;
        if frames_full < frames {
            return Err(Error::input(format!(
                "{frames_full} feature frames cannot condition {frames} hops"
            )));
        }
        let m = self.mel.num_mels;
        let mut out = Tensor::zeros(&[m, frames]);
        for band in 0..m {
            let (mean, std) = (self.stats.mean()[band], self.stats.std()[band]);
            let src = &mel.data()[band * frames_full..band * frames_full + frames];
            let dst = &mut out.data_mut()[band * frames..(band + 1) * frames];
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = (log10_floored(v) - mean) / std;
            }
        }
        Ok(out)
    }

    fn check_batch(&self, batch: &[Vec<f32>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::input("training step received an empty batch".to_string()));
        }
        for (i, seg) in batch.iter().enumerate() {
            if seg.len() != self.segment_samples {
                return Err(Error::input(format!(
                    "batch segment {i} has {} samples, expected {}",
                    seg.len(),
                    self.segment_samples
                )));
            }
        }
        Ok(())
    }

    fn accumulate_grads(
        total: &mut TapeGradients<f32>,
        item: TapeGradients<f32>,
        scale: f32,
    ) {
        for (name, mut grad) in item {
            grad.scale(scale);
            match total.get_mut(&name) {
                Some(t) => t.add_assign(&grad),
                None => {
                    total.insert(name, grad);
                }
            }
        }
    }

    /// One reconstruction-phase step: synthesize every batch segment from
    /// its own features and fresh noise, average the spectral loss
    /// gradients, and apply one generator update.
    pub fn pretrain_step(&mut self, batch: &[Vec<f32>]) -> Result<StepMetrics> {
        self.check_batch(batch)?;
        let clip = self.config.grad_clip.map(|c| c as f32);
        let weight = 1.0f32 / batch.len() as f32;
        let mut total = TapeGradients::new();
        let mut aux_sum = 0.0f64;
        for (lane, segment) in batch.iter().enumerate() {
            let frames = segment.len() / self.mel.hop_size;
            let mel = self.extract_features(segment)?;
            let noise = sample_noise::<f32>(
                self.generator.config.noise_channels,
                frames,
                derive_seed(self.config.seed, self.step, LANE_PRETRAIN_NOISE, lane as u64),
            )?;
            let refs = reference_magnitudes(segment, &self.aux_plans)?;

            let mut tape = Tape::new();
            let bound = self.generator.bind(&mut tape);
            let z = tape.constant(noise.into_tensor());
            let cond = tape.constant(mel);
            let wave = generator_forward(&mut tape, &z, &cond, &bound)?;
            let loss = aux_loss_on(&mut tape, &refs, &wave, &self.aux_plans)?;
            aux_sum += tape.read_scalar(&loss)? as f64;
            let grads = tape.backward(loss)?;
            Self::accumulate_grads(&mut total, grads, weight);
        }
        let lr = self.config.lr_g_pretrain as f32;
        let mut refs = Vec::new();
        self.generator.visit_mut(&mut |name, t| refs.push((name, t)));
        adam_step(&mut self.opt_gen, refs, &total, lr, clip)?;
        self.step += 1;
        let metrics =
            StepMetrics { d_loss: 0.0, g_adv: 0.0, g_aux: (aux_sum / batch.len() as f64) as f32 };
        if !metrics.is_finite() {
            return Err(Error::degenerate(format!(
                "non-finite reconstruction loss at step {}",
                self.step
            )));
        }
        Ok(metrics)
    }

    /// Window starts for one segment evaluation: every discriminator's
    /// positions are drawn before any scoring happens, discriminator-major,
    /// repeat-minor.
    fn draw_window_starts(&self, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut starts = Vec::with_capacity(self.discriminator.rwds.len());
        for rwd in &self.discriminator.rwds {
            let w = rwd.spec.window_size;
            if len < w {
                return Err(Error::input(format!(
                    "segment of {len} samples cannot fit a {w}-sample window"
                )));
            }
            let mut per_k = Vec::with_capacity(self.config.window_repeats);
            for _ in 0..self.config.window_repeats {
                per_k.push(rng.gen_range(0..=len - w));
            }
            starts.push(per_k);
        }
        Ok(starts)
    }

    /// Run the frozen generator on one segment's features, producing the
    /// fake waveform scored in the discriminator update.
    fn synthesize_frozen(&self, segment: &[f32], noise_seed: u64) -> Result<Vec<f32>> {
        let frames = segment.len() / self.mel.hop_size;
        let mel = self.extract_features(segment)?;
        let noise =
            sample_noise::<f32>(self.generator.config.noise_channels, frames, noise_seed)?;
        let mut eager = Eager;
        let bound = self.generator.bind_constant(&mut eager);
        let z = noise.into_tensor();
        let wave = generator_forward(&mut eager, &z, &mel, &bound)?;
        Ok(wave.into_data())
    }

    /// One discriminator update over the batch: score random windows of
    /// the real segments against windows of frozen-generator output under
    /// the hinge objective, summed over the four discriminators. Returns
    /// the batch-mean loss. The generator is never touched.
    pub fn discriminator_update(&mut self, batch: &[Vec<f32>]) -> Result<f32> {
        self.check_batch(batch)?;
        let clip = self.config.grad_clip.map(|c| c as f32);
        let weight = 1.0f32 / batch.len() as f32;
        let mut total = TapeGradients::new();
        let mut loss_sum = 0.0f64;
        for (lane, segment) in batch.iter().enumerate() {
            let lane_u = lane as u64;
            let fake = self.synthesize_frozen(
                segment,
                derive_seed(self.config.seed, self.step, LANE_D_NOISE, lane_u),
            )?;
            let real_starts = self.draw_window_starts(
                segment.len(),
                derive_seed(self.config.seed, self.step, LANE_D_REAL_WINDOWS, lane_u),
            )?;
            let fake_starts = self.draw_window_starts(
                fake.len(),
                derive_seed(self.config.seed, self.step, LANE_D_FAKE_WINDOWS, lane_u),
            )?;

            let mut tape = Tape::new();
            let bound = self.discriminator.bind(&mut tape);
            let mut per_k = Vec::with_capacity(bound.rwds.len());
            for (k, rwd) in bound.rwds.iter().enumerate() {
                let w = rwd.spec.window_size;
                let mut real_scores = Vec::with_capacity(self.config.window_repeats);
                let mut fake_scores = Vec::with_capacity(self.config.window_repeats);
                for r in 0..self.config.window_repeats {
                    let rs = real_starts[k][r];
                    let real_win = tape.constant(Tensor::from_vec(
                        &[1, w],
                        segment[rs..rs + w].to_vec(),
                    )?);
                    real_scores.push(rwd_score(&mut tape, &real_win, &self.banks[k], rwd)?);
                    let fs = fake_starts[k][r];
                    let fake_win = tape.constant(Tensor::from_vec(
                        &[1, w],
                        fake[fs..fs + w].to_vec(),
                    )?);
                    fake_scores.push(rwd_score(&mut tape, &fake_win, &self.banks[k], rwd)?);
                }
                per_k.push((
                    1.0f32,
                    hinge_discriminator_loss_on(&mut tape, &real_scores, &fake_scores)?,
                ));
            }
            let loss = tape.lin_comb(&per_k)?;
            loss_sum += tape.read_scalar(&loss)? as f64;
            let grads = tape.backward(loss)?;
            Self::accumulate_grads(&mut total, grads, weight);
        }
        let lr = self.config.lr_d as f32;
        let mut refs = Vec::new();
        self.discriminator.visit_mut(&mut |name, t| refs.push((name, t)));
        adam_step(&mut self.opt_disc, refs, &total, lr, clip)?;
        Ok((loss_sum / batch.len() as f64) as f32)
    }

    /// One generator update over the batch: synthesize on the tape, score
    /// fresh random windows with the frozen discriminators, and descend the
    /// hinge objective plus the spectral reconstruction loss. Returns the
    /// batch-mean `(adversarial, reconstruction)` losses. The discriminator
    /// is never touched.
    pub fn generator_update(&mut self, batch: &[Vec<f32>]) -> Result<(f32, f32)> {
        self.check_batch(batch)?;
        let clip = self.config.grad_clip.map(|c| c as f32);
        let weight = 1.0f32 / batch.len() as f32;
        let mut total = TapeGradients::new();
        let mut adv_sum = 0.0f64;
        let mut aux_sum = 0.0f64;
        for (lane, segment) in batch.iter().enumerate() {
            let lane_u = lane as u64;
            let frames = segment.len() / self.mel.hop_size;
            let mel = self.extract_features(segment)?;
            let noise = sample_noise::<f32>(
                self.generator.config.noise_channels,
                frames,
                derive_seed(self.config.seed, self.step, LANE_G_NOISE, lane_u),
            )?;
            let starts = self.draw_window_starts(
                segment.len(),
                derive_seed(self.config.seed, self.step, LANE_G_WINDOWS, lane_u),
            )?;
            let refs = reference_magnitudes(segment, &self.aux_plans)?;

            let mut tape = Tape::new();
            let gen_bound = self.generator.bind(&mut tape);
            let disc_bound = self.discriminator.bind_constant(&mut tape);
            let z = tape.constant(noise.into_tensor());
            let cond = tape.constant(mel);
            let wave = generator_forward(&mut tape, &z, &cond, &gen_bound)?;

            let mut scores = Vec::new();
            for (k, rwd) in disc_bound.rwds.iter().enumerate() {
                let w = rwd.spec.window_size;
                for r in 0..self.config.window_repeats {
                    let win = tape.window(&wave, starts[k][r], w)?;
                    scores.push((k + 1, rwd_score(&mut tape, &win, &self.banks[k], rwd)?));
                }
            }
            let adv = hinge_generator_loss_on(&mut tape, &scores)?;
            let aux = aux_loss_on(&mut tape, &refs, &wave, &self.aux_plans)?;
            adv_sum += tape.read_scalar(&adv)? as f64;
            aux_sum += tape.read_scalar(&aux)? as f64;
            let objective = tape.lin_comb(&[(1.0f32, adv), (1.0f32, aux)])?;
            let grads = tape.backward(objective)?;
            Self::accumulate_grads(&mut total, grads, weight);
        }
        let lr = self.config.lr_g_adv as f32;
        let mut refs = Vec::new();
        self.generator.visit_mut(&mut |name, t| refs.push((name, t)));
        adam_step(&mut self.opt_gen, refs, &total, lr, clip)?;
        let n = batch.len() as f64;
        Ok(((adv_sum / n) as f32, (aux_sum / n) as f32))
    }

    /// One adversarial step: exactly one discriminator update followed by
    /// exactly one generator update on the same batch (with independent
    /// window and noise draws).
    pub fn adversarial_step(&mut self, batch: &[Vec<f32>]) -> Result<StepMetrics> {
        let d_loss = self.discriminator_update(batch)?;
        let (g_adv, g_aux) = self.generator_update(batch)?;
        self.step += 1;
        let metrics = StepMetrics { d_loss, g_adv, g_aux };
        if !metrics.is_finite() {
            return Err(Error::degenerate(format!(
                "non-finite adversarial losses at step {}: {metrics:?}",
                self.step
            )));
        }
        Ok(metrics)
    }
}

/// Score one window with one discriminator on any backend.
fn rwd_score<B: Backend<f32>>(
    backend: &mut B,
    window: &B::Value,
    bank: &Arc<PqmfBank<f32>>,
    rwd: &crate::discriminator::RwdParams<B::Value>,
) -> Result<B::Value> {
    crate::discriminator::rwd_forward(backend, window, bank, rwd)
}

/// Combined generator objective for reporting: adversarial plus
/// reconstruction.
pub fn combined_objective(metrics: &StepMetrics) -> f32 {
    generator_objective(metrics.g_adv, metrics.g_aux)
}
