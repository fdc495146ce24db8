//! The noise-to-waveform generator.
//!
//! A 128-channel noise map (one time step per conditioning frame) is
//! projected to the working width, refined by eight conditionally
//! normalized residual blocks each followed by ×2 nearest-neighbor
//! upsampling, and finished by one more block, a channel-change
//! convolution to mono, and `tanh`. Conditioning enters every block
//! through gain/offset modulation of instance-normalized activations
//! (`γ ⊙ c + β`), with the gain and offset predicted from the
//! conditioning features at the block's own temporal resolution.
//!
//! All forwards are written against [`Backend`], so the same code runs
//! eagerly for inference and on the recording tape for training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::graph::{conv_wn, init_conv_param, Backend, ConvParam, Eager};
use crate::nn::{Conv1dSpec, FeatureMap};
use crate::num::Real;
use crate::tensor::Tensor;

/// Variance floor inside the per-channel instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
/// Negative-branch slope of the conditioning path's activation.
pub const COND_LEAKY_SLOPE: f64 = 0.2;

/// Structural hyperparameters. The defaults give the full-scale model;
/// tests and desk-scale training shrink `channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Channels of the input noise map (one time step per frame).
    pub noise_channels: usize,
    /// Working width of every residual block.
    pub channels: usize,
    /// Channels of the conditioning features.
    pub mel_channels: usize,
    /// Kernel size of all block convolutions (gain/offset predictors
    /// and gated signal/gate pairs) and the outer projections.
    pub kernel_size: usize,
    /// Kernel size of the conditioning pre-convolution.
    pub cond_kernel_size: usize,
    /// Number of ×2 upsampling stages; total factor = 2^stages.
    pub stages: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_channels: 128,
            channels: 64,
            mel_channels: 80,
            kernel_size: 9,
            cond_kernel_size: 5,
            stages: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_channels == 0
            || self.channels == 0
            || self.mel_channels == 0
            || self.stages == 0
        {
            return Err(Error::config(
                "generator channel counts and stage count must be positive".to_string(),
            ));
        }
        if self.stages > 20 {
            return Err(Error::config(format!(
                "{} upsampling stages would overflow any practical signal length",
                self.stages
            )));
        }
        Conv1dSpec::new(self.mel_channels, self.channels, self.cond_kernel_size).validate()?;
        Conv1dSpec::new(self.channels, self.channels, self.kernel_size).validate()?;
        Ok(())
    }

    /// Samples produced per conditioning frame: `2^stages`.
    pub fn upsampling_factor(&self) -> usize {
        1usize << self.stages
    }
}

/// One conditioning layer: a pre-convolution over the (resampled)
/// conditioning features and the two convolutions predicting the
/// modulation gain γ and offset β.
#[derive(Debug, Clone)]
pub struct TadeParams<P> {
    pub cond_conv: ConvParam<P>,
    pub gamma_conv: ConvParam<P>,
    pub beta_conv: ConvParam<P>,
}

/// One residual block: two conditioning layers, each feeding a
/// softmax-gated tanh convolution pair (dilations 1 and 2), closed by
/// the residual connection.
#[derive(Debug, Clone)]
pub struct TadeResBlockParams<P> {
    pub tade1: TadeParams<P>,
    pub conv_d1_sig: ConvParam<P>,
    pub conv_d1_gate: ConvParam<P>,
    pub tade2: TadeParams<P>,
    pub conv_d2_sig: ConvParam<P>,
    pub conv_d2_gate: ConvParam<P>,
}

/// One upsampling stage: a residual block followed by the (parameter-
/// free) ×2 nearest-neighbor upsampler.
#[derive(Debug, Clone)]
pub struct StageParams<P> {
    pub resblock: TadeResBlockParams<P>,
}

/// Complete generator parameter set.
#[derive(Debug, Clone)]
pub struct GeneratorParams<P> {
    pub config: GeneratorConfig,
    pub input_conv: ConvParam<P>,
    pub stages: Vec<StageParams<P>>,
    pub final_block: TadeResBlockParams<P>,
    pub out_conv: ConvParam<P>,
}

impl<P> TadeParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.cond_conv.visit(&format!("{prefix}.cond_conv"), f);
        self.gamma_conv.visit(&format!("{prefix}.gamma_conv"), f);
        self.beta_conv.visit(&format!("{prefix}.beta_conv"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        self.cond_conv.visit_mut(&format!("{prefix}.cond_conv"), f);
        self.gamma_conv.visit_mut(&format!("{prefix}.gamma_conv"), f);
        self.beta_conv.visit_mut(&format!("{prefix}.beta_conv"), f);
    }

    pub fn map_named<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> TadeParams<Q> {
        TadeParams {
            cond_conv: self.cond_conv.map_named(&format!("{prefix}.cond_conv"), f),
            gamma_conv: self.gamma_conv.map_named(&format!("{prefix}.gamma_conv"), f),
            beta_conv: self.beta_conv.map_named(&format!("{prefix}.beta_conv"), f),
        }
    }
}

impl<P> TadeResBlockParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.tade1.visit(&format!("{prefix}.tade1"), f);
        self.conv_d1_sig.visit(&format!("{prefix}.conv_d1_sig"), f);
        self.conv_d1_gate.visit(&format!("{prefix}.conv_d1_gate"), f);
        self.tade2.visit(&format!("{prefix}.tade2"), f);
        self.conv_d2_sig.visit(&format!("{prefix}.conv_d2_sig"), f);
        self.conv_d2_gate.visit(&format!("{prefix}.conv_d2_gate"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        self.tade1.visit_mut(&format!("{prefix}.tade1"), f);
        self.conv_d1_sig.visit_mut(&format!("{prefix}.conv_d1_sig"), f);
        self.conv_d1_gate.visit_mut(&format!("{prefix}.conv_d1_gate"), f);
        self.tade2.visit_mut(&format!("{prefix}.tade2"), f);
        self.conv_d2_sig.visit_mut(&format!("{prefix}.conv_d2_sig"), f);
        self.conv_d2_gate.visit_mut(&format!("{prefix}.conv_d2_gate"), f);
    }

    pub fn map_named<Q>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &P) -> Q,
    ) -> TadeResBlockParams<Q> {
        TadeResBlockParams {
            tade1: self.tade1.map_named(&format!("{prefix}.tade1"), f),
            conv_d1_sig: self.conv_d1_sig.map_named(&format!("{prefix}.conv_d1_sig"), f),
            conv_d1_gate: self.conv_d1_gate.map_named(&format!("{prefix}.conv_d1_gate"), f),
            tade2: self.tade2.map_named(&format!("{prefix}.tade2"), f),
            conv_d2_sig: self.conv_d2_sig.map_named(&format!("{prefix}.conv_d2_sig"), f),
            conv_d2_gate: self.conv_d2_gate.map_named(&format!("{prefix}.conv_d2_gate"), f),
        }
    }
}

impl<P> GeneratorParams<P> {
    /// Visit every `(name, value)` pair in the documented name order:
    /// `input_conv.*`, `stage{i}.resblock.*` for i = 0.., then
    /// `final.resblock.*` and `final.out_conv.*`.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        self.input_conv.visit("input_conv", f);
        for (i, st) in self.stages.iter().enumerate() {
            st.resblock.visit(&format!("stage{i}.resblock"), f);
        }
        self.final_block.visit("final.resblock", f);
        self.out_conv.visit("final.out_conv", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        self.input_conv.visit_mut("input_conv", f);
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.resblock.visit_mut(&format!("stage{i}.resblock"), f);
        }
        self.final_block.visit_mut("final.resblock", f);
        self.out_conv.visit_mut("final.out_conv", f);
    }

    pub fn map_named<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> GeneratorParams<Q> {
        GeneratorParams {
            config: self.config,
            input_conv: self.input_conv.map_named("input_conv", f),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, st)| StageParams {
                    resblock: st.resblock.map_named(&format!("stage{i}.resblock"), f),
                })
                .collect(),
            final_block: self.final_block.map_named("final.resblock", f),
            out_conv: self.out_conv.map_named("final.out_conv", f),
        }
    }
}

impl<T: Real> GeneratorParams<Tensor<T>> {
    /// Bind all parameters onto a backend as named differentiable
    /// leaves.
    pub fn bind<B: Backend<T>>(&self, backend: &mut B) -> GeneratorParams<B::Value> {
        self.map_named(&mut |name, t| backend.param(name, t.clone()))
    }

    /// Bind all parameters as constants (for the discriminator's update,
    /// where the generator is frozen).
    pub fn bind_constant<B: Backend<T>>(&self, backend: &mut B) -> GeneratorParams<B::Value> {
        self.map_named(&mut |_, t| backend.constant(t.clone()))
    }
}

fn init_tade<T: Real>(
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TadeParams<Tensor<T>>> {
    Ok(TadeParams {
        cond_conv: init_conv_param(
            Conv1dSpec::new(cfg.mel_channels, cfg.channels, cfg.cond_kernel_size),
            1,
            rng,
        )?,
        gamma_conv: init_conv_param(
            Conv1dSpec::new(cfg.channels, cfg.channels, cfg.kernel_size),
            1,
            rng,
        )?,
        beta_conv: init_conv_param(
            Conv1dSpec::new(cfg.channels, cfg.channels, cfg.kernel_size),
            1,
            rng,
        )?,
    })
}

fn init_resblock<T: Real>(
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TadeResBlockParams<Tensor<T>>> {
    let conv = |dilation: usize, rng: &mut ChaCha8Rng| {
        init_conv_param(
            Conv1dSpec::new(cfg.channels, cfg.channels, cfg.kernel_size).with_dilation(dilation),
            1,
            rng,
        )
    };
    Ok(TadeResBlockParams {
        tade1: init_tade(cfg, rng)?,
        conv_d1_sig: conv(1, rng)?,
        conv_d1_gate: conv(1, rng)?,
        tade2: init_tade(cfg, rng)?,
        conv_d2_sig: conv(2, rng)?,
        conv_d2_gate: conv(2, rng)?,
    })
}

/// Fresh generator parameters: every convolution's direction is drawn
/// N(0, 0.02²) from a stream seeded with `seed`, magnitudes equal the
/// direction row norms, biases are zero. Draw order equals the
/// documented name order, so a seed pins every tensor.
pub fn init_generator<T: Real>(
    config: GeneratorConfig,
    seed: u64,
) -> Result<GeneratorParams<Tensor<T>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_conv = init_conv_param(
        Conv1dSpec::new(config.noise_channels, config.channels, config.kernel_size),
        1,
        &mut rng,
    )?;
    let mut stages = Vec::with_capacity(config.stages);
    for _ in 0..config.stages {
        stages.push(StageParams { resblock: init_resblock(&config, &mut rng)? });
    }
    let final_block = init_resblock(&config, &mut rng)?;
    let out_conv = init_conv_param(
        Conv1dSpec::new(config.channels, 1, config.kernel_size),
        1,
        &mut rng,
    )?;
    Ok(GeneratorParams { config, input_conv, stages, final_block, out_conv })
}

/// Total scalar parameter count (directions, magnitudes, biases).
pub fn count_parameters<T: Real>(params: &GeneratorParams<Tensor<T>>) -> usize {
    let mut total = 0usize;
    params.visit(&mut |_, t| total += t.numel());
    total
}

/// Modulate `x` by the conditioning features already resampled to `x`'s
/// temporal resolution: `γ ⊙ instance_norm(x) + β` with γ, β predicted
/// by convolutions over the activated conditioning.
pub fn tade_apply<T: Real, B: Backend<T>>(
    backend: &mut B,
    x: &B::Value,
    cond_at_rate: &B::Value,
    p: &TadeParams<B::Value>,
) -> Result<B::Value> {
    let h = conv_wn(backend, &p.cond_conv, cond_at_rate)?;
    let h = backend.leaky_relu(&h, T::from_f64_(COND_LEAKY_SLOPE))?;
    let gamma = conv_wn(backend, &p.gamma_conv, &h)?;
    let beta = conv_wn(backend, &p.beta_conv, &h)?;
    let c = backend.instance_norm(x, T::from_f64_(INSTANCE_NORM_EPS))?;
    let gc = backend.mul(&gamma, &c)?;
    backend.add(&gc, &beta)
}

/// One conditioning layer: nearest-neighbor resample the conditioning
/// by `resample_factor`, then modulate. Returns the styled activation
/// and the resampled conditioning for reuse by the block's second
/// layer.
pub fn tade_forward<T: Real, B: Backend<T>>(
    backend: &mut B,
    x: &B::Value,
    cond: &B::Value,
    resample_factor: usize,
    p: &TadeParams<B::Value>,
) -> Result<(B::Value, B::Value)> {
    let rc = if resample_factor == 1 {
        cond.clone()
    } else {
        backend.upsample(cond, resample_factor)?
    };
    let styled = tade_apply(backend, x, &rc, p)?;
    Ok((styled, rc))
}

/// One residual block at a fixed temporal resolution:
/// conditioning layer → gated pair (dilation 1) → conditioning layer →
/// gated pair (dilation 2) → residual add. Output shape equals input
/// shape.
pub fn tade_res_block<T: Real, B: Backend<T>>(
    backend: &mut B,
    x: &B::Value,
    cond: &B::Value,
    resample_factor: usize,
    p: &TadeResBlockParams<B::Value>,
) -> Result<B::Value> {
    let (t1, rc) = tade_forward(backend, x, cond, resample_factor, &p.tade1)?;
    let sig = conv_wn(backend, &p.conv_d1_sig, &t1)?;
    let gate = conv_wn(backend, &p.conv_d1_gate, &t1)?;
    let y1 = backend.gated_tanh(&sig, &gate)?;
    let t2 = tade_apply(backend, &y1, &rc, &p.tade2)?;
    let sig2 = conv_wn(backend, &p.conv_d2_sig, &t2)?;
    let gate2 = conv_wn(backend, &p.conv_d2_gate, &t2)?;
    let y2 = backend.gated_tanh(&sig2, &gate2)?;
    backend.add(x, &y2)
}

/// Full forward pass: noise map `[noise_channels, frames]` plus
/// conditioning `[mel_channels, frames]` to a `[1, 2^stages · frames]`
/// waveform in [−1, 1].
pub fn generator_forward<T: Real, B: Backend<T>>(
    backend: &mut B,
    z: &B::Value,
    cond: &B::Value,
    p: &GeneratorParams<B::Value>,
) -> Result<B::Value> {
    let mut x = conv_wn(backend, &p.input_conv, z)?;
    let mut factor = 1usize;
    for st in &p.stages {
        x = tade_res_block(backend, &x, cond, factor, &st.resblock)?;
        x = backend.upsample(&x, 2)?;
        factor *= 2;
    }
    x = tade_res_block(backend, &x, cond, factor, &p.final_block)?;
    let y = conv_wn(backend, &p.out_conv, &x)?;
    backend.tanh(&y)
}

/// Standard-normal noise map with one time step per conditioning frame,
/// drawn from a stream seeded with `seed`.
pub fn sample_noise<T: Real>(channels: usize, frames: usize, seed: u64) -> Result<FeatureMap<T>> {
    if channels == 0 || frames == 0 {
        return Err(Error::input("noise map needs positive channels and frames".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<T> = (0..channels * frames)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_(v)
        })
        .collect();
    FeatureMap::from_vec(channels, frames, data)
}

/// Eager forward pass over concrete feature maps. The noise map's frame
/// count must equal the conditioning's.
pub fn generator_infer<T: Real>(
    noise: &FeatureMap<T>,
    cond: &FeatureMap<T>,
    params: &GeneratorParams<Tensor<T>>,
) -> Result<Vec<T>> {
    let cfg = &params.config;
    if noise.channels() != cfg.noise_channels {
        return Err(Error::input(format!(
            "noise map has {} channels, generator expects {}",
            noise.channels(),
            cfg.noise_channels
        )));
    }
    if cond.channels() != cfg.mel_channels {
        return Err(Error::input(format!(
            "conditioning has {} channels, generator expects {}",
            cond.channels(),
            cfg.mel_channels
        )));
    }
    if noise.time() != cond.time() {
        return Err(Error::input(format!(
            "noise frames ({}) do not match conditioning frames ({})",
            noise.time(),
            cond.time()
        )));
    }
    let mut eager = Eager;
    let z = eager.constant(noise.clone().into_tensor());
    let c = eager.constant(cond.clone().into_tensor());
    let bound = params.bind_constant(&mut eager);
    let wave = generator_forward(&mut eager, &z, &c, &bound)?;
    Ok(wave.into_data())
}

/// Sample seeded noise for the spectrogram's frame count and synthesize.
pub fn generate<T: Real>(
    mel: &MelSpectrogram<T>,
    params: &GeneratorParams<Tensor<T>>,
    seed: u64,
) -> Result<Vec<T>> {
    let z = sample_noise(params.config.noise_channels, mel.frames(), seed)?;
    generator_infer(&z, mel.map(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Cheap block shape for structural tests.
    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            noise_channels: 12,
            channels: 8,
            mel_channels: 6,
            kernel_size: 9,
            cond_kernel_size: 5,
            stages: 8,
        }
    }

    fn random_map(channels: usize, time: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(
            channels,
            time,
            (0..channels * time).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn zero_block_transform(block: &mut TadeResBlockParams<Tensor<f64>>) {
        block.visit_mut("b", &mut |name, t| {
            if name.ends_with(".weight_g") || name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
    }

    #[test]
    fn output_length_is_upsampling_factor_times_frames() {
        let params: GeneratorParams<Tensor<f64>> = init_generator(small_config(), 7).unwrap();
        for frames in [1usize, 2, 5, 40] {
            let z = sample_noise(12, frames, 1).unwrap();
            let mel = random_map(6, frames, 2);
            let wave = generator_infer(&z, &mel, &params).unwrap();
            assert_eq!(wave.len(), 256 * frames);
        }
    }

    #[test]
    fn output_stays_inside_tanh_range() {
        let params: GeneratorParams<Tensor<f64>> = init_generator(small_config(), 3).unwrap();
        let z = sample_noise(12, 11, 4).unwrap();
        let mel = random_map(6, 11, 5);
        let wave = generator_infer(&z, &mel, &params).unwrap();
        assert!(wave.iter().all(|v| v.abs() <= 1.0));
        assert!(wave.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn same_seed_reproduces_bit_identical_output() {
        let params: GeneratorParams<Tensor<f32>> = init_generator(small_config(), 11).unwrap();
        let mel32 = {
            let m = random_map(6, 9, 6);
            FeatureMap::from_vec(6, 9, m.data().iter().map(|&v| v as f32).collect()).unwrap()
        };
        let mel = MelSpectrogram::new(mel32, 22050.0, 256, 0);
        let a = generate(&mel, &params, 42).unwrap();
        let b = generate(&mel, &params, 42).unwrap();
        assert_eq!(a, b);
        let c = generate(&mel, &params, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zeroed_transform_path_makes_blocks_identity() {
        let cfg = small_config();
        let mut params: GeneratorParams<Tensor<f64>> = init_generator(cfg, 9).unwrap();
        for st in &mut params.stages {
            zero_block_transform(&mut st.resblock);
        }
        zero_block_transform(&mut params.final_block);

        // Block level: the residual path contributes exactly zero.
        let x = random_map(8, 16, 7).into_tensor();
        let cond = random_map(6, 16, 8).into_tensor();
        let mut eager = Eager;
        let xe = eager.constant(x.clone());
        let ce = eager.constant(cond);
        let bound = params.stages[0]
            .resblock
            .map_named("stage0.resblock", &mut |_, t| eager.constant(t.clone()));
        let y = tade_res_block(&mut eager, &xe, &ce, 1, &bound).unwrap();
        assert_eq!(y.data(), x.data());

        // Generator level: output reduces to
        // tanh(out_conv(upsample(input_conv(z)))).
        let frames = 3usize;
        let z = sample_noise::<f64>(12, frames, 10).unwrap();
        let mel = random_map(6, frames, 11);
        let got = generator_infer(&z, &mel, &params).unwrap();

        let mut e = Eager;
        let zt = e.constant(z.into_tensor());
        let proj = params.input_conv.map_named("input_conv", &mut |_, t| e.constant(t.clone()));
        let mut x = conv_wn(&mut e, &proj, &zt).unwrap();
        x = Backend::<f64>::upsample(&mut e, &x, 256).unwrap();
        let out = params.out_conv.map_named("final.out_conv", &mut |_, t| e.constant(t.clone()));
        let y = conv_wn(&mut e, &out, &x).unwrap();
        let want = Backend::<f64>::tanh(&mut e, &y).unwrap();
        assert_eq!(got, want.data());
    }

    #[test]
    fn unit_gain_zero_offset_reduces_to_instance_norm() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tade: TadeParams<Tensor<f64>> = init_tade(&cfg, &mut rng).unwrap();
        // Zero the predictor weights; bias 1 for the gain, 0 for the
        // offset, so γ ≡ 1 and β ≡ 0 regardless of conditioning.
        for (conv, bias_value) in
            [(&mut tade.gamma_conv, 1.0f64), (&mut tade.beta_conv, 0.0f64)]
        {
            for v in conv.magnitude.data_mut() {
                *v = 0.0;
            }
            for v in conv.bias.as_mut().unwrap().data_mut() {
                *v = bias_value;
            }
        }
        let x = random_map(8, 20, 14);
        let cond = random_map(6, 20, 15);
        let mut eager = Eager;
        let xe = eager.constant(x.clone().into_tensor());
        let ce = eager.constant(cond.into_tensor());
        let bound = tade.map_named("t", &mut |_, t| eager.constant(t.clone()));
        let styled = tade_apply(&mut eager, &xe, &ce, &bound).unwrap();
        let want = crate::nn::instance_norm(&x, INSTANCE_NORM_EPS).unwrap();
        assert_eq!(styled.data(), want.data());

        // γ ≡ 0 with a nonzero offset: output is β, independent of x.
        for v in tade.gamma_conv.bias.as_mut().unwrap().data_mut() {
            *v = 0.0;
        }
        for v in tade.beta_conv.bias.as_mut().unwrap().data_mut() {
            *v = 0.25;
        }
        let bound = tade.map_named("t", &mut |_, t| eager.constant(t.clone()));
        let other_x = eager.constant(random_map(8, 20, 16).into_tensor());
        let s1 = tade_apply(&mut eager, &xe, &ce, &bound).unwrap();
        let s2 = tade_apply(&mut eager, &other_x, &ce, &bound).unwrap();
        assert_eq!(s1.data(), s2.data());
        assert!(s1.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn frame_count_mismatch_is_rejected() {
        let params: GeneratorParams<Tensor<f64>> = init_generator(small_config(), 17).unwrap();
        let z = sample_noise(12, 4, 1).unwrap();
        let mel = random_map(6, 5, 2);
        assert!(matches!(generator_infer(&z, &mel, &params), Err(Error::Input(_))));
        let bad_noise = sample_noise(11, 5, 1).unwrap();
        assert!(matches!(generator_infer(&bad_noise, &mel, &params), Err(Error::Input(_))));
    }

    #[test]
    fn default_parameter_count_matches_arithmetic() {
        // One 64→64 kernel-9 convolution with bias and magnitudes.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single: ConvParam<Tensor<f64>> =
            init_conv_param(Conv1dSpec::new(64, 64, 9), 1, &mut rng).unwrap();
        assert_eq!(single.parameter_count(), 36_992);
        let mut n = 0usize;
        single.visit("c", &mut |_, t| n += t.numel());
        assert_eq!(n, 36_992);

        let params: GeneratorParams<Tensor<f32>> =
            init_generator(GeneratorConfig::default(), 1).unwrap();
        let total = count_parameters(&params);
        assert_eq!(total, 3_200_962);
        let target = 3_860_000.0f64;
        assert!((total as f64) >= 0.8 * target && (total as f64) <= 1.2 * target);
    }

    #[test]
    fn parameter_names_follow_documented_scheme() {
        let params: GeneratorParams<Tensor<f64>> = init_generator(small_config(), 21).unwrap();
        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name));
        // 3 tensors per convolution; 9 per conditioning layer; 30 per
        // block; 8 stage blocks + final block + 2 outer convolutions.
        assert_eq!(names.len(), 3 + 8 * 30 + 30 + 3);
        assert_eq!(names[0], "input_conv.weight_v");
        assert!(names.contains(&"stage0.resblock.tade1.cond_conv.weight_v".to_string()));
        assert!(names.contains(&"stage3.resblock.tade1.gamma_conv.weight_v".to_string()));
        assert!(names.contains(&"stage7.resblock.conv_d2_gate.bias".to_string()));
        assert!(names.contains(&"final.resblock.tade2.beta_conv.weight_g".to_string()));
        assert_eq!(names.last().unwrap(), "final.out_conv.bias");
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn conditioning_change_is_temporally_local() {
        // A small-kernel configuration keeps the receptive field narrow
        // enough to leave most of the signal outside it.
        let cfg = GeneratorConfig {
            noise_channels: 8,
            channels: 8,
            mel_channels: 4,
            kernel_size: 3,
            cond_kernel_size: 3,
            stages: 8,
        };
        let params: GeneratorParams<Tensor<f64>> = init_generator(cfg, 23).unwrap();
        let frames = 160usize;
        let z = sample_noise(8, frames, 3).unwrap();
        let mel = random_map(4, frames, 4);
        let base = generator_infer(&z, &mel, &params).unwrap();

        let changed_frame = 80usize;
        let mut mel2 = mel.clone();
        for c in 0..4 {
            mel2.data_mut()[c * frames + changed_frame] += 3.0;
        }
        let modified = generator_infer(&z, &mel2, &params).unwrap();

        // Receptive radius in frames, from the convolution arithmetic:
        // injection at stage 0 spreads at most 5 samples (conditioning
        // path 2, then dilation-1 and dilation-2 pairs adding 1 + 2),
        // and each later block adds 3 / 2^i frames; total < 9. Use 12
        // for slack, in samples of the 256× output.
        let radius = 12usize * 256;
        let lo = changed_frame * 256 - radius;
        let hi = (changed_frame + 1) * 256 + radius;
        let mut inside = 0.0f64;
        let mut outside = 0.0f64;
        let (mut n_in, mut n_out) = (0usize, 0usize);
        for (i, (a, b)) in base.iter().zip(modified.iter()).enumerate() {
            let d = (a - b) * (a - b);
            if i >= lo && i < hi {
                inside += d;
                n_in += 1;
            } else {
                outside += d;
                n_out += 1;
            }
        }
        let rms_in = (inside / n_in as f64).sqrt();
        let rms_out = (outside / n_out as f64).sqrt();
        assert!(rms_in > 0.0, "the change must reach the output");
        // The per-channel normalization statistics couple every frame,
        // so a small global residue is expected; it must stay well
        // below the in-window response.
        assert!(
            rms_out < 0.2 * rms_in,
            "out-of-window rms {rms_out:.3e} vs in-window {rms_in:.3e}"
        );
    }
}
