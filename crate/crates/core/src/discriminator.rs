//! Random-window sub-band discriminators.
//!
//! Four evaluators share one shape of convolutional stack but own
//! independent parameters. Each takes a random window of the waveform
//! (512, 1024, 2048, or 4096 samples), splits it into 1, 2, 4, or 8
//! sub-bands — every evaluator therefore sees exactly 512 post-analysis
//! time steps — and scores it with strided convolution blocks. All
//! downsampling is by convolution stride; there is no pooling anywhere,
//! and the score maps stay raw (no squashing) for the hinge objectives.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{conv_wn, init_conv_param, Backend, ConvParam, Eager};
use crate::nn::Conv1dSpec;
use crate::num::Real;
use crate::pqmf::{default_bank, PqmfBank};
use crate::tensor::Tensor;

/// Negative-branch slope of every block activation.
pub const DBLOCK_LEAKY_SLOPE: f64 = 0.2;
/// The four (window, bands) pairings, in discriminator order.
pub const WINDOW_BAND_PAIRS: [(usize, usize); 4] = [(512, 1), (1024, 2), (2048, 4), (4096, 8)];

/// Shape of one discriminator: its window/band pairing and the
/// convolutional stack evaluating the sub-band signal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RwdSpec {
    pub window_size: usize,
    pub num_bands: usize,
    /// Output channels of each strided block.
    pub dblock_channels: Vec<usize>,
    /// Kernel size of the strided blocks.
    pub dblock_kernel: usize,
    /// Stride of each block; the product is the total downsampling.
    pub strides: Vec<usize>,
    /// Kernel size of the final 1-channel scoring convolution.
    pub score_kernel: usize,
}

impl RwdSpec {
    /// Default stack for one (window, bands) pairing: four kernel-5
    /// blocks with channels [64, 128, 256, 512] and stride 2 each, then
    /// a kernel-3 scoring convolution.
    pub fn new(window_size: usize, num_bands: usize) -> Self {
        RwdSpec {
            window_size,
            num_bands,
            dblock_channels: vec![64, 128, 256, 512],
            dblock_kernel: 5,
            strides: vec![2, 2, 2, 2],
            score_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bands == 0 || self.window_size % self.num_bands != 0 {
            return Err(Error::config(format!(
                "window of {} samples does not split into {} bands",
                self.window_size, self.num_bands
            )));
        }
        if self.dblock_channels.is_empty() || self.dblock_channels.len() != self.strides.len() {
            return Err(Error::config(format!(
                "{} block channel counts for {} strides",
                self.dblock_channels.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::config("block strides must be positive".to_string()));
        }
        Ok(())
    }

    /// Time steps entering the convolutional stack.
    pub fn post_analysis_steps(&self) -> usize {
        self.window_size / self.num_bands
    }

    /// Total downsampling applied by the stack.
    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    /// Length of the output score map.
    pub fn score_steps(&self) -> usize {
        let mut t = self.post_analysis_steps();
        for &s in &self.strides {
            t = t.div_ceil(s);
        }
        t
    }
}

/// The four default discriminator shapes, pairing growing windows with
/// growing band counts so every evaluator sees 512 time steps.
pub fn default_rwd_specs() -> Vec<RwdSpec> {
    WINDOW_BAND_PAIRS.iter().map(|&(w, b)| RwdSpec::new(w, b)).collect()
}

/// Parameters of one discriminator: strided blocks plus the scoring
/// convolution.
#[derive(Debug, Clone)]
pub struct RwdParams<P> {
    pub spec: RwdSpec,
    pub dblocks: Vec<ConvParam<P>>,
    pub score_conv: ConvParam<P>,
}

impl<P> RwdParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        for (i, b) in self.dblocks.iter().enumerate() {
            b.visit(&format!("{prefix}.dblock{i}.conv"), f);
        }
        self.score_conv.visit(&format!("{prefix}.score_conv"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        for (i, b) in self.dblocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.dblock{i}.conv"), f);
        }
        self.score_conv.visit_mut(&format!("{prefix}.score_conv"), f);
    }

    pub fn map_named<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> RwdParams<Q> {
        RwdParams {
            spec: self.spec.clone(),
            dblocks: self
                .dblocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_named(&format!("{prefix}.dblock{i}.conv"), f))
                .collect(),
            score_conv: self.score_conv.map_named(&format!("{prefix}.score_conv"), f),
        }
    }
}

/// Parameters of all four discriminators; index k is 1-based in names
/// (`disc.k1.` … `disc.k4.`).
#[derive(Debug, Clone)]
pub struct DiscriminatorParams<P> {
    pub rwds: Vec<RwdParams<P>>,
}

impl<P> DiscriminatorParams<P> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        for (i, d) in self.rwds.iter().enumerate() {
            d.visit(&format!("disc.k{}", i + 1), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        for (i, d) in self.rwds.iter_mut().enumerate() {
            d.visit_mut(&format!("disc.k{}", i + 1), f);
        }
    }

    pub fn map_named<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> DiscriminatorParams<Q> {
        DiscriminatorParams {
            rwds: self
                .rwds
                .iter()
                .enumerate()
                .map(|(i, d)| d.map_named(&format!("disc.k{}", i + 1), f))
                .collect(),
        }
    }

    /// Largest window any discriminator needs; inputs must be at least
    /// this long.
    pub fn max_window(&self) -> usize {
        self.rwds.iter().map(|d| d.spec.window_size).max().unwrap_or(0)
    }
}

impl<T: Real> DiscriminatorParams<Tensor<T>> {
    pub fn bind<B: Backend<T>>(&self, backend: &mut B) -> DiscriminatorParams<B::Value> {
        self.map_named(&mut |name, t| backend.param(name, t.clone()))
    }

    pub fn bind_constant<B: Backend<T>>(&self, backend: &mut B) -> DiscriminatorParams<B::Value> {
        self.map_named(&mut |_, t| backend.constant(t.clone()))
    }

    /// One analysis bank per discriminator, matching its band count.
    pub fn build_banks(&self) -> Result<Vec<Arc<PqmfBank<T>>>> {
        self.rwds.iter().map(|d| Ok(Arc::new(default_bank(d.spec.num_bands)?))).collect()
    }

    /// Total scalar parameter count across all four evaluators.
    pub fn count_parameters(&self) -> usize {
        let mut total = 0usize;
        self.visit(&mut |_, t| total += t.numel());
        total
    }
}

fn init_rwd<T: Real>(spec: RwdSpec, rng: &mut ChaCha8Rng) -> Result<RwdParams<Tensor<T>>> {
    spec.validate()?;
    let mut dblocks = Vec::with_capacity(spec.dblock_channels.len());
    let mut in_c = spec.num_bands;
    for (i, &out_c) in spec.dblock_channels.iter().enumerate() {
        dblocks.push(init_conv_param(
            Conv1dSpec::new(in_c, out_c, spec.dblock_kernel),
            spec.strides[i],
            rng,
        )?);
        in_c = out_c;
    }
    let score_conv = init_conv_param(Conv1dSpec::new(in_c, 1, spec.score_kernel), 1, rng)?;
    Ok(RwdParams { spec, dblocks, score_conv })
}

/// Fresh parameters for every discriminator, drawn in name order from a
/// stream seeded with `seed`. Each evaluator's parameters are
/// independent — nothing is shared.
pub fn init_discriminator<T: Real>(
    specs: Vec<RwdSpec>,
    seed: u64,
) -> Result<DiscriminatorParams<Tensor<T>>> {
    if specs.is_empty() {
        return Err(Error::config("at least one discriminator is required".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rwds =
        specs.into_iter().map(|s| init_rwd(s, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(DiscriminatorParams { rwds })
}

/// Uniformly place a window of `window_size` samples inside `x`.
/// Returns the slice and its start offset; the start is uniform on
/// `[0, len − window_size]`.
pub fn sample_random_window<T: Real>(
    x: &[T],
    window_size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<T>, usize)> {
    if window_size == 0 {
        return Err(Error::input("window size must be positive".to_string()));
    }
    if x.len() < window_size {
        return Err(Error::input(format!(
            "signal of {} samples is shorter than the {}-sample window",
            x.len(),
            window_size
        )));
    }
    let start = rng.gen_range(0..=x.len() - window_size);
    Ok((x[start..start + window_size].to_vec(), start))
}

/// Score one window: sub-band analysis, the strided blocks with their
/// activations, then the 1-channel scoring convolution. Returns the raw
/// score map `[1, T_s]`.
pub fn rwd_forward<T: Real, B: Backend<T>>(
    backend: &mut B,
    window: &B::Value,
    bank: &Arc<PqmfBank<T>>,
    p: &RwdParams<B::Value>,
) -> Result<B::Value> {
    let mut x = backend.pqmf_analysis(window, bank)?;
    for block in &p.dblocks {
        x = conv_wn(backend, block, &x)?;
        x = backend.leaky_relu(&x, T::from_f64_(DBLOCK_LEAKY_SLOPE))?;
    }
    conv_wn(backend, &p.score_conv, &x)
}

/// Eager single-window scoring with the window-length precondition
/// enforced.
pub fn rwd_score_map<T: Real>(
    window: &[T],
    bank: &Arc<PqmfBank<T>>,
    p: &RwdParams<Tensor<T>>,
) -> Result<Vec<T>> {
    if window.len() != p.spec.window_size {
        return Err(Error::config(format!(
            "window of {} samples for a {}-sample discriminator",
            window.len(),
            p.spec.window_size
        )));
    }
    if bank.num_bands() != p.spec.num_bands {
        return Err(Error::config(format!(
            "bank with {} bands for a {}-band discriminator",
            bank.num_bands(),
            p.spec.num_bands
        )));
    }
    let mut eager = Eager;
    let w = eager.constant(Tensor::from_vec(&[1, window.len()], window.to_vec())?);
    let bound = p.map_named("d", &mut |_, t| eager.constant(t.clone()));
    Ok(rwd_forward(&mut eager, &w, bank, &bound)?.into_data())
}

/// Evaluate every discriminator on `repeats` independent random windows
/// of the signal. Returns `(discriminator index 1..=4, mean score)` in
/// k-major, repeat-minor order — the documented randomness consumption
/// order. Window starts are all drawn before any evaluation, so the
/// evaluation schedule cannot perturb the stream.
pub fn fbrwd_evaluate<T: Real>(
    x: &[T],
    params: &DiscriminatorParams<Tensor<T>>,
    banks: &[Arc<PqmfBank<T>>],
    rng: &mut impl Rng,
    repeats: usize,
) -> Result<Vec<(usize, T)>> {
    if repeats == 0 {
        return Err(Error::input("at least one window repeat is required".to_string()));
    }
    if banks.len() != params.rwds.len() {
        return Err(Error::config(format!(
            "{} banks for {} discriminators",
            banks.len(),
            params.rwds.len()
        )));
    }
    let needed = params.max_window();
    if x.len() < needed {
        return Err(Error::input(format!(
            "signal of {} samples is shorter than the largest window ({needed})",
            x.len()
        )));
    }
    let mut windows = Vec::with_capacity(params.rwds.len() * repeats);
    for d in &params.rwds {
        for _ in 0..repeats {
            windows.push(sample_random_window(x, d.spec.window_size, rng)?.0);
        }
    }
    let mut scores = Vec::with_capacity(windows.len());
    for (i, (d, bank)) in params.rwds.iter().zip(banks.iter()).enumerate() {
        for r in 0..repeats {
            let map = rwd_score_map(&windows[i * repeats + r], bank, d)?;
            let mut acc = T::zero();
            for &v in &map {
                acc += v;
            }
            scores.push((i + 1, acc / T::from_usize_(map.len())));
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairings_are_exactly_the_four_required() {
        let specs = default_rwd_specs();
        let pairs: Vec<(usize, usize)> =
            specs.iter().map(|s| (s.window_size, s.num_bands)).collect();
        assert_eq!(pairs, vec![(512, 1), (1024, 2), (2048, 4), (4096, 8)]);
        for s in &specs {
            assert_eq!(s.post_analysis_steps(), 512);
            s.validate().unwrap();
        }
    }

    #[test]
    fn downsampling_comes_only_from_strides() {
        for spec in default_rwd_specs() {
            assert_eq!(spec.stride_product(), 16);
            assert_eq!(spec.score_steps(), 512 / 16);
            // The score length must be fully explained by the stride
            // product — any pooling would break this equality.
            assert_eq!(spec.post_analysis_steps() / spec.stride_product(), spec.score_steps());
        }
    }

    #[test]
    fn score_map_shape_matches_stride_arithmetic() {
        let params: DiscriminatorParams<Tensor<f64>> =
            init_discriminator(default_rwd_specs(), 5).unwrap();
        let banks = params.build_banks().unwrap();
        for (d, bank) in params.rwds.iter().zip(banks.iter()) {
            let window = vec![0.01f64; d.spec.window_size];
            let map = rwd_score_map(&window, bank, d).unwrap();
            assert_eq!(map.len(), 32);
        }
    }

    #[test]
    fn zero_input_with_zero_biases_scores_zero() {
        let mut params: DiscriminatorParams<Tensor<f64>> =
            init_discriminator(default_rwd_specs(), 6).unwrap();
        params.visit_mut(&mut |name, t| {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let banks = params.build_banks().unwrap();
        for (d, bank) in params.rwds.iter().zip(banks.iter()) {
            let window = vec![0.0f64; d.spec.window_size];
            let map = rwd_score_map(&window, bank, d).unwrap();
            assert!(map.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn different_windows_score_differently() {
        let params: DiscriminatorParams<Tensor<f64>> =
            init_discriminator(default_rwd_specs(), 7).unwrap();
        let banks = params.build_banks().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let signal: Vec<f64> = (0..8192).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = &params.rwds[0];
        let a = rwd_score_map(&signal[0..512], &banks[0], d).unwrap();
        let b = rwd_score_map(&signal[512..1024], &banks[0], d).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn window_sampler_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = vec![0.0f32; 22050];
        for _ in 0..200 {
            let (w, start) = sample_random_window(&x, 4096, &mut rng).unwrap();
            assert_eq!(w.len(), 4096);
            assert!(start <= 17954);
        }
        let (_, start) = sample_random_window(&vec![0.0f32; 512], 512, &mut rng).unwrap();
        assert_eq!(start, 0);
        assert!(matches!(
            sample_random_window(&vec![0.0f32; 100], 512, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn window_sampler_is_reproducible() {
        let x: Vec<f64> = (0..9000).map(|i| (i as f64 * 0.01).sin()).collect();
        let starts = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| sample_random_window(&x, 2048, &mut rng).unwrap().1).collect()
        };
        assert_eq!(starts(3), starts(3));
        assert_ne!(starts(3), starts(4));
    }

    #[test]
    fn evaluation_returns_k_major_repeat_minor_means() {
        let params: DiscriminatorParams<Tensor<f32>> =
            init_discriminator(default_rwd_specs(), 10).unwrap();
        let banks = params.build_banks().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let signal: Vec<f32> = (0..22016).map(|i| (i as f32 * 0.013).sin() * 0.5).collect();

        let single = fbrwd_evaluate(&signal, &params, &banks, &mut rng, 1).unwrap();
        assert_eq!(single.len(), 4);
        assert_eq!(single.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let many = fbrwd_evaluate(&signal, &params, &banks, &mut rng, 4).unwrap();
        assert_eq!(many.len(), 16);
        let ks: Vec<usize> = many.iter().map(|s| s.0).collect();
        assert_eq!(ks, vec![1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4]);
        assert!(many.iter().all(|s| s.1.is_finite()));

        let mut rng_a = ChaCha8Rng::seed_from_u64(12);
        let mut rng_b = ChaCha8Rng::seed_from_u64(12);
        let a = fbrwd_evaluate(&signal, &params, &banks, &mut rng_a, 2).unwrap();
        let b = fbrwd_evaluate(&signal, &params, &banks, &mut rng_b, 2).unwrap();
        assert_eq!(a, b);

        let short = vec![0.0f32; 4095];
        assert!(matches!(
            fbrwd_evaluate(&short, &params, &banks, &mut rng, 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn parameter_names_carry_discriminator_prefixes() {
        let params: DiscriminatorParams<Tensor<f64>> =
            init_discriminator(default_rwd_specs(), 13).unwrap();
        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name));
        // 4 blocks + 1 scoring conv per discriminator, 3 tensors each.
        assert_eq!(names.len(), 4 * 5 * 3);
        assert!(names.contains(&"disc.k1.dblock0.conv.weight_v".to_string()));
        assert!(names.contains(&"disc.k4.dblock3.conv.weight_g".to_string()));
        assert!(names.contains(&"disc.k2.score_conv.bias".to_string()));
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn discriminators_have_independent_parameters() {
        let params: DiscriminatorParams<Tensor<f64>> =
            init_discriminator(default_rwd_specs(), 14).unwrap();
        // Same-shaped tensors across discriminators must differ (k2..k4
        // share block shapes from layer 1 onward).
        let w2 = params.rwds[1].dblocks[1].direction.data();
        let w3 = params.rwds[2].dblocks[1].direction.data();
        assert_ne!(w2, w3);
    }
}
