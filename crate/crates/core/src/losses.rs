//! Training objectives: multi-resolution spectral reconstruction loss
//! (spectral convergence plus log-magnitude distance) and the hinge
//! adversarial losses for both players.
//!
//! Each loss exists twice: a pure eager form for tests and tools, and a
//! backend-generic composition (`*_on`) that the trainer runs against
//! the recording tape. Both forms share the same scalar kernels, so the
//! eager values are bitwise equal to the taped ones.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::{stft_forward_parts, StftPlan};
use crate::graph::Backend;
use crate::num::Real;
use crate::tensor::Tensor;

/// Additive floor inside the log-magnitude distance.
pub const LOG_MAG_EPSILON: f64 = 1e-7;
/// Number of discriminators the generator objective sums over.
pub const NUM_DISCRIMINATORS: usize = 4;

/// One STFT analysis used by the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftResolution {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
}

impl StftResolution {
    pub fn validate(&self) -> Result<()> {
        if self.win_size > self.fft_size {
            return Err(Error::config(format!(
                "window size {} exceeds fft size {}",
                self.win_size, self.fft_size
            )));
        }
        if self.hop_size == 0 || self.win_size == 0 {
            return Err(Error::config("hop and window sizes must be positive".to_string()));
        }
        Ok(())
    }
}

/// Resolutions averaged by the reconstruction loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuxLossConfig {
    pub resolutions: Vec<StftResolution>,
}

impl Default for AuxLossConfig {
    fn default() -> Self {
        AuxLossConfig {
            resolutions: vec![
                StftResolution { fft_size: 1024, hop_size: 120, win_size: 600 },
                StftResolution { fft_size: 2048, hop_size: 240, win_size: 1200 },
                StftResolution { fft_size: 512, hop_size: 50, win_size: 240 },
            ],
        }
    }
}

impl AuxLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::config("reconstruction loss needs at least one resolution".to_string()));
        }
        for r in &self.resolutions {
            r.validate()?;
        }
        Ok(())
    }

    /// Build one STFT plan per resolution, shareable across steps.
    pub fn plans<T: Real>(&self) -> Result<Vec<Arc<StftPlan<T>>>> {
        self.validate()?;
        self.resolutions
            .iter()
            .map(|r| Ok(Arc::new(StftPlan::new(r.fft_size, r.hop_size, r.win_size)?)))
            .collect()
    }
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::input(format!(
            "{what}: magnitude grids have different shapes {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Forward kernel of spectral convergence. Returns
/// `(loss, ‖ref − gen‖_F, ‖ref‖_F)`; the norms feed the backward pass.
pub(crate) fn sc_fwd<T: Real>(reference: &Tensor<T>, gen: &Tensor<T>) -> Result<(T, T, T)> {
    check_same_shape(reference, gen, "spectral convergence")?;
    let mut diff_sq = T::zero();
    let mut ref_sq = T::zero();
    for (&r, &g) in reference.data().iter().zip(gen.data().iter()) {
        let d = r - g;
        diff_sq += d * d;
        ref_sq += r * r;
    }
    if ref_sq == T::zero() {
        return Err(Error::degenerate(
            "spectral convergence is undefined for an all-zero reference".to_string(),
        ));
    }
    let diff_norm = diff_sq.sqrt();
    let ref_norm = ref_sq.sqrt();
    Ok((diff_norm / ref_norm, diff_norm, ref_norm))
}

/// Backward kernel: `d gen = dy · (gen − ref) / (‖ref − gen‖ · ‖ref‖)`.
/// At the identity point the norm vanishes and the gradient is exactly
/// zero by definition (the loss sits at its minimum).
pub(crate) fn sc_vjp<T: Real>(
    dy: T,
    reference: &Tensor<T>,
    gen: &Tensor<T>,
    diff_norm: T,
    ref_norm: T,
) -> Tensor<T> {
    let mut out = Tensor::zeros(gen.dims());
    if diff_norm > T::zero() {
        let scale = dy / (diff_norm * ref_norm);
        for ((o, &r), &g) in
            out.data_mut().iter_mut().zip(reference.data().iter()).zip(gen.data().iter())
        {
            *o = scale * (g - r);
        }
    }
    out
}

/// Forward kernel of the log-magnitude distance:
/// mean of `|ln(ref + ε) − ln(gen + ε)|`.
pub(crate) fn logmag_fwd<T: Real>(reference: &Tensor<T>, gen: &Tensor<T>) -> Result<T> {
    check_same_shape(reference, gen, "log-magnitude distance")?;
    let eps = T::from_f64_(LOG_MAG_EPSILON);
    let mut acc = T::zero();
    for (&r, &g) in reference.data().iter().zip(gen.data().iter()) {
        acc += ((r + eps).ln() - (g + eps).ln()).abs();
    }
    Ok(acc / T::from_usize_(reference.numel()))
}

/// Backward kernel: `d gen = dy · (−sign(ln(ref+ε) − ln(gen+ε))) / ((gen+ε)·N)`,
/// zero where the two logs agree exactly.
pub(crate) fn logmag_vjp<T: Real>(dy: T, reference: &Tensor<T>, gen: &Tensor<T>) -> Tensor<T> {
    let eps = T::from_f64_(LOG_MAG_EPSILON);
    let n = T::from_usize_(gen.numel());
    let mut out = Tensor::zeros(gen.dims());
    for ((o, &r), &g) in
        out.data_mut().iter_mut().zip(reference.data().iter()).zip(gen.data().iter())
    {
        let delta = (r + eps).ln() - (g + eps).ln();
        if delta > T::zero() {
            *o = -dy / ((g + eps) * n);
        } else if delta < T::zero() {
            *o = dy / ((g + eps) * n);
        }
    }
    out
}

/// `‖S_ref − S_gen‖_F / ‖S_ref‖_F` over equal-shape magnitude grids.
pub fn spectral_convergence<T: Real>(s_ref: &Tensor<T>, s_gen: &Tensor<T>) -> Result<T> {
    Ok(sc_fwd(s_ref, s_gen)?.0)
}

/// Mean absolute natural-log magnitude distance with an `1e-7` floor.
pub fn log_stft_magnitude_loss<T: Real>(s_ref: &Tensor<T>, s_gen: &Tensor<T>) -> Result<T> {
    logmag_fwd(s_ref, s_gen)
}

/// Backend-generic reconstruction loss: for each plan, the generated
/// signal's magnitudes are compared against the precomputed reference
/// magnitudes, and `spectral convergence + log-magnitude` terms are
/// averaged over resolutions. The reference grids are constants; only
/// the generated signal participates in gradients.
pub fn aux_loss_on<T: Real, B: Backend<T>>(
    backend: &mut B,
    reference_mags: &[Arc<Tensor<T>>],
    x_gen: &B::Value,
    plans: &[Arc<StftPlan<T>>],
) -> Result<B::Value> {
    if plans.is_empty() || reference_mags.len() != plans.len() {
        return Err(Error::config(format!(
            "reconstruction loss needs matching plan/reference counts, got {} and {}",
            plans.len(),
            reference_mags.len()
        )));
    }
    let weight = T::one() / T::from_usize_(plans.len());
    let mut terms = Vec::with_capacity(2 * plans.len());
    for (plan, reference) in plans.iter().zip(reference_mags.iter()) {
        let mag = backend.stft_magnitude(x_gen, plan)?;
        let sc = backend.spectral_convergence(reference, &mag)?;
        let lm = backend.log_magnitude_loss(reference, &mag)?;
        terms.push((weight, sc));
        terms.push((weight, lm));
    }
    backend.lin_comb(&terms)
}

/// Reference magnitude grids for every resolution of a plan set.
pub fn reference_magnitudes<T: Real>(
    x_ref: &[T],
    plans: &[Arc<StftPlan<T>>],
) -> Result<Vec<Arc<Tensor<T>>>> {
    plans
        .iter()
        .map(|p| Ok(Arc::new(stft_forward_parts(p.as_ref(), x_ref)?.0)))
        .collect()
}

/// Eager multi-resolution reconstruction loss between two waveforms.
pub fn aux_stft_loss<T: Real>(x_ref: &[T], x_gen: &[T], cfg: &AuxLossConfig) -> Result<T> {
    if x_ref.len() != x_gen.len() {
        return Err(Error::input(format!(
            "waveform lengths differ: {} vs {}",
            x_ref.len(),
            x_gen.len()
        )));
    }
    let plans = cfg.plans::<T>()?;
    let refs = reference_magnitudes(x_ref, &plans)?;
    let mut eager = crate::graph::Eager;
    let gen_value = Tensor::from_vec(&[1, x_gen.len()], x_gen.to_vec())?;
    let loss = aux_loss_on(&mut eager, &refs, &gen_value, &plans)?;
    loss.scalar_value()
}

/// Backend-generic hinge objective for the discriminator:
/// `mean(relu(1 − real)) + mean(relu(1 + fake))` over scalar scores.
pub fn hinge_discriminator_loss_on<T: Real, B: Backend<T>>(
    backend: &mut B,
    real: &[B::Value],
    fake: &[B::Value],
) -> Result<B::Value> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::input(
            "hinge discriminator loss needs both real and fake scores".to_string(),
        ));
    }
    let mut terms = Vec::with_capacity(real.len() + fake.len());
    let wr = T::one() / T::from_usize_(real.len());
    for r in real {
        let margin = backend.relu_affine(r, -T::one(), T::one())?;
        terms.push((wr, backend.mean_all(&margin)?));
    }
    let wf = T::one() / T::from_usize_(fake.len());
    for f in fake {
        let margin = backend.relu_affine(f, T::one(), T::one())?;
        terms.push((wf, backend.mean_all(&margin)?));
    }
    backend.lin_comb(&terms)
}

/// Eager hinge discriminator loss over plain score lists.
pub fn hinge_discriminator_loss<T: Real>(real: &[T], fake: &[T]) -> Result<T> {
    let mut eager = crate::graph::Eager;
    let real: Vec<Tensor<T>> = real.iter().map(|&v| Tensor::scalar(v)).collect();
    let fake: Vec<Tensor<T>> = fake.iter().map(|&v| Tensor::scalar(v)).collect();
    hinge_discriminator_loss_on(&mut eager, &real, &fake)?.scalar_value()
}

/// Backend-generic generator hinge: scores arrive as
/// `(discriminator index 1..=4, scalar score)`; repeats are averaged
/// within each discriminator and the four means are summed negated.
pub fn hinge_generator_loss_on<T: Real, B: Backend<T>>(
    backend: &mut B,
    scores: &[(usize, B::Value)],
) -> Result<B::Value> {
    let mut per_k: Vec<Vec<&B::Value>> = vec![Vec::new(); NUM_DISCRIMINATORS];
    for (k, v) in scores {
        if !(1..=NUM_DISCRIMINATORS).contains(k) {
            return Err(Error::input(format!(
                "discriminator index {k} outside 1..={NUM_DISCRIMINATORS}"
            )));
        }
        per_k[k - 1].push(v);
    }
    let mut terms = Vec::with_capacity(scores.len());
    for (k, group) in per_k.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::input(format!("no scores for discriminator {}", k + 1)));
        }
        let w = -T::one() / T::from_usize_(group.len());
        for v in group {
            terms.push((w, backend.mean_all(v)?));
        }
    }
    backend.lin_comb(&terms)
}

/// Eager generator hinge over `(discriminator index, score)` pairs.
pub fn hinge_generator_loss<T: Real>(scores: &[(usize, T)]) -> Result<T> {
    let mut eager = crate::graph::Eager;
    let scores: Vec<(usize, Tensor<T>)> =
        scores.iter().map(|&(k, v)| (k, Tensor::scalar(v))).collect();
    hinge_generator_loss_on(&mut eager, &scores)?.scalar_value()
}

/// Combined generator objective: adversarial term plus reconstruction
/// term with unit weights. Pretraining passes `adv = 0`.
pub fn generator_objective<T: Real>(adv: T, aux: T) -> T {
    adv + aux
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn spectral_convergence_identity_and_scaling() {
        let s = grid(&[5, 7], 1, 0.1, 2.0);
        assert_eq!(spectral_convergence(&s, &s).unwrap(), 0.0);
        let zero = Tensor::zeros(&[5, 7]);
        assert!((spectral_convergence(&s, &zero).unwrap() - 1.0).abs() < 1e-12);
        let doubled = Tensor::from_vec(&[5, 7], s.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!((spectral_convergence(&s, &doubled).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_convergence_rejects_zero_reference() {
        let zero = Tensor::<f64>::zeros(&[3, 3]);
        let s = grid(&[3, 3], 2, 0.1, 1.0);
        assert!(matches!(spectral_convergence(&zero, &s), Err(Error::Degenerate(_))));
    }

    #[test]
    fn log_magnitude_identity_ratio_and_symmetry() {
        let s = grid(&[4, 6], 3, 0.5, 3.0);
        assert_eq!(log_stft_magnitude_loss(&s, &s).unwrap(), 0.0);
        let scaled = Tensor::from_vec(
            &[4, 6],
            s.data().iter().map(|v| v * std::f64::consts::E).collect(),
        )
        .unwrap();
        let loss = log_stft_magnitude_loss(&scaled, &s).unwrap();
        assert!((loss - 1.0).abs() < 1e-4, "got {loss}");
        let a = grid(&[4, 6], 4, 0.1, 2.0);
        let ab = log_stft_magnitude_loss(&a, &s).unwrap();
        let ba = log_stft_magnitude_loss(&s, &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn aux_loss_identity_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = AuxLossConfig::default();
        assert_eq!(aux_stft_loss(&x, &x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn aux_loss_is_positive_for_mismatched_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sine: Vec<f64> =
            (0..4096).map(|t| (2.0 * std::f64::consts::PI * 0.03 * t as f64).sin()).collect();
        assert!(aux_stft_loss(&sine, &noise, &AuxLossConfig::default()).unwrap() > 0.0);
    }

    #[test]
    fn aux_loss_single_resolution_matches_component_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let res = StftResolution { fft_size: 512, hop_size: 128, win_size: 512 };
        let cfg = AuxLossConfig { resolutions: vec![res] };
        let got = aux_stft_loss(&a, &b, &cfg).unwrap();
        let sa = crate::features::stft_magnitude(&a, 512, 128, 512).unwrap();
        let sb = crate::features::stft_magnitude(&b, 512, 128, 512).unwrap();
        let want = spectral_convergence(&sa, &sb).unwrap() + log_stft_magnitude_loss(&sa, &sb).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_rejects_length_mismatch() {
        let cfg = AuxLossConfig::default();
        assert!(matches!(
            aux_stft_loss(&vec![0.1f64; 100], &vec![0.1f64; 101], &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn hinge_discriminator_margin_arithmetic() {
        assert_eq!(hinge_discriminator_loss(&[1.5f64, 2.0], &[-1.0, -4.0]).unwrap(), 0.0);
        assert_eq!(hinge_discriminator_loss(&[0.0f64], &[0.0]).unwrap(), 2.0);
        assert_eq!(hinge_discriminator_loss(&[2.0f64], &[-3.0]).unwrap(), 0.0);
        assert!((hinge_discriminator_loss(&[0.5f64], &[0.5]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            hinge_discriminator_loss::<f64>(&[], &[0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn hinge_generator_sums_negated_per_discriminator_means() {
        let zeros: Vec<(usize, f64)> = (1..=4).map(|k| (k, 0.0)).collect();
        assert_eq!(hinge_generator_loss(&zeros).unwrap(), 0.0);
        let ones: Vec<(usize, f64)> = (1..=4).map(|k| (k, 1.0)).collect();
        assert_eq!(hinge_generator_loss(&ones).unwrap(), -4.0);
        let mixed = vec![(1usize, 0.5f64), (2, -0.5), (3, 0.0), (4, 0.0)];
        assert_eq!(hinge_generator_loss(&mixed).unwrap(), 0.0);
        let repeats = vec![(1usize, 1.0f64), (1, 3.0), (2, 0.0), (3, 0.0), (4, 0.0)];
        assert_eq!(hinge_generator_loss(&repeats).unwrap(), -2.0);
        let missing = vec![(1usize, 0.0f64), (2, 0.0), (3, 0.0)];
        assert!(matches!(hinge_generator_loss(&missing), Err(Error::Input(_))));
        let out_of_range = vec![(5usize, 0.0f64)];
        assert!(matches!(hinge_generator_loss(&out_of_range), Err(Error::Input(_))));
    }

    #[test]
    fn objective_is_plain_sum() {
        assert_eq!(generator_objective(0.0f64, 0.0), 0.0);
        assert_eq!(generator_objective(-4.0f64, 1.5), -2.5);
    }

    proptest! {
        #[test]
        fn hinge_discriminator_is_monotone(
            real in proptest::collection::vec(-3.0f64..3.0, 1..6),
            fake in proptest::collection::vec(-3.0f64..3.0, 1..6),
            bump in 0.01f64..1.0,
            idx in 0usize..6,
        ) {
            let base = hinge_discriminator_loss(&real, &fake).unwrap();
            let mut higher_real = real.clone();
            let i = idx % real.len();
            higher_real[i] += bump;
            prop_assert!(hinge_discriminator_loss(&higher_real, &fake).unwrap() <= base + 1e-12);
            let mut lower_fake = fake.clone();
            let j = idx % fake.len();
            lower_fake[j] -= bump;
            prop_assert!(hinge_discriminator_loss(&real, &lower_fake).unwrap() <= base + 1e-12);
        }

        #[test]
        fn spectral_convergence_is_nonnegative(
            seed in 0u64..500,
        ) {
            let r = grid(&[3, 4], seed, 0.05, 2.0);
            let g = grid(&[3, 4], seed + 1000, 0.0, 2.0);
            prop_assert!(spectral_convergence(&r, &g).unwrap() >= 0.0);
        }
    }
}
