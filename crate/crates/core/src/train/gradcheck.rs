//! Gradient verification against central finite differences.
//!
//! All checks run in 64-bit precision: the finite-difference quotient
//! `(f(x+h) − f(x−h)) / 2h` needs more headroom than 32-bit offers at the
//! default step size. The relative error uses a small absolute floor so that
//! coordinates with genuinely tiny gradients do not divide by noise.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::StftPlan;
use crate::generator::{generator_forward, init_generator, sample_noise, GeneratorConfig};
use crate::graph::{Backend, Eager};
use crate::losses::{aux_loss_on, reference_magnitudes, AuxLossConfig, StftResolution};
use crate::nn::{Conv1dSpec, ConvGeom};
use crate::pqmf::{default_bank, PqmfBank};
use crate::tensor::Tensor;
use crate::train::tape::{Tape, TapeGradients};

/// Default finite-difference step.
pub const DEFAULT_STEP_SIZE: f64 = 1e-4;

/// Relative-error floor: coordinates where both the analytic and numeric
/// derivative are below this magnitude compare against the floor instead.
const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Which operation or composition was checked.
    pub name: String,
    /// Worst relative disagreement across all probed coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates probed.
    pub probes: usize,
}

/// Compare analytic gradients against central finite differences of `f` on
/// `probes` randomly chosen parameter coordinates (all coordinates when the
/// parameter space is at most that large). Returns the maximum relative
/// error, where the denominator is `max(|numeric|, |analytic|, floor)`.
pub fn finite_diff_gradcheck(
    params: &BTreeMap<String, Tensor<f64>>,
    analytic: &TapeGradients<f64>,
    f: &mut dyn FnMut(&BTreeMap<String, Tensor<f64>>) -> Result<f64>,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let layout: Vec<(&String, usize)> =
        params.iter().map(|(name, t)| (name, t.numel())).collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::usage("gradient check needs at least one parameter".to_string()));
    }

    let mut coords: Vec<usize> = Vec::new();
    if probes >= total {
        coords.extend(0..total);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        while coords.len() < probes {
            let c = rng.gen_range(0..total);
            if seen.insert(c) {
                coords.push(c);
            }
        }
    }

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for flat in coords {
        let mut remaining = flat;
        let (name, _) = layout
            .iter()
            .find(|(_, n)| {
                if remaining < *n {
                    true
                } else {
                    remaining -= *n;
                    false
                }
            })
            .expect("flat coordinate within total");
        let name = (*name).clone();
        let idx = remaining;
        let base = params[&name].data()[idx];

        work.get_mut(&name).unwrap().data_mut()[idx] = base + h;
        let f_plus = f(&work)?;
        work.get_mut(&name).unwrap().data_mut()[idx] = base - h;
        let f_minus = f(&work)?;
        work.get_mut(&name).unwrap().data_mut()[idx] = base;

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let analytic_v = analytic.get(&name).map_or(0.0, |g| g.data()[idx]);
        let denom = numeric.abs().max(analytic_v.abs()).max(REL_ERROR_FLOOR);
        let rel = (numeric - analytic_v).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// A scalar objective expressed once against the backend interface, so the
/// identical construction runs on the tape (for analytic gradients) and
/// eagerly (for finite-difference probes).
trait ScalarGraph {
    fn build<B: Backend<f64>>(
        &self,
        backend: &mut B,
        params: &BTreeMap<String, B::Value>,
    ) -> Result<B::Value>;
}

fn check_graph(
    name: &str,
    params: &BTreeMap<String, Tensor<f64>>,
    graph: &impl ScalarGraph,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let mut bound = BTreeMap::new();
    for (key, value) in params {
        bound.insert(key.clone(), tape.param(key, value.clone()));
    }
    let root = graph.build(&mut tape, &bound)?;
    let analytic = tape.backward(root)?;

    let mut f = |p: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut eager = Eager;
        let mut bound = BTreeMap::new();
        for (key, value) in p {
            bound.insert(key.clone(), eager.constant(value.clone()));
        }
        let root = graph.build(&mut eager, &bound)?;
        eager.read_scalar(&root)
    };
    let max_rel_error = finite_diff_gradcheck(params, &analytic, &mut f, probes, h, seed)?;
    let total: usize = params.values().map(|t| t.numel()).sum();
    Ok(GradcheckReport { name: name.to_string(), max_rel_error, probes: probes.min(total) })
}

/// Deterministic smooth test values with no coordinate near the kinks of
/// piecewise-linear operations.
fn smooth_values(n: usize, scale: f64, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 0.7310 + phase;
            let v = t.sin() * scale;
            // Push values away from zero so rectifier kinks stay clear of
            // the finite-difference window.
            if v >= 0.0 {
                v + 0.15 * scale
            } else {
                v - 0.15 * scale
            }
        })
        .collect()
}

fn tensor2(c: usize, t: usize, scale: f64, phase: f64) -> Tensor<f64> {
    Tensor::from_vec(&[c, t], smooth_values(c * t, scale, phase)).unwrap()
}

/// Mask used to give reductions a non-uniform cotangent.
fn mask_like(dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|i| 0.4 + 0.13 * (i % 7) as f64).collect()).unwrap()
}

enum PrimitiveCase {
    WeightNorm,
    Conv { geom: ConvGeom, bias: bool },
    InstanceNorm,
    LeakyRelu { slope: f64 },
    Tanh,
    GatedTanh,
    Upsample { factor: usize },
    Add,
    Mul,
    Window { start: usize, len: usize },
    Pqmf { bank: Arc<PqmfBank<f64>> },
    Stft { plan: Arc<StftPlan<f64>> },
    SpectralConvergence { reference: Arc<Tensor<f64>> },
    LogMagnitude { reference: Arc<Tensor<f64>> },
    MeanAll,
    ReluAffine { scale: f64, shift: f64 },
    LinComb,
}

struct Case {
    name: &'static str,
    params: BTreeMap<String, Tensor<f64>>,
    kind: PrimitiveCase,
}

impl ScalarGraph for Case {
    fn build<B: Backend<f64>>(
        &self,
        b: &mut B,
        p: &BTreeMap<String, B::Value>,
    ) -> Result<B::Value> {
        let masked_mean = |b: &mut B, v: &B::Value, dims: &[usize]| -> Result<B::Value> {
            let mask = b.constant(mask_like(dims));
            let prod = b.mul(v, &mask)?;
            b.mean_all(&prod)
        };
        match &self.kind {
            PrimitiveCase::WeightNorm => {
                let w = b.weight_norm(&p["v"], &p["g"])?;
                masked_mean(b, &w, self.params["v"].dims())
            }
            PrimitiveCase::Conv { geom, bias } => {
                let out = b.conv1d(&p["x"], &p["w"], bias.then(|| &p["b"]), geom)?;
                let t_in = self.params["x"].dims()[1];
                masked_mean(b, &out, &[geom.out_channels, geom.out_time(t_in)])
            }
            PrimitiveCase::InstanceNorm => {
                let y = b.instance_norm(&p["x"], 1e-5)?;
                // Mean of the output alone is invariant under the input, so
                // square it for a gradient that exercises the full adjoint.
                let sq = b.mul(&y, &y)?;
                masked_mean(b, &sq, self.params["x"].dims())
            }
            PrimitiveCase::LeakyRelu { slope } => {
                let y = b.leaky_relu(&p["x"], *slope)?;
                masked_mean(b, &y, self.params["x"].dims())
            }
            PrimitiveCase::Tanh => {
                let y = b.tanh(&p["x"])?;
                masked_mean(b, &y, self.params["x"].dims())
            }
            PrimitiveCase::GatedTanh => {
                let y = b.gated_tanh(&p["a"], &p["b"])?;
                masked_mean(b, &y, self.params["a"].dims())
            }
            PrimitiveCase::Upsample { factor } => {
                let y = b.upsample(&p["x"], *factor)?;
                let dims = self.params["x"].dims();
                masked_mean(b, &y, &[dims[0], dims[1] * factor])
            }
            PrimitiveCase::Add => {
                let y = b.add(&p["a"], &p["b"])?;
                masked_mean(b, &y, self.params["a"].dims())
            }
            PrimitiveCase::Mul => {
                let y = b.mul(&p["a"], &p["b"])?;
                masked_mean(b, &y, self.params["a"].dims())
            }
            PrimitiveCase::Window { start, len } => {
                let y = b.window(&p["x"], *start, *len)?;
                masked_mean(b, &y, &[self.params["x"].dims()[0], *len])
            }
            PrimitiveCase::Pqmf { bank } => {
                let y = b.pqmf_analysis(&p["x"], bank)?;
                let n = self.params["x"].numel();
                masked_mean(b, &y, &[bank.num_bands(), n / bank.num_bands()])
            }
            PrimitiveCase::Stft { plan } => {
                let y = b.stft_magnitude(&p["x"], plan)?;
                let frames = plan.frames_for(self.params["x"].dims()[1]);
                masked_mean(b, &y, &[plan.bins(), frames])
            }
            PrimitiveCase::SpectralConvergence { reference } => {
                b.spectral_convergence(reference, &p["m"])
            }
            PrimitiveCase::LogMagnitude { reference } => {
                b.log_magnitude_loss(reference, &p["m"])
            }
            PrimitiveCase::MeanAll => b.mean_all(&p["x"]),
            PrimitiveCase::ReluAffine { scale, shift } => {
                let y = b.relu_affine(&p["x"], *scale, *shift)?;
                masked_mean(b, &y, self.params["x"].dims())
            }
            PrimitiveCase::LinComb => {
                let y = b.lin_comb(&[
                    (0.5, p["a"].clone()),
                    (-1.25, p["b"].clone()),
                    (2.0, p["c"].clone()),
                ])?;
                masked_mean(b, &y, self.params["a"].dims())
            }
        }
    }
}

fn params_of(entries: Vec<(&str, Tensor<f64>)>) -> BTreeMap<String, Tensor<f64>> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn primitive_cases() -> Result<Vec<Case>> {
    let conv_spec = Conv1dSpec::new(3, 2, 3);
    let conv_geom = ConvGeom::from_spec(&conv_spec, 1);
    let dilated_spec = Conv1dSpec::new(3, 2, 3).with_dilation(2);
    let strided_geom = ConvGeom::from_spec(&dilated_spec, 2);
    let plan = Arc::new(StftPlan::new(16, 4, 16)?);
    let bank = Arc::new(default_bank::<f64>(4)?);

    // References for the spectral losses: positive, bounded away from the
    // generated magnitudes so the absolute-value kink stays clear.
    let sc_ref = Arc::new(Tensor::from_vec(
        &[6, 4],
        (0..24).map(|i| 1.0 + 0.05 * (i as f64 * 0.9).sin()).collect(),
    )?);
    let mags = Tensor::from_vec(
        &[6, 4],
        (0..24).map(|i| 1.6 + 0.3 * (i as f64 * 1.3).cos()).collect(),
    )?;

    Ok(vec![
        Case {
            name: "weight_norm",
            params: params_of(vec![
                ("v", Tensor::from_vec(&[2, 3, 3], smooth_values(18, 0.8, 0.1))?),
                ("g", Tensor::from_vec(&[2], vec![0.7, -1.2])?),
            ]),
            kind: PrimitiveCase::WeightNorm,
        },
        Case {
            name: "conv1d",
            params: params_of(vec![
                ("x", tensor2(3, 16, 0.9, 0.3)),
                ("w", Tensor::from_vec(&[2, 3, 3], smooth_values(18, 0.5, 1.1))?),
                ("b", Tensor::from_vec(&[2], vec![0.2, -0.4])?),
            ]),
            kind: PrimitiveCase::Conv { geom: conv_geom, bias: true },
        },
        Case {
            name: "conv1d_strided_dilated",
            params: params_of(vec![
                ("x", tensor2(3, 17, 0.9, 2.0)),
                ("w", Tensor::from_vec(&[2, 3, 3], smooth_values(18, 0.5, 0.6))?),
            ]),
            kind: PrimitiveCase::Conv { geom: strided_geom, bias: false },
        },
        Case {
            name: "instance_norm",
            params: params_of(vec![("x", tensor2(3, 12, 1.1, 0.9))]),
            kind: PrimitiveCase::InstanceNorm,
        },
        Case {
            name: "leaky_relu",
            params: params_of(vec![("x", tensor2(2, 8, 1.0, 0.2))]),
            kind: PrimitiveCase::LeakyRelu { slope: 0.2 },
        },
        Case {
            name: "tanh",
            params: params_of(vec![("x", tensor2(2, 8, 1.2, 1.7))]),
            kind: PrimitiveCase::Tanh,
        },
        Case {
            name: "gated_tanh",
            params: params_of(vec![
                ("a", tensor2(3, 10, 0.9, 0.4)),
                ("b", tensor2(3, 10, 1.3, 2.2)),
            ]),
            kind: PrimitiveCase::GatedTanh,
        },
        Case {
            name: "upsample",
            params: params_of(vec![("x", tensor2(2, 6, 1.0, 0.8))]),
            kind: PrimitiveCase::Upsample { factor: 3 },
        },
        Case {
            name: "add",
            params: params_of(vec![("a", tensor2(2, 5, 1.0, 0.1)), ("b", tensor2(2, 5, 0.7, 1.9))]),
            kind: PrimitiveCase::Add,
        },
        Case {
            name: "mul",
            params: params_of(vec![("a", tensor2(2, 5, 1.0, 0.5)), ("b", tensor2(2, 5, 0.7, 2.4))]),
            kind: PrimitiveCase::Mul,
        },
        Case {
            name: "window",
            params: params_of(vec![("x", tensor2(2, 12, 1.0, 1.2))]),
            kind: PrimitiveCase::Window { start: 3, len: 6 },
        },
        Case {
            name: "pqmf_analysis",
            params: params_of(vec![("x", tensor2(1, 32, 0.8, 0.7))]),
            kind: PrimitiveCase::Pqmf { bank },
        },
        Case {
            name: "stft_magnitude",
            params: params_of(vec![("x", tensor2(1, 32, 0.9, 1.5))]),
            kind: PrimitiveCase::Stft { plan },
        },
        Case {
            name: "spectral_convergence",
            params: params_of(vec![("m", mags.clone())]),
            kind: PrimitiveCase::SpectralConvergence { reference: Arc::clone(&sc_ref) },
        },
        Case {
            name: "log_magnitude_loss",
            params: params_of(vec![("m", mags)]),
            kind: PrimitiveCase::LogMagnitude { reference: sc_ref },
        },
        Case {
            name: "mean_all",
            params: params_of(vec![("x", tensor2(3, 7, 1.0, 0.25))]),
            kind: PrimitiveCase::MeanAll,
        },
        Case {
            name: "relu_affine",
            params: params_of(vec![(
                "x",
                Tensor::from_vec(
                    &[2, 9],
                    vec![-1.8, -0.5, 0.4, 2.1, 0.7, -0.2, 1.6, 0.3, -1.1, 2.8, 0.6, -0.9, 1.4,
                        0.2, -1.5, 3.0, 0.45, -2.3],
                )?,
            )]),
            kind: PrimitiveCase::ReluAffine { scale: -1.0, shift: 1.0 },
        },
        Case {
            name: "lin_comb",
            params: params_of(vec![
                ("a", tensor2(2, 4, 1.0, 0.15)),
                ("b", tensor2(2, 4, 0.8, 1.05)),
                ("c", tensor2(2, 4, 1.2, 2.65)),
            ]),
            kind: PrimitiveCase::LinComb,
        },
    ])
}

/// Run the finite-difference check on every differentiable operation at
/// small sizes (channel counts at most 4, time lengths around 32), probing
/// up to `probes` coordinates each. Returns one report per operation.
pub fn check_all_primitives(probes: usize, h: f64, seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::new();
    for (i, case) in primitive_cases()?.iter().enumerate() {
        reports.push(check_graph(case.name, &case.params, case, probes, h, seed + i as u64)?);
    }
    Ok(reports)
}

struct GeneratorAuxGraph {
    config: GeneratorConfig,
    template: crate::generator::GeneratorParams<Tensor<f64>>,
    noise: Tensor<f64>,
    mel: Tensor<f64>,
    references: Vec<Arc<Tensor<f64>>>,
    plans: Vec<Arc<StftPlan<f64>>>,
}

impl ScalarGraph for GeneratorAuxGraph {
    fn build<B: Backend<f64>>(
        &self,
        b: &mut B,
        p: &BTreeMap<String, B::Value>,
    ) -> Result<B::Value> {
        let bound = self.template.map_named(&mut |name, _| p[name].clone());
        let z = b.constant(self.noise.clone());
        let mel = b.constant(self.mel.clone());
        let wave = generator_forward(b, &z, &mel, &bound)?;
        let _ = &self.config;
        aux_loss_on(b, &self.references, &wave, &self.plans)
    }
}

/// Check the fully composed objective: the spectral reconstruction loss,
/// through the complete synthesis network, against finite differences on
/// `probes` randomly selected parameter coordinates.
pub fn check_generator_aux_gradient(probes: usize, h: f64, seed: u64) -> Result<GradcheckReport> {
    let config = GeneratorConfig {
        noise_channels: 4,
        channels: 6,
        mel_channels: 3,
        kernel_size: 3,
        cond_kernel_size: 3,
        stages: 2,
    };
    let template = init_generator::<f64>(config.clone(), 31)?;
    let frames = 16;
    let samples = frames << config.stages;
    let noise = sample_noise::<f64>(config.noise_channels, frames, 5)?.into_tensor();
    let mel = sample_noise::<f64>(config.mel_channels, frames, 6)?.into_tensor();
    let aux = AuxLossConfig {
        resolutions: vec![
            StftResolution { fft_size: 64, hop_size: 16, win_size: 32 },
            StftResolution { fft_size: 32, hop_size: 8, win_size: 16 },
        ],
    };
    let plans = aux.plans::<f64>()?;
    let reference: Vec<f64> =
        (0..samples).map(|i| (i as f64 * 0.11).sin() * 0.4 + (i as f64 * 0.041).cos() * 0.1).collect();
    let references = reference_magnitudes(&reference, &plans)?;

    let mut params = BTreeMap::new();
    template.visit(&mut |name, t: &Tensor<f64>| {
        params.insert(name, t.clone());
    });
    let graph = GeneratorAuxGraph { config, template, noise, mel, references, plans };
    check_graph("generator_aux_composed", &params, &graph, probes, h, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_gradient_matches_finite_differences() {
        let reports = check_all_primitives(24, DEFAULT_STEP_SIZE, 97).unwrap();
        assert_eq!(reports.len(), 18);
        for r in &reports {
            assert!(
                r.max_rel_error < 1e-3,
                "{}: max relative error {} is not below 1e-3",
                r.name,
                r.max_rel_error
            );
        }
    }

    #[test]
    fn composed_aux_objective_gradient_matches_finite_differences() {
        let report = check_generator_aux_gradient(10, DEFAULT_STEP_SIZE, 41).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "composed objective: max relative error {} is not below 1e-3",
            report.max_rel_error
        );
    }

    #[test]
    fn sum_of_parameters_has_unit_gradients() {
        let mut tape: Tape<f64> = Tape::new();
        let names = ["p1", "p2", "p3"];
        let mut reduced = Vec::new();
        for (i, n) in names.iter().enumerate() {
            let p = tape.param(n, Tensor::from_vec(&[1, 1], vec![i as f64 + 0.5]).unwrap());
            reduced.push((1.0, tape.mean_all(&p).unwrap()));
        }
        let total = tape.lin_comb(&reduced).unwrap();
        let grads = tape.backward(total).unwrap();
        for n in names {
            assert_eq!(grads[n].data(), &[1.0]);
        }
    }

    #[test]
    fn tanh_gradient_at_zero_is_exactly_one() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param("p", Tensor::from_vec(&[1, 1], vec![0.0]).unwrap());
        let y = tape.tanh(&p).unwrap();
        let loss = tape.mean_all(&y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["p"].data(), &[1.0]);
    }

    #[test]
    fn objective_ignoring_a_parameter_gives_exact_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param("p", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.constant(Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 2.0, 2.0]).unwrap());
        let loss = tape.mean_all(&c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads["p"].data().iter().all(|&v| v == 0.0));
        let _ = p;
    }

    #[test]
    fn quadratic_gradient_matches_both_ways() {
        let params = params_of(vec![("p", Tensor::from_vec(&[1, 1], vec![3.0]).unwrap())]);
        struct Quadratic;
        impl ScalarGraph for Quadratic {
            fn build<B: Backend<f64>>(
                &self,
                b: &mut B,
                p: &BTreeMap<String, B::Value>,
            ) -> Result<B::Value> {
                let sq = b.mul(&p["p"], &p["p"])?;
                b.mean_all(&sq)
            }
        }
        let report = check_graph("quadratic", &params, &Quadratic, 8, 1e-5, 7).unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);

        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param("p", Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let sq = tape.mul(&p, &p).unwrap();
        let loss = tape.mean_all(&sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads["p"].data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_step_size_is_rejected() {
        let params = params_of(vec![("p", Tensor::scalar(1.0))]);
        let analytic = TapeGradients::new();
        let err = finite_diff_gradcheck(&params, &analytic, &mut |_| Ok(0.0), 1, 0.0, 1)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
