//! Rough convolution throughput probe used to size the desk-scale
//! training run for the current machine. Not part of the test suite.

use std::time::Instant;

use tadevoc_core::nn::{conv1d, Conv1dSpec, FeatureMap};
use tadevoc_core::tensor::Tensor;

fn main() {
    let spec = Conv1dSpec::new(64, 64, 9);
    let w = Tensor::from_vec(
        &[64, 64, 9],
        (0..64 * 64 * 9).map(|i| ((i % 97) as f32 - 48.0) / 480.0).collect(),
    )
    .unwrap();
    let b = Tensor::zeros(&[64]);
    for t in [86usize, 344, 1376, 5504, 22016] {
        let x = FeatureMap::from_vec(
            64,
            t,
            (0..64 * t).map(|i| ((i % 89) as f32 - 44.0) / 44.0).collect(),
        )
        .unwrap();
        // Warm up once, then time enough repetitions for a stable figure.
        let _ = conv1d(&x, &spec, &w, Some(&b)).unwrap();
        let reps = (2_000_000 / t).max(2);
        let start = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let y = conv1d(&x, &spec, &w, Some(&b)).unwrap();
            sink += y.data()[0];
        }
        let dt = start.elapsed().as_secs_f64();
        let macs = (64.0 * 64.0 * 9.0) * t as f64 * reps as f64;
        println!(
            "T={t:>6}  reps={reps:>5}  {:7.2} GMAC/s  (sink {sink:.3})",
            macs / dt / 1e9
        );
    }
}
