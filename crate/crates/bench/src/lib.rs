//! Shared fixtures for the benchmarks.

use gtn_calib::gp::ArdHyperparams;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random unit-cube inputs with a smooth response.
pub fn smooth_training_set(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 4, |_, _| rng.gen::<f64>());
    let y = (0..n)
        .map(|i| (3.0 * x[(i, 0)]).sin() + x[(i, 1)] * x[(i, 2)] - 0.5 * x[(i, 3)])
        .collect();
    (x, y)
}

pub fn typical_hyperparams() -> ArdHyperparams {
    ArdHyperparams {
        signal_variance: 1.0,
        length_scales: vec![0.4, 0.7, 0.7, 1.2],
        noise_variance: 1e-6,
    }
}

/// Points drawn uniformly from the parameter box, respecting `f_c < f_f`.
pub fn box_samples(n: usize, seed: u64) -> Vec<[f64; 4]> {
    let b = gtn_calib::ParamBox::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = b.from_unit(&[rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
        if b.admits(&t) {
            out.push(t);
        }
    }
    out
}
