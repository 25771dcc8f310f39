//! Zero-mean Gaussian-process regression with an ARD squared-exponential
//! kernel, multistart hyperparameter fitting and batched prediction.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::unit_lhs;
use crate::error::{ensure_finite, Error, Result};
use crate::optim::{minimize_bounded, LbfgsOptions};

/// Relative diagonal jitter levels tried before a factorization is declared failed.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
/// Number of multistart points for hyperparameter fitting.
pub const DEFAULT_STARTS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperBounds {
    pub length_scale: [f64; 2],
    pub signal_variance: [f64; 2],
    pub noise_variance: [f64; 2],
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            length_scale: [1e-3, 1e2],
            signal_variance: [1e-6, 1e2],
            noise_variance: [1e-8, 1e-1],
        }
    }
}

impl HyperBounds {
    /// Bounds on `[ln σf², ln ℓ1 … ln ℓd, ln σn²]`.
    pub fn log_box(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.signal_variance[0].ln()];
        let mut hi = vec![self.signal_variance[1].ln()];
        lo.extend(std::iter::repeat_n(self.length_scale[0].ln(), dim));
        hi.extend(std::iter::repeat_n(self.length_scale[1].ln(), dim));
        lo.push(self.noise_variance[0].ln());
        hi.push(self.noise_variance[1].ln());
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [a, b]) in [
            ("length scale", self.length_scale),
            ("signal variance", self.signal_variance),
            ("noise variance", self.noise_variance),
        ] {
            if !(a > 0.0 && a < b && b.is_finite()) {
                return Err(Error::Parameter(format!("invalid {name} bounds [{a}, {b}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdHyperparams {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl ArdHyperparams {
    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.signal_variance.ln()];
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            signal_variance: v[0].exp(),
            length_scales: v[1..=d].iter().map(|x| x.exp()).collect(),
            noise_variance: v[d + 1].exp(),
        }
    }

    pub fn within(&self, b: &HyperBounds) -> bool {
        let inside = |v: f64, [lo, hi]: [f64; 2]| v >= lo && v <= hi;
        inside(self.signal_variance, b.signal_variance)
            && inside(self.noise_variance, b.noise_variance)
            && self.length_scales.iter().all(|&l| inside(l, b.length_scale))
    }
}

/// `σf² exp(−½ Σ (xi − x'i)² / ℓi²) + σn² δ(x, x')`.
pub fn kernel_eval(h: &ArdHyperparams, x: &[f64], xp: &[f64]) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(xp)
        .zip(&h.length_scales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    let nugget = if x == xp { h.noise_variance } else { 0.0 };
    h.signal_variance * (-0.5 * r2).exp() + nugget
}

/// Training inputs with cached per-dimension squared differences.
#[derive(Debug, Clone)]
struct PairwiseDistances {
    n: usize,
    sq: Vec<DMatrix<f64>>,
}

impl PairwiseDistances {
    fn new(inputs: &DMatrix<f64>) -> Self {
        let n = inputs.nrows();
        let sq = (0..inputs.ncols())
            .map(|d| DMatrix::from_fn(n, n, |i, j| (inputs[(i, d)] - inputs[(j, d)]).powi(2)))
            .collect();
        Self { n, sq }
    }

    fn signal_kernel(&self, h: &ArdHyperparams) -> DMatrix<f64> {
        let mut r2 = DMatrix::zeros(self.n, self.n);
        for (d, l) in self.sq.iter().zip(&h.length_scales) {
            r2 += d * (1.0 / (l * l));
        }
        r2.map(|v| h.signal_variance * (-0.5 * v).exp())
    }
}

/// Cholesky factor of `K + σn² I`, escalating diagonal jitter when needed.
fn factorize(mut k: DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let scale = k.diagonal().mean();
    for (level, &rel) in JITTER_LADDER.iter().enumerate() {
        let mut kj = k.clone();
        if rel > 0.0 {
            for i in 0..n {
                kj[(i, i)] += rel * scale;
            }
        }
        if let Some(ch) = Cholesky::new(kj) {
            if level > 0 {
                log::debug!("kernel matrix factorized with relative jitter {rel:e}");
            }
            return Ok((ch, rel * scale));
        }
    }
    Err(Error::Numeric(
        "kernel matrix not positive definite after jitter".into(),
    ))
}

fn check_training(inputs: &DMatrix<f64>, targets: &[f64], dim: usize) -> Result<()> {
    if inputs.nrows() != targets.len() {
        return Err(Error::Dimension {
            expected: inputs.nrows(),
            actual: targets.len(),
        });
    }
    if inputs.ncols() != dim {
        return Err(Error::Dimension {
            expected: dim,
            actual: inputs.ncols(),
        });
    }
    if inputs.nrows() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    ensure_finite(inputs.as_slice(), "GP inputs")?;
    ensure_finite(targets, "GP targets")
}

/// Inverse of a lower-triangular matrix by recursive 2×2 blocking, so the
/// bulk of the work is matrix products. Only the lower triangle is read.
fn lower_triangular_inverse(l: DMatrixView<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 32 {
        let mut x = DMatrix::identity(n, n);
        l.clone_owned().solve_lower_triangular_mut(&mut x);
        return x;
    }
    let h = n / 2;
    let a = lower_triangular_inverse(l.view((0, 0), (h, h)));
    let c = lower_triangular_inverse(l.view((h, h), (n - h, n - h)));
    let below = -(&c * (l.view((h, 0), (n - h, h)) * &a));
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (h, h)).copy_from(&a);
    out.view_mut((h, h), (n - h, n - h)).copy_from(&c);
    out.view_mut((h, 0), (n - h, h)).copy_from(&below);
    out
}

/// `(L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹`.
fn cholesky_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let li = lower_triangular_inverse(chol.l_dirty().as_view());
    li.transpose() * li
}

fn lml_with(
    dist: &PairwiseDistances,
    y: &DVector<f64>,
    h: &ArdHyperparams,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = dist.n as f64;
    let kf = dist.signal_kernel(h);
    let (chol, _) = factorize(kf.clone(), h.noise_variance)?;
    let alpha = chol.solve(y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    // W = ααᵀ − K⁻¹; ∂L/∂θ = ½ tr(W ∂K/∂θ).
    let mut w = cholesky_inverse(&chol);
    w.ger(1.0, &alpha, &alpha, -1.0);
    let wk = w.component_mul(&kf);
    let mut grad = Vec::with_capacity(h.dim() + 2);
    grad.push(0.5 * wk.sum());
    for (d, l) in dist.sq.iter().zip(&h.length_scales) {
        grad.push(0.5 * wk.dot(d) / (l * l));
    }
    grad.push(0.5 * h.noise_variance * w.trace());
    Ok((value, grad))
}

/// Log marginal likelihood and its gradient with respect to
/// `[ln σf², ln ℓ1 … ln ℓd, ln σn²]`.
pub fn log_marginal_likelihood(inputs: &DMatrix<f64>, targets: &[f64], h: &ArdHyperparams) -> Result<(f64, Vec<f64>)> {
    check_training(inputs, targets, h.dim())?;
    let dist = PairwiseDistances::new(inputs);
    lml_with(&dist, &DVector::from_column_slice(targets), h, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperFit {
    pub hyperparams: ArdHyperparams,
    pub log_marginal_likelihood: f64,
    /// Starts whose optimization ran to completion.
    pub successful_starts: usize,
    pub evaluations: usize,
}

/// Multistart bounded quasi-Newton maximization of the log marginal
/// likelihood, with Latin-hypercube starts in log-hyperparameter space.
pub fn optimize_hyperparams(
    inputs: &DMatrix<f64>,
    targets: &[f64],
    bounds: &HyperBounds,
    starts: usize,
    seed: u64,
) -> Result<HyperFit> {
    bounds.validate()?;
    let dim = inputs.ncols();
    check_training(inputs, targets, dim)?;
    if inputs.nrows() < 8 {
        return Err(Error::InsufficientSamples {
            needed: 8,
            got: inputs.nrows(),
        });
    }
    let dist = PairwiseDistances::new(inputs);
    let y = DVector::from_column_slice(targets);
    let (lo, hi) = bounds.log_box(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LbfgsOptions::default();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut successful = 0;
    let mut evaluations = 0;
    for u in unit_lhs(starts.max(1), dim + 2, &mut rng) {
        let x0: Vec<f64> = u
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(t, (a, b))| a + t * (b - a))
            .collect();
        let objective = |z: &[f64]| {
            lml_with(&dist, &y, &ArdHyperparams::from_log(z), true)
                .ok()
                .filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite()))
                .map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect()))
        };
        if let Some(r) = minimize_bounded(objective, &x0, &lo, &hi, &opts) {
            successful += 1;
            evaluations += r.evaluations;
            if best.as_ref().is_none_or(|(v, _)| r.value < *v) {
                best = Some((r.value, r.x));
            }
        }
    }
    let (neg, z) =
        best.ok_or_else(|| Error::Optimization("every start failed to factorize the kernel matrix".into()))?;
    // exp(ln b) may round past the bound.
    let mut hyperparams = ArdHyperparams::from_log(&z);
    hyperparams.signal_variance = hyperparams
        .signal_variance
        .clamp(bounds.signal_variance[0], bounds.signal_variance[1]);
    hyperparams.noise_variance = hyperparams
        .noise_variance
        .clamp(bounds.noise_variance[0], bounds.noise_variance[1]);
    for l in hyperparams.length_scales.iter_mut() {
        *l = l.clamp(bounds.length_scale[0], bounds.length_scale[1]);
    }
    Ok(HyperFit {
        hyperparams,
        log_marginal_likelihood: -neg,
        successful_starts: successful,
        evaluations,
    })
}

/// A conditioned GP. Factorizations are rebuilt from inputs, targets and
/// hyperparameters, never stored.
#[derive(Debug, Clone)]
pub struct TrainedGp {
    inputs: DMatrix<f64>,
    targets: Vec<f64>,
    hyper: ArdHyperparams,
    jitter: f64,
    alpha: DVector<f64>,
    k_inv: DMatrix<f64>,
}

impl TrainedGp {
    pub fn fit(inputs: DMatrix<f64>, targets: Vec<f64>, hyper: ArdHyperparams) -> Result<Self> {
        check_training(&inputs, &targets, hyper.dim())?;
        let dist = PairwiseDistances::new(&inputs);
        let (chol, jitter) = factorize(dist.signal_kernel(&hyper), hyper.noise_variance)?;
        let alpha = chol.solve(&DVector::from_column_slice(&targets));
        let k_inv = cholesky_inverse(&chol);
        Ok(Self {
            inputs,
            targets,
            hyper,
            jitter,
            alpha,
            k_inv,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn hyperparams(&self) -> &ArdHyperparams {
        &self.hyper
    }

    /// Diagonal jitter that was added on top of the nugget.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let dist = PairwiseDistances::new(&self.inputs);
        Ok(lml_with(&dist, &DVector::from_column_slice(&self.targets), &self.hyper, false)?.0)
    }

    /// Cross-covariances between `x` rows and the training inputs (m × n).
    fn cross_kernel(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (m, n) = (x.nrows(), self.inputs.nrows());
        let inv_l2: Vec<f64> = self.hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
        DMatrix::from_fn(m, n, |i, j| {
            let mut r2 = 0.0;
            for (d, w) in inv_l2.iter().enumerate() {
                let t = x[(i, d)] - self.inputs[(j, d)];
                r2 += w * t * t;
            }
            self.hyper.signal_variance * (-0.5 * r2).exp()
        })
    }

    /// Predictive mean and variance of a noisy observation at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        let (mu, var) = self.predict_batch(&m)?;
        Ok((mu[0], var[0]))
    }

    /// Row-wise predictions for an (m × d) input matrix.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.ncols() != self.hyper.dim() {
            return Err(Error::Dimension {
                expected: self.hyper.dim(),
                actual: x.ncols(),
            });
        }
        ensure_finite(x.as_slice(), "GP prediction input")?;
        let ks = self.cross_kernel(x);
        let mean = &ks * &self.alpha;
        let proj = &ks * &self.k_inv;
        let prior = self.hyper.signal_variance + self.hyper.noise_variance;
        let var = (0..x.nrows())
            .map(|i| {
                let v = prior - proj.row(i).dot(&ks.row(i));
                if v < -1e-8 * prior {
                    log::warn!("negative predictive variance {v:e} clamped to zero");
                }
                v.max(0.0)
            })
            .collect();
        Ok((mean.as_slice().to_vec(), var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn hyper(sf2: f64, ls: &[f64], sn2: f64) -> ArdHyperparams {
        ArdHyperparams {
            signal_variance: sf2,
            length_scales: ls.to_vec(),
            noise_variance: sn2,
        }
    }

    #[test]
    fn blocked_inverse_matches_cholesky_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 5, 33, 97] {
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            let k = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
            let chol = Cholesky::new(k.clone()).unwrap();
            let inv = cholesky_inverse(&chol);
            assert_relative_eq!(inv, chol.inverse(), max_relative = 1e-9, epsilon = 1e-10);
            assert_relative_eq!(&inv * &k, DMatrix::identity(n, n), epsilon = 1e-9);
        }
    }

    #[test]
    fn kernel_values() {
        let h = hyper(1.0, &[1.0; 4], 0.0);
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(kernel_eval(&hyper(2.0, &[1.0; 4], 0.5), &x, &x), 2.5);
        assert_relative_eq!(
            kernel_eval(&h, &[1.0, 0.0, 0.0, 0.0], &[0.0; 4]),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        assert!(kernel_eval(&h, &[1e3, 0.0, 0.0, 0.0], &[0.0; 4]) < 1e-300);
    }

    #[test]
    fn single_point_likelihood() {
        let x = DMatrix::from_row_slice(1, 1, &[0.3]);
        let h = hyper(1.5, &[0.7], 0.25);
        let (v, _) = log_marginal_likelihood(&x, &[0.8], &h).unwrap();
        let var = 1.75;
        assert_relative_eq!(
            v,
            -0.5 * 0.64 / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn two_point_posterior_matches_closed_form() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = vec![1.0, -0.5];
        let h = hyper(1.3, &[0.8], 0.01);
        let gp = TrainedGp::fit(x, y.clone(), h.clone()).unwrap();
        let xs = 0.4;
        let k = |a: f64, b: f64| 1.3 * (-0.5 * ((a - b) / 0.8f64).powi(2)).exp();
        let (a, b, c) = (k(0.0, 0.0) + 0.01, k(0.0, 1.0), k(1.0, 1.0) + 0.01);
        let det = a * c - b * b;
        let inv = [[c / det, -b / det], [-b / det, a / det]];
        let ks = [k(xs, 0.0), k(xs, 1.0)];
        let w = [
            inv[0][0] * ks[0] + inv[0][1] * ks[1],
            inv[1][0] * ks[0] + inv[1][1] * ks[1],
        ];
        let mu = w[0] * y[0] + w[1] * y[1];
        let var = 1.3 + 0.01 - (w[0] * ks[0] + w[1] * ks[1]);
        let (m, v) = gp.predict(&[xs]).unwrap();
        assert!((m - mu).abs() < 1e-10 && (v - var).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let n = 12;
            let x = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z: Vec<f64> = vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.5..0.5),
                rng.gen_range(-1.5..0.5),
                rng.gen_range(-1.5..0.5),
                rng.gen_range(-6.0..-2.0),
            ];
            let (_, g) = log_marginal_likelihood(&x, &y, &ArdHyperparams::from_log(&z)).unwrap();
            for i in 0..z.len() {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += 1e-5;
                zm[i] -= 1e-5;
                let fp = log_marginal_likelihood(&x, &y, &ArdHyperparams::from_log(&zp))
                    .unwrap()
                    .0;
                let fm = log_marginal_likelihood(&x, &y, &ArdHyperparams::from_log(&zm))
                    .unwrap()
                    .0;
                let fd = (fp - fm) / 2e-5;
                assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "{i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn prediction_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(10, 2, |_, _| rng.gen::<f64>());
        let y: Vec<f64> = (0..10).map(|i| (x[(i, 0)] * 3.0).sin()).collect();
        let h = hyper(1.0, &[0.4, 0.4], 1e-8);
        let gp = TrainedGp::fit(x.clone(), y.clone(), h).unwrap();
        for i in 0..10 {
            let (m, v) = gp.predict(&[x[(i, 0)], x[(i, 1)]]).unwrap();
            assert!((m - y[i]).abs() < 1e-6 * y[i].abs().max(1e-3));
            assert!(v < 1e-6);
        }
        let (m, v) = gp.predict(&[50.0, -50.0]).unwrap();
        assert!(m.abs() < 1e-12);
        assert_relative_eq!(v, 1.0 + 1e-8, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_point_keeps_mean() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let h = hyper(1.0, &[0.3], 1e-6);
        let a = TrainedGp::fit(x, vec![0.2, 0.9, -0.4], h.clone()).unwrap();
        let xd = DMatrix::from_row_slice(4, 1, &[0.0, 0.5, 0.5, 1.0]);
        let b = TrainedGp::fit(xd, vec![0.2, 0.9, 0.9, -0.4], h).unwrap();
        assert!((a.predict(&[0.5]).unwrap().0 - b.predict(&[0.5]).unwrap().0).abs() < 1e-6);
    }

    #[test]
    fn optimizer_is_seeded_and_detects_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let x = DMatrix::from_fn(n, 4, |_, _| rng.gen::<f64>());
        let y: Vec<f64> = (0..n).map(|i| (4.0 * x[(i, 0)]).sin()).collect();
        let b = HyperBounds::default();
        let a = optimize_hyperparams(&x, &y, &b, DEFAULT_STARTS, 3).unwrap();
        let c = optimize_hyperparams(&x, &y, &b, DEFAULT_STARTS, 3).unwrap();
        assert_eq!(a, c);
        let l = &a.hyperparams.length_scales;
        assert!(l[1..].iter().all(|&o| o > 5.0 * l[0]), "{l:?}");
        assert!(a.hyperparams.within(&b));
    }

    #[test]
    fn optimizer_on_pure_noise_predicts_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
        let y: Vec<f64> = (0..n)
            .map(|_| 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let fit = optimize_hyperparams(&x, &y, &HyperBounds::default(), DEFAULT_STARTS, 1).unwrap();
        let gp = TrainedGp::fit(x, y, fit.hyperparams).unwrap();
        for _ in 0..20 {
            let (m, _) = gp.predict(&[rng.gen(), rng.gen()]).unwrap();
            assert!(m.abs() < 0.05, "{m}");
        }
    }

    #[test]
    fn optimizer_requires_eight_points() {
        let x = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let r = optimize_hyperparams(&x, &[0.0; 5], &HyperBounds::default(), 3, 0);
        assert!(matches!(r, Err(Error::InsufficientSamples { .. })));
    }
}
