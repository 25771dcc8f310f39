//! Score-space likelihoods, transitional MCMC, convergence diagnostics,
//! posterior summaries and the logit-space KDE prior used to chain updates.

use nalgebra::{DMatrix, Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Modality, PcaBasis};
use crate::gtn::ParamBox;
use crate::surrogate::SurrogateBundle;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Floor applied to propagated score variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Split-R̂ gate for reporting posteriors.
pub const RHAT_GATE: f64 = 1.05;
/// Smallest sample count accepted by [`fit_kde_prior`].
pub const MIN_KDE_SAMPLES: usize = 50;

// ---------------------------------------------------------------------------
// Priors

pub trait Prior: Sync {
    /// Log density up to a constant; `-inf` outside the support.
    fn log_density(&self, theta: &[f64; 4]) -> f64;
    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 4];
    /// Box enclosing the support.
    fn bounds(&self) -> &ParamBox;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorSpec {
    /// Uniform on the box, truncated to `f_c < f_f`.
    UniformBox(ParamBox),
    Kde(KdePrior),
}

impl PriorSpec {
    pub fn param_box(&self) -> &ParamBox {
        match self {
            PriorSpec::UniformBox(b) => b,
            PriorSpec::Kde(k) => &k.bounds,
        }
    }
}

fn uniform_log_density(b: &ParamBox) -> f64 {
    -(0..4).map(|i| b.width(i).ln()).sum::<f64>()
}

impl Prior for PriorSpec {
    fn log_density(&self, theta: &[f64; 4]) -> f64 {
        match self {
            PriorSpec::UniformBox(b) => {
                if b.contains(theta) && b.admits(theta) {
                    uniform_log_density(b)
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorSpec::Kde(k) => k.log_density(theta),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 4] {
        match self {
            PriorSpec::UniformBox(b) => loop {
                let u: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
                let t = b.from_unit(&u);
                if b.admits(&t) {
                    return t;
                }
            },
            PriorSpec::Kde(k) => k.sample(rng),
        }
    }

    fn bounds(&self) -> &ParamBox {
        self.param_box()
    }
}

/// `z = ln((θ − a) / (b − θ))`.
pub fn logit_map(theta: f64, a: f64, b: f64) -> Result<f64> {
    if !(theta > a && theta < b) {
        return Err(Error::Domain(format!("{theta} not strictly inside ({a}, {b})")));
    }
    Ok(((theta - a) / (b - theta)).ln())
}

pub fn logit_inverse(z: f64, a: f64, b: f64) -> f64 {
    // Written to stay inside (a, b) for large |z|.
    if z >= 0.0 {
        let e = (-z).exp();
        (a * e + b) / (1.0 + e)
    } else {
        let e = z.exp();
        (a + b * e) / (1.0 + e)
    }
}

/// `ln |dz/dθ| = ln(b − a) − ln(θ − a) − ln(b − θ)`.
fn log_jacobian(theta: f64, a: f64, b: f64) -> f64 {
    (b - a).ln() - (theta - a).ln() - (b - theta).ln()
}

/// Product-Gaussian KDE in logit coordinates, carried to θ by the
/// change-of-variables Jacobian and truncated to `f_c < f_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdePrior {
    pub bounds: ParamBox,
    /// Kernel centres in logit coordinates.
    pub centers: Vec<[f64; 4]>,
    pub bandwidth: [f64; 4],
    /// Inputs moved off the box boundary before the logit map.
    pub nudged: usize,
}

impl KdePrior {
    pub fn log_density(&self, theta: &[f64; 4]) -> f64 {
        let b = &self.bounds;
        if !(0..4).all(|i| theta[i] > b.lower[i] && theta[i] < b.upper[i]) || !b.admits(theta) {
            return f64::NEG_INFINITY;
        }
        let mut z = [0.0; 4];
        let mut log_jac = 0.0;
        for i in 0..4 {
            let (lo, hi) = (b.lower[i], b.upper[i]);
            z[i] = ((theta[i] - lo) / (hi - theta[i])).ln();
            log_jac += log_jacobian(theta[i], lo, hi);
        }
        let inv_h = self.bandwidth.map(|h| 1.0 / h);
        let log_norm = -2.0 * LN_2PI - self.bandwidth.iter().map(|h| h.ln()).sum::<f64>();
        // Log-sum-exp over kernels.
        let mut max = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.centers.len());
        for c in &self.centers {
            let mut q = 0.0;
            for i in 0..4 {
                let t = (z[i] - c[i]) * inv_h[i];
                q += t * t;
            }
            let e = -0.5 * q;
            max = max.max(e);
            terms.push(e);
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let s: f64 = terms.iter().map(|e| (e - max).exp()).sum();
        max + s.ln() - (self.centers.len() as f64).ln() + log_norm + log_jac
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 4] {
        let b = &self.bounds;
        loop {
            let c = &self.centers[rng.gen_range(0..self.centers.len())];
            let mut t = [0.0; 4];
            for i in 0..4 {
                let n: f64 = rng.sample(StandardNormal);
                t[i] = logit_inverse(c[i] + self.bandwidth[i] * n, b.lower[i], b.upper[i]);
            }
            let interior = (0..4).all(|i| t[i] > b.lower[i] && t[i] < b.upper[i]);
            if interior && b.admits(&t) {
                return t;
            }
        }
    }
}

/// Fit a logit-space KDE with a normal-reference (Silverman) bandwidth per
/// coordinate. At most `max_centers` samples are kept, by even thinning.
pub fn fit_kde_prior(samples: &[[f64; 4]], bounds: &ParamBox, max_centers: usize) -> Result<KdePrior> {
    bounds.validate()?;
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_KDE_SAMPLES,
            got: samples.len(),
        });
    }
    let keep = max_centers.max(MIN_KDE_SAMPLES).min(samples.len());
    let stride = samples.len() as f64 / keep as f64;
    let mut nudged = 0;
    let mut centers = Vec::with_capacity(keep);
    for j in 0..keep {
        let s = &samples[(j as f64 * stride) as usize];
        let mut z = [0.0; 4];
        for i in 0..4 {
            let (lo, hi) = (bounds.lower[i], bounds.upper[i]);
            let eps = 1e-9 * (hi - lo);
            let mut t = s[i];
            if !(t.is_finite() && t >= lo && t <= hi) {
                return Err(Error::Domain(format!("sample {s:?} outside the prior box")));
            }
            if t < lo + eps || t > hi - eps {
                t = t.clamp(lo + eps, hi - eps);
                nudged += 1;
            }
            z[i] = logit_map(t, lo, hi)?;
        }
        centers.push(z);
    }
    if nudged > 0 {
        log::info!("{nudged} boundary coordinate(s) nudged inward before the logit map");
    }
    let m = centers.len() as f64;
    let factor = (4.0 / (6.0 * m)).powf(1.0 / 8.0);
    let mut bandwidth = [0.0; 4];
    for i in 0..4 {
        let mean = centers.iter().map(|c| c[i]).sum::<f64>() / m;
        let sd = (centers.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        if !(sd > 1e-12) {
            return Err(Error::Degeneracy(format!("KDE input is constant in coordinate {i}")));
        }
        bandwidth[i] = sd * factor;
    }
    Ok(KdePrior {
        bounds: *bounds,
        centers,
        bandwidth,
        nudged,
    })
}

// ---------------------------------------------------------------------------
// Noise and likelihood

/// Measurement covariance in observation space.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementNoise {
    /// `σ² I`.
    Iid(f64),
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

/// `diag(Φᵀ A Σ Aᵀ Φ)` over the retained components, with `A` the diagonal
/// preprocessing map of the basis. Entries below [`VARIANCE_FLOOR`] are floored.
pub fn propagate_noise(basis: &PcaBasis, noise: &MeasurementNoise) -> Result<Vec<f64>> {
    let a = basis.preprocess_diagonal();
    let p = a.len();
    let k = basis.retained;
    let phi = basis.components.columns(0, k);
    let raw: Vec<f64> = match noise {
        MeasurementNoise::Iid(s) => (0..k)
            .map(|c| {
                s * s
                    * phi
                        .column(c)
                        .iter()
                        .zip(&a)
                        .map(|(f, aj)| (f * aj).powi(2))
                        .sum::<f64>()
            })
            .collect(),
        MeasurementNoise::Diagonal(d) => {
            if d.len() != p {
                return Err(Error::Dimension {
                    expected: p,
                    actual: d.len(),
                });
            }
            (0..k)
                .map(|c| {
                    phi.column(c)
                        .iter()
                        .zip(&a)
                        .zip(d)
                        .map(|((f, aj), dj)| (f * aj).powi(2) * dj)
                        .sum()
                })
                .collect()
        }
        MeasurementNoise::Dense(s) => {
            if s.shape() != (p, p) {
                return Err(Error::Dimension {
                    expected: p,
                    actual: s.nrows(),
                });
            }
            // B = A Φ, then diag(Bᵀ Σ B).
            let mut b = phi.into_owned();
            for (j, aj) in a.iter().enumerate() {
                b.row_mut(j).scale_mut(*aj);
            }
            let sb = s * &b;
            (0..k).map(|c| b.column(c).dot(&sb.column(c))).collect()
        }
    };
    Ok(floor_variances(raw))
}

fn floor_variances(mut v: Vec<f64>) -> Vec<f64> {
    let mut floored = 0;
    for x in v.iter_mut() {
        if !(*x >= VARIANCE_FLOOR) {
            *x = VARIANCE_FLOOR;
            floored += 1;
        }
    }
    if floored > 0 {
        log::warn!("{floored} propagated score variance(s) floored at {VARIANCE_FLOOR:e}");
    }
    v
}

/// Per-score measurement variances of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub modality: Modality,
    /// Observation-space standard deviation (N or strain).
    pub sigma_meas: f64,
    /// Standard deviation on the appended failure displacement (mm, FD only).
    pub sigma_df: Option<f64>,
    pub score_variances: Vec<f64>,
}

impl NoiseModel {
    pub fn new(basis: &PcaBasis, sigma_meas: f64, sigma_df: Option<f64>) -> Result<Self> {
        let mut score_variances = propagate_noise(&basis.truncated(), &MeasurementNoise::Iid(sigma_meas))?;
        match (basis.modality, sigma_df) {
            (Modality::Fd, Some(s)) if s > 0.0 => score_variances.push(s * s),
            (Modality::Fd, _) => {
                return Err(Error::Parameter(
                    "FD noise needs a positive d_f standard deviation".into(),
                ))
            }
            (Modality::Field, _) => {}
        }
        Ok(Self {
            modality: basis.modality,
            sigma_meas,
            sigma_df: if basis.modality == Modality::Fd { sigma_df } else { None },
            score_variances,
        })
    }
}

/// `Σ_k −½ (y_k − μ_k)² / v_k − ½ ln(2π v_k)`.
pub fn gaussian_log_terms(y: &[f64], mu: &[f64], v: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(v)
        .map(|((y, m), v)| -0.5 * (y - m).powi(2) / v - 0.5 * (LN_2PI + v.ln()))
        .sum()
}

pub trait LogLikelihood: Sync {
    fn log_likelihood_batch(&self, thetas: &[[f64; 4]]) -> Result<Vec<f64>>;
}

/// A likelihood that ignores the data.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLikelihood(pub f64);

impl LogLikelihood for ConstantLikelihood {
    fn log_likelihood_batch(&self, thetas: &[[f64; 4]]) -> Result<Vec<f64>> {
        Ok(vec![self.0; thetas.len()])
    }
}

/// Pointwise likelihood from a closure.
pub struct FnLikelihood<F>(pub F);

impl<F: Fn(&[f64; 4]) -> f64 + Sync> LogLikelihood for FnLikelihood<F> {
    fn log_likelihood_batch(&self, thetas: &[[f64; 4]]) -> Result<Vec<f64>> {
        Ok(thetas.iter().map(|t| (self.0)(t)).collect())
    }
}

/// Gaussian likelihood of an observed score vector under the surrogate, with
/// variance `σ_k² + s_k²(θ)`.
pub struct ScoreLikelihood<'a> {
    pub bundle: &'a SurrogateBundle,
    pub observed: Vec<f64>,
    pub noise: &'a NoiseModel,
}

impl<'a> ScoreLikelihood<'a> {
    pub fn new(bundle: &'a SurrogateBundle, observed: Vec<f64>, noise: &'a NoiseModel) -> Result<Self> {
        if bundle.modality != noise.modality {
            return Err(Error::Parameter("noise model and bundle modalities differ".into()));
        }
        for n in [observed.len(), noise.score_variances.len()] {
            if n != bundle.len() {
                return Err(Error::Dimension {
                    expected: bundle.len(),
                    actual: n,
                });
            }
        }
        Ok(Self {
            bundle,
            observed,
            noise,
        })
    }
}

impl LogLikelihood for ScoreLikelihood<'_> {
    fn log_likelihood_batch(&self, thetas: &[[f64; 4]]) -> Result<Vec<f64>> {
        let (mean, var) = self.bundle.predict_batch(thetas)?;
        (0..thetas.len())
            .map(|i| {
                let mu: Vec<f64> = mean.row(i).iter().copied().collect();
                let v: Vec<f64> = var
                    .row(i)
                    .iter()
                    .zip(&self.noise.score_variances)
                    .map(|(s, n)| s + n)
                    .collect();
                let l = gaussian_log_terms(&self.observed, &mu, &v);
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(Error::Numeric(format!("non-finite likelihood at {:?}", thetas[i])))
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Transitional MCMC

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmcmcConfig {
    pub particles: usize,
    pub runs: usize,
    /// Random-walk Metropolis–Hastings sweeps per stage.
    pub mh_steps: usize,
    /// Initial factor on the weighted sample covariance used as proposal
    /// covariance.
    pub proposal_scale: f64,
    /// Acceptance rate the factor is steered towards between MH sweeps;
    /// `None` keeps it fixed.
    pub target_acceptance: Option<f64>,
    /// Independence sweeps per stage, run before the random-walk sweeps,
    /// proposing from a logit KDE of the resampled population.
    pub independence_sweeps: usize,
    /// Kernel centres of that proposal.
    pub proposal_centers: usize,
    /// Target coefficient of variation of the importance weights.
    pub target_cov: f64,
    /// Smallest tolerated effective fraction of importance weights.
    pub min_effective_fraction: f64,
    pub max_stages: usize,
    pub seed: u64,
}

impl Default for TmcmcConfig {
    fn default() -> Self {
        Self {
            particles: 2000,
            runs: 8,
            mh_steps: 3,
            proposal_scale: 0.04,
            target_acceptance: Some(0.3),
            independence_sweeps: 2,
            proposal_centers: 500,
            target_cov: 1.0,
            min_effective_fraction: 1e-3,
            max_stages: 500,
            seed: 0,
        }
    }
}

impl TmcmcConfig {
    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed
            .wrapping_mul(0xD1B5_4A32_D192_ED03)
            .wrapping_add(run as u64 + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.particles < 10 || self.runs == 0 || !(self.proposal_scale > 0.0) || !(self.target_cov > 0.0) {
            return Err(Error::Config(format!("invalid T-MCMC settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub gamma: f64,
    pub effective_fraction: f64,
    pub acceptance_rate: f64,
    pub sweeps: usize,
    /// Proposal factor in use at the end of the stage.
    pub proposal_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Tempering ladder, from 0 to exactly 1.
    pub gammas: Vec<f64>,
    pub stages: Vec<StageRecord>,
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub split_rhat: [f64; 4],
    /// Sum of per-run effective sample sizes.
    pub ess: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSampleSet {
    pub samples: Vec<[f64; 4]>,
    pub chain_ids: Vec<usize>,
    pub chain_lengths: Vec<usize>,
    pub log_posterior: Vec<f64>,
    pub log_likelihood: Vec<f64>,
    pub runs: Vec<RunRecord>,
    pub diagnostics: Diagnostics,
    pub map: [f64; 4],
    pub hpd: [[f64; 2]; 4],
    pub coverage: f64,
}

impl PosteriorSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Whether every split-R̂ is below the reporting gate.
    pub fn converged(&self) -> bool {
        self.diagnostics.split_rhat.iter().all(|r| *r < RHAT_GATE)
    }

    pub fn hpd_widths(&self) -> [f64; 4] {
        self.hpd.map(|[a, b]| b - a)
    }

    pub fn chain(&self, id: usize, param: usize) -> Vec<f64> {
        self.samples
            .iter()
            .zip(&self.chain_ids)
            .filter(|(_, c)| **c == id)
            .map(|(s, _)| s[param])
            .collect()
    }
}

/// Tempering increment whose importance weights have the target CoV.
fn next_increment(loglike: &[f64], remaining: f64, target: f64) -> f64 {
    let max = loglike.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cov = |dg: f64| {
        let w: Vec<f64> = loglike.iter().map(|l| (dg * (l - max)).exp()).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    };
    if cov(remaining) <= target {
        return remaining;
    }
    let (mut lo, mut hi) = (0.0, remaining);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if cov(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 * remaining {
            break;
        }
    }
    lo.max(f64::MIN_POSITIVE)
}

fn systematic_resample(weights: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let u0: f64 = rng.gen::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] / total;
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u > cum && j + 1 < weights.len() {
            j += 1;
            cum += weights[j] / total;
        }
        out.push(j);
    }
    out
}

struct RunOutput {
    particles: Vec<[f64; 4]>,
    log_prior: Vec<f64>,
    log_like: Vec<f64>,
    record: RunRecord,
}

fn tmcmc_run(prior: &dyn Prior, like: &dyn LogLikelihood, cfg: &TmcmcConfig, run: usize) -> Result<RunOutput> {
    let seed = cfg.run_seed(run);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.particles;
    let mut theta: Vec<[f64; 4]> = (0..n).map(|_| prior.sample(&mut rng)).collect();
    let mut lp: Vec<f64> = theta.iter().map(|t| prior.log_density(t)).collect();
    let mut ll = like.log_likelihood_batch(&theta)?;
    check_loglike(&ll)?;
    let mut gamma = 0.0;
    let mut gammas = vec![0.0];
    let mut stages = Vec::new();
    let mut log_evidence = 0.0;
    let mut scale = cfg.proposal_scale;

    while gamma < 1.0 {
        if stages.len() == cfg.max_stages {
            return Err(Error::NonConvergence(format!(
                "run {run}: tempering did not reach 1 in {} stages",
                cfg.max_stages
            )));
        }
        let mut dg = next_increment(&ll, 1.0 - gamma, cfg.target_cov);
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (weights, eff) = loop {
            let w: Vec<f64> = ll.iter().map(|l| (dg * (l - max)).exp()).collect();
            let s: f64 = w.iter().sum();
            let s2: f64 = w.iter().map(|x| x * x).sum();
            let eff = s * s / s2 / n as f64;
            if eff >= cfg.min_effective_fraction {
                break (w, eff);
            }
            dg *= 0.5;
            if dg < 1e-300 {
                return Err(Error::Degeneracy(format!(
                    "run {run}: importance weights collapsed at gamma {gamma}"
                )));
            }
        };
        let next = if gamma + dg >= 1.0 - 1e-12 { 1.0 } else { gamma + dg };
        let wsum: f64 = weights.iter().sum();
        log_evidence += (next - gamma) * max + (wsum / n as f64).ln();
        gamma = next;
        gammas.push(gamma);

        // Weighted covariance of the current population.
        let mut mean = Vector4::zeros();
        for (t, w) in theta.iter().zip(&weights) {
            mean += Vector4::from(*t) * (*w / wsum);
        }
        let mut cov = Matrix4::zeros();
        for (t, w) in theta.iter().zip(&weights) {
            let d = Vector4::from(*t) - mean;
            cov += d * d.transpose() * (*w / wsum);
        }
        let chol = nalgebra::Cholesky::new(cov + Matrix4::identity() * 1e-14 * cov.trace().max(1e-300))
            .ok_or_else(|| Error::Numeric(format!("run {run}: proposal covariance not positive definite")))?;
        let l_cov = chol.l();

        let parents = systematic_resample(&weights, n, &mut rng);
        theta = parents.iter().map(|&j| theta[j]).collect();
        lp = parents.iter().map(|&j| lp[j]).collect();
        ll = parents.iter().map(|&j| ll[j]).collect();

        let mut accepted = 0usize;
        let proposal = if cfg.independence_sweeps > 0 {
            fit_kde_prior(&theta, prior.bounds(), cfg.proposal_centers).ok()
        } else {
            None
        };
        if let Some(q) = &proposal {
            let mut lq: Vec<f64> = theta.iter().map(|t| q.log_density(t)).collect();
            for _ in 0..cfg.independence_sweeps {
                let proposals: Vec<[f64; 4]> = (0..n).map(|_| q.sample(&mut rng)).collect();
                let lq_new: Vec<f64> = proposals.iter().map(|t| q.log_density(t)).collect();
                let lp_new: Vec<f64> = proposals.iter().map(|t| prior.log_density(t)).collect();
                accepted += metropolis(
                    like, gamma, &proposals, &lp_new, &lq_new, &mut rng, &mut theta, &mut lp, &mut ll, &mut lq,
                )?;
            }
        }
        let sweeps = cfg.mh_steps + if proposal.is_some() { cfg.independence_sweeps } else { 0 };
        let symmetric = vec![0.0; n];
        let mut lq = vec![0.0; n];
        for _ in 0..cfg.mh_steps {
            let l = l_cov * scale.sqrt();
            let proposals: Vec<[f64; 4]> = theta
                .iter()
                .map(|t| {
                    let xi = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    let step = l * xi;
                    [t[0] + step[0], t[1] + step[1], t[2] + step[2], t[3] + step[3]]
                })
                .collect();
            let lp_new: Vec<f64> = proposals.iter().map(|t| prior.log_density(t)).collect();
            let accepted_sweep = metropolis(
                like, gamma, &proposals, &lp_new, &symmetric, &mut rng, &mut theta, &mut lp, &mut ll, &mut lq,
            )?;
            accepted += accepted_sweep;
            if let Some(target) = cfg.target_acceptance {
                let rate = accepted_sweep as f64 / n as f64;
                scale = (scale * (2.0 * (rate - target)).exp()).clamp(1e-4, 10.0);
            }
        }
        stages.push(StageRecord {
            gamma,
            effective_fraction: eff,
            acceptance_rate: accepted as f64 / (n * sweeps.max(1)) as f64,
            sweeps,
            proposal_scale: scale,
        });
    }
    Ok(RunOutput {
        particles: theta,
        log_prior: lp,
        log_like: ll,
        record: RunRecord {
            seed,
            gammas,
            stages,
            log_evidence,
        },
    })
}

/// One Metropolis–Hastings accept/reject pass over the population for
/// `prior · like^γ`, with `lq` the log proposal density of independence
/// moves (zero for symmetric ones). Returns the number of acceptances.
#[allow(clippy::too_many_arguments)]
fn metropolis(
    like: &dyn LogLikelihood,
    gamma: f64,
    proposals: &[[f64; 4]],
    lp_new: &[f64],
    lq_new: &[f64],
    rng: &mut ChaCha8Rng,
    theta: &mut [[f64; 4]],
    lp: &mut [f64],
    ll: &mut [f64],
    lq: &mut [f64],
) -> Result<usize> {
    let n = theta.len();
    let inside: Vec<usize> = (0..n).filter(|&i| lp_new[i].is_finite()).collect();
    let batch: Vec<[f64; 4]> = inside.iter().map(|&i| proposals[i]).collect();
    let ll_batch = like.log_likelihood_batch(&batch)?;
    check_loglike(&ll_batch)?;
    let mut ll_new = vec![f64::NEG_INFINITY; n];
    for (k, &i) in inside.iter().enumerate() {
        ll_new[i] = ll_batch[k];
    }
    let mut accepted = 0;
    for i in 0..n {
        let u: f64 = rng.gen();
        if !lp_new[i].is_finite() {
            continue;
        }
        let log_ratio = lp_new[i] + gamma * ll_new[i] - lq_new[i] - (lp[i] + gamma * ll[i] - lq[i]);
        if u.ln() < log_ratio {
            theta[i] = proposals[i];
            lp[i] = lp_new[i];
            ll[i] = ll_new[i];
            lq[i] = lq_new[i];
            accepted += 1;
        }
    }
    Ok(accepted)
}

fn check_loglike(ll: &[f64]) -> Result<()> {
    if ll.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::Numeric("likelihood returned NaN or +inf".into()));
    }
    Ok(())
}

/// Tempered sampling from `prior · like^γ`, γ: 0 → 1, in independent runs.
pub fn tmcmc_sample(prior: &dyn Prior, like: &dyn LogLikelihood, config: &TmcmcConfig) -> Result<PosteriorSampleSet> {
    config.validate()?;
    let outputs = (0..config.runs)
        .into_par_iter()
        .map(|r| tmcmc_run(prior, like, config, r))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    let mut chain_ids = Vec::new();
    let mut log_posterior = Vec::new();
    let mut log_likelihood = Vec::new();
    let mut runs = Vec::new();
    let mut chain_lengths = Vec::new();
    for (r, o) in outputs.into_iter().enumerate() {
        chain_lengths.push(o.particles.len());
        chain_ids.extend(std::iter::repeat_n(r, o.particles.len()));
        log_posterior.extend(o.log_prior.iter().zip(&o.log_like).map(|(p, l)| p + l));
        log_likelihood.extend(o.log_like);
        samples.extend(o.particles);
        runs.push(o.record);
    }
    summarize(
        samples,
        chain_ids,
        chain_lengths,
        log_posterior,
        log_likelihood,
        runs,
        0.95,
    )
}

fn summarize(
    samples: Vec<[f64; 4]>,
    chain_ids: Vec<usize>,
    chain_lengths: Vec<usize>,
    log_posterior: Vec<f64>,
    log_likelihood: Vec<f64>,
    runs: Vec<RunRecord>,
    coverage: f64,
) -> Result<PosteriorSampleSet> {
    let mut split_rhat = [1.0; 4];
    let mut ess_total = [0.0; 4];
    for p in 0..4 {
        let chains: Vec<Vec<f64>> = (0..chain_lengths.len())
            .map(|c| {
                samples
                    .iter()
                    .zip(&chain_ids)
                    .filter(|(_, id)| **id == c)
                    .map(|(s, _)| s[p])
                    .collect()
            })
            .collect();
        split_rhat[p] = if chains.len() >= 2 {
            self::split_rhat(&chains)?
        } else {
            f64::NAN
        };
        ess_total[p] = chains.iter().map(|c| ess(c)).collect::<Result<Vec<_>>>()?.iter().sum();
    }
    let (map, hpd) = map_and_hpd(&samples, &log_posterior, coverage)?;
    Ok(PosteriorSampleSet {
        samples,
        chain_ids,
        chain_lengths,
        log_posterior,
        log_likelihood,
        runs,
        diagnostics: Diagnostics {
            split_rhat,
            ess: ess_total,
        },
        map,
        hpd,
        coverage,
    })
}

// ---------------------------------------------------------------------------
// Diagnostics and summaries

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Split-R̂: chains are halved and the between/within variance ratio of
/// the halves is reported.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: chains.len(),
        });
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::InsufficientSamples { needed: 4, got: n });
    }
    let half = n / 2;
    let mut parts = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[half..2 * half]);
    }
    let stats: Vec<(f64, f64)> = parts.iter().map(|p| mean_var(p)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let (_, var_means) = mean_var(&stats.iter().map(|s| s.0).collect::<Vec<_>>());
    let b = half as f64 * var_means;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (half as f64 - 1.0) / half as f64 * w + b / half as f64;
    Ok((var_plus / w).sqrt())
}

/// Autocorrelation-based effective sample size with Geyer's initial
/// positive (monotone) sequence truncation.
pub fn ess(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < 10 {
        return Err(Error::InsufficientSamples { needed: 10, got: n });
    }
    let m = chain.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = chain.iter().map(|v| v - m).collect();
    let c0 = d.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        log::warn!("constant chain: effective sample size set to 0");
        return Ok(0.0);
    }
    let rho = |lag: usize| d[..n - lag].iter().zip(&d[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 / c0;
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let mut g = rho(2 * k) + rho(2 * k + 1);
        if g <= 0.0 {
            break;
        }
        g = g.min(prev);
        sum += g;
        prev = g;
        k += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / (n as f64).log10());
    Ok(n as f64 / tau)
}

/// Shortest window holding `⌈coverage·m⌉` sorted values; ties go to the
/// leftmost window.
pub fn hpd_interval(values: &[f64], coverage: f64) -> Result<[f64; 2]> {
    if values.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let k = ((coverage * m as f64).ceil() as usize).clamp(1, m);
    let mut best = (f64::INFINITY, 0);
    for i in 0..=m - k {
        let w = v[i + k - 1] - v[i];
        if w < best.0 {
            best = (w, i);
        }
    }
    Ok([v[best.1], v[best.1 + k - 1]])
}

/// MAP sample (highest log posterior, earliest on ties) and per-parameter HPDs.
pub fn map_and_hpd(samples: &[[f64; 4]], log_posterior: &[f64], coverage: f64) -> Result<([f64; 4], [[f64; 2]; 4])> {
    if samples.len() < 100 {
        return Err(Error::InsufficientSamples {
            needed: 100,
            got: samples.len(),
        });
    }
    if samples.len() != log_posterior.len() {
        return Err(Error::Dimension {
            expected: samples.len(),
            actual: log_posterior.len(),
        });
    }
    let mut best = 0;
    for (i, lp) in log_posterior.iter().enumerate() {
        if *lp > log_posterior[best] {
            best = i;
        }
    }
    let mut hpd = [[0.0; 2]; 4];
    for (p, h) in hpd.iter_mut().enumerate() {
        *h = hpd_interval(&samples.iter().map(|s| s[p]).collect::<Vec<_>>(), coverage)?;
    }
    Ok((samples[best], hpd))
}

// ---------------------------------------------------------------------------
// Sequential updating

/// Maximum number of KDE centres carried from one update to the next.
pub const DEFAULT_KDE_CENTERS: usize = 2000;

/// Update 1 from a uniform prior with `first`; update 2 with `second` and
/// a KDE of update 1 as prior.
pub fn sequential_update(
    first: &dyn LogLikelihood,
    second: &dyn LogLikelihood,
    param_box: &ParamBox,
    config: &TmcmcConfig,
    kde_centers: usize,
) -> Result<(PosteriorSampleSet, PosteriorSampleSet)> {
    let prior = PriorSpec::UniformBox(*param_box);
    let update1 = tmcmc_sample(&prior, first, config)?;
    let kde = PriorSpec::Kde(fit_kde_prior(&update1.samples, param_box, kde_centers)?);
    let mut cfg2 = *config;
    cfg2.seed = config.seed.wrapping_add(0x005E_C04D);
    let update2 = tmcmc_sample(&kde, second, &cfg2)?;
    Ok((update1, update2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logit_values() {
        assert_eq!(logit_map(0.5, 0.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(logit_map(0.75, 0.0, 1.0).unwrap(), 3f64.ln(), epsilon = 1e-15);
        assert!(logit_map(0.0, 0.0, 1.0).is_err());
        for t in [0.011, 0.05, 0.1499] {
            let z = logit_map(t, 0.01, 0.15).unwrap();
            assert!((logit_inverse(z, 0.01, 0.15) - t).abs() < 1e-12);
        }
        assert!(logit_inverse(800.0, 0.0, 1.0) <= 1.0);
    }

    #[test]
    fn likelihood_terms() {
        assert_relative_eq!(
            gaussian_log_terms(&[1.0], &[1.0], &[1.0]),
            -0.5 * LN_2PI,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            gaussian_log_terms(&[2.0], &[1.0], &[1.0]),
            -0.5 - 0.5 * LN_2PI,
            epsilon = 1e-15
        );
    }

    #[test]
    fn rhat_and_ess_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let iid: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..1000).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let r = split_rhat(&iid).unwrap();
        assert!((0.99..1.05).contains(&r), "{r}");
        let shifted = vec![iid[0].clone(), iid[1].iter().map(|v| v + 5.0).collect()];
        assert!(split_rhat(&shifted).unwrap() > 1.5);
        assert!(split_rhat(&iid[..1]).is_err());

        let e = ess(&iid[0]).unwrap();
        assert!((800.0..1200.0).contains(&e), "{e}");
        let rho = 0.9;
        let mut x = vec![0.0f64; 20000];
        for i in 1..x.len() {
            x[i] = rho * x[i - 1] + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        let expect = 20000.0 * (1.0 - rho) / (1.0 + rho);
        let e = ess(&x).unwrap();
        assert!((e - expect).abs() < 0.3 * expect, "{e} vs {expect}");
        assert_eq!(ess(&[3.0; 50]).unwrap(), 0.0);
    }

    #[test]
    fn hpd_fixtures() {
        assert_eq!(hpd_interval(&[2.5; 200], 0.95).unwrap(), [2.5, 2.5]);
        let u: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        // Every window of 95 points has the same width; the leftmost wins.
        assert_eq!(hpd_interval(&u, 0.95).unwrap(), [0.0, u[94]]);
        assert!(map_and_hpd(&[[0.0; 4]; 10], &[0.0; 10], 0.95).is_err());
    }

    #[test]
    fn systematic_resampling_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = systematic_resample(&[1.0, 1.0, 2.0], 4, &mut rng);
        assert_eq!(idx, vec![0, 1, 2, 2]);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn tempering_ladder_is_monotone_and_ends_at_one() {
        let b = ParamBox::default();
        let like = FnLikelihood(|t: &[f64; 4]| -0.5 * ((t[0] - 0.3) / 0.02).powi(2));
        let cfg = TmcmcConfig {
            particles: 300,
            runs: 2,
            seed: 5,
            ..Default::default()
        };
        let post = tmcmc_sample(&PriorSpec::UniformBox(b), &like, &cfg).unwrap();
        for r in &post.runs {
            assert_eq!(r.gammas[0], 0.0);
            assert_eq!(*r.gammas.last().unwrap(), 1.0);
            assert!(r.gammas.windows(2).all(|w| w[1] > w[0]));
        }
        assert!(post.samples.iter().all(|s| b.contains(s) && s[2] < s[3]));
        assert_eq!(post, tmcmc_sample(&PriorSpec::UniformBox(b), &like, &cfg).unwrap());
    }

    #[test]
    fn independence_kernel_alone_targets_the_posterior() {
        let b = ParamBox::default();
        let (mu, sd) = ([0.3, 0.03], [0.02, 0.002]);
        let like =
            FnLikelihood(move |t: &[f64; 4]| (0..2).map(|i| -0.5 * ((t[i] - mu[i]) / sd[i]).powi(2)).sum::<f64>());
        let cfg = TmcmcConfig {
            particles: 1000,
            runs: 4,
            mh_steps: 0,
            independence_sweeps: 3,
            seed: 11,
            ..Default::default()
        };
        let post = tmcmc_sample(&PriorSpec::UniformBox(b), &like, &cfg).unwrap();
        let n = post.len() as f64;
        for i in 0..2 {
            let m = post.samples.iter().map(|s| s[i]).sum::<f64>() / n;
            let s = (post.samples.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((m - mu[i]).abs() < 0.1 * sd[i], "mean {m} coordinate {i}");
            assert!((s / sd[i] - 1.0).abs() < 0.08, "sd {s} coordinate {i}");
        }
    }

    #[test]
    fn kde_of_uniform_samples_is_flat_on_the_interior() {
        let b = ParamBox::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s: Vec<[f64; 4]> = (0..10_000).map(|_| PriorSpec::UniformBox(b).sample(&mut rng)).collect();
        let kde = fit_kde_prior(&s, &b, 10_000).unwrap();
        // Cell centres of a 5^4 partition of the box minus a 5% margin.
        let probes: Vec<f64> = (0..5).map(|j| 0.05 + 0.9 * (j as f64 + 0.5) / 5.0).collect();
        let mut d = Vec::new();
        for i in 0..625 {
            let u: [f64; 4] = std::array::from_fn(|k| probes[(i / 5usize.pow(k as u32)) % 5]);
            d.push(kde.log_density(&b.from_unit(&u)));
        }
        let (lo, hi) = d
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!((hi - lo).exp() < 3.0, "max/min {}", (hi - lo).exp());
    }

    #[test]
    fn kde_contract() {
        let b = ParamBox::default();
        assert!(fit_kde_prior(&[[0.3, 0.03, 0.08, 0.25]; 10], &b, 100).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s: Vec<[f64; 4]> = (0..200).map(|_| PriorSpec::UniformBox(b).sample(&mut rng)).collect();
        s[0][0] = b.lower[0];
        let k = fit_kde_prior(&s, &b, 1000).unwrap();
        assert_eq!(k.nudged, 1);
        assert!(k.log_density(&[b.lower[0], 0.03, 0.08, 0.25]) == f64::NEG_INFINITY);
        let mut constant = s.clone();
        constant.iter_mut().for_each(|t| t[1] = 0.02);
        assert!(matches!(fit_kde_prior(&constant, &b, 1000), Err(Error::Degeneracy(_))));
    }
}
