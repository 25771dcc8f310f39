//! In-memory orchestration of the calibration chain: dataset, reduced
//! representations, surrogates, observations, update sequences and the
//! reports built on them. The file-backed stages in [`crate::stages`] wrap
//! these functions.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bayes::{
    fit_kde_prior, tmcmc_sample, NoiseModel, PosteriorSampleSet, PriorSpec, ScoreLikelihood, TmcmcConfig,
};
use crate::config::{ExperimentConfig, Informativeness};
use crate::dataset::{simulate_design, simulate_row, split_indices, SimulatedSet};
use crate::design::{lhs_design, Design};
use crate::error::{Error, Result};
use crate::features::{
    curve_nmae, field_nmae, field_reference, fit_fd_basis, fit_field_basis, locate_yield_point, pca_project,
    resample_segment, unflatten_field, Modality, Observation, PcaBasis, StrainComponent, DEFAULT_FIELD_SCALING,
};
use crate::gtn::{GtnParams, ParamBox};
use crate::specimen::{simulate_specimen, CurveSegment, HoleTemplate, SpecimenRun, StrainSnapshot};
use crate::surrogate::{train_bundle, SurrogateBundle};

pub fn generate_design(cfg: &ExperimentConfig) -> Result<Design> {
    lhs_design(cfg.design_size, &cfg.param_box, cfg.task_seed("design"))
}

/// Simulated design with its train/test partition (positions in `set.rows`).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub set: SimulatedSet,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn thetas(&self, idx: &[usize]) -> Vec<[f64; 4]> {
        idx.iter().map(|&i| self.set.rows[i].theta).collect()
    }

    pub fn snapshots(&self, idx: &[usize]) -> Vec<&StrainSnapshot> {
        idx.iter().map(|&i| &self.set.rows[i].snapshot).collect()
    }

    /// Ensemble mean of the training forces over all stations.
    pub fn force_average(&self) -> f64 {
        let (sum, n) = self.train.iter().fold((0.0, 0usize), |(s, n), &i| {
            let f = &self.set.rows[i].forces;
            (s + f.iter().sum::<f64>(), n + f.len())
        });
        sum / n as f64
    }
}

pub fn simulate_dataset(cfg: &ExperimentConfig, design: &Design) -> Result<Dataset> {
    let set = simulate_design(&design.rows, &cfg.simulator, &cfg.loading, cfg.features.stations)?;
    partition(cfg, set)
}

pub fn partition(cfg: &ExperimentConfig, set: SimulatedSet) -> Result<Dataset> {
    let (train, test) = split_indices(set.rows.len(), cfg.train_fraction, cfg.task_seed("split"))?;
    Ok(Dataset { set, train, test })
}

/// Bases fitted on the training split and score tables for every row.
#[derive(Debug, Clone)]
pub struct Representations {
    /// Full bases; `retained` marks the truncation.
    pub fd_basis: PcaBasis,
    pub field_basis: PcaBasis,
    /// `rows × (k_FD + 1)`, the last column being `d_f`.
    pub fd_scores: DMatrix<f64>,
    pub field_scores: DMatrix<f64>,
}

impl Representations {
    /// Noise on `d_f`: configured, or a fraction of its training range.
    pub fn sigma_df(&self, cfg: &ExperimentConfig, data: &Dataset) -> f64 {
        if let Some(s) = cfg.noise.sigma_df {
            return s;
        }
        let c = self.fd_scores.ncols() - 1;
        let (lo, hi) = data
            .train
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = self.fd_scores[(i, c)];
                (lo.min(v), hi.max(v))
            });
        cfg.noise.sigma_df_fraction * (hi - lo)
    }
}

pub fn reduce(cfg: &ExperimentConfig, data: &Dataset) -> Result<Representations> {
    let rows = &data.set.rows;
    let forces: Vec<&[f64]> = data.train.iter().map(|&i| rows[i].forces.as_slice()).collect();
    let fd_basis = fit_fd_basis(&forces, cfg.features.fd_threshold, cfg.noise.sigma_fd)?;
    let field_basis = fit_field_basis(
        &data.snapshots(&data.train),
        cfg.features.field_threshold,
        cfg.features.field_scaling,
    )?;
    log::info!(
        "PCA: k_FD = {} ({:.4}), k_FIELD = {} ({:.5})",
        fd_basis.retained,
        fd_basis.retained_ratio(),
        field_basis.retained,
        field_basis.retained_ratio()
    );
    let fd_scores = score_table(&fd_basis, rows.len(), |i| Observation::Fd {
        forces: &rows[i].forces,
        d_f: rows[i].failure_displacement(),
    })?;
    let field_scores = score_table(&field_basis, rows.len(), |i| Observation::Field(&rows[i].snapshot))?;
    Ok(Representations {
        fd_basis,
        field_basis,
        fd_scores,
        field_scores,
    })
}

fn score_table<'a>(basis: &PcaBasis, n: usize, obs: impl Fn(usize) -> Observation<'a>) -> Result<DMatrix<f64>> {
    let rows = (0..n)
        .map(|i| pca_project(basis, obs(i)).map(|s| s.scores))
        .collect::<Result<Vec<_>>>()?;
    let cols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
}

fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

#[derive(Debug, Clone)]
pub struct Surrogates {
    pub fd: SurrogateBundle,
    pub field: SurrogateBundle,
}

impl Surrogates {
    pub fn bundle(&self, m: Modality) -> &SurrogateBundle {
        match m {
            Modality::Fd => &self.fd,
            Modality::Field => &self.field,
        }
    }
}

pub fn train_surrogates(cfg: &ExperimentConfig, data: &Dataset, rep: &Representations) -> Result<Surrogates> {
    let thetas = data.thetas(&data.train);
    let s = &cfg.surrogate;
    let fd = train_bundle(
        &thetas,
        &select_rows(&rep.fd_scores, &data.train),
        rep.fd_basis.truncated(),
        &cfg.param_box,
        &s.bounds,
        s.starts,
        cfg.task_seed("train-fd"),
    )?;
    let field = train_bundle(
        &thetas,
        &select_rows(&rep.field_scores, &data.train),
        rep.field_basis.truncated(),
        &cfg.param_box,
        &s.bounds,
        s.starts,
        cfg.task_seed("train-field"),
    )?;
    Ok(Surrogates { fd, field })
}

// ---------------------------------------------------------------------------
// Held-out validation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution1 {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl Distribution1 {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let q = |p: f64| v[((p * (n - 1) as f64).round() as usize).min(n - 1)];
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median: q(0.5),
            p95: q(0.95),
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    /// Training mean absolute magnitude used for normalization.
    pub reference: f64,
    pub nmae: Distribution1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub test_rows: usize,
    pub force_average: f64,
    pub curve_nmae: Distribution1,
    /// Mean absolute error of the predicted failure displacement (mm).
    pub failure_displacement_mae: f64,
    pub field: Vec<ComponentReport>,
    /// Design indices of the best and worst held-out curves and fields.
    pub curve_best: usize,
    pub curve_worst: usize,
    pub field_best: usize,
    pub field_worst: usize,
}

/// Per-row held-out errors plus predicted reconstructions.
#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    pub report: ValidationReport,
    /// `(design index, curve NMAE, true d_f, predicted d_f)`.
    pub curves: Vec<(usize, f64, f64, f64)>,
    /// `(design index, [e11, e12, e22] NMAE)`.
    pub fields: Vec<(usize, [f64; 3])>,
    pub predicted_forces: Vec<Vec<f64>>,
    pub predicted_fields: Vec<StrainSnapshot>,
}

pub fn validate_surrogates(data: &Dataset, rep: &Representations, surr: &Surrogates) -> Result<ValidationOutcome> {
    let rows = &data.set.rows;
    let test = &data.test;
    if test.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let thetas = data.thetas(test);
    let f_avg = data.force_average();
    let (fd_mu, _) = surr.fd.predict_batch(&thetas)?;
    let (field_mu, _) = surr.field.predict_batch(&thetas)?;
    let k_fd = surr.fd.basis.retained;
    let train_snaps = data.snapshots(&data.train);
    let refs = StrainComponent::ALL.map(|c| field_reference(&train_snaps, c));
    let [s11, s12] = rep.field_basis.field_scaling.unwrap_or(DEFAULT_FIELD_SCALING);

    let mut curves = Vec::with_capacity(test.len());
    let mut fields = Vec::with_capacity(test.len());
    let mut predicted_forces = Vec::with_capacity(test.len());
    let mut predicted_fields = Vec::with_capacity(test.len());
    for (t, &i) in test.iter().enumerate() {
        let row = &rows[i];
        let alpha: Vec<f64> = (0..k_fd).map(|c| fd_mu[(t, c)]).collect();
        let f_hat = surr.fd.basis.reconstruct_features(&alpha)?;
        let nmae = curve_nmae(&row.forces, &f_hat, f_avg)?;
        curves.push((row.index, nmae, row.failure_displacement(), fd_mu[(t, k_fd)]));
        predicted_forces.push(f_hat);

        let beta: Vec<f64> = field_mu.row(t).iter().copied().collect();
        let x_hat = surr.field.basis.reconstruct_features(&beta)?;
        let pred = unflatten_field(&x_hat, &row.snapshot, s11, s12)?;
        let mut e = [0.0; 3];
        for (c, comp) in StrainComponent::ALL.iter().enumerate() {
            e[c] = field_nmae(&row.snapshot, &pred, *comp, refs[c])?;
        }
        fields.push((row.index, e));
        predicted_fields.push(pred);
    }
    let nm: Vec<f64> = curves.iter().map(|c| c.1).collect();
    let argmin = |v: &[f64]| {
        v.iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    };
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    };
    let field_mean: Vec<f64> = fields.iter().map(|f| f.1.iter().sum::<f64>() / 3.0).collect();
    let report = ValidationReport {
        test_rows: test.len(),
        force_average: f_avg,
        curve_nmae: Distribution1::of(&nm),
        failure_displacement_mae: curves.iter().map(|c| (c.2 - c.3).abs()).sum::<f64>() / curves.len() as f64,
        field: StrainComponent::ALL
            .iter()
            .enumerate()
            .map(|(c, comp)| ComponentReport {
                component: comp.name().to_string(),
                reference: refs[c],
                nmae: Distribution1::of(&fields.iter().map(|f| f.1[c]).collect::<Vec<_>>()),
            })
            .collect(),
        curve_best: curves[argmin(&nm)].0,
        curve_worst: curves[argmax(&nm)].0,
        field_best: fields[argmin(&field_mean)].0,
        field_worst: fields[argmax(&field_mean)].0,
    };
    Ok(ValidationOutcome {
        report,
        curves,
        fields,
        predicted_forces,
        predicted_fields,
    })
}

// ---------------------------------------------------------------------------
// Observations

/// A specimen observation in representation form.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    /// Forces at the resampling stations.
    pub forces: Vec<f64>,
    pub d_f: f64,
    pub snapshot: StrainSnapshot,
    /// Generating parameters, for synthetic observations.
    pub truth: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedScores {
    pub fd: Vec<f64>,
    pub field: Vec<f64>,
}

impl ObservedData {
    pub fn scores(&self, surr: &Surrogates) -> Result<ObservedScores> {
        Ok(ObservedScores {
            fd: pca_project(
                &surr.fd.basis,
                Observation::Fd {
                    forces: &self.forces,
                    d_f: self.d_f,
                },
            )?
            .scores,
            field: pca_project(&surr.field.basis, Observation::Field(&self.snapshot))?.scores,
        })
    }
}

/// Simulate `cfg.experiment.truth` and add measurement noise in
/// representation space: iid on every station force, on `d_f`, and on every
/// strain component of every active cell.
pub fn synthetic_observation(cfg: &ExperimentConfig, sigma_df: f64, repeat: usize) -> Result<ObservedData> {
    let truth = cfg.experiment.truth;
    let template = HoleTemplate::new(&cfg.simulator, &cfg.loading.geometry);
    let row = simulate_row(
        usize::MAX,
        truth,
        &cfg.simulator,
        &cfg.loading,
        &template,
        cfg.features.stations,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.task_seed(&format!("noise-{repeat}")));
    let force_noise = Normal::new(0.0, cfg.noise.sigma_fd).map_err(|e| Error::Config(e.to_string()))?;
    let df_noise = Normal::new(0.0, sigma_df).map_err(|e| Error::Config(e.to_string()))?;
    let strain_noise = Normal::new(0.0, cfg.noise.sigma_dic).map_err(|e| Error::Config(e.to_string()))?;
    let forces = row.forces.iter().map(|f| f + force_noise.sample(&mut rng)).collect();
    let d_f = row.failure_displacement() + df_noise.sample(&mut rng);
    let mut snapshot = row.snapshot;
    for k in 0..snapshot.mask.len() {
        if snapshot.mask[k] {
            snapshot.e11[k] += strain_noise.sample(&mut rng);
            snapshot.e12[k] += strain_noise.sample(&mut rng);
            snapshot.e22[k] += strain_noise.sample(&mut rng);
        }
    }
    Ok(ObservedData {
        forces,
        d_f,
        snapshot,
        truth: Some(truth),
    })
}

/// A measured curve and snapshot, reduced exactly as the training data.
pub fn external_observation(curve: &CurveSegment, snapshot: StrainSnapshot, stations: usize) -> Result<ObservedData> {
    let yp = locate_yield_point(curve)?;
    Ok(ObservedData {
        forces: resample_segment(curve, &yp, stations)?,
        d_f: curve.failure_displacement,
        snapshot,
        truth: None,
    })
}

// ---------------------------------------------------------------------------
// Update sequences

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Order {
    #[serde(rename = "FD_DIC")]
    FdDic,
    #[serde(rename = "DIC_FD")]
    DicFd,
    #[serde(rename = "FD_ONLY")]
    FdOnly,
    #[serde(rename = "DIC_ONLY")]
    DicOnly,
}

impl Order {
    pub const ALL: [Order; 4] = [Order::FdDic, Order::DicFd, Order::FdOnly, Order::DicOnly];

    pub fn token(&self) -> &'static str {
        match self {
            Order::FdDic => "FD_DIC",
            Order::DicFd => "DIC_FD",
            Order::FdOnly => "FD_ONLY",
            Order::DicOnly => "DIC_ONLY",
        }
    }

    pub fn modalities(&self) -> &'static [Modality] {
        match self {
            Order::FdDic => &[Modality::Fd, Modality::Field],
            Order::DicFd => &[Modality::Field, Modality::Fd],
            Order::FdOnly => &[Modality::Fd],
            Order::DicOnly => &[Modality::Field],
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Order::ALL
            .into_iter()
            .find(|o| o.token().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown order `{s}`; expected FD_DIC, DIC_FD, FD_ONLY or DIC_ONLY"
                ))
            })
    }
}

/// Score-space noise for both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModels {
    pub fd: NoiseModel,
    pub field: NoiseModel,
}

impl NoiseModels {
    pub fn new(cfg: &ExperimentConfig, surr: &Surrogates, sigma_df: f64) -> Result<Self> {
        Ok(Self {
            fd: NoiseModel::new(&surr.fd.basis, cfg.noise.sigma_fd, Some(sigma_df))?,
            field: NoiseModel::new(&surr.field.basis, cfg.noise.sigma_dic, None)?,
        })
    }

    pub fn get(&self, m: Modality) -> &NoiseModel {
        match m {
            Modality::Fd => &self.fd,
            Modality::Field => &self.field,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePosterior {
    pub modality: Modality,
    pub seed: u64,
    pub posterior: PosteriorSampleSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub order: Order,
    pub stages: Vec<StagePosterior>,
}

impl SequenceResult {
    pub fn last(&self) -> &PosteriorSampleSet {
        &self.stages.last().expect("a sequence has at least one stage").posterior
    }

    pub fn converged(&self) -> bool {
        self.stages.iter().all(|s| s.posterior.converged())
    }
}

/// Seed offset of the second update, shared with [`crate::bayes::sequential_update`].
pub const SECOND_STAGE_SEED_OFFSET: u64 = 0x005E_C04D;

/// Run the updates of `order`. The first update uses the uniform prior on
/// the box and `tmcmc.seed`; each later one uses a logit-KDE of its
/// predecessor as prior. Single-modality orders therefore reproduce the
/// first stage of the matching two-stage order exactly.
pub fn run_sequence(
    order: Order,
    surr: &Surrogates,
    noise: &NoiseModels,
    observed: &ObservedScores,
    param_box: &ParamBox,
    tmcmc: &TmcmcConfig,
    kde_centers: usize,
) -> Result<SequenceResult> {
    let mut stages: Vec<StagePosterior> = Vec::new();
    for (s, &m) in order.modalities().iter().enumerate() {
        let y = match m {
            Modality::Fd => observed.fd.clone(),
            Modality::Field => observed.field.clone(),
        };
        let like = ScoreLikelihood::new(surr.bundle(m), y, noise.get(m))?;
        let prior = match stages.last() {
            None => PriorSpec::UniformBox(*param_box),
            Some(prev) => PriorSpec::Kde(fit_kde_prior(&prev.posterior.samples, param_box, kde_centers)?),
        };
        let seed = tmcmc.seed.wrapping_add(s as u64 * SECOND_STAGE_SEED_OFFSET);
        let cfg = TmcmcConfig { seed, ..*tmcmc };
        let posterior = tmcmc_sample(&prior, &like, &cfg)?;
        if !posterior.converged() {
            log::warn!(
                "{order} stage {} ({}): split-R̂ {:?} at or above the gate",
                s + 1,
                m.tag(),
                posterior.diagnostics.split_rhat
            );
        }
        stages.push(StagePosterior {
            modality: m,
            seed,
            posterior,
        });
    }
    Ok(SequenceResult { order, stages })
}

/// Run several orders, reusing first stages shared between them.
pub fn run_orders(
    orders: &[Order],
    surr: &Surrogates,
    noise: &NoiseModels,
    observed: &ObservedScores,
    param_box: &ParamBox,
    tmcmc: &TmcmcConfig,
    kde_centers: usize,
) -> Result<Vec<SequenceResult>> {
    let mut out: Vec<SequenceResult> = Vec::with_capacity(orders.len());
    for &order in orders {
        let first = order.modalities()[0];
        let shared = out
            .iter()
            .find(|r| r.stages[0].modality == first)
            .map(|r| r.stages[0].clone());
        let result = match (shared, order.modalities().len()) {
            (Some(stage), 1) => SequenceResult {
                order,
                stages: vec![stage],
            },
            _ => run_sequence(order, surr, noise, observed, param_box, tmcmc, kde_centers)?,
        };
        out.push(result);
    }
    Ok(out)
}

/// Rerun the simulator at `theta` (the MAP) for its state fields.
pub fn recover_fields(cfg: &ExperimentConfig, theta: &[f64; 4]) -> Result<SpecimenRun> {
    if !cfg.param_box.admits(theta) {
        return Err(Error::Numeric(format!("MAP {theta:?} outside the parameter box")));
    }
    simulate_specimen(&GtnParams::from_array(*theta), &cfg.simulator, &cfg.loading)
}

// ---------------------------------------------------------------------------
// Posterior summaries and order comparison

/// Smaller is more informative.
pub fn informativeness(p: &PosteriorSampleSet, metric: Informativeness) -> f64 {
    match metric {
        Informativeness::HpdProduct => p.hpd_widths().iter().product(),
        Informativeness::CovDeterminant => {
            let n = p.samples.len() as f64;
            let mean: [f64; 4] = std::array::from_fn(|i| p.samples.iter().map(|s| s[i]).sum::<f64>() / n);
            let cov = nalgebra::Matrix4::from_fn(|i, j| {
                p.samples
                    .iter()
                    .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0)
            });
            cov.determinant()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthEntry {
    pub order: Order,
    pub parameter: String,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderComparison {
    pub repeats: usize,
    /// Median over repeats of the final-stage 95% HPD widths, for FD_DIC then DIC_FD.
    pub widths: Vec<WidthEntry>,
    /// Median width ratio FD_DIC / DIC_FD per parameter.
    pub width_ratios: [f64; 4],
    /// Median of MAP(FD_DIC) − MAP(DIC_FD) per parameter.
    pub map_shifts: [f64; 4],
    pub metric: Informativeness,
    /// Median single-modality informativeness, FD then FIELD.
    pub single_modality: [f64; 2],
    /// Modalities in the order they should be assimilated.
    pub ranking: Vec<Modality>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compare the two sequential orders and rank the modalities by their
/// single-modality posteriors. Each slice holds one posterior per repeat.
pub fn compare_orders(
    fd_dic: &[&PosteriorSampleSet],
    dic_fd: &[&PosteriorSampleSet],
    fd_only: &[&PosteriorSampleSet],
    dic_only: &[&PosteriorSampleSet],
    metric: Informativeness,
) -> Result<OrderComparison> {
    let n = fd_dic.len();
    if n == 0 || [dic_fd.len(), fd_only.len(), dic_only.len()].iter().any(|&m| m != n) {
        return Err(Error::Artifact(
            "every order needs the same, non-zero number of repeats".into(),
        ));
    }
    let med = |sets: &[&PosteriorSampleSet], f: &dyn Fn(&PosteriorSampleSet) -> f64| {
        median(&sets.iter().map(|p| f(p)).collect::<Vec<_>>())
    };
    let mut widths = Vec::with_capacity(8);
    for (order, sets) in [(Order::FdDic, fd_dic), (Order::DicFd, dic_fd)] {
        for (i, name) in GtnParams::NAMES.iter().enumerate() {
            widths.push(WidthEntry {
                order,
                parameter: name.to_string(),
                width: med(sets, &|p| p.hpd_widths()[i]),
            });
        }
    }
    let width_ratios = std::array::from_fn(|i| {
        median(
            &(0..n)
                .map(|r| fd_dic[r].hpd_widths()[i] / dic_fd[r].hpd_widths()[i])
                .collect::<Vec<_>>(),
        )
    });
    let map_shifts =
        std::array::from_fn(|i| median(&(0..n).map(|r| fd_dic[r].map[i] - dic_fd[r].map[i]).collect::<Vec<_>>()));
    let single = [
        med(fd_only, &|p| informativeness(p, metric)),
        med(dic_only, &|p| informativeness(p, metric)),
    ];
    let ranking = if single[0] <= single[1] {
        vec![Modality::Fd, Modality::Field]
    } else {
        vec![Modality::Field, Modality::Fd]
    };
    Ok(OrderComparison {
        repeats: n,
        widths,
        width_ratios,
        map_shifts,
        metric,
        single_modality: single,
        ranking,
    })
}

/// Marginal and pairwise histograms over the parameter box.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerData {
    pub bins: usize,
    /// `(parameter, bin, lower edge, upper edge, count)`.
    pub marginals: Vec<(usize, usize, f64, f64, usize)>,
    /// `(parameter i, parameter j, bin i, bin j, count)` for `i < j`.
    pub pairs: Vec<(usize, usize, usize, usize, usize)>,
}

pub fn corner_data(samples: &[[f64; 4]], param_box: &ParamBox, bins: usize) -> CornerData {
    let bin = |i: usize, v: f64| {
        let u = (v - param_box.lower[i]) / param_box.width(i);
        ((u * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    };
    let mut marginals = Vec::with_capacity(4 * bins);
    for i in 0..4 {
        let mut counts = vec![0usize; bins];
        samples.iter().for_each(|s| counts[bin(i, s[i])] += 1);
        for (b, c) in counts.into_iter().enumerate() {
            let lo = param_box.lower[i] + param_box.width(i) * b as f64 / bins as f64;
            let hi = param_box.lower[i] + param_box.width(i) * (b + 1) as f64 / bins as f64;
            marginals.push((i, b, lo, hi, c));
        }
    }
    let mut pairs = Vec::with_capacity(6 * bins * bins);
    for i in 0..4 {
        for j in i + 1..4 {
            let mut counts = vec![0usize; bins * bins];
            samples
                .iter()
                .for_each(|s| counts[bin(i, s[i]) * bins + bin(j, s[j])] += 1);
            for (k, c) in counts.into_iter().enumerate() {
                pairs.push((i, j, k / bins, k % bins, c));
            }
        }
    }
    CornerData { bins, marginals, pairs }
}
