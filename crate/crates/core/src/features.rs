//! Low-dimensional representations of curves and strain fields.
//!
//! Force-displacement curves are cut at the plasticity-onset point (where
//! the curve drops below 95 % of the initial elastic slope) and at failure,
//! mapped to `[0, 1]`, resampled at equally spaced stations, z-scored per
//! station and projected on a truncated PCA basis. Strain fields are
//! flattened over the active cells with per-component scaling, centred and
//! projected the same way.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::specimen::{interp, CurveSegment, StrainSnapshot};

/// Plasticity-onset slope ratio.
pub const YIELD_SLOPE_RATIO: f64 = 0.95;
/// Floor on per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-12;
/// Default number of resampling stations.
pub const DEFAULT_STATIONS: usize = 200;
/// Default strain-component scale factors `(ε11, ε12)`.
pub const DEFAULT_FIELD_SCALING: [f64; 2] = [1.87, 2.79];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldPoint {
    pub d_y: f64,
    pub f_y: f64,
    pub elastic_slope: f64,
}

/// Elastic window used to fit the initial slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldPointConfig {
    /// Points with `F ≤ window_force_fraction · Fmax` form the elastic window.
    pub window_force_fraction: f64,
    pub min_r_squared: f64,
}

impl Default for YieldPointConfig {
    fn default() -> Self {
        Self {
            window_force_fraction: 0.25,
            min_r_squared: 0.999,
        }
    }
}

pub fn locate_yield_point(curve: &CurveSegment) -> Result<YieldPoint> {
    locate_yield_point_with(curve, &YieldPointConfig::default())
}

pub fn locate_yield_point_with(curve: &CurveSegment, cfg: &YieldPointConfig) -> Result<YieldPoint> {
    curve.validate()?;
    if curve.len() < 10 {
        return Err(Error::Format(format!(
            "curve has {} points, need at least 10",
            curve.len()
        )));
    }
    let (d, f) = (&curve.displacements, &curve.forces);
    let f_max = curve.max_force();
    if !(f_max > 0.0) {
        return Err(Error::NoYield("curve carries no positive force".into()));
    }
    let limit = cfg.window_force_fraction * f_max;
    // Leading run of samples below the window limit.
    let end = f.iter().position(|&v| v > limit).unwrap_or(f.len());
    let window: Vec<usize> = (0..end).filter(|&i| d[i] > 0.0).collect();
    if window.len() < 3 {
        return Err(Error::Format(format!(
            "only {} samples in the elastic window",
            window.len()
        )));
    }
    // Least squares through the origin.
    let sxx: f64 = window.iter().map(|&i| d[i] * d[i]).sum();
    let sxy: f64 = window.iter().map(|&i| d[i] * f[i]).sum();
    let slope = sxy / sxx;
    let mean_f = window.iter().map(|&i| f[i]).sum::<f64>() / window.len() as f64;
    let ss_res: f64 = window.iter().map(|&i| (f[i] - slope * d[i]).powi(2)).sum();
    let ss_tot: f64 = window.iter().map(|&i| (f[i] - mean_f).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    if r2 < cfg.min_r_squared || !(slope > 0.0) {
        return Err(Error::Format(format!(
            "initial segment is not linear (R^2 = {r2:.6}, slope = {slope})"
        )));
    }
    let gap = |i: usize| f[i] - YIELD_SLOPE_RATIO * slope * d[i];
    let start = end.max(1);
    for i in start..f.len() {
        if gap(i) < 0.0 {
            let (g0, g1) = (gap(i - 1), gap(i));
            let t = if g0 > g1 { g0 / (g0 - g1) } else { 1.0 };
            let d_y = d[i - 1] + t.clamp(0.0, 1.0) * (d[i] - d[i - 1]);
            return Ok(YieldPoint {
                d_y,
                f_y: YIELD_SLOPE_RATIO * slope * d_y,
                elastic_slope: slope,
            });
        }
    }
    Err(Error::NoYield(
        "curve never falls below the reduced elastic line".into(),
    ))
}

/// Forces at `n` equally spaced stations between `d_Y` and `d_f`.
pub fn resample_segment(curve: &CurveSegment, yp: &YieldPoint, n: usize) -> Result<Vec<f64>> {
    let d_f = curve.failure_displacement;
    if !(yp.d_y < d_f) {
        return Err(Error::Segmentation(format!(
            "yield displacement {} is not below failure displacement {}",
            yp.d_y, d_f
        )));
    }
    if n < 2 {
        return Err(Error::Segmentation("need at least two stations".into()));
    }
    Ok((0..n)
        .map(|j| {
            let t = j as f64 / (n - 1) as f64;
            let d = if j + 1 == n { d_f } else { yp.d_y + t * (d_f - yp.d_y) };
            interp(&curve.displacements, &curve.forces, d)
        })
        .collect())
}

/// Displacements of the resampling stations.
pub fn station_displacements(d_y: f64, d_f: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| d_y + (d_f - d_y) * j as f64 / (n - 1) as f64).collect()
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`]; all ones
    /// for a centring-only map.
    pub std: Vec<f64>,
    /// Columns whose spread fell below the floor.
    pub floored: Vec<usize>,
}

impl Standardizer {
    pub fn fit(data: &DMatrix<f64>) -> Result<Self> {
        Self::fit_inner(data, true, STD_FLOOR)
    }

    /// Mean removal only (unit scale), for data whose features already
    /// share a common unit.
    pub fn fit_centering(data: &DMatrix<f64>) -> Result<Self> {
        Self::fit_inner(data, false, STD_FLOOR)
    }

    /// Z-scoring with every standard deviation raised to at least `floor`,
    /// so features whose spread is below the measurement noise are not
    /// amplified.
    pub fn fit_with_floor(data: &DMatrix<f64>, floor: f64) -> Result<Self> {
        if !(floor >= STD_FLOOR && floor.is_finite()) {
            return Err(Error::Parameter(format!(
                "standardization floor {floor} below {STD_FLOOR}"
            )));
        }
        Self::fit_inner(data, true, floor)
    }

    fn fit_inner(data: &DMatrix<f64>, scale: bool, floor: f64) -> Result<Self> {
        let (rows, cols) = data.shape();
        if rows < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: rows });
        }
        ensure_finite(data.as_slice(), "standardizer input")?;
        let mut mean = vec![0.0; cols];
        let mut std = vec![1.0; cols];
        let mut floored = Vec::new();
        for (j, col) in data.column_iter().enumerate() {
            let m = col.sum() / rows as f64;
            mean[j] = m;
            if scale {
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rows as f64;
                let s = var.sqrt();
                if s < floor {
                    floored.push(j);
                    std[j] = floor;
                } else {
                    std[j] = s;
                }
            }
        }
        if !floored.is_empty() {
            log::info!(
                "{} feature(s) floored at {floor:e} during standardization",
                floored.len()
            );
        }
        Ok(Self { mean, std, floored })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn invert_row(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(data.ncols())?;
        let mut out = data.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.std[j]);
        }
        Ok(out)
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(z.ncols())?;
        let mut out = z.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.std[j] + self.mean[j]);
        }
        Ok(out)
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: n,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "FD")]
    Fd,
    #[serde(rename = "FIELD")]
    Field,
}

impl Modality {
    pub fn tag(&self) -> &'static str {
        match self {
            Modality::Fd => "FD",
            Modality::Field => "FIELD",
        }
    }

    /// Score-table column header.
    pub fn score_names(&self, k: usize) -> Vec<String> {
        match self {
            Modality::Fd => (1..=k)
                .map(|i| format!("alpha{i}"))
                .chain(["d_f".to_string()])
                .collect(),
            Modality::Field => (1..=k).map(|i| format!("beta{i}")).collect(),
        }
    }
}

/// Truncated PCA basis together with the preprocessing that precedes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub modality: Modality,
    pub standardizer: Standardizer,
    /// Orthonormal principal directions, one per column (features × m).
    pub components: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Explained-variance ratio of every component found by the fit.
    pub explained_ratio: Vec<f64>,
    pub retained: usize,
    pub variance_threshold: f64,
    /// `(ε11, ε12)` scale factors for field bases.
    pub field_scaling: Option<[f64; 2]>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn retained_ratio(&self) -> f64 {
        self.explained_ratio[..self.retained].iter().sum()
    }

    /// Copy restricted to the retained components.
    pub fn truncated(&self) -> PcaBasis {
        let mut b = self.clone();
        b.components = self.components.columns(0, self.retained).into_owned();
        b.singular_values.truncate(self.retained);
        b
    }

    /// Copy keeping every component found by the fit.
    pub fn with_retained(&self, k: usize) -> Result<PcaBasis> {
        if k > self.components.ncols() {
            return Err(Error::Dimension {
                expected: self.components.ncols(),
                actual: k,
            });
        }
        let mut b = self.clone();
        b.retained = k;
        Ok(b)
    }

    /// Diagonal of the linear preprocessing map `A` from raw observation to
    /// the standardized feature vector.
    pub fn preprocess_diagonal(&self) -> Vec<f64> {
        let scale = self.feature_scale();
        scale.iter().zip(&self.standardizer.std).map(|(a, s)| a / s).collect()
    }

    fn feature_scale(&self) -> Vec<f64> {
        let p = self.dim();
        match self.field_scaling {
            Some([s11, s12]) => {
                let cells = p / 3;
                let mut v = vec![1.0; p];
                v[..cells].fill(s11);
                v[cells..2 * cells].fill(s12);
                v
            }
            None => vec![1.0; p],
        }
    }

    /// Scores of an already flattened (and, for fields, scaled) feature vector.
    pub fn project_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.standardizer.apply_row(x)?;
        let z = DVector::from_vec(z);
        let k = self.retained;
        Ok((0..k).map(|c| self.components.column(c).dot(&z)).collect())
    }

    /// Feature vector (in the basis input space) for a score vector.
    pub fn reconstruct_features(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() > self.components.ncols() {
            return Err(Error::Dimension {
                expected: self.components.ncols(),
                actual: scores.len(),
            });
        }
        let mut z = DVector::zeros(self.dim());
        for (c, s) in scores.iter().enumerate() {
            z.axpy(*s, &self.components.column(c), 1.0);
        }
        self.standardizer.invert_row(z.as_slice())
    }
}

/// Fit a PCA basis by SVD of an already standardized data matrix.
pub fn pca_fit(
    z: &DMatrix<f64>,
    standardizer: Standardizer,
    modality: Modality,
    variance_threshold: f64,
) -> Result<PcaBasis> {
    let (rows, cols) = z.shape();
    if rows < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: rows });
    }
    if cols != standardizer.dim() {
        return Err(Error::Dimension {
            expected: standardizer.dim(),
            actual: cols,
        });
    }
    ensure_finite(z.as_slice(), "PCA input")?;
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(Error::Parameter(format!(
            "variance threshold {variance_threshold} outside (0, 1]"
        )));
    }
    // Thin SVD of the (rows × cols) matrix; components are the right
    // singular vectors.
    let svd = z.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not return right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();

    let mut components = DMatrix::zeros(cols, order.len());
    let mut singular_values = Vec::with_capacity(order.len());
    let mut explained = Vec::with_capacity(order.len());
    for (c, &i) in order.iter().enumerate() {
        let mut v: DVector<f64> = v_t.row(i).transpose();
        // Largest-magnitude entry positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        components.set_column(c, &v);
        let s = svd.singular_values[i];
        singular_values.push(s);
        explained.push(if total > 0.0 { s * s / total } else { 0.0 });
    }

    let retained = if total <= 0.0 {
        log::warn!("PCA input has zero total variance; no components retained");
        0
    } else {
        let mut cum = 0.0;
        let mut k = explained.len();
        for (i, r) in explained.iter().enumerate() {
            cum += r;
            if cum >= variance_threshold - 1e-12 {
                k = i + 1;
                break;
            }
        }
        k
    };
    Ok(PcaBasis {
        modality,
        standardizer,
        components,
        singular_values,
        explained_ratio: explained,
        retained,
        variance_threshold,
        field_scaling: None,
    })
}

/// Z-scored PCA basis of resampled force vectors. Station standard
/// deviations are floored at `std_floor` (N), normally the force noise level.
pub fn fit_fd_basis(forces: &[&[f64]], variance_threshold: f64, std_floor: f64) -> Result<PcaBasis> {
    let p = forces.first().map_or(0, |f| f.len());
    if forces.iter().any(|f| f.len() != p) {
        return Err(Error::Alignment("resampled force vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(forces.len(), p, |i, j| forces[i][j]);
    let st = Standardizer::fit_with_floor(&x, std_floor)?;
    let z = st.apply(&x)?;
    pca_fit(&z, st, Modality::Fd, variance_threshold)
}

/// Centred PCA basis of scaled, flattened strain fields. Scale factors are
/// balanced on the given snapshots unless supplied.
pub fn fit_field_basis(
    snapshots: &[&StrainSnapshot],
    variance_threshold: f64,
    scaling: Option<[f64; 2]>,
) -> Result<PcaBasis> {
    check_alignment(snapshots)?;
    let [s11, s12] = match scaling {
        Some(s) => s,
        None => balance_field_scaling(snapshots)?,
    };
    let rows = snapshots
        .iter()
        .map(|s| flatten_field(s, s11, s12))
        .collect::<Result<Vec<_>>>()?;
    let p = rows.first().map_or(0, |r| r.len());
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    // Components share strain units after scaling, so only the mean is removed.
    let st = Standardizer::fit_centering(&x)?;
    let z = st.apply(&x)?;
    let mut basis = pca_fit(&z, st, Modality::Field, variance_threshold)?;
    basis.field_scaling = Some([s11, s12]);
    Ok(basis)
}

/// Observation in its raw measurement form.
#[derive(Debug, Clone, Copy)]
pub enum Observation<'a> {
    /// Resampled forces plus failure displacement.
    Fd {
        forces: &'a [f64],
        d_f: f64,
    },
    Field(&'a StrainSnapshot),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub modality: Modality,
    /// PC scores; FD vectors carry `d_f` (mm) as the final entry.
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn pca_project(basis: &PcaBasis, observation: Observation<'_>) -> Result<ScoreVector> {
    match (basis.modality, observation) {
        (Modality::Fd, Observation::Fd { forces, d_f }) => {
            let mut scores = basis.project_features(forces)?;
            scores.push(d_f);
            ensure_finite(&scores, "FD scores")?;
            Ok(ScoreVector {
                modality: Modality::Fd,
                scores,
            })
        }
        (Modality::Field, Observation::Field(snapshot)) => {
            let [s11, s12] = basis.field_scaling.unwrap_or(DEFAULT_FIELD_SCALING);
            let x = flatten_field(snapshot, s11, s12)?;
            let scores = basis.project_features(&x)?;
            ensure_finite(&scores, "field scores")?;
            Ok(ScoreVector {
                modality: Modality::Field,
                scores,
            })
        }
        (m, _) => Err(Error::Format(format!("observation does not match a {} basis", m.tag()))),
    }
}

/// Concatenate active-cell `[s11·ε11 …, s12·ε12 …, ε22 …]` in row-major cell order.
pub fn flatten_field(snapshot: &StrainSnapshot, scale_e11: f64, scale_e12: f64) -> Result<Vec<f64>> {
    snapshot.validate()?;
    let active: Vec<usize> = (0..snapshot.mask.len()).filter(|&k| snapshot.mask[k]).collect();
    let mut out = Vec::with_capacity(3 * active.len());
    out.extend(active.iter().map(|&k| scale_e11 * snapshot.e11[k]));
    out.extend(active.iter().map(|&k| scale_e12 * snapshot.e12[k]));
    out.extend(active.iter().map(|&k| snapshot.e22[k]));
    Ok(out)
}

/// Inverse of [`flatten_field`] onto the grid of `like`.
pub fn unflatten_field(x: &[f64], like: &StrainSnapshot, scale_e11: f64, scale_e12: f64) -> Result<StrainSnapshot> {
    let active: Vec<usize> = (0..like.mask.len()).filter(|&k| like.mask[k]).collect();
    let cells = active.len();
    if x.len() != 3 * cells {
        return Err(Error::Dimension {
            expected: 3 * cells,
            actual: x.len(),
        });
    }
    let mut out = like.clone();
    out.e11.fill(0.0);
    out.e12.fill(0.0);
    out.e22.fill(0.0);
    for (i, &k) in active.iter().enumerate() {
        out.e11[k] = x[i] / scale_e11;
        out.e12[k] = x[cells + i] / scale_e12;
        out.e22[k] = x[2 * cells + i];
    }
    Ok(out)
}

/// Checks that every snapshot shares the grid and mask of the first.
pub fn check_alignment(snapshots: &[&StrainSnapshot]) -> Result<()> {
    let Some(first) = snapshots.first() else {
        return Ok(());
    };
    for (i, s) in snapshots.iter().enumerate().skip(1) {
        if s.nx != first.nx || s.ny != first.ny || s.mask != first.mask {
            return Err(Error::Alignment(format!(
                "snapshot {i} does not share the reference mask"
            )));
        }
    }
    Ok(())
}

/// Component scale factors that equalize the total variance of
/// `s11·ε11` and `s12·ε12` with that of `ε22` over a dataset.
pub fn balance_field_scaling(snapshots: &[&StrainSnapshot]) -> Result<[f64; 2]> {
    if snapshots.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: snapshots.len(),
        });
    }
    check_alignment(snapshots)?;
    let total_var = |get: fn(&StrainSnapshot) -> &Vec<f64>| {
        let first = snapshots[0];
        let n = snapshots.len() as f64;
        let mut total = 0.0;
        for k in (0..first.mask.len()).filter(|&k| first.mask[k]) {
            let mean = snapshots.iter().map(|s| get(s)[k]).sum::<f64>() / n;
            total += snapshots.iter().map(|s| (get(s)[k] - mean).powi(2)).sum::<f64>() / n;
        }
        total
    };
    let v11 = total_var(|s| &s.e11);
    let v12 = total_var(|s| &s.e12);
    let v22 = total_var(|s| &s.e22);
    if !(v11 > 0.0 && v12 > 0.0 && v22 > 0.0) {
        return Err(Error::Numeric("a strain component has zero variance".into()));
    }
    Ok([(v22 / v11).sqrt(), (v22 / v12).sqrt()])
}

/// `100 · mean|F − F̂| / F_average`.
pub fn curve_nmae(truth: &[f64], pred: &[f64], f_average: f64) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if truth.is_empty() || !(f_average > 0.0) {
        return Err(Error::Domain("NMAE needs data and a positive reference force".into()));
    }
    let mae = truth.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64;
    Ok(100.0 * mae / f_average)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrainComponent {
    E11,
    E12,
    E22,
}

impl StrainComponent {
    pub const ALL: [StrainComponent; 3] = [StrainComponent::E11, StrainComponent::E12, StrainComponent::E22];

    pub fn name(&self) -> &'static str {
        match self {
            StrainComponent::E11 => "e11",
            StrainComponent::E12 => "e12",
            StrainComponent::E22 => "e22",
        }
    }

    pub fn values<'a>(&self, s: &'a StrainSnapshot) -> &'a [f64] {
        match self {
            StrainComponent::E11 => &s.e11,
            StrainComponent::E12 => &s.e12,
            StrainComponent::E22 => &s.e22,
        }
    }
}

/// Mean absolute magnitude of a component over the active cells of a dataset.
pub fn field_reference(snapshots: &[&StrainSnapshot], component: StrainComponent) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in snapshots {
        for (k, v) in component.values(s).iter().enumerate() {
            if s.mask[k] {
                sum += v.abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-component spatial MAE normalized by `eps_ref`, in percent.
pub fn field_nmae(
    truth: &StrainSnapshot,
    pred: &StrainSnapshot,
    component: StrainComponent,
    eps_ref: f64,
) -> Result<f64> {
    check_alignment(&[truth, pred])?;
    if !(eps_ref > 0.0) {
        return Err(Error::Domain("reference strain must be positive".into()));
    }
    let (a, b) = (component.values(truth), component.values(pred));
    let (mut sum, mut n) = (0.0, 0usize);
    for k in 0..truth.mask.len() {
        if truth.mask[k] {
            sum += (a[k] - b[k]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("snapshot has no active cells".into()));
    }
    Ok(100.0 * sum / n as f64 / eps_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bilinear(k: f64, d_end: f64, n: usize) -> CurveSegment {
        let d: Vec<f64> = (0..n).map(|i| d_end * i as f64 / (n - 1) as f64).collect();
        let f = d
            .iter()
            .map(|&x| if x <= 1.0 { k * x } else { k + 0.1 * k * (x - 1.0) })
            .collect();
        CurveSegment::new(d, f).unwrap()
    }

    #[test]
    fn linear_curve_has_no_yield() {
        let d: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let f = d.iter().map(|x| 3.0 * x).collect();
        let c = CurveSegment::new(d, f).unwrap();
        assert!(matches!(locate_yield_point(&c), Err(Error::NoYield(_))));
    }

    #[test]
    fn bilinear_yield_point_matches_closed_form() {
        // 0.95 k d = k + 0.1 k (d - 1)  =>  d = 0.9 / 0.85
        let c = bilinear(1000.0, 5.0, 5001);
        let yp = locate_yield_point(&c).unwrap();
        assert_relative_eq!(yp.elastic_slope, 1000.0, epsilon = 1e-9);
        assert_relative_eq!(yp.d_y, 0.9 / 0.85, epsilon = 1e-9);
        assert!(yp.f_y <= 0.95 * yp.elastic_slope * yp.d_y + 1e-9);
    }

    #[test]
    fn force_scaling_leaves_yield_displacement() {
        let c = bilinear(1000.0, 5.0, 777);
        let mut c2 = c.clone();
        c2.forces.iter_mut().for_each(|f| *f *= 2.0);
        let (a, b) = (locate_yield_point(&c).unwrap(), locate_yield_point(&c2).unwrap());
        assert_relative_eq!(a.d_y, b.d_y, epsilon = 1e-12);
    }

    #[test]
    fn non_monotone_displacement_is_a_format_error() {
        let c = CurveSegment {
            displacements: vec![0.0, 0.2, 0.1, 0.3],
            forces: vec![0.0, 1.0, 2.0, 3.0],
            failure_displacement: 0.3,
        };
        assert!(matches!(locate_yield_point(&c), Err(Error::Format(_))));
    }

    #[test]
    fn resampling_endpoints_and_ramps() {
        let d: Vec<f64> = (0..101).map(|i| i as f64 * 0.05).collect();
        let f: Vec<f64> = d.iter().map(|x| 100.0 + 20.0 * x).collect();
        let c = CurveSegment::new(d, f).unwrap();
        let yp = YieldPoint {
            d_y: 1.0,
            f_y: 0.0,
            elastic_slope: 1.0,
        };
        let v = resample_segment(&c, &yp, 200).unwrap();
        assert_relative_eq!(v[0], c.force_at(1.0), epsilon = 1e-12);
        assert_relative_eq!(v[199], c.force_at(5.0), epsilon = 1e-12);
        let step = v[1] - v[0];
        for w in v.windows(2) {
            assert_relative_eq!(w[1] - w[0], step, epsilon = 1e-9);
        }
        let bad = YieldPoint {
            d_y: 6.0,
            f_y: 0.0,
            elastic_slope: 1.0,
        };
        assert!(matches!(resample_segment(&c, &bad, 200), Err(Error::Segmentation(_))));
    }

    /// Max |interpolated − simulated| / Fmax over simulator samples with `d >= from`.
    fn resampling_error(curve: &CurveSegment, yp: &YieldPoint, n: usize, from: f64) -> f64 {
        let v = resample_segment(curve, yp, n).unwrap();
        let st = station_displacements(yp.d_y, curve.failure_displacement, n);
        curve
            .displacements
            .iter()
            .zip(&curve.forces)
            .filter(|(d, _)| **d >= from.max(yp.d_y))
            .map(|(d, f)| (crate::specimen::interp(&st, &v, *d) - f).abs())
            .fold(0.0, f64::max)
            / curve.max_force()
    }

    #[test]
    fn resampling_reconstructs_simulated_curves() {
        use crate::gtn::GtnParams;
        use crate::specimen::{simulate_specimen, LoadingProgram, SpecimenModel};
        for t in [
            [0.3, 0.03, 0.08, 0.25],
            [0.1, 0.01, 0.01, 0.15],
            [0.5, 0.05, 0.15, 0.35],
        ] {
            let r = simulate_specimen(
                &GtnParams::from_array(t),
                &SpecimenModel::default(),
                &LoadingProgram::default(),
            )
            .unwrap();
            let yp = locate_yield_point(&r.curve).unwrap();
            // The elastic-plastic knee is narrower than the station spacing;
            // past it the interpolation error is far below 0.2% of Fmax.
            assert!(resampling_error(&r.curve, &yp, 200, 1.0) < 2e-3);
            let errs: Vec<f64> = [200, 400, 800, 1600, 3200]
                .iter()
                .map(|&n| resampling_error(&r.curve, &yp, n, 0.0))
                .collect();
            assert!(errs.windows(2).all(|w| w[1] < w[0]), "{t:?}: {errs:?}");
        }
    }

    #[test]
    fn standardizer_conventions() {
        let m = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let s = Standardizer::fit(&m).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
        assert_eq!(s.apply(&m).unwrap().as_slice(), &[-1.0, 1.0]);

        let c = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 4.0]);
        let s = Standardizer::fit(&c).unwrap();
        assert_eq!(s.floored, vec![0]);
        let z = s.apply(&c).unwrap();
        assert!(z.column(0).iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = DMatrix::from_fn(20, 7, |_, _| rng.gen_range(-50.0..50.0));
        let s = Standardizer::fit(&r).unwrap();
        let back = s.invert(&s.apply(&r).unwrap()).unwrap();
        assert!((back - &r).abs().max() < 1e-10);
    }

    #[test]
    fn pca_of_rank_one_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<f64> = (0..50)
            .flat_map(|_| {
                let t: f64 = rng.gen_range(-1.0..1.0);
                [t + rng.gen_range(-1e-6..1e-6), 2.0 * t + rng.gen_range(-1e-6..1e-6)]
            })
            .collect();
        let x = DMatrix::from_row_slice(50, 2, &rows);
        let st = Standardizer::fit_centering(&x).unwrap();
        let z = st.apply(&x).unwrap();
        let b = pca_fit(&z, st, Modality::Fd, 0.99).unwrap();
        assert_eq!(b.retained, 1);
        let inv = 1.0 / 5f64.sqrt();
        assert_relative_eq!(b.components[(0, 0)], inv, epsilon = 1e-5);
        assert_relative_eq!(b.components[(1, 0)], 2.0 * inv, epsilon = 1e-5);
    }

    #[test]
    fn pca_degenerate_and_full_threshold() {
        let x = DMatrix::from_element(5, 3, 2.5);
        let st = Standardizer::fit(&x).unwrap();
        let b = pca_fit(&st.apply(&x).unwrap(), st, Modality::Fd, 0.99).unwrap();
        assert_eq!(b.retained, 0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(6, 10, |_, _| rng.gen::<f64>());
        let st = Standardizer::fit(&x).unwrap();
        let b = pca_fit(&st.apply(&x).unwrap(), st, Modality::Fd, 1.0).unwrap();
        assert_eq!(b.retained, 5);
        let gram = b.components.transpose() * &b.components;
        assert!((gram - DMatrix::identity(6, 6)).norm() < 1e-10);
        assert_relative_eq!(b.explained_ratio.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn projection_centres_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(12, 8, |_, _| rng.gen_range(0.0..10.0));
        let st = Standardizer::fit(&x).unwrap();
        let b = pca_fit(&st.apply(&x).unwrap(), st.clone(), Modality::Fd, 1.0).unwrap();
        let full = b.with_retained(b.components.ncols()).unwrap();
        let mean = st.mean.clone();
        let s = pca_project(
            &full,
            Observation::Fd {
                forces: &mean,
                d_f: 4.0,
            },
        )
        .unwrap();
        assert!(s.scores[..s.len() - 1].iter().all(|v| v.abs() < 1e-10));
        assert_eq!(*s.scores.last().unwrap(), 4.0);
        let row: Vec<f64> = x.row(3).iter().copied().collect();
        let sc = full.project_features(&row).unwrap();
        let back = full.reconstruct_features(&sc).unwrap();
        for (a, b) in row.iter().zip(&back) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(matches!(full.project_features(&row[..5]), Err(Error::Dimension { .. })));
    }

    fn tiny_snapshot(val: [f64; 3]) -> StrainSnapshot {
        let n = 6;
        StrainSnapshot {
            nx: 3,
            ny: 2,
            x: vec![0.0; n],
            y: vec![0.0; n],
            mask: vec![true, true, false, true, true, true],
            e11: vec![val[0]; n],
            e12: vec![val[1]; n],
            e22: vec![val[2]; n],
            capture_ratio: 0.98,
        }
    }

    #[test]
    fn field_flattening() {
        let z = flatten_field(&tiny_snapshot([0.0; 3]), 1.87, 2.79).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let s = tiny_snapshot([0.0, 1.0, 0.0]);
        let v = flatten_field(&s, 1.87, 2.79).unwrap();
        assert_eq!(v.len(), 15);
        assert!(v[5..10].iter().all(|&x| x == 2.79));
        let back = unflatten_field(&v, &s, 1.87, 2.79).unwrap();
        assert_eq!(back.e12[0], 1.0);
        assert_eq!(back.e12[2], 0.0);

        let mut other = tiny_snapshot([0.0; 3]);
        other.mask[0] = false;
        assert!(matches!(check_alignment(&[&s, &other]), Err(Error::Alignment(_))));
    }

    #[test]
    fn nmae_closed_forms() {
        let t = vec![10.0, 20.0, 30.0];
        assert_eq!(curve_nmae(&t, &t, 20.0).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        assert_relative_eq!(curve_nmae(&t, &p, 20.0).unwrap(), 2.5, epsilon = 1e-12);
        assert!(curve_nmae(&t, &p[..2], 20.0).is_err());

        let a = tiny_snapshot([0.01, 0.02, 0.03]);
        let mut b = a.clone();
        assert_eq!(field_nmae(&a, &b, StrainComponent::E22, 0.03).unwrap(), 0.0);
        b.e22[4] += 0.005;
        // 100 * δ / (P * eps_ref) with P = 5 active cells
        assert_relative_eq!(
            field_nmae(&a, &b, StrainComponent::E22, 0.03).unwrap(),
            100.0 * 0.005 / (5.0 * 0.03),
            epsilon = 1e-10
        );
    }
}
