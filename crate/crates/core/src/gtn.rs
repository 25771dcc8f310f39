//! GTN porous-plasticity material point.
//!
//! The point is driven along a proportional stress path: the stress tensor
//! keeps a fixed direction with triaxiality `T = σm/σeq`, so a single scalar
//! stress magnitude (`σeq`) and its work-conjugate strain describe the
//! loading. Plastic flow follows the normal to the GTN yield surface, split
//! into a deviatoric part `εq` and a dilatational part `εv`, and the matrix
//! equivalent plastic strain follows from plastic-work equivalence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest scalar strain increment accepted by [`integrate_point`].
pub const MAX_POINT_INCREMENT: f64 = 1e-4;

const ROOT_TOL: f64 = 1e-13;

/// The five GTN constants held fixed during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedGtnConstants {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub f0: f64,
    /// `S_N = sn_ratio · ε_N`.
    pub sn_ratio: f64,
}

impl Default for FixedGtnConstants {
    fn default() -> Self {
        Self {
            q1: 1.5,
            q2: 1.0,
            q3: 2.25,
            f0: 0.001,
            sn_ratio: 1.0 / 3.0,
        }
    }
}

impl FixedGtnConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.q1 > 0.0) {
            return Err(Error::Parameter(format!("q1 must be positive, got {}", self.q1)));
        }
        if (self.q3 - self.q1 * self.q1).abs() > 1e-12 * self.q3.max(1.0) {
            return Err(Error::Parameter(format!(
                "q3 must equal q1^2 ({} != {})",
                self.q3,
                self.q1 * self.q1
            )));
        }
        if !(0.0..1.0).contains(&self.f0) {
            return Err(Error::Parameter(format!("f0 must lie in [0, 1), got {}", self.f0)));
        }
        if !(self.sn_ratio > 0.0) {
            return Err(Error::Parameter("sn_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Effective void fraction at which the yield surface collapses.
    pub fn f_star_ultimate(&self) -> f64 {
        1.0 / self.q1
    }
}

/// The four calibrated damage parameters, in the order `[ε_N, f_N, f_c, f_f]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtnParams {
    pub eps_n: f64,
    pub f_n: f64,
    pub f_c: f64,
    pub f_f: f64,
}

impl GtnParams {
    pub const NAMES: [&'static str; 4] = ["eps_n", "f_n", "f_c", "f_f"];

    pub fn new(eps_n: f64, f_n: f64, f_c: f64, f_f: f64) -> Self {
        Self { eps_n, f_n, f_c, f_f }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::Dimension {
                expected: 4,
                actual: v.len(),
            });
        }
        Ok(Self::new(v[0], v[1], v[2], v[3]))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.eps_n, self.f_n, self.f_c, self.f_f]
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.to_array();
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Parameter(format!("all GTN parameters must be positive: {v:?}")));
        }
        if self.f_c >= self.f_f {
            return Err(Error::Parameter(format!(
                "f_c ({}) must be below f_f ({})",
                self.f_c, self.f_f
            )));
        }
        Ok(())
    }
}

/// Axis-aligned parameter box, one `[lo, hi]` pair per GTN parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamBox {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

impl Default for ParamBox {
    /// Literature ranges for aluminium alloys.
    fn default() -> Self {
        Self {
            lower: [0.1, 0.01, 0.01, 0.15],
            upper: [0.5, 0.05, 0.15, 0.35],
        }
    }
}

impl ParamBox {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if !(self.lower[i].is_finite() && self.upper[i].is_finite()) || self.lower[i] >= self.upper[i] {
                return Err(Error::Parameter(format!(
                    "degenerate box for {}: [{}, {}]",
                    GtnParams::NAMES[i],
                    self.lower[i],
                    self.upper[i]
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .enumerate()
            .all(|(i, &t)| t >= self.lower[i] && t <= self.upper[i])
    }

    /// Box membership plus the coalescence ordering `f_c < f_f`.
    pub fn admits(&self, theta: &[f64]) -> bool {
        self.contains(theta) && theta[2] < theta[3]
    }

    pub fn to_unit(&self, theta: &[f64]) -> [f64; 4] {
        let mut u = [0.0; 4];
        for i in 0..4 {
            u[i] = (theta[i] - self.lower[i]) / self.width(i);
        }
        u
    }

    pub fn from_unit(&self, u: &[f64]) -> [f64; 4] {
        let mut t = [0.0; 4];
        for i in 0..4 {
            t[i] = self.lower[i] + u[i] * self.width(i);
        }
        t
    }

    pub fn center(&self) -> [f64; 4] {
        self.from_unit(&[0.5; 4])
    }
}

/// Voce isotropic hardening of the matrix material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoceParams {
    pub sigma0: f64,
    pub q_sat: f64,
    pub b_rate: f64,
}

impl Default for VoceParams {
    fn default() -> Self {
        Self {
            sigma0: 165.0,
            q_sat: 136.0,
            b_rate: 9.8,
        }
    }
}

impl VoceParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma0 > 0.0 && self.q_sat >= 0.0 && self.b_rate > 0.0 {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid Voce parameters {self:?}")))
        }
    }

    pub fn saturation_stress(&self) -> f64 {
        self.sigma0 + self.q_sat
    }
}

/// `σ0 + Q(1 − exp(−b εp))`.
pub fn voce_flow_stress(voce: &VoceParams, eps_p: f64) -> Result<f64> {
    if !(eps_p >= 0.0) {
        return Err(Error::Domain(format!(
            "plastic strain must be non-negative, got {eps_p}"
        )));
    }
    Ok(voce_unchecked(voce, eps_p))
}

#[inline]
fn voce_unchecked(voce: &VoceParams, eps_p: f64) -> f64 {
    voce.sigma0 + voce.q_sat * (1.0 - (-voce.b_rate * eps_p).exp())
}

/// Piecewise-linear coalescence acceleration of the void fraction.
pub fn effective_void_fraction(consts: &FixedGtnConstants, params: &GtnParams, f: f64) -> Result<f64> {
    if params.f_c >= params.f_f {
        return Err(Error::Parameter(format!(
            "f_c ({}) must be below f_f ({})",
            params.f_c, params.f_f
        )));
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Domain(format!("void fraction must lie in [0, 1], got {f}")));
    }
    Ok(f_star_unchecked(consts, params, f))
}

#[inline]
fn f_star_unchecked(consts: &FixedGtnConstants, params: &GtnParams, f: f64) -> f64 {
    if f < params.f_c {
        f
    } else {
        params.f_c + (1.0 / consts.q1 - params.f_c) * (f - params.f_c) / (params.f_f - params.f_c)
    }
}

/// Yield function `Φ`; negative inside the elastic domain, zero on the surface.
pub fn gtn_yield(consts: &FixedGtnConstants, sigma_eq: f64, sigma_m: f64, sigma_y: f64, f_star: f64) -> Result<f64> {
    if !(sigma_y > 0.0) {
        return Err(Error::Domain(format!(
            "matrix yield stress must be positive, got {sigma_y}"
        )));
    }
    Ok(yield_unchecked(consts, sigma_eq, sigma_m, sigma_y, f_star))
}

#[inline]
fn yield_unchecked(consts: &FixedGtnConstants, sigma_eq: f64, sigma_m: f64, sigma_y: f64, f_star: f64) -> f64 {
    let r = sigma_eq / sigma_y;
    r * r + 2.0 * consts.q1 * f_star * (1.5 * consts.q2 * sigma_m / sigma_y).cosh()
        - (1.0 + consts.q3 * f_star * f_star)
}

/// Void growth by plastic dilatation, `(1 − f) tr(ε̇p)`.
pub fn void_growth_rate(f: f64, trace_eps_p_dot: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Domain(format!("void fraction must lie in [0, 1], got {f}")));
    }
    Ok((1.0 - f) * trace_eps_p_dot)
}

/// Strain-controlled nucleation with a normal distribution centred on `ε_N`.
pub fn void_nucleation_rate(consts: &FixedGtnConstants, params: &GtnParams, eps_p: f64, eps_p_dot: f64) -> Result<f64> {
    if !(eps_p >= 0.0 && eps_p_dot >= 0.0) {
        return Err(Error::Domain(format!(
            "nucleation needs non-negative strain and rate, got {eps_p}, {eps_p_dot}"
        )));
    }
    Ok(nucleation_intensity(consts, params, eps_p) * eps_p_dot)
}

#[inline]
fn nucleation_intensity(consts: &FixedGtnConstants, params: &GtnParams, eps_p: f64) -> f64 {
    let s_n = consts.sn_ratio * params.eps_n;
    let z = (eps_p - params.eps_n) / s_n;
    params.f_n / (s_n * (2.0 * std::f64::consts::PI).sqrt()) * (-0.5 * z * z).exp()
}

/// Matrix hardening, GTN constants and elastic modulus shared by all points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Material {
    pub consts: FixedGtnConstants,
    pub voce: VoceParams,
    /// Young's modulus in MPa.
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self {
            consts: FixedGtnConstants::default(),
            voce: VoceParams::default(),
            youngs_modulus: 70_000.0,
            poisson_ratio: 0.33,
        }
    }
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        self.consts.validate()?;
        self.voce.validate()?;
        if !(self.youngs_modulus > 0.0) || !(-1.0 < self.poisson_ratio && self.poisson_ratio < 0.5) {
            return Err(Error::Parameter("invalid elastic constants".into()));
        }
        Ok(())
    }
}

/// State of one integration point on a proportional stress path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialPointState {
    /// Matrix equivalent plastic strain.
    pub eps_p: f64,
    pub f: f64,
    pub f_star: f64,
    pub sigma_eq: f64,
    pub sigma_m: f64,
    pub failed: bool,
    /// Fixed stress triaxiality `σm/σeq` of the path (non-negative).
    pub triaxiality: f64,
    /// Accumulated work-conjugate scalar strain.
    pub strain: f64,
    /// Accumulated deviatoric plastic strain measure.
    pub eps_q: f64,
    /// Accumulated plastic volumetric strain `tr(εp)`.
    pub eps_v: f64,
}

impl MaterialPointState {
    pub fn virgin(consts: &FixedGtnConstants, params: &GtnParams, triaxiality: f64) -> Result<Self> {
        if !(triaxiality >= 0.0 && triaxiality.is_finite()) {
            return Err(Error::Domain(format!(
                "triaxiality must be non-negative, got {triaxiality}"
            )));
        }
        Ok(Self {
            eps_p: 0.0,
            f: consts.f0,
            f_star: effective_void_fraction(consts, params, consts.f0)?,
            sigma_eq: 0.0,
            sigma_m: 0.0,
            failed: false,
            triaxiality,
            strain: 0.0,
            eps_q: 0.0,
            eps_v: 0.0,
        })
    }

    /// Plastic part of the work-conjugate strain.
    pub fn plastic_strain(&self, youngs_modulus: f64) -> f64 {
        self.strain - self.sigma_eq / youngs_modulus
    }
}

/// Stress magnitude on the yield surface for the path triaxiality.
///
/// `Φ(0) = −(1 − q1 f*)² ≤ 0` and `Φ(σy) ≥ 0`, and `Φ` increases with the
/// magnitude when `T ≥ 0`, so the root is bracketed by `[0, σy]`.
pub fn yield_magnitude(consts: &FixedGtnConstants, triaxiality: f64, sigma_y: f64, f_star: f64) -> f64 {
    let phi = |s: f64| yield_unchecked(consts, s, triaxiality * s, sigma_y, f_star);
    let dphi = |s: f64| {
        let x = 1.5 * consts.q2 * triaxiality * s / sigma_y;
        2.0 * s / (sigma_y * sigma_y) + 2.0 * consts.q1 * f_star * x.sinh() * 1.5 * consts.q2 * triaxiality / sigma_y
    };
    let (mut lo, mut hi) = (0.0_f64, sigma_y);
    if phi(lo) >= 0.0 {
        return 0.0;
    }
    // Start from the von Mises estimate shrunk by porosity.
    let mut s = sigma_y * (1.0 - consts.q1 * f_star).max(0.0);
    for _ in 0..100 {
        let v = phi(s);
        if v.abs() <= ROOT_TOL {
            return s;
        }
        if v > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let d = dphi(s);
        let mut next = if d > 0.0 { s - v / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (hi - lo) <= 1e-15 * sigma_y {
            return next;
        }
        s = next;
    }
    s
}

/// Advance a point by one scalar strain increment (forward Euler).
///
/// The trial stress is returned radially to the yield surface at the current
/// `f*`, the plastic increment is split along the flow normal, internal
/// variables are updated explicitly, and the stress is finally placed on the
/// yield surface of the updated state.
pub fn integrate_point(
    state: &MaterialPointState,
    material: &Material,
    params: &GtnParams,
    strain_increment: f64,
) -> Result<MaterialPointState> {
    if !strain_increment.is_finite() || strain_increment.abs() > MAX_POINT_INCREMENT {
        return Err(Error::Stability {
            step: strain_increment,
            bound: MAX_POINT_INCREMENT,
        });
    }
    if state.failed {
        return Err(Error::Domain("material point has already failed".into()));
    }
    if strain_increment == 0.0 {
        return Ok(*state);
    }
    let consts = &material.consts;
    let e_mod = material.youngs_modulus;
    let t = state.triaxiality;

    let mut next = *state;
    next.strain += strain_increment;
    let trial = state.sigma_eq + e_mod * strain_increment;
    let sigma_y = voce_unchecked(&material.voce, state.eps_p);

    if trial <= 0.0 || yield_unchecked(consts, trial, t * trial, sigma_y, state.f_star) <= 0.0 {
        next.sigma_eq = trial.max(0.0);
        next.sigma_m = t * next.sigma_eq;
        return Ok(next);
    }

    let s_ret = yield_magnitude(consts, t, sigma_y, state.f_star);
    let d_plastic = (trial - s_ret) / e_mod;

    // Flow normal components: a = ∂Φ/∂σeq, b = ∂Φ/∂σm.
    let x = 1.5 * consts.q2 * t * s_ret / sigma_y;
    let a = 2.0 * s_ret / (sigma_y * sigma_y);
    let b = 2.0 * consts.q1 * state.f_star * x.sinh() * 1.5 * consts.q2 / sigma_y;
    let (d_q, d_v) = if a + t * b > 0.0 {
        let lambda = d_plastic / (a + t * b);
        (lambda * a, lambda * b)
    } else {
        (d_plastic, 0.0)
    };
    let d_eps_m = s_ret * d_plastic / ((1.0 - state.f).max(1e-12) * sigma_y);

    let growth = (1.0 - state.f) * d_v;
    let nucleation = nucleation_intensity(consts, params, state.eps_p) * d_eps_m;
    next.f = (state.f + growth + nucleation).clamp(0.0, 1.0);
    next.eps_p = state.eps_p + d_eps_m;
    next.eps_q = state.eps_q + d_q;
    next.eps_v = state.eps_v + d_v;
    if next.f >= params.f_f {
        next.failed = true;
        next.f_star = consts.f_star_ultimate();
    } else {
        next.f_star = f_star_unchecked(consts, params, next.f);
    }
    let sigma_y_new = voce_unchecked(&material.voce, next.eps_p);
    next.sigma_eq = yield_magnitude(consts, t, sigma_y_new, next.f_star);
    next.sigma_m = t * next.sigma_eq;

    let check = [next.eps_p, next.f, next.f_star, next.sigma_eq, next.eps_q, next.eps_v];
    if check.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite material state {next:?}")));
    }
    Ok(next)
}

/// Normalized yield function of a state, for consistency checks.
pub fn state_yield_value(state: &MaterialPointState, material: &Material) -> f64 {
    let sigma_y = voce_unchecked(&material.voce, state.eps_p);
    yield_unchecked(&material.consts, state.sigma_eq, state.sigma_m, sigma_y, state.f_star)
}
