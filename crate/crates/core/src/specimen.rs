//! Reduced-order simulator for the holed tensile specimen.
//!
//! The gauge region is covered by a regular grid of independent GTN material
//! points; cells whose centre falls inside the hole are masked out. Each cell
//! follows a proportional stress path whose direction, triaxiality and
//! equivalent concentration factor `c` come from the elastic plane-stress
//! solution for a circular hole under remote uniaxial tension. The cell's
//! work-conjugate strain advances as
//!
//! ```text
//! de = c · (1 + κ f*) · dε_nom
//! ```
//!
//! so with `u = c ε_nom` every cell of a given triaxiality follows the same
//! trajectory `state(u)`. The simulator integrates one trajectory per
//! triaxiality node with [`integrate_point`] and evaluates cells by linear
//! interpolation in `(T, u)`. The force is the net-section mean axial stress
//! times the net area; the run stops when the first cell reaches `f_f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtn::{integrate_point, GtnParams, Material, MaterialPointState, MAX_POINT_INCREMENT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecimenGeometry {
    /// mm
    pub gauge_length: f64,
    /// mm
    pub width: f64,
    /// mm
    pub thickness: f64,
    /// mm
    pub hole_radius: f64,
}

impl Default for SpecimenGeometry {
    fn default() -> Self {
        Self {
            gauge_length: 50.0,
            width: 12.5,
            thickness: 3.5,
            hole_radius: 1.0,
        }
    }
}

impl SpecimenGeometry {
    pub fn net_area(&self) -> f64 {
        (self.width - 2.0 * self.hole_radius) * self.thickness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadingProgram {
    /// mm/s
    pub displacement_rate: f64,
    /// mm
    pub max_displacement: f64,
    /// s
    pub time_step: f64,
    pub geometry: SpecimenGeometry,
}

impl Default for LoadingProgram {
    fn default() -> Self {
        Self {
            displacement_rate: 0.02,
            max_displacement: 100.0,
            time_step: 0.2,
            geometry: SpecimenGeometry::default(),
        }
    }
}

impl LoadingProgram {
    pub fn displacement_step(&self) -> f64 {
        self.displacement_rate * self.time_step
    }

    pub fn nominal_strain_step(&self) -> f64 {
        self.displacement_step() / self.geometry.gauge_length
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let all = [
            self.displacement_rate,
            self.max_displacement,
            self.time_step,
            g.gauge_length,
            g.width,
            g.thickness,
            g.hole_radius,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Parameter("loading program entries must be positive".into()));
        }
        if 2.0 * g.hole_radius >= g.width {
            return Err(Error::Parameter("hole wider than the specimen".into()));
        }
        let step = self.nominal_strain_step();
        if step >= MAX_POINT_INCREMENT {
            return Err(Error::Stability {
                step,
                bound: MAX_POINT_INCREMENT,
            });
        }
        Ok(())
    }
}

/// Grid and model settings of the reduced-order simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecimenModel {
    pub material: Material,
    /// Cells across the width.
    pub nx: usize,
    /// Cells along the loading direction.
    pub ny: usize,
    /// Height of the gridded window along the loading axis (mm), centred on the hole.
    pub window_height: f64,
    /// Damage feedback gain on local strain.
    pub kappa: f64,
    /// Post-peak force ratio at which the strain snapshot is taken.
    pub capture_ratio: f64,
    /// Triaxiality nodes on each side of uniaxial tension (T = 1/3).
    pub triaxiality_nodes: usize,
}

impl Default for SpecimenModel {
    fn default() -> Self {
        Self {
            material: Material::default(),
            nx: 36,
            ny: 72,
            window_height: 25.0,
            kappa: 2.0,
            capture_ratio: 0.98,
            triaxiality_nodes: 4,
        }
    }
}

impl SpecimenModel {
    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        if self.nx < 4 || self.ny < 2 || !(self.window_height > 0.0) {
            return Err(Error::Parameter("grid too small".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Parameter("feedback gain must be non-negative".into()));
        }
        if !(self.capture_ratio > 0.0 && self.capture_ratio < 1.0) {
            return Err(Error::Parameter("capture ratio must lie in (0, 1)".into()));
        }
        if self.triaxiality_nodes == 0 {
            return Err(Error::Parameter("need at least one triaxiality node per side".into()));
        }
        Ok(())
    }
}

/// Force-displacement record up to the first cell failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSegment {
    pub displacements: Vec<f64>,
    pub forces: Vec<f64>,
    pub failure_displacement: f64,
}

impl CurveSegment {
    pub fn new(displacements: Vec<f64>, forces: Vec<f64>) -> Result<Self> {
        let curve = Self {
            failure_displacement: displacements.last().copied().unwrap_or(0.0),
            displacements,
            forces,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.displacements.len() != self.forces.len() {
            return Err(Error::Format(format!(
                "{} displacements but {} forces",
                self.displacements.len(),
                self.forces.len()
            )));
        }
        if self.displacements.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Format("displacements must be strictly increasing".into()));
        }
        if self.forces.iter().any(|f| !f.is_finite()) {
            return Err(Error::Format("non-finite force".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn max_force(&self) -> f64 {
        self.forces.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Linear interpolation of the force; clamps outside the record.
    pub fn force_at(&self, d: f64) -> f64 {
        interp(&self.displacements, &self.forces, d)
    }
}

/// Piecewise-linear interpolation on strictly increasing abscissae.
pub(crate) fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let j = xs.partition_point(|&v| v <= x).max(1) - 1;
    let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
    ys[j] + t * (ys[j + 1] - ys[j])
}

/// In-plane strain field on the specimen grid at the capture instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainSnapshot {
    pub nx: usize,
    pub ny: usize,
    /// Cell-centre coordinates (row-major, `j * nx + i`).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `true` for cells inside the material (outside the hole).
    pub mask: Vec<bool>,
    pub e11: Vec<f64>,
    pub e12: Vec<f64>,
    pub e22: Vec<f64>,
    pub capture_ratio: f64,
}

impl StrainSnapshot {
    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nx * self.ny;
        for (name, len) in [
            ("x", self.x.len()),
            ("y", self.y.len()),
            ("mask", self.mask.len()),
            ("e11", self.e11.len()),
            ("e12", self.e12.len()),
            ("e22", self.e22.len()),
        ] {
            if len != n {
                return Err(Error::Format(format!("{name} has {len} entries, grid has {n}")));
            }
        }
        for k in 0..n {
            if self.mask[k] && !(self.e11[k].is_finite() && self.e12[k].is_finite() && self.e22[k].is_finite()) {
                return Err(Error::Numeric(format!("non-finite strain in cell {k}")));
            }
        }
        Ok(())
    }
}

/// Axial stress and void fraction per cell at the capture instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateField {
    pub nx: usize,
    pub ny: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
    /// MPa
    pub sigma22: Vec<f64>,
    pub void_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub params: GtnParams,
    pub failure_displacement: f64,
    pub max_force: f64,
    pub peak_displacement: f64,
    pub capture_ratio: f64,
    pub capture_displacement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenRun {
    pub curve: CurveSegment,
    pub snapshot: StrainSnapshot,
    pub state: StateField,
    pub summary: RunSummary,
}

/// Per-cell elastic template for unit remote stress.
#[derive(Debug, Clone)]
pub struct HoleTemplate {
    pub nx: usize,
    pub ny: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
    /// Equivalent-stress concentration `σeq / σ∞`.
    pub concentration: Vec<f64>,
    /// Material-path triaxiality, clamped to `[0, ∞)`.
    pub triaxiality: Vec<f64>,
    /// Unit-equivalent stress direction `(n11, n22, n12)`.
    pub direction: Vec<[f64; 3]>,
    /// Cells of the net section through the hole centre.
    pub net_section: Vec<usize>,
}

/// Plane-stress field around a circular hole of radius `r0` under unit
/// remote tension along `y`; returns `(σ11, σ22, σ12)` at `(x, y)`.
pub fn hole_stress(x: f64, y: f64, r0: f64) -> [f64; 3] {
    let (ax, ay) = (x.abs(), y.abs());
    let r = ax.hypot(ay);
    let a2 = (r0 / r).powi(2);
    let a4 = a2 * a2;
    // Polar angle measured from the loading axis.
    let (sin_p, cos_p) = (ax / r, ay / r);
    let cos2 = cos_p * cos_p - sin_p * sin_p;
    let sin2 = 2.0 * sin_p * cos_p;
    let s_rr = 0.5 * (1.0 - a2) + 0.5 * (1.0 - 4.0 * a2 + 3.0 * a4) * cos2;
    let s_tt = 0.5 * (1.0 + a2) - 0.5 * (1.0 + 3.0 * a4) * cos2;
    let s_rt = -0.5 * (1.0 + 2.0 * a2 - 3.0 * a4) * sin2;
    // e_r = (sin, cos), e_t = (cos, -sin) in (x, y).
    let s11 = s_rr * sin_p * sin_p + s_tt * cos_p * cos_p + 2.0 * s_rt * sin_p * cos_p;
    let s22 = s_rr * cos_p * cos_p + s_tt * sin_p * sin_p - 2.0 * s_rt * sin_p * cos_p;
    let s12 = (s_rr - s_tt) * sin_p * cos_p + s_rt * (cos_p * cos_p - sin_p * sin_p);
    // Quadrant sign of the shear keeps the field exactly mirror-symmetric.
    let sign = if (x < 0.0) != (y < 0.0) { -1.0 } else { 1.0 };
    [s11, s22, sign * s12]
}

impl HoleTemplate {
    pub fn new(model: &SpecimenModel, geometry: &SpecimenGeometry) -> Self {
        let (nx, ny) = (model.nx, model.ny);
        let dx = geometry.width / nx as f64;
        let dy = model.window_height / ny as f64;
        let n = nx * ny;
        let mut t = HoleTemplate {
            nx,
            ny,
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            concentration: Vec::with_capacity(n),
            triaxiality: Vec::with_capacity(n),
            direction: Vec::with_capacity(n),
            net_section: Vec::new(),
        };
        for j in 0..ny {
            let y = -0.5 * model.window_height + (j as f64 + 0.5) * dy;
            for i in 0..nx {
                let x = -0.5 * geometry.width + (i as f64 + 0.5) * dx;
                let active = x.hypot(y) >= geometry.hole_radius;
                t.x.push(x);
                t.y.push(y);
                t.mask.push(active);
                if active {
                    let [s11, s22, s12] = hole_stress(x, y, geometry.hole_radius);
                    let seq = (s11 * s11 - s11 * s22 + s22 * s22 + 3.0 * s12 * s12).sqrt();
                    t.concentration.push(seq);
                    t.triaxiality.push(((s11 + s22) / (3.0 * seq)).max(0.0));
                    t.direction.push([s11 / seq, s22 / seq, s12 / seq]);
                } else {
                    t.concentration.push(0.0);
                    t.triaxiality.push(0.0);
                    t.direction.push([0.0; 3]);
                }
            }
        }
        let rows: Vec<usize> = if ny % 2 == 0 {
            vec![ny / 2 - 1, ny / 2]
        } else {
            vec![ny / 2]
        };
        for j in rows {
            for i in 0..nx {
                let k = j * nx + i;
                if t.mask[k] {
                    t.net_section.push(k);
                }
            }
        }
        t
    }

    pub fn active_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.mask.len()).filter(move |&k| self.mask[k])
    }

    pub fn max_concentration(&self) -> f64 {
        self.concentration.iter().copied().fold(0.0, f64::max)
    }

    /// Cells not dominated in both concentration and triaxiality; the first
    /// cell to fail is always one of them.
    pub fn failure_candidates(&self) -> Vec<usize> {
        let active: Vec<usize> = self.active_cells().collect();
        active
            .iter()
            .copied()
            .filter(|&k| {
                !active.iter().any(|&o| {
                    o != k
                        && self.concentration[o] >= self.concentration[k]
                        && self.triaxiality[o] >= self.triaxiality[k]
                        && (self.concentration[o] > self.concentration[k] || self.triaxiality[o] > self.triaxiality[k])
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct TrajPoint {
    sigma: f64,
    f: f64,
    eps_q: f64,
    eps_v: f64,
}

impl TrajPoint {
    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        Self {
            sigma: a.sigma + t * (b.sigma - a.sigma),
            f: a.f + t * (b.f - a.f),
            eps_q: a.eps_q + t * (b.eps_q - a.eps_q),
            eps_v: a.eps_v + t * (b.eps_v - a.eps_v),
        }
    }
}

/// Material trajectory along `u` for one triaxiality.
struct NodeTrajectory {
    state: MaterialPointState,
    points: Vec<TrajPoint>,
}

struct TrajectoryTable<'a> {
    material: &'a Material,
    params: &'a GtnParams,
    kappa: f64,
    du: f64,
    nodes_t: Vec<f64>,
    nodes: Vec<NodeTrajectory>,
}

impl<'a> TrajectoryTable<'a> {
    fn new(material: &'a Material, params: &'a GtnParams, kappa: f64, du: f64, nodes_t: Vec<f64>) -> Result<Self> {
        let mut nodes = Vec::with_capacity(nodes_t.len());
        for &t in &nodes_t {
            let state = MaterialPointState::virgin(&material.consts, params, t)?;
            nodes.push(NodeTrajectory {
                state,
                points: vec![TrajPoint {
                    sigma: 0.0,
                    f: state.f,
                    eps_q: 0.0,
                    eps_v: 0.0,
                }],
            });
        }
        Ok(Self {
            material,
            params,
            kappa,
            du,
            nodes_t,
            nodes,
        })
    }

    /// Extend every node so that `u` can be interpolated.
    fn ensure(&mut self, u: f64) -> Result<()> {
        let needed = (u / self.du).floor() as usize + 2;
        for node in &mut self.nodes {
            while node.points.len() < needed {
                let mut s = node.state;
                if !s.failed {
                    let de = (1.0 + self.kappa * s.f_star) * self.du;
                    let n_sub = (de / MAX_POINT_INCREMENT * (1.0 + 1e-12)).ceil().max(1.0) as usize;
                    let step = de / n_sub as f64;
                    for _ in 0..n_sub {
                        s = integrate_point(&s, self.material, self.params, step)?;
                        if s.failed {
                            break;
                        }
                    }
                    node.state = s;
                }
                node.points.push(TrajPoint {
                    sigma: s.sigma_eq,
                    f: s.f,
                    eps_q: s.eps_q,
                    eps_v: s.eps_v,
                });
            }
        }
        Ok(())
    }

    fn node_at(&self, node: usize, u: f64) -> TrajPoint {
        let pts = &self.nodes[node].points;
        let x = u / self.du;
        let j = (x.floor() as usize).min(pts.len() - 2);
        TrajPoint::lerp(&pts[j], &pts[j + 1], x - j as f64)
    }

    fn at(&self, t: f64, u: f64) -> TrajPoint {
        let n = self.nodes_t.len();
        if n == 1 {
            return self.node_at(0, u);
        }
        let k = self.nodes_t.partition_point(|&v| v <= t).clamp(1, n - 1) - 1;
        let w = ((t - self.nodes_t[k]) / (self.nodes_t[k + 1] - self.nodes_t[k])).clamp(0.0, 1.0);
        TrajPoint::lerp(&self.node_at(k, u), &self.node_at(k + 1, u), w)
    }
}

fn triaxiality_nodes(template: &HoleTemplate, per_side: usize) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in template.active_cells() {
        lo = lo.min(template.triaxiality[k]);
        hi = hi.max(template.triaxiality[k]);
    }
    let third = 1.0 / 3.0;
    let mut nodes = Vec::new();
    if lo < third {
        for i in 0..per_side {
            nodes.push(lo + (third - lo) * i as f64 / per_side as f64);
        }
    }
    nodes.push(third);
    if hi > third {
        for i in 1..=per_side {
            nodes.push(third + (hi - third) * i as f64 / per_side as f64);
        }
    }
    nodes
}

/// Cell quantities evaluated from the trajectory table.
struct CellEval<'t, 'a> {
    template: &'t HoleTemplate,
    table: &'t TrajectoryTable<'a>,
    youngs: f64,
    poisson: f64,
}

impl CellEval<'_, '_> {
    fn point(&self, k: usize, eps_nom: f64) -> TrajPoint {
        self.table
            .at(self.template.triaxiality[k], self.template.concentration[k] * eps_nom)
    }

    fn axial_stress(&self, k: usize, eps_nom: f64) -> f64 {
        self.point(k, eps_nom).sigma * self.template.direction[k][1]
    }

    fn strain(&self, k: usize, eps_nom: f64) -> [f64; 3] {
        let p = self.point(k, eps_nom);
        let [n11, n22, n12] = self.template.direction[k];
        let se = p.sigma / self.youngs;
        let m = (n11 + n22) / 3.0;
        let e11 = se * (n11 - self.poisson * n22) + 1.5 * p.eps_q * (n11 - m) + p.eps_v / 3.0;
        let e22 = se * (n22 - self.poisson * n11) + 1.5 * p.eps_q * (n22 - m) + p.eps_v / 3.0;
        let e12 = se * (1.0 + self.poisson) * n12 + 1.5 * p.eps_q * n12;
        [e11, e12, e22]
    }

    fn net_force(&self, eps_nom: f64, net_area: f64) -> f64 {
        let cells = &self.template.net_section;
        // Fixed summation order keeps the force bit-reproducible.
        let sum: f64 = cells.iter().map(|&k| self.axial_stress(k, eps_nom)).sum();
        sum / cells.len() as f64 * net_area
    }
}

/// Run the reduced-order specimen to first cell failure.
pub fn simulate_specimen(params: &GtnParams, model: &SpecimenModel, program: &LoadingProgram) -> Result<SpecimenRun> {
    let template = HoleTemplate::new(model, &program.geometry);
    simulate_with_template(params, model, program, &template)
}

/// As [`simulate_specimen`], reusing a precomputed template.
pub fn simulate_with_template(
    params: &GtnParams,
    model: &SpecimenModel,
    program: &LoadingProgram,
    template: &HoleTemplate,
) -> Result<SpecimenRun> {
    params.validate()?;
    model.validate()?;
    program.validate()?;
    let material = &model.material;
    let d_step = program.displacement_step();
    let e_step = program.nominal_strain_step();
    let du = e_step.min(MAX_POINT_INCREMENT);
    let nodes = triaxiality_nodes(template, model.triaxiality_nodes);
    let mut table = TrajectoryTable::new(material, params, model.kappa, du, nodes)?;
    let candidates = template.failure_candidates();
    let c_max = template.max_concentration();
    let net_area = program.geometry.net_area();
    let max_steps = (program.max_displacement / d_step).floor() as usize;

    let mut displacements = vec![0.0];
    let mut forces = vec![0.0];
    let mut prev_fmax = 0.0;
    let mut failure: Option<(f64, f64)> = None;

    for step in 1..=max_steps {
        let eps = step as f64 * e_step;
        table.ensure(c_max * eps)?;
        let eval = CellEval {
            template,
            table: &table,
            youngs: material.youngs_modulus,
            poisson: material.poisson_ratio,
        };
        let force = eval.net_force(eps, net_area);
        let f_max = candidates
            .iter()
            .map(|&k| eval.point(k, eps).f)
            .fold(f64::NEG_INFINITY, f64::max);
        if f_max >= params.f_f {
            let t = ((params.f_f - prev_fmax) / (f_max - prev_fmax)).clamp(1e-9, 1.0);
            let d_prev = *displacements.last().unwrap_or(&0.0);
            let f_prev = *forces.last().unwrap_or(&0.0);
            let d_fail = d_prev + t * d_step;
            let force_fail = f_prev + t * (force - f_prev);
            failure = Some((d_fail, force_fail));
            break;
        }
        if !force.is_finite() {
            return Err(Error::Numeric(format!("non-finite force at step {step}")));
        }
        prev_fmax = f_max;
        displacements.push(step as f64 * d_step);
        forces.push(force);
    }
    let Some((d_fail, f_fail)) = failure else {
        return Err(Error::SimulationIncomplete(format!(
            "no cell failed before {} mm",
            program.max_displacement
        )));
    };
    displacements.push(d_fail);
    forces.push(f_fail);

    let (i_peak, f_peak) =
        forces.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, f)| if f > acc.1 { (i, f) } else { acc },
        );
    let target = model.capture_ratio * f_peak;
    let crossing = (i_peak + 1..forces.len()).find(|&i| forces[i] <= target);
    let Some(ic) = crossing else {
        return Err(Error::SimulationIncomplete(format!(
            "force never dropped to {:.3} of its peak before failure",
            model.capture_ratio
        )));
    };
    let t = (forces[ic - 1] - target) / (forces[ic - 1] - forces[ic]);
    let d_cap = displacements[ic - 1] + t * (displacements[ic] - displacements[ic - 1]);
    let eps_cap = d_cap / program.geometry.gauge_length;

    let eval = CellEval {
        template,
        table: &table,
        youngs: material.youngs_modulus,
        poisson: material.poisson_ratio,
    };
    let n = template.nx * template.ny;
    let (mut e11, mut e12, mut e22) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut s22, mut vvf) = (vec![0.0; n], vec![0.0; n]);
    for k in template.active_cells() {
        let [a, b, c] = eval.strain(k, eps_cap);
        e11[k] = a;
        e12[k] = b;
        e22[k] = c;
        let p = eval.point(k, eps_cap);
        s22[k] = p.sigma * template.direction[k][1];
        vvf[k] = p.f;
    }

    let curve = CurveSegment {
        displacements,
        forces,
        failure_displacement: d_fail,
    };
    let snapshot = StrainSnapshot {
        nx: template.nx,
        ny: template.ny,
        x: template.x.clone(),
        y: template.y.clone(),
        mask: template.mask.clone(),
        e11,
        e12,
        e22,
        capture_ratio: model.capture_ratio,
    };
    let state = StateField {
        nx: template.nx,
        ny: template.ny,
        x: template.x.clone(),
        y: template.y.clone(),
        mask: template.mask.clone(),
        sigma22: s22,
        void_fraction: vvf,
    };
    let summary = RunSummary {
        params: *params,
        failure_displacement: d_fail,
        max_force: f_peak,
        peak_displacement: curve.displacements[i_peak],
        capture_ratio: model.capture_ratio,
        capture_displacement: d_cap,
    };
    Ok(SpecimenRun {
        curve,
        snapshot,
        state,
        summary,
    })
}
