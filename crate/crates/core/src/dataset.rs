//! Simulating a design and turning the runs into training data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{locate_yield_point, resample_segment, YieldPoint};
use crate::gtn::GtnParams;
use crate::specimen::{
    simulate_with_template, CurveSegment, HoleTemplate, LoadingProgram, RunSummary, SpecimenModel, StrainSnapshot,
};

/// Largest tolerated fraction of excluded design rows.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SimulatedRow {
    /// Row of the design this run came from.
    pub index: usize,
    pub theta: [f64; 4],
    pub curve: CurveSegment,
    pub snapshot: StrainSnapshot,
    pub summary: RunSummary,
    pub yield_point: YieldPoint,
    /// Forces at the resampling stations between `d_Y` and `d_f`.
    pub forces: Vec<f64>,
}

impl SimulatedRow {
    pub fn failure_displacement(&self) -> f64 {
        self.curve.failure_displacement
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub index: usize,
    pub theta: [f64; 4],
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SimulatedSet {
    pub rows: Vec<SimulatedRow>,
    pub exclusions: Vec<Exclusion>,
}

/// Simulate one parameter vector and extract its curve features.
pub fn simulate_row(
    index: usize,
    theta: [f64; 4],
    model: &SpecimenModel,
    program: &LoadingProgram,
    template: &HoleTemplate,
    stations: usize,
) -> Result<SimulatedRow> {
    let run = simulate_with_template(&GtnParams::from_array(theta), model, program, template)?;
    let yield_point = locate_yield_point(&run.curve)?;
    let forces = resample_segment(&run.curve, &yield_point, stations)?;
    Ok(SimulatedRow {
        index,
        theta,
        curve: run.curve,
        snapshot: run.snapshot,
        summary: run.summary,
        yield_point,
        forces,
    })
}

/// Run every design row. Failed rows are excluded with their reason; more
/// than [`MAX_EXCLUDED_FRACTION`] exclusions is an error.
pub fn simulate_design(
    design: &[[f64; 4]],
    model: &SpecimenModel,
    program: &LoadingProgram,
    stations: usize,
) -> Result<SimulatedSet> {
    let template = HoleTemplate::new(model, &program.geometry);
    let results: Vec<_> = design
        .par_iter()
        .enumerate()
        .map(|(i, t)| simulate_row(i, *t, model, program, &template, stations))
        .collect();
    let mut rows = Vec::with_capacity(design.len());
    let mut exclusions = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("design row {i} excluded: {e}");
                exclusions.push(Exclusion {
                    index: i,
                    theta: design[i],
                    reason: e.to_string(),
                });
            }
        }
    }
    if exclusions.len() as f64 > MAX_EXCLUDED_FRACTION * design.len() as f64 {
        return Err(Error::SimulationIncomplete(format!(
            "{} of {} design rows failed",
            exclusions.len(),
            design.len()
        )));
    }
    Ok(SimulatedSet { rows, exclusions })
}

/// Seeded train/test partition of `0..n`; both index lists come back sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
