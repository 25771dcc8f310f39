//! One GP per score column, mapping calibration parameters to a modality's
//! score vector.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Modality, PcaBasis};
use crate::gp::{optimize_hyperparams, ArdHyperparams, HyperBounds, HyperFit, TrainedGp};
use crate::gtn::ParamBox;

/// A GP on the standardized column `(y − shift) / scale`.
#[derive(Debug, Clone)]
pub struct OutputGp {
    pub name: String,
    pub shift: f64,
    pub scale: f64,
    pub fit: HyperFit,
    pub gp: TrainedGp,
}

#[derive(Debug, Clone)]
pub struct SurrogateBundle {
    pub modality: Modality,
    pub param_box: ParamBox,
    pub bounds: HyperBounds,
    pub seed: u64,
    pub basis: PcaBasis,
    pub outputs: Vec<OutputGp>,
}

/// Everything needed to rebuild a bundle; factorizations are recomputed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputHeader {
    pub name: String,
    pub shift: f64,
    pub scale: f64,
    pub hyperparams: ArdHyperparams,
    pub log_marginal_likelihood: f64,
    pub successful_starts: usize,
    pub evaluations: usize,
}

impl SurrogateBundle {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.outputs.iter().map(|o| o.name.clone()).collect()
    }

    /// Predictive means and variances (m × K) in score units.
    pub fn predict_batch(&self, thetas: &[[f64; 4]]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let x = unit_inputs(&self.param_box, thetas);
        let k = self.outputs.len();
        let mut mean = DMatrix::zeros(thetas.len(), k);
        let mut var = DMatrix::zeros(thetas.len(), k);
        for (c, o) in self.outputs.iter().enumerate() {
            let (mu, s2) = o.gp.predict_batch(&x)?;
            for i in 0..thetas.len() {
                mean[(i, c)] = o.shift + o.scale * mu[i];
                var[(i, c)] = o.scale * o.scale * s2[i];
            }
        }
        Ok((mean, var))
    }

    pub fn predict(&self, theta: &[f64; 4]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (m, v) = self.predict_batch(std::slice::from_ref(theta))?;
        Ok((m.row(0).iter().copied().collect(), v.row(0).iter().copied().collect()))
    }

    pub fn headers(&self) -> Vec<OutputHeader> {
        self.outputs
            .iter()
            .map(|o| OutputHeader {
                name: o.name.clone(),
                shift: o.shift,
                scale: o.scale,
                hyperparams: o.gp.hyperparams().clone(),
                log_marginal_likelihood: o.fit.log_marginal_likelihood,
                successful_starts: o.fit.successful_starts,
                evaluations: o.fit.evaluations,
            })
            .collect()
    }

    /// Rebuild from persisted headers and the unit-scaled training inputs and raw targets.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        modality: Modality,
        param_box: ParamBox,
        bounds: HyperBounds,
        seed: u64,
        basis: PcaBasis,
        headers: Vec<OutputHeader>,
        thetas: &[[f64; 4]],
        targets: &DMatrix<f64>,
    ) -> Result<Self> {
        if targets.ncols() != headers.len() || targets.nrows() != thetas.len() {
            return Err(Error::Dimension {
                expected: headers.len(),
                actual: targets.ncols(),
            });
        }
        let x = unit_inputs(&param_box, thetas);
        let outputs = headers
            .into_iter()
            .enumerate()
            .map(|(c, h)| {
                let y: Vec<f64> = targets.column(c).iter().map(|v| (v - h.shift) / h.scale).collect();
                let gp = TrainedGp::fit(x.clone(), y, h.hyperparams.clone())?;
                Ok(OutputGp {
                    name: h.name,
                    shift: h.shift,
                    scale: h.scale,
                    fit: HyperFit {
                        hyperparams: h.hyperparams,
                        log_marginal_likelihood: h.log_marginal_likelihood,
                        successful_starts: h.successful_starts,
                        evaluations: h.evaluations,
                    },
                    gp,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modality,
            param_box,
            bounds,
            seed,
            basis,
            outputs,
        })
    }

    /// Training targets in score units, one column per output.
    pub fn training_targets(&self) -> DMatrix<f64> {
        let n = self.outputs.first().map_or(0, |o| o.gp.targets().len());
        DMatrix::from_fn(n, self.outputs.len(), |i, c| {
            let o = &self.outputs[c];
            o.shift + o.scale * o.gp.targets()[i]
        })
    }

    /// Training inputs in parameter units.
    pub fn training_thetas(&self) -> Vec<[f64; 4]> {
        let Some(o) = self.outputs.first() else {
            return Vec::new();
        };
        let x = o.gp.inputs();
        (0..x.nrows())
            .map(|i| self.param_box.from_unit(&[x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]]))
            .collect()
    }
}

fn unit_inputs(b: &ParamBox, thetas: &[[f64; 4]]) -> DMatrix<f64> {
    let rows: Vec<[f64; 4]> = thetas.iter().map(|t| b.to_unit(t)).collect();
    DMatrix::from_fn(rows.len(), 4, |i, d| rows[i][d])
}

/// Seed of the hyperparameter search for output column `c`.
pub fn column_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(c as u64 + 1)
}

/// Train one GP per score column.
pub fn train_bundle(
    thetas: &[[f64; 4]],
    scores: &DMatrix<f64>,
    basis: PcaBasis,
    param_box: &ParamBox,
    bounds: &HyperBounds,
    starts: usize,
    seed: u64,
) -> Result<SurrogateBundle> {
    let names = basis.modality.score_names(basis.retained);
    if scores.ncols() != names.len() {
        return Err(Error::Dimension {
            expected: names.len(),
            actual: scores.ncols(),
        });
    }
    if scores.nrows() != thetas.len() {
        return Err(Error::Dimension {
            expected: thetas.len(),
            actual: scores.nrows(),
        });
    }
    let x = unit_inputs(param_box, thetas);
    let outputs = names
        .into_par_iter()
        .enumerate()
        .map(|(c, name)| {
            let col: Vec<f64> = scores.column(c).iter().copied().collect();
            let n = col.len() as f64;
            let shift = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n).sqrt();
            let scale = if sd > 0.0 { sd } else { 1.0 };
            let y: Vec<f64> = col.iter().map(|v| (v - shift) / scale).collect();
            let wrap = |e: Error| Error::Training {
                column: name.clone(),
                source: Box::new(e),
            };
            let fit = optimize_hyperparams(&x, &y, bounds, starts, column_seed(seed, c)).map_err(wrap)?;
            let gp = TrainedGp::fit(x.clone(), y, fit.hyperparams.clone()).map_err(wrap)?;
            Ok(OutputGp {
                name: name.clone(),
                shift,
                scale,
                fit,
                gp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurrogateBundle {
        modality: basis.modality,
        param_box: *param_box,
        bounds: *bounds,
        seed,
        basis,
        outputs,
    })
}
