//! Latin hypercube designs over the calibration box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtn::ParamBox;

/// Attempts per row before a redraw is declared impossible.
const MAX_REDRAWS_PER_ROW: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub rows: Vec<[f64; 4]>,
    /// Rows re-drawn inside their strata to satisfy `f_c < f_f`.
    pub redraws: usize,
    pub seed: u64,
}

/// One point per equal-width stratum in every coordinate. Rows violating
/// `f_c < f_f` are re-drawn uniformly within their own strata.
pub fn lhs_design(n: usize, bounds: &ParamBox, seed: u64) -> Result<Design> {
    if n < 2 {
        return Err(Error::Parameter(format!("design size {n} below 2")));
    }
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata = [(); 4].map(|_| Vec::<usize>::new());
    for s in strata.iter_mut() {
        *s = (0..n).collect();
        s.shuffle(&mut rng);
    }
    // Pair f_c and f_f strata so that every row can satisfy f_c < f_f.
    let stratum_lo = |d: usize, k: usize| bounds.lower[d] + bounds.width(d) * k as f64 / n as f64;
    let stratum_hi = |d: usize, k: usize| bounds.lower[d] + bounds.width(d) * (k + 1) as f64 / n as f64;
    let feasible = |c: usize, f: usize| stratum_lo(2, c) < stratum_hi(3, f);
    // Rows in decreasing f_c stratum take a random f_f stratum among the
    // remaining feasible ones; feasible sets are nested, so this never
    // strands a later row if any valid pairing exists.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(strata[2][i]));
    let mut remaining: Vec<usize> = strata[3].clone();
    for &i in &order {
        let options: Vec<usize> = (0..remaining.len())
            .filter(|&j| feasible(strata[2][i], remaining[j]))
            .collect();
        if options.is_empty() {
            return Err(Error::Parameter("box admits no Latin hypercube with f_c < f_f".into()));
        }
        let pick = options[rng.gen_range(0..options.len())];
        strata[3][i] = remaining.swap_remove(pick);
    }
    let draw = |rng: &mut ChaCha8Rng, d: usize, stratum: usize| {
        let u = (stratum as f64 + rng.gen::<f64>()) / n as f64;
        bounds.lower[d] + u * bounds.width(d)
    };
    let mut rows = Vec::with_capacity(n);
    let mut redraws = 0;
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let mut row: [f64; 4] = std::array::from_fn(|d| draw(&mut rng, d, strata[d][i]));
        let mut tries = 0;
        while !bounds.admits(&row) {
            if tries == MAX_REDRAWS_PER_ROW {
                return Err(Error::Parameter(format!(
                    "row {i}: strata of f_c and f_f admit no point with f_c < f_f"
                )));
            }
            row[2] = draw(&mut rng, 2, strata[2][i]);
            row[3] = draw(&mut rng, 3, strata[3][i]);
            tries += 1;
        }
        if tries > 0 {
            redraws += 1;
        }
        rows.push(row);
    }
    if redraws > 0 {
        log::info!("LHS: {redraws} of {n} rows re-drawn to satisfy f_c < f_f");
    }
    Ok(Design { rows, redraws, seed })
}

/// `n` points in `[0, 1]^d` with one point per stratum in every coordinate.
pub fn unit_lhs<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; d]; n];
    for c in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, k) in points.iter_mut().zip(strata) {
            p[c] = (k as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    points
}
