//! File-backed pipeline stages. Each stage verifies the hashes of the
//! artifacts it reads, writes its own under the run root and records them in
//! the manifest.
//!
//! ```text
//! design/      design.csv, design.json
//! dataset/     dataset.json, runs/run_NNNN/{curve.csv, snapshot.csv, summary.json}
//! reduce/      {fd,field}_basis.json, {fd,field}_components.csv, {fd,field}_scores.csv
//! surrogates/  {fd,field}.json, {fd,field}_training.csv
//! validation/  report.json, curve_nmae.csv, field_nmae.csv, curve_{best,worst}.csv, field_{best,worst}.csv
//! posteriors/  ORDER/rep_R/{stageS_MOD.csv, summary.json, observation.json, corner_1d.csv, corner_2d.csv}
//! recover/     ORDER/rep_R/{fields.csv, summary.json}
//! compare/     report.json, widths.csv
//! ```

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    curve_from_csv, curve_to_csv, snapshot_from_csv, snapshot_to_csv, ArtifactStore, RowAccount, Table,
};
use crate::bayes::{PosteriorSampleSet, RunRecord};
use crate::config::ExperimentConfig;
use crate::dataset::{Exclusion, SimulatedRow, SimulatedSet};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::features::{
    locate_yield_point, resample_segment, station_displacements, Modality, PcaBasis, Standardizer, StrainComponent,
};
use crate::gp::HyperBounds;
use crate::gtn::{GtnParams, ParamBox};
use crate::pipeline::{
    compare_orders, corner_data, external_observation, generate_design, partition, recover_fields, reduce, run_orders,
    synthetic_observation, validate_surrogates, Dataset, NoiseModels, ObservedData, ObservedScores, Order,
    OrderComparison, Representations, SequenceResult, Surrogates, ValidationReport,
};
use crate::specimen::{RunSummary, StrainSnapshot};
use crate::surrogate::{OutputHeader, SurrogateBundle};

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn theta_header() -> Vec<String> {
    GtnParams::NAMES.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------------------
// design

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DesignInfo {
    size: usize,
    seed: u64,
    redraws: usize,
    param_box: ParamBox,
}

pub fn stage_design(cfg: &ExperimentConfig, store: &mut ArtifactStore) -> Result<Design> {
    let design = generate_design(cfg)?;
    let mut header = vec!["index".to_string()];
    header.extend(theta_header());
    let mut t = Table::new(header);
    for (i, r) in design.rows.iter().enumerate() {
        let mut row = vec![i as f64];
        row.extend(r);
        t.push(row);
    }
    store.forget_prefix("design/");
    store.put("design/design.csv", &t.to_csv()?)?;
    store.put_json(
        "design/design.json",
        &DesignInfo {
            size: design.rows.len(),
            seed: design.seed,
            redraws: design.redraws,
            param_box: cfg.param_box,
        },
    )?;
    store.stamp("design", &cfg.hash(), seeds(&[("design", design.seed)]));
    store.save()?;
    log::info!("design: {} rows, {} redrawn", design.rows.len(), design.redraws);
    Ok(design)
}

pub fn load_design(store: &ArtifactStore) -> Result<Design> {
    let info: DesignInfo = store.get_json("design/design.json")?;
    let t = Table::from_csv(&store.get("design/design.csv")?)?;
    let m = t.matrix(&theta_header())?;
    let rows = (0..m.nrows())
        .map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)], m[(i, 3)]])
        .collect();
    Ok(Design {
        rows,
        redraws: info.redraws,
        seed: info.seed,
    })
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetInfo {
    rows_in: usize,
    /// Design indices of the simulated rows, in order.
    rows: Vec<usize>,
    exclusions: Vec<Exclusion>,
    /// Design indices of the training and test rows.
    train: Vec<usize>,
    test: Vec<usize>,
    split_seed: u64,
    capture_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunSidecar {
    index: usize,
    theta: [f64; 4],
    failure_displacement: f64,
    max_force: f64,
    capture_ratio: f64,
    summary: RunSummary,
}

fn run_dir(index: usize) -> String {
    format!("dataset/runs/run_{index:04}")
}

pub fn stage_simulate(cfg: &ExperimentConfig, store: &mut ArtifactStore) -> Result<Dataset> {
    let design = load_design(store)?;
    let data = crate::pipeline::simulate_dataset(cfg, &design)?;
    store.forget_prefix("dataset/");
    for row in &data.set.rows {
        let dir = run_dir(row.index);
        store.put(&format!("{dir}/curve.csv"), &curve_to_csv(&row.curve)?)?;
        store.put(&format!("{dir}/snapshot.csv"), &snapshot_to_csv(&row.snapshot)?)?;
        store.put_json(
            &format!("{dir}/summary.json"),
            &RunSidecar {
                index: row.index,
                theta: row.theta,
                failure_displacement: row.failure_displacement(),
                max_force: row.summary.max_force,
                capture_ratio: row.snapshot.capture_ratio,
                summary: row.summary.clone(),
            },
        )?;
    }
    let to_design = |idx: &[usize]| idx.iter().map(|&i| data.set.rows[i].index).collect::<Vec<_>>();
    let info = DatasetInfo {
        rows_in: design.rows.len(),
        rows: data.set.rows.iter().map(|r| r.index).collect(),
        exclusions: data.set.exclusions.clone(),
        train: to_design(&data.train),
        test: to_design(&data.test),
        split_seed: cfg.task_seed("split"),
        capture_ratio: cfg.simulator.capture_ratio,
    };
    reconcile(&info)?;
    store.put_json("dataset/dataset.json", &info)?;
    store.manifest.rows = Some(RowAccount {
        rows_in: info.rows_in,
        rows_out: info.rows.len(),
        excluded: info.exclusions.len(),
    });
    store.stamp("simulate", &cfg.hash(), seeds(&[("split", info.split_seed)]));
    store.save()?;
    log::info!(
        "simulate: {} rows, {} excluded, {} train / {} test",
        info.rows.len(),
        info.exclusions.len(),
        info.train.len(),
        info.test.len()
    );
    Ok(data)
}

fn reconcile(info: &DatasetInfo) -> Result<()> {
    if info.rows.len() + info.exclusions.len() != info.rows_in {
        return Err(Error::Artifact(format!(
            "row accounting: {} in, {} out, {} excluded",
            info.rows_in,
            info.rows.len(),
            info.exclusions.len()
        )));
    }
    Ok(())
}

/// Reload the simulated dataset; yield points and station forces are
/// recomputed from the stored curves.
pub fn load_dataset(cfg: &ExperimentConfig, store: &ArtifactStore) -> Result<Dataset> {
    let info: DatasetInfo = store.get_json("dataset/dataset.json")?;
    reconcile(&info)?;
    let rows = info
        .rows
        .iter()
        .map(|&index| {
            let dir = run_dir(index);
            let side: RunSidecar = store.get_json(&format!("{dir}/summary.json"))?;
            let curve = curve_from_csv(&store.get(&format!("{dir}/curve.csv"))?)?;
            let snapshot = snapshot_from_csv(&store.get(&format!("{dir}/snapshot.csv"))?, side.capture_ratio)?;
            let yield_point = locate_yield_point(&curve)?;
            let forces = resample_segment(&curve, &yield_point, cfg.features.stations)?;
            Ok(SimulatedRow {
                index,
                theta: side.theta,
                curve,
                snapshot,
                summary: side.summary,
                yield_point,
                forces,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = SimulatedSet {
        rows,
        exclusions: info.exclusions.clone(),
    };
    let data = partition(cfg, set)?;
    let as_design = |idx: &[usize]| idx.iter().map(|&i| data.set.rows[i].index).collect::<Vec<_>>();
    if as_design(&data.train) != info.train || as_design(&data.test) != info.test {
        return Err(Error::Artifact(
            "train/test split differs from the stored one; check the seed".into(),
        ));
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// reduce

/// A basis without its component matrix, which is stored as CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BasisHeader {
    modality: Modality,
    standardizer: Standardizer,
    singular_values: Vec<f64>,
    explained_ratio: Vec<f64>,
    retained: usize,
    variance_threshold: f64,
    field_scaling: Option<[f64; 2]>,
}

fn prefix(m: Modality) -> &'static str {
    match m {
        Modality::Fd => "fd",
        Modality::Field => "field",
    }
}

fn put_basis(store: &mut ArtifactStore, basis: &PcaBasis) -> Result<()> {
    let b = basis.truncated();
    let p = prefix(b.modality);
    store.put_json(
        &format!("reduce/{p}_basis.json"),
        &BasisHeader {
            modality: b.modality,
            standardizer: b.standardizer.clone(),
            singular_values: basis.singular_values.clone(),
            explained_ratio: b.explained_ratio.clone(),
            retained: b.retained,
            variance_threshold: b.variance_threshold,
            field_scaling: b.field_scaling,
        },
    )?;
    store.put(
        &format!("reduce/{p}_components.csv"),
        &Table::from_matrix(&b.components, "pc").to_csv()?,
    )
}

/// The retained part of a persisted basis.
pub fn load_basis(store: &ArtifactStore, m: Modality) -> Result<PcaBasis> {
    let p = prefix(m);
    let h: BasisHeader = store.get_json(&format!("reduce/{p}_basis.json"))?;
    let components = Table::from_csv(&store.get(&format!("reduce/{p}_components.csv"))?)?.to_matrix();
    if components.ncols() != h.retained || components.nrows() != h.standardizer.dim() {
        return Err(Error::Artifact(format!(
            "{p} components have shape {:?}",
            components.shape()
        )));
    }
    let mut singular_values = h.singular_values;
    singular_values.truncate(h.retained);
    Ok(PcaBasis {
        modality: h.modality,
        standardizer: h.standardizer,
        components,
        singular_values,
        explained_ratio: h.explained_ratio,
        retained: h.retained,
        variance_threshold: h.variance_threshold,
        field_scaling: h.field_scaling,
    })
}

fn score_csv(data: &Dataset, scores: &DMatrix<f64>, names: &[String]) -> Result<Vec<u8>> {
    let mut header = vec!["index".to_string(), "train".to_string()];
    header.extend(theta_header());
    header.extend(names.iter().cloned());
    let mut t = Table::new(header);
    let train: std::collections::HashSet<usize> = data.train.iter().copied().collect();
    for (i, row) in data.set.rows.iter().enumerate() {
        let mut r = vec![row.index as f64, f64::from(u8::from(train.contains(&i)))];
        r.extend(row.theta);
        r.extend(scores.row(i).iter());
        t.push(r);
    }
    t.to_csv()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReduceSummary {
    pub k_fd: usize,
    pub k_field: usize,
    pub fd_explained: f64,
    pub field_explained: f64,
    pub field_scaling: [f64; 2],
}

pub fn stage_reduce(cfg: &ExperimentConfig, store: &mut ArtifactStore) -> Result<(Dataset, Representations)> {
    store.verify_prefix("dataset/")?;
    let data = load_dataset(cfg, store)?;
    let rep = reduce(cfg, &data)?;
    store.forget_prefix("reduce/");
    put_basis(store, &rep.fd_basis)?;
    put_basis(store, &rep.field_basis)?;
    let fd_names = Modality::Fd.score_names(rep.fd_basis.retained);
    let field_names = Modality::Field.score_names(rep.field_basis.retained);
    store.put("reduce/fd_scores.csv", &score_csv(&data, &rep.fd_scores, &fd_names)?)?;
    store.put(
        "reduce/field_scores.csv",
        &score_csv(&data, &rep.field_scores, &field_names)?,
    )?;
    let summary = ReduceSummary {
        k_fd: rep.fd_basis.retained,
        k_field: rep.field_basis.retained,
        fd_explained: rep.fd_basis.retained_ratio(),
        field_explained: rep.field_basis.retained_ratio(),
        field_scaling: rep.field_basis.field_scaling.unwrap_or_default(),
    };
    store.put_json("reduce/summary.json", &summary)?;
    store.stamp("reduce", &cfg.hash(), BTreeMap::new());
    store.save()?;
    Ok((data, rep))
}

/// Score tables: design indices, train flags, θ rows and scores.
struct ScoreTable {
    index: Vec<usize>,
    train: Vec<bool>,
    thetas: Vec<[f64; 4]>,
    scores: DMatrix<f64>,
}

fn load_scores(store: &ArtifactStore, m: Modality, retained: usize) -> Result<ScoreTable> {
    let t = Table::from_csv(&store.get(&format!("reduce/{}_scores.csv", prefix(m)))?)?;
    let th = t.matrix(&theta_header())?;
    Ok(ScoreTable {
        index: t.column("index")?.iter().map(|v| *v as usize).collect(),
        train: t.column("train")?.iter().map(|v| *v != 0.0).collect(),
        thetas: (0..th.nrows())
            .map(|i| [th[(i, 0)], th[(i, 1)], th[(i, 2)], th[(i, 3)]])
            .collect(),
        scores: t.matrix(&m.score_names(retained))?,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleHeader {
    modality: Modality,
    param_box: ParamBox,
    bounds: HyperBounds,
    seed: u64,
    outputs: Vec<OutputHeader>,
    /// Design indices of the training rows.
    train_indices: Vec<usize>,
}

fn put_bundle(store: &mut ArtifactStore, b: &SurrogateBundle, train_indices: &[usize]) -> Result<()> {
    let p = prefix(b.modality);
    store.put_json(
        &format!("surrogates/{p}.json"),
        &BundleHeader {
            modality: b.modality,
            param_box: b.param_box,
            bounds: b.bounds,
            seed: b.seed,
            outputs: b.headers(),
            train_indices: train_indices.to_vec(),
        },
    )?;
    let mut header = vec!["index".to_string()];
    header.extend(theta_header());
    header.extend(b.names());
    let thetas = b.training_thetas();
    let y = b.training_targets();
    let mut t = Table::new(header);
    for (i, th) in thetas.iter().enumerate() {
        let mut r = vec![train_indices[i] as f64];
        r.extend(th);
        r.extend(y.row(i).iter());
        t.push(r);
    }
    store.put(&format!("surrogates/{p}_training.csv"), &t.to_csv()?)
}

pub fn load_bundle(store: &ArtifactStore, m: Modality) -> Result<SurrogateBundle> {
    let p = prefix(m);
    let h: BundleHeader = store.get_json(&format!("surrogates/{p}.json"))?;
    let basis = load_basis(store, m)?;
    // The training CSV is informational; exact inputs and targets come from
    // the score table the bundle was trained on.
    let scores = load_scores(store, m, basis.retained)?;
    let rows: Vec<usize> = h
        .train_indices
        .iter()
        .map(|idx| {
            scores
                .index
                .iter()
                .position(|i| i == idx)
                .ok_or_else(|| Error::Artifact(format!("training row {idx} missing from the score table")))
        })
        .collect::<Result<_>>()?;
    if h.outputs.len() != scores.scores.ncols() {
        return Err(Error::Artifact(format!(
            "{p} surrogate has {} outputs, scores have {}",
            h.outputs.len(),
            scores.scores.ncols()
        )));
    }
    let thetas: Vec<[f64; 4]> = rows.iter().map(|&r| scores.thetas[r]).collect();
    let targets = DMatrix::from_fn(rows.len(), scores.scores.ncols(), |i, j| scores.scores[(rows[i], j)]);
    SurrogateBundle::from_parts(
        h.modality,
        h.param_box,
        h.bounds,
        h.seed,
        basis,
        h.outputs,
        &thetas,
        &targets,
    )
}

pub fn load_surrogates(store: &ArtifactStore) -> Result<Surrogates> {
    Ok(Surrogates {
        fd: load_bundle(store, Modality::Fd)?,
        field: load_bundle(store, Modality::Field)?,
    })
}

pub fn stage_train(cfg: &ExperimentConfig, store: &mut ArtifactStore) -> Result<Surrogates> {
    store.verify_prefix("reduce/")?;
    let fd_basis = load_basis(store, Modality::Fd)?;
    let field_basis = load_basis(store, Modality::Field)?;
    let fd = load_scores(store, Modality::Fd, fd_basis.retained)?;
    let field = load_scores(store, Modality::Field, field_basis.retained)?;
    let pick = |t: &ScoreTable| -> (Vec<usize>, Vec<[f64; 4]>, DMatrix<f64>) {
        let rows: Vec<usize> = (0..t.index.len()).filter(|&i| t.train[i]).collect();
        let scores = DMatrix::from_fn(rows.len(), t.scores.ncols(), |i, j| t.scores[(rows[i], j)]);
        (
            rows.iter().map(|&i| t.index[i]).collect(),
            rows.iter().map(|&i| t.thetas[i]).collect(),
            scores,
        )
    };
    let s = &cfg.surrogate;
    let (fd_idx, fd_th, fd_y) = pick(&fd);
    let (field_idx, field_th, field_y) = pick(&field);
    let seed_fd = cfg.task_seed("train-fd");
    let seed_field = cfg.task_seed("train-field");
    let surr = Surrogates {
        fd: crate::surrogate::train_bundle(&fd_th, &fd_y, fd_basis, &cfg.param_box, &s.bounds, s.starts, seed_fd)?,
        field: crate::surrogate::train_bundle(
            &field_th,
            &field_y,
            field_basis,
            &cfg.param_box,
            &s.bounds,
            s.starts,
            seed_field,
        )?,
    };
    store.forget_prefix("surrogates/");
    put_bundle(store, &surr.fd, &fd_idx)?;
    put_bundle(store, &surr.field, &field_idx)?;
    store.stamp(
        "train",
        &cfg.hash(),
        seeds(&[("train-fd", seed_fd), ("train-field", seed_field)]),
    );
    store.save()?;
    Ok(surr)
}

// ---------------------------------------------------------------------------
// validate

pub fn stage_validate(cfg: &ExperimentConfig, store: &mut ArtifactStore) -> Result<ValidationReport> {
    store.verify_prefix("dataset/")?;
    store.verify_prefix("surrogates/")?;
    let data = load_dataset(cfg, store)?;
    let surr = load_surrogates(store)?;
    // Reload the representations so the field scaling matches training.
    let rep = Representations {
        fd_basis: surr.fd.basis.clone(),
        field_basis: surr.field.basis.clone(),
        fd_scores: DMatrix::zeros(0, 0),
        field_scores: DMatrix::zeros(0, 0),
    };
    let out = validate_surrogates(&data, &rep, &surr)?;
    store.forget_prefix("validation/");
    store.put_json("validation/report.json", &out.report)?;

    let mut t = Table::new(["index", "nmae", "d_f", "d_f_pred"].map(String::from).to_vec());
    for c in &out.curves {
        t.push(vec![c.0 as f64, c.1, c.2, c.3]);
    }
    store.put("validation/curve_nmae.csv", &t.to_csv()?)?;
    let mut t = Table::new(["index", "e11", "e12", "e22"].map(String::from).to_vec());
    for f in &out.fields {
        t.push(vec![f.0 as f64, f.1[0], f.1[1], f.1[2]]);
    }
    store.put("validation/field_nmae.csv", &t.to_csv()?)?;

    let position = |index: usize| {
        out.curves
            .iter()
            .position(|c| c.0 == index)
            .expect("index from the test split")
    };
    for (label, index) in [("best", out.report.curve_best), ("worst", out.report.curve_worst)] {
        let p = position(index);
        let row = data
            .set
            .rows
            .iter()
            .find(|r| r.index == index)
            .expect("test row present");
        let st = station_displacements(row.yield_point.d_y, row.failure_displacement(), row.forces.len());
        let st_pred = station_displacements(row.yield_point.d_y, out.curves[p].3, row.forces.len());
        let mut t = Table::new(
            ["station", "displacement", "force", "displacement_pred", "force_pred"]
                .map(String::from)
                .to_vec(),
        );
        for j in 0..st.len() {
            t.push(vec![
                j as f64,
                st[j],
                row.forces[j],
                st_pred[j],
                out.predicted_forces[p][j],
            ]);
        }
        store.put(&format!("validation/curve_{label}.csv"), &t.to_csv()?)?;
    }
    for (label, index) in [("best", out.report.field_best), ("worst", out.report.field_worst)] {
        let p = out
            .fields
            .iter()
            .position(|f| f.0 == index)
            .expect("index from the test split");
        let row = data
            .set
            .rows
            .iter()
            .find(|r| r.index == index)
            .expect("test row present");
        store.put(
            &format!("validation/field_{label}.csv"),
            &field_pair_csv(&row.snapshot, &out.predicted_fields[p])?,
        )?;
    }
    store.stamp("validate", &cfg.hash(), BTreeMap::new());
    store.save()?;
    Ok(out.report)
}

fn field_pair_csv(truth: &StrainSnapshot, pred: &StrainSnapshot) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["x", "y", "active"].map(String::from).to_vec();
    for c in StrainComponent::ALL {
        header.push(c.name().to_string());
        header.push(format!("{}_pred", c.name()));
    }
    let mut t = Table::new(header);
    for k in 0..truth.mask.len() {
        let mut r = vec![truth.x[k], truth.y[k], f64::from(u8::from(truth.mask[k]))];
        for c in StrainComponent::ALL {
            r.push(c.values(truth)[k]);
            r.push(c.values(pred)[k]);
        }
        t.push(r);
    }
    t.to_csv()
}

// ---------------------------------------------------------------------------
// infer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub modality: Modality,
    pub seed: u64,
    pub samples: usize,
    pub map: [f64; 4],
    pub hpd: [[f64; 2]; 4],
    pub hpd_widths: [f64; 4],
    pub coverage: f64,
    pub split_rhat: [f64; 4],
    pub ess: [f64; 4],
    pub converged: bool,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub order: Order,
    pub repeat: usize,
    pub parameters: Vec<String>,
    pub truth: Option<[f64; 4]>,
    pub stages: Vec<StageSummary>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObservationRecord {
    truth: Option<[f64; 4]>,
    sigma_df: f64,
    d_f: f64,
    scores: ObservedScores,
    noise: NoiseModels,
}

fn seq_dir(order: Order, repeat: usize) -> String {
    format!("posteriors/{}/rep_{repeat}", order.token())
}

fn summarize_sequence(r: &SequenceResult, repeat: usize, truth: Option<[f64; 4]>) -> SequenceSummary {
    SequenceSummary {
        order: r.order,
        repeat,
        parameters: theta_header(),
        truth,
        stages: r
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = &s.posterior;
                StageSummary {
                    stage: i + 1,
                    modality: s.modality,
                    seed: s.seed,
                    samples: p.len(),
                    map: p.map,
                    hpd: p.hpd,
                    hpd_widths: p.hpd_widths(),
                    coverage: p.coverage,
                    split_rhat: p.diagnostics.split_rhat,
                    ess: p.diagnostics.ess,
                    converged: p.converged(),
                    runs: p.runs.clone(),
                }
            })
            .collect(),
        converged: r.converged(),
    }
}

fn posterior_csv(p: &PosteriorSampleSet) -> Result<Vec<u8>> {
    let mut header = theta_header();
    header.extend(["chain", "log_posterior", "log_likelihood"].map(String::from));
    let mut t = Table::new(header);
    for i in 0..p.len() {
        let mut r = p.samples[i].to_vec();
        r.extend([p.chain_ids[i] as f64, p.log_posterior[i], p.log_likelihood[i]]);
        t.push(r);
    }
    t.to_csv()
}

pub const CORNER_BINS: usize = 30;

fn corner_csvs(p: &PosteriorSampleSet, b: &ParamBox) -> Result<(Vec<u8>, Vec<u8>)> {
    let c = corner_data(&p.samples, b, CORNER_BINS);
    let n = p.len() as f64;
    let mut t1 = Table::new(
        ["parameter", "bin", "lower", "upper", "count", "density"]
            .map(String::from)
            .to_vec(),
    );
    for (i, bin, lo, hi, count) in &c.marginals {
        t1.push(vec![
            *i as f64,
            *bin as f64,
            *lo,
            *hi,
            *count as f64,
            *count as f64 / (n * (hi - lo)),
        ]);
    }
    let mut t2 = Table::new(
        ["parameter_i", "parameter_j", "bin_i", "bin_j", "count"]
            .map(String::from)
            .to_vec(),
    );
    for (i, j, bi, bj, count) in &c.pairs {
        t2.push(vec![*i as f64, *j as f64, *bi as f64, *bj as f64, *count as f64]);
    }
    Ok((t1.to_csv()?, t2.to_csv()?))
}

/// Outcome of an inference stage: summaries of every sequence run.
#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub summaries: Vec<SequenceSummary>,
}

impl InferOutcome {
    pub fn converged(&self) -> bool {
        self.summaries.iter().all(|s| s.converged)
    }
}

/// Observation for `repeat`: the configured external files, or the noisy
/// synthetic specimen.
pub fn observation(cfg: &ExperimentConfig, sigma_df: f64, repeat: usize) -> Result<ObservedData> {
    match (&cfg.experiment.curve_file, &cfg.experiment.snapshot_file) {
        (Some(c), Some(s)) => {
            let curve = curve_from_csv(&std::fs::read(c)?)?;
            let snap = snapshot_from_csv(&std::fs::read(s)?, cfg.simulator.capture_ratio)?;
            external_observation(&curve, snap, cfg.features.stations)
        }
        _ => synthetic_observation(cfg, sigma_df, repeat),
    }
}

/// `d_f` noise from the stored FD score table.
fn stored_sigma_df(cfg: &ExperimentConfig, store: &ArtifactStore, retained: usize) -> Result<f64> {
    if let Some(s) = cfg.noise.sigma_df {
        return Ok(s);
    }
    let t = load_scores(store, Modality::Fd, retained)?;
    let c = t.scores.ncols() - 1;
    let (lo, hi) = (0..t.index.len())
        .filter(|&i| t.train[i])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(t.scores[(i, c)]), hi.max(t.scores[(i, c)]))
        });
    Ok(cfg.noise.sigma_df_fraction * (hi - lo))
}

pub fn stage_infer(
    cfg: &ExperimentConfig,
    store: &mut ArtifactStore,
    orders: &[Order],
    repeats: &[usize],
) -> Result<InferOutcome> {
    store.verify_prefix("surrogates/")?;
    store.verify_prefix("reduce/")?;
    let surr = load_surrogates(store)?;
    let sigma_df = stored_sigma_df(cfg, store, surr.fd.basis.retained)?;
    let noise = NoiseModels::new(cfg, &surr, sigma_df)?;
    let mut summaries = Vec::new();
    let mut stage_seeds = BTreeMap::new();
    for &repeat in repeats {
        let obs = observation(cfg, sigma_df, repeat)?;
        let scores = obs.scores(&surr)?;
        let label = format!("tmcmc-{repeat}");
        let tmcmc = cfg.tmcmc_for(&label);
        stage_seeds.insert(label, tmcmc.seed);
        stage_seeds.insert(format!("noise-{repeat}"), cfg.task_seed(&format!("noise-{repeat}")));
        let results = run_orders(orders, &surr, &noise, &scores, &cfg.param_box, &tmcmc, cfg.kde_centers)?;
        for r in &results {
            let dir = seq_dir(r.order, repeat);
            store.forget_prefix(&format!("{dir}/"));
            for (i, s) in r.stages.iter().enumerate() {
                store.put(
                    &format!("{dir}/stage{}_{}.csv", i + 1, s.modality.tag()),
                    &posterior_csv(&s.posterior)?,
                )?;
            }
            let (c1, c2) = corner_csvs(r.last(), &cfg.param_box)?;
            store.put(&format!("{dir}/corner_1d.csv"), &c1)?;
            store.put(&format!("{dir}/corner_2d.csv"), &c2)?;
            store.put_json(
                &format!("{dir}/observation.json"),
                &ObservationRecord {
                    truth: obs.truth,
                    sigma_df,
                    d_f: obs.d_f,
                    scores: scores.clone(),
                    noise: noise.clone(),
                },
            )?;
            let summary = summarize_sequence(r, repeat, obs.truth);
            store.put_json(&format!("{dir}/summary.json"), &summary)?;
            summaries.push(summary);
        }
    }
    store.stamp("infer", &cfg.hash(), stage_seeds);
    store.save()?;
    Ok(InferOutcome { summaries })
}

pub fn load_sequence_summary(store: &ArtifactStore, order: Order, repeat: usize) -> Result<SequenceSummary> {
    store.get_json(&format!("{}/summary.json", seq_dir(order, repeat)))
}

/// Final-stage posterior of a stored sequence.
pub fn load_posterior(store: &ArtifactStore, order: Order, repeat: usize) -> Result<PosteriorSampleSet> {
    let s = load_sequence_summary(store, order, repeat)?;
    let last = s
        .stages
        .last()
        .ok_or_else(|| Error::Artifact("sequence without stages".into()))?;
    let t = Table::from_csv(&store.get(&format!(
        "{}/stage{}_{}.csv",
        seq_dir(order, repeat),
        last.stage,
        last.modality.tag()
    ))?)?;
    let th = t.matrix(&theta_header())?;
    let chain_ids: Vec<usize> = t.column("chain")?.iter().map(|v| *v as usize).collect();
    let runs = last.runs.len();
    Ok(PosteriorSampleSet {
        samples: (0..th.nrows())
            .map(|i| [th[(i, 0)], th[(i, 1)], th[(i, 2)], th[(i, 3)]])
            .collect(),
        chain_lengths: (0..runs)
            .map(|r| chain_ids.iter().filter(|c| **c == r).count())
            .collect(),
        chain_ids,
        log_posterior: t.column("log_posterior")?,
        log_likelihood: t.column("log_likelihood")?,
        runs: last.runs.clone(),
        diagnostics: crate::bayes::Diagnostics {
            split_rhat: last.split_rhat,
            ess: last.ess,
        },
        map: last.map,
        hpd: last.hpd,
        coverage: last.coverage,
    })
}

/// Repeats with a stored summary for `order`.
pub fn stored_repeats(store: &ArtifactStore, order: Order) -> Vec<usize> {
    let head = format!("posteriors/{}/rep_", order.token());
    let mut reps: Vec<usize> = store
        .manifest
        .artifacts
        .keys()
        .filter_map(|k| k.strip_prefix(&head)?.strip_suffix("/summary.json")?.parse().ok())
        .collect();
    reps.sort_unstable();
    reps
}

// ---------------------------------------------------------------------------
// recover

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub order: Order,
    pub repeat: usize,
    pub map: [f64; 4],
    pub failure_displacement: f64,
    pub max_force: f64,
    pub capture_displacement: f64,
    pub void_fraction_max: f64,
    /// Cell centre of the largest void fraction (mm).
    pub void_fraction_argmax: [f64; 2],
    pub sigma22_max: f64,
}

pub fn stage_recover(
    cfg: &ExperimentConfig,
    store: &mut ArtifactStore,
    order: Order,
    repeat: usize,
) -> Result<RecoverySummary> {
    let dir = seq_dir(order, repeat);
    store.verify_prefix(&format!("{dir}/"))?;
    let s = load_sequence_summary(store, order, repeat)?;
    let map = s
        .stages
        .last()
        .ok_or_else(|| Error::Artifact("sequence without stages".into()))?
        .map;
    let run = recover_fields(cfg, &map)?;
    let st = &run.state;
    let mut t = Table::new(
        ["x", "y", "active", "sigma22", "void_fraction"]
            .map(String::from)
            .to_vec(),
    );
    let (mut kmax, mut fmax, mut smax) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in 0..st.mask.len() {
        t.push(vec![
            st.x[k],
            st.y[k],
            f64::from(u8::from(st.mask[k])),
            st.sigma22[k],
            st.void_fraction[k],
        ]);
        if st.mask[k] {
            if st.void_fraction[k] > fmax {
                fmax = st.void_fraction[k];
                kmax = k;
            }
            smax = smax.max(st.sigma22[k]);
        }
    }
    let summary = RecoverySummary {
        order,
        repeat,
        map,
        failure_displacement: run.summary.failure_displacement,
        max_force: run.summary.max_force,
        capture_displacement: run.summary.capture_displacement,
        void_fraction_max: fmax,
        void_fraction_argmax: [st.x[kmax], st.y[kmax]],
        sigma22_max: smax,
    };
    let out = format!("recover/{}/rep_{repeat}", order.token());
    store.forget_prefix(&format!("{out}/"));
    store.put(&format!("{out}/fields.csv"), &t.to_csv()?)?;
    store.put_json(&format!("{out}/summary.json"), &summary)?;
    store.stamp("recover", &cfg.hash(), BTreeMap::new());
    store.save()?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// compare

pub fn stage_compare(cfg: &ExperimentConfig, store: &mut ArtifactStore) -> Result<OrderComparison> {
    let reps = stored_repeats(store, Order::FdDic);
    for o in Order::ALL {
        let have = stored_repeats(store, o);
        if have.is_empty() {
            return Err(Error::Artifact(format!(
                "no {o} posteriors; run `infer` with that order first"
            )));
        }
        if reps.iter().any(|r| !have.contains(r)) {
            return Err(Error::Artifact(format!("{o} lacks repeats present for FD_DIC")));
        }
    }
    let load = |o: Order| {
        reps.iter()
            .map(|&r| load_posterior(store, o, r))
            .collect::<Result<Vec<_>>>()
    };
    let [a, b, c, d] = [
        load(Order::FdDic)?,
        load(Order::DicFd)?,
        load(Order::FdOnly)?,
        load(Order::DicOnly)?,
    ];
    fn refs(v: &[PosteriorSampleSet]) -> Vec<&PosteriorSampleSet> {
        v.iter().collect()
    }
    let report = compare_orders(
        &refs(&a),
        &refs(&b),
        &refs(&c),
        &refs(&d),
        cfg.experiment.informativeness,
    )?;
    store.forget_prefix("compare/");
    store.put_json("compare/report.json", &report)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["order", "parameter", "width"])?;
    for e in &report.widths {
        w.write_record([e.order.token(), e.parameter.as_str(), &e.width.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    store.put("compare/widths.csv", &bytes)?;
    store.stamp("compare", &cfg.hash(), BTreeMap::new());
    store.save()?;
    Ok(report)
}
