//! Run directory layout: content-hashed artifacts recorded in a manifest,
//! and the CSV/JSON formats of every persisted object.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::specimen::{CurveSegment, StrainSnapshot};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub completed_at: u64,
    pub seeds: BTreeMap<String, u64>,
}

/// Rows in = rows out + exclusions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowAccount {
    pub rows_in: usize,
    pub rows_out: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the configuration of the most recent stage.
    pub config_hash: String,
    /// Keyed by path relative to the run root.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub stages: BTreeMap<String, StageStamp>,
    pub rows: Option<RowAccount>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A run directory and its manifest.
#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl ArtifactStore {
    /// Open `root`, creating it if needed and loading an existing manifest.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.is_file() {
            serde_json::from_slice(&fs::read(&path)?)?
        } else {
            RunManifest::default()
        };
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn has(&self, rel: &str) -> bool {
        self.manifest.artifacts.contains_key(rel)
    }

    /// Write `bytes` at `rel` and record its hash.
    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.manifest.artifacts.insert(
            rel.to_string(),
            ArtifactRecord {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn put_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(rel, &bytes)
    }

    /// Read `rel` after checking it against its recorded hash.
    pub fn get(&self, rel: &str) -> Result<Vec<u8>> {
        let rec =
            self.manifest.artifacts.get(rel).ok_or_else(|| {
                Error::Artifact(format!("{rel} is not in the manifest; run the producing stage first"))
            })?;
        let bytes = fs::read(self.path(rel)).map_err(|e| Error::Artifact(format!("{rel}: {e}")))?;
        let actual = sha256_hex(&bytes);
        if actual != rec.sha256 {
            return Err(Error::HashMismatch {
                path: rel.to_string(),
                expected: rec.sha256.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn get_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.get(rel)?)?)
    }

    /// Check every artifact under `prefix` against its hash.
    pub fn verify_prefix(&self, prefix: &str) -> Result<usize> {
        let keys: Vec<&String> = self
            .manifest
            .artifacts
            .keys()
            .filter(|k| k.starts_with(prefix))
            .collect();
        if keys.is_empty() {
            return Err(Error::Artifact(format!("no artifacts under {prefix}")));
        }
        for k in &keys {
            self.get(k)?;
        }
        Ok(keys.len())
    }

    /// Drop manifest entries under `prefix` (before a stage rewrites them).
    pub fn forget_prefix(&mut self, prefix: &str) {
        self.manifest.artifacts.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn stamp(&mut self, stage: &str, config_hash: &str, seeds: BTreeMap<String, u64>) {
        let completed_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.manifest.config_hash = config_hash.to_string();
        self.manifest.stages.insert(
            stage.to_string(),
            StageStamp {
                config_hash: config_hash.to_string(),
                completed_at,
                seeds,
            },
        );
    }

    /// Persist the manifest.
    pub fn save(&self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        fs::write(self.root.join(MANIFEST_FILE), bytes)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tables

/// A header plus rows of numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Columns `names` as an `n × names.len()` matrix.
    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let idx: Vec<usize> = names.iter().map(|n| self.column_index(n)).collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(self.rows.len(), idx.len(), |i, j| {
            self.rows[i][idx[j]]
        }))
    }

    /// CSV text; floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Format(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    rec.len(),
                    header.len()
                )));
            }
            let row = rec
                .iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {}: `{v}` is not a number", line + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Matrix with generated column names `prefix0, prefix1, …`.
    pub fn from_matrix(m: &DMatrix<f64>, prefix: &str) -> Self {
        let header = (0..m.ncols()).map(|j| format!("{prefix}{j}")).collect();
        let rows = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Self { header, rows }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let cols = self.header.len();
        DMatrix::from_fn(self.rows.len(), cols, |i, j| self.rows[i][j])
    }
}

// ---------------------------------------------------------------------------
// Curves and snapshots

pub fn curve_to_csv(curve: &CurveSegment) -> Result<Vec<u8>> {
    let mut t = Table::new(vec!["displacement".into(), "force".into()]);
    for (d, f) in curve.displacements.iter().zip(&curve.forces) {
        t.push(vec![*d, *f]);
    }
    t.to_csv()
}

/// A `displacement,force` record; the last displacement is taken as `d_f`.
pub fn curve_from_csv(bytes: &[u8]) -> Result<CurveSegment> {
    let t = Table::from_csv(bytes)?;
    CurveSegment::new(t.column("displacement")?, t.column("force")?)
}

pub fn snapshot_to_csv(s: &StrainSnapshot) -> Result<Vec<u8>> {
    let mut t = Table::new(["x", "y", "active", "e11", "e12", "e22"].map(String::from).to_vec());
    for k in 0..s.mask.len() {
        t.push(vec![
            s.x[k],
            s.y[k],
            f64::from(u8::from(s.mask[k])),
            s.e11[k],
            s.e12[k],
            s.e22[k],
        ]);
    }
    t.to_csv()
}

/// Rebuild a snapshot written in grid order (rows of constant `y`, `x` increasing).
pub fn snapshot_from_csv(bytes: &[u8], capture_ratio: f64) -> Result<StrainSnapshot> {
    let t = Table::from_csv(bytes)?;
    let x = t.column("x")?;
    let y = t.column("y")?;
    let active = t.column("active")?;
    let n = x.len();
    let nx = y.iter().take_while(|v| **v == y[0]).count();
    if nx == 0 || n % nx != 0 {
        return Err(Error::Format("snapshot is not a rectangular grid".into()));
    }
    let s = StrainSnapshot {
        nx,
        ny: n / nx,
        x,
        y,
        mask: active.iter().map(|a| *a != 0.0).collect(),
        e11: t.column("e11")?,
        e12: t.column("e12")?,
        e22: t.column("e22")?,
        capture_ratio,
    };
    s.validate()?;
    Ok(s)
}
