//! Experiment configuration: a single TOML file in which every field has a
//! default, plus dotted-key overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{TmcmcConfig, DEFAULT_KDE_CENTERS};
use crate::error::{Error, Result};
use crate::features::DEFAULT_STATIONS;
use crate::gp::{HyperBounds, DEFAULT_STARTS};
use crate::gtn::ParamBox;
use crate::specimen::{LoadingProgram, SpecimenModel};

/// Smallest accepted design size.
pub const MIN_DESIGN_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Force noise (N) on every resampled station.
    pub sigma_fd: f64,
    /// Strain noise on every cell and component.
    pub sigma_dic: f64,
    /// Failure-displacement noise (mm); `None` takes `sigma_df_fraction` of
    /// the training range of `d_f`.
    pub sigma_df: Option<f64>,
    pub sigma_df_fraction: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_fd: 12.0,
            sigma_dic: 200e-6,
            sigma_df: None,
            sigma_df_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub stations: usize,
    pub fd_threshold: f64,
    pub field_threshold: f64,
    /// Block scale factors for e11 and e12; balanced on the training split when absent.
    pub field_scaling: Option<[f64; 2]>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stations: DEFAULT_STATIONS,
            fd_threshold: 0.99,
            field_threshold: 0.99,
            field_scaling: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub starts: usize,
    pub bounds: HyperBounds,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            starts: DEFAULT_STARTS,
            bounds: HyperBounds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Informativeness {
    /// Product of the per-parameter 95% HPD widths.
    HpdProduct,
    /// Determinant of the posterior sample covariance.
    CovDeterminant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Parameters of the synthetic specimen.
    pub truth: [f64; 4],
    /// Seeded repeats of the synthetic observation.
    pub repeats: usize,
    /// External force-displacement CSV (`displacement,force`); replaces the
    /// synthetic observation together with `snapshot_file`.
    pub curve_file: Option<PathBuf>,
    /// External strain snapshot CSV (`x,y,active,e11,e12,e22`) on the simulator grid.
    pub snapshot_file: Option<PathBuf>,
    pub informativeness: Informativeness,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            truth: [0.30, 0.019, 0.12, 0.23],
            repeats: 5,
            curve_file: None,
            snapshot_file: None,
            informativeness: Informativeness::HpdProduct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub param_box: ParamBox,
    pub design_size: usize,
    pub train_fraction: f64,
    pub features: FeatureConfig,
    pub noise: NoiseConfig,
    pub surrogate: SurrogateConfig,
    /// The seed inside is ignored; per-task seeds derive from `seed`.
    pub tmcmc: TmcmcConfig,
    pub kde_centers: usize,
    pub experiment: ExperimentSpec,
    pub simulator: SpecimenModel,
    pub loading: LoadingProgram,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            output_dir: PathBuf::from("gtn-calib-out"),
            param_box: ParamBox::default(),
            design_size: 400,
            train_fraction: 0.75,
            features: FeatureConfig::default(),
            noise: NoiseConfig::default(),
            surrogate: SurrogateConfig::default(),
            tmcmc: TmcmcConfig::default(),
            kde_centers: DEFAULT_KDE_CENTERS,
            experiment: ExperimentSpec::default(),
            simulator: SpecimenModel::default(),
            loading: LoadingProgram::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML text, apply `key=value` overrides (dotted keys, values in
    /// TOML syntax or bare strings), then validate. Relative external paths
    /// resolve against `base_dir`.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)], base_dir: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let mut cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(dir) = base_dir {
            for p in [&mut cfg.experiment.curve_file, &mut cfg.experiment.snapshot_file]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a file (or the defaults when `path` is `None`) with overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml_str(&text, overrides, p.parent())
            }
            None => Self::from_toml_str("", overrides, None),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.param_box.validate()?;
        if self.design_size < MIN_DESIGN_SIZE {
            return Err(Error::Config(format!(
                "design size {} below {MIN_DESIGN_SIZE}",
                self.design_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        let f = &self.features;
        for (name, t) in [("fd_threshold", f.fd_threshold), ("field_threshold", f.field_threshold)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("{name} {t} outside (0, 1]")));
            }
        }
        if f.stations < 2 {
            return Err(Error::Config("need at least two resampling stations".into()));
        }
        if let Some(s) = f.field_scaling {
            if !s.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("field scaling {s:?} must be positive")));
            }
        }
        let n = &self.noise;
        let df_ok = match n.sigma_df {
            Some(s) => s > 0.0 && s.is_finite(),
            None => n.sigma_df_fraction > 0.0 && n.sigma_df_fraction.is_finite(),
        };
        if !(n.sigma_fd > 0.0 && n.sigma_dic > 0.0 && df_ok) {
            return Err(Error::Config(format!("noise levels must be positive: {n:?}")));
        }
        self.surrogate.bounds.validate()?;
        if self.surrogate.starts == 0 {
            return Err(Error::Config("surrogate.starts must be positive".into()));
        }
        let t = &self.tmcmc;
        if t.particles < 10 || t.runs == 0 || !(t.proposal_scale > 0.0) || !(t.target_cov > 0.0) {
            return Err(Error::Config(format!("invalid T-MCMC settings {t:?}")));
        }
        if let Some(a) = t.target_acceptance {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("target acceptance {a} outside (0, 1)")));
            }
        }
        let e = &self.experiment;
        if !self.param_box.admits(&e.truth) {
            return Err(Error::Config(format!("truth {:?} outside the parameter box", e.truth)));
        }
        if e.repeats == 0 {
            return Err(Error::Config("experiment.repeats must be positive".into()));
        }
        match (&e.curve_file, &e.snapshot_file) {
            (None, None) => {}
            (Some(c), Some(s)) => {
                for p in [c, s] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("observation file {} not found", p.display())));
                    }
                }
            }
            _ => {
                return Err(Error::Config(
                    "curve_file and snapshot_file must be given together".into(),
                ))
            }
        }
        self.simulator
            .validate()
            .map_err(|err| Error::Config(format!("simulator: {err}")))?;
        self.loading
            .validate()
            .map_err(|err| Error::Config(format!("loading: {err}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the run directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.relocatable()).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Copy with `output_dir` at its default, so that identical runs in
    /// different directories produce identical artifacts.
    pub fn relocatable(&self) -> Self {
        Self {
            output_dir: Self::default().output_dir,
            ..self.clone()
        }
    }

    /// Seed of a named pipeline task.
    pub fn task_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn tmcmc_for(&self, label: &str) -> TmcmcConfig {
        TmcmcConfig {
            seed: self.task_seed(label),
            ..self.tmcmc
        }
    }
}

/// First eight bytes of `SHA-256(seed ‖ label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn parse_value(raw: &str) -> toml::Value {
    // A bare value parses as TOML when it can; otherwise it is a string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[], None).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.param_box.lower, [0.1, 0.01, 0.01, 0.15]);
        assert_eq!(c.noise.sigma_fd, 12.0);
        let round = ExperimentConfig::from_toml_str(&c.to_toml().unwrap(), &[], None).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn partial_tables_and_overrides() {
        let text = "design_size = 64\n[noise]\nsigma_fd = 5.0\n[tmcmc]\nparticles = 300\n";
        let ov = vec![
            parse_override("tmcmc.runs=4").unwrap(),
            parse_override("output_dir = /tmp/x").unwrap(),
            parse_override("param_box.upper=[0.5, 0.05, 0.15, 0.3]").unwrap(),
        ];
        let c = ExperimentConfig::from_toml_str(text, &ov, None).unwrap();
        assert_eq!(c.design_size, 64);
        assert_eq!(c.noise.sigma_fd, 5.0);
        assert_eq!(c.noise.sigma_dic, 200e-6);
        assert_eq!((c.tmcmc.particles, c.tmcmc.runs, c.tmcmc.mh_steps), (300, 4, 3));
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.param_box.upper[3], 0.3);
    }

    #[test]
    fn invariants_enforced() {
        for bad in [
            "design_size = 15",
            "train_fraction = 1.0",
            "unknown_key = 3",
            "[experiment]\ncurve_file = \"/nonexistent.csv\"\nsnapshot_file = \"/nonexistent.csv\"",
            "[experiment]\ntruth = [0.3, 0.02, 0.3, 0.2]",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(bad, &[], None), Err(Error::Config(_))),
                "{bad}"
            );
        }
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn hashes_and_seeds() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.task_seed("design"), a.task_seed("split"));
        assert_eq!(a.task_seed("design"), derive_seed(a.seed, "design"));
    }
}
