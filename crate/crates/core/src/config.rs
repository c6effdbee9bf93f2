//! TOML experiment configuration.
//!
//! Every section is optional and falls back to the defaults below, so a
//! minimal file is just `schema_version = 1`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, IdxOptions, SplitSpec};
use crate::ffpe::{self, FfpeProblem, Grid};
use crate::llc::{SgldConfig, ToyPotential};
use crate::nn::{Architecture, OptimizerConfig};
use crate::trainer::RunConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Relative IDX paths resolve against this directory when it is set.
pub const DATA_DIR_ENV: &str = "FRACTAL_SGD_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub llc: SgldConfig,
    #[serde(default)]
    pub llc_toy: Option<ToyConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub ffpe: FfpeConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::sgd(0.01, 32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub subset_size: Option<usize>,
    pub blobs: BlobsConfig,
    pub idx: IdxConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Blobs,
            train_fraction: 0.75,
            split_seed: 0,
            subset_size: None,
            blobs: BlobsConfig::default(),
            idx: IdxConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            classes: 4,
            dim: 8,
            per_class: 200,
            spread: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub classes: usize,
    pub standardize: bool,
}

impl Default for IdxConfig {
    fn default() -> Self {
        IdxConfig {
            images: "train-images-idx3-ubyte".into(),
            labels: "train-labels-idx1-ubyte".into(),
            classes: 10,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32, 32],
            batch_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub epochs: u64,
    pub seed: u64,
    pub telemetry_every: u64,
    pub checkpoint_every: Option<u64>,
    /// 0 disables LLC estimation.
    pub llc_every: u64,
    pub kurtosis_threshold: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            epochs: 10,
            seed: 0,
            telemetry_every: crate::trainer::DEFAULT_TELEMETRY_EVERY,
            checkpoint_every: None,
            llc_every: crate::trainer::DEFAULT_TELEMETRY_EVERY,
            kurtosis_threshold: crate::trainer::DEFAULT_KURTOSIS_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub potential: ToyPotential,
    #[serde(default = "default_toy_m")]
    pub sample_size: usize,
}

fn default_toy_m() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub discard_fraction: f64,
    pub histogram_bins: usize,
    /// Length scale for the reported effective diffusion coefficient.
    pub xi: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            discard_fraction: crate::analysis::DEFAULT_DISCARD_FRACTION,
            histogram_bins: 10,
            xi: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Seeds per architecture: `run.seed, run.seed + 1, ...`.
    pub runs: usize,
    /// Hidden-width lists to sweep; empty means `model.hidden` only.
    pub architectures: Vec<Vec<usize>>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            runs: 20,
            architectures: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    #[default]
    DoubleWell,
    Quadratic,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    /// Two Gaussians at `±initial_mean`.
    #[default]
    Pair,
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FfpeConfig {
    pub a: f64,
    pub b: f64,
    pub cells: usize,
    pub potential: PotentialKind,
    /// `k` in `k x^2 / 2` for the quadratic potential.
    pub stiffness: f64,
    pub diffusion: f64,
    /// Periodic `D(x)` values, each held for `period_cells / len` cells.
    pub diffusion_pattern: Vec<f64>,
    pub period_cells: usize,
    pub gamma: f64,
    pub alphas: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub snapshot_every: usize,
    pub initial: InitialKind,
    pub initial_mean: f64,
    pub initial_std: f64,
}

impl Default for FfpeConfig {
    fn default() -> Self {
        FfpeConfig {
            a: -2.0,
            b: 2.0,
            cells: 200,
            potential: PotentialKind::DoubleWell,
            stiffness: 1.0,
            diffusion: 0.5,
            diffusion_pattern: Vec::new(),
            period_cells: 4,
            gamma: 1.0,
            alphas: vec![1.0],
            dt: 0.01,
            steps: 1000,
            snapshot_every: 100,
            initial: InitialKind::Pair,
            initial_mean: 1.0,
            initial_std: 0.2,
        }
    }
}

impl FfpeConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.a, self.b, self.cells)
    }

    pub fn problem(&self, alpha: f64) -> Result<FfpeProblem> {
        let grid = self.grid()?;
        let k = self.stiffness;
        let v: Box<dyn Fn(f64) -> f64> = match self.potential {
            PotentialKind::DoubleWell => Box::new(ffpe::double_well),
            PotentialKind::Quadratic => Box::new(move |x| 0.5 * k * x * x),
            PotentialKind::Flat => Box::new(|_| 0.0),
        };
        let potential = grid.centers().into_iter().map(v).collect();
        let diffusion = if self.diffusion_pattern.is_empty() {
            vec![self.diffusion; grid.cells]
        } else {
            let run = (self.period_cells / self.diffusion_pattern.len()).max(1);
            (0..grid.cells)
                .map(|i| self.diffusion_pattern[(i / run) % self.diffusion_pattern.len()])
                .collect()
        };
        FfpeProblem::from_values(grid, potential, diffusion, self.gamma, alpha, self.dt)
    }

    pub fn initial_density(&self) -> Result<Vec<f64>> {
        let g = self.grid()?;
        Ok(match self.initial {
            InitialKind::Uniform => vec![1.0; g.cells],
            InitialKind::Gaussian => ffpe::gaussian_density(&g, self.initial_mean, self.initial_std),
            InitialKind::Pair => {
                let l = ffpe::gaussian_density(&g, -self.initial_mean, self.initial_std);
                let r = ffpe::gaussian_density(&g, self.initial_mean, self.initial_std);
                l.iter().zip(&r).map(|(a, b)| a + b).collect()
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Substrate {
    #[default]
    Gasket,
    Chain,
    Lattice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub substrate: Substrate,
    /// Gasket recursion level.
    pub level: u32,
    /// Half-width for chain and lattice controls.
    pub half_width: usize,
    pub walkers: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            substrate: Substrate::Gasket,
            level: 8,
            half_width: 200,
            walkers: 100_000,
            steps: 10_000,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.optimizer.validate()?;
        if self.run.telemetry_every == 0 {
            return Err(Error::InvalidInput("run.telemetry_every must be at least 1".into()));
        }
        if !(self.analysis.discard_fraction >= 0.0 && self.analysis.discard_fraction < 1.0) {
            return Err(Error::InvalidInput("analysis.discard_fraction must lie in [0, 1)".into()));
        }
        if self.ffpe.alphas.is_empty() {
            return Err(Error::InvalidInput("ffpe.alphas must not be empty".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, hidden: &[usize], input_dim: usize, classes: usize) -> Result<Architecture> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        Ok(Architecture::new(widths)?.with_batch_norm(self.model.batch_norm))
    }

    pub fn run_config(&self, hidden: &[usize], input_dim: usize, classes: usize, seed: u64) -> Result<RunConfig> {
        let arch = self.architecture(hidden, input_dim, classes)?;
        let mut rc = RunConfig::new(arch, self.optimizer.clone(), self.run.epochs, seed);
        rc.telemetry_every = self.run.telemetry_every;
        rc.checkpoint_every = self.run.checkpoint_every;
        rc.llc_every = (self.run.llc_every > 0).then_some(self.run.llc_every);
        rc.sgld = self.llc.clone();
        rc.kurtosis_threshold = self.run.kurtosis_threshold;
        Ok(rc)
    }

    /// Every `(hidden, seed)` pair of the ensemble sweep.
    pub fn ensemble_members(&self) -> Vec<(Vec<usize>, u64)> {
        let archs = if self.ensemble.architectures.is_empty() {
            vec![self.model.hidden.clone()]
        } else {
            self.ensemble.architectures.clone()
        };
        archs
            .iter()
            .flat_map(|h| (0..self.ensemble.runs as u64).map(move |i| (h.clone(), self.run.seed + i)))
            .collect()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optimizer: default_optimizer(),
            run: RunSection::default(),
            llc: SgldConfig::default(),
            llc_toy: None,
            analysis: AnalysisConfig::default(),
            ensemble: EnsembleConfig::default(),
            ffpe: FfpeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn resolve(path: &Path, data_dir: Option<&Path>) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

/// Directory from the data-dir environment variable, if set.
pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Build the train/test split described by `cfg`.
pub fn load_data(cfg: &DataConfig, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let ds = match cfg.source {
        DataSource::Blobs => {
            let b = &cfg.blobs;
            data::synth_blobs(b.classes, b.dim, b.per_class, b.spread, b.seed)?
        }
        DataSource::Idx => data::load_idx(
            &resolve(&cfg.idx.images, data_dir),
            &resolve(&cfg.idx.labels, data_dir),
            IdxOptions {
                classes: Some(cfg.idx.classes),
                standardize: cfg.idx.standardize,
            },
        )?,
    };
    let spec = SplitSpec {
        subset_size: cfg.subset_size,
        ..SplitSpec::new(cfg.train_fraction, cfg.split_seed)
    };
    Ok(data::split(&ds, &spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse("schema_version = 1\n", Path::new("x.toml")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.llc_toy = Some(ToyConfig {
            potential: ToyPotential::Quadratic { dim: 4 },
            sample_size: 100,
        });
        c.ensemble.architectures = vec![vec![8], vec![16, 16]];
        let back = ExperimentConfig::parse(&c.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_path() {
        let e = ExperimentConfig::parse("schema_version = 2\n", Path::new("bad.toml")).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == Path::new("bad.toml")));
        let e = ExperimentConfig::parse("schema_version = 1\nbogus = 3\n", Path::new("u.toml")).unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = ExperimentConfig::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/cfg.toml"));
    }

    #[test]
    fn ensemble_members_cover_sweep() {
        let mut c = ExperimentConfig::default();
        c.ensemble.runs = 3;
        c.run.seed = 10;
        c.ensemble.architectures = vec![vec![4], vec![8]];
        let m = c.ensemble_members();
        assert_eq!(m.len(), 6);
        assert_eq!(m[0], (vec![4], 10));
        assert_eq!(m[5], (vec![8], 12));
    }

    #[test]
    fn relative_idx_paths_use_data_dir() {
        assert_eq!(resolve(Path::new("a"), Some(Path::new("/d"))), PathBuf::from("/d/a"));
        assert_eq!(resolve(Path::new("/abs"), Some(Path::new("/d"))), PathBuf::from("/abs"));
        let cfg = DataConfig {
            source: DataSource::Idx,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_data(&cfg, Some(dir.path())), Err(Error::Data(_))));
    }
}
