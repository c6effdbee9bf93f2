use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fractal_sgd::config::ExperimentConfig;
use fractal_sgd::manifest::Manifest;
use fractal_sgd::Error;

use crate::{CliResult, Failure, EXIT_CONFIG, EXIT_FAILED};

fn config_error(path: &Path, message: impl Into<String>) -> Failure {
    Error::Config {
        path: path.to_path_buf(),
        message: message.into(),
    }
    .into()
}

/// Load a TOML config, or the config echo of a manifest written by
/// `command`. Without a path the defaults are used.
pub fn load_config(path: Option<&Path>, command: &str) -> CliResult<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    if path.extension().is_some_and(|e| e == "json") {
        let m = Manifest::read(path).map_err(|e| config_error(path, e.to_string()))?;
        if m.command != command {
            return Err(config_error(
                path,
                format!("manifest was written by `{}`, not `{command}`", m.command),
            ));
        }
        return serde_json::from_value(m.config).map_err(|e| config_error(path, e.to_string()));
    }
    Ok(ExperimentConfig::load(path)?)
}

pub fn require_config(path: Option<&Path>, command: &str) -> CliResult<ExperimentConfig> {
    if path.is_none() {
        return Err(Failure::new(EXIT_CONFIG, format!("`{command}` needs --config")));
    }
    load_config(path, command)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_FAILED, format!("{}: {e}", path.display()))
}

/// An output directory whose files are all recorded in its `manifest.json`.
pub struct OutDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    pub fn create<C: Serialize>(out: Option<&Path>, command: &str, config: &C, seed: u64) -> CliResult<Self> {
        let manifest = Manifest::new(command, config, seed)?;
        let root = match out {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from("runs").join(format!("{command}-{}", &manifest.run_id[..12])),
        };
        fs::create_dir_all(&root).map_err(|e| io_failure(&root, e))?;
        Ok(OutDir { root, manifest })
    }

    /// Absolute path for `rel`, creating parent directories.
    pub fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
        }
        Ok(p)
    }

    /// Hash a file already written under the root into the manifest.
    pub fn record(&mut self, rel: &str) -> CliResult {
        Ok(self.manifest.add_artifact(&self.root, rel)?)
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> CliResult {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| io_failure(&p, e))?;
        self.record(rel)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    /// Write rows through a CSV writer and record the file.
    pub fn write_csv(&mut self, rel: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Failure::new(EXIT_FAILED, format!("{rel}: {e}"));
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?;
        self.write_bytes(rel, &bytes)
    }

    pub fn finish(self) -> CliResult<PathBuf> {
        self.manifest.write(&self.root.join("manifest.json"))?;
        log::info!("wrote {}", self.root.display());
        Ok(self.root)
    }
}

/// `{:e}` keeps full precision and round-trips.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}
