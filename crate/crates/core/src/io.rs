//! Run directories: estimate CSVs, JSON manifests and accumulator dumps.
//!
//! Every estimate file shares one schema,
//! `t, ell, component, estimate, std_error, estimator`, with an empty
//! `std_error` for deterministic theory rows, so empirical and theory files
//! join on `(t, component)`. Figure files use `t, series, component, value, se`.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accum::GroupedSums;
use crate::config::ExperimentConfig;
use crate::diagnostics::ResidualReport;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

/// Version of the on-disk layout written by this crate.
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMS_FILE: &str = "sums.bin";

/// One row of an estimate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub t: f64,
    pub ell: usize,
    pub component: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub estimator: String,
}

/// One row of a figure CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub t: f64,
    pub series: String,
    pub component: String,
    pub value: f64,
    pub se: Option<f64>,
}

pub fn records(reports: &[ResidualReport]) -> Vec<EstimateRecord> {
    reports
        .iter()
        .flat_map(|r| &r.rows)
        .map(|row| EstimateRecord {
            t: row.t,
            ell: row.layer,
            component: row.component.to_string(),
            estimate: row.estimate,
            std_error: row.std_error(),
            estimator: row.estimator.clone(),
        })
        .collect()
}

/// Figure rows from report rows, renaming estimators through `series`;
/// estimators mapped to `None` are dropped.
pub fn series_records<'a>(
    reports: impl IntoIterator<Item = &'a ResidualReport>,
    series: impl Fn(&str) -> Option<&'static str>,
) -> Vec<SeriesRecord> {
    reports
        .into_iter()
        .flat_map(|r| &r.rows)
        .filter_map(|row| {
            Some(SeriesRecord {
                t: row.t,
                series: series(&row.estimator)?.to_string(),
                component: row.component.to_string(),
                value: row.estimate,
                se: row.std_error(),
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Description of a run directory. Contains everything needed to regenerate
/// its files; nothing that depends on the machine or the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    /// Ensemble members `[start, end)` behind the sums, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Range<u64>>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            master_seed: config.ensemble.master_seed,
            config: config.clone(),
            members: None,
            files: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Read `dir/manifest.json`, or `dir` itself if it names a file.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() { dir.join(MANIFEST_FILE) } else { dir.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: format version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        m.config.validate()?;
        Ok(m)
    }
}

/// Output directory, created on demand, that records the files written to it.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    pub fn create(path: &Path, command: &str, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest: Manifest::new(command, config),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    fn record(&mut self, name: &str) -> PathBuf {
        if !self.manifest.files.iter().any(|f| f == name) {
            self.manifest.files.push(name.to_string());
        }
        self.path.join(name)
    }

    pub fn write_reports(&mut self, name: &str, reports: &[ResidualReport]) -> Result<()> {
        let path = self.record(name);
        write_csv(&path, &records(reports))
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.record(name);
        write_csv(&path, rows)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.record(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.record(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Dump the ensemble's accumulators so a later process can rebuild it.
    pub fn write_ensemble(&mut self, ens: &Ensemble) -> Result<()> {
        let path = self.record(SUMS_FILE);
        fs::write(&path, ens.sums().to_bytes()).map_err(|e| Error::io(&path, e))?;
        self.manifest.members = Some(ens.member_range());
        Ok(())
    }

    /// Write the manifest and return its path.
    pub fn finish(self) -> Result<PathBuf> {
        self.manifest.write(&self.path)
    }
}

/// Rebuild the ensemble saved in a run directory.
pub fn load_ensemble(dir: &Path) -> Result<(Manifest, Ensemble)> {
    let manifest = Manifest::read(dir)?;
    let dir = if dir.is_dir() { dir } else { dir.parent().unwrap_or(Path::new(".")) };
    let members = manifest
        .members
        .clone()
        .ok_or_else(|| Error::Config(format!("{}: run has no ensemble sums", dir.display())))?;
    let path = dir.join(SUMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let sums = GroupedSums::from_bytes(&bytes)?;
    let cfg = &manifest.config;
    let ens = Ensemble::from_sums(&cfg.network()?, &cfg.run_options()?, members, sums)?;
    Ok((manifest, ens))
}
