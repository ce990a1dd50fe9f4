//! Run directories and their manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cadaseg::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use cadaseg::config::ExperimentConfig;
use cadaseg::data::DomainDatasets;
use cadaseg::eval::{evaluate_model, MetricsRow};
use cadaseg::report::metrics_csv;
use cadaseg::trainer::TrainOutcome;
use cadaseg::{DomainId, Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const HISTORY: &str = "history.csv";
pub const VALIDATION: &str = "validation.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.json";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started: String,
    pub finished: Option<String>,
    pub data_secs: Option<f64>,
    pub train_secs: Option<f64>,
    pub eval_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub config: ExperimentConfig,
    pub dataset_hash: String,
    pub test_set_hash: String,
    /// Output file names relative to the run directory.
    pub paths: BTreeMap<String, String>,
    pub timings: Timings,
    /// Checkpoint this run started from, if any.
    pub parent: Option<PathBuf>,
}

pub fn now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

pub fn stamp() -> String {
    chrono::Utc::now().format("%Y%m%d-%H%M%S-%3f").to_string()
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .next()
            .is_some();
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    create_dir(dir)
}

pub fn run_dir_name(method: &str, seed: u64) -> String {
    format!("{method}_{seed}_{}", stamp())
}

/// Open run directory; the manifest is on disk from creation onward.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn start(
        dir: PathBuf,
        force: bool,
        config: &ExperimentConfig,
        ds: &DomainDatasets,
        parent: Option<PathBuf>,
        data_secs: f64,
    ) -> Result<Self> {
        prepare_output(&dir, force)?;
        create_dir(&dir.join("checkpoints"))?;
        write(&dir.join(CONFIG), &config.to_toml()?)?;
        let manifest = RunManifest {
            status: "running".into(),
            config: config.clone(),
            dataset_hash: ds.content_hash(),
            test_set_hash: ds.test_set_hash(),
            paths: BTreeMap::from([("config".to_string(), CONFIG.to_string())]),
            timings: Timings {
                started: now(),
                data_secs: Some(data_secs),
                ..Timings::default()
            },
            parent,
        };
        let run = Self {
            dir,
            manifest,
            clock: Instant::now(),
        };
        run.save_manifest()?;
        Ok(run)
    }

    pub fn save_manifest(&self) -> Result<()> {
        write(&self.dir.join(MANIFEST), &serde_json::to_string_pretty(&self.manifest)?)
    }

    fn record(&mut self, key: &str, file: &str) {
        self.manifest.paths.insert(key.to_string(), file.to_string());
    }

    /// Writes histories, checkpoints and test metrics, then finalizes the manifest.
    pub fn finish(&mut self, outcome: &TrainOutcome, ds: &DomainDatasets) -> Result<MetricsRow> {
        self.manifest.timings.train_secs = Some(self.clock.elapsed().as_secs_f64());
        write(&self.dir.join(HISTORY), &outcome.history.losses_csv()?)?;
        write(&self.dir.join(VALIDATION), &outcome.history.validation_csv()?)?;
        let last = outcome.history.losses.last().map_or(0, |r| r.iter);
        let teacher = outcome.teacher.as_ref().map(|t| &t.params);
        save_checkpoint(&self.dir.join(BEST_CHECKPOINT), &outcome.best, None, outcome.history.best_iteration)?;
        save_checkpoint(&self.dir.join(FINAL_CHECKPOINT), &outcome.student, teacher, last)?;
        for (k, f) in [("history", HISTORY), ("validation", VALIDATION), ("best_checkpoint", BEST_CHECKPOINT), ("final_checkpoint", FINAL_CHECKPOINT)] {
            self.record(k, f);
        }
        let eval_clock = Instant::now();
        let method = self.manifest.config.method.name();
        let row = evaluate_model(method, &outcome.best, &ds.test, DomainId::Target, ds.spacing)?;
        self.manifest.timings.eval_secs = Some(eval_clock.elapsed().as_secs_f64());
        write(&self.dir.join(METRICS_JSON), &serde_json::to_string_pretty(&row)?)?;
        write(&self.dir.join(METRICS_CSV), &metrics_csv(std::slice::from_ref(&row))?)?;
        self.record("metrics", METRICS_JSON);
        self.record("metrics_csv", METRICS_CSV);
        self.manifest.status = "complete".into();
        self.manifest.timings.finished = Some(now());
        self.save_manifest()?;
        Ok(row)
    }

    /// Marks the manifest as failed; the original error is kept by the caller.
    pub fn fail(&mut self, err: &Error) {
        self.manifest.status = format!("failed: {err}");
        self.manifest.timings.finished = Some(now());
        let _ = self.save_manifest();
    }
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&read(&dir.join(MANIFEST))?)?)
}

pub fn load_metrics(dir: &Path) -> Result<MetricsRow> {
    Ok(serde_json::from_str(&read(&dir.join(METRICS_JSON))?)?)
}

/// Best checkpoint of a run directory, or the file itself.
pub fn load_model(path: &Path) -> Result<LoadedCheckpoint> {
    if path.is_dir() {
        load_checkpoint(&path.join(BEST_CHECKPOINT))
    } else {
        load_checkpoint(path)
    }
}
