//! Run directory layout and model checkpoints.
//!
//! ```text
//! <run>/config.toml        resolved configuration
//! <run>/metrics.jsonl      one JSON object per epoch
//! <run>/state.json         full training state (resumable)
//! <run>/model.ckpt         selected parameters plus vocabulary
//! <run>/report.{json,txt}  test-set scores, when scored
//! <run>/predictions.tsv
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use metainflect::adcore::{params_hash, ParamSet};
use metainflect::corpus::LanguageId;
use metainflect::evalkit::{config_hash, predictions_tsv, EvalReport, PredictionRow};
use metainflect::metatrain::{EpochRecord, JsonlSink, MetaConfig, TrainState};
use metainflect::models::{Model, ModelInfo};

use crate::config::ExperimentConfig;
use crate::CliError;

pub fn save_model(path: &Path, model: &Model, params: &ParamSet, cfg: &MetaConfig, info: ModelInfo) -> Result<(), CliError> {
    metainflect::models::save_model(path, model, params, &config_hash(cfg), cfg.seed, info)?;
    Ok(())
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes the configuration snapshot.
    pub fn create(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        Self::create_at(&cfg.out_dir, Some(cfg))
    }

    pub fn create_at(path: &Path, cfg: Option<&ExperimentConfig>) -> Result<Self, CliError> {
        std::fs::create_dir_all(path)?;
        if let Some(cfg) = cfg {
            std::fs::write(path.join("config.toml"), cfg.to_toml())?;
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn metrics(&self, name: &str) -> Result<JsonlSink<BufWriter<File>>, CliError> {
        Ok(JsonlSink(BufWriter::new(File::create(self.file(name))?)))
    }

    /// Writes an already collected history.
    pub fn write_history(&self, name: &str, history: &[EpochRecord]) -> Result<(), CliError> {
        use metainflect::metatrain::MetricsSink;
        let mut sink = self.metrics(name)?;
        for r in history {
            sink.record(r)?;
        }
        Ok(())
    }

    pub fn save_state(&self, name: &str, state: &TrainState) -> Result<(), CliError> {
        state.save(&self.file(name))?;
        Ok(())
    }

    pub fn save_report(&self, report: &EvalReport, rows: &[PredictionRow]) -> Result<(), CliError> {
        std::fs::write(self.file("report.json"), report.to_json()? + "\n")?;
        std::fs::write(self.file("report.txt"), report.to_table())?;
        std::fs::write(self.file("predictions.tsv"), predictions_tsv(rows))?;
        Ok(())
    }
}

/// Lines printed after every training command.
pub fn announce(run: &RunDir, params: &ParamSet, report: Option<&EvalReport>) {
    println!("run_dir={}", run.path.display());
    println!("checkpoint={}", params_hash(params));
    if let Some(r) = report {
        println!("accuracy={:.4}", r.accuracy());
    }
}

pub fn names(langs: &[LanguageId]) -> Vec<String> {
    langs.iter().map(|l| l.0.clone()).collect()
}
