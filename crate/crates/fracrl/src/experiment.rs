//! Running a configured learning experiment with on-disk checkpoints.
//!
//! Output directory layout:
//! - `run.json`: resolved configuration, derived seeds and crate version
//! - `runlog.csv`: one row per completed iteration, rewritten each time
//! - `model_iter_{m}.json`, `dataset.csv`: written at each snapshot
//! - `model.json`, `trace.csv`: final model and the last episode trace

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fracrl_core::mbrl::{self, RunLog, RunObserver, RunRecord};
use fracrl_core::model::FracModel;
use fracrl_core::seed::{derive_seed, ENV, EVAL, MODEL_NOISE, SEED_DATA};
use fracrl_core::sysid::EpisodeDataset;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::formats::{model_to_json, write_dataset, write_runlog, write_trace, FormatError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run failed after {completed} iterations: {kind}")]
    Run { completed: usize, kind: mbrl::RunErrorKind },
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_version: &'static str,
    master_seed: u64,
    seeds: Seeds,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct Seeds {
    env_iteration_1: u64,
    model_noise: u64,
    seed_data: u64,
    eval: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: FracModel,
    pub log: RunLog,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(io_err(path))
}

struct Checkpoints<'a> {
    dir: &'a Path,
    records: Vec<RunRecord>,
}

impl Checkpoints<'_> {
    fn write_log(&self) -> Result<(), ExperimentError> {
        let path = self.dir.join("runlog.csv");
        write_runlog(&self.records, create(&path)?)?;
        Ok(())
    }
}

impl RunObserver for Checkpoints<'_> {
    fn iteration_done(&mut self, record: &RunRecord, _model: &FracModel, _data: &EpisodeDataset) -> Result<(), String> {
        self.records.push(*record);
        log::info!(
            "iteration {}: return {:.3}, in range {:.1}%",
            record.iteration,
            record.episode_return,
            record.tir.within
        );
        self.write_log().map_err(|e| e.to_string())
    }

    fn snapshot(&mut self, iteration: usize, model: &FracModel, data: &EpisodeDataset) -> Result<(), String> {
        let write = || -> Result<(), ExperimentError> {
            write_text(&self.dir.join(format!("model_iter_{iteration}.json")), &model_to_json(model))?;
            write_dataset(data, create(&self.dir.join("dataset.csv"))?)?;
            Ok(())
        };
        write().map_err(|e| e.to_string())
    }
}

/// Runs the experiment described by a resolved `cfg` under master `seed`,
/// writing artifacts into `out`. Artifacts of completed iterations are kept
/// when the run aborts.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<ExperimentOutcome, ExperimentError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        master_seed: seed,
        seeds: Seeds {
            env_iteration_1: derive_seed(seed, ENV, 1),
            model_noise: derive_seed(seed, MODEL_NOISE, 0),
            seed_data: derive_seed(seed, SEED_DATA, 0),
            eval: derive_seed(seed, EVAL, 0),
        },
        config: &cfg,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(FormatError::from)?;
    write_text(&out.join("run.json"), &text)?;

    let mut env = cfg.environment()?;
    let rl = cfg.rl_config(seed);
    let (lower, upper) = rl
        .mpc
        .action_bounds
        .clone()
        .expect("experiment configurations always bound the action");
    let m = &cfg.mbrl;
    let seed_len = m.seed_episode_len.unwrap_or(rl.episode_len);
    let seed_data = mbrl::generate_seed_data(&mut env, m.seed_episodes, seed_len, &lower, &upper, seed)
        .map_err(|kind| ExperimentError::Run { completed: 0, kind })?;

    let mut obs = Checkpoints {
        dir: out,
        records: Vec::new(),
    };
    let outcome = mbrl::run(&mut env, &seed_data, &rl, &mut obs).map_err(|e| ExperimentError::Run {
        completed: e.log.records.len(),
        kind: e.kind,
    })?;
    write_text(&out.join("model.json"), &model_to_json(&outcome.model))?;
    write_trace(env.trace(), create(&out.join("trace.csv"))?)?;
    Ok(ExperimentOutcome {
        model: outcome.model,
        log: outcome.log,
    })
}
