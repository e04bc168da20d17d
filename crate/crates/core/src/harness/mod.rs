//! Experiment driver: data preparation, stage-1 pretraining, the round loop
//! of fine-tuning, evaluation and selection, and run-directory artifacts.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.txt` | configuration snapshot |
//! | `stage1_metrics.csv` | stage-1 loss per epoch |
//! | `stage1.ckpt` | parameters after stage 1 |
//! | `round_<r>.json` | [`RoundReport`] for round `r` |
//! | `round_<r>_metrics.csv` | stage-2 metrics for round `r` |
//! | `round_<r>.ckpt` | parameters after round `r` |
//! | `selection.csv` | every selected record |
//! | `rounds.csv` | all round reports |
//! | `status.txt` | `completed` or the reason the run stopped early |

mod config;
mod report;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, NetworkParams};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::selection::{
    bald_scores, kcenter_greedy, select_bald, select_random, selection_csv_rows, CandidateScores, Strategy,
    SELECTION_CSV_HEADER,
};
use crate::signal::{load_iq_file, ChannelConfig, DatasetPools, IqRecord, PoolSplit, SimulationConfig};
use crate::training::{
    embed_records, evaluate, pretrain_stage1, train_stage2, write_metrics_csv, EpochMetrics, KeyQueue,
};

pub use config::ExperimentConfig;
pub use report::{report, Curve, CurvePoint, Summary};

/// Outcome of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub labeled_count: usize,
    pub test_accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub selector: String,
    pub alpha: f64,
    pub wall_time_s: f64,
}

impl RoundReport {
    /// The report with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    /// The unlabeled pool could not cover the budget after this round.
    PoolExhausted { round: usize },
}

impl RunStatus {
    fn to_line(&self) -> String {
        match self {
            RunStatus::Completed => "completed".to_string(),
            RunStatus::PoolExhausted { round } => format!("pool exhausted after round {round}"),
        }
    }

    fn from_line(line: &str) -> Option<Self> {
        let line = line.trim();
        if line == "completed" {
            return Some(RunStatus::Completed);
        }
        let round = line.strip_prefix("pool exhausted after round ")?.parse().ok()?;
        Some(RunStatus::PoolExhausted { round })
    }
}

/// Data, initial parameters and (optionally) stage-1 results, ready for the
/// round loop. One preparation may be cloned into several runs that differ
/// only in selection or stage-2 settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pools: DatasetPools,
    pub params: NetworkParams,
    pub queue: KeyQueue,
    pub stage1: Vec<EpochMetrics>,
    pub sample_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub status: RunStatus,
    pub params: NetworkParams,
    pub pools: DatasetPools,
}

/// Loads or simulates the dataset and splits it into pools.
pub fn load_pools(config: &ExperimentConfig) -> Result<(DatasetPools, f64)> {
    let seed = config.require_seed()?;
    let split = PoolSplit {
        test_fraction: config.test_fraction,
        initial_labeled: config.initial_labeled,
    };
    match &config.data_file {
        Some(path) => {
            let file = load_iq_file(path)?;
            let pools = DatasetPools::split(file.records, &split, seed)?;
            Ok((pools, file.sample_rate))
        }
        None => {
            let channel = if config.multipath {
                ChannelConfig::random_multipath(config.snr_db, &mut stream_rng(seed, stream::SIMULATION, 1))
            } else {
                ChannelConfig::flat(config.snr_db)
            };
            let sim = SimulationConfig::new(config.num_emitters, config.per_emitter, config.length, channel);
            let (pools, _) = crate::signal::generate_dataset(&sim, &split, seed)?;
            Ok((pools, sim.sample_rate))
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn unlabeled_records(pools: &DatasetPools) -> Vec<&IqRecord> {
    pools.unlabeled().collect()
}

/// Builds pools and parameters and runs stage 1 when enabled.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let seed = config.require_seed()?;
    let (pools, sample_rate) = load_pools(config)?;
    let num_classes = pools.num_classes();
    let length = pools
        .training_records()
        .first()
        .map(IqRecord::len)
        .ok_or_else(|| Error::config("dataset holds no training records"))?;
    if config.data_file.is_none() && (num_classes != config.num_emitters || length != config.length) {
        return Err(Error::config("simulated dataset does not match the configured M and L"));
    }
    let model = config.model_config(num_classes, length);
    let mut params = NetworkParams::new(model, &mut stream_rng(seed, stream::INIT, 0))?;
    let mut queue = KeyQueue::new(config.queue_depth)?;
    let stage1 = if config.pretrain {
        let unlabeled = unlabeled_records(&pools);
        let cfg = config.train_config(config.stage1_epochs);
        pretrain_stage1(&mut params, &unlabeled, &mut queue, &cfg, &mut stream_rng(seed, stream::PRETRAIN, 0))?
    } else {
        Vec::new()
    };
    Ok(Prepared {
        pools,
        params,
        queue,
        stage1,
        sample_rate,
    })
}

pub fn select_candidates(
    config: &ExperimentConfig,
    params: &NetworkParams,
    pools: &DatasetPools,
    candidates: &[usize],
    round: usize,
) -> Result<CandidateScores> {
    let seed = config.require_seed()?;
    let records: Vec<&IqRecord> = candidates.iter().map(|&id| pools.record(id)).collect();
    let strategy = if config.baseline { Strategy::Random } else { config.strategy };
    match strategy {
        Strategy::Random => select_random(candidates.len(), config.budget, derive_seed(seed, stream::SELECT, round as u64)),
        Strategy::Bald => {
            let mut rng = stream_rng(seed, stream::SELECT, round as u64);
            let scores = bald_scores(params, &records, config.mc_passes, &mut rng)?;
            select_bald(&scores, config.budget)
        }
        Strategy::KCenter => {
            let labeled: Vec<&IqRecord> = pools.labeled().collect();
            let centers = embed_records(params, &labeled)?;
            let embeddings = embed_records(params, &records)?;
            kcenter_greedy(&embeddings, &centers, config.budget)
        }
    }
}

/// Runs the round loop on prepared state.
pub fn run_rounds(config: &ExperimentConfig, prepared: Prepared) -> Result<ExperimentOutcome> {
    config.validate()?;
    let seed = config.require_seed()?;
    let Prepared {
        mut pools,
        mut params,
        mut queue,
        stage1,
        ..
    } = prepared;
    let out = config.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write(&dir.join("config.txt"), &config.to_text())?;
        write(&dir.join("selection.csv"), &format!("{SELECTION_CSV_HEADER}\n"))?;
        if config.pretrain {
            write_metrics_csv(dir.join("stage1_metrics.csv"), &stage1)?;
            if config.save_checkpoints {
                save_checkpoint(dir.join("stage1.ckpt"), &params, seed, "stage1")?;
            }
        }
    }
    let snapshot = params.clone();
    let mut reports = Vec::with_capacity(config.rounds + 1);
    let mut status = RunStatus::Completed;
    let mut selection_log = String::new();
    for round in 0..=config.rounds {
        let started = Instant::now();
        if round > 0 && config.cold_start {
            params = snapshot.clone();
        }
        if round > 0 && config.pretrain_every_round {
            let unlabeled = unlabeled_records(&pools);
            let cfg = config.train_config(config.stage1_epochs);
            let mut rng = stream_rng(seed, stream::PRETRAIN, round as u64);
            pretrain_stage1(&mut params, &unlabeled, &mut queue, &cfg, &mut rng)?;
        }
        let labeled: Vec<&IqRecord> = pools.labeled().collect();
        let cfg = config.train_config(config.stage2_epochs);
        let mut rng = stream_rng(seed, stream::FINETUNE, round as u64);
        let metrics = train_stage2(&mut params, &labeled, &mut queue, &cfg, &mut rng)?;
        let test: Vec<&IqRecord> = pools.test().iter().collect();
        let evaluation = evaluate(&params, &test)?;
        let labeled_count = pools.labeled_len();

        let mut picked_rows = String::new();
        if round < config.rounds {
            let candidates = pools.unlabeled_ids();
            if candidates.len() < config.budget {
                log::warn!(
                    "round {round}: {} unlabeled records left, budget is {}; stopping",
                    candidates.len(),
                    config.budget
                );
                status = RunStatus::PoolExhausted { round };
            } else {
                let picked = select_candidates(config, &params, &pools, &candidates, round)?;
                let ids: Vec<usize> = picked.indices.iter().map(|&i| candidates[i]).collect();
                pools.reveal_label(&ids)?;
                picked_rows = selection_csv_rows(round, &picked, &candidates);
            }
        }
        let report = RoundReport {
            round,
            labeled_count,
            test_accuracy: evaluation.accuracy,
            per_class_accuracy: evaluation.per_class,
            selector: config.label(),
            alpha: config.alpha,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}: {labeled_count} labeled, test accuracy {:.4}",
            report.test_accuracy
        );
        if let Some(dir) = out {
            write_metrics_csv(dir.join(format!("round_{round}_metrics.csv")), &metrics)?;
            if config.save_checkpoints {
                save_checkpoint(dir.join(format!("round_{round}.ckpt")), &params, seed, &format!("round{round}"))?;
            }
            selection_log.push_str(&picked_rows);
            write(&dir.join("selection.csv"), &format!("{SELECTION_CSV_HEADER}\n{selection_log}"))?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Report(e.to_string()))?;
            write(&dir.join(format!("round_{round}.json")), &json)?;
        }
        reports.push(report);
        if status != RunStatus::Completed {
            break;
        }
    }
    if let Some(dir) = out {
        write(&dir.join("rounds.csv"), &rounds_csv(&reports))?;
        write(&dir.join("status.txt"), &format!("{}\n", status.to_line()))?;
    }
    Ok(ExperimentOutcome {
        reports,
        status,
        params,
        pools,
    })
}

pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,labeled,test_accuracy,per_class_accuracy,selector,alpha,wall_time_s\n");
    for r in reports {
        let per_class: Vec<String> = r
            .per_class_accuracy
            .iter()
            .map(|a| a.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.3}",
            r.round,
            r.labeled_count,
            r.test_accuracy,
            per_class.join(";"),
            r.selector,
            r.alpha,
            r.wall_time_s
        );
    }
    out
}

/// Full three-stage experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_rounds(config, prepare(config)?)
}

/// Conventional CNN reference on the same data: cross-entropy only, no
/// pretraining, random selection.
pub fn run_baseline_cnn(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment(&config.as_baseline())
}

/// Default run directory for a configuration.
pub fn default_run_dir(config: &ExperimentConfig) -> PathBuf {
    let seed = config.seed.map_or("noseed".to_string(), |s| s.to_string());
    PathBuf::from("runs").join(format!("{}-alpha{}-seed{seed}", config.label(), config.alpha))
}
