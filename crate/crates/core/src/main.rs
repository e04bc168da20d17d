use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sei_al::harness::{self, ExperimentConfig};
use sei_al::model::{load_checkpoint, save_checkpoint};
use sei_al::selection::{selection_csv_rows, SELECTION_CSV_HEADER};
use sei_al::signal::{generate_records, save_iq_file, ChannelConfig, IqRecord, SimulationConfig};
use sei_al::training::{metrics_csv, train_stage2, write_metrics_csv};
use sei_al::{Error, Result};

#[derive(Parser)]
#[command(name = "sei-al", version, about = "Emitter identification with contrastive pretraining and active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic I/Q dataset file.
    Simulate {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage 1 only: contrastive pretraining on the unlabeled pool.
    Pretrain {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage 2 on the initial labeled pool, optionally from a checkpoint.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score the unlabeled pool with a trained checkpoint and print picks.
    Select {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Full experiment: stage 1, then train / evaluate / select rounds.
    Run {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Aggregate run directories into accuracy curves.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Every configuration key as a flag of the same name.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "data_file")]
    data_file: Option<String>,
    #[arg(long = "num_emitters")]
    num_emitters: Option<String>,
    #[arg(long = "per_emitter")]
    per_emitter: Option<String>,
    #[arg(long = "length")]
    length: Option<String>,
    #[arg(long = "snr_db", allow_hyphen_values = true)]
    snr_db: Option<String>,
    #[arg(long = "multipath")]
    multipath: Option<String>,
    #[arg(long = "test_fraction")]
    test_fraction: Option<String>,
    #[arg(long = "initial_labeled")]
    initial_labeled: Option<String>,
    #[arg(long = "rounds")]
    rounds: Option<String>,
    #[arg(long = "budget")]
    budget: Option<String>,
    #[arg(long = "strategy")]
    strategy: Option<String>,
    #[arg(long = "stage1_epochs")]
    stage1_epochs: Option<String>,
    #[arg(long = "stage2_epochs")]
    stage2_epochs: Option<String>,
    #[arg(long = "lr")]
    lr: Option<String>,
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    #[arg(long = "tau")]
    tau: Option<String>,
    #[arg(long = "queue_depth")]
    queue_depth: Option<String>,
    #[arg(long = "momentum")]
    momentum: Option<String>,
    #[arg(long = "alpha")]
    alpha: Option<String>,
    #[arg(long = "mc_passes")]
    mc_passes: Option<String>,
    #[arg(long = "conv_channels")]
    conv_channels: Option<String>,
    #[arg(long = "pretrain")]
    pretrain: Option<String>,
    #[arg(long = "contrastive")]
    contrastive: Option<String>,
    #[arg(long = "pretrain_every_round")]
    pretrain_every_round: Option<String>,
    #[arg(long = "cold_start")]
    cold_start: Option<String>,
    #[arg(long = "baseline")]
    baseline: Option<String>,
    #[arg(long = "save_checkpoints")]
    save_checkpoints: Option<String>,
    #[arg(long = "out_dir")]
    out_dir: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("data_file", &self.data_file),
            ("num_emitters", &self.num_emitters),
            ("per_emitter", &self.per_emitter),
            ("length", &self.length),
            ("snr_db", &self.snr_db),
            ("multipath", &self.multipath),
            ("test_fraction", &self.test_fraction),
            ("initial_labeled", &self.initial_labeled),
            ("rounds", &self.rounds),
            ("budget", &self.budget),
            ("strategy", &self.strategy),
            ("stage1_epochs", &self.stage1_epochs),
            ("stage2_epochs", &self.stage2_epochs),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("tau", &self.tau),
            ("queue_depth", &self.queue_depth),
            ("momentum", &self.momentum),
            ("alpha", &self.alpha),
            ("mc_passes", &self.mc_passes),
            ("conv_channels", &self.conv_channels),
            ("pretrain", &self.pretrain),
            ("contrastive", &self.contrastive),
            ("pretrain_every_round", &self.pretrain_every_round),
            ("cold_start", &self.cold_start),
            ("baseline", &self.baseline),
            ("save_checkpoints", &self.save_checkpoints),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(seed) = seed {
            cfg.seed = Some(seed);
        }
        Ok(cfg)
    }
}

fn simulate(output: PathBuf, seed: u64, config: &ConfigArgs) -> Result<()> {
    let cfg = config.resolve(Some(seed))?;
    let channel = if cfg.multipath {
        let mut rng = sei_al::rng::stream_rng(seed, sei_al::rng::stream::SIMULATION, 1);
        ChannelConfig::random_multipath(cfg.snr_db, &mut rng)
    } else {
        ChannelConfig::flat(cfg.snr_db)
    };
    let sim = SimulationConfig::new(cfg.num_emitters, cfg.per_emitter, cfg.length, channel);
    let (records, profiles) = generate_records(&sim, seed)?;
    save_iq_file(&output, &records, sim.sample_rate)?;
    for p in &profiles {
        log::info!("{p:?}");
    }
    println!("wrote {} records to {}", records.len(), output.display());
    Ok(())
}

fn pretrain(output: PathBuf, seed: Option<u64>, config: &ConfigArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        pretrain: true,
        ..config.resolve(seed)?
    };
    let prepared = harness::prepare(&cfg)?;
    save_checkpoint(&output, &prepared.params, cfg.require_seed()?, "stage1")?;
    write_metrics_csv(output.with_extension("csv"), &prepared.stage1)?;
    print!("{}", metrics_csv(&prepared.stage1));
    Ok(())
}

fn train(checkpoint: Option<PathBuf>, output: PathBuf, seed: Option<u64>, config: &ConfigArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        pretrain: false,
        ..config.resolve(seed)?
    };
    let seed = cfg.require_seed()?;
    let mut prepared = harness::prepare(&cfg)?;
    if let Some(path) = checkpoint {
        let (params, _) = load_checkpoint(&path, Some(&prepared.params.config))?;
        prepared.params = params;
    }
    let labeled: Vec<&IqRecord> = prepared.pools.labeled().collect();
    let mut rng = sei_al::rng::stream_rng(seed, sei_al::rng::stream::FINETUNE, 0);
    let tc = cfg.train_config(cfg.stage2_epochs);
    let metrics = train_stage2(&mut prepared.params, &labeled, &mut prepared.queue, &tc, &mut rng)?;
    save_checkpoint(&output, &prepared.params, seed, "stage2")?;
    write_metrics_csv(output.with_extension("csv"), &metrics)?;
    let test: Vec<&IqRecord> = prepared.pools.test().iter().collect();
    let eval = sei_al::training::evaluate(&prepared.params, &test)?;
    print!("{}", metrics_csv(&metrics));
    println!("test accuracy {:.4}", eval.accuracy);
    Ok(())
}

fn select(checkpoint: PathBuf, seed: Option<u64>, config: &ConfigArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        pretrain: false,
        ..config.resolve(seed)?
    };
    let mut prepared = harness::prepare(&cfg)?;
    let (params, _) = load_checkpoint(&checkpoint, Some(&prepared.params.config))?;
    prepared.params = params;
    let candidates = prepared.pools.unlabeled_ids();
    let picked = harness::select_candidates(&cfg, &prepared.params, &prepared.pools, &candidates, 0)?;
    println!("{SELECTION_CSV_HEADER}");
    print!("{}", selection_csv_rows(0, &picked, &candidates));
    Ok(())
}

fn run(seed: u64, config: &ConfigArgs) -> Result<()> {
    let mut cfg = config.resolve(Some(seed))?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(harness::default_run_dir(&cfg));
    }
    let outcome = harness::run_experiment(&cfg)?;
    print!("{}", harness::rounds_csv(&outcome.reports));
    println!(
        "run directory: {}",
        cfg.out_dir.as_deref().map_or(String::new(), |p| p.display().to_string())
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { output, seed, config } => simulate(output, seed, &config),
        Command::Pretrain { output, seed, config } => pretrain(output, seed, &config),
        Command::Train {
            checkpoint,
            output,
            seed,
            config,
        } => train(checkpoint, output, seed, &config),
        Command::Select { checkpoint, seed, config } => select(checkpoint, seed, &config),
        Command::Run { seed, config } => run(seed, &config),
        Command::Report { dir } => harness::report(&dir).map(|summary| print!("{}", summary.table())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
