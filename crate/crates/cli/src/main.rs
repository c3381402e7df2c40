mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use promptcount::benchmark::Protocol;
use promptcount::pipeline::PromptMode;
use promptcount::synth::Split;
use promptcount::train::Stage;

use crate::commands::TrainArgs;
use crate::config::RunConfig;

/// Count objects of a prompted class: generate synthetic data, train, evaluate.
#[derive(Parser)]
#[command(name = "promptcount", version)]
struct Cli {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root. Defaults to $PROMPTCOUNT_HOME, then ./runs.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        /// Target directory (default: `dataset` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train the point decoder and region classifier.
    Train {
        /// Run name, a directory under the output root.
        #[arg(long, default_value = "train")]
        run: String,
        /// joint, point or cls.
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
        /// Set the distillation loss weight to zero.
        #[arg(long)]
        no_kd: bool,
        /// Continue from the run's saved state.
        #[arg(long)]
        resume: bool,
        /// Delete an existing run directory first.
        #[arg(long)]
        force: bool,
        /// Start from the parameters of this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Save resumable state every N steps (0 disables).
        #[arg(long, default_value_t = 50)]
        save_every: u64,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        sel: Selection,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write counts.png and pr50.png.
        #[arg(long)]
        plots: bool,
        /// Output directory (default: derived from the config hash).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scene and write an annotated overlay and JSON.
    Infer {
        #[command(flatten)]
        sel: Selection,
        /// Scene id from the dataset manifest.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate eval directories into one table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Selection {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// few or zero.
    #[arg(long, value_parser = parse_protocol)]
    mode: Option<Protocol>,
    /// heatmap or grid.
    #[arg(long, value_parser = parse_prompt_mode)]
    prompt_mode: Option<PromptMode>,
}

impl Selection {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(c) = &self.checkpoint {
            cfg.eval.checkpoint = Some(c.clone());
        }
        if let Some(m) = self.mode {
            cfg.eval.protocol = m;
        }
        if let Some(p) = self.prompt_mode {
            cfg.pipeline.mode = p;
        }
    }
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    Protocol::parse(s).map_err(|e| e.to_string())
}

fn parse_prompt_mode(s: &str) -> Result<PromptMode, String> {
    PromptMode::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.root.clone().unwrap_or_else(config::output_root);
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { out, force } => commands::gen_data(&cfg, &root, out.as_deref(), force),
        Command::Train { run, stage, no_kd, resume, force, init, save_every } => {
            let args = TrainArgs { run, stage, no_kd, resume, force, init, save_every };
            commands::cmd_train(cfg, &root, &args)
        }
        Command::Eval { sel, split, jobs, plots, out } => {
            sel.apply(&mut cfg);
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if let Some(j) = jobs {
                cfg.eval.jobs = j;
            }
            cfg.eval.plots |= plots;
            cfg.validate()?;
            let dir = commands::cmd_eval(cfg, &root, out.as_deref())?;
            log::info!("eval written to {}", dir.display());
            Ok(())
        }
        Command::Infer { sel, scene, out } => {
            sel.apply(&mut cfg);
            commands::cmd_infer(cfg, &root, &scene, &out)
        }
        Command::Report { dirs, out } => commands::cmd_report(&dirs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<promptcount::Error>().map(|e| e.kind()).unwrap_or("cli");
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "error": { "kind": kind, "message": e.to_string(), "chain": chain } }));
            ExitCode::FAILURE
        }
    }
}
