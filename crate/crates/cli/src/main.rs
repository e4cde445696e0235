use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shootseg::config::RunConfig;
use shootseg::segment::Task;
use shootseg_cli::commands::{self, Run};
use shootseg_cli::service::{self, AppState};
use shootseg_cli::{CliError, CliResult};

/// Weakly-supervised plant shoot segmentation pipeline.
#[derive(Parser)]
#[command(name = "shootseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file; unset keys keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3` (repeatable, applied after --config)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WithOut {
    #[command(flatten)]
    common: Common,
    /// Output directory; receives run.cfg, log.txt and the results
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labeled plants, ground-truth traits and a manifest
    Synth(WithOut),
    /// Subsample training clouds and draw sparse weak labels
    Weaklabel(WithOut),
    /// Self-supervised backbone pretraining
    Pretrain(WithOut),
    /// Fine-tune the semantic head from weak labels
    FinetuneSem(WithOut),
    /// Fine-tune semantic and offset heads from weak labels
    FinetuneInst(WithOut),
    /// Predict labels and leaf instances
    Infer(WithOut),
    /// Compare predicted clouds against ground truth
    Evaluate(WithOut),
    /// Measure stem diameter and leaf length/width
    Traits(WithOut),
    /// Print a checkpoint summary
    DescribeCheckpoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the annotation HTTP service
    Serve(Common),
}

fn config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply(o)?;
    }
    Ok(cfg)
}

fn pipeline(args: &WithOut, f: impl FnOnce(&mut Run) -> CliResult<()>) -> CliResult<()> {
    let mut run = Run::create(config(&args.common)?, &args.out)?;
    f(&mut run)
}

fn serve(common: &Common) -> CliResult<()> {
    let cfg = config(common)?;
    let data = cfg.require_path("serve.data_dir")?.to_path_buf();
    let sessions = cfg
        .path("serve.session_dir")
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data.join("sessions"));
    let state = AppState::open(&data, &sessions)?;
    let addr = cfg.get("serve.addr").to_string();
    tokio::runtime::Runtime::new()
        .and_then(|rt| rt.block_on(service::serve(state, &addr)))
        .map_err(|e| CliError::Data(format!("service failed: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => pipeline(a, commands::synth),
        Command::Weaklabel(a) => pipeline(a, commands::weaklabel),
        Command::Pretrain(a) => pipeline(a, commands::pretrain_cmd),
        Command::FinetuneSem(a) => pipeline(a, |r| commands::finetune_cmd(r, Task::Semantic)),
        Command::FinetuneInst(a) => pipeline(a, |r| commands::finetune_cmd(r, Task::Instance)),
        Command::Infer(a) => pipeline(a, commands::infer_cmd),
        Command::Evaluate(a) => pipeline(a, commands::evaluate),
        Command::Traits(a) => pipeline(a, commands::traits_cmd),
        Command::DescribeCheckpoint { common, out } => commands::describe_checkpoint(&config(common)?, out.as_deref()),
        Command::Serve(common) => serve(common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
