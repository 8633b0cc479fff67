use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use headsim_core::metrics::Protocol;
use headsim_core::model::Variant;
use headsim_core::objectives::Margins;
use headsim_core::runner::{
    cmd_ablate, cmd_eval, cmd_pipeline, cmd_plot_roc, cmd_synth, cmd_train, ExperimentConfig, Overrides, PipelineStage,
    OUTPUT_ROOT_ENV,
};

#[derive(Parser, Debug)]
#[command(name = "headsim", version, about = "Whole-head similarity: synthetic world, dataset pipeline, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; missing fields take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    /// Model variant: dual_cls, shared, dual_head_split or dual_head_both.
    #[arg(long)]
    variant: Option<Variant>,
    /// Hierarchical margins as m1,m2,m3.
    #[arg(long)]
    margins: Option<Margins>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            variant: self.variant,
            margins: self.margins,
        };
        ExperimentConfig::resolve(self.config.as_deref(), &overrides).context("resolving the experiment config")
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic world and its video clips.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Build relation-labelled samples from a frame/detection manifest.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Frame manifest written by `synth` (videos/frames.jsonl).
        #[arg(long)]
        frames: PathBuf,
        /// Last stage whose outputs are written.
        #[arg(long, default_value = "relations")]
        stage: PipelineStage,
    },
    /// Train an encoder; resumes when --checkpoint is given.
    Train {
        #[command(flatten)]
        common: Common,
        /// World manifest; the world is rendered in memory when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the oracle teacher) on held-out identities.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint to evaluate; the oracle teacher is evaluated when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// identity, appearance or all.
        #[arg(long, default_value = "all")]
        protocol: String,
    },
    /// Train and compare the four token/projection variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Draw ROC CSV files into one SVG chart.
    PlotRoc {
        /// CSV files written by `eval`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ROC")]
        title: String,
    },
}

fn parse_protocols(s: &str) -> Result<Vec<Protocol>> {
    if s == "all" {
        return Ok(Protocol::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse::<Protocol>().map_err(anyhow::Error::from))
        .collect()
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.resolve()?;
            let out = cmd_synth(&cfg)?;
            print_json(&out.report)
        }
        Command::Pipeline { common, frames, stage } => {
            let cfg = common.resolve()?;
            print_json(&cmd_pipeline(&cfg, &frames, stage)?)
        }
        Command::Train {
            common,
            manifest,
            checkpoint,
        } => {
            let cfg = common.resolve()?;
            let out = cmd_train(&cfg, manifest.as_deref(), checkpoint.as_deref())?;
            print_json(&out.summary)
        }
        Command::Eval {
            common,
            manifest,
            checkpoint,
            protocol,
        } => {
            let cfg = common.resolve()?;
            let protocols = parse_protocols(&protocol)?;
            let out = cmd_eval(&cfg, checkpoint.as_deref(), manifest.as_deref(), &protocols)?;
            print_json(&out.report)
        }
        Command::Ablate { common, manifest } => {
            let cfg = common.resolve()?;
            let table = cmd_ablate(&cfg, manifest.as_deref())?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        Command::PlotRoc { inputs, out, title } => {
            cmd_plot_roc(&inputs, &out, &title)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
