use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use traverse_cli::commands::{
    cmd_ablate, cmd_case_study, cmd_gradcheck, cmd_synth, cmd_sweep, cmd_train, cmd_xcorr, exit_code,
};
use traverse_cli::settings::{keys_help, resolve_key, RunConfig};
use traverse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "traverse", version, about = "Spatial-temporal forecasting experiments")]
#[command(after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines with `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator spec to use as the dataset.
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Directory that receives run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and report test metrics of the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of seeds; metrics are reported as mean ± std.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Train all six ablation variants with shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Peak-lag distributions of connected and far node pairs.
    Xcorr {
        #[command(flatten)]
        common: Common,
        /// Also write the curve of one pair, given as `source,target`.
        #[arg(long)]
        pair: Option<String>,
    },
    /// Write a generated dataset, its edges and lag table.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Vary one hyperparameter (sweep.axis over sweep.values).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Attention heatmap, cross-correlation and aligned series of one edge.
    CaseStudy {
        #[command(flatten)]
        common: Common,
        /// Edge as `source,target`.
        #[arg(long)]
        pair: Option<String>,
        /// Use a trained checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

const CLAP_FLAGS: &[&str] = &[
    "config", "synth", "out", "force", "repeats", "seeds", "pair", "checkpoint", "help", "version",
];

/// Splits `--<config key> <value>` pairs from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (name.to_string(), None),
        };
        if CLAP_FLAGS.contains(&key.as_str()) || resolve_key(&key).is_none() {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("option `--{key}` needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn pair_overrides(pair: &Option<String>, overrides: &mut Vec<(String, String)>) -> Result<()> {
    if let Some(p) = pair {
        let (u, v) = p
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("pair `{p}` must be `source,target`")))?;
        overrides.push(("case.source".into(), u.trim().into()));
        overrides.push(("case.target".into(), v.trim().into()));
    }
    Ok(())
}

fn assemble(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    RunConfig::assemble(common.config.as_deref(), common.synth.as_deref(), overrides)
}

fn run(command: Command, mut overrides: Vec<(String, String)>) -> Result<()> {
    match command {
        Command::Train { common, repeats } => {
            let rc = assemble(&common, &overrides)?;
            let r = cmd_train(&rc, &common.out, repeats, common.force)?;
            println!("run directory: {}", r.dir.display());
        }
        Command::Ablate { common, repeats } => {
            let rc = assemble(&common, &overrides)?;
            let r = cmd_ablate(&rc, &common.out, repeats, common.force)?;
            println!("run directory: {}", r.dir.display());
        }
        Command::Xcorr { common, pair } => {
            pair_overrides(&pair, &mut overrides)?;
            let rc = assemble(&common, &overrides)?;
            let r = cmd_xcorr(&rc, &common.out, common.force)?;
            println!("run directory: {}", r.dir.display());
        }
        Command::Synth { common } => {
            let rc = assemble(&common, &overrides)?;
            cmd_synth(&rc, &common.out, common.force)?;
        }
        Command::Gradcheck { common, seeds } => {
            let rc = assemble(&common, &overrides)?;
            let r = cmd_gradcheck(&rc, &common.out, seeds, common.force)?;
            if !r.passed {
                return Err(Error::Numerical {
                    epoch: 0,
                    batch: 0,
                    message: "gradient check exceeded tolerance".into(),
                });
            }
        }
        Command::Sweep { common, repeats } => {
            let rc = assemble(&common, &overrides)?;
            let r = cmd_sweep(&rc, &common.out, repeats, common.force)?;
            println!("run directory: {}", r.dir.display());
        }
        Command::CaseStudy {
            common,
            pair,
            checkpoint,
        } => {
            pair_overrides(&pair, &mut overrides)?;
            let rc = assemble(&common, &overrides)?;
            let r = cmd_case_study(&rc, &common.out, checkpoint.as_deref().map(Path::new), common.force)?;
            println!("run directory: {}", r.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
