use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use triad::pipeline::{self, RunConfig};
use triad::Result;

/// Dense keyframe depth from optical flow and camera poses.
#[derive(Parser, Debug)]
#[command(name = "triad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Directory every configured path is relative to.
    #[arg(long, env = "TRIAD_ROOT", default_value = ".")]
    root: PathBuf,
    /// `key = value` configuration file (relative to the root).
    #[arg(long, env = "TRIAD_CONFIG")]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (0: one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// Keyframe indices, comma separated.
    #[arg(long, value_name = "LIST")]
    keyframe: Option<String>,
    /// Output directory (relative to the root).
    #[arg(long)]
    output: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic bundle with ground truth.
    Synth(Global),
    /// Print the frames selected for each keyframe.
    Select(Global),
    /// Triangulate initial depth and confidences.
    Triangulate(Global),
    /// Refine previously triangulated depth.
    Refine(Global),
    /// Select, triangulate, refine and evaluate.
    Estimate(Global),
    /// Refinement ablations over iterations and confidence inputs.
    Ablate(Global),
    /// Score a depth map against ground truth.
    Eval(EvalArgs),
    /// Print the effective configuration.
    Config(Global),
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    global: Global,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<PathBuf>,
}

impl Command {
    fn global(&self) -> &Global {
        match self {
            Command::Synth(g)
            | Command::Select(g)
            | Command::Triangulate(g)
            | Command::Refine(g)
            | Command::Estimate(g)
            | Command::Ablate(g)
            | Command::Config(g) => g,
            Command::Eval(e) => &e.global,
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let g = cli.command.global();
    let mut cfg = RunConfig {
        root: g.root.clone(),
        ..RunConfig::default()
    };
    if let Some(path) = &g.config {
        cfg.apply_file(&g.root.join(path))?;
    }
    cfg.apply_env(std::env::vars())?;
    let mut flags = Vec::new();
    if let Some(w) = g.workers {
        flags.push(format!("workers={w}"));
    }
    if let Some(k) = &g.keyframe {
        flags.push(format!("keyframe={k}"));
    }
    if let Some(o) = &g.output {
        flags.push(format!("output_dir={}", o.display()));
    }
    if let Command::Eval(EvalArgs { pred, gt, sigma, .. }) = &cli.command {
        for (key, v) in [("pred", pred), ("gt", gt), ("sigma", sigma)] {
            if let Some(p) = v {
                flags.push(format!("{key}={}", p.display()));
            }
        }
    }
    cfg.apply_overrides(&flags)?;
    cfg.apply_overrides(&g.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Synth(_) => {
            let s = pipeline::cmd_synth(&cfg)?;
            println!("wrote {} artifacts to {}", s.artifacts.len(), cfg.root.display());
        }
        Command::Select(_) => {
            let all = pipeline::cmd_select(&cfg)?;
            let many = all.len() > 1;
            for (key, sel) in all {
                if many {
                    println!("# keyframe {key}");
                }
                if sel.shortfall {
                    log::warn!("keyframe {key}: only {} adjacent frames found", sel.indices.len());
                }
                for i in sel.indices {
                    println!("{i}");
                }
            }
        }
        Command::Triangulate(_) => {
            for t in pipeline::cmd_triangulate(&cfg)? {
                for w in &t.warnings {
                    log::warn!("{w}");
                }
                println!(
                    "keyframe {}: {} of {} pixels triangulated",
                    t.key,
                    t.init.valid_count(),
                    t.init.depth.pixel_count()
                );
            }
        }
        Command::Refine(_) => {
            for (key, r) in pipeline::cmd_refine(&cfg)? {
                let first = r.objective.first().copied().unwrap_or(f64::NAN);
                let last = r.objective.last().copied().unwrap_or(f64::NAN);
                println!("keyframe {key}: objective {first:e} -> {last:e}");
            }
        }
        Command::Estimate(_) => {
            for est in pipeline::cmd_estimate(&cfg)? {
                print!("{}", est.report());
            }
        }
        Command::Ablate(_) => {
            print!("{}", pipeline::ablation_csv(&pipeline::cmd_ablate(&cfg)?));
        }
        Command::Eval(_) => {
            let s = pipeline::cmd_eval(&cfg)?;
            print!("{}", s.report);
            if let Some(c) = s.correlation {
                println!("spearman  {:.6}", c.rho);
            }
        }
        Command::Config(_) => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.command.global().verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRIAD_LOG", level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
