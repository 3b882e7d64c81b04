//! `boneage` — dataset generation, two-phase training, attention-guided
//! localization, evaluation, and parameter sweeps.
//!
//! Every command validates its config before touching the filesystem and
//! writes only under `--out`. Exit codes: 0 success, 2 usage, 3 config
//! error, 4 incompatible checkpoint, 5 missing prerequisite, 6 experiment
//! directory locked, 1 anything else. Errors print as a single
//! machine-parsable line on stderr.

use boneage_core::pipeline::{
    summarize_dir, ExperimentConfig, Phase1Mode, PipelineError, Runner, SplitName,
};
use boneage_core::synth::{generate_with_manifest, load_manifest, store_dataset};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "boneage",
    about = "Attention-guided region localization and age-distribution learning on synthetic data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config file, or the literal `default` for built-in
    /// defaults.
    #[arg(long, default_value = "default")]
    config: String,
    /// Output directory (falls back to $BONEAGE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config (data, phases, split, erasure),
    /// derived as seed, seed+1, seed+2, seed+3, seed+4.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. All stages currently run single-threaded and
    /// deterministically, so any value yields bit-identical outputs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Redo the stage even when an up-to-date result exists.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into --out.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a Phase-1 soft-label classifier.
    TrainPhase1 {
        #[command(flatten)]
        common: CommonArgs,
        /// Which classifier to train; `all` trains every model the
        /// configured region set needs, in dependency order.
        #[arg(long, value_enum, default_value_t = ModeArg::All)]
        mode: ModeArg,
    },
    /// Extract region boxes and write crops for the configured channels.
    Localize {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the Phase-2 regression model from the crops.
    TrainPhase2 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate the Phase-2 checkpoint on a split and write reports.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sweep lambda (trains per grid point) or tau (re-thresholds cached
    /// attention maps) and write CSV + SVG tables.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated grid; `a,b,...,z` fills an arithmetic
        /// progression from a step (b-a) up to z.
        #[arg(long)]
        grid: String,
    },
    /// Print a summary of a dataset or experiment directory.
    Report {
        /// Directory to summarize (defaults to --out / $BONEAGE_OUT).
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Region1,
    Hand,
    Erased,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Lambda,
    Tau,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<boneage_core::synth::SynthError> for CliError {
    fn from(e: boneage_core::synth::SynthError) -> Self {
        CliError::Pipeline(PipelineError::Synth(e))
    }
}

fn exit_code_for(err: &CliError) -> u8 {
    match err {
        CliError::Usage(_) => 2,
        CliError::Pipeline(p) => match p {
            PipelineError::Config(_) | PipelineError::Toml(_) => 3,
            PipelineError::Synth(boneage_core::synth::SynthError::BadSpec(_)) => 3,
            PipelineError::IncompatibleCheckpoint { .. } => 4,
            PipelineError::MissingPrerequisite(_) => 5,
            PipelineError::Locked(_) => 6,
            _ => 1,
        },
    }
}

fn error_name(err: &CliError) -> &'static str {
    match err {
        CliError::Usage(_) => "usage",
        CliError::Pipeline(p) => match p {
            PipelineError::Config(_) | PipelineError::Toml(_) => "config",
            PipelineError::Synth(boneage_core::synth::SynthError::BadSpec(_)) => "config",
            PipelineError::IncompatibleCheckpoint { .. } => "incompatible-checkpoint",
            PipelineError::MissingPrerequisite(_) => "missing-prerequisite",
            PipelineError::Locked(_) => "locked",
            PipelineError::Diverged { .. } => "diverged",
            _ => "runtime",
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) => m.clone(),
                CliError::Pipeline(p) => p.to_string(),
            };
            eprintln!(
                "error: code={} msg={:?}",
                error_name(&e),
                msg.replace('\n', " ")
            );
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = if common.config == "default" {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::load(std::path::Path::new(&common.config))?
    };
    if let Some(seed) = common.seed {
        if let Some(g) = cfg.data.gen.as_mut() {
            g.seed = seed;
        }
        cfg.phase1.seed = seed.wrapping_add(1);
        cfg.phase2.seed = seed.wrapping_add(2);
        cfg.split.seed = seed.wrapping_add(3);
        cfg.erase_seed = seed.wrapping_add(4);
    }
    if common.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    Ok(cfg)
}

fn out_dir(explicit: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    match std::env::var_os("BONEAGE_OUT") {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(CliError::Usage(
            "no output directory: pass --out or set BONEAGE_OUT".into(),
        )),
    }
}

fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    // a,b,...,z  expands the arithmetic progression with step b-a
    if let Some(dots) = parts.iter().position(|p| *p == "...") {
        if dots != 2 || parts.len() != 4 {
            return Err(CliError::Usage(
                "ellipsis grids must look like a,b,...,z".into(),
            ));
        }
        let a: f64 = parts[0]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad grid value {:?}", parts[0])))?;
        let b: f64 = parts[1]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad grid value {:?}", parts[1])))?;
        let z: f64 = parts[3]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad grid value {:?}", parts[3])))?;
        let step = b - a;
        if step <= 0.0 || z < b {
            return Err(CliError::Usage("ellipsis grid must increase".into()));
        }
        let mut grid = vec![a];
        let mut v = a;
        while v + step <= z + 1e-9 {
            v += step;
            grid.push(v);
        }
        return Ok(grid);
    }
    let grid: Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
    let grid = grid.map_err(|_| CliError::Usage(format!("bad grid {text:?}")))?;
    if grid.is_empty() {
        return Err(CliError::Usage("empty grid".into()));
    }
    Ok(grid)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common.out)?;
            let gen = cfg.data.gen.as_ref().ok_or_else(|| {
                CliError::Pipeline(PipelineError::Config(
                    "gen-data needs an inline [data.gen] spec".into(),
                ))
            })?;
            if !common.force {
                if let Ok(Some(m)) = load_manifest(&out) {
                    if &m.spec == gen && m.count == cfg.data.n {
                        println!(
                            "dataset already present at {} ({} samples); use --force to regenerate",
                            out.display(),
                            m.count
                        );
                        return Ok(());
                    }
                }
            }
            let (records, manifest) = generate_with_manifest(gen, cfg.data.n)?;
            store_dataset(&out, &records, Some(&manifest))?;
            println!(
                "wrote {} samples to {} (oracle MAE: r1 {:.2}, r2 {:.2}, background {:.2})",
                manifest.count,
                out.display(),
                manifest.oracle.mae_region1,
                manifest.oracle.mae_region2,
                manifest.oracle.mae_background
            );
            Ok(())
        }
        Command::TrainPhase1 { common, mode } => {
            let cfg = load_config(&common)?;
            let runner = Runner::open(&out_dir(&common.out)?, cfg, common.force)?;
            let modes: Vec<Phase1Mode> = match mode {
                ModeArg::Region1 => vec![Phase1Mode::Region1],
                ModeArg::Hand => vec![Phase1Mode::Hand],
                ModeArg::Erased => vec![Phase1Mode::Erased],
                ModeArg::All => runner.config().needed_phase1_modes(),
            };
            if modes.is_empty() {
                println!("configured region set needs no phase-1 models");
                return Ok(());
            }
            for m in modes {
                let path = runner.train_phase1_mode(m)?;
                println!("phase1-{}: {}", m.name(), path.display());
            }
            Ok(())
        }
        Command::Localize { common } => {
            let cfg = load_config(&common)?;
            let runner = Runner::open(&out_dir(&common.out)?, cfg, common.force)?;
            let extraction = runner.localize()?;
            println!(
                "localized {} boxes ({} fallbacks) -> {}",
                extraction.rows.len(),
                extraction.skipped.len(),
                runner.root().join("localization.csv").display()
            );
            Ok(())
        }
        Command::TrainPhase2 { common } => {
            let cfg = load_config(&common)?;
            let runner = Runner::open(&out_dir(&common.out)?, cfg, common.force)?;
            let path = runner.train_phase2_stage()?;
            println!("phase2: {}", path.display());
            Ok(())
        }
        Command::Evaluate { common, split } => {
            let cfg = load_config(&common)?;
            let split: SplitName = split
                .parse()
                .map_err(|e: String| CliError::Usage(e))?;
            let runner = Runner::open(&out_dir(&common.out)?, cfg, common.force)?;
            let report = runner.evaluate(split)?;
            println!(
                "{split}: MAE {:.2} months over {} samples",
                report.mae,
                report.per_sample.len()
            );
            if let Some(rows) = &report.localization {
                for r in rows {
                    println!(
                        "  {}: mIoU {:.3}  AP50 {:.3}  (tau {})",
                        r.kind, r.miou, r.ap50, r.tau
                    );
                }
            }
            if let Some(d) = &report.distribution {
                println!(
                    "  distributions: mean KL {:.4}  mean entropy {:.3}",
                    d.mean_kl, d.mean_entropy
                );
            }
            Ok(())
        }
        Command::Sweep {
            common,
            param,
            grid,
        } => {
            let cfg = load_config(&common)?;
            let grid = parse_grid(&grid)?;
            let runner = Runner::open(&out_dir(&common.out)?, cfg, common.force)?;
            match param {
                SweepParam::Lambda => {
                    let table = runner.sweep_lambda(&grid)?;
                    println!("lambda sweep ({} points):", table.rows.len());
                    for row in &table.rows {
                        println!("  lambda {:<8} mae {:.3}", row.value, row.metric);
                    }
                    let best = table.argmin();
                    println!("best: lambda {} (mae {:.3})", best.value, best.metric);
                }
                SweepParam::Tau => {
                    let tables = runner.sweep_tau(&grid)?;
                    for t in tables {
                        let best = t.rows.iter().fold(&t.rows[0], |acc, r| {
                            if r.metric > acc.metric {
                                r
                            } else {
                                acc
                            }
                        });
                        println!(
                            "{}: best tau {} ({} {:.3})",
                            t.metric, best.value, t.metric, best.metric
                        );
                    }
                }
            }
            println!("tables written to {}", runner.root().join("sweeps").display());
            Ok(())
        }
        Command::Report { dir, out } => {
            let target = match dir.or(out) {
                Some(d) => d,
                None => out_dir(&None)?,
            };
            print!("{}", summarize_dir(&target)?);
            Ok(())
        }
    }
}
