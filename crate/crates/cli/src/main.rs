use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use filmseg::config::RunConfig;
use filmseg::data::{generate_dataset, read_dataset, write_dataset, GenerateConfig, PhantomMode, RaterPerturbConfig};
use filmseg::experiment::{compare, gridsearch, quiet_train, Grid};
use filmseg::film::Vocabulary;
use filmseg::gradcheck::{self, TOLERANCE};
use filmseg::metrics::calibrate_rater_strength;
use filmseg::train::{evaluate_run, load_for, load_run, train, Partition};
use filmseg::Error;

/// Contrast-conditioned U-Net lesion segmentation on synthetic phantoms.
#[derive(Parser, Debug)]
#[command(name = "film-seg", version, about)]
struct Cli {
    /// Global seed (overrides the config file seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data preparation and Monte-Carlo estimates.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the run-config schema and exit.
    #[arg(long)]
    help_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train one model from a run config.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset partition.
    Eval(EvalArgs),
    /// Train a grid of learning rates, depths and batch sizes.
    Gridsearch(GridArgs),
    /// Four-way comparison of plain and FiLM-conditioned U-Nets.
    Compare(CompareArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Calibrate simulated-rater strength to a target inter-rater Dice.
    CalibrateRaters(CalibrateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value = "natural")]
    mode: PhantomMode,
    #[arg(long, default_value_t = 100)]
    phantoms: usize,
    #[arg(long, default_value_t = 4)]
    slices: usize,
    /// Comma-separated contrast vocabulary.
    #[arg(long, default_value = "T2w,T2star")]
    vocabulary: String,
    /// Give every phantom this contrast instead of alternating.
    #[arg(long)]
    contrast: Option<String>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    partition: Partition,
    /// Permit evaluating on the training partition.
    #[arg(long)]
    allow_train_eval: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    /// Axes as `lr0=1e-3,5e-4;depth=2,3;batch=8`.
    #[arg(long, default_value = "lr0=1e-3,5e-4,1e-4;depth=2,3;batch=8")]
    grid: Grid,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_t2: PathBuf,
    #[arg(long)]
    data_t2star: PathBuf,
    #[arg(long)]
    data_both: PathBuf,
    /// Number of seeds per row, starting at the config seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Add a check with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    inject_corrupted_rule: bool,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.61)]
    target: f64,
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    /// Simulated raters per mask.
    #[arg(long, default_value_t = 10)]
    draws: usize,
    #[arg(long, default_value_t = 3)]
    max_radius: usize,
    #[arg(long, default_value_t = 2.0)]
    max_translation: f64,
    #[arg(long, default_value_t = 10.0)]
    max_rotation: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json { .. } | Error::Io { .. } | Error::Usage(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_config {
        print!("{}", RunConfig::help_text());
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("error: no subcommand given (try --help)");
        return ExitCode::from(2);
    };
    match run(&cli, command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, command: &Command) -> Result<u8, Error> {
    let threads = cli.threads.unwrap_or(1).max(1);
    match command {
        Command::GenData(args) => {
            let out = cli.out.clone().ok_or_else(|| Error::Config("gen-data needs --out".into()))?;
            let non_empty = out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
            if non_empty && !args.force {
                return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())));
            }
            let cfg = GenerateConfig {
                mode: args.mode,
                phantoms: args.phantoms,
                slices_per_phantom: args.slices,
                seed: cli.seed.unwrap_or(0),
                vocabulary: Vocabulary::new(args.vocabulary.split(',').map(str::trim))?,
                contrast: args.contrast.clone(),
            };
            let dataset = generate_dataset(&cfg, threads)?;
            write_dataset(&out, &dataset)?;
            let balance: Vec<String> = dataset.contrast_counts().iter().map(|(l, n)| format!("{l}: {n}")).collect();
            println!(
                "wrote {} samples ({} mode) to {} [{}]",
                dataset.samples.len(),
                dataset.mode,
                out.display(),
                balance.join(", ")
            );
            Ok(0)
        }
        Command::Train(args) => {
            let cfg = load_config(cli, &args.config)?;
            let dataset = load_for(&cfg)?;
            println!("epoch,train_loss,val_dice,lr");
            let result = train(&cfg, &dataset, &mut |e| {
                println!("{},{:.6},{:.6},{:.3e}", e.epoch, e.train_loss, e.val_dice, e.lr)
            })?;
            println!(
                "best epoch {} (val Dice {:.4}); checkpoints in {}",
                result.best_epoch,
                result.best_val_dice,
                result.dir.display()
            );
            Ok(0)
        }
        Command::Eval(args) => {
            if args.partition == Partition::Train && !args.allow_train_eval {
                return Err(Error::Config("refusing to evaluate on the train partition without --allow-train-eval".into()));
            }
            let (cfg, net, state) = load_run(&args.checkpoint)?;
            let dataset = read_dataset(&args.data)?;
            let report = evaluate_run(&cfg, &net, &state, &dataset, args.partition)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            let stem = format!("eval_{}", format!("{:?}", args.partition).to_lowercase());
            report.write(&out, &stem)?;
            for c in &report.per_contrast {
                let mean = c.mean.map_or("-".into(), |m| format!("{m:.4}"));
                let std = c.std.map_or("-".into(), |s| format!("{s:.4}"));
                println!("{:<8} n={:<4} dice {} ± {}", c.contrast, c.count, mean, std);
            }
            println!("overall dice {:.4} over {} samples; report in {}", report.overall, report.samples.len(), out.display());
            Ok(0)
        }
        Command::Gridsearch(args) => {
            let cfg = load_config(cli, &args.config)?;
            let dataset = load_for(&cfg)?;
            let report = gridsearch(&cfg, &dataset, &args.grid, &quiet_train)?;
            println!("lr0,depth,batch,best_val_dice");
            for c in &report.cells {
                println!("{},{},{},{:.4}", c.lr0, c.depth, c.batch, c.best_val_dice);
            }
            for f in &report.failures {
                println!("FAILED lr0={} depth={} batch={}: {}", f.lr0, f.depth, f.batch, f.error);
            }
            let w = &report.winner;
            println!(
                "winner lr0={} depth={} batch={} val_dice={:.4} test_dice={:.4}",
                w.lr0, w.depth, w.batch, w.best_val_dice, report.winner_test.overall
            );
            Ok(0)
        }
        Command::Compare(args) => {
            let cfg = load_config(cli, &args.config)?;
            if args.seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let read = |p: &Path| read_dataset(p);
            let (t2, t2star, both) = (read(&args.data_t2)?, read(&args.data_t2star)?, read(&args.data_both)?);
            cfg.vocabulary.ensure_matches(&both.vocabulary)?;
            let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.seed + i).collect();
            let cfg = RunConfig { mode: both.mode, ..cfg };
            let table = compare(&cfg, &t2, &t2star, &both, &seeds, &quiet_train)?;
            print!("{}", table.render());
            println!("{}", table.render_blind());
            let path = cfg.out.join("compare.json");
            std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.clone(), source: e })?;
            let text = serde_json::to_string_pretty(&table).map_err(|e| Error::Json { path: path.clone(), source: e })?;
            std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            Ok(0)
        }
        Command::Gradcheck(args) => {
            let mut outcomes = gradcheck::run_suite()?;
            if args.inject_corrupted_rule {
                outcomes.push(gradcheck::corrupted_rule_check()?);
            }
            println!("tolerance {TOLERANCE:e} (relative error, central differences)");
            for o in &outcomes {
                let status = if o.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<28} max_rel_error={:.3e} inputs={}", o.name, o.max_rel_error, o.checked);
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
            if failed.is_empty() {
                println!("all {} checks passed", outcomes.len());
                Ok(0)
            } else {
                println!("failed: {}", failed.join(", "));
                Ok(1)
            }
        }
        Command::CalibrateRaters(args) => {
            let dataset = read_dataset(&args.data)?;
            // Empty masks agree trivially under any perturbation; leave them out.
            let masks: Vec<_> = dataset.samples.iter().filter(|s| s.lesion_pixels() > 0).map(|s| s.mask.clone()).collect();
            let template = RaterPerturbConfig {
                strength: 0.0,
                max_radius: args.max_radius,
                max_translation_px: args.max_translation,
                max_rotation_deg: args.max_rotation,
            };
            let seed = cli.seed.unwrap_or(0);
            let cal = calibrate_rater_strength(args.target, &masks, &template, args.draws, args.tol, seed, threads)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let path = out.join("rater_strength.json");
            let text = serde_json::to_string_pretty(&cal).map_err(|e| Error::Json { path: path.clone(), source: e })?;
            std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path: path.clone(), source: e })?;
            println!(
                "strength {:.6} -> inter-rater Dice {:.4} ± {:.4} (target {}, {} masks, {} iterations); wrote {}",
                cal.strength,
                cal.estimate.mean,
                cal.estimate.std_error,
                cal.target,
                cal.estimate.masks,
                cal.iterations,
                path.display()
            );
            Ok(0)
        }
    }
}
