#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use restcal::adapt::{mean_std, rs_fraction_sweep, RunReport, SubjectResult, SweepRow};
use restcal::config::{validate_config, RunConfig};
use restcal::eegpack::PackLoader;
use restcal::gradcheck::{gradcheck, GradCheckConfig};
use restcal::pipeline::{
    adapt_target, calibrate_target, eval_target, export_target_features, load_stage1, load_target,
    prepare_dataset, resolve_targets, run_pipeline, target_dir, train_target, write_report,
};
use restcal::{par, Error, Result};

/// Resting-state calibration and subject adaptation for motor-imagery EEG.
#[derive(Debug, Parser)]
#[command(name = "restcal", version)]
struct Cli {
    /// Worker threads; 1 forces the sequential path.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Held-out subject; repeat for several.
    #[arg(long)]
    target: Vec<String>,

    /// Hold out every subject in turn.
    #[arg(long, conflicts_with = "target")]
    all_subjects: bool,

    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth(RunArgs),
    /// Stage 1: train with each target held out.
    Train(RunArgs),
    /// Stage 2: calibrate the target's resting-state epochs.
    Calibrate(RunArgs),
    /// Stage 3: fine-tune on the calibrated epochs.
    Adapt(RunArgs),
    /// Evaluate stage-1 and adapted models on the target's task epochs.
    Eval(RunArgs),
    /// Train, calibrate, adapt and evaluate each target.
    Pipeline(RunArgs),
    /// Repeat calibration and adaptation over fractions of the rest epochs.
    Sweep(RunArgs),
    /// Write task features and subject embeddings of real and calibrated epochs.
    ExportFeatures(RunArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest relative error accepted.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load(args: &RunArgs, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = validate_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    if let Some(n) = workers.or(cfg.workers) {
        if n == 0 {
            return Err(Error::config("--workers must be >= 1"));
        }
        par::set_workers(n);
    }
    cfg.write_snapshot(&cfg.output.join("config.json"))?;
    Ok(cfg)
}

fn open(cfg: &RunConfig, args: &RunArgs) -> Result<(PackLoader, Vec<String>)> {
    let dataset = prepare_dataset(cfg)?;
    let targets = resolve_targets(cfg, &dataset, &args.target, args.all_subjects)?;
    let loader = PackLoader::open(&dataset)?;
    cfg.model_shape(loader.manifest())?;
    Ok((loader, targets))
}

fn report(cfg: &RunConfig, results: Vec<SubjectResult>) -> Result<()> {
    let r = RunReport::new(results, cfg.seed, cfg.snapshot());
    write_report(cfg, &r)?;
    print!("{}", r.to_table());
    Ok(())
}

fn sweep_tsv(rows: &[(String, SweepRow)]) -> String {
    let mut s = String::from("subject\tfraction\trs_used\taccuracy\tbase_checkpoint\n");
    for (subject, r) in rows {
        s.push_str(&format!(
            "{subject}\t{}\t{}\t{}\t{}\n",
            r.fraction, r.rs_used, r.accuracy, r.base_checkpoint
        ));
    }
    s
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gradcheck { seed, tolerance } => {
            let r = gradcheck(&GradCheckConfig {
                seed: *seed,
                ..GradCheckConfig::default()
            })?;
            println!(
                "max relative gradient error {:.3e} ({} parameter probes, {} input probes; worst at {})",
                r.max_error(),
                r.param_probes,
                r.input_probes,
                r.worst
            );
            if !(r.max_error() <= *tolerance) {
                return Err(Error::Numerical(format!(
                    "gradient error {:.3e} exceeds {tolerance:e}",
                    r.max_error()
                )));
            }
            Ok(())
        }
        Command::Synth(args) => {
            let mut cfg = load(args, cli.workers)?;
            cfg.dataset = None;
            let dir = prepare_dataset(&cfg)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Train(args) => {
            let cfg = load(args, cli.workers)?;
            let (loader, targets) = open(&cfg, args)?;
            for t in &targets {
                let s = train_target(&cfg, &loader, t)?;
                let last = s.history.epochs.last();
                println!(
                    "{t}: selected epoch {}, val accuracy {:.4}",
                    s.history.selected_epoch,
                    last.map_or(f64::NAN, |e| e.val_accuracy)
                );
            }
            Ok(())
        }
        Command::Calibrate(args) => {
            let cfg = load(args, cli.workers)?;
            let (loader, targets) = open(&cfg, args)?;
            for t in &targets {
                let s1 = load_stage1(&cfg, t)?;
                let set = calibrate_target(&cfg, &loader, &s1, t)?;
                println!(
                    "{t}: {} calibrated, {} flagged, descent rate {:.4}",
                    set.trials.len(),
                    set.flagged.len(),
                    set.descent_rate()
                );
            }
            Ok(())
        }
        Command::Adapt(args) => {
            let cfg = load(args, cli.workers)?;
            let (_, targets) = open(&cfg, args)?;
            for t in &targets {
                let s1 = load_stage1(&cfg, t)?;
                let (_, h) = adapt_target(&cfg, &s1, t)?;
                println!("{t}: adaptation loss {:?}", h.epoch_loss);
            }
            Ok(())
        }
        Command::Eval(args) => {
            let cfg = load(args, cli.workers)?;
            let (loader, targets) = open(&cfg, args)?;
            let results = targets
                .iter()
                .map(|t| eval_target(&cfg, &loader, t))
                .collect::<Result<Vec<_>>>()?;
            report(&cfg, results)
        }
        Command::Pipeline(args) => {
            let cfg = load(args, cli.workers)?;
            let dataset = prepare_dataset(&cfg)?;
            let targets = resolve_targets(&cfg, &dataset, &args.target, args.all_subjects)?;
            let r = run_pipeline(&cfg, &targets, false)?;
            print!("{}", r.to_table());
            Ok(())
        }
        Command::Sweep(args) => {
            let cfg = load(args, cli.workers)?;
            let (loader, targets) = open(&cfg, args)?;
            let mut rows = Vec::new();
            for t in &targets {
                let s1 = if target_dir(&cfg, t).join("stage1.ckpt").is_file() {
                    load_stage1(&cfg, t)?
                } else {
                    train_target(&cfg, &loader, t)?
                };
                let data = load_target(&cfg, &loader, t)?;
                for r in rs_fraction_sweep(
                    &s1.model,
                    &s1.bank,
                    &data.rs,
                    &data.ts,
                    &cfg.calib,
                    &cfg.adapt,
                    &cfg.sweep_fractions,
                    cfg.sweep_seed(),
                )? {
                    rows.push((t.clone(), r));
                }
            }
            write(cfg.output.join("sweep.tsv"), &sweep_tsv(&rows))?;
            for &f in &cfg.sweep_fractions {
                let acc: Vec<f64> = rows.iter().filter(|(_, r)| r.fraction == f).map(|(_, r)| r.accuracy).collect();
                if acc.is_empty() {
                    continue;
                }
                let (m, sd) = mean_std(&acc);
                println!("{:>5.0}%  {:.2}±{:.2}", 100.0 * f, 100.0 * m, 100.0 * sd);
            }
            Ok(())
        }
        Command::ExportFeatures(args) => {
            let cfg = load(args, cli.workers)?;
            let (loader, targets) = open(&cfg, args)?;
            for t in &targets {
                let table = export_target_features(&cfg, &loader, t)?;
                println!(
                    "{t}: {} rows written to {}",
                    table.rows.len(),
                    target_dir(&cfg, t).join("features.tsv").display()
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    par::init_from_env();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("restcal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
