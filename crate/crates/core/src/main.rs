use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use plotters::prelude::*;

use ordlab::nn::Precision;
use ordlab::ordering::StrategyTag;
use ordlab::trainer::{
    list_checkpoints, read_jsonl, resume, row_num, run_experiment, ExperimentConfig, Hook, RunManifest, RunOutcome,
    METRICS_DIR, TRAINING_METRICS,
};
use ordlab::validate::{self, SweepCache, SWEEP_SEEDS, SWEEP_STRATEGIES, SWEEP_WEIGHT_DECAYS};

#[derive(Parser)]
#[command(name = "ordlab", version, about = "Data-ordering experiments on modular addition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration into a fresh run directory.
    Run(RunArgs),
    /// Continue a run from a checkpoint.
    Resume {
        run_dir: PathBuf,
        /// Checkpoint epoch (default: latest).
        #[arg(long)]
        checkpoint: Option<u64>,
        /// Raise or lower the epoch budget.
        #[arg(long)]
        max_epochs: Option<u64>,
    },
    /// Print a starter configuration.
    Template {
        #[arg(value_enum)]
        regime: Regime,
        #[arg(long, default_value = "stride")]
        strategy: StrategyTag,
        #[arg(long, default_value_t = 0.1)]
        weight_decay: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "runs/example")]
        out: PathBuf,
    },
    /// Built-in validation routines.
    #[command(subcommand)]
    Validate(ValidateCmd),
    /// Align metric streams of several runs by epoch.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Regime {
    Desk,
    Gold,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (also reseeds the data split).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<StrategyTag>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Size of the per-epoch test subsample.
    #[arg(long)]
    eval_subset: Option<usize>,
    /// Hook cadence override, `hook=N` or `hook=off`; repeatable.
    #[arg(long = "cadence", value_name = "HOOK=N")]
    cadences: Vec<String>,
    #[arg(long)]
    max_epochs: Option<u64>,
}

#[derive(Subcommand)]
enum ValidateCmd {
    /// Closed-form checks: HVP, content reconstruction, gradient check,
    /// spectral invariants, optimizer amplification.
    OracleSuite,
    /// Leave-one-out convergence of the counterfactual mean.
    KSufficiency {
        #[arg(long, default_value = "stride")]
        strategy: StrategyTag,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        epochs: Vec<u64>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Embedding peak frequency against the predicted stride fundamental.
    StrideFrequency {
        #[arg(long, value_delimiter = ',', default_value = "9")]
        strides: Vec<u32>,
        #[arg(long, default_value_t = 100)]
        epochs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Epochs-to-target sweep over strategy and weight decay at p=97.
    WdSweep {
        /// JSONL result cache; finished points are reused.
        #[arg(long, default_value = "target/acceptance-cache/wd-sweep.jsonl")]
        cache: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        weight_decays: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Metric keys to compare.
    #[arg(long, value_delimiter = ',', required = true)]
    keys: Vec<String>,
    /// Metric stream holding the keys.
    #[arg(long, default_value = TRAINING_METRICS)]
    hook: String,
    /// Directory for one SVG plot per key.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<ordlab::Error>())
                .map(|e| e.exit_code())
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(args) => {
            let cfg = configure(&args)?;
            report(&run_experiment(&cfg)?);
        }
        Command::Resume {
            run_dir,
            checkpoint,
            max_epochs,
        } => {
            let cfg = match max_epochs {
                Some(n) => {
                    let mut c = RunManifest::load(&run_dir)?.config;
                    c.max_epochs = n;
                    Some(c)
                }
                None => None,
            };
            if let Some(e) = checkpoint {
                let have = list_checkpoints(&run_dir)?;
                if !have.contains(&e) {
                    bail!(ordlab::Error::Input(format!(
                        "no checkpoint at epoch {e}; available: {have:?}"
                    )));
                }
            }
            report(&resume(&run_dir, checkpoint, cfg)?);
        }
        Command::Template {
            regime,
            strategy,
            weight_decay,
            seed,
            out,
        } => {
            let mut cfg = match regime {
                Regime::Desk => ExperimentConfig::desk(strategy, weight_decay, seed, out),
                Regime::Gold => ExperimentConfig::gold(strategy, seed, out),
            };
            cfg.optimizer.weight_decay = weight_decay;
            println!("{}", cfg.to_json());
        }
        Command::Validate(v) => return validate_cmd(v),
        Command::Compare(args) => compare(&args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn configure(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
        cfg.task.data_seed = seed;
    }
    if let Some(s) = args.strategy {
        cfg.strategy = s;
        if s != StrategyTag::Stride {
            cfg.stride = None;
        }
    }
    if let Some(p) = args.precision {
        cfg.model.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(n) = args.eval_subset {
        cfg.eval.test_subset = n;
    }
    if let Some(n) = args.max_epochs {
        cfg.max_epochs = n;
    }
    for spec in &args.cadences {
        let Some((hook, value)) = spec.split_once('=') else {
            bail!(ordlab::Error::Input(format!(
                "--cadence expects HOOK=N or HOOK=off, got `{spec}`"
            )));
        };
        let cadence = match value {
            "off" | "none" => None,
            n => Some(
                n.parse::<u32>()
                    .map_err(|_| ordlab::Error::Input(format!("cadence for {hook} must be an integer or `off`")))?,
            ),
        };
        cfg.hooks.set(Hook::parse(hook)?, cadence);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(out: &RunOutcome) {
    println!("run directory: {}", out.run_dir.display());
    println!("status: {:?}", out.status);
    println!("epochs completed: {}", out.epochs_completed);
    match out.stop_epoch {
        Some(e) => println!("reached target at epoch {e}"),
        None => println!("target not reached"),
    }
    println!("final test accuracy: {:.4}%", 100.0 * out.final_test_accuracy);
}

fn validate_cmd(cmd: ValidateCmd) -> Result<ExitCode> {
    let mut all_ok = true;
    match cmd {
        ValidateCmd::OracleSuite => {
            for c in validate::oracle_suite() {
                all_ok &= c.passed;
                println!("{} {:<42} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
        }
        ValidateCmd::KSufficiency {
            strategy,
            seed,
            epochs,
            k,
        } => {
            let cfg = validate::sweep_config(strategy, 0.1, seed);
            for (epoch, v) in validate::k_sufficiency(&cfg, &epochs, k)? {
                let ok = v.passes(0.05, 0.95);
                all_ok &= ok;
                println!(
                    "{} epoch {epoch:>5}: norm gap {:.2}%, min cosine {:.4}, mean cosine {:.4}, monotone {}",
                    if ok { "PASS" } else { "FAIL" },
                    100.0 * v.norm_gap,
                    v.min_cosine,
                    v.mean_cosine,
                    v.monotone
                );
            }
        }
        ValidateCmd::StrideFrequency { strides, epochs, seed } => {
            let base = validate::sweep_config(StrategyTag::Stride, 0.1, seed);
            for r in validate::stride_frequency(&base, &strides, epochs)? {
                let ok = r.observed() == Some(r.predicted as usize);
                all_ok &= ok;
                println!(
                    "{} p={} stride={}: predicted {}, observed {:?}, stable from epoch {:?}",
                    if ok { "PASS" } else { "FAIL" },
                    r.p,
                    r.stride,
                    r.predicted,
                    r.observed(),
                    r.locked_from()
                );
            }
        }
        ValidateCmd::WdSweep {
            cache,
            seeds,
            weight_decays,
        } => {
            let seeds = seeds.unwrap_or_else(|| SWEEP_SEEDS.to_vec());
            let wds = weight_decays.unwrap_or_else(|| SWEEP_WEIGHT_DECAYS.to_vec());
            let mut store = SweepCache::open(&cache)?;
            let mut runs = Vec::new();
            for &wd in &wds {
                for strategy in SWEEP_STRATEGIES {
                    for &seed in &seeds {
                        let cfg = validate::sweep_config(strategy, wd, seed);
                        let r = store.get_or_run(&cfg)?;
                        eprintln!(
                            "wd={wd} {strategy} seed={seed}: {}",
                            r.stop_epoch.map_or("not reached".to_string(), |e| format!("epoch {e}"))
                        );
                        runs.push(r);
                    }
                }
            }
            println!("{:<14} {:>8} {:>12} {:>8}", "strategy", "wd", "mean epochs", "reached");
            for ((strategy, wd), (mean, n, reached)) in validate::sweep_means(&runs) {
                println!("{strategy:<14} {wd:>8} {mean:>12.1} {reached:>5}/{n}");
            }
        }
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

type Series = BTreeMap<u64, f64>;

fn compare(args: &CompareArgs) -> Result<()> {
    let mut manifests = Vec::new();
    for run in &args.runs {
        manifests.push(RunManifest::load(run).with_context(|| format!("reading run {}", run.display()))?);
    }
    let p0 = manifests[0].config.task.p;
    for (run, m) in args.runs.iter().zip(&manifests) {
        if m.config.task.p != p0 {
            println!(
                "warning: {} has p={} but {} has p={p0}; values are not directly comparable",
                run.display(),
                m.config.task.p,
                args.runs[0].display()
            );
        }
    }
    let names: Vec<String> = args.runs.iter().map(|r| label(r)).collect();
    let mut rows = Vec::new();
    for run in &args.runs {
        let path = run.join(METRICS_DIR).join(format!("{}.jsonl", args.hook));
        rows.push(if path.exists() { read_jsonl(&path)? } else { Vec::new() });
    }
    for key in &args.keys {
        let series: Vec<Option<Series>> = rows
            .iter()
            .map(|rs| {
                let s: Series = rs
                    .iter()
                    .filter_map(|r| Some((row_num(r, "epoch")? as u64, row_num(r, key)?)))
                    .collect();
                (!s.is_empty()).then_some(s)
            })
            .collect();
        println!("\n== {key} ({}) ==", args.hook);
        for (name, s) in names.iter().zip(&series) {
            if s.is_none() {
                println!("{name}: key absent");
            }
        }
        print_table(&names, &series);
        println!(
            "{:<24} {:>12} {:>12} {:>12} {:>12}",
            "run", "mean", "min", "max", "last"
        );
        for (name, s) in names.iter().zip(&series) {
            if let Some(s) = s {
                let vals: Vec<f64> = s.values().copied().collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                println!(
                    "{name:<24} {mean:>12.6} {min:>12.6} {max:>12.6} {:>12.6}",
                    vals.last().expect("non-empty")
                );
            }
        }
        if let Some(dir) = &args.plot_dir {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let file = dir.join(format!("{}.svg", key.replace('/', "_")));
            plot(&file, key, &names, &series)?;
            println!("plot: {}", file.display());
        }
    }
    Ok(())
}

fn label(run: &Path) -> String {
    run.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string())
}

fn print_table(names: &[String], series: &[Option<Series>]) {
    let present: Vec<(&String, &Series)> = names
        .iter()
        .zip(series)
        .filter_map(|(n, s)| s.as_ref().map(|s| (n, s)))
        .collect();
    if present.is_empty() {
        return;
    }
    let epochs: std::collections::BTreeSet<u64> = present.iter().flat_map(|(_, s)| s.keys().copied()).collect();
    print!("{:>8}", "epoch");
    for (n, _) in &present {
        print!(" {:>16}", truncate(n, 16));
    }
    println!();
    for e in epochs {
        print!("{e:>8}");
        for (_, s) in &present {
            match s.get(&e) {
                Some(v) => print!(" {v:>16.6}"),
                None => print!(" {:>16}", "-"),
            }
        }
        println!();
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn plot(file: &Path, key: &str, names: &[String], series: &[Option<Series>]) -> Result<()> {
    let pts: Vec<(u64, f64)> = series
        .iter()
        .flatten()
        .flat_map(|s| s.iter().map(|(&e, &v)| (e, v)))
        .collect();
    if pts.is_empty() {
        return Ok(());
    }
    let (x0, x1) = (
        pts.iter().map(|p| p.0).min().expect("non-empty") as f64,
        pts.iter().map(|p| p.0).max().expect("non-empty") as f64,
    );
    let finite = pts.iter().map(|p| p.1).filter(|v| v.is_finite());
    let (mut y0, mut y1) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if y0 > y1 {
        (y0, y1) = (0.0, 1.0);
    }
    if y0 == y1 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let root = SVGBackend::new(file, (900, 540)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow::anyhow!("plotting {}: {e}", file.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(key, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), y0..y1)
        .map_err(|e| err(&e))?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(|e| err(&e))?;
    for (i, (name, s)) in names.iter().zip(series).enumerate() {
        let Some(s) = s else { continue };
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                s.iter().filter(|(_, v)| v.is_finite()).map(|(&e, &v)| (e as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(|e| err(&e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
