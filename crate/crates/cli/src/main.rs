use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dap_core::discriminator::FrozenDiscriminator;
use dap_core::eval::{self, AOP_LAMBDAS};
use dap_core::harness::{self, published, table, ExperimentConfig, TableFormat, TableMetric};
use dap_core::nn::checkpoint;

#[derive(Parser)]
#[command(name = "dap", version, about = "Membership-inference-aware training experiments")]
struct Cli {
    /// Root directory for experiment outputs.
    #[arg(long, global = true, env = harness::OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config and print its result row.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attack a finished run's model and print the report as JSON.
    Attack {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = AttackChoice::Loss)]
        kind: AttackChoice,
        /// Discriminator checkpoint; defaults to the run's own.
        #[arg(long)]
        discriminator: Option<PathBuf>,
    },
    /// Test accuracy, loss-threshold AUC and AOP at every λ for a run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// One DAP run per r, best AOP(λ=2) flagged.
    SweepR {
        #[arg(long)]
        config: PathBuf,
        /// Comma separated r values in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Write the sweep table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the shipped AOP table from its accuracy and AUC tables.
    VerifyPaperAop {
        /// Also write AOP at λ ∈ {1, 2, 5, 10} for every cell.
        #[arg(long)]
        lambda_sweep: Option<PathBuf>,
    },
    /// Gather every run's result row under the output root into a table.
    Report {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, value_enum, default_value_t = Metric::Aop)]
        metric: Metric,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackChoice {
    Loss,
    Discriminator,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Acc,
    Auc,
    Aop,
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

struct LoadedRun {
    cfg: ExperimentConfig,
    bundle: dap_core::data::DatasetBundle,
    model: dap_core::nn::Network,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    let bundle = cfg.load_data()?;
    let model = checkpoint::load_network(&dir.join("model.json"))?;
    Ok(LoadedRun { cfg, bundle, model })
}

fn run(cli: Cli) -> Result<bool> {
    let root = cli.output_root;
    match cli.command {
        Command::Train { config, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = harness::run_experiment(&cfg, &root)?;
            eprintln!("artifacts in {}", out.dir.display());
            table::write_results_csv(&[out.row], io::stdout().lock())?;
        }
        Command::Attack {
            run,
            kind,
            discriminator,
        } => {
            let r = load_run(&run)?;
            let report = match kind {
                AttackChoice::Loss => eval::loss_threshold_attack(&r.model, &r.bundle.train, &r.bundle.test)?,
                AttackChoice::Discriminator => {
                    let path = discriminator.unwrap_or_else(|| run.join("discriminator.json"));
                    if !path.exists() {
                        bail!("no discriminator at {}; pass --discriminator", path.display());
                    }
                    let d = FrozenDiscriminator::load(&path)?;
                    eval::discriminator_attack(&d, &r.model, &r.bundle.train, &r.bundle.test)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Evaluate { run } => {
            let r = load_run(&run)?;
            let (acc, report) = harness::evaluate_model(&r.model, &r.bundle)?;
            let aop: Vec<_> = AOP_LAMBDAS
                .iter()
                .map(|&l| eval::AopReport::new(acc, report.all.auc, l))
                .collect::<dap_core::Result<_>>()?;
            let v = serde_json::json!({
                "dataset": r.cfg.dataset_name(),
                "defense": r.cfg.defense.label(),
                "acc": acc,
                "auc_all": report.all.auc,
                "auc_miss": report.misclassified.as_ref().map(|a| a.auc),
                "auc_correct": report.correct.as_ref().map(|a| a.auc),
                "aop": aop,
            });
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Command::SweepR { config, grid, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let sweep = harness::sweep_r(&cfg, &grid, &root)?;
            let best = sweep.best_point();
            eprintln!("best r = {} (aop_l2 {:.4})", best.r, best.row.aop[1]);
            sweep.write_csv(sink(out.as_deref())?)?;
        }
        Command::VerifyPaperAop { lambda_sweep } => {
            let report = published::verify_published_aop()?;
            println!("{}", report.render());
            if let Some(p) = lambda_sweep {
                let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
                published::write_lambda_sweep(&published::published_cells()?, f)?;
            }
            return Ok(report.passed());
        }
        Command::Report { format, metric, out } => {
            let rows = harness::collect_results(&root)?;
            let format = match format {
                Format::Csv => TableFormat::Csv,
                Format::Markdown => TableFormat::Markdown,
            };
            let metric = match metric {
                Metric::Acc => TableMetric::Acc,
                Metric::Auc => TableMetric::Auc,
                Metric::Aop => TableMetric::Aop,
            };
            table::emit_table(&rows, format, metric, sink(out.as_deref())?)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
