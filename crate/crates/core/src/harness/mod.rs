//! Experiment orchestration: one config in, a result row and an output
//! directory of artifacts out.

pub mod config;
pub mod published;
pub mod table;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{self, DpConfig};
use crate::dap::{self, DapConfig, DapEpochRecord};
use crate::data::DatasetBundle;
use crate::discriminator::FrozenDiscriminator;
use crate::error::{Error, Result};
use crate::eval::{self, AttackReport, AOP_LAMBDAS};
use crate::nn::checkpoint;
use crate::nn::Network;
use crate::seed;
use crate::train::EpochRecord;

pub use config::{DatasetSpec, Defense, ExperimentConfig, ModelSpec};
pub use table::{ResultRow, TableFormat, TableMetric};

pub const OUTPUT_ROOT_ENV: &str = "DAP_OUTPUT_ROOT";

/// `$DAP_OUTPUT_ROOT`, or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Where a config's artifacts go under `root`.
pub fn experiment_dir(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    Ok(match &cfg.output_dir {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => root.join(p),
        None => {
            let fp = cfg.fingerprint()?;
            root.join(format!("{}-{}-{}", cfg.dataset_name(), cfg.defense.label(), &fp[..12]))
        }
    })
}

#[derive(Debug, Clone)]
pub enum History {
    Plain(Vec<EpochRecord>),
    Dap(Vec<DapEpochRecord>),
}

impl History {
    pub fn len(&self) -> usize {
        match self {
            History::Plain(h) => h.len(),
            History::Dap(h) => h.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn save(&self, path: &Path) -> Result<()> {
        match self {
            History::Dap(h) => dap::save_history_csv(h, path),
            History::Plain(h) => {
                let mut w = csv::Writer::from_path(path)?;
                w.write_record(["epoch", "train_ce", "val_ce", "val_acc"])?;
                for r in h {
                    w.write_record([
                        r.epoch.to_string(),
                        r.train_ce.to_string(),
                        r.val_ce.to_string(),
                        r.val_acc.to_string(),
                    ])?;
                }
                w.flush().map_err(|e| Error::io(path, e))
            }
        }
    }
}

/// The defended model before evaluation.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Network,
    pub best_epoch: Option<usize>,
    pub history: History,
    pub sec_per_epoch: f64,
    pub discriminator: Option<FrozenDiscriminator>,
    pub attack_dataset: Option<crate::shadow::AttackDataset>,
    pub discriminator_checksums: Option<(String, String)>,
    pub dp_epsilon: Option<f64>,
}

/// Runs the configured defense's training pipeline on `bundle`.
pub fn train_defense(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<Trained> {
    let spec = cfg.model.classifier(bundle);
    let cseed = cfg.classifier_seed();
    let plain = |fit: crate::train::FitResult| Trained {
        sec_per_epoch: fit.seconds_per_epoch(),
        model: fit.model,
        best_epoch: Some(fit.best_epoch),
        history: History::Plain(fit.history),
        discriminator: None,
        attack_dataset: None,
        discriminator_checksums: None,
        dp_epsilon: None,
    };
    Ok(match &cfg.defense {
        Defense::Baseline => plain(baselines::fit_plain(&spec, bundle, &cfg.train, cseed)?),
        Defense::Reg(reg) => plain(baselines::fit_regularized(&spec, bundle, reg, &cfg.train, cseed)?),
        Defense::Dp {
            config,
            epochs_from_budget,
        } => {
            let dp: DpConfig = if *epochs_from_budget {
                config.clone().for_budget(config.epsilon, bundle.train.len())?
            } else {
                config.clone()
            };
            let fit = baselines::fit_dp(&spec, bundle, &dp, cseed)?;
            Trained {
                sec_per_epoch: fit.seconds_per_epoch(),
                model: fit.model,
                best_epoch: None,
                history: History::Plain(fit.history),
                discriminator: None,
                attack_dataset: None,
                discriminator_checksums: None,
                dp_epsilon: Some(fit.epsilon),
            }
        }
        Defense::DapT { .. } | Defense::DapV { .. } => {
            let (mode, r) = cfg.defense.dap().expect("dap defense");
            let dcfg = DapConfig {
                r,
                mode,
                train: cfg.train.clone(),
            };
            let run = dap::run_dap(&spec, bundle, &dcfg, &cfg.attack, cfg.seed)?;
            Trained {
                sec_per_epoch: run.fit.seconds_per_epoch(),
                model: run.fit.model,
                best_epoch: Some(run.fit.best_epoch),
                history: History::Dap(run.fit.history),
                discriminator: Some(run.discriminator),
                attack_dataset: Some(run.attack_dataset),
                discriminator_checksums: Some(run.checksums),
                dp_epsilon: None,
            }
        }
    })
}

/// Test accuracy plus the loss-threshold attack with the training split as
/// members and the test split as non-members.
pub fn evaluate_model(net: &Network, bundle: &DatasetBundle) -> Result<(f64, AttackReport)> {
    let acc = eval::accuracy(net, &bundle.test)?;
    let report = eval::loss_threshold_attack(net, &bundle.train, &bundle.test)?;
    Ok((acc, report))
}

pub fn result_row(
    cfg: &ExperimentConfig,
    acc: f64,
    report: &AttackReport,
    sec_per_epoch: f64,
) -> Result<ResultRow> {
    let auc_all = report.all.auc;
    let mut aop = [0.0; 4];
    for (slot, l) in aop.iter_mut().zip(AOP_LAMBDAS) {
        *slot = eval::aop(acc, auc_all, l)?;
    }
    Ok(ResultRow {
        dataset: cfg.dataset_name(),
        defense: cfg.defense.label(),
        seed: cfg.seed,
        acc,
        auc_all,
        auc_miss: report.misclassified.as_ref().map(|a| a.auc),
        auc_correct: report.correct.as_ref().map(|a| a.auc),
        aop,
        sec_per_epoch,
        fingerprint: cfg.fingerprint()?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub status: &'static str,
    pub dataset: String,
    pub defense: String,
    pub fingerprint: String,
    pub acc: f64,
    pub loss_threshold: AttackReport,
    /// The frozen discriminator used as an attacker against the final
    /// model; DAP runs only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator_attack: Option<AttackReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator_heldout_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator_checksums: Option<(String, String)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub sec_per_epoch: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub row: ResultRow,
    pub trained: Trained,
    pub summary: Summary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    checkpoint::write_text(path, &serde_json::to_string_pretty(value)?)
}

#[derive(Serialize)]
struct Failure<'a> {
    status: &'static str,
    stage: &'a str,
    error: String,
}

/// Trains, evaluates and persists one experiment. On failure the directory
/// keeps whatever was written and gains a `status.json` marked failed.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = experiment_dir(cfg, root)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stage = "setup";
    let outcome = run_in(cfg, &dir, &mut stage);
    match &outcome {
        Ok(_) => write_json(
            &dir.join("status.json"),
            &serde_json::json!({"status": "ok"}),
        )?,
        Err(e) => {
            log::error!("experiment failed during {stage}: {e}");
            write_json(
                &dir.join("status.json"),
                &Failure {
                    status: "failed",
                    stage,
                    error: e.to_string(),
                },
            )?;
        }
    }
    outcome
}

fn run_in(cfg: &ExperimentConfig, dir: &Path, stage: &mut &'static str) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    checkpoint::write_text(&dir.join("config.json"), &cfg.to_json()?)?;
    *stage = "data";
    let bundle = cfg.load_data()?;
    *stage = "train";
    let trained = train_defense(cfg, &bundle)?;
    checkpoint::save_network(&dir.join("model.json"), &trained.model)?;
    trained.history.save(&dir.join("history.csv"))?;
    if let Some(d) = &trained.discriminator {
        d.save(&dir.join("discriminator.json"))?;
    }
    if let Some(ds) = &trained.attack_dataset {
        ds.save_csv(&dir.join("attack_dataset.csv"))?;
    }
    *stage = "evaluate";
    let (acc, report) = evaluate_model(&trained.model, &bundle)?;
    let discriminator_attack = match &trained.discriminator {
        Some(d) => Some(eval::discriminator_attack(d, &trained.model, &bundle.train, &bundle.test)?),
        None => None,
    };
    let row = result_row(cfg, acc, &report, trained.sec_per_epoch)?;
    *stage = "persist";
    let f = fs::File::create(dir.join("result.csv")).map_err(|e| Error::io(dir.join("result.csv"), e))?;
    table::write_results_csv(std::slice::from_ref(&row), f)?;
    let summary = Summary {
        status: "ok",
        dataset: row.dataset.clone(),
        defense: row.defense.clone(),
        fingerprint: row.fingerprint.clone(),
        acc,
        loss_threshold: report,
        discriminator_attack,
        discriminator_heldout_auc: trained.discriminator.as_ref().and_then(|d| d.heldout_auc),
        discriminator_checksums: trained.discriminator_checksums.clone(),
        dp_epsilon: trained.dp_epsilon,
        best_epoch: trained.best_epoch,
        epochs_run: trained.history.len(),
        sec_per_epoch: trained.sec_per_epoch,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "{}/{}: acc {:.4} auc {:.4} aop(2) {:.4}",
        row.dataset,
        row.defense,
        row.acc,
        row.auc_all,
        row.aop[1]
    );
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        row,
        trained,
        summary,
    })
}

/// Seed for the run at `r` in a sweep from `master`.
pub fn sweep_seed(master: u64, r: f64) -> u64 {
    seed::derive(master, &[seed::TAG_SWEEP, r.to_bits()])
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub r: f64,
    pub row: ResultRow,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    /// Index into `points` with the highest AOP(λ=2).
    pub best: usize,
}

impl SweepOutcome {
    pub fn best_point(&self) -> &SweepPoint {
        &self.points[self.best]
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        self.points.iter().map(|p| p.row.clone()).collect()
    }

    /// `r,best,<result columns>`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["r", "best"];
        header.extend(table::RESULT_HEADER);
        w.write_record(&header)?;
        for (i, p) in self.points.iter().enumerate() {
            let mut rec = vec![p.r.to_string(), (i == self.best).to_string()];
            rec.extend(p.row.to_record());
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io("sweep csv", e))
    }
}

/// Index of the largest score; ties go to the lowest `r`.
pub fn best_index(points: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(r, score)) in points.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (br, bs) = points[b];
                if score > bs || (score == bs && r < br) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// The sweep configs: same data, one derived seed per `r`, output
/// directories `r<r>` under the base config's directory.
pub fn sweep_configs(cfg: &ExperimentConfig, grid: &[f64]) -> Result<Vec<ExperimentConfig>> {
    if grid.is_empty() {
        return Err(Error::Config("r grid is empty".into()));
    }
    if let Some(r) = grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("r grid values must lie in [0, 1], got {r}")));
    }
    grid.iter()
        .map(|&r| {
            let mut c = cfg.clone();
            c.defense = cfg.defense.with_r(r)?;
            c.data_seed = Some(cfg.data_seed());
            c.seed = sweep_seed(cfg.seed, r);
            c.output_dir = None;
            Ok(c)
        })
        .collect()
}

/// One DAP run per `r`, concurrently. Each run writes its own directory
/// under `root`.
pub fn sweep_r(cfg: &ExperimentConfig, grid: &[f64], root: &Path) -> Result<SweepOutcome> {
    let configs = sweep_configs(cfg, grid)?;
    let points = configs
        .par_iter()
        .zip(grid.par_iter())
        .map(|(c, &r)| {
            let out = run_experiment(c, root)?;
            Ok(SweepPoint {
                r,
                row: out.row,
                dir: out.dir,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<(f64, f64)> = points.iter().map(|p| (p.r, p.row.aop[1])).collect();
    let best = best_index(&scored).expect("non-empty grid");
    Ok(SweepOutcome { points, best })
}

/// Every `result.csv` found one level below `root`, sorted by directory
/// name.
pub fn collect_results(root: &Path) -> Result<Vec<ResultRow>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("result.csv").is_file())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    for d in dirs {
        let path = d.join("result.csv");
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        rows.extend(table::read_results_csv(f)?);
    }
    Ok(rows)
}
