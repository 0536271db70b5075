//! Published accuracy / attack-AUC / AOP tables shipped with the crate, and
//! their recomputation through the AOP formula.

use std::fmt::Write as _;
use std::io::Write;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::{aop, AOP_LAMBDAS};

const TABLES: &str = include_str!("../../assets/published_tables.csv");

pub const DEFAULT_TOLERANCE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedCell {
    pub dataset: String,
    pub defense: String,
    pub acc: f64,
    pub auc: f64,
    /// Printed AOP at λ = 2.
    pub aop: f64,
}

pub fn published_cells() -> Result<Vec<PublishedCell>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(TABLES.as_bytes());
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellCheck {
    pub cell: PublishedCell,
    pub recomputed: f64,
    pub deviation: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AopVerification {
    pub lambda: f64,
    pub tolerance: f64,
    pub checks: Vec<CellCheck>,
}

impl AopVerification {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn failures(&self) -> Vec<&CellCheck> {
        self.checks.iter().filter(|c| !c.ok).collect()
    }

    pub fn find(&self, dataset: &str, defense: &str) -> Option<&CellCheck> {
        self.checks
            .iter()
            .find(|c| c.cell.dataset == dataset && c.cell.defense == defense)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let n_ok = self.checks.len() - self.failures().len();
        let _ = writeln!(
            s,
            "AOP(lambda = {}) recomputed for {} cells, {} within ±{}",
            self.lambda,
            self.checks.len(),
            n_ok,
            self.tolerance
        );
        for c in self.failures() {
            let _ = writeln!(
                s,
                "MISMATCH {}/{}: acc {:.3} auc {:.3} -> {:.4}, printed {:.3} (off by {:.4})",
                c.cell.dataset, c.cell.defense, c.cell.acc, c.cell.auc, c.recomputed, c.cell.aop, c.deviation
            );
        }
        let _ = write!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

pub fn verify_cells(cells: Vec<PublishedCell>, lambda: f64, tolerance: f64) -> Result<AopVerification> {
    let checks = cells
        .into_iter()
        .map(|cell| {
            let recomputed = aop(cell.acc, cell.auc, lambda)?;
            let deviation = (recomputed - cell.aop).abs();
            Ok(CellCheck {
                ok: deviation <= tolerance,
                cell,
                recomputed,
                deviation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AopVerification {
        lambda,
        tolerance,
        checks,
    })
}

/// Recomputes every shipped AOP cell at λ = 2 and compares within ±0.001.
pub fn verify_published_aop() -> Result<AopVerification> {
    verify_cells(published_cells()?, 2.0, DEFAULT_TOLERANCE)
}

/// `dataset,defense,acc,auc,aop_l1,aop_l2,aop_l5,aop_l10` for every cell.
pub fn write_lambda_sweep<W: Write>(cells: &[PublishedCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "defense", "acc", "auc", "aop_l1", "aop_l2", "aop_l5", "aop_l10"])?;
    for c in cells {
        let mut rec = vec![c.dataset.clone(), c.defense.clone(), c.acc.to_string(), c.auc.to_string()];
        for l in AOP_LAMBDAS {
            rec.push(aop(c.acc, c.auc, l)?.to_string());
        }
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("lambda sweep csv", e))?;
    Ok(())
}
