use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AOP_LAMBDAS;

pub const RESULT_HEADER: [&str; 13] = [
    "dataset",
    "defense",
    "seed",
    "acc",
    "auc_all",
    "auc_miss",
    "auc_correct",
    "aop_l1",
    "aop_l2",
    "aop_l5",
    "aop_l10",
    "sec_per_epoch",
    "fingerprint",
];

/// One experiment's headline numbers. AUCs are from the loss-threshold
/// attack with the training split as members and the test split as
/// non-members; `aop[i]` uses `AOP_LAMBDAS[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub defense: String,
    pub seed: u64,
    pub acc: f64,
    pub auc_all: f64,
    pub auc_miss: Option<f64>,
    pub auc_correct: Option<f64>,
    pub aop: [f64; 4],
    pub sec_per_epoch: f64,
    pub fingerprint: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_f64(field: &str, name: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("column {name}: cannot parse {field:?} as a number")))
}

impl ResultRow {
    pub fn aop_at(&self, lambda: f64) -> Option<f64> {
        AOP_LAMBDAS.iter().position(|&l| l == lambda).map(|i| self.aop[i])
    }

    pub fn to_record(&self) -> Vec<String> {
        let mut r = vec![
            self.dataset.clone(),
            self.defense.clone(),
            self.seed.to_string(),
            self.acc.to_string(),
            self.auc_all.to_string(),
            opt(self.auc_miss),
            opt(self.auc_correct),
        ];
        r.extend(self.aop.iter().map(|a| a.to_string()));
        r.push(self.sec_per_epoch.to_string());
        r.push(self.fingerprint.clone());
        r
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != RESULT_HEADER.len() {
            return Err(Error::Config(format!(
                "result row has {} fields, expected {}",
                rec.len(),
                RESULT_HEADER.len()
            )));
        }
        let f = |i: usize| parse_f64(&rec[i], RESULT_HEADER[i]);
        let o = |i: usize| if rec[i].is_empty() { Ok(None) } else { f(i).map(Some) };
        Ok(ResultRow {
            dataset: rec[0].to_string(),
            defense: rec[1].to_string(),
            seed: rec[2]
                .parse()
                .map_err(|_| Error::Config(format!("column seed: cannot parse {:?}", &rec[2])))?,
            acc: f(3)?,
            auc_all: f(4)?,
            auc_miss: o(5)?,
            auc_correct: o(6)?,
            aop: [f(7)?, f(8)?, f(9)?, f(10)?],
            sec_per_epoch: f(11)?,
            fingerprint: rec[12].to_string(),
        })
    }
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush().map_err(|e| Error::io("results csv", e))?;
    Ok(())
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(RESULT_HEADER.iter().copied()) {
        return Err(Error::Config(format!("unexpected results header {header:?}")));
    }
    rd.records().map(|r| ResultRow::from_record(&r?)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// Cell value shown in the markdown layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMetric {
    Acc,
    Auc,
    Aop,
}

impl TableMetric {
    fn of(self, r: &ResultRow) -> f64 {
        match self {
            TableMetric::Acc => r.acc,
            TableMetric::Auc => r.auc_all,
            TableMetric::Aop => r.aop[1],
        }
    }
}

fn first_seen<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in it {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Datasets as rows, defenses as columns, in first-appearance order. Cells
/// average over repeated (dataset, defense) rows; missing cells are blank.
pub fn write_markdown<W: Write>(rows: &[ResultRow], metric: TableMetric, mut out: W) -> Result<()> {
    let io = |e| Error::io("markdown table", e);
    let datasets = first_seen(rows.iter().map(|r| r.dataset.as_str()));
    let defenses = first_seen(rows.iter().map(|r| r.defense.as_str()));
    let mut line = String::from("| dataset |");
    for d in &defenses {
        line.push_str(&format!(" {d} |"));
    }
    writeln!(out, "{line}").map_err(io)?;
    writeln!(out, "|---|{}", "---|".repeat(defenses.len())).map_err(io)?;
    for ds in &datasets {
        let mut line = format!("| {ds} |");
        for d in &defenses {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.dataset == *ds && r.defense == *d)
                .map(|r| metric.of(r))
                .collect();
            if vals.is_empty() {
                line.push_str("  |");
            } else {
                line.push_str(&format!(" {:.3} |", vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}

pub fn emit_table<W: Write>(rows: &[ResultRow], format: TableFormat, metric: TableMetric, out: W) -> Result<()> {
    match format {
        TableFormat::Csv => write_results_csv(rows, out),
        TableFormat::Markdown => write_markdown(rows, metric, out),
    }
}
