//! Shadow models and the misclassified-only attack dataset.
//!
//! Each shadow is a copy of the target architecture trained on a random half
//! of the attacker's pool ("in", members) and validated on the other half
//! ("out", non-members). Every in/out example yields a [`PredictionRecord`];
//! only misclassified records are kept for the attack model.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{argmax, loss, ClassifierSpec, Network};
use crate::seed;
use crate::train::{self, TrainConfig};

/// One observed model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub label: usize,
    /// Cross-entropy of `probs` at `label`.
    pub loss: f64,
    pub member: bool,
}

impl PredictionRecord {
    pub fn from_prediction(probs: &[f64], label: usize, member: bool) -> Result<Self> {
        if label >= probs.len() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: probs.len(),
            });
        }
        Ok(PredictionRecord {
            probs: probs.to_vec(),
            label,
            loss: loss::example_cross_entropy(probs, label),
            member,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.probs.len()).map(|c| if c == self.label { 1.0 } else { 0.0 }).collect()
    }

    pub fn is_misclassified(&self) -> bool {
        argmax(&self.probs) != self.label
    }
}

/// `[probs ‖ one_hot(label) ‖ loss]`, length `2C + 1`.
pub fn encode_record(record: &PredictionRecord) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * record.num_classes() + 1);
    v.extend_from_slice(&record.probs);
    v.extend(record.one_hot());
    v.push(record.loss);
    v
}

/// Which split of the victim's data the shadows were trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowSource {
    TestSet,
    ValidationSet,
}

/// A record plus its provenance inside a shadow run.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub shadow: usize,
    /// Index into the attacker pool.
    pub example_index: usize,
    pub record: PredictionRecord,
}

#[derive(Debug, Clone)]
pub struct ShadowRun {
    pub models: Vec<Network>,
    /// Per shadow `(in, out)` index lists into the pool.
    pub halves: Vec<(Vec<usize>, Vec<usize>)>,
    /// Sorted by `(shadow, example_index)`.
    pub records: Vec<RawRecord>,
}

/// Smallest allowed half size.
pub const MIN_HALF: usize = 2;

/// Trains `k` shadows on `pool`. Shadows run in parallel; each owns a seed
/// derived from `seed` and its index, and the merged records are sorted, so
/// the output does not depend on scheduling.
pub fn train_shadows(
    pool: &[Example],
    k: usize,
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ShadowRun> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one shadow model".into()));
    }
    let half = pool.len() / 2;
    if half < MIN_HALF {
        return Err(Error::InsufficientData(format!(
            "{} pool examples cannot form in/out halves of at least {MIN_HALF}",
            pool.len()
        )));
    }
    let outcomes: Vec<Result<(Network, (Vec<usize>, Vec<usize>), Vec<RawRecord>)>> = (0..k)
        .into_par_iter()
        .map(|s| {
            let shadow_seed = seed::derive(seed, &[seed::TAG_SHADOW, s as u64]);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut seed::rng(shadow_seed));
            let inside: Vec<usize> = order[..half].to_vec();
            let outside: Vec<usize> = order[half..2 * half].to_vec();
            let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
            let (train_set, hold_out) = (pick(&inside), pick(&outside));
            let fit = train::fit_on(spec.build(shadow_seed)?, &train_set, &hold_out, cfg, shadow_seed, None)?;
            let mut records = Vec::with_capacity(2 * half);
            for (idx, examples, member) in [(&inside, &train_set, true), (&outside, &hold_out, false)] {
                for (i, r) in idx.iter().zip(eval::records_for(&fit.model, examples, member)?) {
                    records.push(RawRecord {
                        shadow: s,
                        example_index: *i,
                        record: r,
                    });
                }
            }
            Ok((fit.model, (inside, outside), records))
        })
        .collect();
    let mut run = ShadowRun {
        models: Vec::with_capacity(k),
        halves: Vec::with_capacity(k),
        records: Vec::with_capacity(2 * half * k),
    };
    for o in outcomes {
        let (m, h, r) = o?;
        run.models.push(m);
        run.halves.push(h);
        run.records.extend(r);
    }
    run.records.sort_by_key(|r| (r.shadow, r.example_index));
    Ok(run)
}

/// Labelled membership records, all misclassified.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackDataset {
    pub records: Vec<PredictionRecord>,
    pub num_classes: usize,
    pub source: ShadowSource,
}

impl AttackDataset {
    pub fn counts(&self) -> (usize, usize) {
        let members = self.records.iter().filter(|r| r.member).count();
        (members, self.records.len() - members)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.counts();
        if self.records.len() < 2 || m == 0 || n == 0 {
            return Err(Error::DegenerateDataset(format!(
                "{} records ({m} members, {n} non-members); enlarge the pool or the number of shadows",
                self.records.len()
            )));
        }
        Ok(())
    }

    /// Columns `p0..p{C-1}, y0..y{C-1}, loss, membership`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let c = self.num_classes;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..c).map(|i| format!("p{i}")).collect();
        header.extend((0..c).map(|i| format!("y{i}")));
        header.push("loss".into());
        header.push("membership".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = encode_record(r).iter().map(|v| v.to_string()).collect();
            row.push(if r.member { "1".into() } else { "0".into() });
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("attack dataset csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn read_csv<R: std::io::Read>(input: R, source: ShadowSource) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let width = rdr.headers()?.len();
        if width < 5 || (width - 2) % 2 != 0 {
            return Err(Error::Config(format!("attack dataset CSV has {width} columns")));
        }
        let c = (width - 2) / 2;
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?}"))))
                .collect::<Result<_>>()?;
            let label = (0..c)
                .find(|&i| vals[c + i] == 1.0)
                .ok_or_else(|| Error::Config("row without a one-hot label".into()))?;
            records.push(PredictionRecord {
                probs: vals[..c].to_vec(),
                label,
                loss: vals[2 * c],
                member: vals[2 * c + 1] == 1.0,
            });
        }
        Ok(AttackDataset {
            records,
            num_classes: c,
            source,
        })
    }
}

/// Keeps exactly the records whose argmax differs from the label.
pub fn filter_misclassified<'a, I>(records: I, num_classes: usize, source: ShadowSource) -> Result<AttackDataset>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
{
    let ds = AttackDataset {
        records: records.into_iter().filter(|r| r.is_misclassified()).cloned().collect(),
        num_classes,
        source,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: &[f64], label: usize, member: bool) -> PredictionRecord {
        PredictionRecord::from_prediction(p, label, member).unwrap()
    }

    #[test]
    fn filter_keeps_only_misclassified() {
        assert!(rec(&[0.4, 0.6], 0, true).is_misclassified());
        assert!(!rec(&[0.6, 0.4], 0, true).is_misclassified());
        assert!(!rec(&[0.5, 0.5], 0, true).is_misclassified());
        let rs = [rec(&[0.4, 0.6], 0, true), rec(&[0.6, 0.4], 0, false), rec(&[0.7, 0.3], 1, false)];
        let ds = filter_misclassified(&rs, 2, ShadowSource::TestSet).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.counts(), (1, 1));
    }

    #[test]
    fn degenerate_datasets_rejected() {
        let rs = [rec(&[0.4, 0.6], 0, true), rec(&[0.3, 0.7], 0, true)];
        assert!(matches!(
            filter_misclassified(&rs, 2, ShadowSource::TestSet),
            Err(Error::DegenerateDataset(_))
        ));
        assert!(filter_misclassified(&rs[..0], 2, ShadowSource::TestSet).is_err());
    }

    #[test]
    fn encoding_layout() {
        let r = PredictionRecord {
            probs: vec![0.2, 0.5, 0.3],
            label: 2,
            loss: 1.20397,
            member: true,
        };
        assert_eq!(encode_record(&r), vec![0.2, 0.5, 0.3, 0.0, 0.0, 1.0, 1.20397]);
        for c in 2..=10 {
            let p = vec![1.0 / c as f64; c];
            let r = rec(&p, c - 1, false);
            let e = encode_record(&r);
            assert_eq!(e.len(), 2 * c + 1);
            assert!((e[2 * c] + p[c - 1].ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![rec(&[0.4, 0.6], 0, true), rec(&[0.7, 0.3], 1, false)];
        let ds = AttackDataset {
            records: rs,
            num_classes: 2,
            source: ShadowSource::ValidationSet,
        };
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("p0,p1,y0,y1,loss,membership\n"));
        let back = AttackDataset::read_csv(buf.as_slice(), ShadowSource::ValidationSet).unwrap();
        assert_eq!(back, ds);
    }
}
