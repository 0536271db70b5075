mod common;

use std::collections::HashSet;

use dap_core::data::GaussianMixture;
use dap_core::nn::{argmax, ClassifierSpec};
use dap_core::shadow::{
    encode_record, filter_misclassified, train_shadows, AttackDataset, PredictionRecord, ShadowSource,
};
use dap_core::Error;
use proptest::prelude::*;

use common::{ce_oracle, lcg_values, quick_train};

fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn one_shadow_hundred_examples() {
    let b = GaussianMixture::new(2, 3, 84, 1.0).generate(1).unwrap();
    let pool = &b.train[..100];
    let spec = ClassifierSpec::new(3, vec![8], 2);
    let run = train_shadows(pool, 1, &spec, &quick_train(3), 4).unwrap();
    assert_eq!(run.records.len(), 100);
    assert_eq!(run.records.iter().filter(|r| r.record.member).count(), 50);
}

#[test]
fn shadows_are_deterministic_and_keep_provenance() {
    let b = GaussianMixture::new(3, 4, 40, 1.0).generate(2).unwrap();
    let spec = ClassifierSpec::new(4, vec![8], 3);
    let a = train_shadows(&b.train, 10, &spec, &quick_train(3), 6).unwrap();
    let again = train_shadows(&b.train, 10, &spec, &quick_train(3), 6).unwrap();
    assert_eq!(a.records, again.records);
    assert_eq!(a.models.len(), 10);

    let keys: Vec<(usize, usize)> = a.records.iter().map(|r| (r.shadow, r.example_index)).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    assert_eq!(keys, sorted);

    for (s, (inside, outside)) in a.halves.iter().enumerate() {
        let i: HashSet<_> = inside.iter().collect();
        let o: HashSet<_> = outside.iter().collect();
        assert!(i.is_disjoint(&o));
        assert_eq!(inside.len(), outside.len());
        for r in a.records.iter().filter(|r| r.shadow == s) {
            assert_eq!(r.record.member, i.contains(&r.example_index));
            assert!(r.record.member || o.contains(&r.example_index));
        }
    }
    let distinct: HashSet<_> = a.halves.iter().map(|h| h.0.clone()).collect();
    assert!(distinct.len() > 1, "shadows should draw different halves");
}

#[test]
fn perfect_shadow_contributes_nothing() {
    let b = GaussianMixture::new(2, 2, 40, 20.0).generate(3).unwrap().standardized();
    let spec = ClassifierSpec::new(2, vec![], 2);
    let run = train_shadows(&b.train, 1, &spec, &quick_train(40), 1).unwrap();
    assert!(run.records.iter().all(|r| !r.record.is_misclassified()));
    let err = filter_misclassified(run.records.iter().map(|r| &r.record), 2, ShadowSource::TestSet);
    assert!(matches!(err, Err(Error::DegenerateDataset(_))));
}

#[test]
fn tiny_pool_rejected() {
    let b = GaussianMixture::new(2, 2, 3, 1.0).generate(0).unwrap();
    let spec = ClassifierSpec::new(2, vec![], 2);
    assert!(train_shadows(&b.test[..2], 1, &spec, &quick_train(1), 0).is_err());
    assert!(train_shadows(&b.train, 0, &spec, &quick_train(1), 0).is_err());
}

#[test]
fn filter_examples() {
    let kept = PredictionRecord::from_prediction(&[0.4, 0.6], 0, true).unwrap();
    let dropped = PredictionRecord::from_prediction(&[0.6, 0.4], 0, false).unwrap();
    let other = PredictionRecord::from_prediction(&[0.7, 0.3], 1, false).unwrap();
    let ds = filter_misclassified([&kept, &dropped, &other], 2, ShadowSource::ValidationSet).unwrap();
    assert_eq!(ds.records, vec![kept, other]);
}

#[test]
fn filter_matches_argmax_oracle_on_random_records() {
    let v = lcg_values(17, 3000);
    let records: Vec<PredictionRecord> = v
        .chunks(3)
        .enumerate()
        .map(|(i, c)| {
            let probs = softmax(&[c[0] * 3.0, c[1] * 3.0]);
            let label = usize::from(c[2] > 0.0);
            PredictionRecord::from_prediction(&probs, label, i % 2 == 0).unwrap()
        })
        .collect();
    let oracle = records
        .iter()
        .filter(|r| {
            let top = if r.probs[1] > r.probs[0] { 1 } else { 0 };
            top != r.label
        })
        .count();
    let ds = filter_misclassified(&records, 2, ShadowSource::TestSet).unwrap();
    assert_eq!(ds.records.len(), oracle);
    assert!(ds.records.iter().all(|r| argmax(&r.probs) != r.label));
}

#[test]
fn argmax_ties_break_low() {
    let tie = PredictionRecord::from_prediction(&[0.5, 0.5], 0, true).unwrap();
    assert!(!tie.is_misclassified());
    let tie = PredictionRecord::from_prediction(&[0.5, 0.5], 1, true).unwrap();
    assert!(tie.is_misclassified());
}

#[test]
fn encoding_example() {
    let r = PredictionRecord::from_prediction(&[0.2, 0.5, 0.3], 2, true).unwrap();
    let e = encode_record(&r);
    assert_eq!(&e[..6], &[0.2, 0.5, 0.3, 0.0, 0.0, 1.0]);
    assert!((e[6] - 1.20397).abs() < 1e-5);
}

#[test]
fn attack_dataset_csv_layout() {
    let r = PredictionRecord::from_prediction(&[0.7, 0.3], 1, true).unwrap();
    let s = PredictionRecord::from_prediction(&[0.2, 0.8], 0, false).unwrap();
    let ds = AttackDataset {
        records: vec![r, s],
        num_classes: 2,
        source: ShadowSource::TestSet,
    };
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "p0,p1,y0,y1,loss,membership");
    assert_eq!(AttackDataset::read_csv(buf.as_slice(), ShadowSource::TestSet).unwrap(), ds);
}

proptest! {
    #[test]
    fn encoding_length_and_loss_slot(c in 2usize..=10, label_seed in any::<u64>(), seed in any::<u64>()) {
        let logits: Vec<f64> = lcg_values(seed, c).iter().map(|v| v * 4.0).collect();
        let probs = softmax(&logits);
        let label = (label_seed % c as u64) as usize;
        let r = PredictionRecord::from_prediction(&probs, label, false).unwrap();
        let e = encode_record(&r);
        prop_assert_eq!(e.len(), 2 * c + 1);
        prop_assert!((e[2 * c] - ce_oracle(&probs, label)).abs() < 1e-9);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(e[c..2 * c].iter().filter(|&&v| v == 1.0).count(), 1);
    }
}
