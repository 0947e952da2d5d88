use proptest::prelude::*;

use dimp_core::checkers::imp_weight_table;
use dimp_core::corpus::{featurize, read_dataset, split, Dataset, Example, Format, LoadOptions, SparseVec};
use dimp_core::losses::{dimp_weight, lower_bound_terms, wce_loss, WeightProvenance, WeightTable};
use dimp_core::model::{init_params, read_checkpoint, write_checkpoint};

fn dataset(n: usize) -> Dataset {
    let examples = (0..n)
        .map(|i| Example::new(SparseVec::from_pairs([(i % 5, 1.0 + i as f64)]), i % 3))
        .collect();
    Dataset::new(examples, 3, 5).unwrap()
}

fn fractions() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1u32..100, 1..5).prop_map(|raw| {
        let total: u32 = raw.iter().sum();
        let mut f: Vec<f64> = raw.iter().map(|&r| r as f64 / total as f64).collect();
        // Absorb rounding so the sum is within tolerance.
        let head: f64 = f[..f.len() - 1].iter().sum();
        *f.last_mut().unwrap() = 1.0 - head;
        f
    })
}

proptest! {
    #[test]
    fn split_partitions(seed in any::<u64>(), fr in fractions(), n in 20usize..200) {
        prop_assume!(fr.iter().all(|&f| f > 0.0 && f < 1.0 && (f * n as f64) >= 1.0));
        let ds = dataset(n);
        let parts = match split(&ds, &fr, seed) {
            Ok(p) => p,
            // A rounding boundary can still leave one part empty.
            Err(_) => return Ok(()),
        };
        prop_assert_eq!(parts.len(), fr.len());
        let mut seen: Vec<f64> = parts
            .iter()
            .flat_map(|p| p.examples().iter().map(|e| e.features.iter().next().unwrap().1))
            .collect();
        seen.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        prop_assert_eq!(seen, expected);
        prop_assert_eq!(split(&ds, &fr, seed).unwrap(), parts);
    }

    #[test]
    fn featurize_is_pure_and_unit(text in "[a-zA-Z0-9 ,.!-]{0,60}", dim in 2usize..64) {
        let a = featurize(&text, dim);
        let b = featurize(&text, dim);
        prop_assert_eq!(&a, &b);
        if a.is_empty() {
            prop_assert!(!text.chars().any(char::is_alphanumeric));
        } else {
            prop_assert!((a.l2_norm() - 1.0).abs() < 1e-12);
            prop_assert!(a.max_index().unwrap() < dim);
        }
    }

    #[test]
    fn jsonl_round_trip(labels in prop::collection::vec(0usize..4, 1..30), seed in any::<u64>()) {
        let examples: Vec<Example> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let v = (seed.wrapping_add(i as u64) % 1000) as f64 / 7.0 - 50.0;
                Example::new(SparseVec::from_pairs([(i % 9, v), (9 + y, 0.1)]), y)
            })
            .collect();
        let ds = Dataset::new(examples, 4, 13).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Format::Jsonl, LoadOptions { num_classes: Some(4), feature_dim: Some(13) }).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), hidden in prop::option::of(1usize..6), scale in 0.1f64..50.0) {
        let mut p = init_params(6, 4, hidden, seed);
        for v in p.values_mut() {
            *v *= scale * 20.0;
        }
        let x = SparseVec::from_pairs([(0, 1.0), (3, -2.0), (5, 0.5)]);
        let probs = p.predict_proba(&x).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
    }

    #[test]
    fn weighted_loss_is_homogeneous(seed in any::<u64>(), n in 1usize..20, k in 0.0f64..10.0) {
        let ds = dataset(n);
        let params = init_params(5, 3, None, seed);
        let w: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.1).collect();
        let scaled: Vec<f64> = w.iter().map(|x| k * x).collect();
        let base = wce_loss(&params, &ds, &WeightTable::new(w, WeightProvenance::Imp).unwrap()).unwrap();
        let other = wce_loss(&params, &ds, &WeightTable::new(scaled, WeightProvenance::Imp).unwrap()).unwrap();
        prop_assert!((other - k * base).abs() <= 1e-12 * (1.0 + k * base.abs()));
    }

    #[test]
    fn lower_bound_holds(pairs in prop::collection::vec((1e-9f64..=1.0, 0.0f64..=1.0), 1..40)) {
        let (p, q): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let b = lower_bound_terms(&p, &q).unwrap();
        prop_assert!(b.holds(1e-9), "lhs {} rhs {}", b.lhs, b.rhs);
    }

    #[test]
    fn weights_stay_in_range(q in 0.0f64..=1.0, d in 0.0f64..=1.0, cap in 1.0f64..200.0) {
        let w = dimp_weight(q, d, 1e-4, cap);
        prop_assert!((0.0..=cap).contains(&w));
        let table = imp_weight_table(&[q], &[d], 1e-4, cap).unwrap();
        prop_assert!((0.0..=cap).contains(&table.weights()[0]));
    }

    #[test]
    fn weight_table_csv_round_trip(w in prop::collection::vec(0.0f64..100.0, 1..30)) {
        let t = WeightTable::new(w, WeightProvenance::Imp).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        prop_assert_eq!(WeightTable::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), hidden in prop::option::of(1usize..5)) {
        let p = init_params(7, 3, hidden, seed);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        prop_assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
    }
}
