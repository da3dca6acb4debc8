//! Property tests for the module invariants.

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use fedsim_core::attacks::{layer_wise_mask, neurotoxin_mask, pgd_project, topk_mask};
use fedsim_core::federation::{fedavg, ClientUpdate};
use fedsim_core::metrics::lifespan_of_series;
use fedsim_core::params::LayerSchema;
use fedsim_core::ParamVector;

fn schema_of(lens: &[usize]) -> Arc<LayerSchema> {
    let segs: Vec<(String, usize)> = lens
        .iter()
        .enumerate()
        .map(|(i, &l)| (format!("seg{i}"), l))
        .collect();
    Arc::new(LayerSchema::new(segs).unwrap())
}

fn vector(lens: &[usize], values: Vec<f64>) -> ParamVector {
    ParamVector::new(values, schema_of(lens)).unwrap()
}

prop_compose! {
    fn arb_layered_vector()(lens in prop::collection::vec(1usize..6, 1..4))
        (values in prop::collection::vec(-100.0f64..100.0, lens.iter().sum::<usize>()..=lens.iter().sum::<usize>()),
         lens in Just(lens))
        -> (Vec<usize>, Vec<f64>) {
        (lens, values)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// topk zeroes exactly ceil(k/100 * d) scoped coordinates, matching a
    /// sort-based oracle.
    #[test]
    fn topk_matches_sort_oracle((lens, values) in arb_layered_vector(), k in 0.0f64..100.0) {
        let v = vector(&lens, values.clone());
        let scope: BTreeSet<String> = v.schema().names().map(String::from).collect();
        let masked = topk_mask(&v, k, &scope).unwrap();

        let d = values.len();
        let m = ((k / 100.0 * d as f64).ceil() as usize).min(d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap().then(a.cmp(&b)));
        let dropped: BTreeSet<usize> = order.into_iter().take(m).collect();
        for i in 0..d {
            if dropped.contains(&i) {
                prop_assert_eq!(masked.values()[i], 0.0);
            } else {
                prop_assert_eq!(masked.values()[i], values[i]);
            }
        }
        prop_assert_eq!(dropped.len(), m);
    }

    /// Masks and projection preserve the schema exactly.
    #[test]
    fn mask_ops_preserve_schema((lens, values) in arb_layered_vector(), k in 0.0f64..100.0) {
        let v = vector(&lens, values);
        let scope: BTreeSet<String> = v.schema().names().map(String::from).collect();
        let a = topk_mask(&v, k, &scope).unwrap();
        let b = layer_wise_mask(&v, &scope).unwrap();
        let c = pgd_project(&v, 1.0).unwrap();
        let d = neurotoxin_mask(&v, &v, 50.0).unwrap();
        for out in [a, b, c, d] {
            prop_assert!(out.schema_matches(&v));
            prop_assert_eq!(out.len(), v.len());
        }
    }

    /// Projection: norm lands on the bound, direction is preserved, repeat
    /// projection is bit-identical.
    #[test]
    fn pgd_properties(values in prop::collection::vec(-50.0f64..50.0, 2..64), bound in 0.01f64..10.0) {
        let lens = [values.len()];
        let v = vector(&lens, values);
        let projected = pgd_project(&v, bound).unwrap();
        let norm_in = v.l2_norm();
        if norm_in > bound * (1.0 + 1e-9) {
            prop_assert!((projected.l2_norm() - bound).abs() / bound < 1e-9);
        } else {
            prop_assert_eq!(&projected, &v);
        }
        if norm_in > 0.0 {
            let cos = v.dot(&projected).unwrap() / (norm_in * projected.l2_norm());
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
        let again = pgd_project(&projected, bound).unwrap();
        prop_assert_eq!(again, projected);
    }

    /// fedavg against an independently coded weighted mean, plus bitwise
    /// permutation invariance.
    #[test]
    fn fedavg_matches_weighted_mean_oracle(
        deltas in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..8),
        weights in prop::collection::vec(1usize..50, 8),
        global in prop::collection::vec(-5.0f64..5.0, 5),
        seed in any::<u64>(),
    ) {
        let lens = [5usize];
        let n = deltas.len();
        let updates: Vec<ClientUpdate> = deltas
            .iter()
            .enumerate()
            .map(|(i, d)| ClientUpdate {
                client_id: i as u64,
                delta: vector(&lens, d.clone()),
                num_samples: weights[i],
                malicious: false,
            })
            .collect();
        let g = vector(&lens, global.clone());
        let got = fedavg(&updates, &g).unwrap();

        // independent oracle
        let total: usize = weights[..n].iter().sum();
        for j in 0..5 {
            let mut expect = global[j];
            for (i, d) in deltas.iter().enumerate() {
                expect += weights[i] as f64 / total as f64 * d[j];
            }
            prop_assert!((got.values()[j] - expect).abs() < 1e-12);
        }

        // permutation invariance, bitwise
        let mut shuffled = updates.clone();
        let k = (seed % n as u64) as usize;
        shuffled.rotate_left(k);
        shuffled.reverse();
        let got2 = fedavg(&shuffled, &g).unwrap();
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&got), bits(&got2));
    }

    /// lifespan equals a brute-force reverse scan; tau sweeps are monotone.
    #[test]
    fn lifespan_matches_reverse_scan(
        ba in prop::collection::vec(0.0f64..1.0, 1..200),
        start_frac in 0.0f64..1.0,
    ) {
        let t = ba.len();
        let attack_start = ((start_frac * t as f64) as usize).min(t - 1);
        // ascending taus: lifespan must be non-increasing along them
        let taus = [0.03, 0.3, 0.5];
        let mut previous = usize::MAX;
        for &tau in &taus {
            let (got, censored) = lifespan_of_series(&ba, tau, attack_start).unwrap();
            // oracle: reverse scan
            let mut oracle = None;
            for t_i in (attack_start..t).rev() {
                if ba[t_i] > tau {
                    oracle = Some(t_i);
                    break;
                }
            }
            match oracle {
                Some(t_i) => {
                    prop_assert_eq!(got, t_i - attack_start);
                    prop_assert_eq!(censored, t_i == t - 1);
                }
                None => {
                    prop_assert_eq!(got, 0);
                    prop_assert!(!censored);
                }
            }
            prop_assert!(got <= previous || previous == usize::MAX);
            previous = got;
        }
    }

    /// Poisoning never changes shard cardinality or sequence length.
    #[test]
    fn poisoning_preserves_shape(ratio in 0.01f64..1.0, seed in any::<u64>()) {
        use fedsim_core::corpus::{generate_corpus, poison_shard, CorpusConfig, TriggerSpec};
        let cfg = CorpusConfig {
            vocab_size: 20,
            num_clients: 2,
            sequences_per_client: 9,
            seq_len: 8,
            dirichlet_alpha: 0.7,
            seed,
        };
        let shard = &generate_corpus(&cfg).unwrap()[0];
        let trigger = TriggerSpec::new(vec![1, 2], 5, ratio).unwrap();
        let poisoned = poison_shard(shard, &trigger, seed).unwrap();
        prop_assert_eq!(poisoned.num_sequences(), shard.num_sequences());
        prop_assert_eq!(poisoned.batches.len(), shard.batches.len());
        for (a, b) in poisoned.batches.iter().zip(&shard.batches) {
            prop_assert_eq!(a.rows(), b.rows());
            prop_assert_eq!(a.seq_len(), b.seq_len());
            a.validate(cfg.vocab_size).unwrap();
        }
    }
}
