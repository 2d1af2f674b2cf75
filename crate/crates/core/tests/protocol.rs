use std::collections::BTreeSet;

use clipfl_core::clipfl::{rank_clients, split_candidates};
use clipfl_core::config::{parse_config_str, ExperimentConfig};
use clipfl_core::engine::prepare;
use proptest::prelude::*;

fn config() -> ExperimentConfig {
    let text = r#"
        seed = 3
        [data]
        k = 4
        per_class = 50
        dim = 6
        [federation]
        clients = 10
        sample_rate = 0.5
        [noise]
        mu = 0.7
        rho = 0.5
        [opt]
        epochs = 1
        [clipfl]
        m = 2
        p = 0.4
        t_pre = 6
        t_post = 6
    "#;
    parse_config_str(text, &[]).unwrap()
}

#[test]
fn ground_truth_does_not_influence_training() {
    let cfg = config();
    let fed = prepare(&cfg).unwrap();
    let mut scrambled = prepare(&cfg).unwrap();
    scrambled.truth_noisy = (0..cfg.federation.clients)
        .filter(|id| !fed.truth_noisy.contains(id))
        .collect();

    let mut a = Vec::new();
    let mut b = Vec::new();
    let ra = fed.run(&cfg, &mut |m, g| a.push((m.clone(), g.values.clone()))).unwrap();
    let rb = scrambled
        .run(&cfg, &mut |m, g| b.push((m.clone(), g.values.clone())))
        .unwrap();

    assert_eq!(a.len(), b.len());
    for ((ma, ga), (mb, gb)) in a.iter().zip(&b) {
        assert_eq!(ma.sampled, mb.sampled);
        assert_eq!(ma.noisy_candidates, mb.noisy_candidates);
        assert_eq!(ga, gb);
    }
    assert_eq!(ra.pruned_ids, rb.pruned_ids);
    assert_eq!(ra.ncs, rb.ncs);
    // Only the score against the truth differs.
    let sum = ra.identification_accuracy.unwrap() + rb.identification_accuracy.unwrap();
    assert!((sum - 1.0).abs() < 1e-12 || ra.pruned_ids.is_empty());
}

#[test]
fn phases_and_pruned_clients_are_respected() {
    let cfg = config();
    let fed = prepare(&cfg).unwrap();
    let mut rounds = Vec::new();
    let report = fed.run(&cfg, &mut |m, _| rounds.push(m.clone())).unwrap();
    let pruned: BTreeSet<usize> = report.pruned_ids.iter().copied().collect();
    assert_eq!(pruned.len(), 4);
    assert_eq!(rounds.len(), 12);

    for m in &rounds {
        if m.round < cfg.clipfl.t_pre {
            assert_eq!(m.clean_candidates.len(), cfg.clipfl.m);
            assert_eq!(m.clean_candidates.len() + m.noisy_candidates.len(), m.sampled.len());
        } else {
            assert!(m.clean_candidates.is_empty() && m.noisy_candidates.is_empty());
            assert!(m.sampled.iter().all(|id| !pruned.contains(id)), "round {}", m.round);
            assert_eq!(m.sampled.len(), 3); // ⌊6 · 0.5⌋
        }
    }
    let ncs_total: u32 = report.ncs.values().sum();
    let noisy_total: usize = rounds.iter().map(|m| m.noisy_candidates.len()).sum();
    assert_eq!(ncs_total as usize, noisy_total);
}

proptest! {
    #[test]
    fn ranking_ignores_input_order(
        accs in proptest::collection::vec(0u8..5, 1..12),
        rotation in 0usize..12,
        m in 1usize..12,
    ) {
        let pairs: Vec<(usize, f64)> = accs.iter().enumerate().map(|(i, &a)| (i, a as f64 / 4.0)).collect();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let len = shuffled.len();
        shuffled.rotate_left(rotation % len);

        let ranked = rank_clients(&pairs);
        prop_assert_eq!(&ranked, &rank_clients(&shuffled));
        for w in ranked.windows(2) {
            let (a, b) = (pairs[w[0]].1, pairs[w[1]].1);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
        let m = m.min(len);
        let (clean, noisy) = split_candidates(&ranked, m);
        prop_assert_eq!(clean.len(), m);
        prop_assert!(clean.is_disjoint(&noisy));
        prop_assert_eq!(clean.len() + noisy.len(), len);
    }
}
