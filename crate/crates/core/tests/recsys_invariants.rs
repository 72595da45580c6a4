use std::collections::HashSet;

use emde::partition::fit_random_codes;
use emde::recsys::{
    build_session_example, evaluate_session, rank_top_k, score_items, topk_point, BuildStats, Channel, Decay,
    InputLayout, Interaction, InteractionLog, Predictor, SessionPoint, Task,
};
use emde::{Aggregator, CodesMatrix};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i:02}")).collect()
}

fn session(items: &[String]) -> InteractionLog {
    InteractionLog::from_interactions(items.iter().enumerate().map(|(t, it)| Interaction {
        session_id: "s".into(),
        item_id: it.clone(),
        timestamp: t as f64,
        event_type: String::new(),
        weight: 1.0,
    }))
    .unwrap()
}

fn codes(n: usize, depth: usize, width: usize, seed: u64) -> CodesMatrix {
    fit_random_codes(&ids(n), depth, width, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn future_items_do_not_leak(
        seed in any::<u64>(),
        picks in prop::collection::vec(0usize..20, 3..10),
        swap in prop::collection::vec(0usize..20, 10),
        pos in 1usize..9,
    ) {
        let c = codes(20, 4, 6, seed);
        let all = ids(20);
        let items: Vec<String> = picks.iter().map(|&i| all[i].clone()).collect();
        let pos = pos.min(items.len() - 1);
        let mut changed = items.clone();
        for (j, s) in (pos + 1..changed.len()).zip(&swap) {
            changed[j] = all[*s].clone();
        }
        let ch = [Channel::new("item", c)];
        let build = |items: &[String]| {
            let log = session(items);
            build_session_example(&log.sessions()[0], pos, &ch, 0, Decay::default(), &mut BuildStats::default())
                .unwrap()
                .unwrap()
        };
        let (a, b) = (build(&items), build(&changed));
        prop_assert_eq!(a.input, b.input);
        prop_assert_eq!(a.target, b.target);
    }

    #[test]
    fn pure_mode_scores_zero_off_the_input_buckets(seed in any::<u64>(), picks in prop::collection::vec(0usize..40, 2..6)) {
        let c = codes(40, 3, 8, seed);
        let all = ids(40);
        let items: Vec<String> = picks.iter().map(|&i| all[i].clone()).collect();
        let ch = [Channel::new("item", c.clone())];
        let layout = InputLayout::new(Task::Session, &ch, 0).unwrap();
        let log = session(&items);
        let pos = items.len() - 1;
        let ex = build_session_example(&log.sessions()[0], pos, &ch, 0, Decay::default(), &mut BuildStats::default())
            .unwrap()
            .unwrap();
        let scores = score_items(Predictor::Pure, &ex.input, &layout, &c, Aggregator::Gmean).unwrap();
        for (i, id) in c.ids().iter().enumerate() {
            let shares = items[..pos]
                .iter()
                .any(|x| c.get(x).unwrap().iter().zip(c.get(id).unwrap()).any(|(a, b)| a == b));
            if !shares {
                prop_assert_eq!(scores[i], 0.0);
            }
        }
    }

    #[test]
    fn exclusion_only_removes_items(scores in prop::collection::vec(0.0f64..1.0, 30), drop in prop::collection::vec(0usize..30, 0..10)) {
        let all = ids(30);
        let excluded: HashSet<String> = drop.iter().map(|&i| all[i].clone()).collect();
        let full = rank_top_k(&all, &scores, 30, &HashSet::new());
        let filtered = rank_top_k(&all, &scores, 30, &excluded);
        let expect: Vec<(String, f64)> = full.into_iter().filter(|(id, _)| !excluded.contains(id)).collect();
        prop_assert_eq!(filtered, expect);
    }

    #[test]
    fn promoting_the_truth_never_hurts(perm_seed in any::<u64>(), hidden_n in 1usize..6, k in 1usize..25) {
        let mut ranked = ids(30);
        ranked.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let next = ranked[17].clone();
        let mut hidden = vec![next.clone()];
        hidden.extend(ranked[20..20 + hidden_n - 1].iter().cloned());
        let before = SessionPoint { ranked: ranked.clone(), next: next.clone(), hidden: hidden.clone() };
        let mut promoted = ranked.clone();
        let item = promoted.remove(17);
        promoted.insert(3, item);
        let after = SessionPoint { ranked: promoted.clone(), next, hidden: hidden.clone() };
        let (m0, m1) = (evaluate_session(&[before], k).unwrap(), evaluate_session(&[after], k).unwrap());
        for (a, b) in [(m0.mrr, m1.mrr), (m0.hr, m1.hr), (m0.precision, m1.precision), (m0.recall, m1.recall), (m0.map, m1.map)] {
            prop_assert!(b >= a - 1e-15);
        }
        let (r0, n0) = topk_point(&ranked, &hidden, k);
        let (r1, n1) = topk_point(&promoted, &hidden, k);
        prop_assert!(r1 >= r0 && n1 >= n0 - 1e-15);
    }
}

/// Random rankings over 1000 items with 10 held out: Recall@20 ≈ 0.02.
#[test]
fn random_ranking_recall_matches_expectation() {
    let catalog = ids(1000);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 20_000;
    let mut total = 0.0;
    for _ in 0..trials {
        let mut order = catalog.clone();
        order.shuffle(&mut rng);
        let held: Vec<String> = order[..10].to_vec();
        order.shuffle(&mut rng);
        total += topk_point(&order, &held, 20).0;
    }
    let mean = total / trials as f64;
    assert!((mean - 0.02).abs() < 0.001, "mean recall {mean}");
}
