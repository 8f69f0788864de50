use std::collections::BTreeSet;

use proptest::prelude::*;

use intent_rl::curriculum::{
    compute_scores, mix_positive, read_reward_log, select_challenging, write_reward_log, Ratio,
    ScoreMode,
};
use intent_rl::evalreport::score_histogram;
use intent_rl::grpo::{compute_advantages, k3};
use intent_rl::policy::{self, PolicyParams, SamplingConfig};
use intent_rl::prompting::{PromptVariant, Vocab, CONTROL_TOKENS};
use intent_rl::rewards::{
    format_reward, parse_completion, RewardRecord, RewardWeights, Strictness,
};

fn records(visits: &[(u64, Vec<(u8, u8)>)], id: &str) -> Vec<RewardRecord> {
    visits
        .iter()
        .flat_map(|(step, rs)| {
            rs.iter().enumerate().map(move |(j, &(f, a))| RewardRecord {
                sample_id: id.to_string(),
                rollout_index: j,
                r_format: f,
                r_answer: a,
                combined: f64::from(f + a),
                step: *step,
            })
        })
        .collect()
}

fn log_strategy(g: usize) -> impl Strategy<Value = Vec<RewardRecord>> {
    prop::collection::vec(
        prop::collection::vec(
            (any::<u16>(), prop::collection::vec((0u8..=1, 0u8..=1), g)),
            1..4,
        ),
        1..40,
    )
    .prop_map(|samples| {
        samples
            .into_iter()
            .enumerate()
            .flat_map(|(i, visits)| {
                let mut seen = BTreeSet::new();
                let visits: Vec<(u64, Vec<(u8, u8)>)> = visits
                    .into_iter()
                    .filter(|(s, _)| seen.insert(*s))
                    .map(|(s, v)| (u64::from(s), v))
                    .collect();
                records(&visits, &format!("s{i:03}"))
            })
            .collect()
    })
}

fn completion_text() -> impl Strategy<Value = String> {
    let piece = prop::sample::select(vec![
        "Thought:", "Action:", "Finish!", "\n", " ", "hotel", "taxi", "x", "\t", "Finish",
        "Action", ":",
    ]);
    prop_oneof![
        prop::collection::vec(piece, 0..14).prop_map(|v| v.concat()),
        ".*",
    ]
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        let a = compute_advantages(&rewards, 1e-6).unwrap();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let am = a.iter().sum::<f64>() / n;
        prop_assert!(am.abs() < 1e-9);
        if std > 1e-6 {
            let var = a.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn advantages_ignore_shift(rewards in prop::collection::vec(0u8..=2, 2..16), c in -50.0f64..50.0) {
        let r: Vec<f64> = rewards.iter().map(|&x| f64::from(x)).collect();
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let a = compute_advantages(&r, 1e-6).unwrap();
        let b = compute_advantages(&shifted, 1e-6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn k3_is_non_negative(x in 1e-6f64..1e6) {
        prop_assert!(k3(x) >= 0.0);
    }

    #[test]
    fn strict_implies_relaxed(text in completion_text(), with_thought in any::<bool>()) {
        let v = if with_thought { PromptVariant::WithThought } else { PromptVariant::WithoutThought };
        let s = format_reward(&parse_completion(&text, v, Strictness::Strict), Strictness::Strict);
        let r = format_reward(&parse_completion(&text, v, Strictness::Relaxed), Strictness::Relaxed);
        prop_assert!(s <= r);
    }

    #[test]
    fn selection_is_strictly_below_max(log in log_strategy(7)) {
        let w = RewardWeights::default();
        let table = compute_scores(&log, &w, 7, ScoreMode::LastVisit, "d").unwrap();
        let chosen = select_challenging(&table);
        let expected: Vec<String> = table.scores.iter().filter(|(_, &s)| s < 14.0).map(|(id, _)| id.clone()).collect();
        prop_assert_eq!(&chosen, &expected);
        prop_assert!(table.scores.values().all(|&s| (0.0..=14.0).contains(&s)));
    }

    #[test]
    fn histogram_conserves_samples(log in log_strategy(7)) {
        let w = RewardWeights::default();
        let table = compute_scores(&log, &w, 7, ScoreMode::LastVisit, "d").unwrap();
        let h = score_histogram(&table, &w, 7).unwrap();
        prop_assert_eq!(h.bins.len(), 15);
        prop_assert_eq!(h.bins.iter().sum::<usize>(), table.scores.len());
        prop_assert_eq!(h.total, table.scores.len());
    }

    #[test]
    fn manifests_are_disjoint_and_reproducible(log in log_strategy(7), p in 0u32..3, seed in any::<u64>()) {
        let w = RewardWeights::default();
        let table = compute_scores(&log, &w, 7, ScoreMode::LastVisit, "d").unwrap();
        let challenging = select_challenging(&table);
        let train: Vec<String> = table.scores.keys().cloned().collect();
        let ratio = Ratio(1, p);
        match mix_positive(&table, &challenging, &train, ratio, seed) {
            Ok(m) => {
                let c: BTreeSet<&String> = m.challenging_ids.iter().collect();
                let pos: BTreeSet<&String> = m.positive_ids.iter().collect();
                prop_assert!(c.is_disjoint(&pos));
                prop_assert_eq!(pos.len(), m.positive_ids.len());
                prop_assert_eq!(m.positive_ids.len(), ratio.positives_for(challenging.len()));
                prop_assert!(m.positive_ids.iter().all(|id| table.scores[id] == 14.0));
                let again = mix_positive(&table, &challenging, &train, ratio, seed).unwrap();
                prop_assert_eq!(m, again);
            }
            Err(e) => {
                let shortfall = matches!(e, intent_rl::Error::PoolShortfall { .. });
                prop_assert!(shortfall, "{}", e);
            }
        }
    }

    #[test]
    fn reward_log_round_trips(log in log_strategy(3)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let digest = write_reward_log(&path, &log).unwrap();
        let (back, d2) = read_reward_log(&path).unwrap();
        prop_assert_eq!(back, log);
        prop_assert_eq!(digest, d2);
    }

    #[test]
    fn sampled_logprobs_match_rescoring(seed in any::<u64>(), temperature in 0.5f64..1.5) {
        let tokens: Vec<String> = CONTROL_TOKENS.iter().map(|s| s.to_string()).chain(["a".into(), "b".into()]).collect();
        let vocab = Vocab::from_tokens(tokens).unwrap();
        let params = PolicyParams::init(vocab.len(), 3, seed);
        let cfg = SamplingConfig { temperature, max_new_tokens: 6, group_size: 3, rng_seed: seed, greedy: false };
        let prompt = [5, 8, 9];
        for c in policy::sample_group(&params, &prompt, &cfg, &vocab).unwrap() {
            let lp = policy::sequence_logprob(&params, &prompt, &c.token_ids, temperature).unwrap();
            for (x, y) in lp.iter().zip(&c.logprobs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
