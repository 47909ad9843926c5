use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;
use rlvr_core::metrics::{ema, evaluate, micro_prf, ConfusionCounts, LabelFilter};
use rlvr_core::parser::{parse_completion, Dialect};
use rlvr_core::rewards::{
    hard_reward, jaccard, nuanced_reward, CollapseMonitor, HardRewardConfig, NuancedRewardConfig,
};
use rlvr_core::vocab::{Label, LabelSet, LabelStats, NUM_LABELS};

fn set_of(bits: u16) -> HashSet<usize> {
    (0..NUM_LABELS).filter(|&l| bits & (1 << l) != 0).collect()
}

fn name(id: usize) -> &'static str {
    Label::from_id(id).unwrap().name()
}

fn labels() -> impl Strategy<Value = u16> {
    0u16..(1 << NUM_LABELS)
}

/// Solution block listing `ids` in the given order, with irregular spacing.
fn completion(ids: &[usize], spaces: &[bool]) -> String {
    let body: Vec<String> = ids
        .iter()
        .zip(spaces.iter().cycle())
        .map(|(&i, &wide)| if wide { format!("  {}\t", name(i)) } else { name(i).to_owned() })
        .collect();
    format!("<think>looking at the film</think>\n<solution>{}</solution>", body.join(","))
}

proptest! {
    #[test]
    fn jaccard_matches_set_arithmetic(a in labels(), b in labels()) {
        let (sa, sb) = (set_of(a), set_of(b));
        let union = sa.union(&sb).count();
        let want = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
        let got = jaccard(LabelSet::from_bits(a), LabelSet::from_bits(b));
        prop_assert_eq!(got, want);
        prop_assert_eq!(got, jaccard(LabelSet::from_bits(b), LabelSet::from_bits(a)));
    }

    #[test]
    fn parser_recovers_listed_labels(
        ids in proptest::collection::vec(0usize..NUM_LABELS, 1..20),
        spaces in proptest::collection::vec(any::<bool>(), 1..5),
    ) {
        let p = parse_completion(&completion(&ids, &spaces), Dialect::ThinkSolution);
        prop_assert!(p.valid);
        let distinct: HashSet<usize> = ids.iter().copied().collect();
        prop_assert_eq!(set_of(p.predicted.bits()), distinct.clone());
        prop_assert_eq!(p.duplicate_count, ids.len() - distinct.len());
        prop_assert_eq!(p.invalid_label_count, 0);
        prop_assert!(!p.extraneous_text);
    }

    #[test]
    fn truncated_completions_are_invalid(ids in proptest::collection::vec(0usize..NUM_LABELS, 1..6), cut in 1usize..12) {
        let text = completion(&ids, &[false]);
        let cut = text.len() - cut.min(text.len() - 1);
        let head = &text[..cut];
        prop_assert!(!parse_completion(head, Dialect::ThinkSolution).valid);
        prop_assert_eq!(hard_reward(&parse_completion(head, Dialect::ThinkSolution), LabelSet::EMPTY, &HardRewardConfig::default()).total, 0.0);
    }

    #[test]
    fn nuanced_reward_for_clean_answers(gold in 1u16..(1 << NUM_LABELS), pred in 1u16..(1 << NUM_LABELS)) {
        let ids: Vec<usize> = set_of(pred).into_iter().collect();
        let parsed = parse_completion(&completion(&ids, &[false]), Dialect::ThinkSolution);
        let cfg = NuancedRewardConfig::default();
        let mut monitor = CollapseMonitor::new(cfg.window_size);
        let r = nuanced_reward(&parsed, LabelSet::from_bits(gold), &LabelStats::uniform_zero(), &mut monitor, &cfg);
        let (g, p) = (set_of(gold), set_of(pred));
        let hits = g.intersection(&p).count() as f64;
        let want = if g == p {
            100.0
        } else {
            30.0 * hits / g.len() as f64 + 20.0 * hits / p.len() as f64 - 10.0 * p.difference(&g).count() as f64
        };
        prop_assert!((r.total - want).abs() < 1e-9, "{} vs {}", r.total, want);
    }

    #[test]
    fn hard_reward_is_jaccard_minus_length_penalty(
        gold in labels(), pred in 1u16..(1 << NUM_LABELS), min_len in 1usize..60,
    ) {
        let ids: Vec<usize> = set_of(pred).into_iter().collect();
        let parsed = parse_completion(&completion(&ids, &[false]), Dialect::ThinkSolution);
        let cfg = HardRewardConfig { min_length_tokens: min_len, length_penalty: 0.2 };
        let r = hard_reward(&parsed, LabelSet::from_bits(gold), &cfg);
        let j = jaccard(LabelSet::from_bits(gold), LabelSet::from_bits(pred));
        let short = if parsed.token_length < min_len { 0.2 } else { 0.0 };
        prop_assert!((r.total - (j - short)).abs() < 1e-12);
    }

    #[test]
    fn collapse_monitor_matches_a_plain_window(
        stream in proptest::collection::vec(1u16..(1 << 3), 1..300),
        window in 1usize..40,
    ) {
        let cfg = NuancedRewardConfig { window_size: window, ..Default::default() };
        let mut monitor = CollapseMonitor::new(window);
        let mut plain: VecDeque<u16> = VecDeque::new();
        for &bits in &stream {
            let len = plain.len();
            let top = (0..NUM_LABELS).map(|l| plain.iter().filter(|&&b| b & (1 << l) != 0).count()).max().unwrap();
            // dominant when the top label exceeds 70% of the window
            let want = if len > 0 && 10 * top > 7 * len {
                50.0 + 30.0 * (top - (7 * len).div_ceil(10)) as f64
            } else {
                0.0
            };
            prop_assert!((monitor.penalty(&cfg) - want).abs() < 1e-9);
            monitor.push(LabelSet::from_bits(bits));
            plain.push_back(bits);
            if plain.len() > window {
                plain.pop_front();
            }
        }
    }

    #[test]
    fn confusion_counts_match_brute_force(
        pairs in proptest::collection::vec((labels(), labels()), 0..60),
    ) {
        let all: Vec<Label> = Label::all().collect();
        let mut c = ConfusionCounts::new(&all);
        for &(p, g) in &pairs {
            c.add_sets(LabelSet::from_bits(p), LabelSet::from_bits(g));
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for l in 0..NUM_LABELS {
            let count = |f: &dyn Fn(bool, bool) -> bool| {
                pairs.iter().filter(|(p, g)| f(p & (1 << l) != 0, g & (1 << l) != 0)).count()
            };
            let (t, f, n) = (count(&|p, g| p && g), count(&|p, g| p && !g), count(&|p, g| !p && g));
            prop_assert_eq!((c.tp[l], c.fp[l], c.fn_[l]), (t, f, n));
            tp += t;
            fp += f;
            fn_ += n;
        }
        let micro = micro_prf(&c);
        let want = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((micro.f1 - want).abs() < 1e-12);
    }

    #[test]
    fn ema_stays_within_the_range(xs in proptest::collection::vec(-1e6f64..1e6, 1..200), alpha in 0.0f64..1.0) {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = ema(&xs, alpha);
        prop_assert_eq!(s.len(), xs.len());
        prop_assert_eq!(s[0], xs[0]);
        let tol = 1e-9 * (hi - lo).abs().max(1.0);
        prop_assert!(s.iter().all(|&v| v >= lo - tol && v <= hi + tol));
    }
}

#[test]
fn nih_filter_ignores_other_labels() {
    let text = "<think>tube in place, fluid</think><solution>Support Devices, Edema</solution>";
    let preds = vec![parse_completion(text, Dialect::ThinkSolution)];
    let gold = [LabelSet::from_names(&["Edema"]).unwrap()];
    let nih = evaluate(&preds, &gold, LabelFilter::Nih9).unwrap();
    let full = evaluate(&preds, &gold, LabelFilter::Full14).unwrap();
    assert_eq!(nih.per_category.len(), 9);
    assert_eq!(nih.micro.precision, 1.0);
    assert_eq!(full.micro.precision, 0.5);
}
