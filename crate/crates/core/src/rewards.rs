//! Verifiable rewards: the format-gated Jaccard reward and the
//! multi-component reward with its sliding-window collapse monitor.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::ParsedOutput;
use crate::vocab::{LabelSet, LabelStats, NUM_LABELS};

const EPS: f64 = 1e-9;

/// |Y ∩ Ŷ| / |Y ∪ Ŷ|, with two empty sets counting as identical.
pub fn jaccard(gold: LabelSet, predicted: LabelSet) -> f64 {
    let union = gold.union(predicted).len();
    if union == 0 {
        return 1.0;
    }
    gold.intersection(predicted).len() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardRewardConfig {
    pub min_length_tokens: usize,
    pub length_penalty: f64,
}

impl Default for HardRewardConfig {
    fn default() -> Self {
        HardRewardConfig { min_length_tokens: 250, length_penalty: 0.2 }
    }
}

impl HardRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_length_tokens == 0 || !(self.length_penalty >= 0.0) {
            return Err(Error::Config(
                "rewards.hard: min_length_tokens must be > 0 and length_penalty >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuancedRewardConfig {
    pub exact_match_bonus: f64,
    pub recall_scale: f64,
    pub precision_scale: f64,
    pub invalid_label_penalty: f64,
    pub duplicate_penalty: f64,
    pub collapse_penalty: f64,
    pub excess_repetition_penalty: f64,
    pub dominance_threshold: f64,
    pub window_size: usize,
    pub fp_base_penalty: f64,
    pub format_penalty: f64,
    pub extraneous_penalty: f64,
}

impl Default for NuancedRewardConfig {
    fn default() -> Self {
        NuancedRewardConfig {
            exact_match_bonus: 100.0,
            recall_scale: 30.0,
            precision_scale: 20.0,
            invalid_label_penalty: 100.0,
            duplicate_penalty: 25.0,
            collapse_penalty: 50.0,
            excess_repetition_penalty: 30.0,
            dominance_threshold: 0.70,
            window_size: 100,
            fp_base_penalty: 10.0,
            format_penalty: 100.0,
            extraneous_penalty: 10.0,
        }
    }
}

impl NuancedRewardConfig {
    pub fn validate(&self) -> Result<()> {
        let penalties = [
            self.exact_match_bonus,
            self.recall_scale,
            self.precision_scale,
            self.invalid_label_penalty,
            self.duplicate_penalty,
            self.collapse_penalty,
            self.excess_repetition_penalty,
            self.fp_base_penalty,
            self.format_penalty,
            self.extraneous_penalty,
        ];
        if penalties.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("rewards.nuanced: magnitudes must be >= 0".into()));
        }
        if !(self.dominance_threshold > 0.0 && self.dominance_threshold <= 1.0) {
            return Err(Error::Config("rewards.nuanced: dominance_threshold must be in (0, 1]".into()));
        }
        if self.window_size == 0 {
            return Err(Error::Config("rewards.nuanced: window_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Signed per-component contributions; penalties are stored as negative
/// numbers so that `total` is their plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    #[serde(rename = "match")]
    pub exact: f64,
    pub partial: f64,
    pub fp: f64,
    pub collapse: f64,
    pub format: f64,
    pub length: f64,
}

impl RewardComponents {
    pub const NAMES: [&'static str; 6] = ["match", "partial", "fp", "collapse", "format", "length"];

    pub fn sum(&self) -> f64 {
        self.exact + self.partial + self.fp + self.collapse + self.format + self.length
    }

    pub fn values(&self) -> [f64; 6] {
        [self.exact, self.partial, self.fp, self.collapse, self.format, self.length]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub total: f64,
    pub components: RewardComponents,
}

impl RewardBreakdown {
    fn from_components(components: RewardComponents) -> Self {
        RewardBreakdown { total: components.sum(), components }
    }
}

/// Format-gated Jaccard with a penalty for completions shorter than
/// `min_length_tokens`. Anything that fails to parse scores exactly zero.
pub fn hard_reward(parsed: &ParsedOutput, gold: LabelSet, cfg: &HardRewardConfig) -> RewardBreakdown {
    if !parsed.valid {
        return RewardBreakdown::default();
    }
    let length = if parsed.token_length < cfg.min_length_tokens { -cfg.length_penalty } else { 0.0 };
    RewardBreakdown::from_components(RewardComponents {
        exact: jaccard(gold, parsed.predicted),
        length,
        ..Default::default()
    })
}

/// Ring buffer over the most recent predicted label sets with running
/// per-label counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMonitor {
    capacity: usize,
    window: VecDeque<LabelSet>,
    counts: [usize; NUM_LABELS],
}

impl CollapseMonitor {
    pub fn new(capacity: usize) -> Self {
        CollapseMonitor {
            capacity: capacity.max(1),
            window: VecDeque::with_capacity(capacity),
            counts: [0; NUM_LABELS],
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn counts(&self) -> &[usize; NUM_LABELS] {
        &self.counts
    }

    pub fn window(&self) -> impl Iterator<Item = LabelSet> + '_ {
        self.window.iter().copied()
    }

    /// Collapse penalty (a non-negative magnitude) for the current window
    /// contents, without recording anything.
    pub fn penalty(&self, cfg: &NuancedRewardConfig) -> f64 {
        let len = self.window.len();
        if len == 0 {
            return 0.0;
        }
        // First label with the highest count, canonical order breaks ties.
        let (_, top) = self
            .counts
            .iter()
            .enumerate()
            .fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best });
        let limit = cfg.dominance_threshold * len as f64;
        if top as f64 <= limit + EPS {
            return 0.0;
        }
        let allowed = (limit - EPS).ceil().max(0.0) as usize;
        cfg.collapse_penalty + cfg.excess_repetition_penalty * top.saturating_sub(allowed) as f64
    }

    pub fn push(&mut self, predicted: LabelSet) {
        if self.window.len() == self.capacity {
            if let Some(old) = self.window.pop_front() {
                for l in old.iter() {
                    self.counts[l.id()] -= 1;
                }
            }
        }
        for l in predicted.iter() {
            self.counts[l.id()] += 1;
        }
        self.window.push_back(predicted);
    }
}

/// Scores `predicted` against the window of earlier predictions, then
/// appends it. Returns the penalty magnitude.
pub fn monitor_observe(
    monitor: &mut CollapseMonitor,
    predicted: LabelSet,
    cfg: &NuancedRewardConfig,
) -> f64 {
    let penalty = monitor.penalty(cfg);
    monitor.push(predicted);
    penalty
}

/// Negated magnitude; a zero stays `0.0` rather than `-0.0` in reports.
fn penalty(magnitude: f64) -> f64 {
    0.0 - magnitude
}

pub fn nuanced_reward(
    parsed: &ParsedOutput,
    gold: LabelSet,
    stats: &LabelStats,
    monitor: &mut CollapseMonitor,
    cfg: &NuancedRewardConfig,
) -> RewardBreakdown {
    let predicted = parsed.predicted;
    let collapse = penalty(monitor_observe(monitor, predicted, cfg));
    if !parsed.valid {
        return RewardBreakdown::from_components(RewardComponents {
            collapse,
            format: penalty(cfg.format_penalty),
            ..Default::default()
        });
    }

    let hits = gold.intersection(predicted).len() as f64;
    let exact_match = predicted == gold;
    let exact = if exact_match { cfg.exact_match_bonus } else { 0.0 };
    let partial = if exact_match {
        0.0
    } else {
        let recall = if gold.is_empty() { 0.0 } else { hits / gold.len() as f64 };
        let precision = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
        cfg.recall_scale * recall + cfg.precision_scale * precision
    };
    let fp: f64 = predicted
        .difference(gold)
        .iter()
        .map(|l| cfg.fp_base_penalty * (1.0 + stats.get(l)))
        .sum();
    let format = cfg.invalid_label_penalty * parsed.invalid_label_count as f64
        + cfg.duplicate_penalty * parsed.duplicate_count as f64
        + if parsed.extraneous_text { cfg.extraneous_penalty } else { 0.0 };

    RewardBreakdown::from_components(RewardComponents {
        exact,
        partial,
        fp: penalty(fp),
        collapse,
        format: penalty(format),
        length: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_completion, Dialect};
    use crate::vocab::{Label, LabelSet};

    fn set(names: &[&str]) -> LabelSet {
        LabelSet::from_names(names).unwrap()
    }

    fn valid(pred: LabelSet, len: usize) -> ParsedOutput {
        ParsedOutput { valid: true, predicted: pred, token_length: len, ..Default::default() }
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(set(&["Edema"]), set(&["Edema"])), 1.0);
        assert_eq!(jaccard(set(&["Edema", "Cardiomegaly"]), set(&["Edema"])), 0.5);
        assert_eq!(jaccard(LabelSet::EMPTY, LabelSet::EMPTY), 1.0);
        assert_eq!(jaccard(set(&["Edema"]), LabelSet::EMPTY), 0.0);
    }

    #[test]
    fn hard_reward_cases() {
        let cfg = HardRewardConfig::default();
        let gold = set(&["Edema", "Cardiomegaly"]);
        assert_eq!(hard_reward(&ParsedOutput::default(), gold, &cfg).total, 0.0);
        assert_eq!(hard_reward(&valid(set(&["Edema"]), 300), gold, &cfg).total, 0.5);
        let r = hard_reward(&valid(gold, 100), gold, &cfg);
        assert!((r.total - 0.8).abs() < 1e-15);
        assert_eq!(r.components.length, -0.2);
        assert_eq!(r.total, r.components.sum());
        // exactly at the threshold is not short
        assert_eq!(hard_reward(&valid(gold, 250), gold, &cfg).total, 1.0);
    }

    #[test]
    fn exact_match_is_plus_100() {
        let cfg = NuancedRewardConfig::default();
        let gold = set(&["Edema", "Cardiomegaly"]);
        let mut m = CollapseMonitor::new(cfg.window_size);
        let r = nuanced_reward(&valid(gold, 30), gold, &LabelStats::uniform_zero(), &mut m, &cfg);
        assert_eq!(r.components.exact, 100.0);
        assert_eq!(r.components.partial, 0.0);
        assert_eq!(r.total, 100.0);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn partial_credit() {
        let cfg = NuancedRewardConfig::default();
        let gold = set(&["Edema", "Cardiomegaly"]);
        let mut m = CollapseMonitor::new(cfg.window_size);
        let r = nuanced_reward(&valid(set(&["Edema"]), 30), gold, &LabelStats::uniform_zero(), &mut m, &cfg);
        assert_eq!(r.components.partial, 35.0);
        assert_eq!(r.components.fp, 0.0);
        assert_eq!(r.total, 35.0);
    }

    #[test]
    fn format_penalties() {
        let cfg = NuancedRewardConfig::default();
        let stats = LabelStats::uniform_zero();
        let gold = set(&["Edema"]);
        let mut m = CollapseMonitor::new(cfg.window_size);
        let p = ParsedOutput { invalid_label_count: 2, ..valid(gold, 10) };
        assert_eq!(nuanced_reward(&p, gold, &stats, &mut m, &cfg).components.format, -200.0);
        let p = ParsedOutput { duplicate_count: 1, ..valid(gold, 10) };
        let mut m = CollapseMonitor::new(cfg.window_size);
        assert_eq!(nuanced_reward(&p, gold, &stats, &mut m, &cfg).components.format, -25.0);
        let p = ParsedOutput { extraneous_text: true, ..valid(gold, 10) };
        let mut m = CollapseMonitor::new(cfg.window_size);
        assert_eq!(nuanced_reward(&p, gold, &stats, &mut m, &cfg).components.format, -10.0);
        let mut m = CollapseMonitor::new(cfg.window_size);
        let r = nuanced_reward(&ParsedOutput::default(), gold, &stats, &mut m, &cfg);
        assert_eq!(r.total, -100.0);
    }

    #[test]
    fn parsed_text_through_nuanced() {
        let cfg = NuancedRewardConfig::default();
        let gold = set(&["Edema"]);
        let p = parse_completion(
            "<think>a</think><solution>Edema, Edema, Pneumonitis</solution>",
            Dialect::ThinkSolution,
        );
        let mut m = CollapseMonitor::new(cfg.window_size);
        let r = nuanced_reward(&p, gold, &LabelStats::uniform_zero(), &mut m, &cfg);
        assert_eq!(r.components.exact, 100.0);
        assert_eq!(r.components.format, -125.0);
        assert_eq!(r.total, -25.0);
    }

    #[test]
    fn fp_penalty_grows_with_prevalence() {
        let cfg = NuancedRewardConfig::default();
        let gold = set(&["Edema"]);
        let mut stats = LabelStats::uniform_zero();
        stats.prevalence[Label::NO_FINDING.id()] = 0.4;
        stats.prevalence[Label::SUPPORT_DEVICES.id()] = 0.2;
        let mut m = CollapseMonitor::new(cfg.window_size);
        let nf = nuanced_reward(&valid(set(&["Edema", "No Finding"]), 5), gold, &stats, &mut m, &cfg);
        let mut m = CollapseMonitor::new(cfg.window_size);
        let sd = nuanced_reward(&valid(set(&["Edema", "Support Devices"]), 5), gold, &stats, &mut m, &cfg);
        assert_eq!(nf.components.fp, -14.0);
        assert_eq!(sd.components.fp, -12.0);
        assert!(nf.components.fp < sd.components.fp);
    }

    #[test]
    fn collapse_at_71_percent() {
        let cfg = NuancedRewardConfig::default();
        let mut m = CollapseMonitor::new(100);
        assert_eq!(monitor_observe(&mut m, set(&["Edema"]), &cfg), 0.0);
        let mut m = CollapseMonitor::new(100);
        for i in 0..100 {
            m.push(if i < 71 { LabelSet::single(Label::NO_FINDING) } else { set(&["Edema"]) });
        }
        assert_eq!(monitor_observe(&mut m, set(&["Edema"]), &cfg), 80.0);
        assert_eq!(m.len(), 100);
    }

    #[test]
    fn no_collapse_at_or_below_threshold() {
        let cfg = NuancedRewardConfig::default();
        let mut m = CollapseMonitor::new(100);
        for i in 0..100 {
            m.push(if i < 70 { LabelSet::single(Label::NO_FINDING) } else { set(&["Edema"]) });
        }
        assert_eq!(m.penalty(&cfg), 0.0);
        let mut m = CollapseMonitor::new(100);
        for i in 0..100 {
            m.push(LabelSet::single(Label::from_id(i % 14).unwrap()));
        }
        assert_eq!(m.penalty(&cfg), 0.0);
    }

    #[test]
    fn small_window_threshold_rounding() {
        // 0.7 * 10 is 7.000000000000001 in binary; 8 of 10 is one excess.
        let cfg = NuancedRewardConfig::default();
        let mut m = CollapseMonitor::new(10);
        for i in 0..10 {
            m.push(if i < 8 { set(&["Edema"]) } else { LabelSet::EMPTY });
        }
        assert_eq!(m.penalty(&cfg), 50.0 + 30.0);
    }
}
