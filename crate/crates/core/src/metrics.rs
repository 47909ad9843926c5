//! Multilabel evaluation: per-label confusion counts, micro and macro
//! precision/recall/F1, fail rate and EMA smoothing for training curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::ParsedOutput;
use crate::vocab::{canonical_labels, nih_compatible_subset, Label, LabelSet, NUM_LABELS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelFilter {
    #[default]
    Full14,
    Nih9,
}

impl LabelFilter {
    pub fn labels(self) -> Vec<Label> {
        match self {
            LabelFilter::Full14 => canonical_labels(),
            LabelFilter::Nih9 => nih_compatible_subset(),
        }
    }
}

impl std::str::FromStr for LabelFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full14" => Ok(LabelFilter::Full14),
            "nih9" => Ok(LabelFilter::Nih9),
            other => Err(Error::InvalidArgument(format!("unknown label filter {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub labels: Vec<Label>,
    pub tp: [usize; NUM_LABELS],
    pub fp: [usize; NUM_LABELS],
    pub fn_: [usize; NUM_LABELS],
    pub n_examples: usize,
    pub failures: usize,
}

impl ConfusionCounts {
    pub fn new(labels: &[Label]) -> Self {
        ConfusionCounts {
            labels: labels.to_vec(),
            tp: [0; NUM_LABELS],
            fp: [0; NUM_LABELS],
            fn_: [0; NUM_LABELS],
            n_examples: 0,
            failures: 0,
        }
    }

    /// Invalid predictions count as empty sets and as a failure.
    pub fn add(&mut self, parsed: &ParsedOutput, gold: LabelSet) {
        let predicted = if parsed.valid { parsed.predicted } else { LabelSet::EMPTY };
        self.add_sets(predicted, gold);
        if !parsed.valid {
            self.failures += 1;
        }
    }

    pub fn add_sets(&mut self, predicted: LabelSet, gold: LabelSet) {
        for &l in &self.labels {
            let i = l.id();
            match (predicted.contains(l), gold.contains(l)) {
                (true, true) => self.tp[i] += 1,
                (true, false) => self.fp[i] += 1,
                (false, true) => self.fn_[i] += 1,
                (false, false) => {}
            }
        }
        self.n_examples += 1;
    }

    /// Combines counts gathered over disjoint example sets.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::InvalidArgument("merging counts over different label filters".into()));
        }
        for i in 0..NUM_LABELS {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        self.n_examples += other.n_examples;
        self.failures += other.failures;
        Ok(())
    }

    pub fn label_prf(&self, label: Label) -> Prf {
        let i = label.id();
        Prf::from_counts(self.tp[i], self.fp[i], self.fn_[i])
    }
}

pub fn confusion(preds: &[ParsedOutput], golds: &[LabelSet], filter: &[Label]) -> Result<ConfusionCounts> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: golds.len() });
    }
    let mut counts = ConfusionCounts::new(filter);
    for (p, &g) in preds.iter().zip(golds) {
        counts.add(p, g);
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
        Prf {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

/// Precision/recall/F1 of the counts pooled over the filter's labels.
pub fn micro_prf(c: &ConfusionCounts) -> Prf {
    let (tp, fp, fn_) = c.labels.iter().fold((0, 0, 0), |(tp, fp, fn_), l| {
        (tp + c.tp[l.id()], fp + c.fp[l.id()], fn_ + c.fn_[l.id()])
    });
    Prf::from_counts(tp, fp, fn_)
}

/// Unweighted mean of per-label precision, recall and F1.
pub fn macro_prf(c: &ConfusionCounts) -> Prf {
    let per: Vec<Prf> = c.labels.iter().map(|&l| c.label_prf(l)).collect();
    Prf {
        precision: mean(per.iter().map(|p| p.precision)),
        recall: mean(per.iter().map(|p| p.recall)),
        f1: mean(per.iter().map(|p| p.f1)),
    }
}

/// Mean of already-computed per-category scores, as in an "overall
/// average" table row.
pub fn macro_average(scores: &[f64]) -> f64 {
    mean(scores.iter().copied())
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

pub fn fail_rate(preds: &[ParsedOutput]) -> f64 {
    ratio(preds.iter().filter(|p| !p.valid).count(), preds.len())
}

/// Smoothing factor used for reported training curves.
pub const REPORT_EMA_ALPHA: f64 = 0.95;

/// `s_0 = x_0`, `s_t = alpha * s_{t-1} + (1 - alpha) * x_t`.
pub fn ema(series: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut prev: Option<f64> = None;
    for &x in series {
        let s = match prev {
            None => x,
            Some(p) => alpha * p + (1.0 - alpha) * x,
        };
        out.push(s);
        prev = Some(s);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
    pub fail_rate: f64,
    pub per_category: Vec<CategoryScore>,
    pub n_examples: usize,
}

impl EvalReport {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        EvalReport {
            micro: micro_prf(c),
            macro_: macro_prf(c),
            fail_rate: ratio(c.failures, c.n_examples),
            per_category: c
                .labels
                .iter()
                .map(|&label| {
                    let prf = c.label_prf(label);
                    CategoryScore {
                        label,
                        precision: prf.precision,
                        recall: prf.recall,
                        f1: prf.f1,
                        support: c.tp[label.id()] + c.fn_[label.id()],
                    }
                })
                .collect(),
            n_examples: c.n_examples,
        }
    }

    /// Fixed-width text table: per-category rows, then the macro average,
    /// micro scores and fail rate.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>9} {:>9} {:>9} {:>8}", "Category", "P", "R", "F1", "Support");
        for c in &self.per_category {
            let _ = writeln!(
                s,
                "{:<28} {:>9.3} {:>9.3} {:>9.3} {:>8}",
                c.label.name(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        let _ = writeln!(
            s,
            "{:<28} {:>9.3} {:>9.3} {:>9.3}",
            "Overall Average (Macro)", self.macro_.precision, self.macro_.recall, self.macro_.f1
        );
        let _ = writeln!(
            s,
            "{:<28} {:>9.3} {:>9.3} {:>9.3}",
            "Micro", self.micro.precision, self.micro.recall, self.micro.f1
        );
        let _ = writeln!(s, "{:<28} {:>9.3}   (n = {})", "Fail rate", self.fail_rate, self.n_examples);
        s
    }
}

pub fn evaluate(preds: &[ParsedOutput], golds: &[LabelSet], filter: LabelFilter) -> Result<EvalReport> {
    Ok(EvalReport::from_counts(&confusion(preds, golds, &filter.labels())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: &[&str]) -> LabelSet {
        LabelSet::from_names(names).unwrap()
    }

    fn ok(pred: LabelSet) -> ParsedOutput {
        ParsedOutput { valid: true, predicted: pred, ..Default::default() }
    }

    #[test]
    fn perfect_predictions() {
        let golds = vec![set(&["Edema"]), set(&["Fracture", "Pneumonia"]), set(&["No Finding"])];
        let preds: Vec<_> = golds.iter().map(|&g| ok(g)).collect();
        let c = confusion(&preds, &golds, &canonical_labels()).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&x| x == 0));
        let r = EvalReport::from_counts(&c);
        assert_eq!(r.micro.f1, 1.0);
    }

    #[test]
    fn invalid_parse_is_an_empty_prediction() {
        let c = confusion(&[ParsedOutput::default()], &[set(&["Edema"])], &canonical_labels()).unwrap();
        assert_eq!(c.fn_[3], 1);
        assert_eq!(c.failures, 1);
        assert_eq!(c.tp.iter().sum::<usize>() + c.fp.iter().sum::<usize>(), 0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            confusion(&[ok(LabelSet::EMPTY)], &[], &canonical_labels()),
            Err(Error::LengthMismatch { left: 1, right: 0 })
        ));
    }

    #[test]
    fn micro_hand_arithmetic() {
        let mut c = ConfusionCounts::new(&canonical_labels()[..2]);
        c.tp[0] = 1;
        c.fp[0] = 1;
        c.fn_[0] = 1;
        c.tp[1] = 2;
        let m = micro_prf(&c);
        assert_eq!((m.precision, m.recall, m.f1), (0.75, 0.75, 0.75));
        let zero = ConfusionCounts::new(&canonical_labels());
        assert_eq!(micro_prf(&zero), Prf::default());
        assert_eq!(macro_prf(&zero), Prf::default());
    }

    #[test]
    fn macro_of_identical_values() {
        assert!((macro_average(&[0.42; 9]) - 0.42).abs() < 1e-15);
    }

    #[test]
    fn single_label_filter_micro_equals_macro() {
        let golds = vec![set(&["Edema"]), set(&["Edema", "Fracture"]), set(&["Fracture"])];
        let preds = vec![ok(set(&["Edema"])), ok(LabelSet::EMPTY), ok(set(&["Edema"]))];
        let c = confusion(&preds, &golds, &[Label::from_id(3).unwrap()]).unwrap();
        assert_eq!(micro_prf(&c), macro_prf(&c));
    }

    #[test]
    fn fail_rate_cases() {
        assert_eq!(fail_rate(&[]), 0.0);
        assert_eq!(fail_rate(&[ok(LabelSet::EMPTY)]), 0.0);
        let mut preds = vec![ParsedOutput::default(); 241];
        preds.extend(std::iter::repeat_n(ok(LabelSet::EMPTY), 259));
        assert_eq!(fail_rate(&preds), 0.482);
    }

    #[test]
    fn ema_cases() {
        assert_eq!(ema(&[3.0; 5], 0.95), vec![3.0; 5]);
        let e = ema(&[0.0, 1.0], 0.95);
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 0.05).abs() < 1e-15);
        assert!(ema(&[], 0.9).is_empty());
    }

    #[test]
    fn nih_filter_rows() {
        let r = evaluate(&[ok(set(&["Edema"]))], &[set(&["Edema"])], LabelFilter::Nih9).unwrap();
        assert_eq!(r.per_category.len(), 9);
        assert_eq!(r.table().lines().count(), 1 + 9 + 3);
        assert_eq!("nih9".parse::<LabelFilter>().unwrap(), LabelFilter::Nih9);
        assert!("all".parse::<LabelFilter>().is_err());
    }

    #[test]
    fn merge_is_additive() {
        let golds = vec![set(&["Edema"]), set(&["Fracture"])];
        let preds = vec![ok(set(&["Edema"])), ParsedOutput::default()];
        let labels = canonical_labels();
        let whole = confusion(&preds, &golds, &labels).unwrap();
        let mut a = confusion(&preds[..1], &golds[..1], &labels).unwrap();
        a.merge(&confusion(&preds[1..], &golds[1..], &labels).unwrap()).unwrap();
        assert_eq!(a, whole);
    }
}
