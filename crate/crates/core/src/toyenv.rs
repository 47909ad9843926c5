//! Synthetic multilabel task with a known optimum, plus a scripted teacher
//! that writes well-formed traces for any label set.
//!
//! Feature `l` above 0.7 switches pathology `l` on; "No Finding" is present
//! exactly when nothing else is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::Dialect;
use crate::policy::{self, filler_token, label_token, Token, COMMA, EOS, SOL_CLOSE, SOL_OPEN, THINK_CLOSE, THINK_OPEN};
use crate::sampler::PoolItem;
use crate::vocab::{Label, LabelSet, NUM_LABELS};

pub const TRIGGER_THRESHOLD: f64 = 0.7;
pub const DEFAULT_FEATURE_DIM: usize = 16;

/// Filler words opening every teacher reasoning block.
pub const REASONING_FILLERS: usize = 14;

/// Length of the shortest teacher trace (one label, EOS included).
pub const MIN_TRACE_TOKENS: usize = REASONING_FILLERS + 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub observation: Observation,
    pub labels: LabelSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub seed: u64,
    pub feature_dim: usize,
    pub rule: String,
    pub examples: Vec<Example>,
}

/// Ground-truth labels of a feature vector.
pub fn labels_for(features: &[f64]) -> LabelSet {
    let mut set: LabelSet = Label::all()
        .filter(|l| l.is_pathology() && features[l.id()] > TRIGGER_THRESHOLD)
        .collect();
    if set.is_empty() {
        set.insert(Label::NO_FINDING);
    }
    set
}

pub fn gen_task(n: usize, d: usize, seed: u64) -> Result<TaskInstance> {
    if d < NUM_LABELS {
        return Err(Error::InvalidArgument(format!("feature dimension {d} < {NUM_LABELS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let features: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            Example {
                id: format!("toy-{seed}-{i}"),
                labels: labels_for(&features),
                observation: Observation { features },
            }
        })
        .collect();
    Ok(TaskInstance {
        seed,
        feature_dim: d,
        rule: format!(
            "pathology l present iff features[l] > {TRIGGER_THRESHOLD}; No Finding iff no pathology"
        ),
        examples,
    })
}

impl TaskInstance {
    pub fn to_pool(&self) -> Vec<PoolItem> {
        self.examples.iter().map(Example::to_pool_item).collect()
    }
}

impl Example {
    pub fn to_pool_item(&self) -> PoolItem {
        PoolItem {
            id: self.id.clone(),
            labels: self.labels,
            payload: serde_json::json!({ "features": self.observation.features }),
        }
    }

    /// Recovers an example from a pool item whose payload carries `features`.
    pub fn from_pool_item(item: &PoolItem) -> Result<Example> {
        let features: Vec<f64> = item
            .payload
            .get("features")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::InvalidArgument(format!("item {:?} has no payload.features", item.id)))?;
        Ok(Example { id: item.id.clone(), labels: item.labels, observation: Observation { features } })
    }
}

/// Teacher token sequence for `labels`, EOS included, in ascending label order.
///
/// `<think> f f … f L1 L2 … </think> <solution> L1 , L2 … </solution>`: a
/// fixed run of [`REASONING_FILLERS`] filler words, then every label once.
/// `pick_filler` chooses each filler word.
pub fn oracle_tokens(labels: LabelSet, pick_filler: impl FnMut() -> usize) -> Vec<Token> {
    let order: Vec<Label> = labels.iter().collect();
    oracle_tokens_ordered(&order, &order, pick_filler)
}

/// Teacher tokens listing the labels in the given orders, one for the
/// reasoning block and one for the solution.
pub fn oracle_tokens_ordered(
    reasoning: &[Label],
    solution: &[Label],
    mut pick_filler: impl FnMut() -> usize,
) -> Vec<Token> {
    let mut out = vec![THINK_OPEN];
    for _ in 0..REASONING_FILLERS {
        out.push(filler_token(pick_filler()));
    }
    out.extend(reasoning.iter().map(|&l| label_token(l)));
    out.push(THINK_CLOSE);
    out.push(SOL_OPEN);
    for (i, &l) in solution.iter().enumerate() {
        if i > 0 {
            out.push(COMMA);
        }
        out.push(label_token(l));
    }
    out.push(SOL_CLOSE);
    out.push(EOS);
    out
}

/// Teacher tokens in ascending label order with random filler words.
pub fn oracle_tokens_random<R: Rng>(labels: LabelSet, rng: &mut R) -> Vec<Token> {
    oracle_tokens(labels, || rng.gen_range(0..policy::NUM_FILLERS))
}

/// Labels by descending feature value, ties broken by id. A label without a
/// feature slot sorts last.
pub fn salience_order(labels: LabelSet, features: &[f64]) -> Vec<Label> {
    let mut order: Vec<Label> = labels.iter().collect();
    let key = |l: &Label| features.get(l.id()).copied().filter(|_| l.is_pathology()).unwrap_or(f64::NEG_INFINITY);
    order.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.id().cmp(&b.id())));
    order
}

/// Teacher tokens for a toy example: labels in salience order in both
/// blocks, random filler words. This is the order a linear policy can
/// reproduce by picking the strongest remaining finding.
pub fn teacher_tokens<R: Rng>(example: &Example, rng: &mut R) -> Vec<Token> {
    let order = salience_order(example.labels, &example.observation.features);
    oracle_tokens_ordered(&order, &order, || rng.gen_range(0..policy::NUM_FILLERS))
}

/// Deterministic teacher trace in the requested dialect.
pub fn oracle_trace(labels: LabelSet, dialect: Dialect) -> String {
    let mut i = 0;
    let tokens = oracle_tokens(labels, || {
        i += 1;
        i - 1
    });
    match dialect {
        Dialect::ThinkSolution => policy::render(&tokens),
        Dialect::AnalysisConclusion => {
            let close = tokens.iter().position(|&t| t == THINK_CLOSE).unwrap_or(1);
            let reasoning = policy::render(&tokens[1..close]);
            format!("{{analysis: {reasoning}, conclusion: {}}}", labels.names().join(", "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_completion;
    use crate::sampler::write_jsonl;

    #[test]
    fn rule_base_cases() {
        assert_eq!(labels_for(&[0.0; 16]), LabelSet::single(Label::NO_FINDING));
        let mut f = [0.0; 16];
        f[0] = 0.9;
        assert_eq!(labels_for(&f), LabelSet::from_names(&["Atelectasis"]).unwrap());
        // the No Finding feature slot does not trigger anything
        let mut f = [0.0; 16];
        f[Label::NO_FINDING.id()] = 0.95;
        assert_eq!(labels_for(&f), LabelSet::single(Label::NO_FINDING));
        let mut f = [0.0; 16];
        f[3] = 0.7;
        assert_eq!(labels_for(&f), LabelSet::single(Label::NO_FINDING));
    }

    #[test]
    fn small_dimension_rejected() {
        assert!(gen_task(10, 13, 0).is_err());
        assert!(gen_task(10, 14, 0).is_ok());
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let dump = |t: &TaskInstance| {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, t.to_pool()).unwrap();
            buf
        };
        let a = gen_task(1000, 16, 42).unwrap();
        let b = gen_task(1000, 16, 42).unwrap();
        assert_eq!(dump(&a), dump(&b));
        assert_ne!(dump(&a), dump(&gen_task(1000, 16, 43).unwrap()));
        assert!(a.examples.iter().all(|e| !e.labels.is_empty()));
    }

    #[test]
    fn pool_round_trip() {
        let t = gen_task(5, 16, 1).unwrap();
        for e in &t.examples {
            assert_eq!(&Example::from_pool_item(&e.to_pool_item()).unwrap(), e);
        }
    }

    #[test]
    fn no_finding_trace() {
        let text = oracle_trace(LabelSet::single(Label::NO_FINDING), Dialect::ThinkSolution);
        assert_eq!(text.matches("<think>").count(), 1);
        assert_eq!(text.matches("<solution>").count(), 1);
        let p = parse_completion(&text, Dialect::ThinkSolution);
        assert!(p.valid);
        assert_eq!(p.solution_text, "No Finding");
        assert_eq!(p.reasoning_text.matches("No Finding").count(), 1);
    }

    #[test]
    fn trace_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bits in [1u16, 0b111, 0b1111_1111, 0x3fff] {
            let y = LabelSet::from_bits(bits);
            let toks = oracle_tokens_random(y, &mut rng);
            assert!(toks.len() >= MIN_TRACE_TOKENS);
            assert_eq!(*toks.last().unwrap(), EOS);
        }
    }
}
