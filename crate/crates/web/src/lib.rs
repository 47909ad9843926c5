//! Browser bindings. Every export takes plain values and returns a JSON
//! string; failures come back as `{"error": "..."}` so the page never has to
//! catch exceptions.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use rlvr_core::parser::{parse_completion, Dialect};
use rlvr_core::policy::{nucleus, VOCAB_SIZE};
use rlvr_core::rewards::{hard_reward, nuanced_reward, CollapseMonitor, HardRewardConfig, NuancedRewardConfig};
use rlvr_core::sampler::{balanced_sample, label_counts, SamplePlan};
use rlvr_core::toyenv::gen_task;
use rlvr_core::vocab::{Label, LabelSet, LabelStats};

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn split_list(s: &str) -> Vec<&str> {
    s.split([',', '\n']).map(str::trim).filter(|x| !x.is_empty()).collect()
}

/// Parses `text` and scores it against the comma-separated `gold` labels
/// with both rewards. The collapse window starts empty.
#[wasm_bindgen]
pub fn score_completion(text: &str, gold: &str, min_length_tokens: usize) -> String {
    respond((|| {
        let gold = LabelSet::from_names(&split_list(gold)).map_err(|e| e.to_string())?;
        let hard_cfg = HardRewardConfig { min_length_tokens: min_length_tokens.max(1), ..Default::default() };
        let nuanced_cfg = NuancedRewardConfig::default();
        let parsed = parse_completion(text, Dialect::ThinkSolution);
        let hard = hard_reward(&parsed, gold, &hard_cfg);
        let mut monitor = CollapseMonitor::new(nuanced_cfg.window_size);
        let nuanced = nuanced_reward(&parsed, gold, &LabelStats::uniform_zero(), &mut monitor, &nuanced_cfg);
        Ok(json!({
            "valid": parsed.valid,
            "predicted": parsed.predicted.names(),
            "invalid_labels": parsed.invalid_label_count,
            "duplicates": parsed.duplicate_count,
            "extraneous_text": parsed.extraneous_text,
            "tokens": parsed.token_length,
            "hard": hard.total,
            "nuanced": nuanced.total,
            "components": nuanced.components,
        }))
    })())
}

/// Decoding distribution over the first `logits` entries (padded with a
/// very low logit up to the vocabulary size): plain softmax and the
/// temperature/nucleus distribution actually sampled from.
#[wasm_bindgen]
pub fn decoding_distribution(logits: &str, temperature: f64, top_p: f64) -> String {
    respond((|| {
        let values: Vec<f64> = split_list(logits)
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| format!("not a number: {x:?}")))
            .collect::<Result<_, _>>()?;
        if values.is_empty() || values.len() > VOCAB_SIZE {
            return Err(format!("give between 1 and {VOCAB_SIZE} logits"));
        }
        if !(temperature > 0.0) || !(top_p > 0.0 && top_p <= 1.0) {
            return Err("temperature must be > 0 and top_p in (0, 1]".into());
        }
        let z: [f64; VOCAB_SIZE] = std::array::from_fn(|k| values.get(k).copied().unwrap_or(-1e9));
        let plain = nucleus(&z, 1.0, 1.0);
        let sampled = nucleus(&z, temperature, top_p);
        let n = values.len();
        let entropy = |p: &[f64]| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        Ok(json!({
            "softmax": &plain[..n],
            "sampled": &sampled[..n],
            "kept": sampled[..n].iter().filter(|&&x| x > 0.0).count(),
            "entropy_softmax": entropy(&plain[..n]),
            "entropy_sampled": entropy(&sampled[..n]),
        }))
    })())
}

/// Draws a toy pool and a balanced selection from it; reports per-label
/// counts in the pool, in the selection and in the first `n` pool items.
#[wasm_bindgen]
pub fn sampler_coverage(pool_size: usize, n: usize, min_fraction: f64, penalty: f64, seed: u64) -> String {
    respond((|| {
        if pool_size > 100_000 {
            return Err("pool size is capped at 100000 in the browser".into());
        }
        let pool = gen_task(pool_size, 16, seed).map_err(|e| e.to_string())?.to_pool();
        let plan = SamplePlan { n, min_fraction, overrepresentation_penalty: penalty, seed };
        let sel = balanced_sample(&pool, &plan).map_err(|e| e.to_string())?;
        let in_pool = label_counts(pool.iter().map(|i| i.labels));
        let head = label_counts(pool.iter().take(n).map(|i| i.labels));
        let picked = sel.counts();
        let rows: Vec<Value> = Label::all()
            .map(|l| {
                json!({
                    "label": l.name(),
                    "pool": in_pool[l.id()],
                    "first_n": head[l.id()],
                    "balanced": picked[l.id()],
                })
            })
            .collect();
        Ok(json!({
            "target": plan.target(),
            "satisfied": sel.coverage.satisfied(),
            "shortfalls": sel.coverage.shortfalls,
            "single_label_fraction": sel.items.iter().filter(|i| i.labels.len() == 1).count() as f64 / n.max(1) as f64,
            "rows": rows,
        }))
    })())
}
