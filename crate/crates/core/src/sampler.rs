//! Penalty-based greedy sampler with a per-label coverage floor, and the
//! disjoint SFT/RL split built on top of it.
//!
//! Each iteration picks the unselected item with the highest
//! [`score_candidate`] given the label counts selected so far. Ties go to
//! the item that comes first in a seeded shuffle of the pool.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Label, LabelSet, NUM_LABELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: String,
    pub labels: LabelSet,
    #[serde(default)]
    pub payload: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplePlan {
    pub n: usize,
    pub min_fraction: f64,
    pub overrepresentation_penalty: f64,
    pub seed: u64,
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan { n: 1000, min_fraction: 0.05, overrepresentation_penalty: 2.0, seed: 0 }
    }
}

impl SamplePlan {
    /// Minimum number of selected items that must carry each label.
    pub fn target(&self) -> usize {
        (self.min_fraction * self.n as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_fraction > 0.0 && self.min_fraction < 1.0) {
            return Err(Error::Config("sampler.min_fraction must be in (0, 1)".into()));
        }
        if !(self.overrepresentation_penalty > 0.0) {
            return Err(Error::Config("sampler.overrepresentation_penalty must be > 0".into()));
        }
        Ok(())
    }
}

/// Sum over the item's labels of the remaining deficit, or minus
/// `penalty * surplus` for labels already at or above target.
pub fn score_candidate(
    labels: LabelSet,
    selected_counts: &[usize; NUM_LABELS],
    n: usize,
    plan: &SamplePlan,
) -> f64 {
    let target = SamplePlan { n, ..plan.clone() }.target() as f64;
    labels
        .iter()
        .map(|l| {
            let deficit = target - selected_counts[l.id()] as f64;
            if deficit > 0.0 {
                deficit
            } else {
                plan.overrepresentation_penalty * deficit
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub label: Label,
    pub available: usize,
    pub required: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCoverage {
    pub label: Label,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub n: usize,
    pub target: usize,
    pub labels: Vec<LabelCoverage>,
    /// Labels the pool cannot cover; empty when the plan is feasible.
    pub shortfalls: Vec<Shortfall>,
}

impl CoverageReport {
    pub fn satisfied(&self) -> bool {
        self.labels.iter().all(|c| c.count >= self.target)
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    /// Selected items in pick order.
    pub items: Vec<PoolItem>,
    /// Score of each pick at the moment it was made.
    pub scores: Vec<f64>,
    pub coverage: CoverageReport,
}

impl Selection {
    pub fn counts(&self) -> [usize; NUM_LABELS] {
        label_counts(self.items.iter().map(|i| i.labels))
    }
}

pub fn label_counts(sets: impl IntoIterator<Item = LabelSet>) -> [usize; NUM_LABELS] {
    let mut counts = [0; NUM_LABELS];
    for s in sets {
        for l in s.iter() {
            counts[l.id()] += 1;
        }
    }
    counts
}

/// Per-label shortfalls of `pool` against the plan's coverage floor.
pub fn feasibility(pool: &[PoolItem], plan: &SamplePlan) -> Vec<Shortfall> {
    let available = label_counts(pool.iter().map(|i| i.labels));
    let required = plan.target();
    Label::all()
        .filter(|l| available[l.id()] < required)
        .map(|label| Shortfall { label, available: available[label.id()], required })
        .collect()
}

fn coverage_report(items: &[PoolItem], plan: &SamplePlan, shortfalls: Vec<Shortfall>) -> CoverageReport {
    let counts = label_counts(items.iter().map(|i| i.labels));
    CoverageReport {
        n: plan.n,
        target: plan.target(),
        labels: Label::all()
            .map(|label| LabelCoverage {
                label,
                count: counts[label.id()],
                fraction: if plan.n == 0 { 0.0 } else { counts[label.id()] as f64 / plan.n as f64 },
            })
            .collect(),
        shortfalls,
    }
}

/// Items sharing a label set always score the same, so candidates are
/// bucketed by label set. Each bucket keeps its members in shuffle order and
/// the selection only has to scan bucket heads.
struct Bucket {
    labels: LabelSet,
    members: Vec<usize>,
    head: usize,
}

pub fn balanced_sample(pool: &[PoolItem], plan: &SamplePlan) -> Result<Selection> {
    plan.validate()?;
    if pool.len() < plan.n {
        return Err(Error::InsufficientPool { requested: plan.n, available: pool.len() });
    }
    let shortfalls = feasibility(pool, plan);

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));

    let mut buckets: Vec<Bucket> = Vec::new();
    let mut by_set: HashMap<LabelSet, usize> = HashMap::new();
    for &idx in &order {
        let labels = pool[idx].labels;
        let b = *by_set.entry(labels).or_insert_with(|| {
            buckets.push(Bucket { labels, members: Vec::new(), head: 0 });
            buckets.len() - 1
        });
        buckets[b].members.push(idx);
    }
    // Shuffle rank of every pool index, for tie-breaking across buckets.
    let mut rank = vec![0usize; pool.len()];
    for (r, &idx) in order.iter().enumerate() {
        rank[idx] = r;
    }

    // Label ids of each bucket, so a scan sums a few cached per-label terms.
    let ids: Vec<Vec<usize>> = buckets.iter().map(|b| b.labels.iter().map(|l| l.id()).collect()).collect();
    let mut live: Vec<usize> = (0..buckets.len()).collect();
    let target = plan.target() as f64;

    let mut counts = [0usize; NUM_LABELS];
    let mut picked = Vec::with_capacity(plan.n);
    let mut scores = Vec::with_capacity(plan.n);
    for _ in 0..plan.n {
        // Same per-label term as `score_candidate`.
        let term: [f64; NUM_LABELS] = std::array::from_fn(|l| {
            let deficit = target - counts[l] as f64;
            if deficit > 0.0 {
                deficit
            } else {
                plan.overrepresentation_penalty * deficit
            }
        });
        let mut best: Option<(f64, usize, usize)> = None;
        for &b in &live {
            let s: f64 = ids[b].iter().map(|&l| term[l]).sum();
            let better = match best {
                None => true,
                Some((bs, _, br)) => s > bs || (s == bs && rank[buckets[b].members[buckets[b].head]] < br),
            };
            if better {
                best = Some((s, b, rank[buckets[b].members[buckets[b].head]]));
            }
        }
        let (s, b, _) = best.expect("pool has at least n items");
        let bucket = &mut buckets[b];
        let idx = bucket.members[bucket.head];
        bucket.head += 1;
        if bucket.head == bucket.members.len() {
            live.retain(|&x| x != b);
        }
        for &l in &ids[b] {
            counts[l] += 1;
        }
        picked.push(idx);
        scores.push(s);
    }

    let items: Vec<PoolItem> = picked.into_iter().map(|i| pool[i].clone()).collect();
    let coverage = coverage_report(&items, plan, shortfalls);
    Ok(Selection { items, scores, coverage })
}

/// Draws the SFT selection first, removes it from the pool and draws the RL
/// selection from what is left. The RL draw uses `n_rl` and the next seed.
pub fn split_disjoint(
    pool: &[PoolItem],
    n_sft: usize,
    n_rl: usize,
    plan: &SamplePlan,
) -> Result<(Selection, Selection)> {
    if n_sft + n_rl > pool.len() {
        return Err(Error::InsufficientPool { requested: n_sft + n_rl, available: pool.len() });
    }
    let mut seen = HashSet::with_capacity(pool.len());
    if let Some(dup) = pool.iter().find(|i| !seen.insert(i.id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate pool id {:?}", dup.id)));
    }
    let sft = balanced_sample(pool, &SamplePlan { n: n_sft, ..plan.clone() })?;
    let taken: HashSet<&str> = sft.items.iter().map(|i| i.id.as_str()).collect();
    let rest: Vec<PoolItem> = pool.iter().filter(|i| !taken.contains(i.id.as_str())).cloned().collect();
    let rl = balanced_sample(
        &rest,
        &SamplePlan { n: n_rl, seed: plan.seed.wrapping_add(1), ..plan.clone() },
    )?;
    Ok((sft, rl))
}

/// Reads a pool from JSONL. Blank lines are skipped; every item needs at
/// least one label.
pub fn read_pool<R: BufRead>(reader: R) -> Result<Vec<PoolItem>> {
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: PoolItem = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("pool line {}: {e}", lineno + 1))
        })?;
        if item.labels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "pool line {}: item {:?} has no labels",
                lineno + 1,
                item.id
            )));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: usize, names: &[&str]) -> PoolItem {
        PoolItem {
            id: format!("i{id}"),
            labels: LabelSet::from_names(names).unwrap(),
            payload: serde_json::Value::Null,
        }
    }

    fn plan(n: usize) -> SamplePlan {
        SamplePlan { n, ..Default::default() }
    }

    #[test]
    fn score_examples() {
        let zero = [0; NUM_LABELS];
        let edema = LabelSet::from_names(&["Edema"]).unwrap();
        assert_eq!(score_candidate(edema, &zero, 100, &plan(100)), 5.0);

        let mut counts = [0; NUM_LABELS];
        counts[3] = 10;
        assert_eq!(score_candidate(edema, &counts, 100, &plan(100)), -10.0);

        let two = LabelSet::from_names(&["Edema", "Fracture"]).unwrap();
        let mut counts = [0; NUM_LABELS];
        counts[3] = 6; // surplus 1
        counts[5] = 2; // deficit 3
        assert_eq!(score_candidate(two, &counts, 100, &plan(100)), 1.0);
    }

    #[test]
    fn target_is_a_ceiling() {
        assert_eq!(plan(1000).target(), 50);
        assert_eq!(plan(2000).target(), 100);
        assert_eq!(plan(30).target(), 2);
        assert_eq!(plan(100).target(), 5);
    }

    #[test]
    fn whole_pool_when_n_equals_len() {
        let pool: Vec<_> = (0..6).map(|i| item(i, &["Edema"])).collect();
        let sel = balanced_sample(&pool, &plan(6)).unwrap();
        let mut ids: Vec<_> = sel.items.iter().map(|i| i.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, (0..6).map(|i| format!("i{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn too_small_pool_is_an_error() {
        let pool: Vec<_> = (0..3).map(|i| item(i, &["Edema"])).collect();
        assert!(matches!(
            balanced_sample(&pool, &plan(4)),
            Err(Error::InsufficientPool { requested: 4, available: 3 })
        ));
        assert!(split_disjoint(&pool, 2, 2, &plan(0)).is_err());
    }

    #[test]
    fn shortfalls_reported() {
        let pool: Vec<_> = (0..40).map(|i| item(i, &["Edema"])).collect();
        let sel = balanced_sample(&pool, &plan(20)).unwrap();
        assert_eq!(sel.coverage.shortfalls.len(), 13);
        assert!(!sel.coverage.satisfied());
    }

    #[test]
    fn deterministic_and_reproducible() {
        let pool: Vec<_> = (0..200)
            .map(|i| {
                let l = Label::from_id(i % 14).unwrap();
                let m = Label::from_id((i * 7 + 3) % 14).unwrap();
                PoolItem { id: format!("p{i}"), labels: [l, m].into_iter().collect(), payload: Default::default() }
            })
            .collect();
        let p = SamplePlan { n: 60, seed: 9, ..Default::default() };
        let a = balanced_sample(&pool, &p).unwrap();
        let b = balanced_sample(&pool, &p).unwrap();
        assert_eq!(a.items, b.items);
        let c = balanced_sample(&pool, &SamplePlan { seed: 10, ..p }).unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn split_partitions_pool_when_sizes_add_up() {
        let pool: Vec<_> = (0..30).map(|i| item(i, &[Label::from_id(i % 14).unwrap().name()])).collect();
        let (sft, rl) = split_disjoint(&pool, 20, 10, &plan(0)).unwrap();
        let mut ids: Vec<_> = sft.items.iter().chain(&rl.items).map(|i| i.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let pool = vec![item(0, &["Edema"]), item(0, &["Fracture"]), item(1, &["Edema"])];
        assert!(split_disjoint(&pool, 1, 1, &plan(0)).is_err());
    }

    #[test]
    fn pool_jsonl() {
        let text = "{\"id\":\"a\",\"labels\":[\"Edema\"],\"payload\":{\"x\":1}}\n\n{\"id\":\"b\",\"labels\":[\"no finding\"]}\n";
        let pool = read_pool(text.as_bytes()).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[1].labels, LabelSet::single(Label::NO_FINDING));
        assert!(read_pool("{\"id\":\"a\",\"labels\":[]}".as_bytes()).is_err());
        assert!(read_pool("{\"id\":\"a\",\"labels\":[\"Pneumonitis\"]}".as_bytes()).is_err());
    }
}
