//! Group-relative policy optimisation.
//!
//! For every observation a group of completions is drawn from the frozen
//! pre-update policy, scored, and centred against the group mean. The
//! objective is the clipped token-level importance-weighted surrogate minus
//! an exact per-state KL penalty towards the reference policy:
//!
//! ```text
//! J = 1/B sum_b 1/G sum_i w_i sum_j [ min(r_ij A_i, clip(r_ij, 1-eps_lo, 1+eps_hi) A_i)
//!                                     - beta KL(pi(.|s_ij) || pi_ref(.|s_ij)) ]
//! ```
//!
//! with `w_i = 1/|t_i|` (`per_token`) or `w_i = 1/max_len` (`drgrpo`).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ConfusionCounts, EvalReport, LabelFilter};
use crate::parser::{parse_completion, Dialect, ParsedOutput};
use crate::policy::{
    accumulate, entropy_of, eval_states, sample_sequence, Completion, GenConfig, PolicyParams, VOCAB_SIZE,
};
use crate::rewards::{
    hard_reward, jaccard, nuanced_reward, CollapseMonitor, HardRewardConfig, NuancedRewardConfig,
    RewardBreakdown, RewardComponents,
};
use crate::toyenv::{Example, Observation};
use crate::vocab::{LabelSet, LabelStats};

/// Floor applied to reference probabilities inside the KL term.
pub const KL_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `1/|t_i|` per sequence and std-scaled advantages.
    PerToken,
    /// Constant `1/max_len` per sequence and mean-centred advantages only.
    #[default]
    Drgrpo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    Hard,
    Nuanced,
    /// Hard reward plus a bonus per repeated label; used to provoke collapse.
    Repetition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    pub kl_coefficient: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub normalization: Normalization,
    pub advantage_std_floor: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Observations per step.
    pub batch_size: usize,
    /// Gradient steps taken on each batch of rollouts.
    pub inner_updates: usize,
    pub reward: RewardKind,
    /// Per-duplicate bonus of the `repetition` reward.
    pub repetition_bonus: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 4,
            temperature: 0.8,
            top_p: 0.95,
            max_len: 64,
            kl_coefficient: 0.15,
            clip_low: 0.15,
            clip_high: 0.22,
            normalization: Normalization::Drgrpo,
            advantage_std_floor: 1e-6,
            learning_rate: 10.0,
            steps: 500,
            batch_size: 8,
            inner_updates: 1,
            reward: RewardKind::Hard,
            repetition_bonus: 0.25,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("grpo.group_size must be >= 2".into()));
        }
        if !(self.clip_low > 0.0 && self.clip_high > 0.0) {
            return Err(Error::Config("grpo clip bounds must be positive".into()));
        }
        if !(self.kl_coefficient >= 0.0) {
            return Err(Error::Config("grpo.kl_coefficient must be >= 0".into()));
        }
        if self.max_len < 2 || self.batch_size == 0 || self.inner_updates == 0 {
            return Err(Error::Config("grpo: max_len >= 2, batch_size >= 1, inner_updates >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("grpo: temperature >= 0 and top_p in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn gen(&self) -> GenConfig {
        GenConfig { temperature: self.temperature, top_p: self.top_p, max_len: self.max_len }
    }
}

/// Group-relative advantages. Both modes subtract the group mean;
/// `per_token` also divides by `max(std, floor)` (population std).
pub fn compute_advantages(rewards: &[f64], mode: Normalization, std_floor: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    match mode {
        Normalization::Drgrpo => rewards.iter().map(|r| r - mean).collect(),
        Normalization::PerToken => {
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            let denom = std.max(std_floor);
            rewards.iter().map(|r| (r - mean) / denom).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub observation: Observation,
    pub gold: LabelSet,
    /// Completions carry their rollout-time log-probabilities.
    pub completions: Vec<Completion>,
    pub parsed: Vec<ParsedOutput>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

/// `exp(log pi_new - log pi_old)` for every token of every completion.
pub fn importance_ratios(params: &PolicyParams, rollout: &GroupRollout) -> Result<Vec<Vec<f64>>> {
    rollout
        .completions
        .iter()
        .map(|c| {
            let states = eval_states(params, &rollout.observation, &c.tokens)?;
            Ok(states
                .iter()
                .zip(&c.tokens)
                .zip(&c.logprobs)
                .map(|((s, &t), old)| (s.log_probs[t as usize] - old).exp())
                .collect())
        })
        .collect()
}

fn sequence_weight(len: usize, mode: Normalization, max_len: usize) -> f64 {
    match mode {
        Normalization::PerToken => 1.0 / len.max(1) as f64,
        Normalization::Drgrpo => 1.0 / max_len.max(1) as f64,
    }
}

/// `KL(p || q)` of two log-probability vectors, with `q` floored.
pub fn categorical_kl(log_p: &[f64; VOCAB_SIZE], log_q: &[f64; VOCAB_SIZE]) -> f64 {
    let floor = KL_PROB_FLOOR.ln();
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq.max(floor))
            }
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// Gradient of `objective` (ascent direction).
    pub grad: Vec<f64>,
    /// Fraction of tokens whose clipped branch was active.
    pub clip_fraction: f64,
}

/// Clipped surrogate minus `beta * KL`, aggregated per `cfg.normalization`,
/// with its exact gradient. Clipped tokens contribute no surrogate gradient.
pub fn grpo_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    rollouts: &[GroupRollout],
    cfg: &GrpoConfig,
) -> Result<ObjectiveValue> {
    let mut grad = vec![0.0; params.len()];
    let mut surrogate = 0.0;
    let mut kl_total = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let b = rollouts.len().max(1) as f64;
    let (lo, hi) = (1.0 - cfg.clip_low, 1.0 + cfg.clip_high);

    for rollout in rollouts {
        let g = rollout.completions.len().max(1) as f64;
        for (c, &adv) in rollout.completions.iter().zip(&rollout.advantages) {
            let scale = sequence_weight(c.len(), cfg.normalization, cfg.max_len) / (g * b);
            let states = eval_states(params, &rollout.observation, &c.tokens)?;
            let ref_states = eval_states(reference, &rollout.observation, &c.tokens)?;
            for (((s, rs), &t), &old) in states.iter().zip(&ref_states).zip(&c.tokens).zip(&c.logprobs) {
                let t = t as usize;
                let ratio = (s.log_probs[t] - old).exp();
                let unclipped = ratio * adv;
                let clipped_term = ratio.clamp(lo, hi) * adv;
                let active = unclipped <= clipped_term;
                surrogate += scale * unclipped.min(clipped_term);
                tokens += 1;

                let p = s.log_probs.map(f64::exp);
                let mut d = [0.0; VOCAB_SIZE];
                if active {
                    // d(ratio * A)/dz = A * ratio * (onehot(t) - p)
                    let coef = adv * ratio;
                    for k in 0..VOCAB_SIZE {
                        d[k] = -coef * p[k];
                    }
                    d[t] += coef;
                } else {
                    clipped += 1;
                }
                if cfg.kl_coefficient != 0.0 {
                    let kl = categorical_kl(&s.log_probs, &rs.log_probs);
                    kl_total += scale * kl;
                    // dKL/dz_k = p_k (log p_k - log q_k - KL)
                    let floor = KL_PROB_FLOOR.ln();
                    for k in 0..VOCAB_SIZE {
                        d[k] -= cfg.kl_coefficient * p[k] * (s.log_probs[k] - rs.log_probs[k].max(floor) - kl);
                    }
                }
                accumulate(&mut grad, &s.phi, &d, scale);
            }
        }
    }
    Ok(ObjectiveValue {
        objective: surrogate - cfg.kl_coefficient * kl_total,
        surrogate,
        kl: kl_total,
        grad,
        clip_fraction: if tokens == 0 { 0.0 } else { clipped as f64 / tokens as f64 },
    })
}

/// KL between `params` and `reference` at the states visited by the
/// rollouts, aggregated like the objective.
pub fn kl_divergence(
    params: &PolicyParams,
    reference: &PolicyParams,
    rollouts: &[GroupRollout],
    mode: Normalization,
    max_len: usize,
) -> Result<f64> {
    let b = rollouts.len().max(1) as f64;
    let mut total = 0.0;
    for rollout in rollouts {
        let g = rollout.completions.len().max(1) as f64;
        for c in &rollout.completions {
            let scale = sequence_weight(c.len(), mode, max_len) / (g * b);
            let states = eval_states(params, &rollout.observation, &c.tokens)?;
            let ref_states = eval_states(reference, &rollout.observation, &c.tokens)?;
            total += scale
                * states
                    .iter()
                    .zip(&ref_states)
                    .map(|(s, r)| categorical_kl(&s.log_probs, &r.log_probs))
                    .sum::<f64>();
        }
    }
    Ok(total)
}

/// Hard reward plus `bonus` per duplicated label in the solution.
pub fn repetition_reward(parsed: &ParsedOutput, gold: LabelSet, cfg: &HardRewardConfig, bonus: f64) -> RewardBreakdown {
    let mut r = hard_reward(parsed, gold, cfg);
    if parsed.valid {
        r.components.partial += bonus * parsed.duplicate_count as f64;
        r.total = r.components.sum();
    }
    r
}

/// Everything a reward needs besides the completion itself.
#[derive(Clone, Debug)]
pub struct RewardContext {
    pub kind: RewardKind,
    pub hard: HardRewardConfig,
    pub nuanced: NuancedRewardConfig,
    pub stats: LabelStats,
    pub monitor: CollapseMonitor,
    pub repetition_bonus: f64,
}

impl RewardContext {
    pub fn new(kind: RewardKind, hard: HardRewardConfig, nuanced: NuancedRewardConfig, stats: LabelStats) -> Self {
        let monitor = CollapseMonitor::new(nuanced.window_size);
        RewardContext { kind, hard, nuanced, stats, monitor, repetition_bonus: 0.25 }
    }

    /// Scores one completion. Nuanced scoring appends to the collapse
    /// monitor, so calls must follow generation order.
    pub fn score(&mut self, parsed: &ParsedOutput, gold: LabelSet) -> RewardBreakdown {
        match self.kind {
            RewardKind::Hard => hard_reward(parsed, gold, &self.hard),
            RewardKind::Nuanced => nuanced_reward(parsed, gold, &self.stats, &mut self.monitor, &self.nuanced),
            RewardKind::Repetition => repetition_reward(parsed, gold, &self.hard, self.repetition_bonus),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub reward_mean: f64,
    pub components: RewardComponents,
    pub completion_length_mean: f64,
    pub entropy: f64,
    pub kl: f64,
    pub jaccard_mean: f64,
    pub fail_rate: f64,
    pub clip_fraction: f64,
}

impl StepMetrics {
    pub const CSV_COLUMNS: [&'static str; 14] = [
        "step",
        "total_reward_mean",
        "reward_match",
        "reward_partial",
        "reward_fp",
        "reward_collapse",
        "reward_format",
        "reward_length",
        "completion_length_mean",
        "entropy",
        "kl",
        "jaccard_mean",
        "fail_rate",
        "clip_fraction",
    ];

    /// Numeric columns in `CSV_COLUMNS` order.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.step as f64, self.reward_mean];
        v.extend(self.components.values());
        v.extend([
            self.completion_length_mean,
            self.entropy,
            self.kl,
            self.jaccard_mean,
            self.fail_rate,
            self.clip_fraction,
        ]);
        v
    }
}

/// Draws a group for every observation and scores it in generation order.
pub fn collect_rollouts(
    params: &PolicyParams,
    batch: &[&Example],
    cfg: &GrpoConfig,
    rewards: &mut RewardContext,
    rng: &mut ChaCha8Rng,
) -> Vec<GroupRollout> {
    let gen = cfg.gen();
    batch
        .iter()
        .map(|ex| {
            let completions: Vec<Completion> =
                (0..cfg.group_size).map(|_| sample_sequence(params, &ex.observation, &gen, rng)).collect();
            let parsed: Vec<ParsedOutput> = completions
                .iter()
                .map(|c| parse_completion(&c.text, Dialect::ThinkSolution).with_token_length(c.len()))
                .collect();
            let scored: Vec<RewardBreakdown> = parsed.iter().map(|p| rewards.score(p, ex.labels)).collect();
            let totals: Vec<f64> = scored.iter().map(|r| r.total).collect();
            GroupRollout {
                observation: ex.observation.clone(),
                gold: ex.labels,
                completions,
                parsed,
                advantages: compute_advantages(&totals, cfg.normalization, cfg.advantage_std_floor),
                rewards: scored,
            }
        })
        .collect()
}

/// Mean full-softmax entropy over all states visited by the rollouts.
pub fn rollout_entropy(params: &PolicyParams, rollouts: &[GroupRollout]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in rollouts {
        for c in &r.completions {
            for s in eval_states(params, &r.observation, &c.tokens)? {
                sum += entropy_of(&s.log_probs);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Serialisable trainer state besides the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub monitor: CollapseMonitor,
}

/// Stateful GRPO loop. Each step is a pure function of (parameters, step
/// index, monitor), so a run resumed from a saved state reproduces the
/// uninterrupted run.
pub struct GrpoTrainer<'a> {
    pub cfg: GrpoConfig,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    data: &'a [Example],
    rewards: RewardContext,
    step: usize,
    perm_epoch: Option<usize>,
    perm: Vec<usize>,
}

impl<'a> GrpoTrainer<'a> {
    pub fn new(
        cfg: GrpoConfig,
        sft_params: PolicyParams,
        data: &'a [Example],
        mut rewards: RewardContext,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("RL dataset"));
        }
        rewards.kind = cfg.reward;
        rewards.repetition_bonus = cfg.repetition_bonus;
        Ok(GrpoTrainer {
            reference: sft_params.clone(),
            params: sft_params,
            cfg,
            data,
            rewards,
            step: 0,
            perm_epoch: None,
            perm: Vec::new(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> TrainerState {
        TrainerState { step: self.step, monitor: self.rewards.monitor.clone() }
    }

    pub fn restore(&mut self, params: PolicyParams, state: TrainerState) {
        self.params = params;
        self.step = state.step;
        self.rewards.monitor = state.monitor;
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.data.len();
        (0..self.cfg.batch_size)
            .map(|k| {
                let global = self.step * self.cfg.batch_size + k;
                let epoch = global / n;
                if self.perm_epoch != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0000_0000);
                    rng.set_stream(epoch as u64);
                    self.perm = (0..n).collect();
                    self.perm.shuffle(&mut rng);
                    self.perm_epoch = Some(epoch);
                }
                self.perm[global % n]
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let indices = self.batch_indices();
        let batch: Vec<&Example> = indices.iter().map(|&i| &self.data[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step as u64 + 1);
        let rollouts = collect_rollouts(&self.params, &batch, &self.cfg, &mut self.rewards, &mut rng);

        let entropy = rollout_entropy(&self.params, &rollouts)?;
        let mut clip_fraction = 0.0;
        let mut kl = 0.0;
        for _ in 0..self.cfg.inner_updates {
            let obj = grpo_objective(&self.params, &self.reference, &rollouts, &self.cfg)?;
            self.params.add_scaled(&obj.grad, self.cfg.learning_rate);
            clip_fraction = obj.clip_fraction;
            kl = obj.kl;
        }

        let n = (rollouts.len() * self.cfg.group_size) as f64;
        let mut comp = RewardComponents::default();
        let (mut total, mut len, mut jac, mut fails) = (0.0, 0.0, 0.0, 0.0);
        for r in &rollouts {
            for ((c, p), rw) in r.completions.iter().zip(&r.parsed).zip(&r.rewards) {
                total += rw.total;
                comp.exact += rw.components.exact;
                comp.partial += rw.components.partial;
                comp.fp += rw.components.fp;
                comp.collapse += rw.components.collapse;
                comp.format += rw.components.format;
                comp.length += rw.components.length;
                len += c.len() as f64;
                jac += if p.valid { jaccard(r.gold, p.predicted) } else { 0.0 };
                fails += if p.valid { 0.0 } else { 1.0 };
            }
        }
        let metrics = StepMetrics {
            step: self.step,
            reward_mean: total / n,
            components: RewardComponents {
                exact: comp.exact / n,
                partial: comp.partial / n,
                fp: comp.fp / n,
                collapse: comp.collapse / n,
                format: comp.format / n,
                length: comp.length / n,
            },
            completion_length_mean: len / n,
            entropy,
            kl,
            jaccard_mean: jac / n,
            fail_rate: fails / n,
            clip_fraction,
        };
        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Clone, Debug)]
pub struct GrpoOutcome {
    pub params: PolicyParams,
    pub log: Vec<StepMetrics>,
}

/// Runs `cfg.steps` GRPO steps from the SFT checkpoint, which also serves as
/// the frozen reference policy.
pub fn train_grpo(
    sft_params: PolicyParams,
    rl_data: &[Example],
    cfg: &GrpoConfig,
    rewards: RewardContext,
) -> Result<GrpoOutcome> {
    let mut trainer = GrpoTrainer::new(cfg.clone(), sft_params, rl_data, rewards)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        log.push(trainer.step()?);
    }
    Ok(GrpoOutcome { params: trainer.params, log })
}

#[derive(Clone, Debug)]
pub struct PolicyEval {
    pub mean_jaccard: f64,
    pub mean_length: f64,
    pub report: EvalReport,
}

/// One completion per example, drawn in order from a single seeded stream.
pub fn generate(params: &PolicyParams, examples: &[Example], gen: &GenConfig, seed: u64) -> Vec<Completion> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.iter().map(|ex| sample_sequence(params, &ex.observation, gen, &mut rng)).collect()
}

/// One completion per example, scored by Jaccard and the multilabel report.
pub fn evaluate_policy(params: &PolicyParams, examples: &[Example], gen: &GenConfig, seed: u64) -> PolicyEval {
    let mut counts = ConfusionCounts::new(&LabelFilter::Full14.labels());
    let mut jac = 0.0;
    let mut len = 0.0;
    for (ex, c) in examples.iter().zip(generate(params, examples, gen, seed)) {
        let p = parse_completion(&c.text, Dialect::ThinkSolution).with_token_length(c.len());
        jac += if p.valid { jaccard(ex.labels, p.predicted) } else { 0.0 };
        len += c.len() as f64;
        counts.add(&p, ex.labels);
    }
    let n = examples.len().max(1) as f64;
    PolicyEval { mean_jaccard: jac / n, mean_length: len / n, report: EvalReport::from_counts(&counts) }
}
