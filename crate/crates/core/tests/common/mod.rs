//! Oracles shared by the integration tests. Nothing here calls into the
//! library's feature map or softmax; they are rebuilt from the documented
//! layout.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlvr_core::grpo::{compute_advantages, GroupRollout, Normalization};
use rlvr_core::parser::{parse_completion, Dialect};
use rlvr_core::policy::{sample_sequence, GenConfig, PolicyParams, Token, EOS, VOCAB_SIZE};
use rlvr_core::rewards::RewardBreakdown;
use rlvr_core::toyenv::Observation;

pub const BINS: usize = 10;
pub const POSITIONS: usize = 24;
/// BOS and the four block delimiters reset the per-block context.
pub const STRUCTURAL: [Token; 5] = [0, 2, 3, 4, 5];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_obs(d: usize, rng: &mut impl Rng) -> Observation {
    Observation { features: (0..d).map(|_| rng.gen()).collect() }
}

/// Dense feature vector for the state after `prefix`.
pub fn naive_phi(d: usize, obs: &Observation, prefix: &[Token]) -> Vec<f64> {
    let v = VOCAB_SIZE;
    let dim = d * (1 + BINS) + 3 * v + POSITIONS + 1;
    let mut phi = vec![0.0; dim];
    for i in 0..d {
        let x = obs.features[i];
        phi[i] = x;
        let bin = ((x * BINS as f64).floor() as i64).clamp(0, BINS as i64 - 1) as usize;
        phi[d + i * BINS + bin] = 1.0;
    }
    let base = d * (1 + BINS);
    phi[base] = 1.0; // BOS is always seen
    let mut last_reset = 0;
    for (j, &t) in prefix.iter().enumerate() {
        phi[base + t as usize] = 1.0;
        if STRUCTURAL.contains(&t) {
            last_reset = j + 1;
        }
    }
    for &t in &prefix[last_reset..] {
        phi[base + v + t as usize] = 1.0;
    }
    let prev = prefix.last().copied().unwrap_or(0);
    phi[base + 2 * v + prev as usize] = 1.0;
    let pos = (prefix.len() - last_reset).min(POSITIONS - 1);
    phi[base + 3 * v + pos] = 1.0;
    phi[dim - 1] = 1.0;
    phi
}

/// `log p(token | prefix)` for every position, by dense matrix product and a
/// plain two-pass softmax.
pub fn naive_logprobs(params: &PolicyParams, obs: &Observation, tokens: &[Token]) -> Vec<Vec<f64>> {
    let d = params.feature_dim();
    let w = params.as_slice();
    (0..tokens.len())
        .map(|j| {
            let phi = naive_phi(d, obs, &tokens[..j]);
            let z: Vec<f64> =
                (0..VOCAB_SIZE).map(|k| phi.iter().enumerate().map(|(r, x)| x * w[r * VOCAB_SIZE + k]).sum()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|zi| (zi - m).exp()).sum();
            z.iter().map(|zi| ((zi - m).exp() / s).ln()).collect()
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Central differences of `f` along the given coordinates.
pub fn fd_coords(params: &PolicyParams, coords: &[usize], h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut p = params.clone();
            p.as_mut_slice()[i] += h;
            let up = f(&p);
            p.as_mut_slice()[i] -= 2.0 * h;
            let down = f(&p);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Coordinates to probe: mostly ones with a non-negligible analytic
/// gradient, plus a few arbitrary ones.
pub fn probe_coords(grad: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-8).collect();
    let mut out: Vec<usize> = (0..n).map(|_| live[rng.gen_range(0..live.len())]).collect();
    out.extend((0..n / 4).map(|_| rng.gen_range(0..grad.len())));
    out
}

/// Groups sampled from `old` at temperature 1, with random rewards turned
/// into advantages.
pub fn random_rollouts(
    old: &PolicyParams,
    groups: usize,
    group_size: usize,
    max_len: usize,
    mode: Normalization,
    rng: &mut ChaCha8Rng,
) -> Vec<GroupRollout> {
    let gen = GenConfig { temperature: 1.0, top_p: 1.0, max_len };
    (0..groups)
        .map(|_| {
            let observation = random_obs(old.feature_dim(), rng);
            let completions: Vec<_> =
                (0..group_size).map(|_| sample_sequence(old, &observation, &gen, rng)).collect();
            let rewards: Vec<f64> = (0..group_size).map(|_| rng.gen_range(-1.0..1.0)).collect();
            GroupRollout {
                gold: Default::default(),
                parsed: completions.iter().map(|c| parse_completion(&c.text, Dialect::ThinkSolution)).collect(),
                rewards: rewards.iter().map(|&r| RewardBreakdown { total: r, ..Default::default() }).collect(),
                advantages: compute_advantages(&rewards, mode, 1e-6),
                completions,
                observation,
            }
        })
        .collect()
}

/// Random parameters with a strong EOS bias so sampled sequences stay short.
pub fn short_policy(d: usize, scale: f64, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::random(d, scale, seed);
    let bias_row = PolicyParams::phi_dim(d) - 1;
    let i = p.index(bias_row, EOS);
    p.as_mut_slice()[i] += 1.5;
    p
}
