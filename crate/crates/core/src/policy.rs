//! A small autoregressive categorical policy over a 25-token alphabet.
//!
//! Logits are linear in a sparse feature vector built from the observation
//! and the emitted prefix:
//!
//! ```text
//! phi = [ features (d) | one-hot feature bins (d * B) | tokens seen (V)
//!       | tokens seen since the last structural token (V)
//!       | one-hot previous token (V) | one-hot block position (P) | 1 ]
//! logits = W^T phi            W has shape (d (1 + B) + 3V + P + 1) x V
//! ```
//!
//! The bins are a fixed tile coding of each feature so that threshold rules
//! are representable with moderate weights.
//!
//! Everything downstream (log-probabilities, entropies, KL terms, gradients)
//! is computed exactly; the gradient of `log pi(t)` with respect to `W` is
//! `phi ⊗ (onehot(t) - p)`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyenv::Observation;
use crate::vocab::{Label, NUM_LABELS};

pub type Token = u16;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
pub const THINK_OPEN: Token = 2;
pub const THINK_CLOSE: Token = 3;
pub const SOL_OPEN: Token = 4;
pub const SOL_CLOSE: Token = 5;
pub const COMMA: Token = 6;
pub const LABEL_BASE: Token = 7;
pub const FILLER_BASE: Token = LABEL_BASE + NUM_LABELS as Token;
pub const NUM_FILLERS: usize = 4;
pub const VOCAB_SIZE: usize = FILLER_BASE as usize + NUM_FILLERS;

const FILLER_WORDS: [&str; NUM_FILLERS] = ["lungs", "heart", "mediastinum", "bones"];

pub fn label_token(label: Label) -> Token {
    LABEL_BASE + label.id() as Token
}

pub fn token_label(t: Token) -> Option<Label> {
    t.checked_sub(LABEL_BASE).and_then(|i| Label::from_id(i as usize))
}

pub fn filler_token(i: usize) -> Token {
    FILLER_BASE + (i % NUM_FILLERS) as Token
}

/// Tokens that open or close a block. The local context is reset after each.
pub fn is_structural(t: Token) -> bool {
    matches!(t, BOS | THINK_OPEN | THINK_CLOSE | SOL_OPEN | SOL_CLOSE)
}

pub fn token_text(t: Token) -> &'static str {
    match t {
        BOS => "<bos>",
        EOS => "",
        THINK_OPEN => "<think>",
        THINK_CLOSE => "</think>",
        SOL_OPEN => "<solution>",
        SOL_CLOSE => "</solution>",
        COMMA => ",",
        _ => match token_label(t) {
            Some(l) => l.name(),
            None => FILLER_WORDS[(t - FILLER_BASE) as usize],
        },
    }
}

/// Space-joined text of a token sequence; EOS renders as nothing.
pub fn render(tokens: &[Token]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != EOS)
        .map(|&t| token_text(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    d: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn phi_dim(d: usize) -> usize {
        d * (1 + FEATURE_BINS) + 3 * VOCAB_SIZE + POSITION_BUCKETS + 1
    }

    pub fn num_params(d: usize) -> usize {
        Self::phi_dim(d) * VOCAB_SIZE
    }

    pub fn zeros(d: usize) -> Self {
        PolicyParams { d, weights: vec![0.0; Self::num_params(d)] }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random(d: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..Self::num_params(d)).map(|_| rng.gen_range(-scale..=scale)).collect();
        PolicyParams { d, weights }
    }

    pub fn from_flat(d: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != Self::num_params(d) {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters for d={d}, got {}",
                Self::num_params(d),
                weights.len()
            )));
        }
        Ok(PolicyParams { d, weights })
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Flat index of `W[row, token]`.
    pub fn index(&self, row: usize, token: Token) -> usize {
        row * VOCAB_SIZE + token as usize
    }

    /// Row of `W` fed by the given block of the feature vector.
    pub fn row(&self, block: PhiBlock, i: usize) -> usize {
        let v = VOCAB_SIZE;
        let base = self.d * (1 + FEATURE_BINS);
        match block {
            PhiBlock::Feature => i,
            PhiBlock::FeatureBin => self.d + i,
            PhiBlock::Global => base + i,
            PhiBlock::Local => base + v + i,
            PhiBlock::Previous => base + 2 * v + i,
            PhiBlock::Position => base + 3 * v + i,
            PhiBlock::Bias => base + 3 * v + POSITION_BUCKETS,
        }
    }

    /// `self += scale * direction`.
    pub fn add_scaled(&mut self, direction: &[f64], scale: f64) {
        for (w, g) in self.weights.iter_mut().zip(direction) {
            *w += scale * g;
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, seed: u64) -> Result<()> {
        writeln!(w, "rlvr-policy {CHECKPOINT_VERSION}")?;
        writeln!(w, "d {}", self.d)?;
        writeln!(w, "vocab {VOCAB_SIZE}")?;
        writeln!(w, "seed {seed}")?;
        writeln!(w, "params {}", self.weights.len())?;
        for x in &self.weights {
            writeln!(w, "{x:?}")?;
        }
        Ok(())
    }

    /// Returns the parameters and the seed recorded in the header.
    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(Self, u64)> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        let mut lines = r.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))??;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| Error::Checkpoint(format!("expected `{key}` header, got {line:?}")))
        };
        let version: u32 = header("rlvr-policy")?.parse().map_err(|_| bad("bad version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let d: usize = header("d")?.parse().map_err(|_| bad("bad d"))?;
        let vocab: usize = header("vocab")?.parse().map_err(|_| bad("bad vocab"))?;
        if vocab != VOCAB_SIZE {
            return Err(Error::Checkpoint(format!("vocab {vocab} != {VOCAB_SIZE}")));
        }
        let seed: u64 = header("seed")?.parse().map_err(|_| bad("bad seed"))?;
        let n: usize = header("params")?.parse().map_err(|_| bad("bad count"))?;
        let mut weights = Vec::with_capacity(n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            weights.push(line.trim().parse::<f64>().map_err(|_| bad("bad parameter value"))?);
        }
        if weights.len() != n {
            return Err(Error::Checkpoint(format!("expected {n} parameters, found {}", weights.len())));
        }
        Ok((PolicyParams::from_flat(d, weights)?, seed))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiBlock {
    Feature,
    /// One-hot bin of each feature: index `feature * FEATURE_BINS + bin`.
    FeatureBin,
    Global,
    Local,
    Previous,
    /// One-hot of the number of tokens since the last structural token.
    Position,
    Bias,
}

/// Equal-width bins per feature on `[0, 1]`.
pub const FEATURE_BINS: usize = 10;

/// Bin of a feature value; values outside `[0, 1)` land in the end bins.
pub fn feature_bin(x: f64) -> usize {
    ((x * FEATURE_BINS as f64).floor().max(0.0) as usize).min(FEATURE_BINS - 1)
}

/// Block positions at or beyond the last bucket share it.
pub const POSITION_BUCKETS: usize = 24;

/// Running context of an emitted prefix. The implicit BOS is pushed on
/// construction.
#[derive(Clone, Debug)]
pub struct Context {
    global: [u32; VOCAB_SIZE],
    local: [u32; VOCAB_SIZE],
    pos: usize,
    prev: Token,
}

impl Default for Context {
    fn default() -> Self {
        let mut ctx = Context { global: [0; VOCAB_SIZE], local: [0; VOCAB_SIZE], pos: 0, prev: BOS };
        ctx.global[BOS as usize] = 1;
        ctx
    }
}

impl Context {
    pub fn push(&mut self, t: Token) {
        self.global[t as usize] += 1;
        if is_structural(t) {
            self.local = [0; VOCAB_SIZE];
            self.pos = 0;
        } else {
            self.local[t as usize] += 1;
            self.pos += 1;
        }
        self.prev = t;
    }

    /// Non-zero entries of `phi` as `(row, value)`.
    pub fn phi(&self, params: &PolicyParams, obs: &Observation) -> Vec<(usize, f64)> {
        let mut phi = Vec::with_capacity(2 * params.d + 16);
        let features = &obs.features[..params.d.min(obs.features.len())];
        phi.extend(features.iter().copied().enumerate().filter(|(_, x)| *x != 0.0));
        for (i, &x) in features.iter().enumerate() {
            phi.push((params.row(PhiBlock::FeatureBin, i * FEATURE_BINS + feature_bin(x)), 1.0));
        }
        for (t, &c) in self.global.iter().enumerate() {
            if c > 0 {
                phi.push((params.row(PhiBlock::Global, t), 1.0));
            }
        }
        for (t, &c) in self.local.iter().enumerate() {
            if c > 0 {
                phi.push((params.row(PhiBlock::Local, t), 1.0));
            }
        }
        phi.push((params.row(PhiBlock::Previous, self.prev as usize), 1.0));
        phi.push((params.row(PhiBlock::Position, self.pos.min(POSITION_BUCKETS - 1)), 1.0));
        phi.push((params.row(PhiBlock::Bias, 0), 1.0));
        phi
    }
}

fn logits_from_phi(params: &PolicyParams, phi: &[(usize, f64)]) -> [f64; VOCAB_SIZE] {
    let mut z = [0.0; VOCAB_SIZE];
    for &(row, val) in phi {
        let w = &params.weights[row * VOCAB_SIZE..(row + 1) * VOCAB_SIZE];
        for (zi, wi) in z.iter_mut().zip(w) {
            *zi += val * wi;
        }
    }
    z
}

pub fn log_softmax(z: &[f64; VOCAB_SIZE]) -> [f64; VOCAB_SIZE] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|zi| (zi - m).exp()).sum::<f64>().ln();
    z.map(|zi| zi - lse)
}

pub fn entropy_of(log_p: &[f64; VOCAB_SIZE]) -> f64 {
    -log_p.iter().map(|&lp| if lp.is_finite() { lp.exp() * lp } else { 0.0 }).sum::<f64>()
}

/// Per-position data of a scored sequence.
pub struct StateEval {
    pub phi: Vec<(usize, f64)>,
    /// Full (temperature 1, untruncated) log-probabilities.
    pub log_probs: [f64; VOCAB_SIZE],
}

/// Evaluates the policy at every prefix of `tokens` (BOS is implicit).
pub fn eval_states(params: &PolicyParams, obs: &Observation, tokens: &[Token]) -> Result<Vec<StateEval>> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
        return Err(Error::TokenOutOfRange(bad as usize));
    }
    let mut ctx = Context::default();
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let phi = ctx.phi(params, obs);
        let log_probs = log_softmax(&logits_from_phi(params, &phi));
        out.push(StateEval { phi, log_probs });
        ctx.push(t);
    }
    Ok(out)
}

/// Accumulates `scale * phi ⊗ dlogits` into a flat gradient buffer.
pub fn accumulate(grad: &mut [f64], phi: &[(usize, f64)], dlogits: &[f64; VOCAB_SIZE], scale: f64) {
    for &(row, val) in phi {
        let g = &mut grad[row * VOCAB_SIZE..(row + 1) * VOCAB_SIZE];
        for (gi, di) in g.iter_mut().zip(dlogits) {
            *gi += scale * val * di;
        }
    }
}

/// Sampling distribution: softmax of `logits / temperature`, restricted to
/// the smallest set of most likely tokens whose mass reaches `top_p`, then
/// renormalised. A temperature of zero gives a one-hot argmax.
pub fn nucleus(z: &[f64; VOCAB_SIZE], temperature: f64, top_p: f64) -> [f64; VOCAB_SIZE] {
    if temperature <= 0.0 {
        let best = argmax(z);
        let mut p = [0.0; VOCAB_SIZE];
        p[best] = 1.0;
        return p;
    }
    let scaled = z.map(|zi| zi / temperature);
    let mut p = log_softmax(&scaled).map(f64::exp);
    if top_p >= 1.0 {
        return p;
    }
    let mut order: Vec<usize> = (0..VOCAB_SIZE).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut mass = 0.0;
    let mut keep = VOCAB_SIZE;
    for (k, &i) in order.iter().enumerate() {
        mass += p[i];
        if mass >= top_p {
            keep = k + 1;
            break;
        }
    }
    for &i in &order[keep..] {
        p[i] = 0.0;
    }
    let total: f64 = p.iter().sum();
    p.map(|pi| pi / total)
}

fn argmax(z: &[f64; VOCAB_SIZE]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn token_distribution(
    params: &PolicyParams,
    obs: &Observation,
    prefix: &[Token],
    temperature: f64,
    top_p: f64,
) -> Result<[f64; VOCAB_SIZE]> {
    if let Some(&bad) = prefix.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
        return Err(Error::TokenOutOfRange(bad as usize));
    }
    let mut ctx = Context::default();
    for &t in prefix {
        ctx.push(t);
    }
    let z = logits_from_phi(params, &ctx.phi(params, obs));
    Ok(nucleus(&z, temperature, top_p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Zero selects argmax decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { temperature: 0.8, top_p: 0.95, max_len: 64 }
    }
}

impl GenConfig {
    pub fn greedy(max_len: usize) -> Self {
        GenConfig { temperature: 0.0, top_p: 1.0, max_len }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<Token>,
    /// Log-probability of each token under the full policy softmax.
    pub logprobs: Vec<f64>,
    pub text: String,
}

impl Completion {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Samples until EOS or `max_len` tokens.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &PolicyParams,
    obs: &Observation,
    gen: &GenConfig,
    rng: &mut R,
) -> Completion {
    let mut ctx = Context::default();
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    while tokens.len() < gen.max_len.max(1) {
        let z = logits_from_phi(params, &ctx.phi(params, obs));
        let p = nucleus(&z, gen.temperature, gen.top_p);
        let t = if gen.temperature <= 0.0 {
            argmax(&p)
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if pi > 0.0 && u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave u just above the final cumulative sum.
            pick.unwrap_or_else(|| p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0))
        } as Token;
        logprobs.push(log_softmax(&z)[t as usize]);
        tokens.push(t);
        ctx.push(t);
        if t == EOS {
            break;
        }
    }
    let text = render(&tokens);
    Completion { tokens, logprobs, text }
}

/// Exact full-softmax log-probability of each token given its prefix.
pub fn logprob(params: &PolicyParams, obs: &Observation, tokens: &[Token]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    Ok(eval_states(params, obs, tokens)?
        .iter()
        .zip(tokens)
        .map(|(s, &t)| s.log_probs[t as usize])
        .collect())
}

/// Gradient of `sum_j mask_j * log pi(t_j | prefix)` over the flat
/// parameters. `mask = None` selects every position.
pub fn grad_logprob_masked(
    params: &PolicyParams,
    obs: &Observation,
    tokens: &[Token],
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    for (j, (s, &t)) in eval_states(params, obs, tokens)?.iter().zip(tokens).enumerate() {
        if mask.is_some_and(|m| !m[j]) {
            continue;
        }
        let mut d = s.log_probs.map(|lp| -lp.exp());
        d[t as usize] += 1.0;
        accumulate(&mut grad, &s.phi, &d, 1.0);
    }
    Ok(grad)
}

pub fn grad_logprob(params: &PolicyParams, obs: &Observation, tokens: &[Token]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    grad_logprob_masked(params, obs, tokens, None)
}

/// Mean full-softmax entropy over the states visited by `tokens`.
pub fn mean_entropy(params: &PolicyParams, obs: &Observation, tokens: &[Token]) -> Result<f64> {
    let states = eval_states(params, obs, tokens)?;
    if states.is_empty() {
        return Ok(0.0);
    }
    Ok(states.iter().map(|s| entropy_of(&s.log_probs)).sum::<f64>() / states.len() as f64)
}
