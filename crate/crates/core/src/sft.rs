//! Supervised fine-tuning on teacher traces: masked negative log-likelihood,
//! AdamW with warmup + cosine decay, and patience-based early stopping on a
//! held-out split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{accumulate, eval_states, PolicyParams, Token, EOS};
use crate::toyenv::{teacher_tokens, Example, Observation};

/// One teacher sequence. The prompt (the implicit BOS) is never scored;
/// `mask[j]` selects which response positions enter the loss, so padding
/// can be appended with `false`.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub observation: Observation,
    pub tokens: Vec<Token>,
    pub mask: Vec<bool>,
}

impl SftExample {
    pub fn new(observation: Observation, tokens: Vec<Token>) -> Self {
        let mask = vec![true; tokens.len()];
        SftExample { observation, tokens, mask }
    }

    /// Pads with masked EOS tokens up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.tokens.len() < len {
            self.tokens.push(EOS);
            self.mask.push(false);
        }
        self
    }
}

/// Teacher traces with random filler words for every example.
pub fn oracle_dataset(examples: &[Example], seed: u64) -> Vec<SftExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|e| SftExample::new(e.observation.clone(), teacher_tokens(e, &mut rng)))
        .collect()
}

/// Mean masked NLL over the batch and its gradient with respect to the flat
/// parameters.
pub fn sft_loss(params: &PolicyParams, batch: &[SftExample]) -> Result<(f64, Vec<f64>)> {
    let total: usize = batch.iter().map(|e| e.mask.iter().filter(|&&m| m).count()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("SFT batch has no unmasked positions".into()));
    }
    let scale = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for ex in batch {
        if ex.mask.len() != ex.tokens.len() {
            return Err(Error::LengthMismatch { left: ex.mask.len(), right: ex.tokens.len() });
        }
        for ((s, &t), &m) in eval_states(params, &ex.observation, &ex.tokens)?.iter().zip(&ex.tokens).zip(&ex.mask) {
            if !m {
                continue;
            }
            loss -= s.log_probs[t as usize];
            // d(-log p_t)/dz = p - onehot(t)
            let mut d = s.log_probs.map(f64::exp);
            d[t as usize] -= 1.0;
            accumulate(&mut grad, &s.phi, &d, scale);
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            max_epochs: 6,
            patience: 2,
            learning_rate: 0.05,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            grad_clip: 5.0,
            batch_size: 8,
            validation_fraction: 0.1,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, Default)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, ..Default::default() }
    }

    /// Records a validation loss; returns true once `patience` consecutive
    /// epochs have failed to improve on the best loss.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, best)) if loss >= best => self.bad_epochs += 1,
            _ => {
                self.best = Some((epoch, loss));
                self.bad_epochs = 0;
            }
        }
        self.bad_epochs >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn is_best(&self, epoch: usize) -> bool {
        self.best_epoch() == Some(epoch)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftEpoch {
    /// Zero is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: PolicyParams,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub log: Vec<SftEpoch>,
}

fn mean_loss(params: &PolicyParams, data: &[SftExample]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0usize;
    for chunk in data.chunks(64) {
        let n: usize = chunk.iter().map(|e| e.mask.iter().filter(|&&m| m).count()).sum();
        if n == 0 {
            continue;
        }
        num += sft_loss(params, chunk)?.0 * n as f64;
        den += n;
    }
    Ok(if den == 0 { 0.0 } else { num / den as f64 })
}

/// Trains from `init`. A seeded shuffle reserves `validation_fraction` of
/// the traces (at least one) for early stopping.
pub fn train_sft(cfg: &SftConfig, traces: &[SftExample], init: PolicyParams) -> Result<SftOutcome> {
    if traces.is_empty() {
        return Err(Error::Empty("SFT trace set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("sft.batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((traces.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, traces.len());
    let val: Vec<SftExample> = order[..n_val].iter().map(|&i| traces[i].clone()).collect();
    let mut train: Vec<SftExample> = order[n_val..].iter().map(|&i| traces[i].clone()).collect();
    if train.is_empty() {
        train = val.clone();
    }

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let warmup = ((total_steps as f64 * cfg.warmup_fraction).ceil() as usize).max(1);

    let mut params = init;
    let mut best = params.clone();
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut log = vec![SftEpoch {
        epoch: 0,
        train_loss: mean_loss(&params, &train)?,
        val_loss: mean_loss(&params, &val)?,
        learning_rate: 0.0,
    }];

    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        train.shuffle(&mut rng);
        let mut lr = 0.0;
        let mut loss_sum = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let (loss, mut grad) = sft_loss(&params, batch)?;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            lr = cosine_lr(cfg.learning_rate, step, total_steps, warmup);
            opt.step(params.as_mut_slice(), &grad, lr);
            loss_sum += loss;
            step += 1;
        }
        epochs_run = epoch;
        let val_loss = mean_loss(&params, &val)?;
        log.push(SftEpoch {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_loss,
            learning_rate: lr,
        });
        let stop = stopper.observe(epoch, val_loss);
        if stopper.is_best(epoch) {
            best = params.clone();
        }
        if stop {
            break;
        }
    }

    Ok(SftOutcome { params: best, best_epoch: stopper.best_epoch().unwrap_or(0), epochs_run, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PhiBlock, VOCAB_SIZE};
    use crate::toyenv::gen_task;

    #[test]
    fn uniform_policy_loss_is_ln_vocab() {
        let task = gen_task(3, 16, 0).unwrap();
        let data = oracle_dataset(&task.examples, 0);
        let (loss, _) = sft_loss(&PolicyParams::zeros(16), &data).unwrap();
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        assert!((loss - 3.2189).abs() < 1e-4);
    }

    #[test]
    fn certain_policy_has_zero_loss() {
        // A single-token trace the bias makes certain.
        let mut p = PolicyParams::zeros(16);
        let i = p.index(p.row(PhiBlock::Bias, 0), EOS);
        p.as_mut_slice()[i] = 800.0;
        let ex = SftExample::new(Observation { features: vec![0.5; 16] }, vec![EOS, EOS]);
        let (loss, grad) = sft_loss(&p, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn padding_is_masked_out() {
        let task = gen_task(2, 16, 5).unwrap();
        let data = oracle_dataset(&task.examples, 1);
        let p = PolicyParams::random(16, 0.3, 9);
        let padded: Vec<_> = data.iter().cloned().map(|e| e.padded(45)).collect();
        let (a, ga) = sft_loss(&p, &data).unwrap();
        let (b, gb) = sft_loss(&p, &padded).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let ex = SftExample { observation: Observation { features: vec![0.0; 16] }, tokens: vec![EOS], mask: vec![false] };
        assert!(sft_loss(&PolicyParams::zeros(16), &[ex]).is_err());
        assert!(train_sft(&SftConfig::default(), &[], PolicyParams::zeros(16)).is_err());
    }

    #[test]
    fn patience_two() {
        let mut s = EarlyStopping::new(2);
        let losses = [1.0, 0.9, 0.91, 0.92];
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            if s.observe(i + 1, l) {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(4));
        assert_eq!(s.best_epoch(), Some(2));
    }

    #[test]
    fn schedule_shape() {
        let lrs: Vec<f64> = (0..100).map(|s| cosine_lr(1.0, s, 100, 5)).collect();
        assert!((lrs[4] - 1.0).abs() < 1e-12);
        assert!(lrs[0] < lrs[4]);
        assert!(lrs[5..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[99] < 0.01);
    }

    #[test]
    fn short_training_is_deterministic_and_improves() {
        let task = gen_task(120, 16, 3).unwrap();
        let data = oracle_dataset(&task.examples, 3);
        let cfg = SftConfig { max_epochs: 3, ..Default::default() };
        let a = train_sft(&cfg, &data, PolicyParams::random(16, 0.01, 1)).unwrap();
        let b = train_sft(&cfg, &data, PolicyParams::random(16, 0.01, 1)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert!(a.log.last().unwrap().val_loss < a.log[0].val_loss);
    }
}
