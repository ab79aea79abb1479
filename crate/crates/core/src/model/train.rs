use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{Batch, Bound, Transformer};
use super::{ModelParams, OptimizerKind, TrainConfig, TransformerConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::pruning::{Pruner, PruningSchedule, SparsityMasks};

/// Inverse-square-root schedule with linear warmup:
/// `base_lr · hidden^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, base_lr: f64, hidden: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * (hidden as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Entropy of the label-smoothed target distribution over `vocab` tokens,
/// a lower bound on the smoothed cross entropy.
pub fn smoothed_entropy_floor(vocab: usize, epsilon: f64) -> f64 {
    let v = vocab as f64;
    let off = epsilon / v;
    let gold = 1.0 - epsilon + off;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(gold) + (v - 1.0) * term(off)
}

/// Mixes two integers into a seed (splitmix64 finalizer).
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Groups examples into batches of at most `batch_tokens` padded tokens per
/// side. `lengths` holds (source, target) token counts without specials.
///
/// Examples are bucketed by length so that padding stays small; the order
/// of batches is shuffled. Deterministic for a given seed.
pub fn batch_by_tokens(lengths: &[(usize, usize)], batch_tokens: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let padded = |i: usize| lengths[i].0.max(lengths[i].1) + 1;
    order.sort_by_key(|&i| padded(i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = padded(i).max(longest);
        if !current.is_empty() && (current.len() + 1) * len > batch_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(padded(i));
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

enum Slot {
    Adam { m: Vec<f32>, v: Vec<f32> },
    Factored { rows: usize, cols: usize, r: Vec<f64>, c: Vec<f64> },
    Unfactored { v: Vec<f64> },
}

/// Adam (β1 0.9, β2 0.98, ε 1e-9) or a momentum-free Adafactor with
/// factored second moments for matrices.
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    slots: Vec<Slot>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;
const ADAFACTOR_EPS: f64 = 1e-30;

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams<f32>) -> Self {
        let slots = params
            .iter()
            .map(|(_, t)| match kind {
                OptimizerKind::Adam => Slot::Adam {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                },
                OptimizerKind::Adafactor if t.rank() == 2 => {
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    Slot::Factored {
                        rows,
                        cols,
                        r: vec![0.0; rows],
                        c: vec![0.0; cols],
                    }
                }
                OptimizerKind::Adafactor => Slot::Unfactored {
                    v: vec![0.0; t.len()],
                },
            })
            .collect();
        Optimizer { kind, t: 0, slots }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update; `grads` is aligned with `params.iter()`.
    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.slots.len()
            )));
        }
        self.t += 1;
        let t = self.t as f64;
        for (((_, w), g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let w = w.data_mut();
            match slot {
                Slot::Adam { m, v } => {
                    let c1 = 1.0 - BETA1.powf(t);
                    let c2 = 1.0 - BETA2.powf(t);
                    let step = (lr * c2.sqrt() / c1) as f32;
                    let eps = (ADAM_EPS * c2.sqrt()) as f32;
                    let (b1, b2) = (BETA1 as f32, BETA2 as f32);
                    for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *wi -= step * *mi / (vi.sqrt() + eps);
                    }
                }
                Slot::Factored { rows, cols, r, c } => {
                    let decay = 1.0 - t.powf(-0.8);
                    let (nr, nc) = (*rows, *cols);
                    let mut row_mean = vec![0.0f64; nr];
                    let mut col_mean = vec![0.0f64; nc];
                    for i in 0..nr {
                        for j in 0..nc {
                            let g2 = (g[i * nc + j] as f64).powi(2) + ADAFACTOR_EPS;
                            row_mean[i] += g2 / nc as f64;
                            col_mean[j] += g2 / nr as f64;
                        }
                    }
                    for (ri, m) in r.iter_mut().zip(&row_mean) {
                        *ri = decay * *ri + (1.0 - decay) * m;
                    }
                    for (cj, m) in c.iter_mut().zip(&col_mean) {
                        *cj = decay * *cj + (1.0 - decay) * m;
                    }
                    let r_mean = r.iter().sum::<f64>() / nr as f64;
                    let mut u: Vec<f64> = (0..nr * nc)
                        .map(|k| g[k] as f64 / (r[k / nc] * c[k % nc] / r_mean).sqrt())
                        .collect();
                    clip_rms(&mut u);
                    for (wi, ui) in w.iter_mut().zip(&u) {
                        *wi -= (lr * ui) as f32;
                    }
                }
                Slot::Unfactored { v } => {
                    let decay = 1.0 - t.powf(-0.8);
                    let mut u: Vec<f64> = Vec::with_capacity(w.len());
                    for (vi, &gi) in v.iter_mut().zip(g.iter()) {
                        let g2 = (gi as f64).powi(2) + ADAFACTOR_EPS;
                        *vi = decay * *vi + (1.0 - decay) * g2;
                        u.push(gi as f64 / vi.sqrt());
                    }
                    clip_rms(&mut u);
                    for (wi, ui) in w.iter_mut().zip(&u) {
                        *wi -= (lr * ui) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

fn clip_rms(u: &mut [f64]) {
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
    if rms > 1.0 {
        for x in u {
            *x /= rms;
        }
    }
}

/// One training run: parameters, optimizer state and optional pruner.
///
/// With a pruner, the optimizer updates the shadow weights (masked entries
/// included) and the forward pass reads `shadow · mask`.
pub struct Trainer {
    model: TransformerConfig,
    train: TrainConfig,
    vocab_size: usize,
    shadow: ModelParams<f32>,
    effective: Option<ModelParams<f32>>,
    pruner: Option<Pruner>,
    optimizer: Optimizer,
    step: u64,
}

impl Trainer {
    pub fn new(
        model: TransformerConfig,
        train: TrainConfig,
        vocab_size: usize,
        params: ModelParams<f32>,
        schedule: Option<PruningSchedule>,
    ) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let pruner = schedule.map(|s| Pruner::new(s, &params)).transpose()?;
        let effective = pruner.as_ref().map(|_| params.clone());
        let optimizer = Optimizer::new(train.optimizer, &params);
        Ok(Trainer {
            model,
            train,
            vocab_size,
            shadow: params,
            effective,
            pruner,
            optimizer,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model_config(&self) -> &TransformerConfig {
        &self.model
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Weights seen by the forward pass (masked entries read as zero).
    pub fn params(&self) -> &ModelParams<f32> {
        self.effective.as_ref().unwrap_or(&self.shadow)
    }

    pub fn shadow(&self) -> &ModelParams<f32> {
        &self.shadow
    }

    pub fn masks(&self) -> Option<&SparsityMasks> {
        self.pruner.as_ref().map(|p| &p.masks)
    }

    /// Effective weights and masks (all-ones when no pruner is attached).
    pub fn into_parts(self) -> (ModelParams<f32>, SparsityMasks) {
        let masks = match self.pruner {
            Some(p) => p.masks,
            None => SparsityMasks::dense(&self.shadow),
        };
        (self.effective.unwrap_or(self.shadow), masks)
    }

    /// Forward, backward, optimizer update, then the pruning hook.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f32> {
        self.step += 1;
        let step = self.step;
        let net = Transformer::new(&self.model, self.vocab_size);
        let mut tape = Tape::training(mix_seed(self.train.seed, step));
        let forward = self.effective.as_ref().unwrap_or(&self.shadow);
        let (bound, vars) = Bound::dense(&mut tape, forward, true);
        let loss_var = net.loss(&mut tape, &bound, batch)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: loss as f64,
            });
        }
        let grads = tape.backward(loss_var)?;
        let grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(forward.iter())
            .map(|(&v, (_, t))| grads.dense(v, t.len()))
            .collect();
        drop(tape);
        let lr = noam_lr(step, self.train.base_lr, self.model.hidden, self.train.warmup_steps);
        self.optimizer.update(&mut self.shadow, &grads, lr)?;
        if let (Some(pruner), Some(effective)) = (&mut self.pruner, &mut self.effective) {
            pruner.after_update(step, &self.shadow, effective)?;
        }
        Ok(loss)
    }

    /// Trains until `total_steps`, cycling over `pairs` in token-bucketed
    /// batches reshuffled every epoch. Pairs whose source or target does
    /// not fit `max_len` with its special token are skipped. Returns the
    /// per-step loss trace.
    pub fn fit(&mut self, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<f32>> {
        let usable: Vec<usize> = (0..pairs.len())
            .filter(|&i| {
                let (s, t) = &pairs[i];
                s.len() < self.model.max_len && t.len() < self.model.max_len
            })
            .collect();
        if usable.is_empty() {
            return Err(Error::EmptyCorpus("no training pair fits max_len".into()));
        }
        let lengths: Vec<(usize, usize)> = usable
            .iter()
            .map(|&i| (pairs[i].0.len(), pairs[i].1.len()))
            .collect();
        let mut trace = Vec::new();
        let mut epoch = 0u64;
        while self.step < self.train.total_steps {
            let batches = batch_by_tokens(&lengths, self.train.batch_tokens, mix_seed(self.train.seed, epoch));
            for b in batches {
                if self.step >= self.train.total_steps {
                    break;
                }
                let refs: Vec<(&[usize], &[usize])> = b
                    .iter()
                    .map(|&k| {
                        let (s, t) = &pairs[usable[k]];
                        (s.as_slice(), t.as_slice())
                    })
                    .collect();
                trace.push(self.train_step(&Batch::from_pairs(&refs))?);
            }
            epoch += 1;
        }
        Ok(trace)
    }
}
