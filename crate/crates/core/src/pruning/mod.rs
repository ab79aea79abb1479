//! Gradual magnitude pruning.
//!
//! The target sparsity rises from zero to `end_sparsity` between
//! `begin_step` and `end_step` along a polynomial ramp (cubic by default).
//! At every pruning event each prunable tensor is re-thresholded on its own:
//! the `⌈(1 − s)·n⌉` largest-magnitude entries are kept. Masked weights keep
//! their underlying ("shadow") values and keep receiving optimizer updates,
//! so a later event can revive them; the forward pass only ever sees
//! `value · mask`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// When and how much to prune.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningSchedule {
    pub begin_step: u64,
    pub end_step: u64,
    pub frequency: u64,
    pub end_sparsity: f64,
    #[serde(default)]
    pub initial_sparsity: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    3.0
}

impl PruningSchedule {
    pub fn new(begin_step: u64, end_step: u64, frequency: u64, end_sparsity: f64) -> Result<Self> {
        let s = PruningSchedule {
            begin_step,
            end_step,
            frequency,
            end_sparsity,
            initial_sparsity: 0.0,
            exponent: default_exponent(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Defaults scaled to a run of `total_steps`: pruning starts at about 3%
    /// of training, stops at about two thirds, and fires twenty times in
    /// between. `end_step` is snapped so that it is itself an event.
    pub fn scaled_default(total_steps: u64, end_sparsity: f64) -> Result<Self> {
        let total = total_steps.max(3);
        let begin = ((total as f64 * 0.03).round() as u64).max(1);
        let end_target = ((total as f64 * 2.0 / 3.0).round() as u64).max(begin + 1);
        let frequency = (end_target / 20).max(1);
        let events = (end_target - begin).div_ceil(frequency);
        Self::new(begin, begin + events * frequency, frequency, end_sparsity)
    }

    pub fn with_exponent(mut self, exponent: f64) -> Result<Self> {
        self.exponent = exponent;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.begin_step >= self.end_step {
            return Err(Error::Config(format!(
                "pruning begin step {} must precede end step {}",
                self.begin_step, self.end_step
            )));
        }
        if self.frequency == 0 {
            return Err(Error::Config("pruning frequency must be >= 1".into()));
        }
        for (name, s) in [
            ("end", self.end_sparsity),
            ("initial", self.initial_sparsity),
        ] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config(format!("{name} sparsity {s} outside [0, 1)")));
            }
        }
        if self.initial_sparsity > self.end_sparsity {
            return Err(Error::Config("initial sparsity exceeds end sparsity".into()));
        }
        if !(self.exponent.is_finite() && self.exponent > 0.0) {
            return Err(Error::Config(format!(
                "schedule exponent {} must be positive",
                self.exponent
            )));
        }
        Ok(())
    }

    /// Target sparsity at `step`: `s_i` before the ramp, `s_f` from the end
    /// step on, and `s_f + (s_i − s_f)(1 − progress)^exponent` in between.
    pub fn target_sparsity(&self, step: u64) -> f64 {
        if step < self.begin_step {
            return self.initial_sparsity;
        }
        if step >= self.end_step {
            return self.end_sparsity;
        }
        let progress =
            (step - self.begin_step) as f64 / (self.end_step - self.begin_step) as f64;
        self.end_sparsity
            + (self.initial_sparsity - self.end_sparsity) * (1.0 - progress).powf(self.exponent)
    }

    pub fn is_event(&self, step: u64) -> bool {
        step >= self.begin_step
            && step <= self.end_step
            && (step - self.begin_step).is_multiple_of(self.frequency)
    }

    pub fn events(&self) -> impl Iterator<Item = u64> + '_ {
        (self.begin_step..=self.end_step).step_by(self.frequency as usize)
    }
}

/// Binary keep/prune overlay for one tensor; `true` means kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), keep.len(), "mask shape");
        Mask { shape, keep }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn density(&self) -> f64 {
        self.kept() as f64 / self.len() as f64
    }
}

/// Number of entries kept out of `n` at `sparsity`: `⌈(1 − s)·n⌉`.
pub fn keep_count(n: usize, sparsity: f64) -> usize {
    let exact = (1.0 - sparsity) * n as f64;
    // Absorb representation error such as (1 - 0.7) * 10 = 3.0000000000000004.
    let k = (exact - 1e-9).ceil().max(0.0) as usize;
    k.min(n)
}

/// Keeps the `keep_count(n, sparsity)` largest-|w| entries. Among equal
/// magnitudes the lower flat index wins.
pub fn magnitude_mask<T: Scalar>(tensor: &Tensor<T>, sparsity: f64) -> Mask {
    let values = tensor.data();
    let n = values.len();
    let k = keep_count(n, sparsity);
    let mut keep = vec![false; n];
    if k == n {
        keep.fill(true);
    } else if k > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let mag = |i: usize| values[i].abs().to_f64().unwrap_or(f64::NAN);
        let rank = |&a: &usize, &b: &usize| mag(b).total_cmp(&mag(a)).then(a.cmp(&b));
        order.select_nth_unstable_by(k - 1, rank);
        for &i in &order[..k] {
            keep[i] = true;
        }
    }
    Mask::new(tensor.shape().to_vec(), keep)
}

/// Masks for every prunable tensor of a model, keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsityMasks {
    masks: IndexMap<String, Mask>,
}

impl SparsityMasks {
    /// All-ones masks for every prunable tensor.
    pub fn dense<T: Scalar>(params: &ModelParams<T>) -> Self {
        SparsityMasks {
            masks: params
                .prunable()
                .map(|(name, t)| (name.to_string(), Mask::ones(t.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mask: Mask) {
        self.masks.insert(name.into(), mask);
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.masks.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mask)> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Recomputes every mask from scratch at a uniform per-tensor `sparsity`.
pub fn prune_to<T: Scalar>(
    params: &ModelParams<T>,
    masks: &mut SparsityMasks,
    sparsity: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Invalid(format!("sparsity {sparsity} outside [0, 1)")));
    }
    for (name, tensor) in params.prunable() {
        masks.insert(name, magnitude_mask(tensor, sparsity));
    }
    Ok(())
}

/// Runs the pruning event scheduled at `step`.
pub fn prune_event<T: Scalar>(
    params: &ModelParams<T>,
    masks: &mut SparsityMasks,
    schedule: &PruningSchedule,
    step: u64,
) -> Result<()> {
    if !schedule.is_event(step) {
        return Err(Error::Invalid(format!("step {step} is not a pruning event")));
    }
    prune_to(params, masks, schedule.target_sparsity(step))
}

/// Writes the effective weights `shadow · mask` into `effective`.
/// Tensors without a mask are copied unchanged.
pub fn post_update_hook<T: Scalar>(
    shadow: &ModelParams<T>,
    masks: &SparsityMasks,
    effective: &mut ModelParams<T>,
) -> Result<()> {
    for (name, src) in shadow.iter() {
        let dst = effective
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("effective params lack {name}")))?;
        if dst.shape() != src.shape() {
            return Err(Error::Shape {
                op: "post_update_hook",
                left: src.shape().to_vec(),
                right: dst.shape().to_vec(),
            });
        }
        match masks.get(name) {
            Some(mask) => {
                if mask.shape() != src.shape() {
                    return Err(Error::Shape {
                        op: "post_update_hook",
                        left: src.shape().to_vec(),
                        right: mask.shape().to_vec(),
                    });
                }
                for ((d, &s), &k) in dst.data_mut().iter_mut().zip(src.data()).zip(mask.keep()) {
                    *d = if k { s } else { T::zero() };
                }
            }
            None => dst.data_mut().copy_from_slice(src.data()),
        }
    }
    Ok(())
}

/// Effective weights as a fresh parameter set.
pub fn apply_masks<T: Scalar>(
    shadow: &ModelParams<T>,
    masks: &SparsityMasks,
) -> Result<ModelParams<T>> {
    let mut out = shadow.clone();
    post_update_hook(shadow, masks, &mut out)?;
    Ok(out)
}

/// Schedule plus current masks, attached to a training run.
#[derive(Debug, Clone)]
pub struct Pruner {
    pub schedule: PruningSchedule,
    pub masks: SparsityMasks,
}

impl Pruner {
    pub fn new<T: Scalar>(schedule: PruningSchedule, params: &ModelParams<T>) -> Result<Self> {
        schedule.validate()?;
        Ok(Pruner {
            schedule,
            masks: SparsityMasks::dense(params),
        })
    }

    /// Called once per step after the optimizer update: runs a pruning event
    /// when one is due, then refreshes the effective weights.
    pub fn after_update<T: Scalar>(
        &mut self,
        step: u64,
        shadow: &ModelParams<T>,
        effective: &mut ModelParams<T>,
    ) -> Result<()> {
        if self.schedule.is_event(step) {
            prune_event(shadow, &mut self.masks, &self.schedule, step)?;
        }
        post_update_hook(shadow, &self.masks, effective)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub size: usize,
    pub kept: usize,
}

impl TensorSparsity {
    pub fn nonzero_fraction(&self) -> f64 {
        self.kept as f64 / self.size as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tensors: Vec<TensorSparsity>,
    pub prunable_size: usize,
    pub prunable_kept: usize,
    /// Parameters exempt from pruning (biases, layer norms).
    pub unprunable_size: usize,
}

impl SparsityReport {
    /// Kept fraction of the prunable parameters.
    pub fn global_nonzero_fraction(&self) -> f64 {
        if self.prunable_size == 0 {
            1.0
        } else {
            self.prunable_kept as f64 / self.prunable_size as f64
        }
    }

    pub fn global_sparsity(&self) -> f64 {
        1.0 - self.global_nonzero_fraction()
    }

    pub fn total_size(&self) -> usize {
        self.prunable_size + self.unprunable_size
    }

    pub fn total_nonzero(&self) -> usize {
        self.prunable_kept + self.unprunable_size
    }
}

pub fn sparsity_report<T: Scalar>(params: &ModelParams<T>, masks: &SparsityMasks) -> SparsityReport {
    let mut tensors = Vec::new();
    let (mut prunable_size, mut prunable_kept, mut unprunable_size) = (0, 0, 0);
    for (name, t) in params.iter() {
        if !crate::model::is_prunable(t) {
            unprunable_size += t.len();
            continue;
        }
        let kept = masks.get(name).map_or(t.len(), Mask::kept);
        prunable_size += t.len();
        prunable_kept += kept;
        tensors.push(TensorSparsity {
            name: name.to_string(),
            size: t.len(),
            kept,
        });
    }
    SparsityReport {
        tensors,
        prunable_size,
        prunable_kept,
        unprunable_size,
    }
}

#[cfg(test)]
mod tests;
