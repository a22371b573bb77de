//! Supervised fine-tuning: linear warmup/decay schedule, AdamW, seeded
//! mini-batching and a loop shared by every trainable objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::TokenizedExample;
use crate::error::{Result, XftError};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{batch_loss, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainHyper {
    fn with(batch_size: usize, peak_lr: f64, warmup_steps: usize, epochs: usize) -> Self {
        Self { batch_size, peak_lr, warmup_steps, epochs, seed: 0, weight_decay: 0.01, clip_norm: Some(1.0) }
    }

    /// MoE fine-tuning at full scale: batch 64, lr 5e-5, 500 warmup steps, 4 epochs.
    pub fn full_moe() -> Self {
        Self::with(64, 5e-5, 500, 4)
    }

    /// Mixing-coefficient learning at full scale: batch 64, lr 1e-5, 125 warmup steps, 1 epoch.
    pub fn full_merge() -> Self {
        Self::with(64, 1e-5, 125, 1)
    }

    /// Dense baseline at full scale: the MoE and merge budgets combined (5 epochs, 625 warmup).
    pub fn full_baseline() -> Self {
        Self::fairness(&Self::full_moe(), &Self::full_merge())
    }

    /// Desk-scale training from random initialization, standing in for
    /// pre-training.
    pub fn desk_pretrain() -> Self {
        Self::with(8, 2e-3, 20, 4)
    }

    /// Desk-scale fine-tuning (MoE and dense SFT phases): a tenth of the
    /// pre-training rate, so fine-tuning stays a small step from the
    /// starting weights.
    pub fn desk_moe() -> Self {
        Self::with(8, 2e-4, 20, 4)
    }

    /// Desk-scale mixing-coefficient phase. The coefficients are a handful
    /// of logits, so they take a larger step than the network weights.
    pub fn desk_merge() -> Self {
        Self::with(8, 5e-2, 5, 1)
    }

    /// Dense baseline trained for the combined epoch and warmup budget of an
    /// MoE phase followed by a merge phase, at the MoE phase's batch size
    /// and learning rate.
    pub fn fairness(moe: &Self, merge: &Self) -> Self {
        Self { epochs: moe.epochs + merge.epochs, warmup_steps: moe.warmup_steps + merge.warmup_steps, ..moe.clone() }
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(XftError::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(XftError::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if total_steps > 0 && self.warmup_steps >= total_steps {
            return Err(XftError::Config(format!(
                "warmup_steps {} must be below the {total_steps} total steps",
                self.warmup_steps
            )));
        }
        Ok(())
    }
}

/// Linear ramp `0 → peak` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at_step(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}

/// AdamW with decoupled weight decay applied only where the decay mask is set.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(XftError::Contract(format!(
                "optimizer state for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(XftError::Numeric(format!(
                    "non-finite gradient in tensor {i} at element {j} (optimizer step {})",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, &g), (mi, vi)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let mut w = x.as_f64();
                w -= lr * wd * w;
                w -= lr * mhat / (vhat.sqrt() + self.eps);
                *x = T::of(w);
            }
        }
        Ok(())
    }
}

/// Something the training loop can optimize.
pub trait Objective<T: Scalar> {
    /// Trainable tensors, in the same order as the leaves returned by `batch_loss`.
    fn trainables_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// Which trainables receive weight decay.
    fn decay_mask(&self) -> Vec<bool>;

    /// Loss of one batch plus one tracked leaf per trainable.
    fn batch_loss(&self, g: &mut Graph<T>, batch: &[&TokenizedExample]) -> Result<(Var, Vec<Var>)>;
}

/// Full fine-tuning: every model tensor is trainable; matrices decay.
impl<T: Scalar> Objective<T> for Model<Tensor<T>> {
    fn trainables_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<*mut Tensor<T>> = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t as *mut _));
        // SAFETY: visit_mut yields each tensor exactly once, so the pointers
        // are distinct and all borrow from `self` for the returned lifetime.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t.rank() == 2));
        out
    }

    fn batch_loss(&self, g: &mut Graph<T>, batch: &[&TokenizedExample]) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(g, &|_| true);
        let mut leaves = Vec::new();
        bound.visit(&mut |_, v| leaves.push(*v));
        let pairs: Vec<(&[usize], &[u8])> = batch.iter().map(|e| e.as_pair()).collect();
        Ok((batch_loss(g, &bound, &pairs)?, leaves))
    }
}

#[derive(Clone, Debug)]
pub struct StepInfo {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Seeded mini-batch training. `on_step` runs after every optimizer update
/// and may mutate the objective (used for expert averaging).
pub fn train<T, O>(
    obj: &mut O,
    data: &[TokenizedExample],
    hyper: &TrainHyper,
    on_step: &mut dyn FnMut(&StepInfo, &mut O) -> Result<()>,
) -> Result<TrainReport>
where
    T: Scalar,
    O: Objective<T>,
{
    if data.is_empty() {
        return Err(XftError::Contract("training set is empty".into()));
    }
    let steps_per_epoch = hyper.steps_per_epoch(data.len());
    let total = steps_per_epoch * hyper.epochs;
    hyper.validate(total)?;
    let mut report = TrainReport::default();
    if total == 0 {
        return Ok(report);
    }
    let sizes: Vec<usize> = obj.trainables_mut().iter().map(|t| t.len()).collect();
    let decay = obj.decay_mask();
    let mut opt = AdamW::new(&sizes, hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step: usize = 0;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&TokenizedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new();
            let (loss, leaves) = obj.batch_loss(&mut g, &batch)?;
            let loss_value = g.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(XftError::Numeric(format!(
                    "loss diverged to {loss_value} at step {step} (epoch {epoch}); parameters left at step {}",
                    step.saturating_sub(1)
                )));
            }
            g.backward(loss)?;
            let mut grads: Vec<Tensor<T>> = leaves.iter().map(|&v| g.grad(v).expect("tracked leaf")).collect();
            drop(g);
            let norm = grads.iter().flat_map(|t| t.data()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if let Some(clip) = hyper.clip_norm {
                if norm > clip {
                    let c = T::of(clip / norm);
                    for t in &mut grads {
                        t.data_mut().iter_mut().for_each(|x| *x = *x * c);
                    }
                }
            }
            let lr = lr_at_step(step, hyper.peak_lr, hyper.warmup_steps, total);
            opt.step(&mut obj.trainables_mut(), &grads, &decay, lr)?;
            report.losses.push(loss_value);
            let info = StepInfo { step, epoch, lr, loss: loss_value, grad_norm: norm };
            on_step(&info, obj)?;
            step += 1;
        }
    }
    report.steps = step;
    Ok(report)
}

/// Full-parameter supervised fine-tuning.
pub fn sft_train<T: Scalar>(model: &mut Model<Tensor<T>>, data: &[TokenizedExample], hyper: &TrainHyper) -> Result<TrainReport> {
    train(model, data, hyper, &mut |_, _| Ok(()))
}

/// Mean masked loss over a dataset, evaluated in batches without gradients.
pub fn eval_loss<T: Scalar>(model: &Model<Tensor<T>>, data: &[TokenizedExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(XftError::Contract("evaluation set is empty".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &|_| false);
    let base = g.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        let n = crate::transformer::target_count(&ex.mask);
        if n == 0 {
            continue;
        }
        let (_, l) = crate::transformer::sequence_loss(&mut g, &bound, &ex.tokens, &ex.mask, 1)?;
        total += g.value(l).data()[0].as_f64();
        count += n;
        g.truncate(base);
    }
    if count == 0 {
        return Err(XftError::Contract("evaluation set has no target positions".into()));
    }
    Ok(total / count as f64)
}
