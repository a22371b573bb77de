//! Collapsing an upcycled mixture back into a dense model: fixed-weight
//! merging, learned mixing coefficients (with or without a fixed shared
//! expert rate), and expert weight averaging.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::TokenizedExample;
use crate::error::{Result, XftError};
use crate::moe::{MoeConfig, MoeLayer, SHARED_EXPERT};
use crate::tensor::{Scalar, Tensor};
use crate::train::{self, Objective, TrainHyper, TrainReport};
use crate::transformer::{batch_loss, Block, Ffn, FfnSlot, Model};

pub const SIMPLEX_TOL: f64 = 1e-6;

/// Per-layer mixing logits. In constrained mode the shared expert is pinned
/// to `lambda` and the `N−1` normal experts share `1 − lambda` through a
/// softmax; in unconstrained mode one softmax covers all `N` experts and
/// `lambda` only records the initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingCoefficients {
    pub lambda: f64,
    pub constrained: bool,
    pub logits: Vec<Vec<f64>>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(XftError::Config(format!("shared expert rate {lambda} outside [0, 1]")));
    }
    Ok(())
}

impl MixingCoefficients {
    pub fn num_layers(&self) -> usize {
        self.logits.len()
    }

    pub fn num_experts(&self) -> usize {
        let m = self.logits.first().map_or(0, Vec::len);
        if self.constrained {
            m + 1
        } else {
            m
        }
    }

    /// Mixing weights of layer `l`, indexed by expert (shared expert first).
    pub fn alphas(&self, l: usize) -> Vec<f64> {
        let mut p = self.logits[l].clone();
        crate::tensor::softmax_in_place(&mut p);
        if self.constrained {
            let mut a = Vec::with_capacity(p.len() + 1);
            a.push(self.lambda);
            a.extend(p.iter().map(|x| x * (1.0 - self.lambda)));
            a
        } else {
            p
        }
    }

    pub fn all_alphas(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers()).map(|l| self.alphas(l)).collect()
    }

    /// Largest deviation from the constrained simplex over all layers:
    /// `|α_shared − λ|` and `|Σ α_normal − (1−λ)|`. Unconstrained
    /// coefficients are measured against a plain sum of one.
    pub fn simplex_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for l in 0..self.num_layers() {
            let a = self.alphas(l);
            if self.constrained {
                worst = worst.max((a[SHARED_EXPERT] - self.lambda).abs());
                let rest: f64 = a[1..].iter().sum();
                worst = worst.max((rest - (1.0 - self.lambda)).abs());
            } else {
                worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }

    pub fn check(&self, cfg: &MoeConfig, layers: usize) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.logits.len() != layers {
            return Err(XftError::Config(format!(
                "coefficients cover {} layers, model has {layers}",
                self.logits.len()
            )));
        }
        let want = if self.constrained { cfg.num_experts - 1 } else { cfg.num_experts };
        for (l, row) in self.logits.iter().enumerate() {
            if row.len() != want {
                return Err(XftError::Config(format!("layer {l}: {} logits, expected {want}", row.len())));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(XftError::Numeric(format!("layer {l}: non-finite mixing logit")));
            }
        }
        Ok(())
    }
}

/// Uniform start: zero logits, so every normal expert gets `(1−λ)/(N−1)`.
pub fn init_mixing_coefficients(cfg: &MoeConfig, layers: usize, lambda: f64) -> Result<MixingCoefficients> {
    check_lambda(lambda)?;
    cfg.validate()?;
    Ok(MixingCoefficients { lambda, constrained: true, logits: vec![vec![0.0; cfg.num_experts - 1]; layers] })
}

/// Unconstrained soup started at the same point as the constrained one:
/// shared weight `λ`, each normal expert `(1−λ)/(N−1)`.
pub fn init_unconstrained_coefficients(cfg: &MoeConfig, layers: usize, lambda: f64) -> Result<MixingCoefficients> {
    check_lambda(lambda)?;
    cfg.validate()?;
    if lambda <= 0.0 || lambda >= 1.0 {
        return Err(XftError::Config(format!("unconstrained initialization needs 0 < λ < 1, got {lambda}")));
    }
    let n = cfg.num_experts;
    let mut row = vec![((1.0 - lambda) / (n - 1) as f64).ln(); n];
    row[SHARED_EXPERT] = lambda.ln();
    Ok(MixingCoefficients { lambda, constrained: false, logits: vec![row; layers] })
}

/// `Σ α_i W_i` over every weight and bias tensor of the experts.
pub fn merge_fixed<T: Scalar>(layer: &MoeLayer<Tensor<T>>, alpha: &[f64]) -> Result<Ffn<Tensor<T>>> {
    if alpha.len() != layer.experts.len() {
        return Err(XftError::Contract(format!("{} weights for {} experts", alpha.len(), layer.experts.len())));
    }
    if let Some(a) = alpha.iter().find(|a| a.is_nan() || **a < 0.0) {
        return Err(XftError::Contract(format!("negative or invalid merge weight {a}")));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() >= SIMPLEX_TOL {
        return Err(XftError::Contract(format!("merge weights sum to {sum}, not 1")));
    }
    let parts: Vec<[&Tensor<T>; 4]> = layer.experts.iter().map(|e| e.parts()).collect();
    let merged = std::array::from_fn(|p| {
        let shape = parts[0][p].shape().to_vec();
        let mut acc = vec![0.0f64; parts[0][p].len()];
        for (e, &a) in parts.iter().zip(alpha) {
            for (s, x) in acc.iter_mut().zip(e[p].data()) {
                *s += a * x.as_f64();
            }
        }
        Tensor::new(shape, acc.into_iter().map(T::of).collect()).expect("expert part shape")
    });
    Ok(Ffn::from_parts(merged))
}

/// Replaces every MoE layer by `f(layer index, layer)`, copying all other
/// tensors. The router is dropped.
fn densify<T: Scalar>(
    model: &Model<Tensor<T>>,
    mut f: impl FnMut(usize, &MoeLayer<Tensor<T>>) -> Result<Ffn<Tensor<T>>>,
) -> Result<Model<Tensor<T>>> {
    if !model.is_moe() {
        return Err(XftError::Config("model has no MoE layers to merge".into()));
    }
    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let layer = b.ffn.as_moe().ok_or_else(|| XftError::Config(format!("block {l} is not an MoE layer")))?;
            Ok(b.with_ffn(FfnSlot::Dense(f(l, layer)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: model.config.clone(),
        moe: None,
        tok_embed: model.tok_embed.clone(),
        pos_embed: model.pos_embed.clone(),
        blocks,
        ln_final: model.ln_final.clone(),
        unembed: model.unembed.clone(),
        unembed_bias: model.unembed_bias.clone(),
    })
}

/// Dense model whose FFNs are the coefficient-weighted expert merges.
pub fn merge_xft<T: Scalar>(model: &Model<Tensor<T>>, coeffs: &MixingCoefficients) -> Result<Model<Tensor<T>>> {
    let cfg = model.moe.as_ref().ok_or_else(|| XftError::Config("model has no MoE layers to merge".into()))?;
    coeffs.check(cfg, model.blocks.len())?;
    densify(model, |l, layer| merge_fixed(layer, &coeffs.alphas(l)))
}

/// Dense model built from the shared expert of every layer.
pub fn extract_shared<T: Scalar>(model: &Model<Tensor<T>>) -> Result<Model<Tensor<T>>> {
    densify(model, |_, layer| Ok(layer.experts[SHARED_EXPERT].clone()))
}

/// Dense model built from the uniform mean of every layer's experts.
pub fn ewa_finalize<T: Scalar>(model: &Model<Tensor<T>>) -> Result<Model<Tensor<T>>> {
    densify(model, |_, layer| {
        let n = layer.experts.len();
        merge_fixed(layer, &vec![1.0 / n as f64; n])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EwaSchedule {
    #[default]
    Constant,
    /// `β_t` rises linearly from 0 at the first step to `β` at the last.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwaConfig {
    pub beta: f64,
    #[serde(default)]
    pub schedule: EwaSchedule,
}

impl EwaConfig {
    /// Share rate 0.3 with a constant schedule.
    pub fn reference() -> Self {
        Self { beta: 0.3, schedule: EwaSchedule::Constant }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(XftError::Config(format!("share rate {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }

    /// Share rate at optimizer step `step` of `total`.
    pub fn beta_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            EwaSchedule::Constant => self.beta,
            EwaSchedule::Linear if total <= 1 => self.beta,
            EwaSchedule::Linear => self.beta * step.min(total - 1) as f64 / (total - 1) as f64,
        }
    }
}

/// `W_i ← β W̄ + (1−β) W_i` for every expert tensor, `W̄` the uniform mean.
pub fn ewa_step<T: Scalar>(layer: &mut MoeLayer<Tensor<T>>, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(XftError::Contract(format!("share rate {beta} outside [0, 1]")));
    }
    let n = layer.experts.len();
    let mean = merge_fixed(layer, &vec![1.0 / n as f64; n])?;
    let mean_parts = mean.parts();
    for e in &mut layer.experts {
        let mut p = 0;
        e.visit_mut("", &mut |_, t: &mut Tensor<T>| {
            for (x, m) in t.data_mut().iter_mut().zip(mean_parts[p].data()) {
                *x = T::of(beta * m.as_f64() + (1.0 - beta) * x.as_f64());
            }
            p += 1;
        });
    }
    Ok(())
}

/// MoE fine-tuning with expert weight averaging after every update.
pub fn train_moe_ewa<T: Scalar>(
    model: &mut Model<Tensor<T>>,
    data: &[TokenizedExample],
    hyper: &TrainHyper,
    ewa: &EwaConfig,
) -> Result<TrainReport> {
    ewa.validate()?;
    if !model.is_moe() {
        return Err(XftError::Config("expert averaging needs an MoE model".into()));
    }
    let total = hyper.steps_per_epoch(data.len()) * hyper.epochs;
    let ewa = *ewa;
    train::train(model, data, hyper, &mut |info, m: &mut Model<Tensor<T>>| {
        let beta = ewa.beta_at(info.step, total);
        for b in &mut m.blocks {
            if let Some(layer) = b.ffn.as_moe_mut() {
                ewa_step(layer, beta)?;
            }
        }
        Ok(())
    })
}

/// Trains only the mixing logits of a frozen MoE model; the loss is that
/// of the dense model merged from the current coefficients.
struct MergeObjective<'a, T: Scalar> {
    model: &'a Model<Tensor<T>>,
    lambda: f64,
    constrained: bool,
    logits: Vec<Tensor<T>>,
}

impl<T: Scalar> MergeObjective<'_, T> {
    fn coefficients(&self) -> MixingCoefficients {
        MixingCoefficients {
            lambda: self.lambda,
            constrained: self.constrained,
            logits: self.logits.iter().map(|t| t.data().iter().map(|x| x.as_f64()).collect()).collect(),
        }
    }

    /// Binds the merged dense model; returns it and one tracked leaf per layer.
    fn bind_merged(&self, g: &mut Graph<T>) -> Result<(Model<Var>, Vec<Var>)> {
        let m = self.model;
        let mut c = |_: &str, t: &Tensor<T>| g.constant(t.clone());
        let tok_embed = c("", &m.tok_embed);
        let pos_embed = c("", &m.pos_embed);
        let mut partial = Vec::with_capacity(m.blocks.len());
        for b in &m.blocks {
            partial.push((b.ln_attn.map("", &mut c), b.attn.map("", &mut c), b.ln_ffn.map("", &mut c)));
        }
        let ln_final = m.ln_final.map("", &mut c);
        let unembed = c("", &m.unembed);
        let unembed_bias = c("", &m.unembed_bias);

        let mut leaves = Vec::with_capacity(m.blocks.len());
        let mut blocks = Vec::with_capacity(m.blocks.len());
        for ((ln_attn, attn, ln_ffn), (b, logits)) in partial.into_iter().zip(m.blocks.iter().zip(&self.logits)) {
            let layer = b.ffn.as_moe().ok_or_else(|| XftError::Config("block is not an MoE layer".into()))?;
            let z = g.param(logits.clone());
            leaves.push(z);
            let p = g.softmax(z)?;
            let (alpha, offset) = if self.constrained { (g.scale(p, T::of(1.0 - self.lambda)), 1) } else { (p, 0) };
            let merged: [Var; 4] = {
                let mut out = Vec::with_capacity(4);
                for part in 0..4 {
                    let mut acc: Option<Var> = None;
                    for (i, e) in layer.experts.iter().enumerate() {
                        let w = g.constant(e.parts()[part].clone());
                        let term = if self.constrained && i == SHARED_EXPERT {
                            g.scale(w, T::of(self.lambda))
                        } else {
                            g.scale_by_elem(w, alpha, i - offset)?
                        };
                        acc = Some(match acc {
                            None => term,
                            Some(a) => g.add(a, term)?,
                        });
                    }
                    out.push(acc.expect("at least two experts"));
                }
                out.try_into().expect("four parts")
            };
            blocks.push(Block { ln_attn, attn, ln_ffn, ffn: FfnSlot::Dense(Ffn::from_parts(merged)) });
        }
        let bound = Model {
            config: m.config.clone(),
            moe: None,
            tok_embed,
            pos_embed,
            blocks,
            ln_final,
            unembed,
            unembed_bias,
        };
        Ok((bound, leaves))
    }
}

impl<T: Scalar> Objective<T> for MergeObjective<'_, T> {
    fn trainables_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.logits.iter_mut().collect()
    }

    fn decay_mask(&self) -> Vec<bool> {
        vec![false; self.logits.len()]
    }

    fn batch_loss(&self, g: &mut Graph<T>, batch: &[&TokenizedExample]) -> Result<(Var, Vec<Var>)> {
        let (bound, leaves) = self.bind_merged(g)?;
        let pairs: Vec<(&[usize], &[u8])> = batch.iter().map(|e| e.as_pair()).collect();
        Ok((batch_loss(g, &bound, &pairs)?, leaves))
    }
}

#[derive(Clone, Debug)]
pub struct MergeLearnReport {
    pub train: TrainReport,
    /// Largest simplex deviation seen after any optimizer step.
    pub max_simplex_violation: f64,
    /// Mixing weights after every step, `[step][layer][expert]`.
    pub alpha_history: Vec<Vec<Vec<f64>>>,
}

/// Learns mixing coefficients starting from `init`; the MoE model is only
/// read. Returns the final coefficients and the optimization trace.
pub fn learn_mixing_coefficients<T: Scalar>(
    model: &Model<Tensor<T>>,
    data: &[TokenizedExample],
    init: &MixingCoefficients,
    hyper: &TrainHyper,
) -> Result<(MixingCoefficients, MergeLearnReport)> {
    let cfg = model.moe.as_ref().ok_or_else(|| XftError::Config("mixing coefficients need an MoE model".into()))?;
    init.check(cfg, model.blocks.len())?;
    let mut obj = MergeObjective {
        model,
        lambda: init.lambda,
        constrained: init.constrained,
        logits: init
            .logits
            .iter()
            .map(|row| Tensor::new(vec![1, row.len()], row.iter().map(|&x| T::of(x)).collect()))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut history = Vec::new();
    let mut worst: f64 = 0.0;
    let report = train::train(&mut obj, data, hyper, &mut |_, o: &mut MergeObjective<'_, T>| {
        let c = o.coefficients();
        worst = worst.max(c.simplex_violation());
        history.push(c.all_alphas());
        Ok(())
    })?;
    let coeffs = obj.coefficients();
    Ok((coeffs, MergeLearnReport { train: report, max_simplex_violation: worst, alpha_history: history }))
}

/// Gradient of the merged-model batch loss with respect to the mixing
/// logits, one row per layer.
pub fn mixing_logit_gradients<T: Scalar>(
    model: &Model<Tensor<T>>,
    batch: &[TokenizedExample],
    coeffs: &MixingCoefficients,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let cfg = model.moe.as_ref().ok_or_else(|| XftError::Config("mixing coefficients need an MoE model".into()))?;
    coeffs.check(cfg, model.blocks.len())?;
    let obj = MergeObjective {
        model,
        lambda: coeffs.lambda,
        constrained: coeffs.constrained,
        logits: coeffs
            .logits
            .iter()
            .map(|row| Tensor::new(vec![1, row.len()], row.iter().map(|&x| T::of(x)).collect()))
            .collect::<Result<Vec<_>>>()?,
    };
    let refs: Vec<&TokenizedExample> = batch.iter().collect();
    let mut g = Graph::new();
    let (loss, leaves) = obj.batch_loss(&mut g, &refs)?;
    g.backward(loss)?;
    let grads = leaves
        .iter()
        .map(|&v| g.grad(v).expect("tracked leaf").data().iter().map(|x| x.as_f64()).collect())
        .collect();
    Ok((g.value(loss).data()[0].as_f64(), grads))
}
