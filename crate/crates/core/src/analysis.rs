//! Routing statistics and the two-model ensemble identity of a constant-gate
//! mixture.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::TokenizedExample;
use crate::error::{Result, XftError};
use crate::merge::{init_mixing_coefficients, merge_xft};
use crate::moe::{combine_experts, SHARED_EXPERT};
use crate::tensor::{Scalar, Tensor};
use crate::train::eval_loss;
use crate::transformer::{attention_forward, embed, ffn_forward, Activation, Ffn, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadRow {
    pub layer: usize,
    /// Expert index; the shared expert is 0 and never appears here.
    pub expert: usize,
    pub proportion: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertLoadReport {
    pub corpus: String,
    pub num_experts: usize,
    pub tokens: u64,
    pub rows: Vec<LoadRow>,
}

impl ExpertLoadReport {
    pub fn layers(&self) -> usize {
        self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0)
    }

    pub fn proportions(&self, layer: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.layer == layer).map(|r| r.proportion).collect()
    }

    /// Share each routed expert would get under uniform routing.
    pub fn uniform_share(&self) -> f64 {
        let routed = self.rows.iter().filter(|r| r.layer == 0).count();
        1.0 / routed.max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-layer horizontal bars; `|` marks the uniform share.
    pub fn bar_chart(&self) -> String {
        const WIDTH: usize = 50;
        let uniform = self.uniform_share();
        let top = self.rows.iter().map(|r| r.proportion).fold(2.0 * uniform, f64::max);
        let col = |p: f64| ((p / top) * WIDTH as f64).round() as usize;
        let mark = col(uniform).min(WIDTH);
        let mut out = String::new();
        let _ = writeln!(out, "corpus: {} ({} tokens), uniform share {:.4}", self.corpus, self.tokens, uniform);
        for layer in 0..self.layers() {
            let _ = writeln!(out, "layer {layer}");
            for r in self.rows.iter().filter(|r| r.layer == layer) {
                let n = col(r.proportion).min(WIDTH);
                let bar: String = (0..=WIDTH)
                    .map(|i| match (i < n, i == mark) {
                        (_, true) => '|',
                        (true, false) => '#',
                        (false, false) => ' ',
                    })
                    .collect();
                let _ = writeln!(out, "  expert {:>2} {bar} {:.4} ({})", r.expert, r.proportion, r.count);
            }
        }
        out
    }
}

/// Counts how often each routed expert is selected over `corpus`,
/// normalized by the number of routing assignments per layer. The shared
/// expert is excluded.
pub fn expert_load_histogram<T: Scalar>(
    model: &Model<Tensor<T>>,
    corpus: &[Vec<usize>],
    label: &str,
) -> Result<ExpertLoadReport> {
    let cfg = model.moe.as_ref().ok_or_else(|| XftError::Config("routing statistics need an MoE model".into()))?;
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(XftError::Contract("routing statistics need a nonempty corpus".into()));
    }
    let n = cfg.num_experts;
    let layers = model.blocks.len();
    let per_seq: Vec<Vec<u64>> = corpus
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|seq| -> Result<Vec<u64>> {
            let mut counts = vec![0u64; layers * n];
            let (_, trace) = model.forward_traced(seq)?;
            for (l, decisions) in trace.iter().enumerate() {
                for d in decisions {
                    for &e in &d.selected {
                        counts[l * n + e] += 1;
                    }
                }
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; layers * n];
    for c in &per_seq {
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    let tokens: u64 = corpus.iter().map(|s| s.len() as u64).sum();
    let first = if cfg.shared_expert { SHARED_EXPERT + 1 } else { 0 };
    let mut rows = Vec::with_capacity(layers * (n - first));
    for l in 0..layers {
        let routed: u64 = counts[l * n + first..(l + 1) * n].iter().sum();
        for e in first..n {
            let count = counts[l * n + e];
            rows.push(LoadRow { layer: l, expert: e, proportion: count as f64 / routed.max(1) as f64, count });
        }
    }
    Ok(ExpertLoadReport { corpus: label.to_string(), num_experts: n, tokens, rows })
}

/// One-layer instance with no final normalization, so the logits are an
/// affine function of the FFN sublayer output.
#[derive(Clone, Debug)]
pub struct EnsembleInstance {
    pub base: Model<Tensor<f32>>,
    pub experts: [Ffn<Tensor<f32>>; 2],
}

fn ensemble_instance(seed: u64) -> Result<EnsembleInstance> {
    let config = ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        activation: Activation::Gelu,
    };
    let mut base = Model::<Tensor<f32>>::init_dense(config.clone(), seed)?;
    base.visit_mut(&mut |name, t| {
        if !name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|x| *x *= 10.0);
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let second = Ffn::init(config.d_model, config.d_ff, &mut rng).parts().map(|t: &Tensor<f32>| t.scale(10.0));
    let first = base.blocks[0].ffn.as_dense().expect("dense init").clone();
    Ok(EnsembleInstance { base, experts: [first, Ffn::from_parts(second)] })
}

#[derive(Clone, Copy)]
enum Sublayer {
    /// Both experts active with constant gates `(1−α, α)`.
    Mixture(f32),
    /// Dense model with expert `i` as its FFN.
    Dense(usize),
}

fn ensemble_logits(inst: &EnsembleInstance, tokens: &[usize], sub: Sublayer) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let m = inst.base.bind(&mut g, &|_| false);
    let experts: Vec<Ffn<_>> = inst.experts.iter().map(|e| e.map("", &mut |_, t| g.constant(t.clone()))).collect();
    let block = &m.blocks[0];
    let x = embed(&mut g, &m, tokens)?;
    let u = attention_forward(&mut g, x, &block.ln_attn, &block.attn, m.config.n_heads)?;
    let y = g.layer_norm(u, block.ln_ffn.gamma, block.ln_ffn.beta)?;
    let h = match sub {
        Sublayer::Dense(i) => {
            let f = ffn_forward(&mut g, y, &experts[i], m.config.activation)?;
            g.add(u, f)?
        }
        Sublayer::Mixture(a) => {
            let gate_rows: Vec<f32> = (0..tokens.len()).flat_map(|_| [1.0 - a, a]).collect();
            let gv = g.constant(Tensor::new(vec![tokens.len(), 2], gate_rows)?);
            combine_experts(&mut g, y, u, &experts, gv, m.config.activation)?
        }
    };
    let logits = g.matmul(h, m.unembed)?;
    let logits = g.add_row(logits, m.unembed_bias)?;
    Ok(g.value(logits).clone())
}

/// Max-abs gap between the constant-gate mixture's logits and the
/// `(1−α, α)` ensemble of the two dense models, over 100 random inputs.
pub fn ensemble_identity_check(alpha: f64, seed: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(XftError::Contract(format!("mixture weight {alpha} outside [0, 1]")));
    }
    let inst = ensemble_instance(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let a = alpha as f32;
    let inputs: Vec<Vec<usize>> = (0..100)
        .map(|_| {
            let len = rng.gen_range(1..=inst.base.config.max_seq_len);
            (0..len).map(|_| rng.gen_range(0..inst.base.config.vocab_size)).collect()
        })
        .collect();
    let worst = inputs
        .par_iter()
        .map(|tokens| -> Result<f64> {
            let moe = ensemble_logits(&inst, tokens, Sublayer::Mixture(a))?;
            let d1 = ensemble_logits(&inst, tokens, Sublayer::Dense(0))?;
            let d2 = ensemble_logits(&inst, tokens, Sublayer::Dense(1))?;
            let mix: Vec<f32> = d1.data().iter().zip(d2.data()).map(|(p, q)| (1.0 - a) * p + a * q).collect();
            Ok(moe.data().iter().zip(&mix).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub points: Vec<SweepPoint>,
    /// Loss never increases / never decreases as λ grows.
    pub non_increasing: bool,
    pub non_decreasing: bool,
    pub best_lambda: f64,
}

/// Held-out loss of the merge with uniform normal-expert coefficients at
/// each shared expert rate.
pub fn lambda_sweep<T: Scalar>(model: &Model<Tensor<T>>, heldout: &[TokenizedExample], lambdas: &[f64]) -> Result<LambdaSweep> {
    let cfg = model.moe.as_ref().ok_or_else(|| XftError::Config("λ sweep needs an MoE model".into()))?;
    let points = lambdas
        .iter()
        .map(|&lambda| {
            let coeffs = init_mixing_coefficients(cfg, model.blocks.len(), lambda)?;
            let loss = eval_loss(&merge_xft(model, &coeffs)?, heldout)?;
            Ok(SweepPoint { lambda, loss })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = || points.windows(2).map(|w| (w[0].loss, w[1].loss));
    let non_increasing = pairs().all(|(a, b)| b <= a);
    let non_decreasing = pairs().all(|(a, b)| b >= a);
    let best_lambda = points
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .map_or(f64::NAN, |p| p.lambda);
    Ok(LambdaSweep { points, non_increasing, non_decreasing, best_lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{upcycle, MoeConfig};

    fn tiny_moe(router: impl Fn(usize, usize) -> f32) -> Model<Tensor<f32>> {
        let config = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 12,
            activation: Activation::Gelu,
        };
        let dense = Model::<Tensor<f32>>::init_dense(config, 3).unwrap();
        let mut m = upcycle(&dense, &MoeConfig::new(8, 6), 4).unwrap();
        for b in &mut m.blocks {
            let r = &mut b.ffn.as_moe_mut().unwrap().router;
            let d = r.shape()[1];
            for (k, x) in r.data_mut().iter_mut().enumerate() {
                *x = router(k / d, k % d);
            }
        }
        m
    }

    #[test]
    fn equal_centroids_fill_the_five_lowest_experts() {
        let m = tiny_moe(|_, _| 0.1);
        let corpus = vec![vec![1, 2, 3, 4], vec![5, 6]];
        let r = expert_load_histogram(&m, &corpus, "toy").unwrap();
        let p = r.proportions(0);
        assert_eq!(p.len(), 7);
        for (i, &x) in p.iter().enumerate() {
            let want = if i < 5 { 0.2 } else { 0.0 };
            assert!((x - want).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.tokens, 6);
        assert_eq!(r.rows.iter().map(|r| r.count).sum::<u64>(), 6 * 5);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let m = tiny_moe(|_, _| 0.0);
        assert!(expert_load_histogram(&m, &[], "x").is_err());
        assert!(expert_load_histogram(&m, &[vec![]], "x").is_err());
    }

    #[test]
    fn chart_has_one_bar_per_routed_expert() {
        let m = tiny_moe(|e, j| if e == j { 1.0 } else { 0.0 });
        let r = expert_load_histogram(&m, &[vec![1, 2, 3, 4, 5]], "toy").unwrap();
        let chart = r.bar_chart();
        assert_eq!(chart.lines().filter(|l| l.trim_start().starts_with("expert")).count(), 7);
        assert!(chart.lines().skip(2).all(|l| l.contains('|')));
        let back: ExpertLoadReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ensemble_endpoints_are_exact() {
        assert_eq!(ensemble_identity_check(0.0, 1).unwrap(), 0.0);
        assert_eq!(ensemble_identity_check(1.0, 1).unwrap(), 0.0);
        assert!(ensemble_identity_check(0.3, 1).unwrap() < 1e-5);
        assert!(ensemble_identity_check(1.2, 1).is_err());
    }
}
