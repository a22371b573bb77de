//! Invariant checks shared by the `verify` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::ensemble_identity_check;
use crate::autograd::Graph;
use crate::data::{tokenize_corpus, synthetic_corpus, TokenizedExample};
use crate::error::{Result, XftError};
use crate::gradcheck::{finite_diff_check, Probes};
use crate::merge::{ewa_step, extract_shared, init_mixing_coefficients, merge_xft, mixing_logit_gradients, MixingCoefficients};
use crate::moe::{route, upcycle, MoeConfig, MoeLayer};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{batch_loss, Activation, Ffn, Model, ModelConfig};

/// `count` token sequences with lengths in `1..=max_len`.
pub fn random_sequences(count: usize, vocab: usize, max_len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect()
}

/// Random dense model whose weights (layer-norm gains excepted) are drawn
/// with standard deviation `std` instead of the default init scale.
pub fn random_dense<T: Scalar>(config: ModelConfig, std: f64, seed: u64) -> Result<Model<Tensor<T>>> {
    let mut m = Model::<Tensor<T>>::init_dense(config, seed)?;
    let k = T::of(std / crate::transformer::INIT_STD);
    m.visit_mut(&mut |name, t| {
        if !name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|x| *x = *x * k);
        }
    });
    Ok(m)
}

/// Adds independent N(0, std²) noise to every tensor whose name satisfies `select`.
pub fn jitter<T: Scalar>(model: &mut Model<Tensor<T>>, std: f64, seed: u64, select: &dyn Fn(&str) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("valid std");
    model.visit_mut(&mut |name, t| {
        if select(name) {
            t.data_mut().iter_mut().for_each(|x| *x = T::of(x.as_f64() + dist.sample(&mut rng)));
        }
    });
}

/// Max-abs logit difference between two models over `inputs`.
pub fn logit_gap<T: Scalar>(a: &Model<Tensor<T>>, b: &Model<Tensor<T>>, inputs: &[Vec<usize>]) -> Result<f64> {
    let gaps = inputs
        .par_iter()
        .map(|seq| Ok(a.forward_logits(seq)?.max_abs_diff(&b.forward_logits(seq)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// Upcycles `dense` and returns the max-abs logit gap to the original.
pub fn init_equivalence<T: Scalar>(dense: &Model<Tensor<T>>, cfg: &MoeConfig, router_seed: u64, inputs: &[Vec<usize>]) -> Result<f64> {
    let moe = upcycle(dense, cfg, router_seed)?;
    logit_gap(&moe, dense, inputs)
}

/// Largest `|Σ gates − 1|` over `trials` routings of random logits.
pub fn gate_sum_deviation(cfg: &MoeConfig, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 3.0).expect("valid std");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let logits: Vec<f32> = (0..cfg.num_experts).map(|_| dist.sample(&mut rng) as f32).collect();
        worst = worst.max((route(cfg, &logits)?.gate_sum() - 1.0).abs());
    }
    Ok(worst)
}

/// Two-layer, `d_model = 16` double-precision MoE whose experts and routers
/// are all distinct.
pub fn gradcheck_instance(seed: u64) -> Result<Model<Tensor<f64>>> {
    let config = ModelConfig { vocab_size: 24, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 12, activation: Activation::Gelu };
    let dense = random_dense::<f64>(config, 0.3, seed)?;
    let cfg = MoeConfig { router_init_std: 0.5, ..MoeConfig::new(4, 3) };
    let mut moe = upcycle(&dense, &cfg, seed.wrapping_add(1))?;
    jitter(&mut moe, 0.1, seed.wrapping_add(2), &|n| n.contains(".experts."));
    Ok(moe)
}

fn gradcheck_batch(seed: u64) -> Vec<TokenizedExample> {
    let seqs = random_sequences(3, 24, 12, seed);
    seqs.into_iter()
        .map(|tokens| {
            let n = tokens.len();
            let mask = (0..n).map(|i| u8::from(i >= n / 3)).collect();
            TokenizedExample { tokens, mask }
        })
        .filter(|e| crate::transformer::target_count(&e.mask) > 0)
        .collect()
}

/// Worst relative error of full-model loss gradients over `probes` random
/// parameter elements.
pub fn model_gradient_check(seed: u64, probes: usize) -> Result<f64> {
    let m = gradcheck_instance(seed)?;
    let batch = gradcheck_batch(seed);
    let pairs: Vec<(&[usize], &[u8])> = batch.iter().map(|e| e.as_pair()).collect();
    let params: Vec<Tensor<f64>> = m.named_params().into_iter().map(|(_, t)| t).collect();
    let report = finite_diff_check(
        |g, vars| {
            let mut it = vars.iter();
            let bound = m.map(&mut |_, _| *it.next().expect("one var per tensor"));
            batch_loss(g, &bound, &pairs)
        },
        &params,
        1e-5,
        Probes::Random { count: probes, seed },
    )?;
    Ok(report.max_rel_err)
}

/// Batch loss of a model, no gradients.
pub fn batch_loss_value<T: Scalar>(model: &Model<Tensor<T>>, batch: &[TokenizedExample]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &|_| false);
    let pairs: Vec<(&[usize], &[u8])> = batch.iter().map(|e| e.as_pair()).collect();
    let l = batch_loss(&mut g, &bound, &pairs)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Worst relative error of mixing-logit gradients, checked on every logit
/// (or `probes` of them if fewer), against central differences of the
/// merged model's loss.
pub fn mixing_gradient_check(seed: u64, probes: usize, constrained: bool) -> Result<f64> {
    let m = gradcheck_instance(seed)?;
    let cfg = m.moe.clone().expect("MoE instance");
    let batch = gradcheck_batch(seed);
    let mut coeffs = if constrained {
        init_mixing_coefficients(&cfg, m.blocks.len(), 0.75)?
    } else {
        crate::merge::init_unconstrained_coefficients(&cfg, m.blocks.len(), 0.75)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1fa);
    for row in &mut coeffs.logits {
        row.iter_mut().for_each(|x| *x += rng.gen_range(-1.0..1.0));
    }
    let (_, analytic) = mixing_logit_gradients(&m, &batch, &coeffs)?;
    let loss_at = |c: &MixingCoefficients| batch_loss_value(&merge_xft(&m, c)?, &batch);
    let h = 1e-5;
    let sites: Vec<(usize, usize)> =
        (0..coeffs.logits.len()).flat_map(|l| (0..coeffs.logits[l].len()).map(move |i| (l, i))).take(probes).collect();
    let mut worst: f64 = 0.0;
    for (l, i) in sites {
        let mut plus = coeffs.clone();
        plus.logits[l][i] += h;
        let mut minus = coeffs.clone();
        minus.logits[l][i] -= h;
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
        worst = worst.max(crate::gradcheck::rel_err(analytic[l][i], numeric));
    }
    Ok(worst)
}

/// `T` constant-β averaging steps on two scalar experts against the
/// closed form: each deviation from the mean shrinks by `(1−β)^T`.
pub fn ewa_oracle_deviation(beta: f64, steps: i32, start: [f64; 2]) -> Result<f64> {
    let scalar = |w: f64| {
        Ffn::from_parts([Tensor::<f64>::from_rows(&[&[w]]), Tensor::vector(vec![w]), Tensor::from_rows(&[&[w]]), Tensor::vector(vec![w])])
    };
    let mut layer = MoeLayer { experts: vec![scalar(start[0]), scalar(start[1])], router: Tensor::zeros(&[2, 1]) };
    for _ in 0..steps {
        ewa_step(&mut layer, beta)?;
    }
    let mean = (start[0] + start[1]) / 2.0;
    let decay = (1.0 - beta).powi(steps);
    let mut worst: f64 = 0.0;
    for (e, &w0) in layer.experts.iter().zip(&start) {
        let want = mean + (w0 - mean) * decay;
        for t in e.parts() {
            worst = worst.max((t.data()[0] - want).abs());
        }
    }
    Ok(worst)
}

/// Largest ensemble-identity gap over `α ∈ {0, 0.1, …, 1}`.
pub fn ensemble_grid(seed: u64) -> Result<f64> {
    let gaps = (0..=10)
        .into_par_iter()
        .map(|i| ensemble_identity_check(i as f64 / 10.0, seed))
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: Status,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn measured(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        let status = if value < tolerance { Status::Pass } else { Status::Fail };
        Self { name: name.into(), status, value, tolerance, detail: detail.into() }
    }

    fn skipped(name: &str, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: Status::Skip, value: f64::NAN, tolerance: f64::NAN, detail: detail.into() }
    }
}

/// Runs the invariant suite. Model-dependent checks use `model`; dense
/// models are first upcycled with `default_moe`.
pub fn run_suite(model: &Model<Tensor<f32>>, default_moe: &MoeConfig, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let inputs = random_sequences(20, model.config.vocab_size, model.config.max_seq_len.min(32), seed);

    let (moe, cfg) = match &model.moe {
        Some(cfg) => (model.clone(), cfg.clone()),
        None => (upcycle(model, default_moe, seed)?, default_moe.clone()),
    };
    let identical = moe.blocks.iter().all(|b| b.ffn.as_moe().is_some_and(MoeLayer::experts_identical));
    if identical && cfg.shared_expert {
        let gap = logit_gap(&moe, &extract_shared(&moe)?, &inputs)?;
        out.push(CheckOutcome::measured("init-equivalence", gap, 1e-5, "max-abs logit gap, MoE vs dense"));
    } else {
        out.push(CheckOutcome::skipped("init-equivalence", "experts differ or no shared expert"));
    }

    if cfg.shared_expert && cfg.normalization {
        let dev = gate_sum_deviation(&cfg, 1000, seed)?;
        out.push(CheckOutcome::measured("gate-sum", dev, 1e-5, "max |Σ gates − 1| over 1000 routings"));
    } else {
        out.push(CheckOutcome::skipped("gate-sum", "gates are not normalized in this configuration"));
    }

    let g = model_gradient_check(seed, 50)?;
    out.push(CheckOutcome::measured("model-gradients", g, 1e-3, "loss gradients vs central differences, 50 probes"));
    let a = mixing_gradient_check(seed, 50, true)?;
    out.push(CheckOutcome::measured("mixing-gradients", a, 1e-3, "mixing-logit gradients vs central differences"));

    let e = ensemble_grid(seed)?;
    out.push(CheckOutcome::measured("ensemble-identity", e, 1e-5, "max-abs logit gap over α ∈ {0, 0.1, …, 1}"));

    let w = ewa_oracle_deviation(0.3, 3, [0.0, 1.0])?;
    out.push(CheckOutcome::measured("ewa-oracle", w, 1e-6, "3 steps at β = 0.3 vs closed form"));
    Ok(out)
}

/// Held-out split of the synthetic corpus used by smoke runs.
pub fn synthetic_split(count: usize, heldout: usize, seed: u64, max_seq_len: usize) -> Result<(Vec<TokenizedExample>, Vec<TokenizedExample>)> {
    if heldout >= count {
        return Err(XftError::Config(format!("held-out size {heldout} must be below corpus size {count}")));
    }
    let all = tokenize_corpus(&synthetic_corpus(count, seed), max_seq_len);
    let cut = all.len().saturating_sub(heldout);
    Ok((all[..cut].to_vec(), all[cut..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewa_oracle_holds() {
        assert!(ewa_oracle_deviation(0.3, 3, [0.0, 1.0]).unwrap() < 1e-12);
        assert!(ewa_oracle_deviation(0.7, 5, [-2.0, 3.5]).unwrap() < 1e-12);
    }

    #[test]
    fn gate_sums_are_one() {
        assert!(gate_sum_deviation(&MoeConfig::reference(), 200, 1).unwrap() < 1e-6);
        let raw = MoeConfig { normalization: false, ..MoeConfig::reference() };
        assert!(gate_sum_deviation(&raw, 50, 1).unwrap() > 1e-2);
    }

    #[test]
    fn gradient_checks_pass() {
        assert!(model_gradient_check(3, 20).unwrap() < 1e-3);
        assert!(mixing_gradient_check(3, 12, true).unwrap() < 1e-3);
        assert!(mixing_gradient_check(3, 12, false).unwrap() < 1e-3);
    }
}
