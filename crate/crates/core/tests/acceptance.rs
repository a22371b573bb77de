//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use xft_core::analysis::{ensemble_identity_check, expert_load_histogram, lambda_sweep, LambdaSweep};
use xft_core::data::TokenizedExample;
use xft_core::merge::{
    ewa_finalize, extract_shared, init_mixing_coefficients, init_unconstrained_coefficients, learn_mixing_coefficients,
    merge_fixed, merge_xft, train_moe_ewa, EwaConfig, MixingCoefficients,
};
use xft_core::moe::{route_shared_normalized, route_standard, upcycle, MoeConfig, MoeLayer};
use xft_core::autograd::Graph;
use xft_core::tensor::{softmax_in_place, Tensor};
use xft_core::train::{eval_loss, sft_train, TrainHyper};
use xft_core::transformer::{attention_forward, embed, ffn_forward, Activation, DenseModel, Ffn, Model, ModelConfig};
use xft_core::verify::{
    ewa_oracle_deviation, gate_sum_deviation, init_equivalence, jitter, logit_gap, mixing_gradient_check,
    model_gradient_check, random_dense, random_sequences, synthetic_split,
};
use xft_core::Result;

type Check = fn() -> Result<(bool, String)>;

fn desk_config(max_seq_len: usize) -> ModelConfig {
    ModelConfig { max_seq_len, ..ModelConfig::desk() }
}

fn init_equivalence_grid() -> Result<(bool, String)> {
    let dense = random_dense::<f32>(desk_config(64), 0.1, 11)?;
    let inputs = random_sequences(100, 259, 32, 12);
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for n in [2, 4, 8] {
        for k in [2, 3, 6] {
            if k > n {
                continue;
            }
            let gap = init_equivalence(&dense, &MoeConfig::new(n, k), 100 + n as u64 * 10 + k as u64, &inputs)?;
            worst = worst.max(gap);
            cases.push(format!("N{n}K{k}={gap:.1e}"));
        }
    }
    Ok((worst < 1e-5, format!("max gap {worst:.2e} over {} configs ({})", cases.len(), cases.join(" "))))
}

fn scale_mismatch_witness() -> Result<(bool, String)> {
    let dense = random_dense::<f32>(desk_config(64), 0.1, 11)?;
    let inputs = random_sequences(20, 259, 32, 13);
    let raw = MoeConfig { normalization: false, ..MoeConfig::reference() };
    let seeds = 20;
    let mut above = 0;
    let mut smallest = f64::INFINITY;
    for seed in 0..seeds {
        let gap = init_equivalence(&dense, &raw, seed, &inputs)?;
        smallest = smallest.min(gap);
        if gap > 1e-3 {
            above += 1;
        }
    }
    let frac = above as f64 / seeds as f64;
    Ok((frac >= 0.9, format!("{above}/{seeds} router seeds exceed 1e-3 (smallest gap {smallest:.2e})")))
}

fn gate_sum() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (n, k) in [(8, 6), (4, 2), (4, 3), (2, 2), (8, 2)] {
        worst = worst.max(gate_sum_deviation(&MoeConfig::new(n, k), 1000, 7 + n as u64)?);
    }
    Ok((worst <= 1e-5, format!("max |Σg − 1| = {worst:.2e} over 5 configs × 1000 routings")))
}

fn hand_oracle_routing() -> Result<(bool, String)> {
    let s = [f64::NEG_INFINITY, 0.506479, 0.307196, 0.186325];
    let d = route_shared_normalized(&s, 3, true)?;
    let want = [0.493521, 0.278395, 0.228086];
    let e2 = d.gates.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut p = vec![1.0f64, 0.5, 0.0, -0.5];
    softmax_in_place(&mut p);
    let d1 = route_standard(&p, 2)?;
    let e1 = d1.gates.iter().zip([0.45506, 0.27601]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let sel_ok = d.selected == vec![0, 1, 2] && d1.selected == vec![0, 1];
    Ok((sel_ok && e2 < 1e-5 && e1 < 1e-5, format!("shared-normalized err {e2:.1e}, standard top-2 err {e1:.1e}")))
}

fn gradient_correctness() -> Result<(bool, String)> {
    let model = model_gradient_check(5, 50)?;
    let mixing = mixing_gradient_check(5, 50, true)?;
    Ok((
        model < 1e-3 && mixing < 1e-3,
        format!("max rel err: model {model:.2e} (50 probes), mixing logits {mixing:.2e}"),
    ))
}

fn small_moe(seed: u64, n: usize, k: usize) -> Result<(DenseModel, DenseModel)> {
    let config = ModelConfig { vocab_size: 259, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 32, activation: Activation::Gelu };
    let dense = random_dense::<f32>(config, 0.2, seed)?;
    let moe = upcycle(&dense, &MoeConfig { router_init_std: 0.5, ..MoeConfig::new(n, k) }, seed + 1)?;
    Ok((dense, moe))
}

fn merge_identities() -> Result<(bool, String)> {
    let inputs = random_sequences(50, 259, 24, 21);
    let (dense, mut moe) = small_moe(20, 8, 6)?;
    let identical = moe.clone();
    jitter(&mut moe, 0.05, 22, &|n| n.contains(".experts."));
    let cfg = moe.moe.clone().expect("moe");

    let mut ones = init_mixing_coefficients(&cfg, 2, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    ones.logits.iter_mut().flatten().for_each(|x| *x = rng.gen_range(-2.0..2.0));
    let g1 = logit_gap(&merge_xft(&moe, &ones)?, &extract_shared(&moe)?, &inputs)?;

    let mut worst_identical: f64 = 0.0;
    for (lambda, constrained) in [(0.75, true), (0.3, true), (0.6, false)] {
        let mut c = if constrained {
            init_mixing_coefficients(&cfg, 2, lambda)?
        } else {
            init_unconstrained_coefficients(&cfg, 2, lambda)?
        };
        c.logits.iter_mut().flatten().for_each(|x| *x += rng.gen_range(-2.0..2.0));
        worst_identical = worst_identical.max(logit_gap(&merge_xft(&identical, &c)?, &dense, &inputs)?);
    }

    let scalar = |w: f64| {
        Ffn::from_parts([Tensor::<f64>::from_rows(&[&[w]]), Tensor::vector(vec![w]), Tensor::from_rows(&[&[w]]), Tensor::vector(vec![w])])
    };
    let layer = MoeLayer { experts: vec![scalar(1.0), scalar(2.0), scalar(6.0)], router: Tensor::zeros(&[3, 1]) };
    let mean = merge_fixed(&layer, &[1.0 / 3.0; 3])?;
    let e3 = mean.parts().iter().map(|t| (t.data()[0] - 3.0).abs()).fold(0.0, f64::max);
    Ok((
        g1 < 1e-5 && worst_identical < 1e-5 && e3 < 1e-12,
        format!("λ=1 vs shared {g1:.1e}; identical experts vs dense {worst_identical:.1e}; mean{{1,2,6}} err {e3:.1e}"),
    ))
}

fn tiny_corpus(seed: u64, count: usize) -> Result<Vec<TokenizedExample>> {
    Ok(synthetic_split(count + 1, 1, seed, 32)?.0)
}

fn coefficient_simplex() -> Result<(bool, String)> {
    let (_, mut moe) = small_moe(30, 8, 6)?;
    jitter(&mut moe, 0.05, 31, &|n| n.contains(".experts."));
    let data = tiny_corpus(32, 64)?;
    let cfg = moe.moe.clone().expect("moe");
    let lambda = 0.75;
    let init = init_mixing_coefficients(&cfg, 2, lambda)?;
    let hyper = TrainHyper { batch_size: 8, peak_lr: 0.1, warmup_steps: 2, epochs: 1, ..TrainHyper::desk_merge() };
    let (coeffs, report) = learn_mixing_coefficients(&moe, &data, &init, &hyper)?;
    let mut shared_exact = true;
    let mut worst: f64 = 0.0;
    for step in &report.alpha_history {
        for a in step {
            shared_exact &= a[0] == lambda;
            worst = worst.max((a[1..].iter().sum::<f64>() - (1.0 - lambda)).abs());
        }
    }
    let moved = coeffs.logits.iter().flatten().any(|&x| x != 0.0);
    Ok((
        shared_exact && worst < 1e-6 && moved && !report.alpha_history.is_empty(),
        format!("{} steps, α_shared exact: {shared_exact}, max |Σα_normal − (1−λ)| {worst:.1e}", report.alpha_history.len()),
    ))
}

fn ensemble_identity() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..=10 {
        worst = worst.max(ensemble_identity_check(i as f64 / 10.0, 41 + i)?);
    }
    Ok((worst < 1e-5, format!("max deviation {worst:.2e} over α ∈ {{0, 0.1, …, 1}}, 100 inputs each")))
}

fn ewa_oracle() -> Result<(bool, String)> {
    let dev = ewa_oracle_deviation(0.3, 3, [0.0, 1.0])?;

    let (_, mut moe) = small_moe(50, 4, 2)?;
    let data = tiny_corpus(51, 24)?;
    let hyper = TrainHyper { batch_size: 8, epochs: 1, warmup_steps: 1, ..TrainHyper::desk_moe() };
    train_moe_ewa(&mut moe, &data, &hyper, &EwaConfig::reference())?;
    let merged = ewa_finalize(&moe)?;
    let mut gap: f64 = 0.0;
    for (b, mb) in moe.blocks.iter().zip(&merged.blocks) {
        let experts = &b.ffn.as_moe().expect("moe").experts;
        let got = mb.ffn.as_dense().expect("dense").parts();
        for (p, part) in got.iter().enumerate() {
            for (j, &x) in part.data().iter().enumerate() {
                let mean = experts.iter().map(|e| e.parts()[p].data()[j] as f64).sum::<f64>() / experts.len() as f64;
                gap = gap.max((x as f64 - mean).abs());
            }
        }
    }
    Ok((dev < 1e-6 && gap < 1e-6, format!("closed-form deviation {dev:.1e}; ewa merge vs hand mean {gap:.1e}")))
}

struct Smoke {
    baseline_loss: f64,
    moe_loss: f64,
    merged_loss: f64,
    sweep: LambdaSweep,
    soup_shared: Vec<f64>,
    soup_init: f64,
}

fn smoke() -> &'static Result<Smoke> {
    static CELL: OnceLock<Result<Smoke>> = OnceLock::new();
    CELL.get_or_init(run_smoke)
}

fn run_smoke() -> Result<Smoke> {
    let config = desk_config(64);
    let (train, heldout) = synthetic_split(600, 100, 2024, config.max_seq_len)?;
    // Training on a separate corpus stands in for pre-training.
    let (pre, _) = synthetic_split(1000, 1, 7, config.max_seq_len)?;
    let mut base = Model::<Tensor<f32>>::init_dense(config, 1)?;
    sft_train(&mut base, &pre, &TrainHyper::desk_pretrain().seeded(1))?;

    let moe_h = TrainHyper::desk_moe().seeded(3);
    let merge_h = TrainHyper::desk_merge().seeded(4);

    let mut baseline = base.clone();
    sft_train(&mut baseline, &train, &TrainHyper::fairness(&moe_h, &merge_h))?;

    let mut moe = upcycle(&base, &MoeConfig::reference(), 2)?;
    sft_train(&mut moe, &train, &moe_h)?;
    let cfg = moe.moe.clone().expect("moe");
    let init = init_mixing_coefficients(&cfg, moe.blocks.len(), 0.75)?;
    let (coeffs, _) = learn_mixing_coefficients(&moe, &train, &init, &merge_h)?;
    let merged = merge_xft(&moe, &coeffs)?;

    let soup_init_c = init_unconstrained_coefficients(&cfg, moe.blocks.len(), 0.75)?;
    let (soup, _): (MixingCoefficients, _) = learn_mixing_coefficients(&moe, &train, &soup_init_c, &merge_h)?;
    let soup_shared = soup.all_alphas().iter().map(|a| a[0]).collect();

    Ok(Smoke {
        baseline_loss: eval_loss(&baseline, &heldout)?,
        moe_loss: eval_loss(&moe, &heldout)?,
        merged_loss: eval_loss(&merged, &heldout)?,
        sweep: lambda_sweep(&moe, &heldout, &[0.0, 0.25, 0.5, 0.75, 1.0])?,
        soup_shared,
        soup_init: soup_init_c.alphas(0)[0],
    })
}

fn end_to_end() -> Result<(bool, String)> {
    let s = match smoke() {
        Ok(s) => s,
        Err(e) => return Err(xft_core::XftError::Contract(format!("smoke pipeline failed: {e}"))),
    };
    let ratio = s.merged_loss / s.moe_loss;
    let sweep: Vec<String> = s.sweep.points.iter().map(|p| format!("{}:{:.4}", p.lambda, p.loss)).collect();
    let order = if s.sweep.non_increasing {
        "non-increasing in λ"
    } else if s.sweep.non_decreasing {
        "non-decreasing in λ"
    } else {
        "not monotone in λ"
    };
    Ok((
        ratio <= 1.05 && s.sweep.points.len() == 5,
        format!(
            "held-out loss: baseline {:.4}, MoE {:.4}, merged {:.4} (ratio {ratio:.4}); λ sweep [{}] {order}, best λ {}",
            s.baseline_loss,
            s.moe_loss,
            s.merged_loss,
            sweep.join(" "),
            s.sweep.best_lambda
        ),
    ))
}

fn soup_degeneracy() -> Result<(bool, String)> {
    let s = match smoke() {
        Ok(s) => s,
        Err(e) => return Err(xft_core::XftError::Contract(format!("smoke pipeline failed: {e}"))),
    };
    let up = s.soup_shared.iter().filter(|&&a| a > s.soup_init).count();
    let shown: Vec<String> = s.soup_shared.iter().map(|a| format!("{a:.4}")).collect();
    Ok((
        2 * up > s.soup_shared.len(),
        format!("shared coefficient rose in {up}/{} layers (init {:.4}, final [{}])", s.soup_shared.len(), s.soup_init, shown.join(", ")),
    ))
}

/// Inputs to each layer's router (the pre-FFN normalized hidden states),
/// one row per token, from the dense forward pass.
fn router_inputs(model: &DenseModel, corpus: &[Vec<usize>]) -> Result<Vec<Vec<Vec<f64>>>> {
    let m64 = model.cast::<f64>();
    let c = &m64.config;
    let mut out = vec![Vec::new(); c.n_layers];
    for seq in corpus {
        let mut g = Graph::new();
        let m = m64.bind(&mut g, &|_| false);
        let mut x = embed(&mut g, &m, seq)?;
        for (l, block) in m.blocks.iter().enumerate() {
            let u = attention_forward(&mut g, x, &block.ln_attn, &block.attn, c.n_heads)?;
            let y = g.layer_norm(u, block.ln_ffn.gamma, block.ln_ffn.beta)?;
            out[l].extend(g.value(y).data().chunks(c.d_model).map(<[f64]>::to_vec));
            let ffn = block.ffn.as_dense().expect("dense");
            let f = ffn_forward(&mut g, y, ffn, c.activation)?;
            x = g.add(u, f)?;
        }
    }
    Ok(out)
}

/// Router rows whose logits have zero mean, unit variance and no pairwise
/// correlation on the given inputs, so no expert is favoured a priori.
fn whitened_router(inputs: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = inputs[0].len();
    let count = inputs.len() as f64;
    let mean = DVector::from_fn(d, |i, _| inputs.iter().map(|u| u[i]).sum::<f64>() / count);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for u in inputs {
        let c = DVector::from_column_slice(u) - &mean;
        cov += &c * c.transpose();
    }
    cov /= count;
    let eig = SymmetricEigen::new(cov);
    let top = eig.eigenvalues.max();
    // Layer norm outputs span an affine subspace; keep the nondegenerate directions.
    let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > 1e-9 * top).collect();
    let r = keep.len();
    let proj = DMatrix::from_fn(d, r, |i, j| eig.eigenvectors[(i, keep[j])] / eig.eigenvalues[keep[j]].sqrt());
    let w = proj.transpose() * &mean;
    let mut basis: Vec<DVector<f64>> = vec![w.normalize()];
    while basis.len() < n + 1 {
        let mut v = DVector::from_fn(r, |_, _| StandardNormal.sample(rng));
        for b in &basis {
            v -= b * b.dot(&v);
        }
        basis.push(v.normalize());
    }
    basis[1..].iter().map(|q| (&proj * q).iter().copied().collect()).collect()
}

fn routing_report() -> Result<(bool, String)> {
    let dense = random_dense::<f32>(desk_config(64), 0.1, 61)?;
    let cfg = MoeConfig::reference();
    let mut moe = upcycle(&dense, &cfg, 62)?;
    // Identical experts with normalized gates leave the hidden states of the
    // upcycled model equal to the dense ones, whatever the router.
    let calibration = router_inputs(&dense, &random_sequences(200, 259, 64, 63))?;
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for (b, inputs) in moe.blocks.iter_mut().zip(&calibration) {
        let layer = b.ffn.as_moe_mut().expect("moe");
        let rows = whitened_router(inputs, cfg.num_experts, &mut rng);
        for (x, y) in layer.router.data_mut().iter_mut().zip(rows.iter().flatten()) {
            *x = *y as f32;
        }
    }
    let corpus = random_sequences(400, 259, 64, 65);
    let report = expert_load_histogram(&moe, &corpus, "random tokens")?;
    let uniform = 1.0 / (cfg.num_experts - 1) as f64;
    let worst = report.rows.iter().map(|r| (r.proportion - uniform).abs()).fold(0.0, f64::max);
    Ok((
        report.tokens >= 10_000 && worst <= 0.02,
        format!("{} tokens, max |p − 1/7| = {worst:.4}", report.tokens),
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, Check); 12] = [
        (1, "init-equivalence", Duration::from_secs(60), init_equivalence_grid),
        (2, "scale-mismatch witness", Duration::from_secs(600), scale_mismatch_witness),
        (3, "gate-sum", Duration::from_secs(600), gate_sum),
        (4, "hand-oracle routing", Duration::from_secs(600), hand_oracle_routing),
        (5, "gradient correctness", Duration::from_secs(300), gradient_correctness),
        (6, "merge identities", Duration::from_secs(600), merge_identities),
        (7, "coefficient simplex", Duration::from_secs(600), coefficient_simplex),
        (8, "ensemble identity", Duration::from_secs(60), ensemble_identity),
        (9, "ewa oracle", Duration::from_secs(600), ewa_oracle),
        (10, "end-to-end smoke", Duration::from_secs(1800), end_to_end),
        (11, "learned-soup degeneracy", Duration::from_secs(1800), soup_degeneracy),
        (12, "routing report", Duration::from_secs(600), routing_report),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok((pass, detail)) if elapsed <= budget => (pass, detail),
            Ok((_, detail)) => (false, format!("{detail}; over time budget {budget:?}")),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name:<24} {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
