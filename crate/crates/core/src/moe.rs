//! Mixture-of-experts feed-forward layers, their routers, and sparse
//! upcycling of a dense model.
//!
//! Expert 0 (documented as expert 1 elsewhere) is the shared expert. Three
//! routing schemes are supported:
//!
//! * shared expert with routing-weight normalization: normal experts get
//!   affinity `s = softmax(uᵀe)` over the `N−1` normal experts, the shared
//!   expert's gate is `1 − s_max`, and the top `K−1` normal experts split
//!   `s_max` through a second softmax over their scores, so the `K` gates
//!   sum to one;
//! * the same without normalization: normal gates are the raw top `K−1`
//!   scores (the gate sum then exceeds one for `K ≥ 3`);
//! * plain top-`K` routing over all `N` experts with no shared expert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Result, XftError};
use crate::tensor::{softmax_in_place, Scalar, Tensor};
use crate::transformer::{ffn_forward, Activation, Ffn, FfnSlot, Model};

pub const SHARED_EXPERT: usize = 0;
pub const DEFAULT_ROUTER_STD: f64 = 0.02;

fn default_true() -> bool {
    true
}

fn default_router_std() -> f64 {
    DEFAULT_ROUTER_STD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    /// Experts activated per token, the shared expert included.
    pub top_k: usize,
    /// Routing-weight normalization; `false` gives the raw-score ablation.
    #[serde(default = "default_true")]
    pub normalization: bool,
    /// `false` drops the shared expert and routes plain top-K over all experts.
    #[serde(default = "default_true")]
    pub shared_expert: bool,
    #[serde(default = "default_router_std")]
    pub router_init_std: f64,
}

impl MoeConfig {
    pub fn new(num_experts: usize, top_k: usize) -> Self {
        Self { num_experts, top_k, normalization: true, shared_expert: true, router_init_std: DEFAULT_ROUTER_STD }
    }

    /// 8 experts, 6 active per token including the shared one.
    pub fn reference() -> Self {
        Self::new(8, 6)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts < 2 {
            return Err(XftError::Config(format!("need at least 2 experts, got {}", self.num_experts)));
        }
        let min_k = if self.shared_expert { 2 } else { 1 };
        if self.top_k < min_k || self.top_k > self.num_experts {
            return Err(XftError::Config(format!(
                "top_k {} must lie in [{min_k}, {}]",
                self.top_k, self.num_experts
            )));
        }
        if !(self.router_init_std >= 0.0 && self.router_init_std.is_finite()) {
            return Err(XftError::Config(format!("router_init_std {} is invalid", self.router_init_std)));
        }
        Ok(())
    }
}

/// `N` expert FFNs plus the router centroid matrix `[N×d_model]` (row `i`
/// is expert `i`'s centroid; the shared expert's row is unused when the
/// shared-expert scheme is active).
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer<P> {
    pub experts: Vec<Ffn<P>>,
    pub router: P,
}

impl<P> MoeLayer<P> {
    pub fn map<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> MoeLayer<Q> {
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| e.map(&format!("{prefix}.experts.{i}"), f))
            .collect();
        MoeLayer { experts, router: f(&format!("{prefix}.router"), &self.router) }
    }

    pub fn visit_mut<F: FnMut(&str, &mut P)>(&mut self, prefix: &str, f: &mut F) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.experts.{i}"), f);
        }
        f(&format!("{prefix}.router"), &mut self.router);
    }
}

impl<T: Scalar> MoeLayer<Tensor<T>> {
    pub fn check(&self, cfg: &MoeConfig, d_model: usize, d_ff: usize) -> Result<()> {
        if self.experts.len() != cfg.num_experts {
            return Err(XftError::Shape(format!(
                "{} experts, config says {}",
                self.experts.len(),
                cfg.num_experts
            )));
        }
        for e in &self.experts {
            e.check_shapes(d_model, d_ff)?;
        }
        if self.router.shape() != [cfg.num_experts, d_model] {
            return Err(XftError::Shape(format!(
                "router {:?}, expected [{}, {d_model}]",
                self.router.shape(),
                cfg.num_experts
            )));
        }
        Ok(())
    }

    /// Router logits `uᵀe_i` for one token.
    pub fn router_logits(&self, u: &[T]) -> Result<Vec<T>> {
        let (n, d) = self.router.dims2();
        if u.len() != d {
            return Err(XftError::Shape(format!("token width {} vs router {:?}", u.len(), self.router.shape())));
        }
        Ok((0..n).map(|i| self.router.row(i).iter().zip(u).map(|(&a, &b)| a * b).sum()).collect())
    }

    /// Affinity scores of one token under the shared-expert scheme.
    pub fn affinity_scores(&self, u: &[T]) -> Result<Vec<T>> {
        Ok(affinity_scores(&self.router_logits(u)?))
    }

    /// True when all experts are bit-identical (a freshly upcycled layer).
    pub fn experts_identical(&self) -> bool {
        self.experts.windows(2).all(|w| w[0] == w[1])
    }
}

/// One token's routing outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision<T = f32> {
    /// Affinity per expert; the shared expert holds `-inf` under the shared scheme.
    pub scores: Vec<T>,
    /// Largest score among routable experts.
    pub s_max: T,
    /// Selected experts: the shared expert first (when present), then the
    /// routed experts by descending score, ties to the lower index.
    pub selected: Vec<usize>,
    /// Gate value of each entry in `selected`.
    pub gates: Vec<T>,
}

impl<T: Scalar> RouterDecision<T> {
    pub fn gate_sum(&self) -> f64 {
        self.gates.iter().map(|g| g.as_f64()).sum()
    }

    pub fn dense_gates(&self, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (&i, &g) in self.selected.iter().zip(&self.gates) {
            out[i] = g;
        }
        out
    }
}

/// Shared-scheme scores from router logits: `-inf` for the shared expert,
/// softmax over the remaining `N−1` logits for normal experts.
pub fn affinity_scores<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut s = logits.to_vec();
    s[SHARED_EXPERT] = T::neg_infinity();
    softmax_in_place(&mut s[1..]);
    s
}

/// Indices of the `k` largest entries of `s[from..]`, descending, ties to the lower index.
fn top_k<T: Scalar>(s: &[T], from: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (from..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Plain top-K routing: `s` is a softmax over all `N` experts and the gates
/// are the raw scores of the top K.
pub fn route_standard<T: Scalar>(s: &[T], k: usize) -> Result<RouterDecision<T>> {
    if k == 0 || k > s.len() {
        return Err(XftError::Config(format!("top_k {k} not in [1, {}]", s.len())));
    }
    let selected = top_k(s, 0, k);
    let gates = selected.iter().map(|&i| s[i]).collect();
    Ok(RouterDecision { scores: s.to_vec(), s_max: s[selected[0]], selected, gates })
}

/// Shared-expert routing over scores from [`affinity_scores`]. With
/// `normalize` the top `K−1` normal experts share `s_max` through a softmax
/// over their scores and the shared expert takes `1 − s_max`; without it the
/// normal gates are the raw scores.
pub fn route_shared_normalized<T: Scalar>(s: &[T], k: usize, normalize: bool) -> Result<RouterDecision<T>> {
    let normals = s.len().saturating_sub(1);
    if k < 2 || k - 1 > normals {
        return Err(XftError::Config(format!(
            "top_k {k} needs the shared expert plus {} of {normals} normal experts",
            k.saturating_sub(1)
        )));
    }
    let routed = top_k(s, 1, k - 1);
    let s_max = s[routed[0]];
    let mut gates = Vec::with_capacity(k);
    gates.push(T::one() - s_max);
    if normalize {
        let mut p: Vec<T> = routed.iter().map(|&i| s[i]).collect();
        softmax_in_place(&mut p);
        gates.extend(p.into_iter().map(|x| x * s_max));
    } else {
        gates.extend(routed.iter().map(|&i| s[i]));
    }
    let mut selected = Vec::with_capacity(k);
    selected.push(SHARED_EXPERT);
    selected.extend(routed);
    Ok(RouterDecision { scores: s.to_vec(), s_max, selected, gates })
}

/// Routes one token from its router logits under `cfg`.
pub fn route<T: Scalar>(cfg: &MoeConfig, logits: &[T]) -> Result<RouterDecision<T>> {
    if cfg.shared_expert {
        route_shared_normalized(&affinity_scores(logits), cfg.top_k, cfg.normalization)
    } else {
        let mut s = logits.to_vec();
        softmax_in_place(&mut s);
        route_standard(&s, cfg.top_k)
    }
}

/// Gradient of one token's dense gate vector with respect to its router
/// logits. The selected set is held fixed (top-k is piecewise constant).
pub fn gate_logit_grad<T: Scalar>(cfg: &MoeConfig, d: &RouterDecision<T>, dgates: &[T]) -> Vec<T> {
    let n = d.scores.len();
    let mut ds = vec![0.0f64; n];
    let range = if cfg.shared_expert {
        let routed = &d.selected[1..];
        let s_max = d.s_max.as_f64();
        let mut dm = -dgates[SHARED_EXPERT].as_f64();
        if cfg.normalization {
            let p: Vec<f64> = d.gates[1..].iter().map(|g| g.as_f64() / s_max).collect();
            let dp: Vec<f64> = routed.iter().map(|&i| dgates[i].as_f64() * s_max).collect();
            dm += routed.iter().zip(&p).map(|(&i, &pj)| dgates[i].as_f64() * pj).sum::<f64>();
            let q: f64 = dp.iter().zip(&p).map(|(a, b)| a * b).sum();
            for ((&i, &pj), &dpj) in routed.iter().zip(&p).zip(&dp) {
                ds[i] += pj * (dpj - q);
            }
        } else {
            for &i in routed {
                ds[i] += dgates[i].as_f64();
            }
        }
        ds[routed[0]] += dm;
        1..n
    } else {
        for &i in &d.selected {
            ds[i] += dgates[i].as_f64();
        }
        0..n
    };
    let s: Vec<f64> = d.scores.iter().map(|x| x.as_f64()).collect();
    let dot: f64 = range.clone().map(|i| ds[i] * s[i]).sum();
    let mut dz = vec![T::zero(); n];
    for i in range {
        dz[i] = T::of(s[i] * (ds[i] - dot));
    }
    dz
}

/// Routes every row of `logits: [T×N]` and records a differentiable dense
/// gate matrix `[T×N]`.
pub fn route_gates<T: Scalar>(g: &mut Graph<T>, logits: Var, cfg: &MoeConfig) -> Result<(Var, Vec<RouterDecision<T>>)> {
    let lv = g.value(logits);
    let (rows, n) = lv.dims2();
    if n != cfg.num_experts {
        return Err(XftError::Shape(format!("router logits {:?} for {} experts", lv.shape(), cfg.num_experts)));
    }
    let mut decisions = Vec::with_capacity(rows);
    let mut dense = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let d = route(cfg, lv.row(r))?;
        dense.extend(d.dense_gates(n));
        decisions.push(d);
    }
    let value = Tensor::new(vec![rows, n], dense)?;
    let saved = decisions.clone();
    let cfg_saved = cfg.clone();
    let rule = Box::new(move |gout: &[T], _: &[&Tensor<T>], _: &Tensor<T>| {
        let mut dz = Vec::with_capacity(gout.len());
        for (r, d) in saved.iter().enumerate() {
            dz.extend(gate_logit_grad(&cfg_saved, d, &gout[r * n..(r + 1) * n]));
        }
        vec![Some(dz)]
    });
    Ok((g.custom(&[logits], value, rule), decisions))
}

/// `residual + Σ_i gates[:, i] ⊙ FFN_i(x)`, skipping experts no row selects.
pub fn combine_experts<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    residual: Var,
    experts: &[Ffn<Var>],
    gates: Var,
    act: Activation,
) -> Result<Var> {
    let (rows, n) = g.value(gates).dims2();
    if n != experts.len() {
        return Err(XftError::Shape(format!("{n} gate columns for {} experts", experts.len())));
    }
    let mut out = residual;
    for (i, expert) in experts.iter().enumerate() {
        let used = (0..rows).any(|r| g.value(gates).at(r, i) != T::zero());
        if !used {
            continue;
        }
        let y = ffn_forward(g, x, expert, act)?;
        let y = g.mul_col(y, gates, i)?;
        out = g.add(out, y)?;
    }
    Ok(out)
}

/// MoE sublayer: routes the normalized input `x`, mixes the selected experts
/// and adds `residual`.
pub fn moe_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    residual: Var,
    layer: &MoeLayer<Var>,
    cfg: &MoeConfig,
    act: Activation,
) -> Result<(Var, Vec<RouterDecision<T>>)> {
    let logits = g.matmul_nt(x, layer.router)?;
    let (gates, decisions) = route_gates(g, logits, cfg)?;
    let out = combine_experts(g, x, residual, &layer.experts, gates, act)?;
    Ok((out, decisions))
}

/// Standalone layer evaluation: `h_t = Σ g_{i,t} FFN_i(u_t) + u_t`.
pub fn moe_layer_forward<T: Scalar>(
    u: &Tensor<T>,
    layer: &MoeLayer<Tensor<T>>,
    cfg: &MoeConfig,
    act: Activation,
) -> Result<(Tensor<T>, Vec<RouterDecision<T>>)> {
    let mut g = Graph::new();
    let x = g.constant(u.clone());
    let bound = layer.map("", &mut |_, t: &Tensor<T>| g.constant(t.clone()));
    let (h, decisions) = moe_forward(&mut g, x, x, &bound, cfg, act)?;
    Ok((g.value(h).clone(), decisions))
}

/// Sparse upcycling: every FFN becomes `N` identical experts, routers are
/// drawn from N(0, router_init_std²) under `seed`, and every other tensor is
/// copied verbatim.
pub fn upcycle<T: Scalar>(dense: &Model<Tensor<T>>, cfg: &MoeConfig, seed: u64) -> Result<Model<Tensor<T>>> {
    cfg.validate()?;
    dense.validate()?;
    if dense.is_moe() {
        return Err(XftError::Config("model is already a mixture of experts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dense.config.d_model;
    let dist = Normal::new(0.0, cfg.router_init_std).map_err(|e| XftError::Config(e.to_string()))?;
    let blocks = dense
        .blocks
        .iter()
        .map(|b| {
            let ffn = b.ffn.as_dense().expect("validated dense model");
            let router_data = (0..cfg.num_experts * d).map(|_| T::of(dist.sample(&mut rng))).collect();
            let router = Tensor::new(vec![cfg.num_experts, d], router_data).expect("router shape");
            b.with_ffn(FfnSlot::Moe(MoeLayer { experts: vec![ffn.clone(); cfg.num_experts], router }))
        })
        .collect();
    Ok(Model {
        config: dense.config.clone(),
        moe: Some(cfg.clone()),
        tok_embed: dense.tok_embed.clone(),
        pos_embed: dense.pos_embed.clone(),
        blocks,
        ln_final: dense.ln_final.clone(),
        unembed: dense.unembed.clone(),
        unembed_bias: dense.unembed_bias.clone(),
    })
}

/// Parameter count of the upcycled model: the dense count plus `N−1` extra
/// FFN copies and an `N×d_model` router per layer.
pub fn upcycled_param_count(dense_params: usize, ffn_params: usize, d_model: usize, layers: usize, n: usize) -> usize {
    dense_params + (n - 1) * ffn_params * layers + n * d_model * layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, Probes};
    use crate::transformer::{DenseModel, ModelConfig};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn equal_logits_give_equal_scores() {
        let s = affinity_scores(&[0.4f64, 0.7, 0.7, 0.7]);
        assert_eq!(s[0], f64::NEG_INFINITY);
        for &x in &s[1..] {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn affinity_example_values() {
        let s = affinity_scores(&[0.0f64, 1.0, 0.5, 0.0]);
        for (a, b) in s[1..].iter().zip([0.506479, 0.307196, 0.186325]) {
            assert!(close(*a, b, 1e-5));
        }
        let z = 1f64.exp() + 0.5f64.exp() + 1.0;
        assert!(close(s[1], 1f64.exp() / z, 1e-15));
    }

    #[test]
    fn standard_routing_example() {
        let mut s = vec![1.0f64, 0.5, 0.0, -0.5];
        softmax_in_place(&mut s);
        let d = route_standard(&s, 2).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert!(close(d.gates[0], 0.45506, 1e-5));
        assert!(close(d.gates[1], 0.27601, 1e-5));
        let z: f64 = [1.0f64, 0.5, 0.0, -0.5].iter().map(|x| x.exp()).sum();
        assert!(close(d.gate_sum(), (1f64.exp() + 0.5f64.exp()) / z, 1e-12));
        let full = route_standard(&s, 4).unwrap();
        assert!(close(full.gate_sum(), 1.0, 1e-12));
        assert!(route_standard(&s, 5).is_err());
    }

    #[test]
    fn standard_routing_saturates() {
        let mut s = vec![80.0f64, 0.0, -1.0];
        softmax_in_place(&mut s);
        let d = route_standard(&s, 2).unwrap();
        assert!(close(d.gates[0], 1.0, 1e-12) && d.gates[1] < 1e-30);
    }

    #[test]
    fn shared_normalized_example() {
        let s = [f64::NEG_INFINITY, 0.506479, 0.307196, 0.186325];
        let d = route_shared_normalized(&s, 3, true).unwrap();
        assert_eq!(d.selected, vec![0, 1, 2]);
        assert!(close(d.gates[0], 0.493521, 1e-5));
        assert!(close(d.gates[1], 0.278395, 1e-5));
        assert!(close(d.gates[2], 0.228086, 1e-5));
        let (a, b) = (0.506479f64.exp(), 0.307196f64.exp());
        assert!(close(d.gates[1], 0.506479 * a / (a + b), 1e-12));
        assert!(close(d.gate_sum(), 1.0, 1e-12));
    }

    #[test]
    fn equal_scores_split_evenly() {
        let s = [f64::NEG_INFINITY, 0.4, 0.4, 0.2];
        let d = route_shared_normalized(&s, 3, true).unwrap();
        assert_eq!(d.gates[1], d.gates[2]);
        assert!(close(d.gates[1], 0.2, 1e-15));
    }

    #[test]
    fn single_routed_expert_gets_s_max() {
        let s = [f64::NEG_INFINITY, 0.1, 0.6, 0.3];
        let d = route_shared_normalized(&s, 2, true).unwrap();
        assert_eq!(d.selected, vec![0, 2]);
        assert_eq!(d.gates[1], 0.6);
        assert_eq!(d.gates[0], 1.0 - 0.6);
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        let s = [f64::NEG_INFINITY, 0.25, 0.25, 0.25, 0.25];
        let d = route_shared_normalized(&s, 3, true).unwrap();
        assert_eq!(d.selected, vec![0, 1, 2]);
    }

    #[test]
    fn shared_routing_rejects_too_many_experts() {
        let s = [f64::NEG_INFINITY, 0.5, 0.5];
        assert!(route_shared_normalized(&s, 4, true).is_err());
        assert!(route_shared_normalized(&s, 1, true).is_err());
    }

    #[test]
    fn raw_gates_overshoot_one() {
        let s = [f64::NEG_INFINITY, 0.506479, 0.307196, 0.186325];
        let d = route_shared_normalized(&s, 3, false).unwrap();
        assert!(close(d.gate_sum(), 1.0 + 0.307196, 1e-12));
    }

    #[test]
    fn two_expert_toy_by_hand() {
        // experts u → 2u and u → 4u, equal gates 0.5, u = 1 → 0.5·2 + 0.5·4 + 1 = 4
        let mk = |w: f64| Ffn::<Tensor<f64>> {
            w_up: Tensor::from_rows(&[&[w]]),
            b_up: Tensor::zeros(&[1]),
            w_down: Tensor::from_rows(&[&[1.0]]),
            b_down: Tensor::zeros(&[1]),
        };
        let layer = MoeLayer { experts: vec![mk(2.0), mk(4.0)], router: Tensor::zeros(&[2, 1]) };
        let cfg = MoeConfig { shared_expert: false, ..MoeConfig::new(2, 2) };
        let (h, d) = moe_layer_forward(&Tensor::from_rows(&[&[1.0]]), &layer, &cfg, Activation::Identity).unwrap();
        assert_eq!(d[0].gates, vec![0.5, 0.5]);
        assert_eq!(h.data(), &[4.0]);
    }

    #[test]
    fn zero_gates_leave_the_residual() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let experts: Vec<Ffn<Var>> =
            (0..3).map(|_| Ffn::<Tensor<f64>>::init(4, 6, &mut rng).map("", &mut |_, t| g.constant(t.clone()))).collect();
        let u = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0, 0.5]]));
        let gates = g.constant(Tensor::zeros(&[2, 3]));
        let h = combine_experts(&mut g, u, u, &experts, gates, Activation::Gelu).unwrap();
        assert_eq!(g.value(h), g.value(u));
    }

    #[test]
    fn identical_experts_factor_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ffn = Ffn::<Tensor<f64>>::init(6, 10, &mut rng);
        let router = Tensor::from_f64(&[4, 6], &(0..24).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let layer = MoeLayer { experts: vec![ffn.clone(); 4], router };
        let cfg = MoeConfig::new(4, 3);
        let u = Tensor::from_f64(&[3, 6], &(0..18).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>()).unwrap();
        let (h, _) = moe_layer_forward(&u, &layer, &cfg, Activation::Gelu).unwrap();

        let mut g = Graph::new();
        let x = g.constant(u.clone());
        let f = ffn.map("", &mut |_, t| g.constant(t.clone()));
        let y = ffn_forward(&mut g, x, &f, Activation::Gelu).unwrap();
        let y = g.add(y, x).unwrap();
        assert!(h.max_abs_diff(g.value(y)) < 1e-12);
    }

    fn check_gate_grads(cfg: MoeConfig) {
        let n = cfg.num_experts;
        let logits = Tensor::<f64>::from_f64(&[3, n], &(0..3 * n).map(|i| (i as f64 * 1.3).sin() * 2.0).collect::<Vec<_>>()).unwrap();
        let weights = Tensor::<f64>::from_f64(&[3, n], &(0..3 * n).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>()).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let (gates, _) = route_gates(g, v[0], &cfg)?;
                let w = g.constant(weights.clone());
                let p = g.mul(gates, w)?;
                Ok(g.sum(p))
            },
            &[logits],
            1e-5,
            Probes::All,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{cfg:?}: {r:?}");
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        check_gate_grads(MoeConfig::new(5, 3));
        check_gate_grads(MoeConfig::new(4, 2));
        check_gate_grads(MoeConfig { normalization: false, ..MoeConfig::new(6, 4) });
        check_gate_grads(MoeConfig { shared_expert: false, ..MoeConfig::new(5, 2) });
    }

    #[test]
    fn upcycle_copies_and_counts() {
        let cfg = ModelConfig { vocab_size: 13, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 12, activation: Activation::Gelu };
        let dense = DenseModel::<f32>::init_dense(cfg, 7).unwrap();
        let moe = upcycle(&dense, &MoeConfig::reference(), 1).unwrap();
        moe.validate().unwrap();
        let ffn_params = dense.blocks[0].ffn.as_dense().unwrap().param_count();
        assert_eq!(moe.param_count(), upcycled_param_count(dense.param_count(), ffn_params, 8, 2, 8));
        for (b, db) in moe.blocks.iter().zip(&dense.blocks) {
            let layer = b.ffn.as_moe().unwrap();
            assert!(layer.experts.iter().all(|e| e == db.ffn.as_dense().unwrap()));
            assert_eq!(b.attn, db.attn);
        }
        assert_eq!(moe.tok_embed, dense.tok_embed);
        assert!(upcycle(&moe, &MoeConfig::reference(), 1).is_err());
        let again = upcycle(&dense, &MoeConfig::reference(), 1).unwrap();
        assert_eq!(again, moe);
    }
}
