//! A small pre-norm decoder-only transformer whose feed-forward slots hold
//! either a dense FFN or an MoE layer.
//!
//! Every parameter container is generic over its leaf type `P`. Storage uses
//! `P = Tensor<T>`; a forward pass binds the same structure to graph handles
//! (`P = Var`) through `map`, so the forward code is written once against
//! `Model<Var>` and gradients come back out through the same traversal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Result, XftError};
use crate::moe::{moe_forward, MoeConfig, MoeLayer, RouterDecision};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Routing decisions of every MoE layer, indexed `[layer][token]`.
pub type RoutingTrace<T> = Vec<Vec<RouterDecision<T>>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    /// Test hook: makes an FFN affine so its output can be computed by hand.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale default: byte vocabulary plus three specials.
    pub fn desk() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(XftError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(XftError::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
}

/// One feed-forward weight set: `down(act(x·W_up + b_up))·W_down + b_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<P> {
    pub w_up: P,
    pub b_up: P,
    pub w_down: P,
    pub b_down: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnSlot<P> {
    Dense(Ffn<P>),
    Moe(MoeLayer<P>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ln_attn: LayerNorm<P>,
    pub attn: Attention<P>,
    pub ln_ffn: LayerNorm<P>,
    pub ffn: FfnSlot<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<P = Tensor<f32>> {
    pub config: ModelConfig,
    /// Present exactly when every FFN slot is an MoE layer.
    pub moe: Option<MoeConfig>,
    pub tok_embed: P,
    pub pos_embed: P,
    pub blocks: Vec<Block<P>>,
    pub ln_final: LayerNorm<P>,
    pub unembed: P,
    pub unembed_bias: P,
}

pub type DenseModel<T = f32> = Model<Tensor<T>>;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P> LayerNorm<P> {
    pub fn map<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> LayerNorm<Q> {
        LayerNorm { gamma: f(&join(prefix, "gamma"), &self.gamma), beta: f(&join(prefix, "beta"), &self.beta) }
    }

    pub fn visit_mut<F: FnMut(&str, &mut P)>(&mut self, prefix: &str, f: &mut F) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl<P> Attention<P> {
    pub fn map<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Attention<Q> {
        Attention {
            wq: f(&join(prefix, "wq"), &self.wq),
            bq: f(&join(prefix, "bq"), &self.bq),
            wk: f(&join(prefix, "wk"), &self.wk),
            bk: f(&join(prefix, "bk"), &self.bk),
            wv: f(&join(prefix, "wv"), &self.wv),
            bv: f(&join(prefix, "bv"), &self.bv),
            wo: f(&join(prefix, "wo"), &self.wo),
            bo: f(&join(prefix, "bo"), &self.bo),
        }
    }

    pub fn visit_mut<F: FnMut(&str, &mut P)>(&mut self, prefix: &str, f: &mut F) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "bq"), &mut self.bq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "bk"), &mut self.bk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "bv"), &mut self.bv);
        f(&join(prefix, "wo"), &mut self.wo);
        f(&join(prefix, "bo"), &mut self.bo);
    }
}

impl<P> Ffn<P> {
    pub fn map<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Ffn<Q> {
        Ffn {
            w_up: f(&join(prefix, "w_up"), &self.w_up),
            b_up: f(&join(prefix, "b_up"), &self.b_up),
            w_down: f(&join(prefix, "w_down"), &self.w_down),
            b_down: f(&join(prefix, "b_down"), &self.b_down),
        }
    }

    pub fn visit_mut<F: FnMut(&str, &mut P)>(&mut self, prefix: &str, f: &mut F) {
        f(&join(prefix, "w_up"), &mut self.w_up);
        f(&join(prefix, "b_up"), &mut self.b_up);
        f(&join(prefix, "w_down"), &mut self.w_down);
        f(&join(prefix, "b_down"), &mut self.b_down);
    }

    /// The four tensors in a fixed order (`w_up, b_up, w_down, b_down`).
    pub fn parts(&self) -> [&P; 4] {
        [&self.w_up, &self.b_up, &self.w_down, &self.b_down]
    }

    pub fn from_parts([w_up, b_up, w_down, b_down]: [P; 4]) -> Self {
        Ffn { w_up, b_up, w_down, b_down }
    }
}

impl<P> FfnSlot<P> {
    pub fn map<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> FfnSlot<Q> {
        match self {
            FfnSlot::Dense(ffn) => FfnSlot::Dense(ffn.map(&join(prefix, "ffn"), f)),
            FfnSlot::Moe(moe) => FfnSlot::Moe(moe.map(&join(prefix, "moe"), f)),
        }
    }

    pub fn visit_mut<F: FnMut(&str, &mut P)>(&mut self, prefix: &str, f: &mut F) {
        match self {
            FfnSlot::Dense(ffn) => ffn.visit_mut(&join(prefix, "ffn"), f),
            FfnSlot::Moe(moe) => moe.visit_mut(&join(prefix, "moe"), f),
        }
    }

    pub fn as_dense(&self) -> Option<&Ffn<P>> {
        match self {
            FfnSlot::Dense(f) => Some(f),
            FfnSlot::Moe(_) => None,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeLayer<P>> {
        match self {
            FfnSlot::Moe(m) => Some(m),
            FfnSlot::Dense(_) => None,
        }
    }

    pub fn as_moe_mut(&mut self) -> Option<&mut MoeLayer<P>> {
        match self {
            FfnSlot::Moe(m) => Some(m),
            FfnSlot::Dense(_) => None,
        }
    }
}

impl<P> Block<P> {
    pub fn map<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Block<Q> {
        Block {
            ln_attn: self.ln_attn.map(&join(prefix, "ln_attn"), f),
            attn: self.attn.map(&join(prefix, "attn"), f),
            ln_ffn: self.ln_ffn.map(&join(prefix, "ln_ffn"), f),
            ffn: self.ffn.map(prefix, f),
        }
    }

    pub fn visit_mut<F: FnMut(&str, &mut P)>(&mut self, prefix: &str, f: &mut F) {
        self.ln_attn.visit_mut(&join(prefix, "ln_attn"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln_ffn.visit_mut(&join(prefix, "ln_ffn"), f);
        self.ffn.visit_mut(prefix, f);
    }

    /// Same block with a different FFN slot; everything else is cloned.
    pub fn with_ffn(&self, ffn: FfnSlot<P>) -> Self
    where
        P: Clone,
    {
        Block { ln_attn: self.ln_attn.clone(), attn: self.attn.clone(), ln_ffn: self.ln_ffn.clone(), ffn }
    }
}

impl<P> Model<P> {
    /// Maps every parameter in a fixed traversal order, naming each one.
    pub fn map<Q, F: FnMut(&str, &P) -> Q>(&self, f: &mut F) -> Model<Q> {
        let tok_embed = f("tok_embed", &self.tok_embed);
        let pos_embed = f("pos_embed", &self.pos_embed);
        let blocks = self.blocks.iter().enumerate().map(|(l, b)| b.map(&format!("blocks.{l}"), f)).collect();
        Model {
            config: self.config.clone(),
            moe: self.moe.clone(),
            tok_embed,
            pos_embed,
            blocks,
            ln_final: self.ln_final.map("ln_final", f),
            unembed: f("unembed", &self.unembed),
            unembed_bias: f("unembed_bias", &self.unembed_bias),
        }
    }

    /// Visits every parameter mutably, in the same order as [`Model::map`].
    pub fn visit_mut<F: FnMut(&str, &mut P)>(&mut self, f: &mut F) {
        f("tok_embed", &mut self.tok_embed);
        f("pos_embed", &mut self.pos_embed);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{l}"), f);
        }
        self.ln_final.visit_mut("ln_final", f);
        f("unembed", &mut self.unembed);
        f("unembed_bias", &mut self.unembed_bias);
    }

    pub fn visit<F: FnMut(&str, &P)>(&self, f: &mut F) {
        let _ = self.map(&mut |name: &str, p: &P| f(name, p));
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

impl<T: Scalar> Ffn<Tensor<T>> {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Ffn {
            w_up: normal_tensor(&[d_model, d_ff], INIT_STD, rng),
            b_up: Tensor::zeros(&[d_ff]),
            w_down: normal_tensor(&[d_ff, d_model], INIT_STD, rng),
            b_down: Tensor::zeros(&[d_model]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.parts().iter().map(|t| t.len()).sum()
    }

    pub fn check_shapes(&self, d_model: usize, d_ff: usize) -> Result<()> {
        let want: [&[usize]; 4] = [&[d_model, d_ff], &[d_ff], &[d_ff, d_model], &[d_model]];
        for (t, w) in self.parts().iter().zip(want) {
            if t.shape() != w {
                return Err(XftError::Shape(format!("FFN tensor {:?}, expected {w:?}", t.shape())));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Model<Tensor<T>> {
    /// Freshly initialized dense model: N(0, 0.02) matrices and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn init_dense(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let ln = |d: usize| LayerNorm { gamma: Tensor::full(&[d], T::one()), beta: Tensor::zeros(&[d]) };
        let tok_embed = normal_tensor(&[v, d], INIT_STD, &mut rng);
        let pos_embed = normal_tensor(&[config.max_seq_len, d], INIT_STD, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = Attention {
                wq: normal_tensor(&[d, d], INIT_STD, &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: normal_tensor(&[d, d], INIT_STD, &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: normal_tensor(&[d, d], INIT_STD, &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: normal_tensor(&[d, d], INIT_STD, &mut rng),
                bo: Tensor::zeros(&[d]),
            };
            let ffn = Ffn::init(d, config.d_ff, &mut rng);
            blocks.push(Block { ln_attn: ln(d), attn, ln_ffn: ln(d), ffn: FfnSlot::Dense(ffn) });
        }
        Ok(Model {
            tok_embed,
            pos_embed,
            blocks,
            ln_final: ln(d),
            unembed: normal_tensor(&[d, v], INIT_STD, &mut rng),
            unembed_bias: Tensor::zeros(&[v]),
            config,
            moe: None,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    pub fn cast<U: Scalar>(&self) -> Model<Tensor<U>> {
        self.map(&mut |_, t: &Tensor<T>| t.cast())
    }

    /// Binds every parameter as a graph leaf; `trainable(name)` decides which are tracked.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Model<Var> {
        self.map(&mut |name, t: &Tensor<T>| g.leaf(t.clone(), trainable(name)))
    }

    /// Checks shapes against the config and that slot kinds are uniform.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, v) = (c.d_model, c.vocab_size);
        let expect = |name: &str, t: &Tensor<T>, want: &[usize]| -> Result<()> {
            if t.shape() != want {
                return Err(XftError::Shape(format!("{name}: shape {:?}, expected {want:?}", t.shape())));
            }
            Ok(())
        };
        expect("tok_embed", &self.tok_embed, &[v, d])?;
        expect("pos_embed", &self.pos_embed, &[c.max_seq_len, d])?;
        expect("unembed", &self.unembed, &[d, v])?;
        expect("unembed_bias", &self.unembed_bias, &[v])?;
        if self.blocks.len() != c.n_layers {
            return Err(XftError::Shape(format!("{} blocks for n_layers {}", self.blocks.len(), c.n_layers)));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in [("wq", &b.attn.wq), ("wk", &b.attn.wk), ("wv", &b.attn.wv), ("wo", &b.attn.wo)] {
                expect(&format!("blocks.{l}.attn.{name}"), t, &[d, d])?;
            }
            match (&b.ffn, &self.moe) {
                (FfnSlot::Dense(f), None) => f.check_shapes(d, c.d_ff)?,
                (FfnSlot::Moe(m), Some(cfg)) => m.check(cfg, d, c.d_ff)?,
                _ => {
                    return Err(XftError::Config(format!(
                        "block {l}: FFN slot kind does not match the model kind"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Logits `[T×vocab]` for one sequence.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, &|_| false);
        let logits = forward(&mut g, &m, tokens, None)?;
        Ok(g.value(logits).clone())
    }

    /// Logits plus the routing decisions of every MoE layer (`[layer][token]`).
    pub fn forward_traced(&self, tokens: &[usize]) -> Result<(Tensor<T>, RoutingTrace<T>)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, &|_| false);
        let mut trace = Vec::new();
        let logits = forward(&mut g, &m, tokens, Some(&mut trace))?;
        Ok((g.value(logits).clone(), trace))
    }

    /// Next-token logits and the masked mean cross-entropy.
    pub fn forward_loss(&self, tokens: &[usize], mask: &[u8]) -> Result<(Tensor<T>, f64)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, &|_| false);
        let (logits, loss) = forward_loss(&mut g, &m, tokens, mask)?;
        Ok((g.value(logits).clone(), g.value(loss).data()[0].as_f64()))
    }

    /// Greedy decoding; ties go to the lowest token id. Stops early at
    /// `stop` or when the context is full.
    pub fn generate_greedy(&self, prompt: &[usize], max_new: usize, stop: Option<usize>) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(XftError::Contract("generation needs a nonempty prompt".into()));
        }
        if prompt.len() > self.config.max_seq_len {
            return Err(XftError::Length { len: prompt.len(), max: self.config.max_seq_len });
        }
        let mut out = prompt.to_vec();
        for _ in 0..max_new {
            if out.len() >= self.config.max_seq_len {
                break;
            }
            let logits = self.forward_logits(&out)?;
            let last = logits.row(out.len() - 1);
            let next = argmax(last);
            out.push(next);
            if Some(next) == stop {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `down(act(up(x)))` with biases and no residual.
pub fn ffn_forward<T: Scalar>(g: &mut Graph<T>, x: Var, ffn: &Ffn<Var>, act: Activation) -> Result<Var> {
    let h = g.matmul(x, ffn.w_up)?;
    let h = g.add_row(h, ffn.b_up)?;
    let h = match act {
        Activation::Gelu => g.gelu(h),
        Activation::Identity => h,
    };
    let o = g.matmul(h, ffn.w_down)?;
    g.add_row(o, ffn.b_down)
}

/// Pre-norm causal self-attention sublayer, residual included.
pub fn attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    ln: &LayerNorm<Var>,
    attn: &Attention<Var>,
    heads: usize,
) -> Result<Var> {
    let y = g.layer_norm(x, ln.gamma, ln.beta)?;
    let proj = |g: &mut Graph<T>, w: Var, b: Var| -> Result<Var> {
        let p = g.matmul(y, w)?;
        g.add_row(p, b)
    };
    let q = proj(g, attn.wq, attn.bq)?;
    let k = proj(g, attn.wk, attn.bk)?;
    let v = proj(g, attn.wv, attn.bv)?;
    let a = g.causal_attention(q, k, v, heads)?;
    let o = g.matmul(a, attn.wo)?;
    let o = g.add_row(o, attn.bo)?;
    g.add(x, o)
}

/// Token + position embeddings for a sequence.
pub fn embed<T: Scalar>(g: &mut Graph<T>, m: &Model<Var>, tokens: &[usize]) -> Result<Var> {
    let c = &m.config;
    if tokens.is_empty() {
        return Err(XftError::Contract("empty token sequence".into()));
    }
    if tokens.len() > c.max_seq_len {
        return Err(XftError::Length { len: tokens.len(), max: c.max_seq_len });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(XftError::Contract(format!("token {bad} outside vocabulary of {}", c.vocab_size)));
    }
    let tok = g.embedding(m.tok_embed, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = g.embedding(m.pos_embed, &positions)?;
    g.add(tok, pos)
}

/// Logits `[T×vocab]`. When `trace` is given, each MoE layer appends its
/// per-token routing decisions.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    m: &Model<Var>,
    tokens: &[usize],
    mut trace: Option<&mut Vec<Vec<RouterDecision<T>>>>,
) -> Result<Var> {
    let c = &m.config;
    let mut x = embed(g, m, tokens)?;
    for block in &m.blocks {
        let u = attention_forward(g, x, &block.ln_attn, &block.attn, c.n_heads)?;
        let y = g.layer_norm(u, block.ln_ffn.gamma, block.ln_ffn.beta)?;
        x = match &block.ffn {
            FfnSlot::Dense(ffn) => {
                let f = ffn_forward(g, y, ffn, c.activation)?;
                g.add(u, f)?
            }
            FfnSlot::Moe(layer) => {
                let cfg = m
                    .moe
                    .as_ref()
                    .ok_or_else(|| XftError::Config("MoE slot in a model without MoE config".into()))?;
                let (h, decisions) = moe_forward(g, y, u, layer, cfg, c.activation)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(decisions);
                }
                h
            }
        };
    }
    let x = g.layer_norm(x, m.ln_final.gamma, m.ln_final.beta)?;
    let logits = g.matmul(x, m.unembed)?;
    g.add_row(logits, m.unembed_bias)
}

/// Number of positions that contribute to the loss: targets `1..T` with mask 1.
pub fn target_count(mask: &[u8]) -> usize {
    mask.iter().skip(1).filter(|&&b| b != 0).count()
}

/// Masked cross-entropy of one sequence, scaled by `1 / denom`.
pub fn sequence_loss<T: Scalar>(
    g: &mut Graph<T>,
    m: &Model<Var>,
    tokens: &[usize],
    mask: &[u8],
    denom: usize,
) -> Result<(Var, Var)> {
    if mask.len() != tokens.len() {
        return Err(XftError::Shape(format!("mask length {} vs {} tokens", mask.len(), tokens.len())));
    }
    if denom == 0 {
        return Err(XftError::Contract("loss mask selects no target positions".into()));
    }
    let logits = forward(g, m, tokens, None)?;
    let t = tokens.len();
    let w = T::of(1.0 / denom as f64);
    let mut targets = vec![0usize; t];
    let mut weights = vec![T::zero(); t];
    for i in 0..t - 1 {
        if mask[i + 1] != 0 {
            targets[i] = tokens[i + 1];
            weights[i] = w;
        }
    }
    let loss = g.cross_entropy(logits, &targets, &weights)?;
    Ok((logits, loss))
}

/// Next-token cross-entropy averaged over positions whose target has mask 1.
pub fn forward_loss<T: Scalar>(g: &mut Graph<T>, m: &Model<Var>, tokens: &[usize], mask: &[u8]) -> Result<(Var, Var)> {
    sequence_loss(g, m, tokens, mask, target_count(mask))
}

/// Mean masked cross-entropy over a batch, averaged over all selected
/// positions in the batch rather than per sequence.
pub fn batch_loss<T: Scalar>(g: &mut Graph<T>, m: &Model<Var>, batch: &[(&[usize], &[u8])]) -> Result<Var> {
    let denom: usize = batch.iter().map(|(_, mask)| target_count(mask)).sum();
    if denom == 0 {
        return Err(XftError::Contract("batch has no target positions".into()));
    }
    let mut total: Option<Var> = None;
    for (tokens, mask) in batch {
        if target_count(mask) == 0 {
            continue;
        }
        let (_, l) = sequence_loss(g, m, tokens, mask, denom)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(total.expect("denom > 0 implies a contributing sequence"))
}
