//! Item ID embeddings and the sequence encoders producing the feature
//! representation of a history.
//!
//! Histories are left-padded id rows of a fixed width; the encoders read the
//! non-padding mask from the ids so that extra leading padding has no effect.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamId, ParamStore, Unary, Var};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Gru,
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub heads: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn gru(hidden_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            kind: EncoderKind::Gru,
            layers: 1,
            heads: 1,
            hidden_size,
            dropout: 0.5,
            max_len,
        }
    }

    pub fn self_attention(hidden_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            kind: EncoderKind::SelfAttention,
            layers: 2,
            heads: 2,
            hidden_size,
            dropout: 0.5,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.layers == 0 {
            return bad("layers", "must be positive".into());
        }
        if self.hidden_size == 0 {
            return bad("hidden_size", "must be positive".into());
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} is outside [0, 1)", self.dropout));
        }
        if self.kind == EncoderKind::SelfAttention && (self.heads == 0 || !self.hidden_size.is_multiple_of(self.heads)) {
            return bad(
                "heads",
                format!("{} heads do not divide hidden size {}", self.heads, self.hidden_size),
            );
        }
        Ok(())
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// Square matrix with orthonormal columns (Gram-Schmidt on a Gaussian draw).
pub fn orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Tensor {
    loop {
        let g = normal_tensor(&[d, d], 1.0, rng);
        let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| g.data()[i * d + j]).collect()).collect();
        let mut ok = true;
        for j in 0..d {
            for k in 0..j {
                let dot: f64 = (0..d).map(|i| cols[j][i] * cols[k][i]).sum();
                for i in 0..d {
                    cols[j][i] -= dot * cols[k][i];
                }
            }
            let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            let mut out = Tensor::zeros(&[d, d]);
            for j in 0..d {
                for i in 0..d {
                    out.data_mut()[i * d + j] = cols[j][i];
                }
            }
            return out;
        }
    }
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: &[usize]) -> Result<()> {
    let got = store.get(id).shape();
    if got != shape {
        return Err(Error::Shape(format!(
            "parameter {} has shape {got:?}, expected {shape:?}",
            store.name(id)
        )));
    }
    Ok(())
}

/// Inverted dropout through a constant mask; identity when `rng` is `None`.
pub(crate) fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut (dyn RngCore + '_)>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask));
    g.mul(x, m)
}

/// The shared item ID embedding matrix; row 0 is the padding row.
#[derive(Clone, Debug)]
pub struct ItemEmbeddingTable {
    id: ParamId,
    rows: usize,
    dim: usize,
}

impl ItemEmbeddingTable {
    pub const PARAM: &'static str = "item_embedding";

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, item_count: usize, dim: usize, rng: &mut R) -> Self {
        let mut table = normal_tensor(&[item_count + 1, dim], INIT_STD, rng);
        table.row_mut(PAD).fill(0.0);
        let id = store.add(Self::PARAM, table);
        ItemEmbeddingTable {
            id,
            rows: item_count + 1,
            dim,
        }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let id = lookup(store, Self::PARAM)?;
        let t = store.get(id);
        if t.shape().len() != 2 || t.shape()[0] < 1 {
            return Err(Error::Shape(format!("item embedding shape {:?}", t.shape())));
        }
        Ok(ItemEmbeddingTable {
            id,
            rows: t.shape()[0],
            dim: t.shape()[1],
        })
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of real items (rows minus the padding row).
    pub fn item_count(&self) -> usize {
        self.rows - 1
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.rows) {
            Some(&id) => Err(Error::IdOutOfRange {
                id,
                max: self.rows - 1,
            }),
            None => Ok(()),
        }
    }

    /// Value-level lookup of one history: `len × d`.
    pub fn embed(&self, store: &ParamStore, history: &[usize]) -> Result<Tensor> {
        self.check_ids(history)?;
        let t = store.get(self.id);
        let mut data = Vec::with_capacity(history.len() * self.dim);
        for &i in history {
            data.extend_from_slice(t.row(i));
        }
        Ok(Tensor::new(vec![history.len(), self.dim], data))
    }

    /// Graph lookup of `batch` histories of width `len`: `[batch, len, d]`.
    pub fn embed_sequence(&self, g: &mut Graph, table: Var, histories: &[usize], batch: usize) -> Result<Var> {
        self.check_ids(histories)?;
        if batch == 0 || !histories.len().is_multiple_of(batch) {
            return Err(Error::Shape(format!(
                "{} ids cannot form {batch} rows",
                histories.len()
            )));
        }
        Ok(g.gather(table, histories, &[batch, histories.len() / batch]))
    }

    /// Drops any gradient on the padding row so it stays zero.
    pub fn freeze_padding(&self, grads: &mut Gradients) {
        if let Some(t) = grads.get_mut(self.id) {
            t.row_mut(PAD).fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
struct GruLayer {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
    b_hn: ParamId,
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
enum Backbone {
    Gru(Vec<GruLayer>),
    SelfAttention { positions: ParamId, blocks: Vec<AttentionBlock> },
}

/// A sequence encoder whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    backbone: Backbone,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl Encoder {
    /// Registers freshly initialized parameters under `encoder.*` names.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        match config.kind {
            EncoderKind::Gru => {
                for l in 0..config.layers {
                    for gate in GATES {
                        store.add(format!("encoder.gru{l}.w_{gate}"), normal_tensor(&[d, d], INIT_STD, rng));
                        store.add(format!("encoder.gru{l}.u_{gate}"), orthogonal(d, rng));
                        store.add(format!("encoder.gru{l}.b_{gate}"), Tensor::zeros(&[d]));
                    }
                    store.add(format!("encoder.gru{l}.b_hn"), Tensor::zeros(&[d]));
                }
            }
            EncoderKind::SelfAttention => {
                store.add("encoder.positions", normal_tensor(&[config.max_len, d], INIT_STD, rng));
                for l in 0..config.layers {
                    let p = format!("encoder.block{l}");
                    for m in ["q", "k", "v", "o"] {
                        store.add(format!("{p}.w{m}"), normal_tensor(&[d, d], INIT_STD, rng));
                        store.add(format!("{p}.b{m}"), Tensor::zeros(&[d]));
                    }
                    for ln in ["ln1", "ln2"] {
                        store.add(format!("{p}.{ln}_g"), Tensor::full(&[d], 1.0));
                        store.add(format!("{p}.{ln}_b"), Tensor::zeros(&[d]));
                    }
                    store.add(format!("{p}.ff1_w"), normal_tensor(&[d, 4 * d], INIT_STD, rng));
                    store.add(format!("{p}.ff1_b"), Tensor::zeros(&[4 * d]));
                    store.add(format!("{p}.ff2_w"), normal_tensor(&[4 * d, d], INIT_STD, rng));
                    store.add(format!("{p}.ff2_b"), Tensor::zeros(&[d]));
                }
            }
        }
        Self::bind(config, store)
    }

    /// Resolves the parameters for `config` from `store` by name and checks shapes.
    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = lookup(store, &name)?;
            expect_shape(store, id, shape)?;
            Ok(id)
        };
        let backbone = match config.kind {
            EncoderKind::Gru => {
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let p = format!("encoder.gru{l}");
                    let mut w = [ParamId(0); 3];
                    let mut u = [ParamId(0); 3];
                    let mut b = [ParamId(0); 3];
                    for (k, gate) in GATES.iter().enumerate() {
                        w[k] = get(format!("{p}.w_{gate}"), &[d, d])?;
                        u[k] = get(format!("{p}.u_{gate}"), &[d, d])?;
                        b[k] = get(format!("{p}.b_{gate}"), &[d])?;
                    }
                    let b_hn = get(format!("{p}.b_hn"), &[d])?;
                    layers.push(GruLayer { w, u, b, b_hn });
                }
                Backbone::Gru(layers)
            }
            EncoderKind::SelfAttention => {
                let positions = get("encoder.positions".into(), &[config.max_len, d])?;
                let mut blocks = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let p = format!("encoder.block{l}");
                    let sq = |m: &str| get(format!("{p}.{m}"), &[d, d]);
                    let vec_d = |m: &str| get(format!("{p}.{m}"), &[d]);
                    blocks.push(AttentionBlock {
                        wq: sq("wq")?,
                        bq: vec_d("bq")?,
                        wk: sq("wk")?,
                        bk: vec_d("bk")?,
                        wv: sq("wv")?,
                        bv: vec_d("bv")?,
                        wo: sq("wo")?,
                        bo: vec_d("bo")?,
                        ln1_g: vec_d("ln1_g")?,
                        ln1_b: vec_d("ln1_b")?,
                        ff1_w: get(format!("{p}.ff1_w"), &[d, 4 * d])?,
                        ff1_b: get(format!("{p}.ff1_b"), &[4 * d])?,
                        ff2_w: get(format!("{p}.ff2_w"), &[4 * d, d])?,
                        ff2_b: vec_d("ff2_b")?,
                        ln2_g: vec_d("ln2_g")?,
                        ln2_b: vec_d("ln2_b")?,
                    });
                }
                Backbone::SelfAttention { positions, blocks }
            }
        };
        Ok(Encoder { config, backbone })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Hidden states at every position: `[B, L, d]` for embedded input
    /// `[B, L, d]`. `histories` supplies the padding mask. Dropout is active
    /// only when `rng` is given.
    pub fn forward_all(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        histories: &[usize],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.config.hidden_size || shape[0] * shape[1] != histories.len() {
            return Err(Error::Shape(format!(
                "encoder input {shape:?} with {} ids, hidden size {}",
                histories.len(),
                self.config.hidden_size
            )));
        }
        let (b, l) = (shape[0], shape[1]);
        if let Some(row) = (0..b).find(|&r| histories[r * l..(r + 1) * l].iter().all(|&i| i == PAD)) {
            return Err(Error::Invalid(format!("history row {row} has no items")));
        }
        let p = self.config.dropout;
        let x = dropout(g, input, p, rng.as_deref_mut());
        match &self.backbone {
            Backbone::Gru(layers) => {
                let mut x = x;
                for (k, layer) in layers.iter().enumerate() {
                    x = gru_layer(g, store, layer, x, histories, b, l);
                    if k + 1 < layers.len() {
                        x = dropout(g, x, p, rng.as_deref_mut());
                    }
                }
                Ok(x)
            }
            Backbone::SelfAttention { positions, blocks } => {
                if l > self.config.max_len {
                    let real = (0..b)
                        .map(|r| histories[r * l..(r + 1) * l].iter().filter(|&&i| i != PAD).count())
                        .max()
                        .unwrap_or(0);
                    if real > self.config.max_len {
                        return Err(Error::Shape(format!(
                            "history of {real} items exceeds max_len {}",
                            self.config.max_len
                        )));
                    }
                }
                let d = self.config.hidden_size;
                let (pos_idx, real) = position_indices(histories, b, l);
                let table = g.param(store, *positions);
                let pos = g.gather(table, &pos_idx, &[b, l]);
                let keep = g.constant(row_mask(&real, b, l, d));
                let pos = g.mul(pos, keep);
                let mut x = g.add(x, pos);
                let heads = self.config.heads;
                let mask = attention_mask(&real, b, l, heads);
                for block in blocks {
                    x = attention_block(g, store, block, x, heads, &mask, p, rng.as_deref_mut());
                }
                Ok(x)
            }
        }
    }

    /// The feature representation: the hidden state at the last position, `[B, d]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        histories: &[usize],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let all = self.forward_all(g, store, input, histories, rng)?;
        let l = g.value(all).shape()[1];
        Ok(g.select(all, 1, l - 1))
    }
}

/// Positions counted from the first real item of each row; padding maps to 0.
fn position_indices(histories: &[usize], b: usize, l: usize) -> (Vec<usize>, Vec<bool>) {
    let mut idx = vec![0; b * l];
    let mut real = vec![false; b * l];
    for r in 0..b {
        let mut k = 0;
        for t in 0..l {
            if histories[r * l + t] != PAD {
                idx[r * l + t] = k;
                real[r * l + t] = true;
                k += 1;
            }
        }
    }
    (idx, real)
}

fn row_mask(real: &[bool], b: usize, l: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * l * d);
    for &keep in real {
        data.extend(std::iter::repeat_n(if keep { 1.0 } else { 0.0 }, d));
    }
    Tensor::new(vec![b, l, d], data)
}

/// `[B·h, L, L]`: query i sees key j when j ≤ i and j is an item, and always itself.
fn attention_mask(real: &[bool], b: usize, l: usize, heads: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(b * heads * l * l);
    for r in 0..b {
        for _ in 0..heads {
            for i in 0..l {
                for j in 0..l {
                    m.push(j == i || (j < i && real[r * l + j]));
                }
            }
        }
    }
    m
}

fn gru_layer(g: &mut Graph, store: &ParamStore, layer: &GruLayer, x: Var, histories: &[usize], b: usize, l: usize) -> Var {
    let d = g.value(x).last_dim();
    let mut xs = [x; 3];
    let mut us = [x; 3];
    for k in 0..3 {
        let w = g.param(store, layer.w[k]);
        let bias = g.param(store, layer.b[k]);
        let xw = g.matmul(x, w, false);
        xs[k] = g.add(xw, bias);
        us[k] = g.param(store, layer.u[k]);
    }
    let b_hn = g.param(store, layer.b_hn);
    let mut h = g.constant(Tensor::zeros(&[b, d]));
    let mut outs = Vec::with_capacity(l);
    for t in 0..l {
        let mut m = Tensor::zeros(&[b, d]);
        for r in 0..b {
            if histories[r * l + t] != PAD {
                m.row_mut(r).fill(1.0);
            }
        }
        let xz = g.select(xs[0], 1, t);
        let xr = g.select(xs[1], 1, t);
        let xn = g.select(xs[2], 1, t);
        let hz = g.matmul(h, us[0], false);
        let hr = g.matmul(h, us[1], false);
        let hn = g.matmul(h, us[2], false);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let hn = g.add(hn, b_hn);
        let rhn = g.mul(r, hn);
        let n = g.add(xn, rhn);
        let n = g.tanh(n);
        // h' = n + z (h - n); only rows with an item at t advance
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        let cand = g.add(n, zd);
        let step = g.sub(cand, h);
        let m = g.constant(m);
        let step = g.mul(step, m);
        h = g.add(h, step);
        outs.push(h);
    }
    g.stack(&outs, 1)
}

#[allow(clippy::too_many_arguments)]
fn attention_block(
    g: &mut Graph,
    store: &ParamStore,
    blk: &AttentionBlock,
    x: Var,
    heads: usize,
    mask: &[bool],
    p: f64,
    mut rng: Option<&mut (dyn RngCore + '_)>,
) -> Var {
    let d = g.value(x).last_dim();
    let dh = d / heads;
    let proj = |g: &mut Graph, w: ParamId, bias: ParamId| {
        let w = g.param(store, w);
        let bias = g.param(store, bias);
        let y = g.matmul(x, w, false);
        g.add(y, bias)
    };
    let q = proj(g, blk.wq, blk.bq);
    let k = proj(g, blk.wk, blk.bk);
    let v = proj(g, blk.wv, blk.bv);
    let q = g.split_heads(q, heads);
    let k = g.split_heads(k, heads);
    let v = g.split_heads(v, heads);
    let scores = g.batch_matmul(q, k, true);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = g.softmax(scores, Some(mask.to_vec()));
    let ctx = g.batch_matmul(att, v, false);
    let ctx = g.merge_heads(ctx, heads);
    let wo = g.param(store, blk.wo);
    let bo = g.param(store, blk.bo);
    let out = g.matmul(ctx, wo, false);
    let out = g.add(out, bo);
    let out = dropout(g, out, p, rng.as_deref_mut());
    let res = g.add(x, out);
    let (g1, b1) = (g.param(store, blk.ln1_g), g.param(store, blk.ln1_b));
    let x = g.layer_norm(res, g1, b1, LN_EPS);

    let w1 = g.param(store, blk.ff1_w);
    let fb1 = g.param(store, blk.ff1_b);
    let h = g.matmul(x, w1, false);
    let h = g.add(h, fb1);
    let h = g.unary(h, Unary::Gelu);
    let w2 = g.param(store, blk.ff2_w);
    let fb2 = g.param(store, blk.ff2_b);
    let o = g.matmul(h, w2, false);
    let o = g.add(o, fb2);
    let o = dropout(g, o, p, rng);
    let res = g.add(x, o);
    let (g2, b2) = (g.param(store, blk.ln2_g), g.param(store, blk.ln2_b));
    g.layer_norm(res, g2, b2, LN_EPS)
}
