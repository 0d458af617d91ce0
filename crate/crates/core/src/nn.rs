//! Primitive layers: dot-product attention, position-wise feed-forward,
//! layer normalisation and token embeddings with sinusoidal positions.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{sinusoid_table, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which key positions each query may attend to.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// One flag per key (`true` = attend).
    pub keys: Option<Vec<bool>>,
    /// Query `i` only sees keys `0..=i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn none() -> Self {
        AttnMask::default()
    }

    pub fn keys(keys: Vec<bool>) -> Self {
        AttnMask {
            keys: Some(keys),
            causal: false,
        }
    }

    pub fn causal() -> Self {
        AttnMask {
            keys: None,
            causal: true,
        }
    }

    fn matrix(&self, n_q: usize, n_k: usize) -> Result<Option<Vec<bool>>> {
        if let Some(k) = &self.keys {
            if k.len() != n_k {
                return Err(invalid(format!("key mask has {} flags for {n_k} keys", k.len())));
            }
            if !k.iter().any(|&b| b) {
                return Err(invalid("attention mask hides every key"));
            }
        }
        if self.keys.is_none() && !self.causal {
            return Ok(None);
        }
        let mut m = vec![true; n_q * n_k];
        for i in 0..n_q {
            for j in 0..n_k {
                let key_ok = self.keys.as_ref().is_none_or(|k| k[j]);
                let causal_ok = !self.causal || j <= i;
                m[i * n_k + j] = key_ok && causal_ok;
            }
        }
        Ok(Some(m))
    }
}

/// `attn(q, K, V) = Σ_i α_i W_v v_i` with `α = softmax((W_q q)ᵀ(W_k k_i))`,
/// applied to every query row. With `heads > 1` the projected width is
/// split into equal slices that attend independently and are concatenated.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
    scaled: bool,
    mask: &AttnMask,
) -> Result<Var> {
    let n_k = g.value(keys).rows();
    if n_k == 0 || g.value(values).rows() != n_k {
        return Err(invalid(format!(
            "keys and values must have the same nonzero length, got {} and {}",
            n_k,
            g.value(values).rows()
        )));
    }
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys, wk)?;
    let v = g.matmul(values, wv)?;
    let d_att = g.value(q).cols();
    if heads == 0 || !d_att.is_multiple_of(heads) {
        return Err(invalid(format!("{heads} heads do not divide width {d_att}")));
    }
    let n_q = g.value(q).rows();
    let mask = mask.matrix(n_q, n_k)?;
    let dh = d_att / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let mut scores = g.matmul_bt(qh, kh)?;
        if scaled {
            scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        }
        let alpha = g.softmax_rows(scores, mask.as_deref())?;
        outs.push(g.matmul(alpha, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Plain-tensor attention weights for one attention model.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub heads: usize,
    pub scaled: bool,
}

/// Single-query attention over plain tensors.
pub fn attn(q: &Tensor, keys: &Tensor, values: &Tensor, params: &AttentionParams, mask: Option<&[bool]>) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let qv = g.constant(q.as_row_matrix());
    let kv = g.constant(keys.clone());
    let vv = g.constant(values.clone());
    let wq = g.constant(params.wq.clone());
    let wk = g.constant(params.wk.clone());
    let wv = g.constant(params.wv.clone());
    let mask = match mask {
        Some(m) => AttnMask::keys(m.to_vec()),
        None => AttnMask::none(),
    };
    let out = attention(&mut g, qv, kv, vv, wq, wk, wv, params.heads, params.scaled, &mask)?;
    let t = g.value(out).clone();
    let n = t.len();
    t.reshape(vec![n])
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
    pub scaled: bool,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_query: usize,
        d_key: usize,
        d_value: usize,
        d_att: usize,
        heads: usize,
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_att.is_multiple_of(heads) {
            return Err(invalid(format!("{heads} heads do not divide width {d_att}")));
        }
        Ok(AttentionBlock {
            wq: store.add(format!("{prefix}.wq"), Tensor::xavier(d_query, d_att, rng))?,
            wk: store.add(format!("{prefix}.wk"), Tensor::xavier(d_key, d_att, rng))?,
            wv: store.add(format!("{prefix}.wv"), Tensor::xavier(d_value, d_att, rng))?,
            heads,
            scaled,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, queries: Var, memory: Var, mask: &AttnMask) -> Result<Var> {
        attention(
            g,
            queries,
            memory,
            memory,
            p[self.wq],
            p[self.wk],
            p[self.wv],
            self.heads,
            self.scaled,
            mask,
        )
    }

    pub fn params(&self, store: &ParamStore) -> AttentionParams {
        AttentionParams {
            wq: store.get(self.wq).clone(),
            wk: store.get(self.wk).clone(),
            wv: store.get(self.wv).clone(),
            heads: self.heads,
            scaled: self.scaled,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// `W_2 max(W_1 x + b_1, 0) + b_2` on every row.
pub fn feed_forward(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

pub fn ffn(x: &Tensor, params: &FfnParams) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.as_row_matrix());
    let w1 = g.constant(params.w1.clone());
    let b1 = g.constant(params.b1.clone());
    let w2 = g.constant(params.w2.clone());
    let b2 = g.constant(params.b2.clone());
    let out = feed_forward(&mut g, xv, w1, b1, w2, b2)?;
    let t = g.value(out).clone();
    if t.len() != x.len() {
        return Err(invalid("feed-forward output width differs from input width"));
    }
    let n = t.len();
    t.reshape(vec![n])
}

#[derive(Clone, Debug)]
pub struct FfnBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnBlock {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_model: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        Ok(FfnBlock {
            w1: store.add(format!("{prefix}.w1"), Tensor::xavier(d_model, d_ff, rng))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?,
            w2: store.add(format!("{prefix}.w2"), Tensor::xavier(d_ff, d_model, rng))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_model]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        feed_forward(g, x, p[self.w1], p[self.b1], p[self.w2], p[self.b2])
    }
}

/// Layer normalisation of a single vector.
pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.as_row_matrix());
    let s = g.constant(scale.clone());
    let b = g.constant(shift.clone());
    let out = g.layer_norm(xv, s, b, LAYER_NORM_EPS)?;
    let n = x.len();
    g.value(out).clone().reshape(vec![n])
}

#[derive(Clone, Debug)]
pub struct LayerNormBlock {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormBlock {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNormBlock {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(&[d], 1.0))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

/// Post-norm self-attention encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: AttentionBlock,
    pub ln1: LayerNormBlock,
    pub ffn: FfnBlock,
    pub ln2: LayerNormBlock,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        scaled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: AttentionBlock::register(store, &format!("{prefix}.self_attn"), d, d, d, d, heads, scaled, rng)?,
            ln1: LayerNormBlock::register(store, &format!("{prefix}.ln1"), d)?,
            ffn: FfnBlock::register(store, &format!("{prefix}.ffn"), d, d_ff, rng)?,
            ln2: LayerNormBlock::register(store, &format!("{prefix}.ln2"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, mask: &AttnMask) -> Result<Var> {
        let a = self.self_attn.forward(g, p, x, x, mask)?;
        let h = g.add(x, a)?;
        let h = self.ln1.forward(g, p, h)?;
        let f = self.ffn.forward(g, p, h)?;
        let o = g.add(h, f)?;
        self.ln2.forward(g, p, o)
    }
}

/// Adds the fixed sinusoidal position term to a `len × d` matrix.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (len, d) = (g.value(x).rows(), g.value(x).cols());
    let pe = g.constant(sinusoid_table(len, d));
    g.add(x, pe)
}

/// Row lookup plus sinusoidal positions.
pub fn embed(g: &mut Graph, table: Var, ids: &[usize]) -> Result<Var> {
    let rows = g.gather(table, ids)?;
    add_positions(g, rows)
}

#[derive(Clone, Debug)]
pub struct EmbeddingBlock {
    pub table: ParamId,
}

impl EmbeddingBlock {
    /// Rows drawn from `N(0, 1)`.
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut R) -> Result<Self> {
        EmbeddingBlock::register_with_std(store, name, vocab, d, 1.0, rng)
    }

    pub fn register_with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EmbeddingBlock {
            table: store.add(name, Tensor::normal(&[vocab, d], std, rng))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, ids: &[usize]) -> Result<Var> {
        embed(g, p[self.table], ids)
    }
}

/// Inverted dropout: keeps each entry with probability `1 - rate` and
/// rescales survivors so the expectation is unchanged.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, rng: &mut R) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask).expect("same shape"));
    g.mul(x, m).expect("same shape")
}
