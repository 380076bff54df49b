//! Graph building blocks shared by the encoder, mask decoder and tracker.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::lora::AdapterSet;
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine projection `y = x·Wᵀ + b`, `W` stored `d_out × d_in`.
///
/// `name` is the projection's stable identity; LoRA adapters attach to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, d_out, d_in, bound), trainable)?;
        let bias =
            if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(1, d_out), trainable)?) } else { None };
        Ok(Linear { name: name.to_string(), weight, bias, d_in, d_out })
    }

    /// Rebinds a projection to parameters already present in `store`.
    pub fn bind(store: &ParamStore, name: &str, bias: bool) -> Result<Self> {
        let weight = store.require(&format!("{name}.weight"))?;
        let bias = if bias { Some(store.require(&format!("{name}.bias"))?) } else { None };
        let (d_out, d_in) = store.get(weight).shape();
        Ok(Linear { name: name.to_string(), weight, bias, d_in, d_out })
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    /// Forward pass; uses the adapted forward when `adapters` holds one for
    /// this projection.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, adapters: Option<&AdapterSet>) -> Var {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul_t(x, w);
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row(y, b);
        }
        if let Some(adapter) = adapters.and_then(|a| a.get(&self.name)) {
            let a = tape.param(store, adapter.a);
            let b = tape.param(store, adapter.b);
            let ax = tape.matmul_t(x, a);
            let bax = tape.matmul_t(ax, b);
            let delta = tape.scale(bax, adapter.scale());
            y = tape.add(y, delta);
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::filled(1, dim, 1.0), trainable)?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(1, dim), trainable)?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.require(&format!("{name}.weight"))?,
            beta: store.require(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention over already-projected
/// `queries (n × d)`, `keys (m × d)` and `values (m × d)`.
pub(crate) fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = tape.value(q).cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * hd, hd), tape.slice_cols(k, h * hd, hd), tape.slice_cols(v, h * hd, hd))
        };
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        outs.push(tape.matmul(attn, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

/// Index map rearranging per-token `p²·c` channel vectors into a per-pixel
/// `(H·W) × c` grid (a pixel shuffle). Token `(gy, gx)` channel
/// `(dy·p + dx)·c + ch` lands on pixel `(gx·p + dx, gy·p + dy)`.
pub(crate) fn pixel_shuffle_index(grid: usize, patch: usize, channels: usize) -> Vec<usize> {
    let size = grid * patch;
    let per_token = patch * patch * channels;
    let mut index = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let (gy, dy, gx, dx) = (y / patch, y % patch, x / patch, x % patch);
            let token = gy * grid + gx;
            for ch in 0..channels {
                index.push(token * per_token + (dy * patch + dx) * channels + ch);
            }
        }
    }
    index
}
