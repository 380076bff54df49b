//! Box prompts, the prompt encoder and the mask decoder.
//!
//! A box becomes two tokens (top-left and bottom-right corner), each the
//! sinusoidal encoding of its normalised coordinates plus a learned corner
//! type embedding. The decoder prepends a learned mask token, lets the tokens
//! attend to the image embedding and the image attend back to the tokens,
//! then upsamples the prompt-aware embedding to pixel resolution. A 3×3
//! pixel-level skip branch over the frame restores boundary detail the
//! patch grid cannot carry. A hypernetwork on the mask token turns the
//! per-pixel features into one logit per pixel.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::frame::{BinaryMask, ImageTensor, MaskLogits};
use crate::layers::{multi_head_attention, pixel_shuffle_index, LayerNorm, Linear};
use crate::params::{normal, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vit::EmbeddingGrid;

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoxPrompt {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        BoxPrompt { x_min, y_min, x_max, y_max }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max || self.x_max >= width || self.y_max >= height {
            return Err(Error::Shape(format!("box {self} does not fit a {width}x{height} frame")));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    /// Maps the box between frame resolutions.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> BoxPrompt {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let lo = |v: usize, s: f64| (v as f64 * s).floor() as usize;
        let hi = |v: usize, s: f64, lim: usize| (((v + 1) as f64 * s).ceil() as usize).saturating_sub(1).min(lim - 1);
        BoxPrompt {
            x_min: lo(self.x_min, sx),
            y_min: lo(self.y_min, sy),
            x_max: hi(self.x_max, sx, to.0).max(lo(self.x_min, sx)),
            y_max: hi(self.y_max, sy, to.1).max(lo(self.y_min, sy)),
        }
    }
}

impl fmt::Display for BoxPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl FromStr for BoxPrompt {
    type Err = Error;

    /// Parses `x_min,y_min,x_max,y_max`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("box {s:?} must be x_min,y_min,x_max,y_max")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot =
                p.parse().map_err(|_| Error::Config(format!("box coordinate {p:?} is not a non-negative integer")))?;
        }
        let b = BoxPrompt::new(v[0], v[1], v[2], v[3]);
        if b.x_min > b.x_max || b.y_min > b.y_max {
            return Err(Error::Config(format!("box {s:?} has inverted corners")));
        }
        Ok(b)
    }
}

/// Tight inclusive bounding box of the foreground.
pub fn bbox_from_mask(mask: &BinaryMask) -> Result<BoxPrompt> {
    let mut b: Option<BoxPrompt> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                b = Some(match b {
                    None => BoxPrompt::new(x, y, x, y),
                    Some(b) => BoxPrompt::new(b.x_min.min(x), b.y_min.min(y), b.x_max.max(x), b.y_max.max(y)),
                });
            }
        }
    }
    b.ok_or(Error::NoForeground)
}

/// Sinusoidal encoding of a normalised point into `dim` values: the first
/// half encodes `x`, the second `y`; each half is `dim/4` sines followed by
/// `dim/4` cosines at geometrically spaced frequencies from `π` up to
/// `π·image_size/2`.
pub fn sinusoidal_point(x: f64, y: f64, dim: usize, image_size: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("positional encoding needs a multiple of 4 dims, got {dim}")));
    }
    let f = dim / 4;
    let top = (image_size as f64 / 2.0).max(1.0);
    let freqs: Vec<f64> = (0..f)
        .map(|k| {
            let e = if f == 1 { 0.0 } else { k as f64 / (f - 1) as f64 };
            std::f64::consts::PI * top.powf(e)
        })
        .collect();
    let mut out = Vec::with_capacity(dim);
    for coord in [x, y] {
        out.extend(freqs.iter().map(|w| (w * coord).sin()));
        out.extend(freqs.iter().map(|w| (w * coord).cos()));
    }
    Ok(out)
}

/// Encoding of every patch centre of a `grid × grid` token layout.
pub fn dense_positional_encoding(grid: usize, dim: usize, image_size: usize) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let cx = (gx as f64 + 0.5) / grid as f64;
            let cy = (gy as f64 + 0.5) / grid as f64;
            rows.push(sinusoidal_point(cx, cy, dim, image_size)?);
        }
    }
    Tensor::from_rows(&rows)
}

/// Learned corner type embeddings (frozen under the default policy).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    pub corners: [ParamId; 2],
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c0 = store.add("prompt.corner0.weight", normal(&mut rng, 1, dim, 0.1), false)?;
        let c1 = store.add("prompt.corner1.weight", normal(&mut rng, 1, dim, 0.1), false)?;
        Ok(PromptEncoder { corners: [c0, c1], dim })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let c0 = store.require("prompt.corner0.weight")?;
        let c1 = store.require("prompt.corner1.weight")?;
        Ok(PromptEncoder { corners: [c0, c1], dim: store.get(c0).cols() })
    }

    /// Raw corner encodings (before type embeddings), `2 × d`.
    pub fn corner_encodings(&self, prompt: &BoxPrompt, image_size: usize) -> Result<Tensor> {
        prompt.validate(image_size, image_size)?;
        let s = image_size as f64;
        let tl = sinusoidal_point(prompt.x_min as f64 / s, prompt.y_min as f64 / s, self.dim, image_size)?;
        let br = sinusoidal_point(prompt.x_max as f64 / s, prompt.y_max as f64 / s, self.dim, image_size)?;
        Tensor::from_rows(&[tl, br])
    }

    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prompt: &BoxPrompt,
        image_size: usize,
    ) -> Result<Var> {
        let enc = tape.constant(self.corner_encodings(prompt, image_size)?);
        let c0 = tape.param(store, self.corners[0]);
        let c1 = tape.param(store, self.corners[1]);
        let types = tape.concat_rows(&[c0, c1]);
        Ok(tape.add(enc, types))
    }
}

/// Two prompt tokens for `prompt`, `2 × d`.
pub fn encode_box(
    prompt: &BoxPrompt,
    store: &ParamStore,
    encoder: &PromptEncoder,
    image_size: usize,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = encoder.encode_graph(&mut tape, store, prompt, image_size)?;
    Ok(tape.value(v).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Per-pixel feature channels of the upsampling head.
    pub pixel_channels: usize,
    /// Hidden width of the token MLP, as a multiple of the embedding width.
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { pixel_channels: 8, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AttnParams {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttnParams {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<Self> {
        Ok(AttnParams {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), d, d, true, true)?,
        })
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(AttnParams {
            q: Linear::bind(store, &format!("{name}.q"), true)?,
            k: Linear::bind(store, &format!("{name}.k"), true)?,
            v: Linear::bind(store, &format!("{name}.v"), true)?,
            out: Linear::bind(store, &format!("{name}.out"), true)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var, v: Var) -> Var {
        let q = self.q.forward(tape, store, q, None);
        let k = self.k.forward(tape, store, k, None);
        let v = self.v.forward(tape, store, v, None);
        let a = multi_head_attention(tape, q, k, v, 1);
        self.out.forward(tape, store, a, None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub dim: usize,
    pub patch_size: usize,
    pub grid: usize,
    mask_token: ParamId,
    token_to_image: AttnParams,
    norm1: LayerNorm,
    mlp_fc1: Linear,
    mlp_fc2: Linear,
    norm2: LayerNorm,
    image_to_token: AttnParams,
    norm3: LayerNorm,
    upscale: Linear,
    skip: Linear,
    hyper_fc1: Linear,
    hyper_fc2: Linear,
    out_bias: ParamId,
    shuffle: Arc<[usize]>,
    dense_pe: Tensor,
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        dim: usize,
        grid: usize,
        patch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if cfg.pixel_channels == 0 || cfg.mlp_ratio == 0 {
            return Err(Error::Config(format!("decoder fields must be positive: {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.pixel_channels;
        let mask_token = store.add("decoder.mask_token.weight", normal(&mut rng, 1, dim, 1.0), true)?;
        let token_to_image = AttnParams::new(store, &mut rng, "decoder.t2i", dim)?;
        let norm1 = LayerNorm::new(store, "decoder.norm1", dim, true)?;
        let mlp_fc1 = Linear::new(store, &mut rng, "decoder.mlp.fc1", dim, dim * cfg.mlp_ratio, true, true)?;
        let mlp_fc2 = Linear::new(store, &mut rng, "decoder.mlp.fc2", dim * cfg.mlp_ratio, dim, true, true)?;
        let norm2 = LayerNorm::new(store, "decoder.norm2", dim, true)?;
        let image_to_token = AttnParams::new(store, &mut rng, "decoder.i2t", dim)?;
        let norm3 = LayerNorm::new(store, "decoder.norm3", dim, true)?;
        let upscale = Linear::new(store, &mut rng, "decoder.upscale", dim, patch_size * patch_size * c, true, true)?;
        let skip = Linear::new(store, &mut rng, "decoder.skip", 27, c, true, true)?;
        let hyper_fc1 = Linear::new(store, &mut rng, "decoder.hyper.fc1", dim, dim, true, true)?;
        let hyper_fc2 = Linear::new(store, &mut rng, "decoder.hyper.fc2", dim, c, true, true)?;
        let out_bias = store.add("decoder.out.bias", Tensor::zeros(1, 1), true)?;
        Ok(MaskDecoder {
            cfg: cfg.clone(),
            dim,
            patch_size,
            grid,
            mask_token,
            token_to_image,
            norm1,
            mlp_fc1,
            mlp_fc2,
            norm2,
            image_to_token,
            norm3,
            upscale,
            skip,
            hyper_fc1,
            hyper_fc2,
            out_bias,
            shuffle: pixel_shuffle_index(grid, patch_size, c).into(),
            dense_pe: dense_positional_encoding(grid, dim, grid * patch_size)?,
        })
    }

    pub fn bind(store: &ParamStore, cfg: &DecoderConfig, dim: usize, grid: usize, patch_size: usize) -> Result<Self> {
        let c = cfg.pixel_channels;
        let dec = MaskDecoder {
            cfg: cfg.clone(),
            dim,
            patch_size,
            grid,
            mask_token: store.require("decoder.mask_token.weight")?,
            token_to_image: AttnParams::bind(store, "decoder.t2i")?,
            norm1: LayerNorm::bind(store, "decoder.norm1")?,
            mlp_fc1: Linear::bind(store, "decoder.mlp.fc1", true)?,
            mlp_fc2: Linear::bind(store, "decoder.mlp.fc2", true)?,
            norm2: LayerNorm::bind(store, "decoder.norm2")?,
            image_to_token: AttnParams::bind(store, "decoder.i2t")?,
            norm3: LayerNorm::bind(store, "decoder.norm3")?,
            upscale: Linear::bind(store, "decoder.upscale", true)?,
            skip: Linear::bind(store, "decoder.skip", true)?,
            hyper_fc1: Linear::bind(store, "decoder.hyper.fc1", true)?,
            hyper_fc2: Linear::bind(store, "decoder.hyper.fc2", true)?,
            out_bias: store.require("decoder.out.bias")?,
            shuffle: pixel_shuffle_index(grid, patch_size, c).into(),
            dense_pe: dense_positional_encoding(grid, dim, grid * patch_size)?,
        };
        if dec.upscale.d_out != patch_size * patch_size * c || dec.hyper_fc2.d_out != c {
            return Err(Error::Checkpoint("decoder channel count disagrees with its header".into()));
        }
        Ok(dec)
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.patch_size
    }

    /// Logits graph, `(H·W) × 1` in row-major pixel order.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: Var,
        prompt_tokens: Var,
        image: &ImageTensor,
    ) -> Result<Var> {
        let (n, d) = tape.value(embedding).shape();
        if n != self.grid * self.grid || d != self.dim {
            return Err(Error::Shape(format!(
                "decoder expects a {}x{} embedding, got {n}x{d}",
                self.grid * self.grid,
                self.dim
            )));
        }
        if tape.value(prompt_tokens).shape() != (2, self.dim) {
            return Err(Error::Shape(format!("decoder expects 2x{} prompt tokens", self.dim)));
        }
        let size = self.image_size();
        if image.height() != size || image.width() != size {
            return Err(Error::Shape(format!("decoder expects a {size}x{size} frame")));
        }

        let pe = tape.constant(self.dense_pe.clone());
        let mask_token = tape.param(store, self.mask_token);
        let t0 = tape.concat_rows(&[mask_token, prompt_tokens]);
        let keyed = tape.add(embedding, pe);

        // tokens read the image
        let a = self.token_to_image.forward(tape, store, t0, keyed, embedding);
        let t1 = tape.add(t0, a);
        let t1 = self.norm1.forward(tape, store, t1);
        let m = self.mlp_fc1.forward(tape, store, t1, None);
        let m = tape.gelu(m);
        let m = self.mlp_fc2.forward(tape, store, m, None);
        let t2 = tape.add(t1, m);
        let t2 = self.norm2.forward(tape, store, t2);

        // image reads the tokens
        let token_keys = tape.add(t2, t0);
        let a = self.image_to_token.forward(tape, store, keyed, token_keys, t2);
        let e1 = tape.add(embedding, a);
        let e1 = self.norm3.forward(tape, store, e1);

        // pixel features
        let c = self.cfg.pixel_channels;
        let up = self.upscale.forward(tape, store, e1, None);
        let up = tape.gather(up, size * size, c, self.shuffle.clone());
        let nb = tape.constant(image.neighborhoods());
        let sk = self.skip.forward(tape, store, nb, None);
        let feats = tape.add(up, sk);
        let feats = tape.gelu(feats);

        // hypernetwork on the mask token
        let first: Arc<[usize]> = (0..self.dim).collect::<Vec<_>>().into();
        let mt = tape.gather(t2, 1, self.dim, first);
        let h = self.hyper_fc1.forward(tape, store, mt, None);
        let h = tape.gelu(h);
        let w = self.hyper_fc2.forward(tape, store, h, None);
        let logits = tape.matmul_t(feats, w);
        let bias = tape.param(store, self.out_bias);
        Ok(tape.add_row(logits, bias))
    }
}

/// Decodes mask logits at frame resolution.
pub fn decode_mask(
    embedding: &EmbeddingGrid,
    prompt_tokens: &Tensor,
    image: &ImageTensor,
    store: &ParamStore,
    decoder: &MaskDecoder,
) -> Result<MaskLogits> {
    let mut tape = Tape::inference();
    let e = tape.constant(embedding.tokens.clone());
    let p = tape.constant(prompt_tokens.clone());
    let l = decoder.decode_graph(&mut tape, store, e, p, image)?;
    let size = decoder.image_size();
    MaskLogits::new(size, size, tape.value(l).data().to_vec())
}
