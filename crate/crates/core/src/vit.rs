//! Miniature ViT image encoder with the layout of SAM's ViT-B encoder:
//! patch embedding, learned absolute positional embedding, pre-norm
//! transformer blocks with separate q/k/v/out projections and a two-layer
//! MLP, and a final layer norm over the token grid.
//!
//! Parameter names are stable (`encoder.block3.attn.q.weight`, ...); the
//! projection names (`encoder.block3.attn.q`) are the LoRA attachment points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::frame::ImageTensor;
use crate::layers::{multi_head_attention, LayerNorm, Linear};
use crate::lora::AdapterSet;
use crate::params::{normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    /// 64-pixel input, 8-pixel patches, 32-dim tokens, 2 blocks of 4 heads.
    pub fn desk() -> Self {
        ViTConfig { image_size: 64, patch_size: 8, embed_dim: 32, depth: 2, num_heads: 4, mlp_ratio: 4.0 }
    }

    /// SAM ViT-B dimensions. Used for parameter accounting; far too large to
    /// train here.
    pub fn vitb() -> Self {
        ViTConfig { image_size: 1024, patch_size: 16, embed_dim: 768, depth: 12, num_heads: 12, mlp_ratio: 4.0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "vitb" => Ok(Self::vitb()),
            other => Err(Error::Config(format!("unknown encoder preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.image_size, self.patch_size, self.embed_dim, self.depth, self.num_heads];
        if positive.contains(&0) || !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("encoder fields must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// `(projection name, d_in, d_out)` for every block projection, in model order.
    pub fn projection_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, hidden) = (self.embed_dim, self.mlp_hidden());
        let mut out = Vec::new();
        for i in 0..self.depth {
            for p in ["q", "k", "v", "out"] {
                out.push((format!("encoder.block{i}.attn.{p}"), d, d));
            }
            out.push((format!("encoder.block{i}.mlp.fc1"), d, hidden));
            out.push((format!("encoder.block{i}.mlp.fc2"), hidden, d));
        }
        out
    }

    /// `(parameter name, entry count)` for every encoder parameter, derived
    /// from the configuration alone.
    pub fn param_shapes(&self) -> Vec<(String, usize)> {
        let d = self.embed_dim;
        let mut out = vec![
            ("encoder.patch_embed.weight".to_string(), d * self.patch_dim()),
            ("encoder.patch_embed.bias".to_string(), d),
            ("encoder.pos_embed.weight".to_string(), self.num_tokens() * d),
        ];
        let projections = self.projection_shapes();
        for i in 0..self.depth {
            let norm = |out: &mut Vec<(String, usize)>, which: &str| {
                out.push((format!("encoder.block{i}.{which}.weight"), d));
                out.push((format!("encoder.block{i}.{which}.bias"), d));
            };
            norm(&mut out, "norm1");
            for (name, d_in, d_out) in &projections[i * 6..i * 6 + 6] {
                if name.ends_with("mlp.fc1") {
                    norm(&mut out, "norm2");
                }
                out.push((format!("{name}.weight"), d_in * d_out));
                out.push((format!("{name}.bias"), *d_out));
            }
        }
        out.push(("encoder.norm.weight".to_string(), d));
        out.push(("encoder.norm.bias".to_string(), d));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub num_heads: usize,
}

impl BlockParams {
    pub fn projections(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.out, &self.fc1, &self.fc2]
    }

    /// Pre-norm block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, adapters: Option<&AdapterSet>) -> Var {
        let h = self.norm1.forward(tape, store, x);
        let q = self.q.forward(tape, store, h, adapters);
        let k = self.k.forward(tape, store, h, adapters);
        let v = self.v.forward(tape, store, h, adapters);
        let attn = multi_head_attention(tape, q, k, v, self.num_heads);
        let attn = self.out.forward(tape, store, attn, adapters);
        let x = tape.add(x, attn);
        let h = self.norm2.forward(tape, store, x);
        let h = self.fc1.forward(tape, store, h, adapters);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h, adapters);
        tape.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitEncoder {
    pub cfg: ViTConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNorm,
}

impl VitEncoder {
    /// Randomly initialised encoder; parameters are added frozen.
    pub fn new(store: &mut ParamStore, cfg: &ViTConfig, seed: u64) -> Result<Self> {
        if cfg.depth > 0 {
            cfg.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(store, &mut rng, "encoder.patch_embed", cfg.patch_dim(), d, true, false)?;
        let pos_embed = store.add("encoder.pos_embed.weight", normal(&mut rng, cfg.num_tokens(), d, 0.02), false)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("encoder.block{i}");
            let norm1 = LayerNorm::new(store, &format!("{p}.norm1"), d, false)?;
            let q = Linear::new(store, &mut rng, &format!("{p}.attn.q"), d, d, true, false)?;
            let k = Linear::new(store, &mut rng, &format!("{p}.attn.k"), d, d, true, false)?;
            let v = Linear::new(store, &mut rng, &format!("{p}.attn.v"), d, d, true, false)?;
            let out = Linear::new(store, &mut rng, &format!("{p}.attn.out"), d, d, true, false)?;
            let norm2 = LayerNorm::new(store, &format!("{p}.norm2"), d, false)?;
            let fc1 = Linear::new(store, &mut rng, &format!("{p}.mlp.fc1"), d, cfg.mlp_hidden(), true, false)?;
            let fc2 = Linear::new(store, &mut rng, &format!("{p}.mlp.fc2"), cfg.mlp_hidden(), d, true, false)?;
            blocks.push(BlockParams { norm1, q, k, v, out, norm2, fc1, fc2, num_heads: cfg.num_heads });
        }
        let norm = LayerNorm::new(store, "encoder.norm", d, false)?;
        Ok(VitEncoder { cfg: cfg.clone(), patch_embed, pos_embed, blocks, norm })
    }

    /// Rebinds to encoder parameters already in `store` (e.g. from a checkpoint).
    pub fn bind(store: &ParamStore, cfg: &ViTConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("encoder.block{i}");
            blocks.push(BlockParams {
                norm1: LayerNorm::bind(store, &format!("{p}.norm1"))?,
                q: Linear::bind(store, &format!("{p}.attn.q"), true)?,
                k: Linear::bind(store, &format!("{p}.attn.k"), true)?,
                v: Linear::bind(store, &format!("{p}.attn.v"), true)?,
                out: Linear::bind(store, &format!("{p}.attn.out"), true)?,
                norm2: LayerNorm::bind(store, &format!("{p}.norm2"))?,
                fc1: Linear::bind(store, &format!("{p}.mlp.fc1"), true)?,
                fc2: Linear::bind(store, &format!("{p}.mlp.fc2"), true)?,
                num_heads: cfg.num_heads,
            });
        }
        let enc = VitEncoder {
            cfg: cfg.clone(),
            patch_embed: Linear::bind(store, "encoder.patch_embed", true)?,
            pos_embed: store.require("encoder.pos_embed.weight")?,
            blocks,
            norm: LayerNorm::bind(store, "encoder.norm")?,
        };
        for (name, n) in cfg.param_shapes() {
            let id = store.require(&name)?;
            if store.get(id).len() != n {
                return Err(Error::Checkpoint(format!("{name} has {} entries, expected {n}", store.get(id).len())));
            }
        }
        Ok(enc)
    }

    pub fn projections(&self) -> Vec<&Linear> {
        self.blocks.iter().flat_map(|b| b.projections()).collect()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.cfg.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Shape(format!(
                "encoder expects {s}x{s} images, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Patch tokens plus positional embedding, `N × d`.
    pub fn patchify_graph(&self, tape: &mut Tape, store: &ParamStore, image: &ImageTensor) -> Result<Var> {
        self.check_image(image)?;
        let patches = tape.constant(image.patches(self.cfg.patch_size, None)?);
        let tokens = self.patch_embed.forward(tape, store, patches, None);
        let pos = tape.param(store, self.pos_embed);
        Ok(tape.add(tokens, pos))
    }

    /// Final-normed token grid, `N × d`.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &ImageTensor,
        adapters: Option<&AdapterSet>,
    ) -> Result<Var> {
        let mut x = self.patchify_graph(tape, store, image)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, adapters);
        }
        Ok(self.norm.forward(tape, store, x))
    }
}

/// Spatial embedding: `grid² × d` tokens in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid {
    pub grid: usize,
    pub tokens: Tensor,
}

impl EmbeddingGrid {
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Feature vector at grid cell `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.tokens.row(row * self.grid + col)
    }
}

pub fn patchify(image: &ImageTensor, store: &ParamStore, encoder: &VitEncoder) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = encoder.patchify_graph(&mut tape, store, image)?;
    Ok(tape.value(v).clone())
}

/// One transformer block on an `N × d` token grid.
pub fn block_forward(
    x: &Tensor,
    store: &ParamStore,
    block: &BlockParams,
    adapters: Option<&AdapterSet>,
) -> Result<Tensor> {
    let d = block.q.d_in;
    if x.cols() != d {
        return Err(Error::Shape(format!("block expects {d}-dim tokens, got {}", x.cols())));
    }
    if block.num_heads == 0 || d % block.num_heads != 0 {
        return Err(Error::Shape(format!("{d}-dim tokens cannot split into {} heads", block.num_heads)));
    }
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, store, xv, adapters);
    let y = tape.value(y).clone();
    if !y.is_finite() {
        return Err(Error::Numeric("transformer block output".into()));
    }
    Ok(y)
}

pub fn encode_image(
    image: &ImageTensor,
    store: &ParamStore,
    encoder: &VitEncoder,
    adapters: Option<&AdapterSet>,
) -> Result<EmbeddingGrid> {
    let mut tape = Tape::inference();
    let v = encoder.encode_graph(&mut tape, store, image, adapters)?;
    let tokens = tape.value(v).clone();
    if !tokens.is_finite() {
        return Err(Error::Numeric("image embedding".into()));
    }
    Ok(EmbeddingGrid { grid: encoder.cfg.grid(), tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::target_patterns;
    use rand::Rng;

    fn random_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(size, size, (0..size * size * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn zero_all(store: &mut ParamStore, prefix: &str) {
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
        for id in ids {
            let (r, c) = store.get(id).shape();
            store.assign(id, Tensor::zeros(r, c)).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::desk().validate().is_ok());
        assert!(ViTConfig::vitb().validate().is_ok());
        assert!(ViTConfig { image_size: 60, ..ViTConfig::desk() }.validate().is_err());
        assert!(ViTConfig { num_heads: 5, ..ViTConfig::desk() }.validate().is_err());
        assert!(ViTConfig { depth: 0, ..ViTConfig::desk() }.validate().is_err());
        assert!(ViTConfig::preset("vitb").is_ok());
        assert!(ViTConfig::preset("huge").is_err());
    }

    #[test]
    fn patchify_zero_everything_gives_zero_grid() {
        let cfg = ViTConfig::desk();
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 0).unwrap();
        zero_all(&mut store, "encoder.p");
        let t = patchify(&ImageTensor::filled(64, 64, 0.0), &store, &enc).unwrap();
        assert_eq!(t.shape(), (64, 32));
        assert!(t.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn patchify_hand_dot_product() {
        // 2x2 image, one patch, d = 1, all-ones projection
        let cfg = ViTConfig { image_size: 2, patch_size: 2, embed_dim: 1, depth: 1, num_heads: 1, mlp_ratio: 1.0 };
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 0).unwrap();
        store.assign(enc.patch_embed.weight, Tensor::filled(1, 12, 1.0)).unwrap();
        store.assign(enc.pos_embed, Tensor::zeros(1, 1)).unwrap();
        let t = patchify(&ImageTensor::filled(2, 2, 0.5), &store, &enc).unwrap();
        assert_eq!(t.data(), &[6.0]);
    }

    #[test]
    fn patchify_token_count_and_shape_errors() {
        let cfg = ViTConfig { image_size: 32, ..ViTConfig::desk() };
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 0).unwrap();
        assert_eq!(patchify(&random_image(32, 1), &store, &enc).unwrap().rows(), 16);
        assert!(matches!(patchify(&random_image(64, 1), &store, &enc), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_block_is_identity() {
        let cfg = ViTConfig::desk();
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 5).unwrap();
        zero_all(&mut store, "encoder.block0.attn");
        zero_all(&mut store, "encoder.block0.mlp");
        let x = normal(&mut ChaCha8Rng::seed_from_u64(1), 64, 32, 1.0);
        let y = block_forward(&x, &store, &enc.blocks[0], None).unwrap();
        assert_eq!(x, y);
    }

    /// Independent dense-matrix evaluation of a single-head pre-norm block.
    fn oracle_block(x: &[[f64; 2]; 2], w: &HandWeights) -> [[f64; 2]; 2] {
        fn ln(r: [f64; 2]) -> [f64; 2] {
            let m = (r[0] + r[1]) / 2.0;
            let var = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
            let s = 1.0 / (var + 1e-5).sqrt();
            [(r[0] - m) * s, (r[1] - m) * s]
        }
        fn lin(r: [f64; 2], m: &[[f64; 2]; 2], b: [f64; 2]) -> [f64; 2] {
            [m[0][0] * r[0] + m[0][1] * r[1] + b[0], m[1][0] * r[0] + m[1][1] * r[1] + b[1]]
        }
        fn gelu(v: f64) -> f64 {
            0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        }
        let h = [ln(x[0]), ln(x[1])];
        let q = [lin(h[0], &w.q, w.bias), lin(h[1], &w.q, w.bias)];
        let k = [lin(h[0], &w.k, w.bias), lin(h[1], &w.k, w.bias)];
        let v = [lin(h[0], &w.v, w.bias), lin(h[1], &w.v, w.bias)];
        let mut x1 = *x;
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
            let z = s[0].exp() + s[1].exp();
            let p = [s[0].exp() / z, s[1].exp() / z];
            let a = [p[0] * v[0][0] + p[1] * v[1][0], p[0] * v[0][1] + p[1] * v[1][1]];
            let o = lin(a, &w.out, w.bias);
            x1[i] = [x[i][0] + o[0], x[i][1] + o[1]];
        }
        let mut x2 = x1;
        for i in 0..2 {
            let h = ln(x1[i]);
            let f = lin(h, &w.fc1, w.bias);
            let f = [gelu(f[0]), gelu(f[1])];
            let f = lin(f, &w.fc2, w.bias);
            x2[i] = [x1[i][0] + f[0], x1[i][1] + f[1]];
        }
        x2
    }

    struct HandWeights {
        q: [[f64; 2]; 2],
        k: [[f64; 2]; 2],
        v: [[f64; 2]; 2],
        out: [[f64; 2]; 2],
        fc1: [[f64; 2]; 2],
        fc2: [[f64; 2]; 2],
        bias: [f64; 2],
    }

    #[test]
    fn tiny_block_matches_dense_oracle() {
        let cfg = ViTConfig { image_size: 2, patch_size: 1, embed_dim: 2, depth: 1, num_heads: 1, mlp_ratio: 1.0 };
        let w = HandWeights {
            q: [[0.3, -0.2], [0.1, 0.4]],
            k: [[-0.5, 0.2], [0.6, 0.1]],
            v: [[0.2, 0.7], [-0.3, 0.5]],
            out: [[0.4, -0.1], [0.2, 0.3]],
            fc1: [[0.9, -0.4], [0.3, 0.8]],
            fc2: [[-0.6, 0.2], [0.5, 0.1]],
            bias: [0.05, -0.02],
        };
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 0).unwrap();
        let b = &enc.blocks[0];
        let t = |m: [[f64; 2]; 2]| Tensor::from_rows(&[m[0].to_vec(), m[1].to_vec()]).unwrap();
        for (lin, m) in [(&b.q, w.q), (&b.k, w.k), (&b.v, w.v), (&b.out, w.out), (&b.fc1, w.fc1), (&b.fc2, w.fc2)] {
            store.assign(lin.weight, t(m)).unwrap();
            store.assign(lin.bias.unwrap(), Tensor::from_rows(&[w.bias.to_vec()]).unwrap()).unwrap();
        }
        let x = [[0.7, -1.2], [0.25, 0.9]];
        let got = block_forward(&t(x), &store, b, None).unwrap();
        let want = oracle_block(&x, &w);
        for i in 0..2 {
            for j in 0..2 {
                assert!((got.get(i, j) - want[i][j]).abs() < 1e-10, "{i},{j}");
            }
        }
    }

    #[test]
    fn zero_b_adapters_leave_block_unchanged() {
        let cfg = ViTConfig::desk();
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 2).unwrap();
        let mut adapters = AdapterSet::new();
        let projs = enc.projections();
        adapters.inject(&mut store, &projs, &target_patterns("q,k,v,out,mlp").unwrap(), 3, 6.0, 1).unwrap();
        let x = normal(&mut ChaCha8Rng::seed_from_u64(4), 64, 32, 1.0);
        let plain = block_forward(&x, &store, &enc.blocks[1], None).unwrap();
        let adapted = block_forward(&x, &store, &enc.blocks[1], Some(&adapters)).unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn block_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &ViTConfig::desk(), 0).unwrap();
        assert!(matches!(block_forward(&Tensor::zeros(4, 16), &store, &enc.blocks[0], None), Err(Error::Shape(_))));
        let mut bad = enc.blocks[0].clone();
        bad.num_heads = 5;
        assert!(block_forward(&Tensor::zeros(4, 32), &store, &bad, None).is_err());
    }

    #[test]
    fn non_finite_tokens_are_a_numeric_error() {
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &ViTConfig::desk(), 0).unwrap();
        let mut x = Tensor::zeros(4, 32);
        x.set(0, 0, f64::INFINITY);
        assert!(matches!(block_forward(&x, &store, &enc.blocks[0], None), Err(Error::Numeric(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::inference();
        let q = tape.constant(normal(&mut rng, 16, 8, 3.0));
        let k = tape.constant(normal(&mut rng, 16, 8, 3.0));
        let s = tape.matmul_t(q, k);
        let s = tape.scale(s, 1.0 / 8f64.sqrt());
        let p = tape.softmax(s);
        for r in 0..16 {
            assert!((tape.value(p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_zero_is_layer_normed_patch_tokens() {
        let cfg = ViTConfig { depth: 0, ..ViTConfig::desk() };
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 3).unwrap();
        let img = random_image(64, 3);
        let grid = encode_image(&img, &store, &enc, None).unwrap();
        let tokens = patchify(&img, &store, &enc).unwrap();
        let mut tape = Tape::inference();
        let t = tape.constant(tokens);
        let ln = enc.norm.forward(&mut tape, &store, t);
        assert_eq!(&grid.tokens, tape.value(ln));
    }

    #[test]
    fn desk_encoding_shape_and_determinism() {
        let cfg = ViTConfig::desk();
        let build = || {
            let mut store = ParamStore::new();
            let enc = VitEncoder::new(&mut store, &cfg, 11).unwrap();
            (store, enc)
        };
        let (s1, e1) = build();
        let (s2, e2) = build();
        let img = random_image(64, 9);
        let g1 = encode_image(&img, &s1, &e1, None).unwrap();
        let g2 = encode_image(&img, &s2, &e2, None).unwrap();
        assert_eq!((g1.grid, g1.tokens.rows(), g1.dim()), (8, 64, 32));
        let bits = |g: &EmbeddingGrid| g.tokens.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn param_shapes_match_constructed_store() {
        let cfg = ViTConfig { depth: 3, ..ViTConfig::desk() };
        let mut store = ParamStore::new();
        let enc = VitEncoder::new(&mut store, &cfg, 0).unwrap();
        let built: Vec<(String, usize)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.len())).collect();
        assert_eq!(built, cfg.param_shapes());
        assert!(VitEncoder::bind(&store, &cfg).unwrap() == enc);
        let projs: Vec<(String, usize, usize)> =
            enc.projections().iter().map(|p| (p.name.clone(), p.d_in, p.d_out)).collect();
        assert_eq!(projs, cfg.projection_shapes());
    }
}
