//! The promptable segmenter: image encoder + prompt encoder + mask decoder,
//! sharing one parameter store with any attached LoRA adapters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::frame::{BinaryMask, ImageTensor, MaskLogits};
use crate::lora::{merge, AdapterHeader, AdapterSet, FreezePolicy};
use crate::params::ParamStore;
use crate::prompt::{BoxPrompt, DecoderConfig, MaskDecoder, PromptEncoder};
use crate::vit::{encode_image, EmbeddingGrid, ViTConfig, VitEncoder};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub encoder: ViTConfig,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterHeader {
    pub kind: String,
    pub config: SegmenterConfig,
    pub adapters: Vec<AdapterHeader>,
}

pub const SEGMENTER_KIND: &str = "segmenter";

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    pub store: ParamStore,
    pub encoder: VitEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    pub adapters: AdapterSet,
}

impl Segmenter {
    /// Fresh model: random frozen encoder and prompt encoder (standing in for
    /// pretrained weights), trainable randomly initialised decoder, no adapters.
    pub fn new(cfg: &SegmenterConfig, seed: u64) -> Result<Self> {
        cfg.encoder.validate()?;
        let mut store = ParamStore::new();
        let encoder = VitEncoder::new(&mut store, &cfg.encoder, seed)?;
        let prompt = PromptEncoder::new(&mut store, cfg.encoder.embed_dim, seed.wrapping_add(1))?;
        let decoder = MaskDecoder::new(
            &mut store,
            &cfg.decoder,
            cfg.encoder.embed_dim,
            cfg.encoder.grid(),
            cfg.encoder.patch_size,
            seed.wrapping_add(2),
        )?;
        Ok(Segmenter { cfg: cfg.clone(), store, encoder, prompt, decoder, adapters: AdapterSet::new() })
    }

    pub fn image_size(&self) -> usize {
        self.cfg.encoder.image_size
    }

    pub fn inject_lora(&mut self, patterns: &[String], rank: usize, alpha: f64, seed: u64) -> Result<Vec<String>> {
        let projections = self.encoder.projections();
        self.adapters.inject(&mut self.store, &projections, patterns, rank, alpha, seed)
    }

    pub fn apply_policy(&mut self, policy: &FreezePolicy) -> Result<()> {
        policy.apply(&mut self.store)
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<EmbeddingGrid> {
        encode_image(image, &self.store, &self.encoder, Some(&self.adapters))
    }

    /// Logits graph, `(H·W) × 1`.
    pub fn forward_graph(&self, tape: &mut Tape, image: &ImageTensor, prompt: &BoxPrompt) -> Result<Var> {
        let emb = self.encoder.encode_graph(tape, &self.store, image, Some(&self.adapters))?;
        let tokens = self.prompt.encode_graph(tape, &self.store, prompt, self.image_size())?;
        self.decoder.decode_graph(tape, &self.store, emb, tokens, image)
    }

    pub fn predict_logits(&self, image: &ImageTensor, prompt: &BoxPrompt) -> Result<MaskLogits> {
        let mut tape = Tape::inference();
        let l = self.forward_graph(&mut tape, image, prompt)?;
        let s = self.image_size();
        MaskLogits::new(s, s, tape.value(l).data().to_vec())
    }

    pub fn predict(&self, image: &ImageTensor, prompt: &BoxPrompt) -> Result<BinaryMask> {
        Ok(self.predict_logits(image, prompt)?.binarize())
    }

    /// Copy with every adapter folded into its base projection.
    pub fn merged(&self) -> Result<Segmenter> {
        let mut out = self.clone();
        let projections: Vec<_> = self.encoder.projections().into_iter().cloned().collect();
        for adapter in self.adapters.iter() {
            let proj = projections
                .iter()
                .find(|p| p.name == adapter.target)
                .ok_or_else(|| Error::Config(format!("adapter target {} not in encoder", adapter.target)))?;
            let w = merge(self.store.get(proj.weight), &adapter.factors(&self.store))?;
            out.store.assign(proj.weight, w)?;
        }
        out.adapters = AdapterSet::new();
        Ok(out)
    }

    pub fn header(&self) -> SegmenterHeader {
        SegmenterHeader { kind: SEGMENTER_KIND.into(), config: self.cfg.clone(), adapters: self.adapters.headers() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.header(), &self.store)
    }

    pub fn from_parts(header: SegmenterHeader, store: ParamStore) -> Result<Self> {
        if header.kind != SEGMENTER_KIND {
            return Err(Error::Checkpoint(format!("expected a segmenter checkpoint, found {:?}", header.kind)));
        }
        let cfg = header.config;
        let encoder = VitEncoder::bind(&store, &cfg.encoder)?;
        let prompt = PromptEncoder::bind(&store)?;
        let decoder =
            MaskDecoder::bind(&store, &cfg.decoder, cfg.encoder.embed_dim, cfg.encoder.grid(), cfg.encoder.patch_size)?;
        let adapters = AdapterSet::bind(&store, &header.adapters)?;
        Ok(Segmenter { cfg, store, encoder, prompt, decoder, adapters })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, store) = checkpoint::from_bytes(bytes)?;
        Self::from_parts(header, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = checkpoint::load(path)?;
        Self::from_parts(header, store).map_err(|e| match e {
            Error::Checkpoint(reason) => Error::load(path, reason),
            other => other,
        })
    }
}
