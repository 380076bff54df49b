//! Two-stage surgical video segmentation.
//!
//! A LoRA-adapted promptable ViT segmenter masks the first frames of a
//! video from box prompts; a key–value memory tracker with a permanent
//! memory for those seed frames propagates the masks through the rest.

pub mod autograd;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod finetune;
pub mod frame;
pub mod layers;
pub mod lora;
pub mod memtrack;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod segmenter;
pub mod tensor;
pub mod vit;

pub use error::{Error, ErrorKind, Result};
pub use frame::{BinaryMask, ImageTensor, MaskLogits};
pub use lora::{AdapterSet, FreezePolicy, LoraAdapter, LoraFactors};
pub use params::{ParamId, ParamStore};
pub use prompt::{bbox_from_mask, BoxPrompt};
pub use segmenter::{Segmenter, SegmenterConfig};
pub use tensor::Tensor;
pub use vit::{EmbeddingGrid, ViTConfig};
