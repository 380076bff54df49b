//! Two-stage video segmentation: the prompted segmenter masks the seed
//! frames, the tracker propagates those masks through the rest.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::VideoSequence;
use crate::error::{Error, Result};
use crate::frame::BinaryMask;
use crate::memtrack::{BankConfig, Tracker};
use crate::metrics::{score_frames, AccuracyMode, Aggregation, FrameScore, SegReport};
use crate::prompt::{bbox_from_mask, BoxPrompt};
use crate::segmenter::Segmenter;

/// Which frames the segmenter handles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedFrames {
    /// Frames `0..k`.
    First(usize),
    Explicit(Vec<usize>),
}

impl Default for SeedFrames {
    fn default() -> Self {
        SeedFrames::First(1)
    }
}

impl SeedFrames {
    /// Sorted, deduplicated seed indices for a video of `len` frames.
    pub fn resolve(&self, len: usize) -> Result<Vec<usize>> {
        let frames = match self {
            SeedFrames::First(k) => {
                if *k == 0 || *k > len {
                    return Err(Error::Config(format!("seed count {k} must be between 1 and the video length {len}")));
                }
                (0..*k).collect()
            }
            SeedFrames::Explicit(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                if v.is_empty() {
                    return Err(Error::Config("no seed frames given".into()));
                }
                if let Some(&bad) = v.iter().find(|&&i| i >= len) {
                    return Err(Error::Config(format!("seed frame {bad} is beyond a {len}-frame video")));
                }
                v
            }
        };
        Ok(frames)
    }
}

/// Where seed-frame box prompts come from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    /// Tight box around the ground-truth mask of each seed frame.
    #[default]
    GtBox,
    /// Boxes in frame coordinates, per seed frame.
    User(BTreeMap<usize, BoxPrompt>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seeds: SeedFrames,
    pub prompts: PromptSource,
    pub bank: BankConfig,
    pub accuracy: AccuracyMode,
    pub aggregation: Aggregation,
    pub dataset: Option<String>,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub id: String,
    pub masks: Vec<BinaryMask>,
    pub seed_frames: Vec<usize>,
    pub scores: Option<Vec<FrameScore>>,
}

impl PipelineOutput {
    pub fn report(&self, cfg: &PipelineConfig) -> Option<Result<SegReport>> {
        self.scores
            .clone()
            .map(|s| SegReport::aggregate(s, cfg.dataset.clone(), cfg.model.clone(), cfg.accuracy, cfg.aggregation))
    }
}

fn seed_prompt(video: &VideoSequence, frame: usize, source: &PromptSource) -> Result<BoxPrompt> {
    let seed_err = |reason: &str| Error::Seed { frame, reason: reason.into() };
    let (h, w) = video.dims();
    let prompt = match source {
        PromptSource::GtBox => {
            let masks = video.masks.as_ref().ok_or_else(|| seed_err("no ground truth and no box given"))?;
            bbox_from_mask(&masks[frame]).map_err(|_| seed_err("ground-truth mask is empty"))?
        }
        PromptSource::User(boxes) => *boxes.get(&frame).ok_or_else(|| seed_err("no box given for this frame"))?,
    };
    prompt.validate(w, h).map_err(|e| seed_err(&e.to_string()))?;
    Ok(prompt)
}

/// Masks every frame of `video` exactly once. `tracker` may be `None` only
/// when every frame is a seed frame.
pub fn run_pipeline(
    video: &VideoSequence,
    segmenter: &Segmenter,
    tracker: Option<&Tracker>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    if video.is_empty() {
        return Err(Error::Validation(format!("sequence {} has no frames", video.id)));
    }
    let seed_frames = cfg.seeds.resolve(video.len())?;
    let (h, w) = video.dims();
    let s = segmenter.image_size();
    let seeds = seed_frames
        .par_iter()
        .map(|&i| {
            let prompt = seed_prompt(video, i, &cfg.prompts)?.rescaled((w, h), (s, s));
            let mask = segmenter.predict(&video.frames[i].resized(s, s), &prompt)?;
            Ok((i, mask.resized(h, w)))
        })
        .collect::<Result<BTreeMap<usize, BinaryMask>>>()?;
    let masks = if seeds.len() == video.len() {
        seeds.into_values().collect()
    } else {
        let tracker = tracker.ok_or_else(|| Error::Config("non-seed frames need a tracker".into()))?;
        tracker.propagate(&video.frames, &seeds, cfg.bank)?
    };
    let scores = video.masks.as_ref().map(|gt| score_frames(&masks, gt, cfg.accuracy)).transpose()?;
    Ok(PipelineOutput { id: video.id.clone(), masks, seed_frames, scores })
}

/// Runs independent sequences in parallel; outputs keep input order.
pub fn run_pipeline_many(
    videos: &[VideoSequence],
    segmenter: &Segmenter,
    tracker: Option<&Tracker>,
    cfg: &PipelineConfig,
) -> Result<Vec<PipelineOutput>> {
    videos.par_iter().map(|v| run_pipeline(v, segmenter, tracker, cfg)).collect()
}

/// One report over every scored frame of `outputs`.
pub fn combined_report(outputs: &[PipelineOutput], cfg: &PipelineConfig) -> Result<SegReport> {
    let scores: Vec<FrameScore> = outputs.iter().filter_map(|o| o.scores.clone()).flatten().collect();
    SegReport::aggregate(scores, cfg.dataset.clone(), cfg.model.clone(), cfg.accuracy, cfg.aggregation)
}
