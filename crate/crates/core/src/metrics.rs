//! Per-frame IoU / Dice / accuracy and aggregate reports with table rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        gt.expect_dims(pred.height(), pred.width())?;
        let mut c = Counts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    /// `1` when there is no foreground anywhere (empty prediction of an empty target).
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// Mean of foreground and background recall; a class absent from the
    /// target contributes a recall of 1.
    pub fn class_mean_accuracy(&self) -> f64 {
        let recall = |hit: u64, miss: u64| {
            if hit + miss == 0 {
                1.0
            } else {
                hit as f64 / (hit + miss) as f64
            }
        };
        0.5 * (recall(self.tp, self.fn_) + recall(self.tn, self.fp))
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.fn_ + self.tn;
        if n == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }

    pub fn accuracy(&self, mode: AccuracyMode) -> f64 {
        match mode {
            AccuracyMode::ClassMean => self.class_mean_accuracy(),
            AccuracyMode::Pixel => self.pixel_accuracy(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracyMode {
    #[default]
    ClassMean,
    Pixel,
}

/// How frame scores combine into the headline numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of per-frame ratios.
    #[default]
    PerFrame,
    /// Ratios of counts summed over all frames.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub iou: f64,
    pub dice: f64,
    pub acc: f64,
    pub counts: Counts,
}

pub fn frame_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<FrameScore> {
    frame_score_with(pred, gt, 0, AccuracyMode::ClassMean)
}

pub fn frame_score_with(pred: &BinaryMask, gt: &BinaryMask, frame: usize, mode: AccuracyMode) -> Result<FrameScore> {
    let counts = Counts::of(pred, gt)?;
    Ok(FrameScore { frame, iou: counts.iou(), dice: counts.dice(), acc: counts.accuracy(mode), counts })
}

/// Scores a whole sequence of predictions against its ground truth.
pub fn score_frames(preds: &[BinaryMask], gts: &[BinaryMask], mode: AccuracyMode) -> Result<Vec<FrameScore>> {
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!("{} predictions for {} ground-truth masks", preds.len(), gts.len())));
    }
    preds.iter().zip(gts).enumerate().map(|(i, (p, g))| frame_score_with(p, g, i, mode)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub model: String,
    /// Percentages.
    pub miou: f64,
    pub macc: f64,
    pub mdice: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<FrameScore>,
}

impl SegReport {
    pub fn aggregate(
        scores: Vec<FrameScore>,
        dataset: Option<String>,
        model: impl Into<String>,
        mode: AccuracyMode,
        how: Aggregation,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Validation("cannot aggregate zero frame scores".into()));
        }
        let n = scores.len() as f64;
        let (miou, macc, mdice) = match how {
            Aggregation::PerFrame => (
                scores.iter().map(|s| s.iou).sum::<f64>() / n,
                scores.iter().map(|s| s.acc).sum::<f64>() / n,
                scores.iter().map(|s| s.dice).sum::<f64>() / n,
            ),
            Aggregation::Pooled => {
                let c = scores.iter().fold(Counts::default(), |acc, s| acc.add(s.counts));
                (c.iou(), c.accuracy(mode), c.dice())
            }
        };
        Ok(SegReport {
            dataset,
            model: model.into(),
            miou: miou * 100.0,
            macc: macc * 100.0,
            mdice: mdice * 100.0,
            frames: scores,
        })
    }

    /// A frameless report carrying published numbers.
    pub fn summary(dataset: Option<&str>, model: &str, miou: f64, macc: f64, mdice: f64) -> Self {
        SegReport { dataset: dataset.map(str::to_string), model: model.into(), miou, macc, mdice, frames: Vec::new() }
    }

    /// `(mIoU, mAcc, mDice)` formatted for display.
    pub fn display_values(&self) -> [String; 3] {
        [percent(self.miou), percent(self.macc), percent(self.mdice)]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Two decimals, rounding half up. The nudge keeps values such as 12.345,
/// stored as 12.3449999…, on the intended side.
pub fn percent(v: f64) -> String {
    let r = (v * 100.0 + 0.5 + 1e-9).floor() / 100.0;
    format!("{r:.2}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableLayout {
    /// Dataset | Model | mIoU | mAcc | mDice, dataset shown once per group.
    ByDataset,
    /// Model | mIoU | mAcc | mDice.
    ByModel,
}

impl std::str::FromStr for TableLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" | "by-dataset" => Ok(TableLayout::ByDataset),
            "model" | "by-model" => Ok(TableLayout::ByModel),
            other => Err(Error::Config(format!("unknown table layout {other:?}"))),
        }
    }
}

pub fn render_table(reports: &[SegReport], layout: TableLayout) -> String {
    let mut header = vec!["Model", "mIoU", "mAcc", "mDice"];
    if layout == TableLayout::ByDataset {
        header.insert(0, "Dataset");
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut last_dataset: Option<&str> = None;
    for r in reports {
        let mut row = Vec::new();
        if layout == TableLayout::ByDataset {
            let ds = r.dataset.as_deref().unwrap_or("-");
            row.push(if last_dataset == Some(ds) { String::new() } else { ds.to_string() });
            last_dataset = Some(ds);
        }
        row.push(r.model.clone());
        row.extend(r.display_values());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let text_cols = header.len() - 3;
    let line = |cells: &[&str]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                s.push_str(" | ");
            }
            if c < text_cols {
                let _ = write!(s, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(s, "{cell:>w$}", w = widths[c]);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        out.push_str(&line(&cells));
        out.push('\n');
    }
    out
}
