//! Fine-tuning: segmentation loss, Adam, the shared epoch loop, train
//! records, and finite-difference gradient checks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{seg_loss_value, GradMode, Gradients, Tape, Var};
use crate::datasets::VideoSequence;
use crate::error::{Error, Result};
use crate::frame::{BinaryMask, ImageTensor, MaskLogits};
use crate::lora::{target_patterns, FreezePolicy};
use crate::metrics::frame_score;
use crate::params::{uniform, ParamId, ParamStore};
use crate::prompt::{bbox_from_mask, BoxPrompt, DecoderConfig};
use crate::segmenter::{Segmenter, SegmenterConfig};
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub w_bce: f64,
    pub w_dice: f64,
    pub seed: u64,
    pub rank: usize,
    /// Defaults to `rank` (scale 1).
    pub alpha: Option<f64>,
    /// Adapter targets, e.g. `"q,v"` or `"q,k,v,out,mlp"`.
    pub targets: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 3e-3,
            batch_size: 4,
            w_bce: 1.0,
            w_dice: 1.0,
            seed: 0,
            rank: 4,
            alpha: None,
            targets: "q,v".into(),
        }
    }
}

impl TrainConfig {
    /// Settings for training the tracker from scratch; it needs more passes
    /// than adapter fine-tuning.
    pub fn tracker() -> Self {
        TrainConfig { epochs: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.w_bce >= 0.0 && self.w_dice >= 0.0) || !(self.w_bce + self.w_dice > 0.0) {
            return bad("loss weights must be non-negative and not both zero");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

/// λ_bce · mean BCE + λ_dice · (1 − soft Dice), Dice smoothed by 1.
pub fn seg_loss(logits: &MaskLogits, gt: &BinaryMask, w_bce: f64, w_dice: f64) -> Result<f64> {
    gt.expect_dims(logits.height(), logits.width())?;
    if !logits.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("segmentation logits".into()));
    }
    let loss = seg_loss_value(logits.data(), &gt.to_f64(), w_bce, w_dice);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric("segmentation loss".into()))
    }
}

/// One prompted training frame.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub prompt: BoxPrompt,
    target: Arc<[f64]>,
}

impl TrainSample {
    /// Prompt is the tight box of `mask`, which must be non-empty.
    pub fn new(image: ImageTensor, mask: BinaryMask) -> Result<Self> {
        mask.expect_dims(image.height(), image.width())?;
        let prompt = bbox_from_mask(&mask)?;
        let target = mask.to_f64().into();
        Ok(TrainSample { image, mask, prompt, target })
    }

    /// Every frame with visible foreground, resized to `size` if needed.
    pub fn from_sequences(seqs: &[VideoSequence], size: usize) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for seq in seqs {
            let masks = seq
                .masks
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("sequence {} has no masks to train on", seq.id)))?;
            for (frame, mask) in seq.frames.iter().zip(masks) {
                let mask = mask.resized(size, size);
                if mask.is_empty() {
                    continue;
                }
                out.push(TrainSample::new(frame.resized(size, size), mask)?);
            }
        }
        Ok(out)
    }
}

/// Adam with bias correction. Parameters are snapped back to the f32 grid
/// after every step so that a saved checkpoint reloads to the same model.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub(crate) fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    pub(crate) fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (&id, g) in grads {
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            let w = store.get_mut(id);
            for (((w, m), v), g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            w.round_to_f32();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock seconds; kept out of files so reruns write identical bytes.
    #[serde(skip)]
    pub wall_time_secs: f64,
    pub checkpoint_id: String,
}

impl TrainRecord {
    /// Whether the per-epoch mean loss never increased.
    pub fn loss_monotone(&self) -> bool {
        self.epochs.windows(2).all(|w| w[1].loss <= w[0].loss)
    }

    /// One JSON object per epoch, one per line.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.epochs {
            let line = serde_json::to_string(e).expect("epoch record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Short content hash of a checkpoint archive.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Generic mini-batch loop. Per-sample gradients are computed in parallel and
/// summed in sample order, so results do not depend on thread scheduling.
pub(crate) fn run_epochs<M: Sync>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    n_samples: usize,
    cfg: &TrainConfig,
    sample_grad: impl Fn(&M, usize) -> Result<(f64, Gradients)> + Sync,
    mut validate: impl FnMut(&M) -> Result<Option<f64>>,
) -> Result<Vec<EpochRecord>> {
    if n_samples == 0 {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Gradients)>> = {
                let m: &M = model;
                batch.par_iter().map(|&i| sample_grad(m, i)).collect()
            };
            let mut sum: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("training loss at epoch {epoch}, batch {b}")));
                }
                total += loss;
                for (id, g) in grads.by_param {
                    match sum.get_mut(&id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            sum.insert(id, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in sum.values_mut() {
                *g = g.scale(inv);
            }
            adam.step(store(model), &sum);
        }
        let loss = total / n_samples as f64;
        let val_miou = validate(model)?;
        log::info!("epoch {epoch}: loss {loss:.5} val mIoU {val_miou:?}");
        records.push(EpochRecord { epoch, loss, val_miou });
    }
    Ok(records)
}

/// Attaches adapters per `cfg` and applies `policy`.
pub fn prepare_segmenter(model: &mut Segmenter, cfg: &TrainConfig, policy: &FreezePolicy) -> Result<()> {
    cfg.validate()?;
    model.inject_lora(&target_patterns(&cfg.targets)?, cfg.rank, cfg.alpha(), cfg.seed)?;
    model.apply_policy(policy)
}

/// Mean IoU (fraction) of `model` on prompted samples.
pub fn evaluate_samples(model: &Segmenter, samples: &[TrainSample]) -> Result<f64> {
    let ious = samples
        .par_iter()
        .map(|s| Ok(frame_score(&model.predict(&s.image, &s.prompt)?, &s.mask)?.iou))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
}

/// Trains the parameters currently flagged trainable in `model`.
pub fn fine_tune(
    model: &mut Segmenter,
    train: &[TrainSample],
    val: Option<&[TrainSample]>,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let (wb, wd) = (cfg.w_bce, cfg.w_dice);
    let epochs = run_epochs(
        model,
        |m| &mut m.store,
        train.len(),
        cfg,
        |m, i| {
            let s = &train[i];
            let mut tape = Tape::new(GradMode::Trainable);
            let logits = m.forward_graph(&mut tape, &s.image, &s.prompt)?;
            let loss = tape.seg_loss(logits, s.target.clone(), wb, wd);
            Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
        },
        |m| val.map(|v| evaluate_samples(m, v)).transpose(),
    )?;
    Ok(TrainRecord {
        epochs,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint_id: checkpoint_id(&model.to_bytes()?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamGradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_error: f64,
    pub params: Vec<ParamGradCheck>,
}

/// Compares analytic gradients of `ids` against central differences.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// near-zero gradients from reporting round-off as a large relative error.
pub fn grad_check(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    loss: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new(GradMode::All);
    let root = loss(store, &mut tape)?;
    let grads = tape.backward(root);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let v = loss(s, &mut t)?;
        Ok(t.value(v).get(0, 0))
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport { entries: 0, max_rel_error: 0.0, params: Vec::new() };
    for &id in ids {
        let (rows, cols) = store.get(id).shape();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols));
        let mut entry = ParamGradCheck { name: store.name(id).to_string(), max_rel_error: 0.0, max_abs_grad: 0.0 };
        for k in 0..rows * cols {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            entry.max_rel_error = entry.max_rel_error.max(rel);
            entry.max_abs_grad = entry.max_abs_grad.max(a.abs());
        }
        report.entries += rows * cols;
        report.max_rel_error = report.max_rel_error.max(entry.max_rel_error);
        report.params.push(entry);
    }
    Ok(report)
}

/// Gradient check over every adapter entry of a one-block segmenter on a
/// 4×4 image, with adapters on all projections and nonzero `B` factors.
pub fn segmenter_grad_check(seed: u64, step: f64) -> Result<GradCheckReport> {
    let cfg = SegmenterConfig {
        encoder: ViTConfig { image_size: 4, patch_size: 2, embed_dim: 8, depth: 1, num_heads: 2, mlp_ratio: 2.0 },
        decoder: DecoderConfig { pixel_channels: 4, mlp_ratio: 2 },
    };
    let mut model = Segmenter::new(&cfg, seed)?;
    model.inject_lora(&target_patterns("q,k,v,out,mlp")?, 2, 3.0, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = model.adapters.iter().flat_map(|a| [a.a, a.b]).collect();
    for a in model.adapters.iter() {
        let (r, c) = model.store.get(a.b).shape();
        model.store.assign(a.b, uniform(&mut rng, r, c, 0.5))?;
    }
    let data = (0..4 * 4 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = ImageTensor::new(4, 4, data)?;
    let mask = BinaryMask::from_vec(4, 4, (0..16).map(|i| i % 3 != 0).collect())?;
    let sample = TrainSample::new(image, mask)?;
    grad_check(&model.store, &ids, step, |store, tape| {
        let m = Segmenter { store: store.clone(), ..model.clone() };
        let logits = m.forward_graph(tape, &sample.image, &sample.prompt)?;
        Ok(tape.seg_loss(logits, sample.target.clone(), 1.0, 1.0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_video, MotionSpec};

    #[test]
    fn loss_worked_example() {
        let logits = MaskLogits::new(2, 2, vec![0.0; 4]).unwrap();
        let gt = BinaryMask::from_vec(2, 2, vec![true, true, false, false]).unwrap();
        let want = 2f64.ln() + 0.4;
        assert!((seg_loss(&logits, &gt, 1.0, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.0931).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let gt = BinaryMask::from_vec(2, 2, vec![true, false, true, false]).unwrap();
        let logits = MaskLogits::new(2, 2, vec![40.0, -40.0, 40.0, -40.0]).unwrap();
        assert!(seg_loss(&logits, &gt, 1.0, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let z = [0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let t = [true, false, true, true, false, false];
        let perm = [4, 2, 0, 5, 1, 3];
        let a = seg_loss(
            &MaskLogits::new(2, 3, z.to_vec()).unwrap(),
            &BinaryMask::from_vec(2, 3, t.to_vec()).unwrap(),
            1.0,
            0.5,
        );
        let b = seg_loss(
            &MaskLogits::new(2, 3, perm.iter().map(|&i| z[i]).collect()).unwrap(),
            &BinaryMask::from_vec(2, 3, perm.iter().map(|&i| t[i]).collect()).unwrap(),
            1.0,
            0.5,
        );
        assert!((a.unwrap() - b.unwrap()).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { w_bce: 0.0, w_dice: 0.0, ..Default::default() },
            TrainConfig { w_bce: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn linear_model_gradients_are_exact() {
        let mut store = ParamStore::new();
        let w =
            store.add("w", Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]]).unwrap(), true).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let target: Arc<[f64]> = vec![1.0, 0.0, -2.0, 3.0].into();
        let report = grad_check(&store, &[w], 1e-5, |s, tape| {
            let xv = tape.constant(x.clone());
            let wv = tape.param(s, w);
            let y = tape.matmul_t(xv, wv);
            Ok(tape.half_sq_err(y, target.clone()))
        })
        .unwrap();
        assert_eq!(report.entries, 6);
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn detached_parameter_reports_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::filled(1, 2, 0.3), true).unwrap();
        let detached = store.add("detached.lora.B", Tensor::filled(2, 1, 0.7), true).unwrap();
        let report = grad_check(&store, &[used, detached], 1e-5, |s, tape| {
            let u = tape.param(s, used);
            let _ = tape.param(s, detached);
            Ok(tape.half_sq_err(u, vec![1.0, -1.0].into()))
        })
        .unwrap();
        assert!(report.params[1].max_abs_grad <= 1e-12);
    }

    #[test]
    fn one_block_segmenter_gradients_match_finite_differences() {
        let report = segmenter_grad_check(7, 1e-5).unwrap();
        assert!(report.entries > 0);
        assert!(report.params.iter().all(|p| p.max_abs_grad > 0.0));
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn tiny_run(lr: f64, seed: u64) -> (Segmenter, Segmenter, TrainRecord) {
        let seq = synth_video(seed, 6, 64, MotionSpec::default());
        let samples = TrainSample::from_sequences(&[seq], 64).unwrap();
        let cfg = TrainConfig { epochs: 2, learning_rate: lr, batch_size: 2, seed, ..Default::default() };
        let mut model = Segmenter::new(&SegmenterConfig::default(), 1).unwrap();
        prepare_segmenter(&mut model, &cfg, &FreezePolicy::default()).unwrap();
        let before = model.clone();
        let record = fine_tune(&mut model, &samples, None, &cfg).unwrap();
        (before, model, record)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (before, after, record) = tiny_run(0.0, 3);
        assert_eq!(record.epochs.len(), 2);
        assert_eq!(before.to_bytes().unwrap(), after.to_bytes().unwrap());
    }

    #[test]
    fn training_touches_only_trainable_parameters_and_is_deterministic() {
        let (before, after, record) = tiny_run(1e-3, 5);
        for (id, p) in before.store.iter() {
            let moved = after.store.get(id) != &p.value;
            if p.trainable {
                assert!(moved, "{} did not move", p.name);
            } else {
                assert!(!moved, "frozen {} moved", p.name);
            }
        }
        let (_, again, record2) = tiny_run(1e-3, 5);
        assert_eq!(record.epochs, record2.epochs);
        assert_eq!(record.checkpoint_id, record2.checkpoint_id);
        assert_eq!(after, again);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut model = Segmenter::new(&SegmenterConfig::default(), 1).unwrap();
        let err = fine_tune(&mut model, &[], None, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn adam_keeps_parameters_on_the_f32_grid() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::filled(1, 3, 0.1f32 as f64), true).unwrap();
        let mut adam = Adam::new(1e-3);
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::from_vec(1, 3, vec![0.3, -0.2, 1e-7]).unwrap());
        adam.step(&mut store, &grads);
        assert!(store.get(id).data().iter().all(|v| *v == (*v as f32) as f64));
    }
}
