//! Memory-based mask propagation.
//!
//! Seed frames (masked by the segmenter) go into a permanent memory that is
//! never evicted; every `r_mem`-th tracked frame is added to a bounded FIFO
//! working memory. Each new frame's key attends over all memory keys and the
//! softmax-weighted memory values are decoded into a mask.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Tape, Var};
use crate::checkpoint;
use crate::datasets::VideoSequence;
use crate::error::{Error, Result};
use crate::finetune::{checkpoint_id, run_epochs, TrainConfig, TrainRecord};
use crate::frame::{BinaryMask, ImageTensor, MaskLogits};
use crate::layers::{pixel_shuffle_index, Linear};
use crate::metrics::frame_score;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub pixel_channels: usize,
    /// Per-query affinity filter; `None` attends to every memory row.
    pub top_k: Option<usize>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            image_size: 64,
            patch_size: 8,
            hidden: 32,
            key_dim: 16,
            value_dim: 16,
            pixel_channels: 8,
            top_k: Some(32),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_size, self.patch_size, self.hidden, self.key_dim, self.value_dim, self.pixel_channels];
        if dims.contains(&0) || self.top_k == Some(0) {
            return Err(Error::Config(format!("tracker dimensions must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "tracker image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankConfig {
    /// Working-memory insertion period, in frames.
    pub r_mem: usize,
    /// Working-memory capacity, in entries.
    pub working_capacity: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig { r_mem: 5, working_capacity: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemorySource {
    Permanent,
    Working,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub key: Tensor,
    pub value: Tensor,
    pub source: MemorySource,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    cfg: BankConfig,
    permanent: Vec<MemoryEntry>,
    working: VecDeque<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(cfg: BankConfig) -> Result<Self> {
        if cfg.r_mem == 0 {
            return Err(Error::Config("memory insertion period must be at least 1".into()));
        }
        Ok(MemoryBank { cfg, permanent: Vec::new(), working: VecDeque::new() })
    }

    pub fn config(&self) -> BankConfig {
        self.cfg
    }

    pub fn add_permanent(&mut self, frame: usize, key: Tensor, value: Tensor) -> Result<()> {
        let entry = self.entry(frame, key, value, MemorySource::Permanent)?;
        self.permanent.push(entry);
        Ok(())
    }

    /// Inserts into working memory when `frame` is a multiple of `r_mem`,
    /// evicting the oldest working entry beyond capacity. Returns whether an
    /// insertion happened.
    pub fn update(&mut self, frame: usize, key: Tensor, value: Tensor) -> Result<bool> {
        if frame % self.cfg.r_mem != 0 {
            return Ok(false);
        }
        let entry = self.entry(frame, key, value, MemorySource::Working)?;
        if self.cfg.working_capacity == 0 {
            return Ok(false);
        }
        if self.working.len() == self.cfg.working_capacity {
            self.working.pop_front();
        }
        self.working.push_back(entry);
        Ok(true)
    }

    fn entry(&self, frame: usize, key: Tensor, value: Tensor, source: MemorySource) -> Result<MemoryEntry> {
        if key.rows() != value.rows() {
            return Err(Error::Shape(format!("{} key rows vs {} value rows", key.rows(), value.rows())));
        }
        if let Some(first) = self.entries().next() {
            if key.cols() != first.key.cols() || value.cols() != first.value.cols() {
                return Err(Error::Shape("memory entry widths differ from the bank's".into()));
            }
        }
        if !key.is_finite() || !value.is_finite() {
            return Err(Error::Numeric("memory entry".into()));
        }
        Ok(MemoryEntry { key, value, source, frame })
    }

    pub fn permanent(&self) -> &[MemoryEntry] {
        &self.permanent
    }

    pub fn working(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.working.iter()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.permanent.iter().chain(self.working.iter())
    }

    pub fn len(&self) -> usize {
        self.permanent.len() + self.working.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All keys and values stacked row-wise, permanent entries first.
    pub fn stacked(&self) -> Result<(Tensor, Tensor)> {
        let first = self.entries().next().ok_or(Error::NoMemory)?;
        let (dk, dv) = (first.key.cols(), first.value.cols());
        let rows: usize = self.entries().map(|e| e.key.rows()).sum();
        let mut keys = Vec::with_capacity(rows * dk);
        let mut values = Vec::with_capacity(rows * dv);
        for e in self.entries() {
            keys.extend_from_slice(e.key.data());
            values.extend_from_slice(e.value.data());
        }
        Ok((Tensor::from_vec(rows, dk, keys)?, Tensor::from_vec(rows, dv, values)?))
    }
}

/// Additive mask keeping the `k` largest entries of each row (ties go to the
/// lower column index); everything else gets −∞.
fn top_k_mask(affinity: &Tensor, k: usize) -> Option<Tensor> {
    let (rows, cols) = affinity.shape();
    if k >= cols {
        return None;
    }
    let mut mask = Tensor::filled(rows, cols, f64::NEG_INFINITY);
    let mut idx: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = affinity.row(r);
        idx.clear();
        idx.extend(0..cols);
        idx.select_nth_unstable_by(k - 1, |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &c in &idx[..k] {
            mask.set(r, c, 0.0);
        }
    }
    Some(mask)
}

fn softmax_rows(x: &mut Tensor) {
    let cols = x.cols();
    for row in x.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Readout `softmax(q·Kᵀ/√d_k [top-k]) · V` over every entry in `bank`.
pub fn memory_read(query_key: &Tensor, bank: &MemoryBank, top_k: Option<usize>) -> Result<Tensor> {
    let (keys, values) = bank.stacked()?;
    if query_key.cols() != keys.cols() {
        return Err(Error::Shape(format!("query key width {} vs memory key width {}", query_key.cols(), keys.cols())));
    }
    let mut aff = query_key.matmul_t(&keys)?.scale(1.0 / (keys.cols() as f64).sqrt());
    if let Some(mask) = top_k.and_then(|k| top_k_mask(&aff, k)) {
        aff.add_assign(&mask);
    }
    softmax_rows(&mut aff);
    aff.matmul(&values)
}

pub const TRACKER_KIND: &str = "tracker";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerHeader {
    pub kind: String,
    pub config: TrackerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub store: ParamStore,
    key_fc1: Linear,
    key_fc2: Linear,
    value_fc1: Linear,
    value_fc2: Linear,
    dec_fc1: Linear,
    dec_up: Linear,
    dec_skip: Linear,
    dec_out: Linear,
    shuffle: Arc<[usize]>,
}

const LAYERS: [&str; 8] = [
    "tracker.key.fc1",
    "tracker.key.fc2",
    "tracker.value.fc1",
    "tracker.value.fc2",
    "tracker.decoder.fc1",
    "tracker.decoder.up",
    "tracker.decoder.skip",
    "tracker.decoder.out",
];

impl Tracker {
    pub fn new(cfg: &TrackerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = cfg.patch_size;
        let shapes = [
            (p * p * 3, cfg.hidden),
            (cfg.hidden, cfg.key_dim),
            (p * p * 4, cfg.hidden),
            (cfg.hidden, cfg.value_dim),
            (cfg.value_dim + cfg.hidden, cfg.hidden),
            (cfg.hidden, p * p * cfg.pixel_channels),
            (27, cfg.pixel_channels),
            (cfg.pixel_channels, 1),
        ];
        for (name, (d_in, d_out)) in LAYERS.iter().zip(shapes) {
            Linear::new(&mut store, &mut rng, name, d_in, d_out, true, true)?;
        }
        Self::from_parts(cfg.clone(), store)
    }

    fn from_parts(cfg: TrackerConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let l = LAYERS.map(|name| Linear::bind(&store, name, true));
        let [key_fc1, key_fc2, value_fc1, value_fc2, dec_fc1, dec_up, dec_skip, dec_out] = l;
        let t = Tracker {
            shuffle: pixel_shuffle_index(cfg.grid(), cfg.patch_size, cfg.pixel_channels).into(),
            key_fc1: key_fc1?,
            key_fc2: key_fc2?,
            value_fc1: value_fc1?,
            value_fc2: value_fc2?,
            dec_fc1: dec_fc1?,
            dec_up: dec_up?,
            dec_skip: dec_skip?,
            dec_out: dec_out?,
            cfg,
            store,
        };
        let p = t.cfg.patch_size;
        let expect = [
            (&t.key_fc1, p * p * 3, t.cfg.hidden),
            (&t.key_fc2, t.cfg.hidden, t.cfg.key_dim),
            (&t.value_fc1, p * p * 4, t.cfg.hidden),
            (&t.value_fc2, t.cfg.hidden, t.cfg.value_dim),
            (&t.dec_fc1, t.cfg.value_dim + t.cfg.hidden, t.cfg.hidden),
            (&t.dec_up, t.cfg.hidden, p * p * t.cfg.pixel_channels),
            (&t.dec_skip, 27, t.cfg.pixel_channels),
            (&t.dec_out, t.cfg.pixel_channels, 1),
        ];
        for (layer, d_in, d_out) in expect {
            if (layer.d_in, layer.d_out) != (d_in, d_out) {
                return Err(Error::Checkpoint(format!(
                    "{} is {}x{}, config implies {d_in}x{d_out}",
                    layer.name, layer.d_out, layer.d_in
                )));
            }
        }
        Ok(t)
    }

    pub fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn check_frame(&self, frame: &ImageTensor) -> Result<()> {
        let s = self.cfg.image_size;
        if frame.height() != s || frame.width() != s {
            return Err(Error::Shape(format!(
                "tracker expects {s}x{s} frames, got {}x{}",
                frame.height(),
                frame.width()
            )));
        }
        Ok(())
    }

    /// `(key, hidden features)`, both `g² ×` their width.
    pub fn key_graph(&self, tape: &mut Tape, frame: &ImageTensor) -> Result<(Var, Var)> {
        self.check_frame(frame)?;
        let x = tape.constant(frame.patches(self.cfg.patch_size, None)?);
        let h = self.key_fc1.forward(tape, &self.store, x, None);
        let h = tape.gelu(h);
        Ok((self.key_fc2.forward(tape, &self.store, h, None), h))
    }

    pub fn value_graph(&self, tape: &mut Tape, frame: &ImageTensor, mask: &BinaryMask) -> Result<Var> {
        self.check_frame(frame)?;
        let x = tape.constant(frame.patches(self.cfg.patch_size, Some(mask))?);
        let h = self.value_fc1.forward(tape, &self.store, x, None);
        let h = tape.gelu(h);
        Ok(self.value_fc2.forward(tape, &self.store, h, None))
    }

    /// Differentiable [`memory_read`].
    pub fn read_graph(&self, tape: &mut Tape, query: Var, keys: Var, values: Var) -> Var {
        let aff = tape.matmul_t(query, keys);
        let aff = tape.scale(aff, 1.0 / (self.cfg.key_dim as f64).sqrt());
        let aff = match self.cfg.top_k.and_then(|k| top_k_mask(tape.value(aff), k)) {
            Some(mask) => {
                let m = tape.constant(mask);
                tape.add(aff, m)
            }
            None => aff,
        };
        let attn = tape.softmax(aff);
        tape.matmul(attn, values)
    }

    /// Mask logits `(H·W) × 1` from a readout and the query's hidden features.
    pub fn decode_graph(&self, tape: &mut Tape, readout: Var, hidden: Var, frame: &ImageTensor) -> Result<Var> {
        self.check_frame(frame)?;
        let s = self.cfg.image_size;
        let x = tape.concat_cols(&[readout, hidden]);
        let h = self.dec_fc1.forward(tape, &self.store, x, None);
        let h = tape.gelu(h);
        let up = self.dec_up.forward(tape, &self.store, h, None);
        let up = tape.gather(up, s * s, self.cfg.pixel_channels, self.shuffle.clone());
        let nb = tape.constant(frame.neighborhoods());
        let sk = self.dec_skip.forward(tape, &self.store, nb, None);
        let f = tape.add(up, sk);
        let f = tape.gelu(f);
        Ok(self.dec_out.forward(tape, &self.store, f, None))
    }

    pub fn compute_key(&self, frame: &ImageTensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let (k, _) = self.key_graph(&mut tape, frame)?;
        Ok(tape.value(k).clone())
    }

    pub fn compute_value(&self, frame: &ImageTensor, mask: &BinaryMask) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = self.value_graph(&mut tape, frame, mask)?;
        Ok(tape.value(v).clone())
    }

    /// Key and predicted mask for one frame read against `bank`.
    pub fn segment(&self, frame: &ImageTensor, bank: &MemoryBank) -> Result<(Tensor, BinaryMask)> {
        let mut tape = Tape::inference();
        let (k, h) = self.key_graph(&mut tape, frame)?;
        let key = tape.value(k).clone();
        let readout = memory_read(&key, bank, self.cfg.top_k)?;
        let r = tape.constant(readout);
        let logits = self.decode_graph(&mut tape, r, h, frame)?;
        let s = self.cfg.image_size;
        let logits = MaskLogits::new(s, s, tape.value(logits).data().to_vec())
            .map_err(|_| Error::Numeric("tracker logits".into()))?;
        Ok((key, logits.binarize()))
    }

    /// Adds `(frame, mask)` to working memory when `index` is due.
    pub fn update_memory(
        &self,
        bank: &mut MemoryBank,
        frame: &ImageTensor,
        mask: &BinaryMask,
        index: usize,
    ) -> Result<bool> {
        if index % bank.config().r_mem != 0 {
            return Ok(false);
        }
        bank.update(index, self.compute_key(frame)?, self.compute_value(frame, mask)?)
    }

    /// Propagates `seeds` through `frames`. Seed frames return their seed
    /// masks unchanged; frames of any size are resized to the tracker's
    /// resolution and predictions are resized back.
    pub fn propagate(
        &self,
        frames: &[ImageTensor],
        seeds: &BTreeMap<usize, BinaryMask>,
        bank_cfg: BankConfig,
    ) -> Result<Vec<BinaryMask>> {
        if seeds.is_empty() {
            return Err(Error::Config("propagation needs at least one seed mask".into()));
        }
        if let Some(&last) = seeds.keys().next_back() {
            if last >= frames.len() {
                return Err(Error::Config(format!("seed frame {last} is beyond a {}-frame video", frames.len())));
            }
        }
        let s = self.cfg.image_size;
        let (h, w) = (frames[0].height(), frames[0].width());
        let mut bank = MemoryBank::new(bank_cfg)?;
        for (&i, mask) in seeds {
            mask.expect_dims(frames[i].height(), frames[i].width())?;
            let f = frames[i].resized(s, s);
            let m = mask.resized(s, s);
            bank.add_permanent(i, self.compute_key(&f)?, self.compute_value(&f, &m)?)?;
        }
        let mut out = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            if let Some(seed) = seeds.get(&t) {
                out.push(seed.clone());
                continue;
            }
            if (frame.height(), frame.width()) != (h, w) {
                return Err(Error::Validation(format!("frame {t} size differs from frame 0")));
            }
            let f = frame.resized(s, s);
            let (key, mask) = self.segment(&f, &bank)?;
            if t % bank_cfg.r_mem == 0 {
                bank.update(t, key, self.compute_value(&f, &mask)?)?;
            }
            out.push(mask.resized(h, w));
        }
        Ok(out)
    }

    pub fn header(&self) -> TrackerHeader {
        TrackerHeader { kind: TRACKER_KIND.into(), config: self.cfg.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.header(), &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, store): (TrackerHeader, _) = checkpoint::from_bytes(bytes)?;
        if header.kind != TRACKER_KIND {
            return Err(Error::Checkpoint(format!("expected a tracker checkpoint, found {:?}", header.kind)));
        }
        Self::from_parts(header.config, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(reason) => Error::load(path, reason),
            other => other,
        })
    }
}

/// Default draws for [`tracker_samples`].
pub const SAMPLES_PER_SEQUENCE: usize = 60;
pub const MAX_MEMORY_GAP: usize = 30;

/// Memory frames with known masks and a query frame to segment from them.
#[derive(Clone, Debug)]
pub struct TrackerSample {
    pub memory: Vec<(ImageTensor, BinaryMask)>,
    pub query: ImageTensor,
    pub target: BinaryMask,
}

/// Draws `per_sequence` samples from each sequence: one memory frame before
/// the query, and half the time a second one within `max_gap` frames of it.
pub fn tracker_samples(
    seqs: &[VideoSequence],
    size: usize,
    per_sequence: usize,
    max_gap: usize,
    seed: u64,
) -> Result<Vec<TrackerSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(seqs.len() * per_sequence);
    for seq in seqs {
        let masks = seq
            .masks
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("sequence {} has no masks to train on", seq.id)))?;
        if seq.len() < 2 {
            continue;
        }
        let frame = |i: usize| (seq.frames[i].resized(size, size), masks[i].resized(size, size));
        for _ in 0..per_sequence {
            let q = rng.gen_range(1..seq.len());
            let mut memory = vec![frame(rng.gen_range(0..q))];
            if rng.gen_bool(0.5) {
                let lo = q.saturating_sub(max_gap);
                memory.push(frame(rng.gen_range(lo..=q.saturating_sub(1).max(lo))));
            }
            let (query, target) = frame(q);
            out.push(TrackerSample { memory, query, target });
        }
    }
    Ok(out)
}

/// Mean IoU (fraction) of single-step predictions on `samples`.
pub fn evaluate_tracker(tracker: &Tracker, samples: &[TrackerSample]) -> Result<f64> {
    let bank_cfg = BankConfig::default();
    let mut total = 0.0;
    for s in samples {
        let mut bank = MemoryBank::new(bank_cfg)?;
        for (i, (f, m)) in s.memory.iter().enumerate() {
            bank.add_permanent(i, tracker.compute_key(f)?, tracker.compute_value(f, m)?)?;
        }
        let (_, pred) = tracker.segment(&s.query, &bank)?;
        total += frame_score(&pred, &s.target)?.iou;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains every tracker parameter with the segmentation loss.
pub fn train_tracker(
    tracker: &mut Tracker,
    train: &[TrackerSample],
    val: Option<&[TrackerSample]>,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let targets: Vec<Arc<[f64]>> = train.iter().map(|s| s.target.to_f64().into()).collect();
    let (wb, wd) = (cfg.w_bce, cfg.w_dice);
    let epochs = run_epochs(
        tracker,
        |t| &mut t.store,
        train.len(),
        cfg,
        |t, i| {
            let s = &train[i];
            let mut tape = Tape::new(GradMode::Trainable);
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for (f, m) in &s.memory {
                keys.push(t.key_graph(&mut tape, f)?.0);
                values.push(t.value_graph(&mut tape, f, m)?);
            }
            let keys = tape.concat_rows(&keys);
            let values = tape.concat_rows(&values);
            let (q, h) = t.key_graph(&mut tape, &s.query)?;
            let r = t.read_graph(&mut tape, q, keys, values);
            let logits = t.decode_graph(&mut tape, r, h, &s.query)?;
            let loss = tape.seg_loss(logits, targets[i].clone(), wb, wd);
            Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
        },
        |t| val.map(|v| evaluate_tracker(t, v)).transpose(),
    )?;
    Ok(TrainRecord {
        epochs,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint_id: checkpoint_id(&tracker.to_bytes()?),
    })
}
