//! Video sequences on disk and a seeded synthetic surgical-video generator.
//!
//! The on-disk contract is `<root>/<seq>/images/NNNNN.png` with masks at
//! `<root>/<seq>/masks/NNNNN.png`. A [`DatasetManifest`] remaps other layouts
//! onto it by changing the two file patterns. Manifests are TOML:
//!
//! ```toml
//! root = "endovis17/train"        # relative to the manifest file
//! split = "train"
//! sequences = ["seq_1", "seq_2"]  # empty or absent: every subdirectory
//! frame_pattern = "images/{index}.png"
//! mask_pattern = "masks/{index}.png"
//! require_masks = true
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{BinaryMask, ImageTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<ImageTensor>,
    pub masks: Option<Vec<BinaryMask>>,
    /// File stem per frame (`"00007"`), used to mirror numbering on output.
    pub stems: Vec<String>,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Vec<ImageTensor>, masks: Option<Vec<BinaryMask>>) -> Result<Self> {
        let stems = (0..frames.len()).map(|i| format!("{i:05}")).collect();
        let seq = VideoSequence { id: id.into(), frames, masks, stems };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the frames; `(0, 0)` for an empty sequence.
    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.height(), f.width()))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims();
        if let Some((i, _)) = self.frames.iter().enumerate().find(|(_, f)| (f.height(), f.width()) != (h, w)) {
            return Err(Error::Validation(format!(
                "sequence {}: frame {i} is {}x{}, expected {h}x{w}",
                self.id,
                self.frames[i].height(),
                self.frames[i].width()
            )));
        }
        if self.stems.len() != self.frames.len() {
            return Err(Error::Validation(format!("sequence {}: stem count differs from frame count", self.id)));
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.frames.len() {
                return Err(Error::Validation(format!(
                    "sequence {}: {} masks for {} frames",
                    self.id,
                    masks.len(),
                    self.frames.len()
                )));
            }
            for (i, m) in masks.iter().enumerate() {
                if (m.height(), m.width()) != (h, w) {
                    return Err(Error::Validation(format!(
                        "sequence {}: mask {} is {}x{}, frame is {h}x{w}",
                        self.id,
                        self.stems[i],
                        m.height(),
                        m.width()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn default_frame_pattern() -> String {
    "images/{index}.png".into()
}

fn default_mask_pattern() -> String {
    "masks/{index}.png".into()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub sequences: Vec<String>,
    #[serde(default = "default_frame_pattern")]
    pub frame_pattern: String,
    #[serde(default = "default_mask_pattern")]
    pub mask_pattern: String,
    #[serde(default = "default_true")]
    pub require_masks: bool,
}

impl DatasetManifest {
    /// Default layout rooted at `root`.
    pub fn for_root(root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            root: root.into(),
            split: None,
            sequences: Vec::new(),
            frame_pattern: default_frame_pattern(),
            mask_pattern: default_mask_pattern(),
            require_masks: true,
        }
    }

    /// Reads a TOML manifest; a relative `root` is taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        Ok(m)
    }

    /// A manifest file is used as-is; a directory gets the default layout.
    pub fn resolve(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(Self::for_root(path))
        } else {
            Self::from_file(path)
        }
    }
}

/// A file pattern such as `images/frame_{index}.png`, split at `{index}`.
struct Pattern {
    dir: PathBuf,
    prefix: String,
    suffix: String,
}

impl Pattern {
    fn parse(pattern: &str) -> Result<Self> {
        let path = Path::new(pattern);
        let file = path
            .file_name()
            .and_then(|f| f.to_str())
            .ok_or_else(|| Error::Config(format!("bad file pattern {pattern:?}")))?;
        let (prefix, suffix) = file
            .split_once("{index}")
            .ok_or_else(|| Error::Config(format!("file pattern {pattern:?} has no {{index}} placeholder")))?;
        Ok(Pattern {
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            prefix: prefix.into(),
            suffix: suffix.into(),
        })
    }

    fn path(&self, seq_dir: &Path, index: &str) -> PathBuf {
        seq_dir.join(&self.dir).join(format!("{}{index}{}", self.prefix, self.suffix))
    }

    /// `(numeric index, index text)` for every matching file, sorted numerically.
    fn scan(&self, seq_dir: &Path) -> Result<Vec<(u64, String)>> {
        let dir = seq_dir.join(&self.dir);
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(index) = name.strip_prefix(&self.prefix).and_then(|n| n.strip_suffix(&self.suffix)) else {
                continue;
            };
            if !index.is_empty() && index.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(n) = index.parse::<u64>() {
                    out.push((n, index.to_string()));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn read_frame(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

/// Any nonzero colour channel counts as foreground, at any bit depth.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_rgba16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[..3].iter().any(|&c| c > 0)).collect();
    BinaryMask::from_vec(h as usize, w as usize, data)
}

pub fn write_frame(path: &Path, frame: &ImageTensor) -> Result<()> {
    let raw = frame.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, raw).expect("buffer size");
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::load(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let raw = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("buffer size");
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::load(path, e.to_string()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

/// Reads every mask matching `pattern` in `dir` (e.g. a directory of
/// predictions), keyed by index text.
pub fn read_mask_dir(dir: &Path, pattern: &str) -> Result<BTreeMap<String, BinaryMask>> {
    let pat = Pattern::parse(pattern)?;
    pat.scan(dir)?.into_iter().map(|(_, idx)| Ok((idx.clone(), read_mask(&pat.path(dir, &idx))?))).collect()
}

pub fn load_sequence(seq_dir: &Path, id: &str, manifest: &DatasetManifest) -> Result<VideoSequence> {
    let frames_pat = Pattern::parse(&manifest.frame_pattern)?;
    let masks_pat = Pattern::parse(&manifest.mask_pattern)?;
    let indices = frames_pat.scan(seq_dir)?;
    if indices.is_empty() {
        return Err(Error::load(seq_dir.join(&frames_pat.dir), "no frames match the frame pattern"));
    }
    let mut frames = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    let mut any_mask = false;
    for (n, idx) in &indices {
        frames.push(read_frame(&frames_pat.path(seq_dir, idx))?);
        let mpath = masks_pat.path(seq_dir, idx);
        if mpath.is_file() {
            masks.push(Some(read_mask(&mpath)?));
            any_mask = true;
        } else if manifest.require_masks {
            return Err(Error::load(mpath, format!("mask missing for frame {n}")));
        } else {
            masks.push(None);
        }
    }
    let masks = if any_mask {
        let all: Option<Vec<_>> = masks.into_iter().collect();
        Some(all.ok_or_else(|| Error::Validation(format!("sequence {id}: masks present for only some frames")))?)
    } else {
        None
    };
    let seq = VideoSequence { id: id.into(), frames, masks, stems: indices.into_iter().map(|(_, s)| s).collect() };
    seq.validate()?;
    Ok(seq)
}

/// Loads every sequence named by the manifest, in parallel, sorted by id.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<VideoSequence>> {
    let root = &manifest.root;
    if !root.is_dir() {
        return Err(Error::load(root, "dataset root is not a directory"));
    }
    let mut ids = manifest.sequences.clone();
    if ids.is_empty() {
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if entry.path().is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    ids.push(name.to_string());
                }
            }
        }
        ids.sort();
    }
    if ids.is_empty() {
        return Err(Error::load(root, "no sequences found"));
    }
    ids.par_iter().map(|id| load_sequence(&root.join(id), id, manifest)).collect()
}

/// Writes a sequence in the default layout under `root/<id>/`.
pub fn write_sequence(root: &Path, seq: &VideoSequence) -> Result<()> {
    let dir = root.join(&seq.id);
    seq.frames
        .par_iter()
        .zip(&seq.stems)
        .try_for_each(|(f, stem)| write_frame(&dir.join("images").join(format!("{stem}.png")), f))?;
    if let Some(masks) = &seq.masks {
        masks
            .par_iter()
            .zip(&seq.stems)
            .try_for_each(|(m, stem)| write_mask(&dir.join("masks").join(format!("{stem}.png")), m))?;
    }
    Ok(())
}

/// Motion scale factors for [`synth_video`]; zero everywhere gives a static clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub instrument: f64,
    pub background: f64,
    pub occlusion: bool,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec { instrument: 1.0, background: 1.0, occlusion: true }
    }
}

impl MotionSpec {
    pub fn still() -> Self {
        MotionSpec { instrument: 0.0, background: 0.0, occlusion: false }
    }
}

struct Instrument {
    pivot: (f64, f64),
    angle0: f64,
    swing: f64,
    swing_freq: f64,
    phase: f64,
    depth0: f64,
    depth_amp: f64,
    depth_freq: f64,
    width: f64,
    tone: f64,
    jaw: f64,
}

impl Instrument {
    fn random(rng: &mut impl Rng, size: f64) -> Self {
        // pivot just outside a random border, aimed roughly at the centre
        let side = rng.gen_range(0..4);
        let t = rng.gen_range(0.15..0.85) * size;
        let pivot = match side {
            0 => (t, -3.0),
            1 => (size + 2.0, t),
            2 => (t, size + 2.0),
            _ => (-3.0, t),
        };
        let to_centre = (size / 2.0 - pivot.1).atan2(size / 2.0 - pivot.0);
        Instrument {
            pivot,
            angle0: to_centre + rng.gen_range(-0.35..0.35),
            swing: rng.gen_range(0.15..0.4),
            swing_freq: rng.gen_range(0.04..0.09),
            phase: rng.gen_range(0.0..2.0 * PI),
            depth0: size * rng.gen_range(0.5..0.7),
            depth_amp: size * rng.gen_range(0.05..0.15),
            depth_freq: rng.gen_range(0.03..0.07),
            width: size / 64.0 * rng.gen_range(4.0..6.5),
            tone: rng.gen_range(0.62..0.8),
            jaw: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Shaded grey value at `(x, y)` if the instrument covers that pixel.
    fn shade(&self, x: f64, y: f64, t: f64) -> Option<f64> {
        let angle = self.angle0 + self.swing * (self.swing_freq * t + self.phase).sin();
        let depth = self.depth0 + self.depth_amp * (self.depth_freq * t + self.phase * 0.7).sin();
        let (dx, dy) = (angle.cos(), angle.sin());
        let (rx, ry) = (x - self.pivot.0, y - self.pivot.1);
        let along = rx * dx + ry * dy;
        let across = -rx * dy + ry * dx;
        let hw = self.width / 2.0;
        if (0.0..=depth).contains(&along) && across.abs() <= hw {
            let ridge = (across / hw * PI / 2.0).cos();
            return Some(self.tone * (0.72 + 0.28 * ridge));
        }
        // two-pronged jaw beyond the shaft end, slowly opening and closing
        let open = 0.25 + 0.2 * (0.11 * t + self.jaw).sin();
        let jaw_len = 2.2 * self.width;
        let tip = along - depth;
        if tip > 0.0 && tip <= jaw_len {
            for s in [-1.0, 1.0] {
                let offset = s * open * tip;
                if (across - offset).abs() <= hw * 0.55 {
                    return Some(self.tone * 0.62);
                }
            }
        }
        None
    }
}

struct Occluder {
    start: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    window: (f64, f64),
}

impl Occluder {
    fn covers(&self, x: f64, y: f64, t: f64) -> bool {
        if t < self.window.0 || t > self.window.1 {
            return false;
        }
        let cx = self.start.0 + self.velocity.0 * (t - self.window.0);
        let cy = self.start.1 + self.velocity.1 * (t - self.window.0);
        let wobble = 1.0 + 0.15 * ((y - cy).atan2(x - cx) * 3.0).sin();
        (x - cx).powi(2) + (y - cy).powi(2) <= (self.radius * wobble).powi(2)
    }
}

struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut impl Rng, size: f64) -> Self {
        let waves = (0..5)
            .map(|_| {
                let f = rng.gen_range(1.5..6.0) * 2.0 * PI / size;
                let a = rng.gen_range(0.0..PI);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.3..1.0))
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves.iter().map(|&(fx, fy, p, a)| a * (fx * x + fy * y + p).sin()).sum::<f64>() / total
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a seeded synthetic clip: a textured, drifting reddish tissue
/// background, one or two grey instruments swinging about a pivot outside the
/// frame, tissue flaps that pass over them, and small specular highlights.
/// The ground truth is the visible instrument footprint, pixel-exact.
pub fn synth_video(seed: u64, n_frames: usize, size: usize, motion: MotionSpec) -> VideoSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let count = rng.gen_range(1..=2);
    let instruments: Vec<_> = (0..count).map(|_| Instrument::random(&mut rng, s)).collect();
    let tex_a = Texture::random(&mut rng, s);
    let tex_b = Texture::random(&mut rng, s);
    let drift = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let tissue = [rng.gen_range(0.55..0.75), rng.gen_range(0.18..0.3), rng.gen_range(0.16..0.26)];
    let span = n_frames.max(1) as f64;
    let occluders: Vec<_> = if motion.occlusion {
        (0..rng.gen_range(1..=2))
            .map(|_| {
                let len = span * rng.gen_range(0.15..0.3);
                let start_t = rng.gen_range(0.0..span);
                let from_left = rng.gen_bool(0.5);
                let y = rng.gen_range(0.2..0.8) * s;
                let speed = s * 1.4 / len.max(1.0);
                Occluder {
                    start: if from_left { (-0.2 * s, y) } else { (1.2 * s, y) },
                    velocity: (if from_left { speed } else { -speed }, rng.gen_range(-0.2..0.2)),
                    radius: s * rng.gen_range(0.1..0.18),
                    window: (start_t, start_t + len),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let speculars: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(0.0..s), rng.gen_range(0.0..s))).collect();

    let mut frames = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let ti = f as f64 * motion.instrument;
        let tb = f as f64 * motion.background;
        let to = f as f64;
        let mut data = Vec::with_capacity(size * size * 3);
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (bx, by) = (px + drift.0 * tb, py + drift.1 * tb);
                let occluded = occluders.iter().any(|o| o.covers(px, py, to));
                let tool = instruments.iter().find_map(|i| i.shade(px, py, ti));
                let rgb = if occluded {
                    let n = tex_b.at(bx * 1.7, by * 1.7);
                    [0.8 + 0.08 * n, 0.42 + 0.06 * n, 0.4 + 0.05 * n]
                } else if let Some(g) = tool {
                    let n = 0.03 * tex_a.at(px * 2.3, py * 2.3);
                    [g + n, g + n + 0.01, g + n + 0.03]
                } else {
                    let (a, b) = (tex_a.at(bx, by), tex_b.at(bx, by));
                    let vessel = if tex_b.at(bx * 0.6 + 11.0, by * 0.6).abs() < 0.06 { 0.12 } else { 0.0 };
                    let glint = speculars.iter().any(|&(sx, sy)| {
                        let (sx, sy) = ((sx + drift.0 * tb).rem_euclid(s), (sy + drift.1 * tb).rem_euclid(s));
                        (px - sx).powi(2) + (py - sy).powi(2) <= 1.5
                    });
                    if glint {
                        [0.97, 0.93, 0.9]
                    } else {
                        [
                            tissue[0] + 0.12 * a - vessel,
                            tissue[1] + 0.06 * b - vessel * 0.5,
                            tissue[2] + 0.05 * b - vessel * 0.5,
                        ]
                    }
                };
                data.extend(rgb.map(quantize));
                mask.push(tool.is_some() && !occluded);
            }
        }
        frames.push(ImageTensor::new(size, size, data).expect("quantized pixels lie in [0, 1]"));
        masks.push(BinaryMask::from_vec(size, size, mask).expect("mask dims"));
    }
    VideoSequence::new(format!("synth_{seed}"), frames, Some(masks)).expect("uniform synthetic dims")
}

/// `count` synthetic clips with consecutive seeds starting at `first_seed`.
pub fn synth_suite(first_seed: u64, count: usize, n_frames: usize, size: usize) -> Vec<VideoSequence> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| synth_video(first_seed + i, n_frames, size, MotionSpec::default()))
        .collect()
}
