use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use surgseg::datasets::{
    load_dataset, read_mask_dir, synth_video, write_mask, write_sequence, DatasetManifest, MotionSpec, VideoSequence,
};
use surgseg::finetune::{fine_tune, prepare_segmenter, TrainConfig, TrainRecord, TrainSample};
use surgseg::memtrack::{
    tracker_samples, train_tracker, BankConfig, Tracker, TrackerConfig, MAX_MEMORY_GAP, SAMPLES_PER_SEQUENCE,
};
use surgseg::metrics::{frame_score_with, render_table, AccuracyMode, Aggregation, FrameScore, SegReport, TableLayout};
use surgseg::pipeline::{combined_report, run_pipeline_many, PipelineConfig, PromptSource, SeedFrames};
use surgseg::{BinaryMask, BoxPrompt, ErrorKind, FreezePolicy, Segmenter, SegmenterConfig};

/// Directory searched for `segmenter.ckpt` and `tracker.ckpt` when no
/// checkpoint path is given.
const CKPT_DIR_VAR: &str = "SURGSEG_CKPT_DIR";

#[derive(Parser)]
#[command(name = "surgseg", version, about = "Box-prompted segmentation and mask tracking for surgical video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic sequences in the dataset layout.
    Synth(SynthArgs),
    /// Fine-tune segmenter adapters and mask decoder on a dataset.
    Finetune(FinetuneArgs),
    /// Train the mask tracker on a dataset.
    TrainTracker(TrainTrackerArgs),
    /// Segment seed frames and propagate their masks through each video.
    Track(TrackArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Render reports as a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences; sequence i uses seed + i.
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Render a static clip.
    #[arg(long)]
    still: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dataset root directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated adapter targets: q, k, v, out, mlp or name patterns.
    #[arg(long, default_value = "q,v")]
    targets: String,
    /// ViT preset for a fresh model.
    #[arg(long, default_value = "desk")]
    preset: String,
}

#[derive(Args)]
struct TrainTrackerArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = SAMPLES_PER_SEQUENCE)]
    samples_per_sequence: usize,
    #[arg(long, default_value_t = MAX_MEMORY_GAP)]
    max_gap: usize,
}

#[derive(Args)]
struct TrackArgs {
    /// One sequence directory, a dataset root, or a manifest file.
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    ckpt_seg: Option<PathBuf>,
    #[arg(long)]
    ckpt_track: Option<PathBuf>,
    /// Segment frames 0..K with the segmenter.
    #[arg(long, conflicts_with = "seed_frames")]
    seed_k: Option<usize>,
    /// Explicit seed frames, e.g. 0,15,30.
    #[arg(long, value_delimiter = ',')]
    seed_frames: Option<Vec<usize>>,
    /// Box prompt `x_min,y_min,x_max,y_max`, optionally `FRAME:` prefixed.
    /// Without a prefix the box applies to every seed frame. Ground-truth
    /// boxes are used when no box is given.
    #[arg(long = "box")]
    boxes: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Write a report here when ground truth is available.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    r_mem: Option<usize>,
    #[arg(long)]
    working_capacity: Option<usize>,
    /// Affinity top-k; 0 attends to every memory entry.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "pipeline")]
    model: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "model")]
    model: String,
    /// Plain pixel accuracy instead of mean per-class recall.
    #[arg(long)]
    pixel_acc: bool,
    /// Pool pixel counts over all frames instead of averaging per frame.
    #[arg(long)]
    pooled: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    inputs: Vec<PathBuf>,
    /// `dataset` (grouped rows) or `model`.
    #[arg(long, default_value = "model")]
    layout: TableLayout,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_ckpt(given: Option<PathBuf>, file: &str) -> anyhow::Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p);
    }
    match std::env::var_os(CKPT_DIR_VAR) {
        Some(dir) => Ok(PathBuf::from(dir).join(file)),
        None => Err(surgseg::Error::Config(format!("no checkpoint path given and {CKPT_DIR_VAR} is not set")).into()),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.frames == 0 || a.sequences == 0 {
        return Err(surgseg::Error::Config("--frames and --sequences must be at least 1".into()).into());
    }
    let motion = if a.still { MotionSpec::still() } else { MotionSpec::default() };
    for i in 0..a.sequences as u64 {
        write_sequence(&a.out, &synth_video(a.seed + i, a.frames, a.size, motion))?;
    }
    println!("wrote {} sequence(s) of {} frames to {}", a.sequences, a.frames, a.out.display());
    Ok(())
}

fn load(path: &Path, require_masks: bool) -> anyhow::Result<Vec<VideoSequence>> {
    let mut manifest = DatasetManifest::resolve(path)?;
    manifest.require_masks = require_masks;
    Ok(load_dataset(&manifest)?)
}

fn write_record(record: &TrainRecord, ckpt: &Path) -> anyhow::Result<()> {
    record.write_log(&ckpt.with_extension("log.jsonl"))?;
    record.write_summary(&ckpt.with_extension("summary.json"))?;
    let last = record.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!(
        "checkpoint {} ({}), final loss {last:.5}, {:.1}s",
        ckpt.display(),
        record.checkpoint_id,
        record.wall_time_secs
    );
    Ok(())
}

fn finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        seed: a.seed,
        rank: a.rank,
        alpha: a.alpha,
        targets: a.targets,
        ..defaults
    };
    cfg.validate()?;
    let out = default_ckpt(a.out, "segmenter.ckpt")?;
    let model_cfg = SegmenterConfig { encoder: surgseg::ViTConfig::preset(&a.preset)?, ..Default::default() };
    let size = model_cfg.encoder.image_size;
    let train = TrainSample::from_sequences(&load(&a.data, true)?, size)?;
    let val =
        a.val.as_deref().map(|v| load(v, true).and_then(|s| Ok(TrainSample::from_sequences(&s, size)?))).transpose()?;
    let mut model = Segmenter::new(&model_cfg, cfg.seed)?;
    prepare_segmenter(&mut model, &cfg, &FreezePolicy::default())?;
    log::info!("fine-tuning on {} prompted frames", train.len());
    let record = fine_tune(&mut model, &train, val.as_deref(), &cfg)?;
    model.save(&out)?;
    write_record(&record, &out)
}

fn train_tracker_cmd(a: TrainTrackerArgs) -> anyhow::Result<()> {
    let defaults = TrainConfig::tracker();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        seed: a.seed,
        ..defaults
    };
    cfg.validate()?;
    let out = default_ckpt(a.out, "tracker.ckpt")?;
    let tcfg = TrackerConfig::default();
    let size = tcfg.image_size;
    let draw = |path: &Path, seed: u64| -> anyhow::Result<_> {
        Ok(tracker_samples(&load(path, true)?, size, a.samples_per_sequence, a.max_gap, seed)?)
    };
    let train = draw(&a.data, a.seed)?;
    let val = a.val.as_deref().map(|v| draw(v, a.seed.wrapping_add(1))).transpose()?;
    let mut tracker = Tracker::new(&tcfg, a.seed)?;
    log::info!("training tracker on {} samples", train.len());
    let record = train_tracker(&mut tracker, &train, val.as_deref(), &cfg)?;
    tracker.save(&out)?;
    write_record(&record, &out)
}

fn parse_boxes(specs: &[String], seeds: &[usize]) -> anyhow::Result<BTreeMap<usize, BoxPrompt>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        match spec.split_once(':') {
            Some((frame, b)) => {
                let f: usize = frame
                    .trim()
                    .parse()
                    .map_err(|_| surgseg::Error::Config(format!("bad frame index in box {spec:?}")))?;
                out.insert(f, b.parse::<BoxPrompt>()?);
            }
            None => {
                let b: BoxPrompt = spec.parse()?;
                for &s in seeds {
                    out.entry(s).or_insert(b);
                }
            }
        }
    }
    Ok(out)
}

/// A directory holding `images/` is one sequence; anything else is a dataset.
fn load_videos(path: &Path) -> anyhow::Result<(Vec<VideoSequence>, bool)> {
    if path.join("images").is_dir() {
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let id = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| anyhow!("cannot name sequence {}", path.display()))?;
        let mut manifest = DatasetManifest::for_root(parent);
        manifest.require_masks = false;
        manifest.sequences = vec![id.to_string()];
        Ok((load_dataset(&manifest)?, true))
    } else {
        Ok((load(path, false)?, false))
    }
}

fn track(a: TrackArgs) -> anyhow::Result<()> {
    let segmenter = Segmenter::load(&default_ckpt(a.ckpt_seg, "segmenter.ckpt")?)?;
    let (videos, single) = load_videos(&a.video)?;
    let seeds = match (a.seed_k, a.seed_frames) {
        (_, Some(frames)) => SeedFrames::Explicit(frames),
        (Some(k), None) => SeedFrames::First(k),
        (None, None) => SeedFrames::default(),
    };
    let needs_tracker = videos.iter().any(|v| seeds.resolve(v.len()).map(|s| s.len() < v.len()).unwrap_or(true));
    let tracker = if needs_tracker {
        let mut t = Tracker::load(&default_ckpt(a.ckpt_track, "tracker.ckpt")?)?;
        if let Some(k) = a.top_k {
            t.cfg.top_k = (k > 0).then_some(k);
        }
        Some(t)
    } else {
        None
    };
    let prompts = if a.boxes.is_empty() {
        PromptSource::GtBox
    } else {
        let first = videos.first().map(|v| v.len()).unwrap_or(0);
        PromptSource::User(parse_boxes(&a.boxes, &seeds.resolve(first)?)?)
    };
    let defaults = BankConfig::default();
    let cfg = PipelineConfig {
        seeds,
        prompts,
        bank: BankConfig {
            r_mem: a.r_mem.unwrap_or(defaults.r_mem),
            working_capacity: a.working_capacity.unwrap_or(defaults.working_capacity),
        },
        dataset: a.dataset,
        model: a.model,
        ..Default::default()
    };
    let outputs = run_pipeline_many(&videos, &segmenter, tracker.as_ref(), &cfg)?;
    for (video, out) in videos.iter().zip(&outputs) {
        let dir = if single { a.out.clone() } else { a.out.join(&video.id) };
        for (mask, stem) in out.masks.iter().zip(&video.stems) {
            write_mask(&dir.join(format!("{stem}.png")), mask)?;
        }
    }
    let frames: usize = outputs.iter().map(|o| o.masks.len()).sum();
    println!("wrote {frames} masks for {} sequence(s) to {}", outputs.len(), a.out.display());
    if outputs.iter().any(|o| o.scores.is_some()) {
        let report = combined_report(&outputs, &cfg)?;
        let [miou, macc, mdice] = report.display_values();
        println!("mIoU {miou}  mAcc {macc}  mDice {mdice}");
        if let Some(path) = a.report {
            write_text(&path, &report.to_json())?;
        }
    } else if a.report.is_some() {
        log::warn!("no ground truth masks; no report written");
    }
    Ok(())
}

/// Mask sets under `path`, keyed by sequence id. Accepts a flat directory of
/// `<index>.png` masks, a sequence directory with `masks/`, or a directory
/// of either.
fn mask_sets(path: &Path) -> anyhow::Result<BTreeMap<String, BTreeMap<String, BinaryMask>>> {
    let one = |dir: &Path| -> anyhow::Result<Option<BTreeMap<String, BinaryMask>>> {
        if dir.join("masks").is_dir() {
            return Ok(Some(read_mask_dir(dir, "masks/{index}.png")?));
        }
        let flat = read_mask_dir(dir, "{index}.png")?;
        Ok((!flat.is_empty()).then_some(flat))
    };
    if !path.is_dir() {
        return Err(surgseg::Error::Load { path: path.into(), reason: "not a directory".into() }.into());
    }
    if let Some(set) = one(path)? {
        return Ok(BTreeMap::from([(String::new(), set)]));
    }
    let mut out = BTreeMap::new();
    let mut subdirs: Vec<PathBuf> =
        fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for dir in subdirs {
        if let Some(set) = one(&dir)? {
            out.insert(dir.file_name().unwrap_or_default().to_string_lossy().into_owned(), set);
        }
    }
    if out.is_empty() {
        return Err(surgseg::Error::Load { path: path.into(), reason: "no masks found".into() }.into());
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let pred = mask_sets(&a.pred)?;
    let gt = mask_sets(&a.gt)?;
    let pairs: Vec<(&BTreeMap<String, BinaryMask>, &BTreeMap<String, BinaryMask>, String)> =
        if pred.len() == 1 && gt.len() == 1 {
            let (p, g) = (pred.values().next().unwrap(), gt.values().next().unwrap());
            vec![(p, g, gt.keys().next().unwrap().clone())]
        } else {
            gt.iter()
                .map(|(id, g)| {
                    let p = pred.get(id).ok_or_else(|| surgseg::Error::Load {
                        path: a.pred.join(id),
                        reason: "no predictions for this sequence".into(),
                    })?;
                    Ok((p, g, id.clone()))
                })
                .collect::<anyhow::Result<_>>()?
        };
    let mode = if a.pixel_acc { AccuracyMode::Pixel } else { AccuracyMode::ClassMean };
    let how = if a.pooled { Aggregation::Pooled } else { Aggregation::PerFrame };
    let mut scores: Vec<FrameScore> = Vec::new();
    for (p, g, id) in pairs {
        for (stem, gmask) in g {
            let pmask = p.get(stem).ok_or_else(|| surgseg::Error::Load {
                path: a.pred.join(&id).join(format!("{stem}.png")),
                reason: "prediction missing".into(),
            })?;
            scores.push(frame_score_with(pmask, gmask, scores.len(), mode)?);
        }
    }
    let report = SegReport::aggregate(scores, a.dataset, a.model, mode, how)?;
    write_text(&a.out, &report.to_json())?;
    let [miou, macc, mdice] = report.display_values();
    println!("mIoU {miou}  mAcc {macc}  mDice {mdice}  ({} frames)", report.frames.len());
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SegReport>(&text)
                .map_err(|e| surgseg::Error::Load { path: p.clone(), reason: format!("not a report: {e}") }.into())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table = render_table(&reports, a.layout);
    print!("{table}");
    if let Some(out) = a.out {
        write_text(&out, &table)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn error_kind(err: &anyhow::Error) -> ErrorKind {
    err.chain().find_map(|e| e.downcast_ref::<surgseg::Error>()).map(surgseg::Error::kind).unwrap_or(ErrorKind::Data)
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR {}: {}", ErrorKind::Usage.code(), first.trim());
            return ExitCode::from(ErrorKind::Usage.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Finetune(a) => finetune(a),
        Command::TrainTracker(a) => train_tracker_cmd(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            eprintln!("ERROR {}: {}", kind.code(), one_line(&e));
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}
