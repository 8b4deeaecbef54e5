//! Pipeline stages. Each stage reads and writes files so it can be run
//! and inspected on its own; the `*_with` variants take data already in
//! memory and are what the file-based stages call.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{imageops, RgbImage};
use lesion_core::dataset::{crop_patches, lesion_area_stats, load_manifest, split_dataset, AreaHistogram, SMALL_AREA_RATIO};
use lesion_core::detections::{self, ImageDetection};
use lesion_core::eval::{evaluate, report, EvalResult, ReportFormat};
use lesion_core::slicer::full_frame_infer;
use lesion_core::synth::generate_dataset;
use lesion_core::{make_grid, sliced_infer, DatasetManifest, Detection};
use lesion_detector::distill::generate_pseudo_labels;
use lesion_detector::train::{load_image, load_samples};
use lesion_detector::{
    Checkpoint, DistillMode, Model, PseudoLabel, Sample, StudentConfig, StudentTrainer, Trainer,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::record::write_record;
use crate::render::render_to_file;

pub const FULL_MANIFEST: &str = lesion_core::synth::MANIFEST_FILE;
pub const TRAIN_MANIFEST: &str = "train.json";
pub const VAL_MANIFEST: &str = "val.json";

/// The phi values and modes of the ablation sweep, in report order.
pub const ABLATION_PHIS: [f64; 4] = [0.1, 0.15, 0.2, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    pub fn manifest_path(self, data: &Path) -> PathBuf {
        data.join(match self {
            Split::Train => TRAIN_MANIFEST,
            Split::Val => VAL_MANIFEST,
            Split::All => FULL_MANIFEST,
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            other => Err(format!("unknown split {other:?} (train, val, all)")),
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.write_all(b"\n").expect("vec write");
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

/// Removes `round(fraction · n)` annotations chosen by `seed`.
pub fn drop_labels(manifest: &DatasetManifest, fraction: f64, seed: u64) -> DatasetManifest {
    let n = manifest.annotations.len();
    let k = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = vec![true; n];
    for &i in &order[..k] {
        keep[i] = false;
    }
    let annotations = manifest.annotations.iter().zip(&keep).filter(|(_, k)| **k).map(|(a, _)| *a).collect();
    DatasetManifest { annotations, ..manifest.clone() }
}

/// Renders the dataset and writes the full, train and validation
/// manifests. Training labels are thinned by `train_label_dropout`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let full = generate_dataset(cfg.dataset.images, &cfg.synth, out)?;
    let (train, val) = split_dataset(&full, cfg.dataset.split_ratio, cfg.dataset.split_seed)?;
    let train = drop_labels(&train, cfg.dataset.train_label_dropout, cfg.dataset.dropout_seed);
    let (tp, vp) = (out.join(TRAIN_MANIFEST), out.join(VAL_MANIFEST));
    train.save(&tp)?;
    val.save(&vp)?;
    log::info!(
        "synth: {} images ({} train / {} val), {} annotations",
        full.images.len(),
        train.images.len(),
        val.images.len(),
        full.annotations.len()
    );
    write_record("synth", cfg, &[], &[&out.join(FULL_MANIFEST), &tp, &vp])?;
    Ok((train, val))
}

/// Crops the training split into patch images under `patch_dir` and
/// returns the patch manifest.
pub fn write_patches(cfg: &RunConfig, train: &DatasetManifest, data: &Path, patch_dir: &Path) -> Result<DatasetManifest> {
    let patches = crop_patches(train, cfg.dataset.patch_size, cfg.dataset.min_visibility)?;
    fs::create_dir_all(patch_dir).map_err(|e| CliError::io(patch_dir, e))?;
    let mut cache: Option<(u64, RgbImage)> = None;
    for rec in &patches.images {
        let src = rec.source.expect("crop records carry provenance");
        if cache.as_ref().map(|(id, _)| *id) != Some(src.source_image_id) {
            let file = &train.image(src.source_image_id).expect("source image in manifest").file_name;
            cache = Some((src.source_image_id, load_image(&data.join(file))?));
        }
        let img = &cache.as_ref().expect("cached").1;
        let crop = imageops::crop_imm(img, src.offset_x, src.offset_y, rec.width, rec.height).to_image();
        let path = patch_dir.join(&rec.file_name);
        crop.save(&path).map_err(|source| CliError::Image { path: path.display().to_string(), source })?;
    }
    patches.save(&patch_dir.join(FULL_MANIFEST))?;
    Ok(patches)
}

pub fn train_teacher_with(cfg: &RunConfig, samples: &[Sample]) -> Result<Trainer> {
    let model = Model::new(cfg.teacher_model(), cfg.teacher.init_seed, DType::F32)?;
    let mut trainer = Trainer::new(model, cfg.teacher.train.clone())?;
    let every = (cfg.teacher.train.steps / 10).max(1);
    trainer.fit(samples, |step, v| {
        if step % every == 0 {
            log::info!("teacher step {step}: total {:.3} (iou {:.3} cls {:.3} obj {:.3})", v.total, v.iou, v.cls, v.obj);
        }
    })?;
    Ok(trainer)
}

/// Crops the training split, trains the teacher on the patches and saves
/// its checkpoint. Patches go to `<out>.patches/`.
pub fn train_teacher(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Checkpoint> {
    let train_path = Split::Train.manifest_path(data);
    let train = load_manifest(&train_path)?;
    let patch_dir = with_suffix(out, ".patches");
    let patches = write_patches(cfg, &train, data, &patch_dir)?;
    let samples = load_samples(&patches, &patch_dir, cfg.teacher.input_size)?;
    log::info!("teacher: {} patches of {} px", samples.len(), cfg.dataset.patch_size);
    let trainer = train_teacher_with(cfg, &samples)?;
    let ckpt = Checkpoint::from_trainer(&trainer)?;
    write_file(out, &ckpt.to_json_string())?;
    write_record("train-teacher", cfg, &[&train_path, data], &[out])?;
    Ok(ckpt)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)?.to_model(None)?)
}

pub fn pseudo_label_with(cfg: &RunConfig, teacher: &Model, train: &DatasetManifest, data: &Path, slice: bool) -> Result<Vec<PseudoLabel>> {
    let settings = slice.then_some(cfg.slice);
    Ok(generate_pseudo_labels(teacher, train, data, settings.as_ref(), cfg.distill.score_floor)?)
}

pub fn save_pseudo_labels(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let dets: Vec<ImageDetection> = labels.iter().map(|p| p.to_image_detection()).collect();
    write_file(path, &detections::to_json_string(&dets, true))
}

pub fn load_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabel>> {
    Ok(detections::load(path)?.iter().map(PseudoLabel::from_image_detection).collect())
}

pub fn pseudo_label(cfg: &RunConfig, data: &Path, teacher_path: &Path, out: &Path, slice: bool) -> Result<Vec<PseudoLabel>> {
    let train_path = Split::Train.manifest_path(data);
    let train = load_manifest(&train_path)?;
    let teacher = load_model(teacher_path)?;
    let labels = pseudo_label_with(cfg, &teacher, &train, data, slice)?;
    log::info!("pseudo-label: {} labels over {} images (sliced: {slice})", labels.len(), train.images.len());
    save_pseudo_labels(out, &labels)?;
    write_record("pseudo-label", cfg, &[&train_path, teacher_path, data], &[out])?;
    Ok(labels)
}

pub fn student_config(cfg: &RunConfig) -> StudentConfig {
    StudentConfig {
        train: cfg.student.train.clone(),
        distill: cfg.distill.clone(),
        ppo: cfg.ppo.clone(),
        policy_seed: cfg.student.policy_seed,
    }
}

pub fn train_student_with(cfg: &RunConfig, samples: &[Sample], pseudo: &[PseudoLabel]) -> Result<StudentTrainer> {
    let model = Model::new(cfg.student_model(), cfg.student.init_seed, DType::F32)?;
    let mut student = StudentTrainer::new(model, student_config(cfg), pseudo)?;
    let every = (cfg.student.train.steps / 10).max(1);
    let label = mode_label(cfg);
    student.fit(samples, |s| {
        if s.step % every == 0 {
            log::info!("student [{label}] step {}: total {:.3}, accepted {}/{}", s.step, s.loss.total, s.accepted, s.candidates);
        }
    })?;
    Ok(student)
}

pub fn mode_label(cfg: &RunConfig) -> String {
    match cfg.distill.mode {
        DistillMode::None => "none".into(),
        DistillMode::Static => format!("{}", cfg.distill.phi),
        DistillMode::Ppo => "ppo".into(),
    }
}

/// Saves the checkpoint plus `<out>.decisions.jsonl` and
/// `<out>.ppo.jsonl`.
pub fn save_student(student: &StudentTrainer, out: &Path) -> Result<()> {
    write_file(out, &student.checkpoint()?.to_json_string())?;
    write_jsonl(&with_suffix(out, ".decisions.jsonl"), &student.decision_log)?;
    write_jsonl(&with_suffix(out, ".ppo.jsonl"), &student.update_stats)?;
    Ok(())
}

pub fn train_student(cfg: &RunConfig, data: &Path, pseudo_path: Option<&Path>, out: &Path) -> Result<StudentTrainer> {
    let train_path = Split::Train.manifest_path(data);
    let train = load_manifest(&train_path)?;
    let pseudo = match (pseudo_path, cfg.distill.mode) {
        (Some(p), _) => load_pseudo_labels(p)?,
        (None, DistillMode::None) => Vec::new(),
        (None, mode) => return Err(CliError::Usage(format!("--pseudo is required for mode {mode:?}"))),
    };
    let samples = load_samples(&train, data, cfg.student.input_size)?;
    let student = train_student_with(cfg, &samples, &pseudo)?;
    save_student(&student, out)?;
    let mut inputs: Vec<&Path> = vec![&train_path, data];
    inputs.extend(pseudo_path);
    write_record("train-student", cfg, &inputs, &[out])?;
    Ok(student)
}

/// Detections for one image, sliced or at the model's input size.
pub fn detect_image(cfg: &RunConfig, model: &Model, image: &RgbImage, slice: bool) -> Result<Vec<Detection>> {
    let conf = cfg.eval.conf_threshold;
    if slice {
        let grid = make_grid(image.width(), image.height(), cfg.slice.tile, cfg.slice.overlap);
        sliced_infer(model, image, &grid, conf, cfg.slice.tau_merge, cfg.slice.include_full_frame)
            .map_err(|e| CliError::Runtime(e.to_string()))
    } else {
        Ok(full_frame_infer(model, image, model.config.input_size, conf, cfg.slice.tau_merge)?)
    }
}

pub fn infer_with(cfg: &RunConfig, model: &Model, manifest: &DatasetManifest, data: &Path, slice: bool) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
    for rec in &manifest.images {
        let image = load_image(&data.join(&rec.file_name))?;
        let bounds = rec.bounds();
        for d in detect_image(cfg, model, &image, slice)? {
            let bbox = d.bbox.clip_to(&bounds);
            if !bbox.is_degenerate() {
                out.push(ImageDetection { image_id: rec.id, detection: Detection { bbox, ..d } });
            }
        }
    }
    Ok(out)
}

pub fn infer(cfg: &RunConfig, data: &Path, split: Split, model_path: &Path, out: &Path, slice: bool) -> Result<Vec<ImageDetection>> {
    let manifest_path = split.manifest_path(data);
    let manifest = load_manifest(&manifest_path)?;
    let model = load_model(model_path)?;
    let dets = infer_with(cfg, &model, &manifest, data, slice)?;
    log::info!("infer: {} detections over {} images (sliced: {slice})", dets.len(), manifest.images.len());
    write_file(out, &detections::to_json_string(&dets, false))?;
    write_record("infer", cfg, &[&manifest_path, model_path, data], &[out])?;
    Ok(dets)
}

/// Evaluates a detection file and writes `out` (text table) and
/// `<out>.json` (all metrics).
pub fn eval(
    cfg: &RunConfig,
    data: &Path,
    split: Split,
    dets_path: &Path,
    label: &str,
    out: &Path,
) -> Result<(EvalResult, String)> {
    let manifest_path = split.manifest_path(data);
    let manifest = load_manifest(&manifest_path)?;
    let dets = detections::load(dets_path)?;
    let result = evaluate(&dets, &manifest, cfg.eval.bounds())?;
    let text = report(&[(label.to_string(), &result)], cfg.eval.format);
    write_file(out, &text)?;
    write_file(&with_suffix(out, ".json"), &serde_json::to_string_pretty(&result).expect("result serializes"))?;
    write_record("eval", cfg, &[&manifest_path, dets_path], &[out])?;
    Ok((result, text))
}

pub fn stats(cfg: &RunConfig, data: &Path, split: Split, out: &Path, thresholds: &[f64]) -> Result<AreaHistogram> {
    let manifest_path = split.manifest_path(data);
    let manifest = load_manifest(&manifest_path)?;
    let hist = lesion_area_stats(&manifest, thresholds)?;
    write_file(out, &serde_json::to_string_pretty(&hist).expect("histogram serializes"))?;
    write_record("stats", cfg, &[&manifest_path], &[out])?;
    Ok(hist)
}

pub fn format_histogram(h: &AreaHistogram) -> String {
    let mut s = format!("{:>14} {:>8} {:>10}\n", "area ratio <", "count", "cum. frac");
    for (i, t) in h.thresholds.iter().enumerate() {
        s.push_str(&format!("{t:>14.4} {:>8} {:>10.3}\n", h.counts[i], h.cumulative_fraction[i]));
    }
    s.push_str(&format!("{:>14} {:>8}\n", "rest", h.counts[h.thresholds.len()]));
    s.push_str(&format!("total {} lesions\n", h.total));
    s
}

pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.001, 0.0025, SMALL_AREA_RATIO, 0.01, 0.025, 0.05];

/// Overlays the detections of `image_id` on `image_path`.
pub fn render(cfg: &RunConfig, image_path: &Path, dets_path: &Path, image_id: u64, out: &Path) -> Result<usize> {
    let image = load_image(image_path)?;
    let dets: Vec<Detection> =
        detections::load(dets_path)?.into_iter().filter(|d| d.image_id == image_id).map(|d| d.detection).collect();
    render_to_file(&image, &dets, out)?;
    write_record("render", cfg, &[image_path, dets_path], &[out])?;
    Ok(dets.len())
}

/// Runs: one student per ablation setting, each evaluated on the
/// validation split.
pub struct AblationRun {
    pub label: String,
    pub result: EvalResult,
    pub model: Model,
}

pub fn ablation_settings(cfg: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::new();
    let with = |mode: DistillMode, phi: f64| {
        let mut c = cfg.clone();
        c.distill.mode = mode;
        c.distill.phi = phi;
        c
    };
    out.push(with(DistillMode::None, cfg.distill.phi));
    for phi in ABLATION_PHIS {
        out.push(with(DistillMode::Static, phi));
    }
    out.push(with(DistillMode::Ppo, cfg.distill.phi));
    out
}

pub fn ablation_with(
    cfg: &RunConfig,
    samples: &[Sample],
    pseudo: &[PseudoLabel],
    val: &DatasetManifest,
    data: &Path,
    slice: bool,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for c in ablation_settings(cfg) {
        let label = mode_label(&c);
        let student = train_student_with(&c, samples, pseudo)?;
        let dets = infer_with(&c, &student.trainer.model, val, data, slice)?;
        let result = evaluate(&dets, val, c.eval.bounds())?;
        log::info!("ablation [{label}]: mAP50 {:?}", result.mean.map50);
        if let Some(dir) = out_dir {
            let stem = format!("student_{label}");
            save_student(&student, &dir.join(format!("{stem}.json")))?;
            write_file(&dir.join(format!("{stem}.dets.json")), &detections::to_json_string(&dets, false))?;
        }
        runs.push(AblationRun { label, result, model: student.trainer.model });
    }
    Ok(runs)
}

pub fn ablation_report(runs: &[AblationRun]) -> String {
    let rows: Vec<(String, &EvalResult)> = runs.iter().map(|r| (r.label.clone(), &r.result)).collect();
    report(&rows, ReportFormat::Ablation)
}

/// The full sweep from files: writes every student, its detections and
/// `ablation.txt` under `out_dir`.
pub fn ablation(cfg: &RunConfig, data: &Path, pseudo_path: &Path, out_dir: &Path, slice: bool) -> Result<Vec<AblationRun>> {
    let train_path = Split::Train.manifest_path(data);
    let val_path = Split::Val.manifest_path(data);
    let train = load_manifest(&train_path)?;
    let val = load_manifest(&val_path)?;
    let pseudo = load_pseudo_labels(pseudo_path)?;
    let samples = load_samples(&train, data, cfg.student.input_size)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let runs = ablation_with(cfg, &samples, &pseudo, &val, data, slice, Some(out_dir))?;
    let table = out_dir.join("ablation.txt");
    write_file(&table, &ablation_report(&runs))?;
    write_record("ablation", cfg, &[&train_path, &val_path, pseudo_path, data], &[&table])?;
    Ok(runs)
}
