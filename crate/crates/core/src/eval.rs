//! COCO-style detection metrics: per-class AP averaged over IoU
//! thresholds 0.50:0.05:0.95, AP at 0.50 and 0.75, and AP restricted to
//! small / medium / large ground truths, with 101-point interpolation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, DatasetManifest, LesionClass};
use crate::detections::ImageDetection;
use crate::geometry::{greedy_match, iou, Detection};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detection {index} references unknown image {image_id}")]
    UnknownImage { index: usize, image_id: u64 },
    #[error("cannot parse report line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

/// Ground-truth area boundaries in pixels²: small is `< small`, large is
/// `≥ large`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBounds {
    pub small: f64,
    pub large: f64,
}

impl Default for SizeBounds {
    fn default() -> Self {
        Self { small: 32.0 * 32.0, large: 96.0 * 96.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AreaBucket {
    All,
    Small,
    Medium,
    Large,
}

impl AreaBucket {
    pub const ALL: [AreaBucket; 4] = [AreaBucket::All, AreaBucket::Small, AreaBucket::Medium, AreaBucket::Large];

    pub fn contains(self, area: f64, bounds: &SizeBounds) -> bool {
        match self {
            AreaBucket::All => true,
            AreaBucket::Small => area < bounds.small,
            AreaBucket::Medium => area >= bounds.small && area < bounds.large,
            AreaBucket::Large => area >= bounds.large,
        }
    }
}

/// One row of metrics. `None` means undefined (no ground truth).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: Option<f64>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["mAP", "mAP50", "mAP75", "AP_small", "AP_medium", "AP_large"];

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.map, self.map50, self.map75, self.ap_small, self.ap_medium, self.ap_large]
    }

    pub fn from_values(v: [Option<f64>; 6]) -> Self {
        Self { map: v[0], map50: v[1], map75: v[2], ap_small: v[3], ap_medium: v[4], ap_large: v[5] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub gt: [usize; 4],
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: BTreeMap<LesionClass, Metrics>,
    pub mean: Metrics,
    pub counts: BTreeMap<LesionClass, BucketCounts>,
}

impl EvalResult {
    /// Flat `{metric name → value}` map; per-class entries are prefixed
    /// with the class name.
    pub fn to_metric_map(&self) -> BTreeMap<String, Option<f64>> {
        let mut out = BTreeMap::new();
        for (name, v) in Metrics::NAMES.iter().zip(self.mean.values()) {
            out.insert(name.to_string(), v);
        }
        for (class, m) in &self.per_class {
            for (name, v) in Metrics::NAMES.iter().zip(m.values()) {
                out.insert(format!("{}/{name}", class.name()), v);
            }
        }
        out
    }
}

/// Precision/recall points in score order and the interpolated envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub envelope: Vec<f64>,
}

impl PrCurve {
    /// `flags` are the true-positive flags of the non-ignored detections
    /// in descending score order.
    pub fn from_flags(flags: &[bool], num_gt: usize) -> Self {
        let mut tp = 0usize;
        let mut recall = Vec::with_capacity(flags.len());
        let mut precision = Vec::with_capacity(flags.len());
        for (i, &hit) in flags.iter().enumerate() {
            tp += hit as usize;
            recall.push(tp as f64 / num_gt as f64);
            precision.push(tp as f64 / (i + 1) as f64);
        }
        let mut envelope = precision.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        Self { recall, precision, envelope }
    }

    /// Mean over r ∈ {0, 0.01, …, 1} of the best precision at recall ≥ r.
    pub fn interpolated_ap(&self) -> f64 {
        let total: f64 = (0..RECALL_POINTS)
            .map(|k| {
                let r = k as f64 / 100.0;
                let idx = self.recall.partition_point(|&rc| rc < r);
                self.envelope.get(idx).copied().unwrap_or(0.0)
            })
            .sum();
        total / RECALL_POINTS as f64
    }
}

/// Detection order used everywhere: score descending, stable.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// AP of single-class detections against single-class ground truth at one
/// IoU threshold. Returns `None` when there is no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[Annotation], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let matches = greedy_match(dets, gts, iou_thr);
    let order = score_order(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let flags: Vec<bool> = order.iter().map(|&i| matches[i].is_some()).collect();
    Some(PrCurve::from_flags(&flags, gts.len()).interpolated_ap())
}

/// Matching that prefers in-bucket ground truths; a detection claiming an
/// out-of-bucket ground truth is ignored. `dets` are in score order.
fn match_with_ignore(dets: &[&Detection], gts: &[&Annotation], gt_ignored: &[bool], thr: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt_ignored[g] != pass_ignored {
                    continue;
                }
                let ov = iou(&d.bbox, &gt.bbox);
                if ov >= thr && best.map_or(true, |(_, b)| ov > b) {
                    best = Some((g, ov));
                }
            }
            if best.is_some() {
                break;
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push(best.map(|(g, _)| g));
    }
    out
}

pub fn evaluate(dets: &[ImageDetection], gts: &DatasetManifest, bounds: SizeBounds) -> Result<EvalResult, EvalError> {
    let known: HashSet<u64> = gts.images.iter().map(|im| im.id).collect();
    if let Some((index, d)) = dets.iter().enumerate().find(|(_, d)| !known.contains(&d.image_id)) {
        return Err(EvalError::UnknownImage { index, image_id: d.image_id });
    }
    let order = score_order(&dets.iter().map(|d| d.detection.score).collect::<Vec<_>>());

    let mut per_class = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for class in LesionClass::ALL {
        // Per image: ground truths and score-ordered detections of this class.
        let mut gt_by_image: HashMap<u64, Vec<&Annotation>> = HashMap::new();
        for a in gts.annotations.iter().filter(|a| a.class == class) {
            gt_by_image.entry(a.image_id).or_default().push(a);
        }
        let mut det_by_image: HashMap<u64, Vec<usize>> = HashMap::new();
        for &i in &order {
            if dets[i].detection.class == class {
                det_by_image.entry(dets[i].image_id).or_default().push(i);
            }
        }
        let class_order: Vec<usize> = order.iter().copied().filter(|&i| dets[i].detection.class == class).collect();

        let mut c = BucketCounts { detections: class_order.len(), ..Default::default() };
        for (slot, bucket) in AreaBucket::ALL.iter().enumerate() {
            c.gt[slot] =
                gt_by_image.values().flatten().filter(|a| bucket.contains(a.bbox.area(), &bounds)).count();
        }
        counts.insert(class, c);

        let ap = |bucket: AreaBucket, thr: f64| -> Option<f64> {
            let num_gt = c.gt[AreaBucket::ALL.iter().position(|&b| b == bucket).unwrap()];
            if num_gt == 0 {
                return None;
            }
            // true/false positive per non-ignored detection index
            let mut outcome: HashMap<usize, bool> = HashMap::new();
            for im in &gts.images {
                let im_dets = det_by_image.get(&im.id).map(Vec::as_slice).unwrap_or(&[]);
                if im_dets.is_empty() {
                    continue;
                }
                let empty = Vec::new();
                let im_gts = gt_by_image.get(&im.id).unwrap_or(&empty);
                let det_refs: Vec<&Detection> = im_dets.iter().map(|&i| &dets[i].detection).collect();
                let outcomes: Vec<Option<bool>> = if bucket == AreaBucket::All {
                    let owned: Vec<Detection> = det_refs.iter().map(|d| **d).collect();
                    let owned_gts: Vec<Annotation> = im_gts.iter().map(|a| **a).collect();
                    greedy_match(&owned, &owned_gts, thr).iter().map(|m| Some(m.is_some())).collect()
                } else {
                    let ignored: Vec<bool> =
                        im_gts.iter().map(|a| !bucket.contains(a.bbox.area(), &bounds)).collect();
                    match_with_ignore(&det_refs, im_gts, &ignored, thr)
                        .into_iter()
                        .zip(&det_refs)
                        .map(|(m, d)| match m {
                            Some(g) if ignored[g] => None,
                            Some(_) => Some(true),
                            None if !bucket.contains(d.bbox.area(), &bounds) => None,
                            None => Some(false),
                        })
                        .collect()
                };
                for (&i, o) in im_dets.iter().zip(outcomes) {
                    if let Some(tp) = o {
                        outcome.insert(i, tp);
                    }
                }
            }
            let flags: Vec<bool> = class_order.iter().filter_map(|i| outcome.get(i).copied()).collect();
            Some(PrCurve::from_flags(&flags, num_gt).interpolated_ap())
        };

        let mean_over = |vals: Vec<Option<f64>>| -> Option<f64> {
            let v: Vec<f64> = vals.into_iter().flatten().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let averaged = |bucket: AreaBucket| mean_over(IOU_THRESHOLDS.iter().map(|&t| ap(bucket, t)).collect());
        let map = averaged(AreaBucket::All);
        let ap_small = averaged(AreaBucket::Small);
        let ap_medium = averaged(AreaBucket::Medium);
        let ap_large = averaged(AreaBucket::Large);
        let metrics = Metrics { map, map50: ap(AreaBucket::All, 0.5), map75: ap(AreaBucket::All, 0.75), ap_small, ap_medium, ap_large };
        per_class.insert(class, metrics);
    }

    let mut mean = [None; 6];
    for (slot, m) in mean.iter_mut().enumerate() {
        let vals: Vec<f64> = per_class.values().filter_map(|pc: &Metrics| pc.values()[slot]).collect();
        if !vals.is_empty() {
            *m = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(EvalResult { per_class, mean: Metrics::from_values(mean), counts })
}

// --- text reports --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// Model | mAP | mAP50 | mAP75
    Summary,
    /// φ | mAP | mAP50 | mAP75 | mAPs | APm | mAPL
    Ablation,
}

impl ReportFormat {
    fn header(self) -> (&'static str, &'static [&'static str]) {
        match self {
            ReportFormat::Summary => ("Model", &["mAP", "mAP50", "mAP75"]),
            ReportFormat::Ablation => ("phi", &["mAP", "mAP50", "mAP75", "mAPs", "APm", "mAPL"]),
        }
    }

    fn columns(self, m: &Metrics) -> Vec<Option<f64>> {
        match self {
            ReportFormat::Summary => vec![m.map, m.map50, m.map75],
            ReportFormat::Ablation => m.values().to_vec(),
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "summary" => Ok(ReportFormat::Summary),
            "ablation" => Ok(ReportFormat::Ablation),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

const VALUE_WIDTH: usize = 8;

/// Fixed-width table, one row per `(label, result)`, percentages with one
/// decimal and `-` for undefined values.
pub fn report(rows: &[(String, &EvalResult)], format: ReportFormat) -> String {
    let (first, cols) = format.header();
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).chain([first.len()]).max().unwrap_or(0) + 2;
    let mut out = format!("{first:<label_w$}");
    for c in cols {
        out.push_str(&format!("{c:>VALUE_WIDTH$}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + VALUE_WIDTH * cols.len()));
    out.push('\n');
    for (label, result) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for v in format.columns(&result.mean) {
            let cell = v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0));
            out.push_str(&format!("{cell:>VALUE_WIDTH$}"));
        }
        out.push('\n');
    }
    out
}

/// Parses a report back into `(label, values in percent)` rows.
pub fn parse_report(text: &str, format: ReportFormat) -> Result<Vec<(String, Vec<Option<f64>>)>, EvalError> {
    let n = format.header().1.len();
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(2) {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < n + 1 {
            return Err(EvalError::Parse { line: line_no + 1, reason: format!("expected {} columns", n + 1) });
        }
        let split = tokens.len() - n;
        let values = tokens[split..]
            .iter()
            .map(|t| {
                if *t == "-" {
                    Ok(None)
                } else {
                    t.parse::<f64>()
                        .map(Some)
                        .map_err(|e| EvalError::Parse { line: line_no + 1, reason: e.to_string() })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((tokens[..split].join(" "), values));
    }
    Ok(rows)
}
