//! Localization and gaze evaluation: IoU, tube IoU, recall, mAP, AUC series,
//! gaze AUC and angular error, plus the ground-truth file format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ActionTube;
use crate::error::{Error, Result};
use crate::proposals::{BoxProposal, ProposalSource};
use crate::tensor::Tensor;

pub fn iou(a: &BoxProposal, b: &BoxProposal) -> f64 {
    a.iou(b)
}

/// Per-frame boxes of one tube.
pub type TubeBoxes = BTreeMap<usize, BoxProposal>;

/// Mean per-frame IoU over the union of frames; a frame covered by only one
/// tube scores zero.
pub fn tube_iou(a: &TubeBoxes, b: &TubeBoxes) -> f64 {
    let frames: BTreeSet<usize> = a.keys().chain(b.keys()).copied().collect();
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames
        .iter()
        .map(|f| match (a.get(f), b.get(f)) {
            (Some(x), Some(y)) => x.iou(y),
            _ => 0.0,
        })
        .sum();
    total / frames.len() as f64
}

pub fn tube_boxes(tube: &ActionTube) -> TubeBoxes {
    tube.entries.iter().map(|e| (e.frame, e.bbox)).collect()
}

/// A predicted tube ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video: String,
    pub boxes: TubeBoxes,
    /// Higher is more confident.
    pub score: f64,
    pub label: Option<String>,
}

impl Detection {
    /// Confidence is the negated mean box energy.
    pub fn from_tube(video: &str, tube: &ActionTube) -> Self {
        Detection {
            video: video.to_string(),
            boxes: tube_boxes(tube),
            score: -tube.mean_energy(),
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtTube {
    pub video: String,
    pub label: String,
    pub boxes: TubeBoxes,
}

/// Fraction of gt tubes overlapped by at least one detection of the same
/// video with tube IoU ≥ σ.
pub fn recall_at(dets: &[Detection], gts: &[GtTube], sigma: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let hit = gts
        .iter()
        .filter(|g| {
            dets.iter()
                .any(|d| d.video == g.video && tube_iou(&d.boxes, &g.boxes) >= sigma)
        })
        .count();
    hit as f64 / gts.len() as f64
}

/// All-points interpolated AP from per-rank TP flags and the number of gts.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (rank, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (rank + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Ranks `dets` by score (stable) and matches each to the highest-IoU
/// unmatched gt of the same video with IoU ≥ σ.
pub fn match_detections(dets: &[&Detection], gts: &[&GtTube], sigma: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&d| {
            let det = dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.video != det.video {
                    continue;
                }
                let v = tube_iou(&det.boxes, &gt.boxes);
                if v >= sigma && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Mean over gt classes of the per-class AP. Detections without a label
/// never match.
pub fn map_at(dets: &[Detection], gts: &[GtTube], sigma: f64) -> f64 {
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.label.as_str()).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let d: Vec<&Detection> = dets.iter().filter(|d| d.label.as_deref() == Some(c)).collect();
            let g: Vec<&GtTube> = gts.iter().filter(|g| g.label == c).collect();
            average_precision(&match_detections(&d, &g, sigma), g.len())
        })
        .sum();
    total / classes.len() as f64
}

/// Class-agnostic AP at σ.
pub fn agnostic_ap_at(dets: &[Detection], gts: &[GtTube], sigma: f64) -> f64 {
    let d: Vec<&Detection> = dets.iter().collect();
    let g: Vec<&GtTube> = gts.iter().collect();
    average_precision(&match_detections(&d, &g, sigma), g.len())
}

/// Class-agnostic AP for each threshold.
pub fn auc_curve(dets: &[Detection], gts: &[GtTube], sigmas: &[f64]) -> Vec<(f64, f64)> {
    sigmas.iter().map(|&s| (s, agnostic_ap_at(dets, gts, s))).collect()
}

/// Area under a (σ, value) series by the trapezoid rule.
pub fn curve_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Maps every cluster to the majority gt label of its videos; ties go to the
/// smaller label.
pub fn cluster_label_map(
    assignments: &BTreeMap<String, usize>,
    labels: &BTreeMap<String, String>,
) -> BTreeMap<usize, String> {
    let mut votes: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
    for (video, &c) in assignments {
        if let Some(label) = labels.get(video) {
            *votes.entry(c).or_default().entry(label).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .filter_map(|(c, v)| {
            let best = v.iter().map(|(l, n)| (*n, std::cmp::Reverse(*l))).max()?;
            Some((c, best.1 .0.to_string()))
        })
        .collect()
}

/// ROC area of pooled saliency values: TPR counts fixations at or above a
/// threshold, FPR counts all pixels at or above it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GazeAucAccumulator {
    pixels: Vec<f32>,
    fixations: Vec<f32>,
}

impl GazeAucAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `saliency` is `H × W`; `fixation` is `(x, y)` in pixels.
    pub fn push(&mut self, saliency: &Tensor, fixation: (f64, f64)) -> Result<()> {
        let (h, w) = match saliency.dims() {
            [h, w] => (*h, *w),
            other => return Err(Error::shape(format!("saliency map {other:?}, expected [H, W]"))),
        };
        let (x, y) = fixation;
        if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
            return Err(Error::validation(format!("fixation ({x}, {y}) outside a {w}x{h} frame")));
        }
        self.fixations.push(saliency.data()[y as usize * w + x as usize]);
        self.pixels.extend_from_slice(saliency.data());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    pub fn auc(&self) -> f64 {
        if self.fixations.is_empty() {
            return 0.0;
        }
        let mut pix = self.pixels.clone();
        let mut fix = self.fixations.clone();
        pix.sort_by(|a, b| b.total_cmp(a));
        fix.sort_by(|a, b| b.total_cmp(a));
        let (np, nf) = (pix.len() as f64, fix.len() as f64);
        let (mut ip, mut jf) = (0usize, 0usize);
        let (mut prev_fpr, mut prev_tpr) = (0.0, 0.0);
        let mut area = 0.0;
        while ip < pix.len() {
            let t = pix[ip];
            while ip < pix.len() && pix[ip] >= t {
                ip += 1;
            }
            while jf < fix.len() && fix[jf] >= t {
                jf += 1;
            }
            let (fpr, tpr) = (ip as f64 / np, jf as f64 / nf);
            area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
            prev_fpr = fpr;
            prev_tpr = tpr;
        }
        area + (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0
    }
}

pub fn gaze_auc<'a, I>(frames: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Tensor, (f64, f64))>,
{
    let mut acc = GazeAucAccumulator::new();
    for (s, p) in frames {
        acc.push(s, p)?;
    }
    Ok(acc.auc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeGeometry {
    pub viewing_distance: f64,
    /// Physical screen width in the same unit as `viewing_distance`.
    pub screen_width: f64,
}

impl Default for GazeGeometry {
    fn default() -> Self {
        GazeGeometry {
            viewing_distance: 60.0,
            screen_width: 40.0,
        }
    }
}

impl GazeGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.viewing_distance > 0.0 && self.screen_width > 0.0)
            || !self.viewing_distance.is_finite()
            || !self.screen_width.is_finite()
        {
            return Err(Error::config("gaze geometry needs a positive viewing distance and screen width"));
        }
        Ok(())
    }

    /// Angle in degrees between the view rays through two pixel positions
    /// of a `width × height` image stretched across the screen.
    pub fn angle_between(&self, a: (f64, f64), b: (f64, f64), frame: (usize, usize)) -> f64 {
        let pitch = self.screen_width / frame.0 as f64;
        let ray = |p: (f64, f64)| {
            [
                (p.0 - frame.0 as f64 / 2.0) * pitch,
                (p.1 - frame.1 as f64 / 2.0) * pitch,
                self.viewing_distance,
            ]
        };
        let (u, v) = (ray(a), ray(b));
        let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// Mean angular error in degrees.
pub fn gaze_aae(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    geometry: Option<&GazeGeometry>,
    frame: (usize, usize),
) -> Result<f64> {
    let geometry = geometry.ok_or_else(|| Error::config("gaze_aae needs a viewing geometry"))?;
    geometry.validate()?;
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "{} predicted gaze points for {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| geometry.angle_between(p, g, frame))
        .sum();
    Ok(total / pred.len() as f64)
}

/// One line of the metric output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub metric: String,
    pub sigma: Option<f64>,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, sigma: Option<f64>, value: f64) -> Self {
        MetricRecord {
            metric: metric.into(),
            sigma,
            value,
        }
    }
}

pub fn write_metric_records<W: Write + ?Sized>(w: &mut W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Ground-truth label: written as a string, numbers accepted on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Text(String),
    Number(i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTubeEntry {
    frame: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    /// Tube id for videos with several actors; 0 when omitted.
    #[serde(default, skip_serializing_if = "is_zero")]
    tube: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGt {
    video: String,
    label: RawLabel,
    #[serde(default)]
    tubes: Vec<RawTubeEntry>,
    #[serde(default)]
    gaze: Vec<[f64; 3]>,
}

/// Ground truth of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct GtVideo {
    pub video: String,
    pub label: String,
    /// Tubes ordered by tube id.
    pub tubes: Vec<TubeBoxes>,
    /// `(frame, x, y)`, frames strictly increasing.
    pub gaze: Vec<(usize, f64, f64)>,
}

impl GtVideo {
    pub fn gt_tubes(&self) -> Vec<GtTube> {
        self.tubes
            .iter()
            .map(|b| GtTube {
                video: self.video.clone(),
                label: self.label.clone(),
                boxes: b.clone(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.video.is_empty() {
            return Err(Error::validation("empty video id"));
        }
        for (t, tube) in self.tubes.iter().enumerate() {
            if tube.is_empty() {
                return Err(Error::validation(format!("video {}: tube {t} has no boxes", self.video)));
            }
            for (f, b) in tube {
                let ok = [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite())
                    && b.x1 >= 0.0
                    && b.y1 >= 0.0
                    && b.x1 < b.x2
                    && b.y1 < b.y2;
                if !ok {
                    return Err(Error::validation(format!(
                        "video {}: malformed box at frame {f}",
                        self.video
                    )));
                }
            }
        }
        let frames_ok = self.gaze.windows(2).all(|w| w[1].0 > w[0].0);
        if !frames_ok || self.gaze.iter().any(|g| !(g.1.is_finite() && g.2.is_finite())) {
            return Err(Error::validation(format!("video {}: malformed gaze track", self.video)));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        let mut tubes = Vec::new();
        for (id, tube) in self.tubes.iter().enumerate() {
            for (&frame, b) in tube {
                tubes.push(RawTubeEntry {
                    frame,
                    bbox: b.corners(),
                    tube: id,
                });
            }
        }
        let raw = RawGt {
            video: self.video.clone(),
            label: RawLabel::Text(self.label.clone()),
            tubes,
            gaze: self.gaze.iter().map(|&(f, x, y)| [f as f64, x, y]).collect(),
        };
        serde_json::to_string(&raw).map_err(|e| Error::validation(e.to_string()))
    }

    pub fn from_json_line(line: &str, location: &str) -> Result<Self> {
        let raw: RawGt = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: location.to_string(),
            message: e.to_string(),
        })?;
        let mut tubes: BTreeMap<usize, TubeBoxes> = BTreeMap::new();
        for e in raw.tubes {
            let [x1, y1, x2, y2] = e.bbox;
            let b = BoxProposal::new(x1, y1, x2, y2, ProposalSource::External);
            if tubes.entry(e.tube).or_default().insert(e.frame, b).is_some() {
                return Err(Error::Parse {
                    location: location.to_string(),
                    message: format!("tube {} lists frame {} twice", e.tube, e.frame),
                });
            }
        }
        let mut gaze = Vec::with_capacity(raw.gaze.len());
        for [f, x, y] in raw.gaze {
            if !(f >= 0.0 && f.fract() == 0.0) {
                return Err(Error::Parse {
                    location: location.to_string(),
                    message: format!("gaze frame {f} is not a frame index"),
                });
            }
            gaze.push((f as usize, x, y));
        }
        let gt = GtVideo {
            video: raw.video,
            label: match raw.label {
                RawLabel::Text(s) => s,
                RawLabel::Number(n) => n.to_string(),
            },
            tubes: tubes.into_values().collect(),
            gaze,
        };
        gt.validate()
            .map_err(|e| Error::validation(format!("{location}: {e}")))?;
        Ok(gt)
    }
}

pub fn parse_ground_truth<R: BufRead>(reader: R, name: &str) -> Result<Vec<GtVideo>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{name}:{}", n + 1);
        let gt = GtVideo::from_json_line(&line, &location)?;
        if !seen.insert(gt.video.clone()) {
            return Err(Error::validation(format!("{location}: duplicate video {}", gt.video)));
        }
        out.push(gt);
    }
    Ok(out)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GtVideo>> {
    let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
    parse_ground_truth(BufReader::new(file), &path.display().to_string())
}

pub fn write_ground_truth<W: Write + ?Sized>(w: &mut W, gts: &[GtVideo]) -> Result<()> {
    for g in gts {
        writeln!(w, "{}", g.to_json_line()?)?;
    }
    Ok(())
}

/// Default overlap thresholds 0.1, 0.2, …, 0.6.
pub fn default_sigmas() -> Vec<f64> {
    (1..=6).map(|i| i as f64 / 10.0).collect()
}
