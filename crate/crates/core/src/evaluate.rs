//! Offline evaluation of stored frame records against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{link_tubes, ActionTube, ScoredBox, TubeLinker};
use crate::error::{Error, Result};
use crate::metrics::{
    auc_curve, cluster_label_map, curve_area, default_sigmas, map_at, recall_at, Detection, GazeAucAccumulator,
    GazeGeometry, GtTube, GtVideo, MetricRecord,
};
use crate::pipeline::FrameRecord;
use crate::tensor::{read_stf1_all, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sigmas: Vec<f64>,
    pub gaze: bool,
    pub geometry: GazeGeometry,
    pub gap_tolerance: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sigmas: default_sigmas(),
            gaze: false,
            geometry: GazeGeometry::default(),
            gap_tolerance: TubeLinker::DEFAULT_GAP,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::config("overlap thresholds must lie in (0, 1]"));
        }
        if self.sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("overlap thresholds must be strictly ascending"));
        }
        self.geometry.validate()
    }
}

/// Everything stored for one video by a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoPredictions {
    pub records: Vec<FrameRecord>,
    /// One `H × W` map per record, when dumped.
    pub saliency: Option<Vec<Tensor>>,
}

impl VideoPredictions {
    pub fn tubes(&self, gap_tolerance: usize) -> Vec<ActionTube> {
        let rank1: Vec<(usize, Option<ScoredBox>)> = self.records.iter().map(|r| (r.frame, r.rank1())).collect();
        link_tubes(rank1.iter().map(|(f, b)| (*f, b.as_ref())), gap_tolerance)
    }

    pub fn active_frames(&self) -> BTreeSet<usize> {
        self.records.iter().filter(|r| r.active).map(|r| r.frame).collect()
    }
}

pub fn parse_records<R: BufRead>(reader: R, name: &str) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{name}:{}", n + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads `<video>.jsonl` and, if present, `<video>.saliency.stf1` from `dir`.
/// Returns `None` when the record file does not exist.
pub fn load_predictions(dir: &Path, video: &str) -> Result<Option<VideoPredictions>> {
    let (records_path, saliency_path, _) = crate::pipeline::per_video_outputs(dir, video);
    if !records_path.exists() {
        return Ok(None);
    }
    let file = File::open(&records_path).map_err(|e| Error::at_path(&records_path, e))?;
    let records = parse_records(BufReader::new(file), &records_path.display().to_string())?;
    let saliency = if saliency_path.exists() {
        let file = File::open(&saliency_path).map_err(|e| Error::at_path(&saliency_path, e))?;
        Some(read_stf1_all(&mut BufReader::new(file))?)
    } else {
        None
    };
    Ok(Some(VideoPredictions { records, saliency }))
}

/// Intersection over union of a predicted frame set and an inclusive interval.
pub fn temporal_iou(pred: &BTreeSet<usize>, gt: (usize, usize)) -> f64 {
    let gt_set: BTreeSet<usize> = (gt.0..=gt.1).collect();
    let inter = pred.intersection(&gt_set).count();
    let union = pred.union(&gt_set).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Metric records for `gts` given per-video predictions. With cluster
/// `assignments`, detections take the majority gt label of their cluster;
/// otherwise they take their video's gt label.
pub fn evaluate(
    gts: &[GtVideo],
    preds: &BTreeMap<String, VideoPredictions>,
    assignments: Option<&BTreeMap<String, usize>>,
    cfg: &EvalConfig,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let missing: Vec<&str> = gts
        .iter()
        .filter(|g| !preds.contains_key(&g.video))
        .map(|g| g.video.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!("no predictions for videos: {}", missing.join(", "))));
    }
    let labels: BTreeMap<String, String> = gts.iter().map(|g| (g.video.clone(), g.label.clone())).collect();
    let cluster_labels = assignments.map(|a| cluster_label_map(a, &labels));
    let mut dets = Vec::new();
    let mut gt_tubes: Vec<GtTube> = Vec::new();
    let mut tiou = Vec::new();
    for g in gts {
        gt_tubes.extend(g.gt_tubes());
        let p = &preds[&g.video];
        let label = match (assignments, &cluster_labels) {
            (Some(a), Some(m)) => a.get(&g.video).and_then(|c| m.get(c)).cloned(),
            _ => Some(g.label.clone()),
        };
        for tube in p.tubes(cfg.gap_tolerance) {
            let mut d = Detection::from_tube(&g.video, &tube);
            d.label = label.clone();
            dets.push(d);
        }
        if let Some(first) = g.tubes.first() {
            if let (Some(&s), Some(&e)) = (first.keys().next(), first.keys().next_back()) {
                tiou.push(temporal_iou(&p.active_frames(), (s, e)));
            }
        }
    }
    let mut out = Vec::new();
    for &s in &cfg.sigmas {
        out.push(MetricRecord::new("recall", Some(s), recall_at(&dets, &gt_tubes, s)));
    }
    for &s in &cfg.sigmas {
        out.push(MetricRecord::new("map", Some(s), map_at(&dets, &gt_tubes, s)));
    }
    let curve = auc_curve(&dets, &gt_tubes, &cfg.sigmas);
    for &(s, v) in &curve {
        out.push(MetricRecord::new("auc_curve", Some(s), v));
    }
    out.push(MetricRecord::new("auc", None, curve_area(&curve)));
    if !tiou.is_empty() {
        out.push(MetricRecord::new("temporal_iou", None, tiou.iter().sum::<f64>() / tiou.len() as f64));
    }
    if cfg.gaze {
        let (auc, aae) = gaze_metrics(gts, preds, &cfg.geometry)?;
        out.push(MetricRecord::new("gaze_auc", None, auc));
        out.push(MetricRecord::new("gaze_aae", None, aae));
    }
    Ok(out)
}

/// Pooled gaze AUC and mean angular error over every frame that has both a
/// record and a gt gaze point.
pub fn gaze_metrics(
    gts: &[GtVideo],
    preds: &BTreeMap<String, VideoPredictions>,
    geometry: &GazeGeometry,
) -> Result<(f64, f64)> {
    let mut acc = GazeAucAccumulator::new();
    let mut angles = Vec::new();
    for g in gts {
        let p = &preds[&g.video];
        if p.records.is_empty() {
            continue;
        }
        let maps = p
            .saliency
            .as_ref()
            .ok_or_else(|| Error::validation(format!("video {}: gaze evaluation needs saliency maps", g.video)))?;
        if maps.len() != p.records.len() {
            return Err(Error::validation(format!(
                "video {}: {} saliency maps for {} records",
                g.video,
                maps.len(),
                p.records.len()
            )));
        }
        let gaze: BTreeMap<usize, (f64, f64)> = g.gaze.iter().map(|&(f, x, y)| (f, (x, y))).collect();
        for (r, map) in p.records.iter().zip(maps) {
            let Some(&fix) = gaze.get(&r.frame) else { continue };
            let (h, w) = match map.dims() {
                [h, w] => (*h, *w),
                other => return Err(Error::shape(format!("saliency map {other:?}"))),
            };
            acc.push(map, fix)?;
            angles.push(geometry.angle_between((r.gaze[0], r.gaze[1]), fix, (w, h)));
        }
    }
    let aae = if angles.is_empty() {
        0.0
    } else {
        angles.iter().sum::<f64>() / angles.len() as f64
    };
    Ok((acc.auc(), aae))
}

pub fn load_assignments(path: &Path) -> Result<BTreeMap<String, usize>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        video: String,
        cluster: usize,
    }
    let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), n + 1),
            message: e.to_string(),
        })?;
        out.insert(row.video, row.cluster);
    }
    Ok(out)
}

/// File-level `eval`.
pub fn cmd_eval(
    predictions: &Path,
    ground_truth: &Path,
    assignments: Option<&Path>,
    cfg: &EvalConfig,
) -> Result<Vec<MetricRecord>> {
    let gts = crate::metrics::load_ground_truth(ground_truth)?;
    let mut preds = BTreeMap::new();
    for g in &gts {
        if let Some(p) = load_predictions(predictions, &g.video)? {
            preds.insert(g.video.clone(), p);
        }
    }
    let assignments = assignments.map(load_assignments).transpose()?;
    evaluate(&gts, &preds, assignments.as_ref(), cfg)
}
