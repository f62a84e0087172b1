//! Class-agnostic per-frame box proposals.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalSource {
    Grid,
    FrameDiff,
    External,
}

/// Axis-aligned box in pixels, `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxProposal {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub source: ProposalSource,
    /// Carried through from external detectors; never used for selection.
    pub score: Option<f64>,
}

impl BoxProposal {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, source: ProposalSource) -> Self {
        BoxProposal {
            x1,
            y1,
            x2,
            y2,
            source,
            score: None,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite
            || self.x1 < 0.0
            || self.y1 < 0.0
            || self.x1 >= self.x2
            || self.y1 >= self.y2
            || self.x2 > width as f64
            || self.y2 > height as f64
        {
            return Err(Error::validation(format!(
                "box [{}, {}, {}, {}] is not inside a {width}x{height} frame",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BoxProposal) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// Multi-scale square anchor lattice. Each scale `s` steps by
/// `max(1, round(s·stride_fraction))` pixels.
pub fn grid_proposals(
    width: usize,
    height: usize,
    scales: &[usize],
    stride_fraction: f64,
) -> Result<Vec<BoxProposal>> {
    if scales.is_empty() {
        return Err(Error::config("grid proposals need at least one scale"));
    }
    if !(stride_fraction > 0.0 && stride_fraction.is_finite()) {
        return Err(Error::config("stride fraction must be positive"));
    }
    let mut out = Vec::new();
    for &s in scales {
        if s == 0 || s > width.min(height) {
            return Err(Error::config(format!(
                "scale {s} does not fit a {width}x{height} frame"
            )));
        }
        let step = ((s as f64 * stride_fraction).round() as usize).max(1);
        let nx = (width - s) / step + 1;
        let ny = (height - s) / step + 1;
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = ((ix * step) as f64, (iy * step) as f64);
                out.push(BoxProposal::new(x, y, x + s as f64, y + s as f64, ProposalSource::Grid));
            }
        }
    }
    Ok(out)
}

/// Per-pixel change mask: max absolute channel difference above `threshold`.
pub fn change_mask(prev: &Frame, cur: &Frame, threshold: u8) -> Vec<bool> {
    prev.data
        .chunks_exact(3)
        .zip(cur.data.chunks_exact(3))
        .map(|(a, b)| {
            (0..3)
                .map(|c| a[c].abs_diff(b[c]))
                .max()
                .unwrap_or(0)
                > threshold
        })
        .collect()
}

/// Tight boxes `(x0, y0, x1, y1, area)` of the 8-connected components of a mask.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<(usize, usize, usize, usize, usize)> {
    let mut label = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] {
            continue;
        }
        label[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1, mut area) = (usize::MAX, usize::MAX, 0, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % width, p / width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            area += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && !label[q] {
                        label[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push((x0, y0, x1, y1, area));
    }
    out
}

/// Fraction of each side's length added as padding around motion components.
pub const FRAMEDIFF_DILATION: f64 = 0.1;

pub fn framediff_proposals(
    prev: &Frame,
    cur: &Frame,
    diff_threshold: u8,
    min_area: usize,
) -> Result<Vec<BoxProposal>> {
    if !prev.same_dims(cur) {
        return Err(Error::shape("frame difference of differently sized frames"));
    }
    let (w, h) = (cur.width as f64, cur.height as f64);
    let mask = change_mask(prev, cur, diff_threshold);
    Ok(connected_components(&mask, cur.width, cur.height)
        .into_iter()
        .filter(|c| c.4 >= min_area.max(1))
        .map(|(x0, y0, x1, y1, _)| {
            let dx = FRAMEDIFF_DILATION * (x1 - x0) as f64;
            let dy = FRAMEDIFF_DILATION * (y1 - y0) as f64;
            BoxProposal::new(
                (x0 as f64 - dx).max(0.0),
                (y0 as f64 - dy).max(0.0),
                (x1 as f64 + dx).min(w),
                (y1 as f64 + dy).min(h),
                ProposalSource::FrameDiff,
            )
        })
        .collect())
}

/// Drops boxes overlapping an earlier kept box at IoU above `max_iou`, then
/// truncates to `cap`.
pub fn dedup_and_cap(boxes: Vec<BoxProposal>, max_iou: f64, cap: usize) -> Vec<BoxProposal> {
    let mut kept: Vec<BoxProposal> = Vec::new();
    for b in boxes {
        if kept.len() >= cap {
            break;
        }
        if kept.iter().all(|k| k.iou(&b) <= max_iou) {
            kept.push(b);
        }
    }
    kept
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalRecord {
    frame: usize,
    boxes: Vec<Vec<f64>>,
}

/// Reads line-delimited `{"frame": n, "boxes": [[x1,y1,x2,y2(,score)], ...]}`.
pub fn load_external_proposals(
    path: &Path,
    width: usize,
    height: usize,
) -> Result<BTreeMap<usize, Vec<BoxProposal>>> {
    let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
    parse_external_proposals(BufReader::new(file), &path.display().to_string(), width, height)
}

pub fn parse_external_proposals<R: BufRead>(
    reader: R,
    name: &str,
    width: usize,
    height: usize,
) -> Result<BTreeMap<usize, Vec<BoxProposal>>> {
    let mut out: BTreeMap<usize, Vec<BoxProposal>> = BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{name}:{}", n + 1);
        let rec: ExternalRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        })?;
        let entry = out.entry(rec.frame).or_default();
        for raw in rec.boxes {
            if raw.len() != 4 && raw.len() != 5 {
                return Err(Error::Parse {
                    location,
                    message: format!("box needs 4 coordinates (plus optional score), got {}", raw.len()),
                });
            }
            let mut b = BoxProposal::new(raw[0], raw[1], raw[2], raw[3], ProposalSource::External);
            b.score = raw.get(4).copied();
            b.validate(width, height)
                .map_err(|e| Error::validation(format!("{location}: {e}")))?;
            entry.push(b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_scale_gives_one_box() {
        let b = grid_proposals(64, 64, &[64], 0.3).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].corners(), [0.0, 0.0, 64.0, 64.0]);
    }

    #[test]
    fn half_stride_lattice_count() {
        assert_eq!(grid_proposals(64, 64, &[32], 0.5).unwrap().len(), 9);
    }

    #[test]
    fn oversized_scale_is_config_error() {
        assert!(matches!(grid_proposals(64, 48, &[56], 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn identical_frames_have_no_motion_boxes() {
        let f = Frame::filled(32, 32, [10, 20, 30]);
        assert!(framediff_proposals(&f, &f, 10, 1).unwrap().is_empty());
    }

    #[test]
    fn dilation_and_clipping() {
        let a = Frame::filled(40, 40, [0, 0, 0]);
        let mut b = a.clone();
        for y in 0..10 {
            for x in 30..40 {
                b.set_pixel(x, y, [255, 255, 255]);
            }
        }
        let boxes = framediff_proposals(&a, &b, 10, 4).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].corners(), [29.0, 0.0, 40.0, 11.0]);
    }

    #[test]
    fn small_components_are_dropped() {
        let a = Frame::filled(20, 20, [0, 0, 0]);
        let mut b = a.clone();
        b.set_pixel(3, 3, [200, 0, 0]);
        assert!(framediff_proposals(&a, &b, 10, 2).unwrap().is_empty());
        assert_eq!(framediff_proposals(&a, &b, 10, 1).unwrap().len(), 1);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let mask = [true, false, false, true];
        assert_eq!(connected_components(&mask, 2, 2).len(), 1);
    }

    #[test]
    fn dedup_keeps_first() {
        let a = BoxProposal::new(0.0, 0.0, 10.0, 10.0, ProposalSource::FrameDiff);
        let mut b = a;
        b.source = ProposalSource::Grid;
        let c = BoxProposal::new(20.0, 20.0, 30.0, 30.0, ProposalSource::Grid);
        let kept = dedup_and_cap(vec![a, b, c], 0.95, 100);
        assert_eq!(kept, vec![a, c]);
        assert_eq!(dedup_and_cap(vec![a, c], 0.95, 1), vec![a]);
    }

    #[test]
    fn external_records() {
        let text = "{\"frame\": 0, \"boxes\": [[0,0,10,10]]}\n";
        let m = parse_external_proposals(text.as_bytes(), "p", 64, 64).unwrap();
        assert_eq!(m[&0].len(), 1);
        assert_eq!(m[&0][0].source, ProposalSource::External);

        let inverted = "{\"frame\": 0, \"boxes\": [[10,0,5,10]]}\n";
        assert!(matches!(
            parse_external_proposals(inverted.as_bytes(), "p", 64, 64),
            Err(Error::Validation(_))
        ));

        let malformed = "{\"frame\": 0, \"boxes\": [[0,0,10,10]]}\n{\"frame\": 1, \"boxes\": [[\n";
        match parse_external_proposals(malformed.as_bytes(), "p", 64, 64) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "p:2"),
            other => panic!("unexpected {other:?}"),
        }

        let many: String = (0..5)
            .map(|f| {
                let boxes: Vec<String> = (0..10).map(|i| format!("[{i},0,{},5]", i + 3)).collect();
                format!("{{\"frame\": {f}, \"boxes\": [{}]}}\n", boxes.join(","))
            })
            .collect();
        let m = parse_external_proposals(many.as_bytes(), "p", 64, 64).unwrap();
        assert_eq!(m.values().map(Vec::len).sum::<usize>(), 50);
    }
}
