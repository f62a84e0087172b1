//! Attention maps from prediction errors, box energies, top-k selection,
//! tube linking, temporal action flags and gaze saliency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposals::BoxProposal;
use crate::stats::RunningStats;
use crate::tensor::{softmax2d, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub frame_index: usize,
    /// `w_f × h_f`, nonnegative, sums to one.
    pub alpha: Tensor,
}

impl AttentionMap {
    pub fn width(&self) -> usize {
        self.alpha.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.alpha.dims()[1]
    }

    /// Grid cell holding the largest weight (first in row-major order on ties).
    pub fn argmax_cell(&self) -> (usize, usize) {
        let idx = self.alpha.argmax();
        (idx / self.height(), idx % self.height())
    }
}

pub fn error_attention(error_map: &Tensor, frame_index: usize) -> Result<AttentionMap> {
    Ok(AttentionMap {
        frame_index,
        alpha: softmax2d(error_map)?,
    })
}

/// Pixel-space center of grid cell `(i, j)`.
pub fn cell_pixel_center(i: usize, j: usize, grid: (usize, usize), frame: (usize, usize)) -> (f64, f64) {
    let (gw, gh) = grid;
    let (w, h) = frame;
    (
        (i as f64 + 0.5) * w as f64 / gw as f64,
        (j as f64 + 0.5) * h as f64 / gh as f64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub k: usize,
    pub w_alpha: f64,
    pub w_t: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            k: 10,
            w_alpha: 0.75,
            w_t: 0.0,
        }
    }
}

impl EnergyConfig {
    pub const TEMPORAL_WEIGHT: f64 = 0.25;

    pub fn with_temporal(self) -> Self {
        EnergyConfig {
            w_t: Self::TEMPORAL_WEIGHT,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("energy.k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.w_alpha) {
            return Err(Error::config("energy.w_alpha must lie in [0, 1]"));
        }
        if !(self.w_t >= 0.0 && self.w_t.is_finite()) {
            return Err(Error::config("energy.w_t must be nonnegative"));
        }
        Ok(())
    }
}

/// Pixel location of the attention maximum.
pub fn attention_focus(attention: &AttentionMap, frame: (usize, usize)) -> (f64, f64) {
    let (i, j) = attention.argmax_cell();
    cell_pixel_center(i, j, (attention.width(), attention.height()), frame)
}

fn frame_diagonal(frame: (usize, usize)) -> f64 {
    ((frame.0 * frame.0 + frame.1 * frame.1) as f64).sqrt()
}

/// Energy of `b` given the error focus in pixels.
pub fn energy_at_focus(
    b: &BoxProposal,
    focus: (f64, f64),
    prev_selected: &[BoxProposal],
    cfg: &EnergyConfig,
    frame: (usize, usize),
) -> Result<f64> {
    b.validate(frame.0, frame.1)?;
    let diag = frame_diagonal(frame);
    let (cx, cy) = b.center();
    let phi = (cx - focus.0).hypot(cy - focus.1) / diag;
    let delta = prev_selected
        .iter()
        .map(|p| {
            let (px, py) = p.center();
            (cx - px).hypot(cy - py) / diag
        })
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or(0.0);
    Ok(cfg.w_alpha * phi + cfg.w_t * delta)
}

pub fn box_energy(
    b: &BoxProposal,
    attention: &AttentionMap,
    prev_selected: &[BoxProposal],
    cfg: &EnergyConfig,
    frame: (usize, usize),
) -> Result<f64> {
    energy_at_focus(b, attention_focus(attention, frame), prev_selected, cfg, frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BoxProposal,
    pub energy: f64,
}

/// The `k` lowest-energy proposals in ascending energy; ties go to the
/// smaller box, then to the earlier proposal.
pub fn select_topk(
    proposals: &[BoxProposal],
    attention: &AttentionMap,
    prev_selected: &[BoxProposal],
    cfg: &EnergyConfig,
    frame: (usize, usize),
) -> Result<Vec<ScoredBox>> {
    let focus = attention_focus(attention, frame);
    let mut scored = proposals
        .iter()
        .enumerate()
        .map(|(idx, b)| Ok((energy_at_focus(b, focus, prev_selected, cfg, frame)?, b.area(), idx)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(scored
        .into_iter()
        .take(cfg.k)
        .map(|(energy, _, idx)| ScoredBox {
            bbox: proposals[idx].clone(),
            energy,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub frame: usize,
    pub bbox: BoxProposal,
    pub energy: f64,
    /// Filled in across a short selection gap rather than selected.
    #[serde(default)]
    pub interpolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTube {
    pub id: usize,
    pub entries: Vec<TubeEntry>,
}

impl ActionTube {
    pub fn start(&self) -> usize {
        self.entries.first().map_or(0, |e| e.frame)
    }

    pub fn end(&self) -> usize {
        self.entries.last().map_or(0, |e| e.frame)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoxProposal> {
        let start = self.start();
        if self.entries.is_empty() || frame < start {
            return None;
        }
        self.entries.get(frame - start).map(|e| &e.bbox)
    }

    pub fn mean_energy(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.energy).sum::<f64>() / self.entries.len() as f64
    }

    pub fn is_contiguous(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].frame == w[0].frame + 1)
    }
}

/// Streaming tube linker with bounded state: it keeps only the last entry of
/// the open tube and emits entries as they are decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeLinker {
    pub gap_tolerance: usize,
    pub next_id: usize,
    pub open: Option<(usize, TubeEntry)>,
    /// Consecutive frames without a selection since the open tube's last entry.
    pub gap: usize,
}

/// What a `TubeLinker::push` decided for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkEvent {
    /// Tube closed by this frame's gap or by a new tube opening.
    pub closed: Option<usize>,
    /// `(tube id, entry)` pairs appended, oldest first.
    pub appended: Vec<(usize, TubeEntry)>,
}

impl TubeLinker {
    pub const DEFAULT_GAP: usize = 5;

    pub fn new(gap_tolerance: usize) -> Self {
        TubeLinker {
            gap_tolerance: gap_tolerance.max(1),
            next_id: 0,
            open: None,
            gap: 0,
        }
    }

    pub fn open_tube(&self) -> Option<usize> {
        self.open.as_ref().map(|(id, _)| *id)
    }

    /// Feeds the rank-1 selection of `frame` (None when nothing was selected).
    /// Frames must arrive in increasing order.
    pub fn push(&mut self, frame: usize, best: Option<&ScoredBox>) -> LinkEvent {
        let mut event = LinkEvent::default();
        let Some(best) = best else {
            if self.open.is_some() {
                self.gap += 1;
                if self.gap >= self.gap_tolerance {
                    event.closed = self.open.take().map(|(id, _)| id);
                    self.gap = 0;
                }
            }
            return event;
        };
        let entry = TubeEntry {
            frame,
            bbox: best.bbox.clone(),
            energy: best.energy,
            interpolated: false,
        };
        match self.open.take() {
            Some((id, last)) if frame > last.frame && frame - last.frame <= self.gap_tolerance => {
                let span = (frame - last.frame) as f64;
                for f in last.frame + 1..frame {
                    let t = (f - last.frame) as f64 / span;
                    event.appended.push((id, interpolate(&last, &entry, f, t)));
                }
                event.appended.push((id, entry.clone()));
                self.open = Some((id, entry));
            }
            previous => {
                event.closed = previous.map(|(id, _)| id);
                let id = self.next_id;
                self.next_id += 1;
                event.appended.push((id, entry.clone()));
                self.open = Some((id, entry));
            }
        }
        self.gap = 0;
        event
    }
}

fn interpolate(a: &TubeEntry, b: &TubeEntry, frame: usize, t: f64) -> TubeEntry {
    let ca = a.bbox.corners();
    let cb = b.bbox.corners();
    let c: Vec<f64> = ca.iter().zip(cb.iter()).map(|(x, y)| x + t * (y - x)).collect();
    TubeEntry {
        frame,
        bbox: BoxProposal::new(c[0], c[1], c[2], c[3], a.bbox.source),
        energy: a.energy + t * (b.energy - a.energy),
        interpolated: true,
    }
}

/// Applies the linker to one frame and keeps materialized tubes in `tubes`.
pub fn extend_tubes(
    tubes: &mut Vec<ActionTube>,
    linker: &mut TubeLinker,
    selected: &[ScoredBox],
    frame_index: usize,
) -> LinkEvent {
    let event = linker.push(frame_index, selected.first());
    for (id, entry) in &event.appended {
        match tubes.iter_mut().find(|t| t.id == *id) {
            Some(t) => t.entries.push(entry.clone()),
            None => tubes.push(ActionTube {
                id: *id,
                entries: vec![entry.clone()],
            }),
        }
    }
    event
}

/// Links a sequence of per-frame rank-1 selections into tubes.
pub fn link_tubes<'a, I>(selections: I, gap_tolerance: usize) -> Vec<ActionTube>
where
    I: IntoIterator<Item = (usize, Option<&'a ScoredBox>)>,
{
    let mut linker = TubeLinker::new(gap_tolerance);
    let mut tubes = Vec::new();
    for (frame, best) in selections {
        let selected: Vec<ScoredBox> = best.into_iter().cloned().collect();
        extend_tubes(&mut tubes, &mut linker, &selected, frame);
    }
    tubes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalMaskConfig {
    pub std_factor: f64,
    pub decay: f64,
    pub warmup: usize,
}

impl Default for TemporalMaskConfig {
    fn default() -> Self {
        TemporalMaskConfig {
            std_factor: 0.5,
            decay: 0.99,
            warmup: 5,
        }
    }
}

/// Streaming activity flag: a frame is active when its error exceeds the
/// running mean by `std_factor` running deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalMask {
    pub cfg: TemporalMaskConfig,
    pub stats: RunningStats,
    pub seen: usize,
}

impl TemporalMask {
    pub fn new(cfg: TemporalMaskConfig) -> Self {
        TemporalMask {
            stats: RunningStats::new(cfg.decay),
            cfg,
            seen: 0,
        }
    }

    pub fn push(&mut self, e: f64) -> bool {
        let active = self.seen >= self.cfg.warmup
            && !self.stats.is_empty()
            && e > self.stats.mean + self.cfg.std_factor * self.stats.std();
        self.stats.push(e);
        self.seen += 1;
        active
    }
}

pub fn temporal_action_mask(e_series: &[f64], cfg: &TemporalMaskConfig) -> Vec<bool> {
    let mut mask = TemporalMask::new(cfg.clone());
    e_series.iter().map(|&e| mask.push(e)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    /// `H × W`, sums to one.
    pub map: Tensor,
    pub gaze: (usize, usize),
}

/// Pixel index nearest to each cell center along one axis.
fn center_pixels(cells: usize, pixels: usize) -> Vec<usize> {
    (0..cells)
        .map(|i| ((((i as f64 + 0.5) * pixels as f64) / cells as f64).floor() as usize).min(pixels - 1))
        .collect()
}

/// For each pixel: lower cell index and weight of the upper neighbour.
fn axis_weights(cells: usize, pixels: usize) -> Vec<(usize, f32)> {
    let centers = center_pixels(cells, pixels);
    (0..pixels)
        .map(|x| {
            if cells == 1 || x <= centers[0] {
                return (0, 0.0);
            }
            if x >= centers[cells - 1] {
                return (cells - 1, 0.0);
            }
            let i = centers.partition_point(|&c| c <= x) - 1;
            let t = (x - centers[i]) as f32 / (centers[i + 1] - centers[i]) as f32;
            (i, t)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Bilinear upsampling of the attention map to frame resolution, with
/// cell centers landing exactly on pixels. The gaze point is the saliency
/// maximum; ties go to the first cell center in row-major cell order.
pub fn gaze_saliency(attention: &AttentionMap, frame: (usize, usize)) -> Result<Saliency> {
    let (w, h) = frame;
    let (gw, gh) = (attention.width(), attention.height());
    if w < gw || h < gh {
        return Err(Error::shape(format!(
            "frame {w}x{h} is smaller than the attention grid {gw}x{gh}"
        )));
    }
    let alpha = attention.alpha.data();
    let at = |i: usize, j: usize| alpha[i * gh + j];
    let xs = axis_weights(gw, w);
    let ys = axis_weights(gh, h);
    let mut map = vec![0.0f32; w * h];
    let mut total = 0.0f64;
    for (y, &(j, ty)) in ys.iter().enumerate() {
        let j1 = (j + 1).min(gh - 1);
        for (x, &(i, tx)) in xs.iter().enumerate() {
            let i1 = (i + 1).min(gw - 1);
            let top = lerp(at(i, j), at(i1, j), tx);
            let bottom = lerp(at(i, j1), at(i1, j1), tx);
            let v = lerp(top, bottom, ty);
            map[y * w + x] = v;
            total += v as f64;
        }
    }
    if total > 0.0 {
        let inv = (1.0 / total) as f32;
        for v in &mut map {
            *v *= inv;
        }
    }
    let peak = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let cx = center_pixels(gw, w);
    let cy = center_pixels(gh, h);
    let mut gaze = None;
    'cells: for &px in &cx {
        for &py in &cy {
            if map[py * w + px] == peak {
                gaze = Some((px, py));
                break 'cells;
            }
        }
    }
    let gaze = gaze.unwrap_or_else(|| {
        let idx = map.iter().position(|&v| v == peak).unwrap_or(0);
        (idx % w, idx / w)
    });
    Ok(Saliency {
        map: Tensor::new(vec![h, w], map)?,
        gaze,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::ProposalSource;

    fn att(w: usize, h: usize, hot: Option<(usize, usize)>) -> AttentionMap {
        let mut e = Tensor::zeros(&[w, h]);
        if let Some((i, j)) = hot {
            e.data_mut()[i * h + j] = 40.0;
        }
        error_attention(&e, 0).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxProposal {
        BoxProposal::new(x1, y1, x2, y2, ProposalSource::Grid)
    }

    #[test]
    fn centered_box_has_zero_energy() {
        let a = att(8, 8, Some((2, 5)));
        let (cx, cy) = attention_focus(&a, (64, 64));
        let b = bx(cx - 4.0, cy - 4.0, cx + 4.0, cy + 4.0);
        assert_eq!(box_energy(&b, &a, &[], &EnergyConfig::default(), (64, 64)).unwrap(), 0.0);
    }

    #[test]
    fn topk_ties_prefer_small_then_early() {
        let a = att(8, 8, None);
        let boxes = vec![bx(0.0, 0.0, 8.0, 8.0), bx(2.0, 2.0, 6.0, 6.0), bx(1.0, 1.0, 7.0, 7.0), bx(3.0, 3.0, 5.0, 5.0)];
        let cfg = EnergyConfig { k: 3, ..EnergyConfig::default() };
        let out = select_topk(&boxes, &a, &[], &cfg, (64, 64)).unwrap();
        let got: Vec<f64> = out.iter().map(|s| s.bbox.x1).collect();
        assert_eq!(got, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn empty_proposals_select_nothing() {
        let a = att(8, 8, None);
        assert!(select_topk(&[], &a, &[], &EnergyConfig::default(), (64, 64)).unwrap().is_empty());
    }

    #[test]
    fn invalid_box_is_rejected() {
        let a = att(8, 8, None);
        let b = bx(10.0, 0.0, 5.0, 8.0);
        assert!(box_energy(&b, &a, &[], &EnergyConfig::default(), (64, 64)).is_err());
    }

    #[test]
    fn linker_gap_handling() {
        let s = ScoredBox { bbox: bx(0.0, 0.0, 4.0, 4.0), energy: 0.1 };
        let mut frames: Vec<(usize, Option<&ScoredBox>)> = (0..10).map(|f| (f, Some(&s))).collect();
        frames.extend((10..16).map(|f| (f, None)));
        frames.extend((16..20).map(|f| (f, Some(&s))));
        let tubes = link_tubes(frames, TubeLinker::DEFAULT_GAP);
        assert_eq!(tubes.len(), 2);
        assert_eq!((tubes[0].start(), tubes[0].end()), (0, 9));
        assert_eq!((tubes[1].start(), tubes[1].end()), (16, 19));

        let mut short: Vec<(usize, Option<&ScoredBox>)> = (0..5).map(|f| (f, Some(&s))).collect();
        short.extend((5..8).map(|f| (f, None)));
        short.extend((8..12).map(|f| (f, Some(&s))));
        let tubes = link_tubes(short, TubeLinker::DEFAULT_GAP);
        assert_eq!(tubes.len(), 1);
        assert_eq!(tubes[0].len(), 12);
        assert!(tubes[0].is_contiguous());
        assert!(tubes[0].entries[6].interpolated);
    }

    #[test]
    fn mask_warmup_and_step() {
        let cfg = TemporalMaskConfig::default();
        let constant = temporal_action_mask(&[1.0; 20], &cfg);
        assert!(constant.iter().all(|&a| !a));
        let mut step = vec![0.0; 10];
        step.extend([1.0; 3]);
        let flags = temporal_action_mask(&step, &cfg);
        assert!(flags[10]);
        assert!(!flags[..10].iter().any(|&a| a));
    }

    #[test]
    fn gaze_on_one_hot_cells() {
        for &(i, j) in &[(0, 0), (3, 4), (7, 7), (7, 0)] {
            let a = att(8, 8, Some((i, j)));
            let s = gaze_saliency(&a, (64, 64)).unwrap();
            let (cx, cy) = cell_pixel_center(i, j, (8, 8), (64, 64));
            assert_eq!(s.gaze, (cx as usize, cy as usize));
            assert!((s.map.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_saliency() {
        let a = att(8, 8, None);
        let s = gaze_saliency(&a, (64, 48)).unwrap();
        let first = s.map.data()[0];
        assert!(s.map.data().iter().all(|&v| (v - first).abs() < 1e-9));
        assert_eq!(s.gaze, (4, 3));
    }
}
