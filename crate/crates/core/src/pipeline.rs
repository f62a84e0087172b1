//! The single-pass streaming loop: encode, propose, score the pending
//! prediction, attend, select, link, flag, adapt, learn, predict, emit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{
    error_attention, gaze_saliency, select_topk, AttentionMap, Saliency, ScoredBox, TemporalMask, TubeLinker,
};
use crate::checkpoint::Checkpoint;
use crate::cluster::{FeaturePooler, VideoFeature};
use crate::config::{Mode, RunConfig, Strategy};
use crate::encoder::{load_feature_sequence, Encoder, FeatureGrid};
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameReader, ReadCounter};
use crate::predictor::{zoh_loss, zoh_loss_grad, PredictionOutcome, Predictor, UpdateReport};
use crate::proposals::{dedup_and_cap, framediff_proposals, grid_proposals, load_external_proposals, BoxProposal};
use crate::tensor::{write_stf1, Tensor};

/// One line of the streaming output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: usize,
    #[serde(rename = "E")]
    pub e: f64,
    pub active: bool,
    /// `[x1, y1, x2, y2, energy]`, ascending energy.
    pub boxes: Vec<[f64; 5]>,
    pub gaze: [f64; 2],
}

impl FrameRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }

    pub fn rank1(&self) -> Option<ScoredBox> {
        self.boxes.first().map(|b| ScoredBox {
            bbox: BoxProposal::new(b[0], b[1], b[2], b[3], crate::proposals::ProposalSource::External),
            energy: b[4],
        })
    }
}

/// Everything computed for one emitted frame.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub record: FrameRecord,
    pub attention: AttentionMap,
    pub saliency: Saliency,
    pub outcome: PredictionOutcome,
    pub selected: Vec<ScoredBox>,
    pub update: UpdateReport,
    pub learning_rate: f64,
    pub proposal_count: usize,
}

/// Per-stream state owned by a single consumer.
pub struct StreamProcessor {
    pub cfg: RunConfig,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub frame_dims: (usize, usize),
    pub next_frame: usize,
    pub prev_frame: Option<Frame>,
    pub prev_features: Option<FeatureGrid>,
    pub pending: Option<FeatureGrid>,
    pub linker: TubeLinker,
    pub mask: TemporalMask,
    pub prev_selected: Vec<BoxProposal>,
    pub pooler: FeaturePooler,
    grid_boxes: Vec<BoxProposal>,
    external: BTreeMap<usize, Vec<BoxProposal>>,
}

impl StreamProcessor {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let grid = encoder.grid_dims();
        let predictor = Predictor::new(grid, cfg.predictor.clone())?;
        let frame_dims = (cfg.encoder.input_width, cfg.encoder.input_height);
        let p = &cfg.proposals;
        let grid_boxes = if p.strategies.contains(&Strategy::Grid) {
            grid_proposals(frame_dims.0, frame_dims.1, &p.grid_scales, p.grid_stride)?
        } else {
            Vec::new()
        };
        let external = match (&p.external, p.strategies.contains(&Strategy::External)) {
            (Some(path), true) => load_external_proposals(path, frame_dims.0, frame_dims.1)?,
            _ => BTreeMap::new(),
        };
        Ok(StreamProcessor {
            linker: TubeLinker::new(cfg.tubes.gap_tolerance),
            mask: TemporalMask::new(cfg.temporal.clone()),
            cfg,
            encoder,
            predictor,
            frame_dims,
            next_frame: 0,
            prev_frame: None,
            prev_features: None,
            pending: None,
            prev_selected: Vec::new(),
            pooler: FeaturePooler::new(),
            grid_boxes,
            external,
        })
    }

    pub fn from_checkpoint(cfg: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut p = StreamProcessor::new(cfg)?;
        ckpt.restore_into(&mut p)?;
        Ok(p)
    }

    fn proposals(&self, frame_index: usize, cur: Option<&Frame>) -> Result<Vec<BoxProposal>> {
        let p = &self.cfg.proposals;
        let mut all = Vec::new();
        for s in &p.strategies {
            match s {
                Strategy::Grid => all.extend_from_slice(&self.grid_boxes),
                Strategy::FrameDiff => {
                    if let (Some(prev), Some(cur)) = (&self.prev_frame, cur) {
                        all.extend(framediff_proposals(prev, cur, p.diff_threshold, p.min_area)?);
                    }
                }
                Strategy::External => {
                    if let Some(b) = self.external.get(&frame_index) {
                        all.extend_from_slice(b);
                    }
                }
            }
        }
        Ok(dedup_and_cap(all, p.dedup_iou, p.cap))
    }

    /// Feeds one frame. Returns the output for this frame once a prediction
    /// for it exists (every frame but the first).
    pub fn push_frame(&mut self, frame: Frame) -> Result<Option<FrameOutput>> {
        let n = self.next_frame;
        if (frame.width, frame.height) != self.frame_dims {
            return Err(Error::shape(format!(
                "frame is {}x{}, configured input is {}x{}",
                frame.width, frame.height, self.frame_dims.0, self.frame_dims.1
            ))
            .in_frame(n));
        }
        let grid = self.encoder.encode_frame(&frame, n).map_err(|e| e.in_frame(n))?;
        self.step(grid, Some(frame)).map_err(|e| e.in_frame(n))
    }

    /// Feeds one precomputed feature grid.
    pub fn push_features(&mut self, grid: FeatureGrid) -> Result<Option<FrameOutput>> {
        let n = self.next_frame;
        let grid = FeatureGrid::new(n, grid.into_values())?;
        self.step(grid, None).map_err(|e| e.in_frame(n))
    }

    fn step(&mut self, f_n: FeatureGrid, frame: Option<Frame>) -> Result<Option<FrameOutput>> {
        let n = self.next_frame;
        let proposals = self.proposals(n, frame.as_ref())?;
        let output = match (self.pending.take(), self.prev_features.take()) {
            (Some(pending), Some(prev)) => {
                let outcome = zoh_loss(&pending, &f_n, &prev)?;
                let e = outcome.error_scalar;
                let attention = error_attention(&outcome.error_map, n)?;
                let prev_sel: &[BoxProposal] = if self.cfg.energy.w_t > 0.0 { &self.prev_selected } else { &[] };
                let selected = select_topk(&proposals, &attention, prev_sel, &self.cfg.energy, self.frame_dims)?;
                self.linker.push(n, selected.first());
                let active = self.mask.push(e);
                let learning_rate = self.predictor.adapt_learning_rate(e);
                let grad = zoh_loss_grad(&outcome, &pending, &f_n)?;
                let update = self.predictor.continual_update(&grad)?;
                let next = self.predictor.forward(&f_n)?;
                self.pending = Some(next);
                self.pooler.push(self.predictor.state.top_hidden(), &attention)?;
                let saliency = gaze_saliency(&attention, self.frame_dims)?;
                self.prev_selected = selected.iter().map(|s| s.bbox).collect();
                let record = FrameRecord {
                    frame: n,
                    e,
                    active,
                    boxes: selected
                        .iter()
                        .map(|s| [s.bbox.x1, s.bbox.y1, s.bbox.x2, s.bbox.y2, s.energy])
                        .collect(),
                    gaze: [saliency.gaze.0 as f64, saliency.gaze.1 as f64],
                };
                Some(FrameOutput {
                    record,
                    attention,
                    saliency,
                    outcome,
                    selected,
                    update,
                    learning_rate,
                    proposal_count: proposals.len(),
                })
            }
            _ => {
                self.pending = Some(self.predictor.forward(&f_n)?);
                None
            }
        };
        self.prev_features = Some(f_n);
        self.prev_frame = frame;
        self.next_frame += 1;
        Ok(output)
    }

    pub fn video_feature(&self) -> Result<VideoFeature> {
        self.pooler.clone().finish(self.cfg.video_id.clone())
    }

    /// Continues learning from `other`'s predictor (see [`Predictor::warm_start`]).
    pub fn warm_start_from(&mut self, other: &StreamProcessor) -> Result<()> {
        if other.encoder.checksum() != self.encoder.checksum() {
            return Err(Error::config("warm start across different encoders"));
        }
        let s = &other.predictor.state;
        self.predictor
            .warm_start(s.params.clone(), s.learning_rate, s.error_history)
    }

    /// Bytes held by per-stream state (model, caches, buffered frame and
    /// grids, proposal lattice, linker and pooling state).
    pub fn footprint_bytes(&self) -> usize {
        let grids = [&self.prev_features, &self.pending]
            .iter()
            .filter_map(|g| g.as_ref())
            .map(|g| g.values().footprint_bytes())
            .sum::<usize>();
        let frame = self.prev_frame.as_ref().map_or(0, |f| f.data.len());
        let boxes = (self.grid_boxes.len() + self.prev_selected.len()) * std::mem::size_of::<BoxProposal>();
        let pooled = self.predictor.state.hidden() * std::mem::size_of::<f32>();
        self.predictor.footprint_bytes()
            + grids
            + frame
            + boxes
            + pooled
            + std::mem::size_of::<TubeLinker>()
            + std::mem::size_of::<TemporalMask>()
    }
}

/// Per-frame input for the run loop.
pub enum Source {
    Frames(FrameReader),
    Features(Box<dyn Iterator<Item = Result<FeatureGrid>>>),
}

impl Source {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        match (&cfg.io.input, &cfg.io.features_input) {
            (Some(p), None) => Ok(Source::Frames(FrameReader::open(p)?)),
            (None, Some(p)) => Ok(Source::Features(Box::new(load_feature_sequence(p)?))),
            _ => Err(Error::config("set exactly one of io.input and io.features_input")),
        }
    }

    pub fn counter(&self) -> Option<ReadCounter> {
        match self {
            Source::Frames(r) => Some(r.counter()),
            Source::Features(_) => None,
        }
    }

    fn skip_to(&mut self, index: usize) -> Result<()> {
        match self {
            Source::Frames(r) => r.skip_to(index),
            Source::Features(it) => {
                for _ in 0..index {
                    if it.next().transpose()?.is_none() {
                        break;
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub frames_consumed: usize,
    pub records: usize,
    pub peak_footprint: usize,
    pub final_footprint: usize,
    pub feature: Option<VideoFeature>,
}

/// Output sinks of a run; each is optional.
#[derive(Default)]
pub struct Sinks<'a> {
    pub records: Option<&'a mut dyn Write>,
    pub saliency: Option<&'a mut dyn Write>,
}

/// Drives `proc` over `source`, emitting one record per scored frame.
/// `on_frame` sees every output before it is written.
pub fn run_stream(
    proc: &mut StreamProcessor,
    mut source: Source,
    sinks: &mut Sinks<'_>,
    mut on_frame: impl FnMut(&StreamProcessor, &FrameOutput) -> Result<()>,
) -> Result<RunSummary> {
    let start = proc.next_frame;
    if start > 0 {
        source.skip_to(start)?;
    }
    let max_frames = proc.cfg.io.max_frames;
    let every = proc.cfg.io.checkpoint_every;
    let mut records = 0;
    let mut peak = proc.footprint_bytes();
    loop {
        if max_frames > 0 && proc.next_frame >= max_frames {
            break;
        }
        let n = proc.next_frame;
        let out = match &mut source {
            Source::Frames(r) => match r.next() {
                None => break,
                Some(f) => proc.push_frame(f.map_err(|e| e.in_frame(n))?)?,
            },
            Source::Features(it) => match it.next() {
                None => break,
                Some(g) => proc.push_features(g.map_err(|e| e.in_frame(n))?)?,
            },
        };
        if let Some(out) = out {
            on_frame(proc, &out)?;
            if let Some(w) = sinks.records.as_mut() {
                writeln!(w, "{}", out.record.to_json_line())?;
            }
            if let Some(w) = sinks.saliency.as_mut() {
                write_stf1(w, &out.saliency.map)?;
            }
            records += 1;
        }
        peak = peak.max(proc.footprint_bytes());
        if every > 0 && proc.next_frame % every == 0 {
            if let Some(dir) = &proc.cfg.io.checkpoint {
                Checkpoint::capture(proc)?.save(dir)?;
            }
        }
    }
    Ok(RunSummary {
        frames_consumed: proc.next_frame - start,
        records,
        peak_footprint: peak,
        final_footprint: proc.footprint_bytes(),
        feature: proc.video_feature().ok(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::at_path(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::at_path(path, e))?))
}

pub fn write_feature(path: &Path, feature: &VideoFeature) -> Result<()> {
    let mut w = create(path)?;
    let t = Tensor::new(vec![feature.values.len()], feature.values.clone())?;
    write_stf1(&mut w, &t)?;
    w.flush()?;
    Ok(())
}

/// File-level `run`: opens the input and outputs named in `cfg.io`,
/// resumes from a checkpoint when asked and saves one at the end.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let mut proc = match &cfg.io.resume {
        Some(dir) => StreamProcessor::from_checkpoint(cfg.clone(), Checkpoint::load(dir)?)?,
        None => StreamProcessor::new(cfg.clone())?,
    };
    if let Some(dir) = &cfg.io.warm_start {
        Checkpoint::load(dir)?.warm_start_into(&mut proc)?;
    }
    run_to_files(&mut proc)
}

fn run_to_files(proc: &mut StreamProcessor) -> Result<RunSummary> {
    let cfg = proc.cfg.clone();
    let source = Source::open(&cfg)?;
    let mut stdout;
    let mut file;
    let records: &mut dyn Write = match &cfg.io.output {
        Some(p) => {
            file = create(p)?;
            &mut file
        }
        None => {
            stdout = std::io::stdout().lock();
            &mut stdout
        }
    };
    let mut saliency = match saliency_path(&cfg)? {
        Some(p) => Some(create(&p)?),
        None => None,
    };
    let summary = {
        let mut sinks = Sinks {
            records: Some(records),
            saliency: saliency.as_mut().map(|w| w as &mut dyn Write),
        };
        let s = run_stream(proc, source, &mut sinks, |_, _| Ok(()))?;
        if let Some(w) = sinks.records.as_mut() {
            w.flush()?;
        }
        s
    };
    if let Some(w) = saliency.as_mut() {
        w.flush()?;
    }
    if let (Some(path), Some(feature)) = (&cfg.io.feature, &summary.feature) {
        write_feature(path, feature)?;
    }
    if let Some(dir) = &cfg.io.checkpoint {
        Checkpoint::capture(proc)?.save(dir)?;
    }
    Ok(summary)
}

/// Runs each `(video id, input)` in order, writing the per-video outputs of
/// [`per_video_outputs`] into `out_dir`. With `continual`, every video after
/// the first starts from what the previous one learned; otherwise every
/// video starts from the configured initialization. `cfg.io.warm_start`
/// seeds the first video either way.
pub fn run_videos(
    cfg: &RunConfig,
    videos: &[(String, PathBuf)],
    out_dir: &Path,
    continual: bool,
) -> Result<Vec<RunSummary>> {
    if cfg.io.resume.is_some() {
        return Err(Error::config("io.resume applies to single runs only"));
    }
    let seed = match &cfg.io.warm_start {
        Some(dir) => Some(Checkpoint::load(dir)?),
        None => None,
    };
    let mut prev: Option<StreamProcessor> = None;
    let mut out = Vec::with_capacity(videos.len());
    for (id, input) in videos {
        let (records, saliency, feature) = per_video_outputs(out_dir, id);
        let mut c = cfg.clone();
        c.video_id = id.clone();
        c.io.input = Some(input.clone());
        c.io.features_input = None;
        c.io.output = Some(records);
        c.io.saliency = (c.mode == Mode::Gaze).then_some(saliency);
        c.io.feature = Some(feature);
        c.io.checkpoint = None;
        c.io.warm_start = None;
        let mut proc = StreamProcessor::new(c)?;
        match (&prev, &seed) {
            (Some(p), _) if continual => proc.warm_start_from(p)?,
            (_, Some(ckpt)) => ckpt.warm_start_into(&mut proc)?,
            _ => {}
        }
        out.push(run_to_files(&mut proc).map_err(|e| e.in_video(id))?);
        prev = Some(proc);
    }
    if let (Some(dir), Some(p)) = (&cfg.io.checkpoint, &prev) {
        Checkpoint::capture(p)?.save(dir)?;
    }
    Ok(out)
}

/// Gaze mode always dumps saliency; without an explicit path it goes next
/// to the record file.
fn saliency_path(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    match (&cfg.io.saliency, cfg.mode, &cfg.io.output) {
        (Some(p), _, _) => Ok(Some(p.clone())),
        (None, Mode::Localize, _) => Ok(None),
        (None, Mode::Gaze, Some(out)) => Ok(Some(out.with_extension("saliency.stf1"))),
        (None, Mode::Gaze, None) => Err(Error::config("gaze mode needs io.saliency or io.output")),
    }
}

/// Output paths used when running a whole directory of videos.
pub fn per_video_outputs(dir: &Path, video: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{video}.jsonl")),
        dir.join(format!("{video}.saliency.stf1")),
        dir.join(format!("{video}.feature.stf1")),
    )
}
