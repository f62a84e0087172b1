#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use actloc_core::attention::cell_pixel_center;
use actloc_core::config::{Mode, RunConfig, Strategy};
use actloc_core::evaluate::VideoPredictions;
use actloc_core::frame::FrameReader;
use actloc_core::metrics::GtVideo;
use actloc_core::pipeline::{run_stream, FrameRecord, Sinks, Source, StreamProcessor};
use actloc_core::predictor::StackParams;
use actloc_core::synth::{generate, subset_scenes, Subset};
use actloc_core::{Tensor, VideoFeature};

/// Plain f64 re-implementation of the stacked predictor and its loss.
pub struct Oracle {
    pub layers: Vec<OracleLayer>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub d_f: usize,
    pub d_h: usize,
}

pub struct OracleLayer {
    pub d_in: usize,
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub b: Vec<f64>,
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Oracle {
    pub fn from_params(p: &StackParams) -> Self {
        let d_h = p.layers[0].d_h();
        Oracle {
            layers: p
                .layers
                .iter()
                .map(|l| OracleLayer {
                    d_in: l.d_in(),
                    wx: f64s(&l.input_weights),
                    wh: f64s(&l.recurrent_weights),
                    b: f64s(&l.bias),
                })
                .collect(),
            head_w: f64s(&p.head.weights),
            head_b: f64s(&p.head.bias),
            d_f: p.head.bias.len(),
            d_h,
        }
    }

    /// Flat parameter vector in `StackParams::tensors` order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(&l.wx);
            v.extend(&l.wh);
            v.extend(&l.b);
        }
        v.extend(&self.head_w);
        v.extend(&self.head_b);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut k = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&v[k..k + n]);
            k += n;
        };
        for l in &mut self.layers {
            take(&mut l.wx);
            take(&mut l.wh);
            take(&mut l.b);
        }
        take(&mut self.head_w);
        take(&mut self.head_b);
    }

    /// Runs every location independently over `inputs` (rows of
    /// `locations × d_f`) from zero state and returns the prediction after
    /// the last input.
    pub fn predict(&self, inputs: &[Vec<f64>], locations: usize) -> Vec<f64> {
        let (d_h, d_f) = (self.d_h, self.d_f);
        let mut out = vec![0.0; locations * d_f];
        for loc in 0..locations {
            let mut h = vec![vec![0.0; d_h]; self.layers.len()];
            let mut m = vec![vec![0.0; d_h]; self.layers.len()];
            for x_t in inputs {
                let mut x: Vec<f64> = x_t[loc * d_f..(loc + 1) * d_f].to_vec();
                let mut inject: Option<Vec<f64>> = None;
                for (l, layer) in self.layers.iter().enumerate() {
                    let mut pre = vec![0.0; 4 * d_h];
                    for r in 0..4 * d_h {
                        let mut s = layer.b[r];
                        for c in 0..layer.d_in {
                            s += layer.wx[r * layer.d_in + c] * x[c];
                        }
                        for c in 0..d_h {
                            s += layer.wh[r * d_h + c] * h[l][c];
                        }
                        pre[r] = s;
                    }
                    let mut new_m = vec![0.0; d_h];
                    let mut new_h = vec![0.0; d_h];
                    for k in 0..d_h {
                        let i = sig(pre[k]);
                        let f = sig(pre[d_h + k]);
                        let o = sig(pre[2 * d_h + k]);
                        let g = (pre[3 * d_h + k] + inject.as_ref().map_or(0.0, |u| u[k])).tanh();
                        new_m[k] = f * m[l][k] + i * g;
                        new_h[k] = o * new_m[k].tanh();
                    }
                    h[l] = new_h.clone();
                    m[l] = new_m.clone();
                    x = new_h;
                    inject = Some(new_m);
                }
                for a in 0..d_f {
                    let mut s = self.head_b[a];
                    for c in 0..d_h {
                        s += self.head_w[a * d_h + c] * x[c];
                    }
                    out[loc * d_f + a] = s;
                }
            }
        }
        out
    }
}

/// Mean over locations of `mean|next − cur| · (Σ|next − pred|)²`.
pub fn oracle_loss(pred: &[f64], next: &[f64], cur: &[f64], d_f: usize) -> f64 {
    let n = pred.len() / d_f;
    let mut total = 0.0;
    for loc in 0..n {
        let r = loc * d_f..(loc + 1) * d_f;
        let change: f64 = next[r.clone()].iter().zip(&cur[r.clone()]).map(|(a, b)| (a - b).abs()).sum::<f64>() / d_f as f64;
        let resid: f64 = next[r.clone()].iter().zip(&pred[r]).map(|(a, b)| (a - b).abs()).sum();
        total += change * resid * resid;
    }
    total / n as f64
}

/// Per-frame facts gathered while a suite video streams.
#[derive(Debug, Clone)]
pub struct FrameFacts {
    pub frame: usize,
    pub argmax_center: (f64, f64),
    pub alpha_sum: f64,
}

pub struct VideoRun {
    pub id: String,
    pub gt: GtVideo,
    pub facts: Vec<FrameFacts>,
    pub predictions: VideoPredictions,
    pub feature: VideoFeature,
    pub active: BTreeSet<usize>,
}

/// Configuration used for suite evaluation: desk preset, motion-component
/// proposals, gaze saliency dumped in gaze mode.
pub fn suite_config(subset: Subset) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.proposals.strategies = vec![Strategy::FrameDiff];
    if subset == Subset::Gaze {
        cfg.mode = Mode::Gaze;
    }
    cfg
}

/// Streams every sequence of `subset` through `cfg`. With `continual`, each
/// video starts from what the previous one learned.
pub fn run_subset(subset: Subset, cfg: &RunConfig, continual: bool) -> (Vec<VideoRun>, Duration) {
    let start = Instant::now();
    let mut prev: Option<StreamProcessor> = None;
    let mut out = Vec::new();
    for seq in subset_scenes(subset) {
        let video = generate(&seq.id, &seq.scene).expect("suite scene renders");
        let mut c = cfg.clone();
        c.video_id = seq.id.clone();
        let mut proc = StreamProcessor::new(c).expect("valid suite config");
        if continual {
            if let Some(p) = &prev {
                proc.warm_start_from(p).expect("same model");
            }
        }
        let keep_saliency = cfg.mode == Mode::Gaze;
        let mut facts = Vec::new();
        let mut records: Vec<FrameRecord> = Vec::new();
        let mut maps = Vec::new();
        let source = Source::Frames(FrameReader::from_frames(video.frames.clone()));
        run_stream(&mut proc, source, &mut Sinks::default(), |p, o| {
            let (i, j) = o.attention.argmax_cell();
            let g = o.attention.alpha.dims();
            let center = cell_pixel_center(i, j, (g[0], g[1]), p.frame_dims);
            facts.push(FrameFacts {
                frame: o.record.frame,
                argmax_center: center,
                alpha_sum: o.attention.alpha.data().iter().map(|&v| v as f64).sum(),
            });
            records.push(o.record.clone());
            if keep_saliency {
                maps.push(o.saliency.map.clone());
            }
            Ok(())
        })
        .expect("suite video streams");
        let feature = proc.video_feature().expect("nonempty video");
        let predictions = VideoPredictions {
            records,
            saliency: keep_saliency.then_some(maps),
        };
        out.push(VideoRun {
            id: seq.id.clone(),
            active: predictions.active_frames(),
            gt: video.gt,
            facts,
            predictions,
            feature,
        });
        prev = Some(proc);
    }
    (out, start.elapsed())
}
