//! Stream checkpoints: a `manifest.json` naming every tensor plus the scalar
//! state, and `tensors.stf1` holding the tensors in manifest order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{TemporalMask, TubeLinker};
use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::lstm::{GateCache, LstmCellParams};
use crate::pipeline::StreamProcessor;
use crate::predictor::{LayerState, PredictionHead, StackParams, StepCache};
use crate::proposals::BoxProposal;
use crate::stats::RunningStats;
use crate::tensor::{read_stf1, write_stf1, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.stf1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub video_id: String,
    pub next_frame: usize,
    pub learning_rate: f64,
    pub error_history: RunningStats,
    pub mask: TemporalMask,
    pub linker: TubeLinker,
    pub prev_selected: Vec<BoxProposal>,
    pub pooled_frames: usize,
    pub window: usize,
    /// Model-defining configuration sections; a resume must match them.
    pub model: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

fn model_fingerprint(p: &StreamProcessor) -> serde_json::Value {
    let c = &p.cfg;
    serde_json::json!({
        "encoder": c.encoder,
        "predictor": c.predictor,
        "energy": c.energy,
        "proposals": c.proposals,
        "temporal": c.temporal,
        "tubes": c.tubes,
        "encoder_checksum": p.encoder.checksum().to_string(),
    })
}

const CACHE_PARTS: [&str; 5] = ["x", "h_prev", "m_prev", "gates", "m"];

impl Checkpoint {
    pub fn capture(p: &StreamProcessor) -> Result<Self> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        let state = &p.predictor.state;
        for (name, t) in state.params.named_tensors() {
            named.push((format!("param.{name}"), t.clone()));
        }
        for (l, s) in state.states.iter().enumerate() {
            named.push((format!("state.layer{l}.h"), s.h.clone()));
            named.push((format!("state.layer{l}.m"), s.m.clone()));
        }
        for (s, step) in p.predictor.window.iter().enumerate() {
            for (l, c) in step.layers.iter().enumerate() {
                let parts = [&c.x, &c.h_prev, &c.m_prev, &c.gates, &c.m];
                for (part, t) in CACHE_PARTS.iter().zip(parts) {
                    named.push((format!("window{s}.layer{l}.{part}"), t.clone()));
                }
            }
            named.push((format!("window{s}.top_hidden"), step.top_hidden.clone()));
        }
        if let Some(g) = &p.prev_features {
            named.push(("prev_features".into(), g.values().clone()));
        }
        if let Some(g) = &p.pending {
            named.push(("pending".into(), g.values().clone()));
        }
        if let Some(f) = &p.prev_frame {
            named.push(("prev_frame".into(), f.to_tensor()));
        }
        if let Some(v) = p.pooler.values() {
            named.push(("pooled".into(), Tensor::new(vec![v.len()], v.to_vec())?));
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            video_id: p.cfg.video_id.clone(),
            next_frame: p.next_frame,
            learning_rate: state.learning_rate,
            error_history: state.error_history,
            mask: p.mask.clone(),
            linker: p.linker.clone(),
            prev_selected: p.prev_selected.clone(),
            pooled_frames: p.pooler.frames(),
            window: p.predictor.window.len(),
            model: model_fingerprint(p),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
        };
        Ok(Checkpoint {
            manifest,
            tensors: named.into_iter().map(|(_, t)| t).collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
        let tensors = dir.join(TENSORS);
        let mut w = BufWriter::new(File::create(&tensors).map_err(|e| Error::at_path(&tensors, e))?);
        for t in &self.tensors {
            write_stf1(&mut w, t)?;
        }
        w.flush()?;
        let manifest = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::validation(e.to_string()))?;
        fs::write(&manifest, text + "\n").map_err(|e| Error::at_path(&manifest, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::at_path(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!("unsupported checkpoint version {}", manifest.version)));
        }
        let tensors_path = dir.join(TENSORS);
        let mut r = BufReader::new(File::open(&tensors_path).map_err(|e| Error::at_path(&tensors_path, e))?);
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let t = read_stf1(&mut r)?
                .ok_or_else(|| Error::validation(format!("checkpoint ends before tensor {}", entry.name)))?;
            if t.dims() != entry.dims.as_slice() {
                return Err(Error::validation(format!(
                    "tensor {} has dims {:?}, manifest says {:?}",
                    entry.name,
                    t.dims(),
                    entry.dims
                )));
            }
            tensors.push(t);
        }
        if read_stf1(&mut r)?.is_some() {
            return Err(Error::validation("checkpoint holds more tensors than its manifest lists"));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    fn take(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::validation(format!("checkpoint lacks tensor {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    fn params_like(&self, template: &StackParams) -> Result<StackParams> {
        let mut layers = Vec::with_capacity(template.layers.len());
        for l in 0..template.layers.len() {
            layers.push(LstmCellParams::from_tensors(
                self.take(&format!("param.layer{l}.input_weights"))?,
                self.take(&format!("param.layer{l}.recurrent_weights"))?,
                self.take(&format!("param.layer{l}.bias"))?,
            )?);
        }
        let params = StackParams {
            layers,
            head: PredictionHead {
                weights: self.take("param.head.weights")?,
                bias: self.take("param.head.bias")?,
            },
        };
        if !params.same_shape(template) {
            return Err(Error::validation("checkpoint parameter shapes do not match the configuration"));
        }
        Ok(params)
    }

    /// Loads only the learned state (parameters, learning rate, error
    /// statistics) into a fresh stream, e.g. to continue learning on a new
    /// video.
    pub fn warm_start_into(&self, p: &mut StreamProcessor) -> Result<()> {
        if self.manifest.model["encoder_checksum"] != model_fingerprint(p)["encoder_checksum"] {
            return Err(Error::config("checkpoint was written with a different encoder"));
        }
        let params = self.params_like(&p.predictor.state.params)?;
        p.predictor
            .warm_start(params, self.manifest.learning_rate, self.manifest.error_history)
    }

    /// Overwrites the stream state of `p`, which must have been built from
    /// the same model configuration.
    pub fn restore_into(&self, p: &mut StreamProcessor) -> Result<()> {
        let m = &self.manifest;
        if m.model != model_fingerprint(p) {
            return Err(Error::config("checkpoint was written with a different model configuration"));
        }
        let layers = p.predictor.state.params.layers.len();
        let params = self.params_like(&p.predictor.state.params)?;
        let state = &mut p.predictor.state;
        state.params = params;
        state.states = (0..layers)
            .map(|l| {
                Ok(LayerState {
                    h: self.take(&format!("state.layer{l}.h"))?,
                    m: self.take(&format!("state.layer{l}.m"))?,
                })
            })
            .collect::<Result<_>>()?;
        state.learning_rate = m.learning_rate;
        state.error_history = m.error_history;
        p.predictor.window.clear();
        for s in 0..m.window {
            let mut caches = Vec::with_capacity(layers);
            for l in 0..layers {
                let parts = CACHE_PARTS
                    .iter()
                    .map(|part| self.take(&format!("window{s}.layer{l}.{part}")))
                    .collect::<Result<Vec<_>>>()?;
                let mut it = parts.into_iter();
                let x = it.next().expect("five parts");
                caches.push(GateCache {
                    rows: x.dims()[0],
                    x,
                    h_prev: it.next().expect("five parts"),
                    m_prev: it.next().expect("five parts"),
                    gates: it.next().expect("five parts"),
                    m: it.next().expect("five parts"),
                });
            }
            p.predictor.window.push_back(StepCache {
                layers: caches,
                top_hidden: self.take(&format!("window{s}.top_hidden"))?,
            });
        }
        let n = m.next_frame;
        p.prev_features = match self.get("prev_features") {
            Some(t) => Some(FeatureGrid::new(n.saturating_sub(1), t.clone())?),
            None => None,
        };
        p.pending = match self.get("pending") {
            Some(t) => Some(FeatureGrid::new(n, t.clone())?),
            None => None,
        };
        p.prev_frame = match self.get("prev_frame") {
            Some(t) => Some(Frame::from_tensor(t)?),
            None => None,
        };
        p.pooler.restore(self.get("pooled").map(|t| t.data().to_vec()), m.pooled_frames);
        p.mask = m.mask.clone();
        p.linker = m.linker.clone();
        p.prev_selected = m.prev_selected.clone();
        p.next_frame = n;
        Ok(())
    }
}
