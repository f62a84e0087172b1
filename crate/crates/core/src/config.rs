//! Run configuration: TOML sections with `section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{EnergyConfig, TemporalMaskConfig, TubeLinker};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::predictor::PredictorConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ACTLOC_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Localize,
    Gaze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Grid,
    FrameDiff,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    /// Concatenated in this order before deduplication.
    pub strategies: Vec<Strategy>,
    pub grid_scales: Vec<usize>,
    pub grid_stride: f64,
    pub diff_threshold: u8,
    pub min_area: usize,
    pub dedup_iou: f64,
    pub cap: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<PathBuf>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            strategies: vec![Strategy::FrameDiff, Strategy::Grid],
            grid_scales: vec![16, 24, 32],
            grid_stride: 0.5,
            diff_threshold: 25,
            min_area: 16,
            dedup_iou: 0.95,
            cap: 100,
            external: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeConfig {
    pub gap_tolerance: usize,
}

impl Default for TubeConfig {
    fn default() -> Self {
        TubeConfig {
            gap_tolerance: TubeLinker::DEFAULT_GAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    /// Pixmap directory or `STF1` video tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Precomputed `STF1` feature sequence used instead of the encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_input: Option<PathBuf>,
    /// Frame records; standard output when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Saliency maps, one `STF1` tensor per record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<PathBuf>,
    /// Pooled video feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<PathBuf>,
    /// Checkpoint directory written at the end of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Checkpoint whose learned parameters seed a fresh stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
    /// Save a checkpoint every N frames as well (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Stop after this many frames in total (0 = whole input).
    #[serde(default)]
    pub max_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub video_id: String,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub energy: EnergyConfig,
    pub proposals: ProposalConfig,
    pub temporal: TemporalMaskConfig,
    pub tubes: TubeConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

/// Named starting points for configuration files (`preset = "..."`).
pub const PRESETS: [&str; 2] = ["desk", "full"];

impl RunConfig {
    /// 64×64 input, 8×8×32 grid, hidden size 64.
    pub fn desk() -> Self {
        RunConfig {
            mode: Mode::Localize,
            video_id: String::new(),
            encoder: EncoderConfig::desk(),
            predictor: PredictorConfig::desk(),
            energy: EnergyConfig::default(),
            proposals: ProposalConfig::default(),
            temporal: TemporalMaskConfig::default(),
            tubes: TubeConfig::default(),
            io: IoConfig::default(),
        }
    }

    /// 224×224 input, 14×14×512 grid, hidden size 512.
    pub fn full_scale() -> Self {
        RunConfig {
            encoder: EncoderConfig::full_scale(),
            predictor: PredictorConfig::full_scale(),
            proposals: ProposalConfig {
                grid_scales: vec![56, 84, 112],
                min_area: 64,
                ..ProposalConfig::default()
            },
            ..RunConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full_scale()),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.predictor.validate()?;
        self.energy.validate()?;
        let p = &self.proposals;
        if p.strategies.is_empty() {
            return Err(Error::config("proposals.strategies is empty"));
        }
        if p.strategies.contains(&Strategy::External) && p.external.is_none() {
            return Err(Error::config("external proposals selected but proposals.external is unset"));
        }
        if p.cap == 0 || !(0.0..=1.0).contains(&p.dedup_iou) {
            return Err(Error::config("proposals.cap must be positive and dedup_iou in [0, 1]"));
        }
        if p.strategies.contains(&Strategy::Grid) {
            let (w, h) = (self.encoder.input_width, self.encoder.input_height);
            crate::proposals::grid_proposals(w, h, &p.grid_scales, p.grid_stride)?;
        }
        let t = &self.temporal;
        if !(t.decay > 0.0 && t.decay < 1.0 && t.std_factor >= 0.0) {
            return Err(Error::config("temporal.decay must lie in (0, 1) and std_factor be nonnegative"));
        }
        if self.tubes.gap_tolerance == 0 {
            return Err(Error::config("tubes.gap_tolerance must be positive"));
        }
        if self.io.resume.is_some() && self.io.warm_start.is_some() {
            return Err(Error::config("set only one of io.resume and io.warm_start"));
        }
        if self.io.input.is_some() && self.io.features_input.is_some() {
            return Err(Error::config("set only one of io.input and io.features_input"));
        }
        if self.io.features_input.is_some() && p.strategies.contains(&Strategy::FrameDiff) {
            return Err(Error::config("framediff proposals need frames, not a feature sequence"));
        }
        Ok(())
    }

    /// Parses TOML text over the preset it names (desk by default), then
    /// applies `section.key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config parse error: {e}")))?;
        let preset = match table.remove("preset") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::config("preset must be a string")),
            None => "desk".to_string(),
        };
        let mut merged = to_table(&RunConfig::preset(&preset)?)?;
        merge(&mut merged, table);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::at_path(p, e))?,
            None => String::new(),
        };
        RunConfig::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

fn to_table(cfg: &RunConfig) -> Result<toml::Table> {
    match toml::Value::try_from(cfg).map_err(|e| Error::config(e.to_string()))? {
        toml::Value::Table(t) => Ok(t),
        _ => Err(Error::config("configuration did not serialize to a table")),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c=value`; the value is read as TOML, falling back to a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("nonempty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(format!("override {key}: {p} is not a section"))),
        };
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}
