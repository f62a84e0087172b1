//! Deterministic synthetic videos of textured sprites with exact ground truth.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{write_ppm_sequence, Frame};
use crate::metrics::{write_ground_truth, GtVideo, TubeBoxes};
use crate::proposals::{BoxProposal, ProposalSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Flat { rgb: [u8; 3] },
    Noise { base: u8, amplitude: u8, seed: u64 },
    /// Noise texture translated by `(dx, dy)` pixels per frame.
    Scrolling { base: u8, amplitude: u8, seed: u64, dx: i64, dy: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// Straight line at `angle` degrees (0 = +x, 90 = +y).
    Linear { angle: f64 },
    /// Circle of the given radius, entered at its leftmost point.
    Circular { radius: f64 },
    /// Horizontal travel with a vertical triangle wave.
    Zigzag { amplitude: f64, period: f64 },
    Stationary,
}

impl Trajectory {
    pub fn class_name(&self) -> &'static str {
        match self {
            Trajectory::Linear { .. } => "linear",
            Trajectory::Circular { .. } => "circular",
            Trajectory::Zigzag { .. } => "zigzag",
            Trajectory::Stationary => "stationary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteConfig {
    pub width: usize,
    pub height: usize,
    pub start: (f64, f64),
    pub trajectory: Trajectory,
    /// Pixels per frame along the path.
    pub speed: f64,
    /// Inclusive frames during which the sprite moves; it is held still
    /// before and after.
    pub active: (usize, usize),
    pub rgb: [u8; 3],
    pub texture_amplitude: u8,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub background: Background,
    pub sprites: Vec<SpriteConfig>,
    pub seed: u64,
}

/// Triangle-wave fold of `v` into `[0, span]`.
fn reflect(v: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let m = v.rem_euclid(2.0 * span);
    if m > span {
        2.0 * span - m
    } else {
        m
    }
}

fn triangle(phase: f64) -> f64 {
    let p = phase.rem_euclid(1.0);
    if p < 0.5 {
        2.0 * p
    } else {
        2.0 - 2.0 * p
    }
}

impl SpriteConfig {
    /// Top-left corner at frame `t` in pixels.
    pub fn position(&self, t: usize, frame: (usize, usize)) -> (usize, usize) {
        let tau = (t.clamp(self.active.0, self.active.1) - self.active.0) as f64;
        let d = self.speed * tau;
        let (x0, y0) = self.start;
        let (x, y) = match self.trajectory {
            Trajectory::Linear { angle } => {
                let a = angle.to_radians();
                (x0 + d * a.cos(), y0 + d * a.sin())
            }
            Trajectory::Circular { radius } => {
                let r = radius.max(1e-9);
                let phi = d / r;
                (x0 + r - r * phi.cos(), y0 - r * phi.sin())
            }
            Trajectory::Zigzag { amplitude, period } => {
                (x0 + d, y0 + amplitude * triangle(tau / period.max(1e-9)))
            }
            Trajectory::Stationary => (x0, y0),
        };
        let span_x = (frame.0 - self.width) as f64;
        let span_y = (frame.1 - self.height) as f64;
        (
            reflect(x, span_x).round() as usize,
            reflect(y, span_y).round() as usize,
        )
    }

    pub fn bbox(&self, t: usize, frame: (usize, usize)) -> BoxProposal {
        let (x, y) = self.position(t, frame);
        BoxProposal::new(
            x as f64,
            y as f64,
            (x + self.width) as f64,
            (y + self.height) as f64,
            ProposalSource::External,
        )
    }

    fn texture(&self) -> Vec<[u8; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let amp = self.texture_amplitude as i32;
        (0..self.width * self.height)
            .map(|_| {
                let n = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
                self.rgb.map(|c| (c as i32 + n).clamp(0, 255) as u8)
            })
            .collect()
    }
}

fn noise_texture(width: usize, height: usize, base: u8, amplitude: u8, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = amplitude as i32;
    (0..width * height)
        .map(|_| {
            let n = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
            (base as i32 + n).clamp(0, 255) as u8
        })
        .collect()
}

/// Renders frames of a scene on demand.
pub struct SceneRenderer {
    cfg: SceneConfig,
    background: Vec<u8>,
    textures: Vec<Vec<[u8; 3]>>,
}

impl SceneRenderer {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let background = match &cfg.background {
            Background::Flat { .. } => Vec::new(),
            Background::Noise { base, amplitude, seed }
            | Background::Scrolling { base, amplitude, seed, .. } => {
                noise_texture(cfg.width, cfg.height, *base, *amplitude, *seed)
            }
        };
        let textures = cfg.sprites.iter().map(|s| s.texture()).collect();
        Ok(SceneRenderer {
            cfg,
            background,
            textures,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn render(&self, t: usize) -> Frame {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut frame = match &self.cfg.background {
            Background::Flat { rgb } => Frame::filled(w, h, *rgb),
            Background::Noise { .. } => Frame::filled(w, h, [0, 0, 0]),
            Background::Scrolling { .. } => Frame::filled(w, h, [0, 0, 0]),
        };
        let shift = match &self.cfg.background {
            Background::Noise { .. } => Some((0, 0)),
            Background::Scrolling { dx, dy, .. } => Some((dx * t as i64, dy * t as i64)),
            Background::Flat { .. } => None,
        };
        if let Some((sx, sy)) = shift {
            for y in 0..h {
                let ty = (y as i64 - sy).rem_euclid(h as i64) as usize;
                for x in 0..w {
                    let tx = (x as i64 - sx).rem_euclid(w as i64) as usize;
                    let v = self.background[ty * w + tx];
                    frame.set_pixel(x, y, [v, v, v]);
                }
            }
        }
        for (sprite, texture) in self.cfg.sprites.iter().zip(&self.textures) {
            let (px, py) = sprite.position(t, (w, h));
            for y in 0..sprite.height {
                for x in 0..sprite.width {
                    frame.set_pixel(px + x, py + y, texture[y * sprite.width + x]);
                }
            }
        }
        frame
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.length == 0 {
            return Err(Error::config("scene dimensions and length must be positive"));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if s.width == 0 || s.height == 0 || s.width > self.width || s.height > self.height {
                return Err(Error::config(format!(
                    "sprite {i} ({}x{}) does not fit a {}x{} frame",
                    s.width, s.height, self.width, self.height
                )));
            }
            if s.active.0 > s.active.1 || s.active.1 >= self.length {
                return Err(Error::config(format!("sprite {i} active interval outside the sequence")));
            }
            if !(s.speed >= 0.0 && s.speed.is_finite()) {
                return Err(Error::config(format!("sprite {i} speed must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// A rendered synthetic sequence and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub frames: Vec<Frame>,
    pub gt: GtVideo,
}

/// Ground truth: one tube per sprite over its active interval, the label of
/// the leading sprite's trajectory, and the leading sprite center per frame.
pub fn ground_truth(video: &str, cfg: &SceneConfig) -> GtVideo {
    let dims = (cfg.width, cfg.height);
    let tubes = cfg
        .sprites
        .iter()
        .map(|s| {
            (s.active.0..=s.active.1)
                .map(|t| (t, s.bbox(t, dims)))
                .collect::<TubeBoxes>()
        })
        .collect();
    let label = cfg
        .sprites
        .first()
        .map_or("background", |s| s.trajectory.class_name())
        .to_string();
    let gaze = match cfg.sprites.first() {
        Some(lead) => (0..cfg.length)
            .map(|t| {
                let (cx, cy) = lead.bbox(t, dims).center();
                (t, cx, cy)
            })
            .collect(),
        None => Vec::new(),
    };
    GtVideo {
        video: video.to_string(),
        label,
        tubes,
        gaze,
    }
}

pub fn generate(video: &str, cfg: &SceneConfig) -> Result<SynthVideo> {
    let renderer = SceneRenderer::new(cfg.clone())?;
    let frames = (0..cfg.length).map(|t| renderer.render(t)).collect();
    Ok(SynthVideo {
        frames,
        gt: ground_truth(video, cfg),
    })
}

pub const SUITE_VERSION: u32 = 1;
pub const SUITE_SEED: u64 = 0x5eed_2024;
pub const SUITE_FRAME: (usize, usize) = (64, 64);
pub const SUITE_LENGTH: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Localization,
    Clustering,
    Gaze,
    Temporal,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::Localization => "localization",
            Subset::Clustering => "clustering",
            Subset::Gaze => "gaze",
            Subset::Temporal => "temporal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSequence {
    pub id: String,
    pub subset: Subset,
    pub seed: u64,
    pub scene: SceneConfig,
}

fn sprite_rng(subset: Subset, index: usize) -> (u64, ChaCha8Rng) {
    let tag = match subset {
        Subset::Localization => 1u64,
        Subset::Clustering => 2,
        Subset::Gaze => 3,
        Subset::Temporal => 4,
    };
    let seed = SUITE_SEED ^ (tag << 40) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    (seed, ChaCha8Rng::seed_from_u64(seed))
}

fn bright_rgb(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random_range(190..=230), rng.random_range(190..=230), rng.random_range(190..=230)]
}

fn moving_trajectory(class: usize, rng: &mut ChaCha8Rng) -> (Trajectory, f64) {
    match class {
        0 => (
            Trajectory::Linear {
                angle: rng.random_range(0.0..360.0),
            },
            rng.random_range(1.5..2.5),
        ),
        1 => (
            Trajectory::Circular {
                radius: rng.random_range(12.0..18.0),
            },
            rng.random_range(1.5..2.5),
        ),
        _ => (
            Trajectory::Zigzag {
                amplitude: rng.random_range(14.0..22.0),
                period: rng.random_range(10.0..14.0),
            },
            rng.random_range(1.5..2.5),
        ),
    }
}

fn sprite(
    rng: &mut ChaCha8Rng,
    trajectory: Trajectory,
    speed: f64,
    active: (usize, usize),
    texture_seed: u64,
) -> SpriteConfig {
    let size = rng.random_range(14..=20);
    let (w, h) = SUITE_FRAME;
    SpriteConfig {
        width: size,
        height: size,
        start: (
            rng.random_range(4.0..(w - size - 4) as f64),
            rng.random_range(4.0..(h - size - 4) as f64),
        ),
        trajectory,
        speed,
        active,
        rgb: bright_rgb(rng),
        texture_amplitude: 48,
        texture_seed,
    }
}

fn background(rng: &mut ChaCha8Rng, noisy: bool) -> Background {
    if noisy {
        Background::Noise {
            base: 40,
            amplitude: 12,
            seed: rng.random(),
        }
    } else {
        let v = rng.random_range(20..=60);
        Background::Flat { rgb: [v, v, v] }
    }
}

/// Scene definition of one suite sequence.
pub fn suite_scene(subset: Subset, index: usize) -> SuiteSequence {
    let (seed, mut rng) = sprite_rng(subset, index);
    let (w, h) = SUITE_FRAME;
    let full = (0, SUITE_LENGTH - 1);
    let (bg, sprites) = match subset {
        Subset::Localization => {
            let (traj, speed) = moving_trajectory(index % 3, &mut rng);
            let bg = background(&mut rng, index % 2 == 1);
            (bg, vec![sprite(&mut rng, traj, speed, full, seed ^ 1)])
        }
        Subset::Clustering => {
            let (traj, speed) = moving_trajectory(index / 10, &mut rng);
            let bg = background(&mut rng, false);
            (bg, vec![sprite(&mut rng, traj, speed, full, seed ^ 1)])
        }
        Subset::Gaze => {
            let (traj, speed) = moving_trajectory(index % 3, &mut rng);
            let bg = background(&mut rng, true);
            (bg, vec![sprite(&mut rng, traj, speed, full, seed ^ 1)])
        }
        Subset::Temporal => {
            let (traj, speed) = moving_trajectory(index % 3, &mut rng);
            let bg = background(&mut rng, false);
            (bg, vec![sprite(&mut rng, traj, speed, (20, 40), seed ^ 1)])
        }
    };
    let id = format!(
        "{}_{index:02}",
        match subset {
            Subset::Localization => "loc",
            Subset::Clustering => "clu",
            Subset::Gaze => "gaze",
            Subset::Temporal => "tmp",
        }
    );
    SuiteSequence {
        id,
        subset,
        seed,
        scene: SceneConfig {
            width: w,
            height: h,
            length: SUITE_LENGTH,
            background: bg,
            sprites,
            seed,
        },
    }
}

pub fn subset_size(subset: Subset) -> usize {
    match subset {
        Subset::Localization => 20,
        Subset::Clustering => 30,
        Subset::Gaze => 10,
        Subset::Temporal => 20,
    }
}

pub fn subset_scenes(subset: Subset) -> Vec<SuiteSequence> {
    (0..subset_size(subset)).map(|i| suite_scene(subset, i)).collect()
}

/// The 60-sequence acceptance corpus.
pub fn benchmark_suite() -> Vec<SuiteSequence> {
    [Subset::Localization, Subset::Clustering, Subset::Gaze]
        .into_iter()
        .flat_map(subset_scenes)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub id: String,
    pub subset: Subset,
    pub seed: u64,
    pub label: String,
    pub frames: PathBuf,
    pub ground_truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub version: u32,
    pub sequences: Vec<SuiteEntry>,
    /// Combined ground-truth file per subset.
    pub ground_truth: BTreeMap<String, PathBuf>,
}

impl SuiteManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub const SUITE_INDEX: &str = "suite.json";

fn write_gt_file(path: &Path, gts: &[GtVideo]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = BufWriter::new(file);
    write_ground_truth(&mut w, gts)?;
    w.flush()?;
    Ok(())
}

/// Writes `sequences` under `out_dir` as pixmap directories with per-video and
/// per-subset ground truth, plus the suite index. Paths in the index are
/// relative to `out_dir`.
pub fn write_suite(out_dir: &Path, sequences: &[SuiteSequence]) -> Result<SuiteManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::at_path(out_dir, e))?;
    let mut entries = Vec::new();
    let mut by_subset: BTreeMap<Subset, Vec<GtVideo>> = BTreeMap::new();
    for seq in sequences {
        let video = generate(&seq.id, &seq.scene)?;
        let frames = PathBuf::from(&seq.id).join("frames");
        write_ppm_sequence(&out_dir.join(&frames), &video.frames)?;
        let gt_path = PathBuf::from(&seq.id).join("gt.jsonl");
        write_gt_file(&out_dir.join(&gt_path), std::slice::from_ref(&video.gt))?;
        entries.push(SuiteEntry {
            id: seq.id.clone(),
            subset: seq.subset,
            seed: seq.seed,
            label: video.gt.label.clone(),
            frames,
            ground_truth: gt_path,
        });
        by_subset.entry(seq.subset).or_default().push(video.gt);
    }
    let mut combined = BTreeMap::new();
    for (subset, gts) in &by_subset {
        let name = PathBuf::from(format!("{}_gt.jsonl", subset.name()));
        write_gt_file(&out_dir.join(&name), gts)?;
        combined.insert(subset.name().to_string(), name);
    }
    let manifest = SuiteManifest {
        version: SUITE_VERSION,
        sequences: entries,
        ground_truth: combined,
    };
    let index = out_dir.join(SUITE_INDEX);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::validation(e.to_string()))?;
    fs::write(&index, text + "\n").map_err(|e| Error::at_path(&index, e))?;
    Ok(manifest)
}

pub fn make_benchmark_suite(out_dir: &Path) -> Result<SuiteManifest> {
    write_suite(out_dir, &benchmark_suite())
}
