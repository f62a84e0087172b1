//! Frozen convolutional frame encoder and feature-grid ingestion.
//!
//! The encoder is a short stack of strided convolutions with seeded,
//! orthogonalized random weights and `tanh` activations, optionally followed
//! by average pooling per layer. Weights are fixed at construction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::tensor::{gemm, read_stf1, write_stf1, MatRef, Tensor};

/// Pixel standardization: `(v/255 - MEAN) / STD` on every channel.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Spatial feature tensor for one frame, stored as `width × height × depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub frame_index: usize,
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(frame_index: usize, values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(format!(
                "feature grid needs rank 3, got {:?}",
                values.dims()
            )));
        }
        values.ensure_finite("feature grid")?;
        Ok(FeatureGrid {
            frame_index,
            values,
        })
    }

    pub fn zeros(frame_index: usize, width: usize, height: usize, depth: usize) -> Self {
        FeatureGrid {
            frame_index,
            values: Tensor::zeros(&[width, height, depth]),
        }
    }

    pub fn width(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn depth(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn dims(&self) -> GridDims {
        GridDims {
            width: self.width(),
            height: self.height(),
            depth: self.depth(),
        }
    }

    /// Locations in storage order: location `i·height + j` is cell `(i, j)`.
    pub fn locations(&self) -> usize {
        self.width() * self.height()
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let d = self.depth();
        let loc = i * self.height() + j;
        &self.values.data()[loc * d..(loc + 1) * d]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl GridDims {
    pub fn locations(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    #[serde(default = "one")]
    pub pool: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub seed: u64,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
}

impl EncoderConfig {
    /// 64×64 input to an 8×8×32 grid.
    pub fn desk() -> Self {
        EncoderConfig {
            input_width: 64,
            input_height: 64,
            layers: vec![
                ConvLayerSpec { kernel: 3, stride: 2, channels: 16, pool: 1 },
                ConvLayerSpec { kernel: 3, stride: 2, channels: 32, pool: 1 },
                ConvLayerSpec { kernel: 3, stride: 1, channels: 32, pool: 2 },
            ],
            seed: 7,
            weights_path: None,
        }
    }

    /// 224×224 input to a 14×14×512 grid.
    pub fn full_scale() -> Self {
        EncoderConfig {
            input_width: 224,
            input_height: 224,
            layers: vec![
                ConvLayerSpec { kernel: 7, stride: 4, channels: 64, pool: 1 },
                ConvLayerSpec { kernel: 3, stride: 2, channels: 128, pool: 1 },
                ConvLayerSpec { kernel: 3, stride: 2, channels: 512, pool: 1 },
            ],
            seed: 7,
            weights_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 {
            return Err(Error::config("encoder input size must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("encoder needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 || l.channels == 0 || l.pool == 0 {
                return Err(Error::config(format!("encoder layer {i} has a zero field")));
            }
        }
        let (w, h) = self.layer_sizes().last().copied().unwrap_or_default();
        if w == 0 || h == 0 {
            return Err(Error::config("encoder reduces the input to an empty grid"));
        }
        Ok(())
    }

    /// Output spatial size `(width, height)` after each layer.
    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        let mut size = (self.input_width, self.input_height);
        self.layers
            .iter()
            .map(|l| {
                size = (size.0.div_ceil(l.stride) / l.pool, size.1.div_ceil(l.stride) / l.pool);
                size
            })
            .collect()
    }

    pub fn grid_dims(&self) -> GridDims {
        let (width, height) = self.layer_sizes().last().copied().unwrap_or_default();
        GridDims {
            width,
            height,
            depth: self.layers.last().map_or(0, |l| l.channels),
        }
    }
}

/// One axis of one layer: total "same" padding split with the smaller half first.
fn pad_before(input: usize, l: &ConvLayerSpec) -> usize {
    let out = input.div_ceil(l.stride);
    ((out - 1) * l.stride + l.kernel).saturating_sub(input) / 2
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    spec: ConvLayerSpec,
    in_channels: usize,
    /// `channels × (kernel·kernel·in_channels)`, patch order `(ky, kx, c)`.
    weights: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut in_channels = 3;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for spec in &cfg.layers {
            let fan_in = spec.kernel * spec.kernel * in_channels;
            let weights = orthogonal_rows(spec.channels, fan_in, &mut rng);
            layers.push(ConvLayer {
                spec: *spec,
                in_channels,
                weights,
                bias: Tensor::zeros(&[spec.channels]),
            });
            in_channels = spec.channels;
        }
        let mut enc = Encoder { cfg, layers };
        if let Some(path) = enc.cfg.weights_path.clone() {
            enc.load_weights(&path)?;
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn grid_dims(&self) -> GridDims {
        self.cfg.grid_dims()
    }

    pub fn checksum(&self) -> u64 {
        self.layers.iter().fold(0u64, |acc, l| {
            acc.rotate_left(7) ^ l.weights.checksum() ^ l.bias.checksum().rotate_left(3)
        })
    }

    /// Weights file: per layer a `channels×k×k×in` weight tensor then a bias.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::at_path(path, e))?;
        let mut w = BufWriter::new(file);
        for l in &self.layers {
            let k = l.spec.kernel;
            let t = l
                .weights
                .clone()
                .reshape(vec![l.spec.channels, k, k, l.in_channels])?;
            write_stf1(&mut w, &t)?;
            write_stf1(&mut w, &l.bias)?;
        }
        w.flush()?;
        Ok(())
    }

    fn load_weights(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
        let mut r = BufReader::new(file);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let k = l.spec.kernel;
            let w = read_stf1(&mut r)?.ok_or_else(|| Error::config(format!("weights file ends before layer {i}")))?;
            let b = read_stf1(&mut r)?.ok_or_else(|| Error::config(format!("weights file lacks bias {i}")))?;
            if w.dims() != [l.spec.channels, k, k, l.in_channels] || b.dims() != [l.spec.channels] {
                return Err(Error::config(format!(
                    "layer {i} weights {:?} / bias {:?} do not match the config",
                    w.dims(),
                    b.dims()
                )));
            }
            w.ensure_finite("encoder weights")?;
            b.ensure_finite("encoder bias")?;
            l.weights = w.reshape(vec![l.spec.channels, k * k * l.in_channels])?;
            l.bias = b;
        }
        Ok(())
    }

    pub fn encode_frame(&self, frame: &Frame, frame_index: usize) -> Result<FeatureGrid> {
        if frame.width != self.cfg.input_width || frame.height != self.cfg.input_height {
            return Err(Error::shape(format!(
                "frame is {}x{}, encoder expects {}x{}",
                frame.width, frame.height, self.cfg.input_width, self.cfg.input_height
            )));
        }
        let mut act: Vec<f32> = frame
            .data
            .iter()
            .map(|&v| (v as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD)
            .collect();
        let (mut w, mut h, mut c) = (frame.width, frame.height, 3);
        for layer in &self.layers {
            let (out, ow, oh) = conv_tanh(&act, w, h, c, layer);
            let (pooled, pw, ph) = avg_pool(&out, ow, oh, layer.spec.channels, layer.spec.pool);
            act = pooled;
            w = pw;
            h = ph;
            c = layer.spec.channels;
        }
        // channel-last (y, x, c) to grid order (x, y, c)
        let mut grid = vec![0.0f32; act.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * c;
                let dst = (x * h + y) * c;
                grid[dst..dst + c].copy_from_slice(&act[src..src + c]);
            }
        }
        FeatureGrid::new(frame_index, Tensor::new(vec![w, h, c], grid)?)
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` seen by grid cell `(i, j)`,
    /// before clipping to the frame. Negative/oversized extents mean the
    /// cell's view includes padding.
    pub fn receptive_field_unclipped(&self, i: usize, j: usize) -> (i64, i64, i64, i64) {
        let (x0, x1) = self.axis_field(i, |c| c.input_width, 0);
        let (y0, y1) = self.axis_field(j, |c| c.input_height, 1);
        (x0, y0, x1, y1)
    }

    /// Receptive field clipped to the frame.
    pub fn receptive_field(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        let (x0, y0, x1, y1) = self.receptive_field_unclipped(i, j);
        let cw = self.cfg.input_width as i64;
        let ch = self.cfg.input_height as i64;
        (
            x0.clamp(0, cw) as usize,
            y0.clamp(0, ch) as usize,
            x1.clamp(0, cw) as usize,
            y1.clamp(0, ch) as usize,
        )
    }

    /// A cell is interior when no layer's window reaches into padding.
    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        let (x0, y0, x1, y1) = self.receptive_field_unclipped(i, j);
        x0 >= 0 && y0 >= 0 && x1 <= self.cfg.input_width as i64 && y1 <= self.cfg.input_height as i64
    }

    fn axis_field(&self, index: usize, input: impl Fn(&EncoderConfig) -> usize, axis: usize) -> (i64, i64) {
        let mut sizes = vec![input(&self.cfg)];
        for s in self.cfg.layer_sizes() {
            sizes.push(if axis == 0 { s.0 } else { s.1 });
        }
        let (mut lo, mut hi) = (index as i64, index as i64 + 1);
        for (li, l) in self.cfg.layers.iter().enumerate().rev() {
            let p = l.pool as i64;
            lo *= p;
            hi *= p;
            let s = l.stride as i64;
            let pb = pad_before(sizes[li], l) as i64;
            lo = lo * s - pb;
            hi = (hi - 1) * s - pb + l.kernel as i64;
        }
        (lo, hi)
    }
}

fn conv_tanh(input: &[f32], w: usize, h: usize, c: usize, layer: &ConvLayer) -> (Vec<f32>, usize, usize) {
    let spec = &layer.spec;
    let (k, s) = (spec.kernel, spec.stride);
    let (ow, oh) = (w.div_ceil(s), h.div_ceil(s));
    let (px, py) = (
        pad_before(w, spec) as i64,
        pad_before(h, spec) as i64,
    );
    let patch = k * k * c;
    let mut cols = vec![0.0f32; ow * oh * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * s + ky) as i64 - py;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as i64 - px;
                    if ix < 0 || ix >= w as i64 {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    let oc = spec.channels;
    let mut out = vec![0.0f32; ow * oh * oc];
    gemm(
        MatRef::new(&cols, ow * oh, patch),
        MatRef::new(layer.weights.data(), oc, patch).t(),
        0.0,
        &mut out,
    );
    let bias = layer.bias.data();
    for px in out.chunks_exact_mut(oc) {
        for (v, b) in px.iter_mut().zip(bias) {
            *v = (*v + b).tanh();
        }
    }
    (out, ow, oh)
}

fn avg_pool(input: &[f32], w: usize, h: usize, c: usize, p: usize) -> (Vec<f32>, usize, usize) {
    if p == 1 {
        return (input.to_vec(), w, h);
    }
    let (ow, oh) = (w / p, h / p);
    let mut out = vec![0.0f32; ow * oh * c];
    let norm = 1.0 / (p * p) as f32;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for dy in 0..p {
                for dx in 0..p {
                    let src = ((oy * p + dy) * w + ox * p + dx) * c;
                    for (d, v) in dst.iter_mut().zip(&input[src..src + c]) {
                        *d += v;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
    }
    (out, ow, oh)
}

/// Seeded Gaussian matrix with orthonormalized rows (or columns, when there
/// are more rows than columns), rescaled so rows keep unit gain.
fn orthogonal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut m: Vec<f64> = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
    // modified Gram-Schmidt over the r rows of length c, r <= c
    for i in 0..r {
        for j in 0..i {
            let dot: f64 = (0..c).map(|k| m[i * c + k] * m[j * c + k]).sum();
            for k in 0..c {
                m[i * c + k] -= dot * m[j * c + k];
            }
        }
        let norm = (0..c).map(|k| m[i * c + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            m[i * c + k] /= norm;
        }
    }
    let gain = if transpose { (rows as f64 / cols as f64).sqrt() } else { 1.0 };
    let mut data = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if transpose { m[j * c + i] } else { m[i * c + j] };
            data[i * cols + j] = (v * gain) as f32;
        }
    }
    Tensor::new(vec![rows, cols], data).expect("orthogonal dims")
}

/// Streams `FeatureGrid`s from a file of back-to-back `STF1` tensors,
/// holding one grid at a time.
pub struct FeatureSequenceReader<R> {
    reader: R,
    index: usize,
    dims: Option<Vec<usize>>,
    failed: bool,
}

pub fn load_feature_sequence(path: &Path) -> Result<FeatureSequenceReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
    Ok(FeatureSequenceReader::new(BufReader::new(file)))
}

impl<R: Read> FeatureSequenceReader<R> {
    pub fn new(reader: R) -> Self {
        FeatureSequenceReader {
            reader,
            index: 0,
            dims: None,
            failed: false,
        }
    }

    /// Skips `n` grids (resume support); they are decoded but not returned.
    pub fn skip(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.next().transpose()?.is_none() {
                break;
            }
        }
        Ok(())
    }
}

impl<R: Read> Iterator for FeatureSequenceReader<R> {
    type Item = Result<FeatureGrid>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let index = self.index;
        let t = match read_stf1(&mut self.reader) {
            Ok(Some(t)) => t,
            Ok(None) => return None,
            Err(Error::Format { message, .. }) => {
                self.failed = true;
                return Some(Err(Error::Format { frame: index, message }));
            }
            Err(e) => {
                self.failed = true;
                return Some(Err(e.in_frame(index)));
            }
        };
        if t.rank() != 3 {
            self.failed = true;
            return Some(Err(Error::Format {
                frame: index,
                message: format!("feature grid must be rank 3, got {:?}", t.dims()),
            }));
        }
        match &self.dims {
            None => self.dims = Some(t.dims().to_vec()),
            Some(d) if d.as_slice() != t.dims() => {
                self.failed = true;
                return Some(Err(Error::Format {
                    frame: index,
                    message: format!("grid dims {:?} differ from first frame {:?}", t.dims(), d),
                }));
            }
            Some(_) => {}
        }
        self.index += 1;
        Some(FeatureGrid::new(index, t).map_err(|e| e.in_frame(index)))
    }
}

pub fn write_feature_sequence<W: Write>(w: &mut W, grids: &[FeatureGrid]) -> Result<()> {
    for g in grids {
        write_stf1(w, g.values())?;
    }
    Ok(())
}
