//! Hierarchical recurrent next-feature predictor trained online.
//!
//! Every grid location runs the same stack of LSTM cells (shared weights).
//! Layer 1 reads the location's feature vector; layer `l > 1` reads the
//! current hidden state of layer `l - 1` and receives that layer's current
//! memory as an additive term on its candidate gate. An affine head maps the
//! top hidden state back to feature space, giving the next-frame prediction.
//!
//! The loss weights each location's squared L1 prediction error by the
//! mean absolute change of the observed features at that location, so static
//! regions contribute nothing. Gradients are back-propagated over a bounded
//! window of past steps and applied once per observed frame.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureGrid, GridDims};
use crate::error::{Error, Result};
use crate::lstm::{lstm_cell_backward, lstm_cell_forward, GateCache, LstmCellParams};
use crate::stats::RunningStats;
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRateConfig {
    pub initial: f64,
    /// Relative increase applied when the error exceeds its running mean.
    pub surprise_gain: f64,
    /// Relative decrease applied otherwise.
    pub decay: f64,
    pub min: f64,
    pub max: f64,
    pub history_decay: f64,
}

impl LearningRateConfig {
    /// Starting rate of the desk preset. The stock `1e-8` leaves a 64-wide
    /// stack visibly untrained over a 60-frame clip.
    pub const DESK_INITIAL: f64 = 1e-3;
}

impl Default for LearningRateConfig {
    fn default() -> Self {
        LearningRateConfig {
            initial: 1e-8,
            surprise_gain: 1e-2,
            decay: 1e-3,
            min: 1e-10,
            max: 1e-2,
            history_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub bptt_window: usize,
    pub init_std: f32,
    pub forget_bias: f32,
    pub grad_clip: f32,
    pub seed: u64,
    #[serde(default)]
    pub learning_rate: LearningRateConfig,
}

impl PredictorConfig {
    pub fn desk() -> Self {
        PredictorConfig {
            layers: 3,
            hidden: 64,
            bptt_window: 8,
            init_std: 0.1,
            forget_bias: 1.0,
            grad_clip: 1.0,
            seed: 11,
            learning_rate: LearningRateConfig {
                initial: LearningRateConfig::DESK_INITIAL,
                ..LearningRateConfig::default()
            },
        }
    }

    pub fn full_scale() -> Self {
        PredictorConfig {
            hidden: 512,
            learning_rate: LearningRateConfig::default(),
            ..PredictorConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = &self.learning_rate;
        if self.layers == 0 || self.hidden == 0 || self.bptt_window == 0 {
            return Err(Error::config("predictor layers, hidden size and window must be positive"));
        }
        if !(self.init_std > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::config("init_std and grad_clip must be positive"));
        }
        let positive = [lr.initial, lr.surprise_gain, lr.decay, lr.min, lr.max, lr.history_decay];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("learning-rate constants must be positive"));
        }
        if lr.decay >= 1.0 || lr.history_decay >= 1.0 || lr.min > lr.max {
            return Err(Error::config("learning-rate decay factors must be < 1 and min <= max"));
        }
        if lr.initial < lr.min || lr.initial > lr.max {
            return Err(Error::config("initial learning rate outside its clamp range"));
        }
        Ok(())
    }
}

/// Affine map from the top hidden state to feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    /// `d_f × d_h`
    pub weights: Tensor,
    pub bias: Tensor,
}

impl PredictionHead {
    fn zeros(d_f: usize, d_h: usize) -> Self {
        PredictionHead {
            weights: Tensor::zeros(&[d_f, d_h]),
            bias: Tensor::zeros(&[d_f]),
        }
    }
}

/// All learnable parameters: one cell per layer plus the head.
#[derive(Debug, Clone, PartialEq)]
pub struct StackParams {
    pub layers: Vec<LstmCellParams>,
    pub head: PredictionHead,
}

impl StackParams {
    pub fn zeros(depth: usize, layers: usize, hidden: usize) -> Self {
        StackParams {
            layers: (0..layers)
                .map(|l| LstmCellParams::zeros(if l == 0 { depth } else { hidden }, hidden))
                .collect(),
            head: PredictionHead::zeros(depth, hidden),
        }
    }

    pub fn random(depth: usize, cfg: &PredictorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = (0..cfg.layers)
            .map(|l| {
                let d_in = if l == 0 { depth } else { cfg.hidden };
                LstmCellParams::random(d_in, cfg.hidden, cfg.init_std, cfg.forget_bias, &mut rng)
            })
            .collect();
        let normal = Normal::new(0.0f32, cfg.init_std).expect("finite std");
        let mut head = PredictionHead::zeros(depth, cfg.hidden);
        for v in head.weights.data_mut() {
            *v = normal.sample(&mut rng);
        }
        StackParams { layers, head }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    /// `(name, tensor)` pairs in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.input_weights"), &p.input_weights));
            out.push((format!("layer{l}.recurrent_weights"), &p.recurrent_weights));
            out.push((format!("layer{l}.bias"), &p.bias));
        }
        out.push(("head.weights".into(), &self.head.weights));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors()
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(5) ^ t.checksum())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.squared_norm()).sum()
    }

    pub fn same_shape(&self, other: &StackParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
            && self.head.weights.dims() == other.head.weights.dims()
            && self.head.bias.dims() == other.head.bias.dims()
    }

    fn clear(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn footprint_bytes(&self) -> usize {
        self.tensors().iter().map(|t| t.footprint_bytes()).sum()
    }
}

/// Per-layer recurrent state, `locations × d_h` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub m: Tensor,
}

/// Parameters, recurrent states, learning rate and error history of the
/// predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct StackState {
    pub grid: GridDims,
    pub params: StackParams,
    pub states: Vec<LayerState>,
    pub learning_rate: f64,
    pub error_history: RunningStats,
}

impl StackState {
    pub fn new(grid: GridDims, cfg: &PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let params = StackParams::random(grid.depth, cfg);
        Ok(StackState::with_params(grid, params, cfg))
    }

    pub fn with_params(grid: GridDims, params: StackParams, cfg: &PredictorConfig) -> Self {
        let n = grid.locations();
        let states = params
            .layers
            .iter()
            .map(|p| LayerState {
                h: Tensor::zeros(&[n, p.d_h()]),
                m: Tensor::zeros(&[n, p.d_h()]),
            })
            .collect();
        StackState {
            grid,
            params,
            states,
            learning_rate: cfg.learning_rate.initial,
            error_history: RunningStats::new(cfg.learning_rate.history_decay),
        }
    }

    pub fn hidden(&self) -> usize {
        self.params.layers[0].d_h()
    }

    /// Top-layer hidden state, `locations × d_h`.
    pub fn top_hidden(&self) -> &Tensor {
        &self.states.last().expect("at least one layer").h
    }

    pub fn footprint_bytes(&self) -> usize {
        self.params.footprint_bytes()
            + self
                .states
                .iter()
                .map(|s| s.h.footprint_bytes() + s.m.footprint_bytes())
                .sum::<usize>()
    }
}

/// Caches of one forward step, kept for back-propagation through time.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub layers: Vec<GateCache>,
    pub top_hidden: Tensor,
}

impl StepCache {
    pub fn footprint_bytes(&self) -> usize {
        self.layers.iter().map(|c| c.footprint_bytes()).sum::<usize>() + self.top_hidden.footprint_bytes()
    }
}

/// Runs the stack on one feature grid, advancing the recurrent states, and
/// returns the predicted next grid and the step cache.
pub fn stack_forward(state: &mut StackState, f_t: &FeatureGrid) -> Result<(FeatureGrid, StepCache)> {
    if f_t.dims() != state.grid {
        return Err(Error::shape(format!(
            "grid {:?} does not match predictor grid {:?}",
            f_t.dims(),
            state.grid
        )));
    }
    let n = state.grid.locations();
    let d_f = state.grid.depth;
    let rows = f_t.values().clone().reshape(vec![n, d_f])?;
    let mut caches = Vec::with_capacity(state.params.layers.len());
    let mut input = rows;
    let mut inject: Option<Tensor> = None;
    for (params, layer) in state.params.layers.iter().zip(state.states.iter_mut()) {
        let out = lstm_cell_forward(params, &input, &layer.h, &layer.m, inject.as_ref())?;
        layer.h = out.h.clone();
        layer.m = out.m.clone();
        caches.push(out.cache);
        input = out.h;
        inject = Some(out.m);
    }
    let top = input;
    let head = &state.params.head;
    let d_h = top.dims()[1];
    let mut pred = vec![0.0f32; n * d_f];
    gemm(
        MatRef::new(top.data(), n, d_h),
        MatRef::new(head.weights.data(), d_f, d_h).t(),
        0.0,
        &mut pred,
    );
    for row in pred.chunks_exact_mut(d_f) {
        for (v, b) in row.iter_mut().zip(head.bias.data()) {
            *v += b;
        }
    }
    let values = Tensor::new(vec![state.grid.width, state.grid.height, d_f], pred)?;
    values
        .ensure_finite("prediction")
        .map_err(|e| e.in_frame(f_t.frame_index))?;
    let predicted = FeatureGrid::new(f_t.frame_index + 1, values)?;
    Ok((
        predicted,
        StepCache {
            layers: caches,
            top_hidden: top,
        },
    ))
}

/// Loss terms for one evaluated prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutcome {
    /// Mean of `error_map`, accumulated in `f64`.
    pub error_scalar: f64,
    /// Per-location weighted errors `e_ij`, `width × height`.
    pub error_map: Tensor,
    /// Mean absolute change of the observed features per location.
    pub zoh_mask: Tensor,
    /// Per-location L1 norm of the prediction residual.
    pub residual_l1: Tensor,
}

fn check_same(a: &FeatureGrid, b: &FeatureGrid, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Weighted zero-order-hold loss of `predicted` against `next`, weighted by
/// the change from `current` to `next`.
pub fn zoh_loss(predicted: &FeatureGrid, next: &FeatureGrid, current: &FeatureGrid) -> Result<PredictionOutcome> {
    check_same(predicted, next, "prediction vs observation")?;
    check_same(current, next, "consecutive observations")?;
    let (w, h, d) = (next.width(), next.height(), next.depth());
    let n = w * h;
    let mut mask = vec![0.0f32; n];
    let mut l1 = vec![0.0f32; n];
    let mut err = vec![0.0f32; n];
    let (p, f1, f0) = (predicted.values().data(), next.values().data(), current.values().data());
    let mut total = 0.0f64;
    for loc in 0..n {
        let range = loc * d..(loc + 1) * d;
        let change: f64 = f1[range.clone()]
            .iter()
            .zip(&f0[range.clone()])
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        let resid: f64 = f1[range.clone()]
            .iter()
            .zip(&p[range])
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        let m = (change / d as f64) as f32;
        let r = resid as f32;
        mask[loc] = m;
        l1[loc] = r;
        err[loc] = m * r * r;
        total += err[loc] as f64;
    }
    let dims = vec![w, h];
    Ok(PredictionOutcome {
        error_scalar: total / n as f64,
        error_map: Tensor::new(dims.clone(), err)?,
        zoh_mask: Tensor::new(dims.clone(), mask)?,
        residual_l1: Tensor::new(dims, l1)?,
    })
}

/// Gradient of the loss w.r.t. the prediction, `locations × d_f`.
pub fn zoh_loss_grad(outcome: &PredictionOutcome, predicted: &FeatureGrid, next: &FeatureGrid) -> Result<Tensor> {
    check_same(predicted, next, "prediction vs observation")?;
    let d = next.depth();
    let n = next.locations();
    let scale = 2.0 / n as f32;
    let (p, f1) = (predicted.values().data(), next.values().data());
    let mut g = vec![0.0f32; n * d];
    for loc in 0..n {
        let coef = scale * outcome.zoh_mask.data()[loc] * outcome.residual_l1.data()[loc];
        if coef == 0.0 {
            continue;
        }
        for k in loc * d..(loc + 1) * d {
            let diff = p[k] - f1[k];
            g[k] = if diff > 0.0 {
                coef
            } else if diff < 0.0 {
                -coef
            } else {
                0.0
            };
        }
    }
    Tensor::new(vec![n, d], g)
}

/// Multiplicative surprise rule. Returns the new learning rate and records
/// `error` in the history.
pub fn adapt_learning_rate(state: &mut StackState, error: f64, cfg: &LearningRateConfig) -> f64 {
    let surprised = !state.error_history.is_empty() && error > state.error_history.mean;
    let factor = if surprised {
        1.0 + cfg.surprise_gain
    } else {
        1.0 - cfg.decay
    };
    state.learning_rate = (state.learning_rate * factor).clamp(cfg.min, cfg.max);
    state.error_history.push(error);
    state.learning_rate
}

/// Back-propagates `dpred` (gradient w.r.t. the newest prediction) through
/// the head and over every cached step, accumulating into `grads`.
pub fn backprop_window(
    params: &StackParams,
    window: &VecDeque<StepCache>,
    dpred: &Tensor,
    grads: &mut StackParams,
) -> Result<()> {
    let newest = window
        .back()
        .ok_or_else(|| Error::Usage("no cached forward step to back-propagate".into()))?;
    let n = newest.top_hidden.dims()[0];
    let d_h = newest.top_hidden.dims()[1];
    let d_f = params.head.bias.len();
    if dpred.dims() != [n, d_f] {
        return Err(Error::shape(format!("prediction gradient {:?}", dpred.dims())));
    }
    // head
    let dp = MatRef::new(dpred.data(), n, d_f);
    gemm(
        dp.t(),
        MatRef::new(newest.top_hidden.data(), n, d_h),
        1.0,
        grads.head.weights.data_mut(),
    );
    for row in dpred.data().chunks_exact(d_f) {
        for (acc, v) in grads.head.bias.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dtop = vec![0.0f32; n * d_h];
    gemm(dp, MatRef::new(params.head.weights.data(), d_f, d_h), 0.0, &mut dtop);

    let layers = params.layers.len();
    let zeros = || Tensor::zeros(&[n, d_h]);
    // gradients arriving at step s from step s+1
    let mut dh_rec: Vec<Tensor> = (0..layers).map(|_| zeros()).collect();
    let mut dm_rec: Vec<Tensor> = (0..layers).map(|_| zeros()).collect();
    let mut first = true;
    for step in window.iter().rev() {
        if step.layers.len() != layers {
            return Err(Error::Usage("step cache depth differs from the stack".into()));
        }
        let mut dh_above: Option<Tensor> = None;
        let mut dm_above: Option<Tensor> = None;
        for l in (0..layers).rev() {
            let mut dh = std::mem::replace(&mut dh_rec[l], zeros());
            let mut dm = std::mem::replace(&mut dm_rec[l], zeros());
            if first && l == layers - 1 {
                for (a, b) in dh.data_mut().iter_mut().zip(&dtop) {
                    *a += b;
                }
            }
            if let Some(g) = dh_above.take() {
                dh.add_scaled(&g, 1.0)?;
            }
            if let Some(g) = dm_above.take() {
                dm.add_scaled(&g, 1.0)?;
            }
            let g = lstm_cell_backward(&params.layers[l], &step.layers[l], &dh, &dm, &mut grads.layers[l])?;
            dh_rec[l] = g.dh_prev;
            dm_rec[l] = g.dm_prev;
            if l > 0 {
                dh_above = Some(g.dx);
                dm_above = Some(g.dinject);
            }
        }
        first = false;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub grad_norm: f64,
    pub applied_scale: f64,
    pub learning_rate: f64,
}

/// Stack state plus the truncated-BPTT window and a reusable gradient buffer.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub state: StackState,
    pub window: VecDeque<StepCache>,
    grads: StackParams,
}

impl Predictor {
    pub fn new(grid: GridDims, cfg: PredictorConfig) -> Result<Self> {
        let state = StackState::new(grid, &cfg)?;
        Ok(Predictor::from_state(state, cfg))
    }

    pub fn from_state(state: StackState, cfg: PredictorConfig) -> Self {
        let grads = StackParams::zeros(state.grid.depth, state.params.layers.len(), state.hidden());
        Predictor {
            window: VecDeque::with_capacity(cfg.bptt_window + 1),
            cfg,
            state,
            grads,
        }
    }

    /// Predicts the next grid, caching the step for later updates.
    pub fn forward(&mut self, f_t: &FeatureGrid) -> Result<FeatureGrid> {
        let (pred, cache) = stack_forward(&mut self.state, f_t)?;
        if self.window.len() == self.cfg.bptt_window {
            self.window.pop_front();
        }
        self.window.push_back(cache);
        Ok(pred)
    }

    /// One clipped gradient step on all parameters from the loss of the
    /// newest prediction. A zero loss gradient leaves parameters untouched.
    pub fn continual_update(&mut self, dpred: &Tensor) -> Result<UpdateReport> {
        let lr = self.state.learning_rate;
        if dpred.data().iter().all(|&v| v == 0.0) {
            return Ok(UpdateReport {
                grad_norm: 0.0,
                applied_scale: 0.0,
                learning_rate: lr,
            });
        }
        self.grads.clear();
        backprop_window(&self.state.params, &self.window, dpred, &mut self.grads)?;
        let norm = self.grads.squared_norm().sqrt();
        if !norm.is_finite() {
            return Err(Error::validation("non-finite gradient norm"));
        }
        let clip = self.cfg.grad_clip as f64;
        let scale = if norm > clip { clip / norm } else { 1.0 };
        let step = -(lr * scale) as f32;
        for (p, g) in self.state.params.tensors_mut().into_iter().zip(self.grads.tensors()) {
            p.add_scaled(g, step)?;
        }
        Ok(UpdateReport {
            grad_norm: norm,
            applied_scale: scale,
            learning_rate: lr,
        })
    }

    pub fn adapt_learning_rate(&mut self, error: f64) -> f64 {
        adapt_learning_rate(&mut self.state, error, &self.cfg.learning_rate)
    }

    /// Takes over what another stream learned: parameters, learning rate and
    /// error statistics. Recurrent states and cached steps are left alone.
    pub fn warm_start(&mut self, params: StackParams, learning_rate: f64, error_history: RunningStats) -> Result<()> {
        if !params.same_shape(&self.state.params) {
            return Err(Error::validation("warm-start parameters do not match the configured stack"));
        }
        self.state.params = params;
        self.state.learning_rate = learning_rate;
        self.state.error_history = error_history;
        Ok(())
    }

    /// Bytes held by parameters, states, cached steps and gradient buffers.
    pub fn footprint_bytes(&self) -> usize {
        self.state.footprint_bytes()
            + self.window.iter().map(|c| c.footprint_bytes()).sum::<usize>()
            + self.grads.footprint_bytes()
    }
}
