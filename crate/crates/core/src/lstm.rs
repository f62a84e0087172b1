//! Vanilla LSTM cell with an exact hand-derived backward pass.
//!
//! The cell is batched over rows: every row of `x` is an independent
//! sequence element sharing the same weights (the predictor uses one row per
//! spatial grid location). Higher layers of a hierarchical stack can inject
//! an additive term into the candidate (`g`) pre-activation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Gate blocks, in the order they are stacked inside the weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];
}

/// Weights of one cell. Input weights are `4·d_h × d_in`, recurrent weights
/// `4·d_h × d_h` and the bias `4·d_h`, each stacked as `[i; f; o; g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    d_in: usize,
    d_h: usize,
    pub input_weights: Tensor,
    pub recurrent_weights: Tensor,
    pub bias: Tensor,
}

impl LstmCellParams {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmCellParams {
            d_in,
            d_h,
            input_weights: Tensor::zeros(&[4 * d_h, d_in]),
            recurrent_weights: Tensor::zeros(&[4 * d_h, d_h]),
            bias: Tensor::zeros(&[4 * d_h]),
        }
    }

    /// Gaussian weights with the given std, zero biases except the forget
    /// gate which starts at `forget_bias`.
    pub fn random<R: Rng + ?Sized>(
        d_in: usize,
        d_h: usize,
        std: f32,
        forget_bias: f32,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let mut p = LstmCellParams::zeros(d_in, d_h);
        for v in p.input_weights.data_mut() {
            *v = normal.sample(rng);
        }
        for v in p.recurrent_weights.data_mut() {
            *v = normal.sample(rng);
        }
        p.gate_bias_mut(Gate::Forget).fill(forget_bias);
        p
    }

    pub fn from_tensors(input_weights: Tensor, recurrent_weights: Tensor, bias: Tensor) -> Result<Self> {
        let (rows, d_in) = match input_weights.dims() {
            [r, c] if r % 4 == 0 => (*r, *c),
            other => return Err(Error::shape(format!("input weights {other:?}"))),
        };
        let d_h = rows / 4;
        if recurrent_weights.dims() != [4 * d_h, d_h] {
            return Err(Error::shape(format!(
                "recurrent weights {:?}, expected [{}, {d_h}]",
                recurrent_weights.dims(),
                4 * d_h
            )));
        }
        if bias.dims() != [4 * d_h] {
            return Err(Error::shape(format!("bias {:?}", bias.dims())));
        }
        Ok(LstmCellParams {
            d_in,
            d_h,
            input_weights,
            recurrent_weights,
            bias,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn param_count(&self) -> usize {
        self.input_weights.len() + self.recurrent_weights.len() + self.bias.len()
    }

    pub fn gate_input_weights(&self, gate: Gate) -> &[f32] {
        let n = self.d_h * self.d_in;
        &self.input_weights.data()[gate as usize * n..(gate as usize + 1) * n]
    }

    pub fn gate_recurrent_weights(&self, gate: Gate) -> &[f32] {
        let n = self.d_h * self.d_h;
        &self.recurrent_weights.data()[gate as usize * n..(gate as usize + 1) * n]
    }

    pub fn gate_bias(&self, gate: Gate) -> &[f32] {
        &self.bias.data()[gate as usize * self.d_h..(gate as usize + 1) * self.d_h]
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f32] {
        let d_h = self.d_h;
        &mut self.bias.data_mut()[gate as usize * d_h..(gate as usize + 1) * d_h]
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.input_weights, &self.recurrent_weights, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [
            &mut self.input_weights,
            &mut self.recurrent_weights,
            &mut self.bias,
        ]
    }

    pub fn same_shape(&self, other: &LstmCellParams) -> bool {
        self.d_in == other.d_in && self.d_h == other.d_h
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCache {
    pub rows: usize,
    pub x: Tensor,
    pub h_prev: Tensor,
    pub m_prev: Tensor,
    /// Post-activation gates, `rows × 4·d_h`, blocks `[i f o g]` per row.
    pub gates: Tensor,
    pub m: Tensor,
}

impl GateCache {
    pub fn footprint_bytes(&self) -> usize {
        self.x.footprint_bytes()
            + self.h_prev.footprint_bytes()
            + self.m_prev.footprint_bytes()
            + self.gates.footprint_bytes()
            + self.m.footprint_bytes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub h: Tensor,
    pub m: Tensor,
    pub cache: GateCache,
}

/// Gradients flowing out of one backward call, other than parameter grads.
#[derive(Debug, Clone, PartialEq)]
pub struct CellInputGrads {
    pub dx: Tensor,
    pub dh_prev: Tensor,
    pub dm_prev: Tensor,
    /// Gradient w.r.t. the additive candidate-gate injection.
    pub dinject: Tensor,
}

fn as_rows(t: &Tensor, width: usize, what: &str) -> Result<usize> {
    match t.dims() {
        [w] if *w == width => Ok(1),
        [r, w] if *w == width => Ok(*r),
        other => Err(Error::shape(format!("{what}: {other:?}, expected [rows, {width}]"))),
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Forward pass: `i,f,o = σ(·)`, `g = tanh(· + inject)`,
/// `m = f·m_prev + i·g`, `h = o·tanh(m)`.
pub fn lstm_cell_forward(
    params: &LstmCellParams,
    x: &Tensor,
    h_prev: &Tensor,
    m_prev: &Tensor,
    inject: Option<&Tensor>,
) -> Result<CellOutput> {
    let d_h = params.d_h;
    let rows = as_rows(x, params.d_in, "x")?;
    if as_rows(h_prev, d_h, "h_prev")? != rows || as_rows(m_prev, d_h, "m_prev")? != rows {
        return Err(Error::shape("state rows differ from input rows"));
    }
    if let Some(u) = inject {
        if as_rows(u, d_h, "inject")? != rows {
            return Err(Error::shape("inject rows differ from input rows"));
        }
    }
    let width = 4 * d_h;
    let mut pre = vec![0.0f32; rows * width];
    gemm(
        MatRef::new(x.data(), rows, params.d_in),
        MatRef::new(params.input_weights.data(), width, params.d_in).t(),
        0.0,
        &mut pre,
    );
    gemm(
        MatRef::new(h_prev.data(), rows, d_h),
        MatRef::new(params.recurrent_weights.data(), width, d_h).t(),
        1.0,
        &mut pre,
    );
    let bias = params.bias.data();
    let mut m = vec![0.0f32; rows * d_h];
    let mut h = vec![0.0f32; rows * d_h];
    for r in 0..rows {
        let row = &mut pre[r * width..(r + 1) * width];
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
        if let Some(u) = inject {
            let u = &u.data()[r * d_h..(r + 1) * d_h];
            for (v, add) in row[3 * d_h..].iter_mut().zip(u) {
                *v += add;
            }
        }
        for v in &mut row[..3 * d_h] {
            *v = sigmoid(*v);
        }
        for v in &mut row[3 * d_h..] {
            *v = v.tanh();
        }
        let mp = &m_prev.data()[r * d_h..(r + 1) * d_h];
        for k in 0..d_h {
            let (i, f, o, g) = (row[k], row[d_h + k], row[2 * d_h + k], row[3 * d_h + k]);
            let mk = f * mp[k] + i * g;
            m[r * d_h + k] = mk;
            h[r * d_h + k] = o * mk.tanh();
        }
    }
    let state_dims = [rows, d_h];
    let m = Tensor::new(state_dims.to_vec(), m)?;
    Ok(CellOutput {
        h: Tensor::new(state_dims.to_vec(), h)?,
        m: m.clone(),
        cache: GateCache {
            rows,
            x: x.clone().reshape(vec![rows, params.d_in])?,
            h_prev: h_prev.clone().reshape(state_dims.to_vec())?,
            m_prev: m_prev.clone().reshape(state_dims.to_vec())?,
            gates: Tensor::new(vec![rows, width], pre)?,
            m,
        },
    })
}

/// Backward pass. `dh` and `dm` are the upstream gradients w.r.t. this
/// step's outputs `h` and `m` (the latter from the future step and from any
/// layer the memory was injected into). Parameter gradients are accumulated
/// into `grads`.
pub fn lstm_cell_backward(
    params: &LstmCellParams,
    cache: &GateCache,
    dh: &Tensor,
    dm: &Tensor,
    grads: &mut LstmCellParams,
) -> Result<CellInputGrads> {
    let d_h = params.d_h;
    let rows = cache.rows;
    let width = 4 * d_h;
    if cache.gates.dims() != [rows, width] || cache.x.dims() != [rows, params.d_in] {
        return Err(Error::Usage(
            "gate cache does not come from a forward call with these parameters".into(),
        ));
    }
    if !grads.same_shape(params) {
        return Err(Error::shape("gradient buffer shape differs from params"));
    }
    if as_rows(dh, d_h, "dh")? != rows || as_rows(dm, d_h, "dm")? != rows {
        return Err(Error::shape("upstream gradient rows differ from cache"));
    }
    let gates = cache.gates.data();
    let mut da = vec![0.0f32; rows * width];
    let mut dm_prev = vec![0.0f32; rows * d_h];
    for r in 0..rows {
        let row = &gates[r * width..(r + 1) * width];
        let dar = &mut da[r * width..(r + 1) * width];
        for k in 0..d_h {
            let idx = r * d_h + k;
            let (i, f, o, g) = (row[k], row[d_h + k], row[2 * d_h + k], row[3 * d_h + k]);
            let tm = cache.m.data()[idx].tanh();
            let dhk = dh.data()[idx];
            let d_o = dhk * tm;
            let d_m = dm.data()[idx] + dhk * o * (1.0 - tm * tm);
            let d_f = d_m * cache.m_prev.data()[idx];
            let d_i = d_m * g;
            let d_g = d_m * i;
            dm_prev[idx] = d_m * f;
            dar[k] = d_i * i * (1.0 - i);
            dar[d_h + k] = d_f * f * (1.0 - f);
            dar[2 * d_h + k] = d_o * o * (1.0 - o);
            dar[3 * d_h + k] = d_g * (1.0 - g * g);
        }
    }
    let da_view = MatRef::new(&da, rows, width);
    gemm(
        da_view.t(),
        MatRef::new(cache.x.data(), rows, params.d_in),
        1.0,
        grads.input_weights.data_mut(),
    );
    gemm(
        da_view.t(),
        MatRef::new(cache.h_prev.data(), rows, d_h),
        1.0,
        grads.recurrent_weights.data_mut(),
    );
    let db = grads.bias.data_mut();
    for r in 0..rows {
        for (acc, v) in db.iter_mut().zip(&da[r * width..(r + 1) * width]) {
            *acc += v;
        }
    }
    let mut dx = vec![0.0f32; rows * params.d_in];
    gemm(
        da_view,
        MatRef::new(params.input_weights.data(), width, params.d_in),
        0.0,
        &mut dx,
    );
    let mut dh_prev = vec![0.0f32; rows * d_h];
    gemm(
        da_view,
        MatRef::new(params.recurrent_weights.data(), width, d_h),
        0.0,
        &mut dh_prev,
    );
    let dinject: Vec<f32> = (0..rows)
        .flat_map(|r| da[r * width + 3 * d_h..(r + 1) * width].iter().copied())
        .collect();
    Ok(CellInputGrads {
        dx: Tensor::new(vec![rows, params.d_in], dx)?,
        dh_prev: Tensor::new(vec![rows, d_h], dh_prev)?,
        dm_prev: Tensor::new(vec![rows, d_h], dm_prev)?,
        dinject: Tensor::new(vec![rows, d_h], dinject)?,
    })
}
