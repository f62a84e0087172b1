//! Dense row-major `f32` tensors, matrix products, the spatial softmax, and
//! the `STF1` binary container.
//!
//! `STF1` layout: the four magic bytes `STF1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` dims, then the row-major payload as
//! little-endian `f32`. Files may hold several tensors back to back.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STF1_MAGIC: &[u8; 4] = b"STF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dim in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::validation(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Index of the largest entry; the earliest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f32) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "add_scaled: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// FNV-1a over the bit patterns; used to prove weights are untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.dims {
            h = fnv_step(h, &(*d as u64).to_le_bytes());
        }
        for v in &self.data {
            h = fnv_step(h, &v.to_bits().to_le_bytes());
        }
        h
    }

    /// Heap bytes held by the tensor.
    pub fn footprint_bytes(&self) -> usize {
        self.data.capacity() * std::mem::size_of::<f32>()
            + self.dims.capacity() * std::mem::size_of::<usize>()
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(format!("{what}: expected a matrix, got {other:?}"))),
        }
    }
}

pub(crate) fn fnv_step(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Standard matrix product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul lhs")?;
    let (k2, n) = b.matrix_dims("matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        MatRef::new(&a.data, m, k),
        MatRef::new(&b.data, k, n),
        0.0,
        &mut out.data,
    );
    Ok(out)
}

/// Borrowed row-major matrix view, optionally transposed without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = a · b + beta · out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f32, out: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dims");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were constructed from slices whose lengths cover
    // every strided index, and `out` is exactly m*n with row stride n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax over every entry of a 2-D map, stabilized by max subtraction.
pub fn softmax2d(e: &Tensor) -> Result<Tensor> {
    if e.rank() != 2 {
        return Err(Error::shape(format!("softmax2d expects rank 2, got {:?}", e.dims)));
    }
    e.ensure_finite("softmax2d input")?;
    let max = e.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = e.data.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    let data = exps.iter().map(|&x| (x / total) as f32).collect();
    Ok(Tensor {
        dims: e.dims.clone(),
        data,
    })
}

pub fn write_stf1<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    buf.extend_from_slice(STF1_MAGIC);
    buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads the next tensor; `Ok(None)` on a clean end of stream.
pub fn read_stf1<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    let got = read_up_to(r, &mut magic)?;
    if got == 0 {
        return Ok(None);
    }
    if got < 4 {
        return Err(truncated("magic"));
    }
    if &magic != STF1_MAGIC {
        return Err(Error::Format {
            frame: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format {
            frame: 0,
            message: format!("unsupported rank {rank}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => truncated("payload"),
        _ => Error::Io(e),
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data).map(Some)
}

pub fn read_stf1_all<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_stf1(r)? {
        out.push(t);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => truncated("header"),
        _ => Error::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn truncated(part: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated STF1 {part}"),
    ))
}
