//! Small numeric kernels used by every network stage.
//!
//! Everything runs in `f32` with a fixed, sequential accumulation order so
//! that two calls with the same inputs give bit-identical results.

use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Row-major `rows x cols` matrix mapping a length-`cols` vector to length `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `out = self * u`. Shapes are the caller's responsibility.
    #[inline]
    pub fn apply(&self, u: &[f32], out: &mut [f32]) {
        debug_assert_eq!(u.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (row, o) in self.data.chunks_exact(self.cols).zip(out.iter_mut()) {
            let mut acc = 0.0f32;
            for (w, x) in row.iter().zip(u) {
                acc += w * x;
            }
            *o = acc;
        }
    }
}

pub fn matvec(w: &Matrix, u: &[f32]) -> Result<Vec<f32>> {
    if u.len() != w.cols {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} columns, vector has {} entries",
            w.cols,
            u.len()
        )));
    }
    let mut out = vec![0.0; w.rows];
    w.apply(u, &mut out);
    Ok(out)
}

/// Gain and bias of a LayerNorm over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNormWeights {
    pub fn identity(f: usize) -> Self {
        LayerNormWeights {
            gain: vec![1.0; f],
            bias: vec![0.0; f],
        }
    }

    #[inline]
    pub fn apply(&self, u: &[f32], out: &mut [f32]) {
        let n = u.len() as f32;
        let mean = u.iter().sum::<f32>() / n;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (((o, v), g), b) in out.iter_mut().zip(u).zip(&self.gain).zip(&self.bias) {
            *o = (v - mean) * inv * g + b;
        }
    }
}

pub fn layernorm(u: &[f32], weights: &LayerNormWeights) -> Result<Vec<f32>> {
    if weights.gain.len() != u.len() || weights.bias.len() != u.len() {
        return Err(Error::ShapeMismatch(format!(
            "layernorm of width {} applied to vector of length {}",
            weights.gain.len(),
            u.len()
        )));
    }
    let mut out = vec![0.0; u.len()];
    weights.apply(u, &mut out);
    Ok(out)
}

/// 1-D convolution kernel over columns, stored as `[f_in][f_out][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub f_in: usize,
    pub f_out: usize,
    pub k: usize,
    pub data: Vec<f32>,
}

impl ConvKernel {
    pub fn new(f_in: usize, f_out: usize, k: usize, data: Vec<f32>) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("kernel length {k} must be odd")));
        }
        if data.len() != f_in * f_out * k {
            return Err(Error::ShapeMismatch(format!(
                "kernel {f_in}x{f_out}x{k} needs {} values, got {}",
                f_in * f_out * k,
                data.len()
            )));
        }
        Ok(ConvKernel { f_in, f_out, k, data })
    }

    #[inline]
    pub fn tap(&self, i: usize, o: usize, t: usize) -> f32 {
        self.data[(i * self.f_out + o) * self.k + t]
    }

    /// Cross-correlation along columns of an `nx x f_in` line, zero padded by
    /// `(k - 1) / 2` on both sides. Writes `nx x f_out` into `out`.
    pub fn apply(&self, line: &[f32], nx: usize, out: &mut [f32]) {
        debug_assert_eq!(line.len(), nx * self.f_in);
        debug_assert_eq!(out.len(), nx * self.f_out);
        let pad = (self.k - 1) / 2;
        for x in 0..nx {
            let dst = &mut out[x * self.f_out..(x + 1) * self.f_out];
            for (o, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for t in 0..self.k {
                    let Some(src) = (x + t).checked_sub(pad).filter(|&s| s < nx) else {
                        continue;
                    };
                    let px = &line[src * self.f_in..(src + 1) * self.f_in];
                    for (i, v) in px.iter().enumerate() {
                        acc += self.tap(i, o, t) * v;
                    }
                }
                *d = acc;
            }
        }
    }
}

pub fn conv1d_cols(line: &[f32], nx: usize, kernel: &ConvKernel) -> Result<Vec<f32>> {
    if line.len() != nx * kernel.f_in {
        return Err(Error::ShapeMismatch(format!(
            "line of {} values is not {nx} columns x {} channels",
            line.len(),
            kernel.f_in
        )));
    }
    let mut out = vec![0.0; nx * kernel.f_out];
    kernel.apply(line, nx, &mut out);
    Ok(out)
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// GeLU, tanh approximation.
#[inline]
pub fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

pub fn gelu_in_place(u: &mut [f32]) {
    for v in u {
        *v = gelu(*v);
    }
}

/// Elementwise relative deviation used by the equivalence checks:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_dev(a: f32, b: f32, floor: f32) -> f32 {
    let d = (a - b).abs();
    d / a.abs().max(b.abs()).max(floor)
}

/// Features of one line: `nx x nz x f`, features fastest, then bands.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLine {
    pub nx: usize,
    pub nz: usize,
    pub f: usize,
    pub data: Vec<f32>,
}

impl FeatureLine {
    pub fn zeros(nx: usize, nz: usize, f: usize) -> Self {
        FeatureLine {
            nx,
            nz,
            f,
            data: vec![0.0; nx * nz * f],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, z: usize) -> &[f32] {
        let i = (x * self.nz + z) * self.f;
        &self.data[i..i + self.f]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, z: usize) -> &mut [f32] {
        let i = (x * self.nz + z) * self.f;
        &mut self.data[i..i + self.f]
    }

    /// The same features restricted to the given columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> FeatureLine {
        let stride = self.nz * self.f;
        let mut data = Vec::with_capacity(columns.len() * stride);
        for &x in columns {
            data.extend_from_slice(&self.data[x * stride..(x + 1) * stride]);
        }
        FeatureLine {
            nx: columns.len(),
            nz: self.nz,
            f: self.f,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}
