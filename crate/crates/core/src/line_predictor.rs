//! Along-track predictor: a stack of RWKV pairs run recurrently over lines,
//! independently for every `(x, z)` position.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::FeatureLine;
use crate::rwkv::{self, Scratch, CELL_FIELDS};
use crate::weights::RwkvBlock;

/// Recurrent state of the line predictor, `(layer, x, z, field)` order with
/// `CELL_FIELDS * f` floats per `(layer, x, z)`. Its size never depends on
/// the number of lines processed.
#[derive(Debug, Clone, PartialEq)]
pub struct LinePredState {
    pub nx: usize,
    pub nz: usize,
    pub f: usize,
    pub layers: usize,
    data: Vec<f64>,
}

impl LinePredState {
    pub fn new(nx: usize, nz: usize, f: usize, layers: usize) -> Self {
        let mut data = vec![0.0; layers * nx * nz * CELL_FIELDS * f];
        for cell in data.chunks_exact_mut(CELL_FIELDS * f) {
            rwkv::init_cell(cell);
        }
        LinePredState {
            nx,
            nz,
            f,
            layers,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    fn cells(&self) -> usize {
        self.nx * self.nz
    }

    /// Flat little-endian `f64` array in `(layer, x, z, field)` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(nx: usize, nz: usize, f: usize, layers: usize, bytes: &[u8]) -> Result<Self> {
        let n = layers * nx * nz * CELL_FIELDS * f;
        if bytes.len() != 8 * n {
            return Err(Error::SizeMismatch {
                expected: 8 * n as u64,
                actual: bytes.len() as u64,
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(LinePredState {
            nx,
            nz,
            f,
            layers,
            data,
        })
    }

    /// State restricted to a subset of columns.
    pub fn select_columns(&self, columns: &[usize]) -> LinePredState {
        let col = self.nz * CELL_FIELDS * self.f;
        let layer = self.nx * col;
        let mut data = Vec::with_capacity(self.layers * columns.len() * col);
        for l in 0..self.layers {
            for &x in columns {
                let start = l * layer + x * col;
                data.extend_from_slice(&self.data[start..start + col]);
            }
        }
        LinePredState {
            nx: columns.len(),
            nz: self.nz,
            f: self.f,
            layers: self.layers,
            data,
        }
    }
}

/// Feed one encoded line through the stack and return the feature-domain
/// prediction of the next line. Advances `state` by exactly one line.
pub fn line_predict_recurrent(
    state: &mut LinePredState,
    enc_line: &FeatureLine,
    blocks: &[RwkvBlock],
) -> Result<FeatureLine> {
    check_shapes(state, enc_line, blocks)?;
    let f = state.f;
    let layer_len = state.cells() * CELL_FIELDS * f;
    let mut h = enc_line.clone();
    for (layer, block) in state.data.chunks_exact_mut(layer_len).zip(blocks) {
        layer
            .par_chunks_mut(CELL_FIELDS * f)
            .zip(h.data.par_chunks_mut(f))
            .for_each_init(|| Scratch::new(f), |s, (cell, x)| rwkv::block_step(cell, x, block, s));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("line predictor"));
    }
    Ok(h)
}

/// Closed-form evaluation over a whole sequence of encoded lines, starting
/// from the zero state. Output `t` corresponds to the recurrent output after
/// feeding lines `0..=t`.
pub fn line_predict_parallel(enc_lines: &[FeatureLine], blocks: &[RwkvBlock]) -> Result<Vec<FeatureLine>> {
    let first = enc_lines
        .first()
        .ok_or_else(|| Error::InvalidArgument("line_predict_parallel needs at least one line".into()))?;
    let (nx, nz, f) = (first.nx, first.nz, first.f);
    if enc_lines.iter().any(|l| (l.nx, l.nz, l.f) != (nx, nz, f)) {
        return Err(Error::ShapeMismatch("encoded lines differ in shape".into()));
    }
    let t_len = enc_lines.len();
    let cells = nx * nz;
    let per_cell: Vec<Vec<f32>> = (0..cells)
        .into_par_iter()
        .map(|c| {
            let seq: Vec<f32> = enc_lines
                .iter()
                .flat_map(|l| l.data[c * f..(c + 1) * f].iter().copied())
                .collect();
            rwkv::stack_parallel(&seq, f, blocks)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![FeatureLine::zeros(nx, nz, f); t_len];
    for (c, seq) in per_cell.iter().enumerate() {
        for (t, line) in out.iter_mut().enumerate() {
            line.data[c * f..(c + 1) * f].copy_from_slice(&seq[t * f..(t + 1) * f]);
        }
    }
    Ok(out)
}

fn check_shapes(state: &LinePredState, enc: &FeatureLine, blocks: &[RwkvBlock]) -> Result<()> {
    if (enc.nx, enc.nz, enc.f) != (state.nx, state.nz, state.f) {
        return Err(Error::ShapeMismatch(format!(
            "encoded line {}x{}x{} does not match predictor state {}x{}x{}",
            enc.nx, enc.nz, enc.f, state.nx, state.nz, state.f
        )));
    }
    if blocks.len() != state.layers {
        return Err(Error::ShapeMismatch(format!(
            "{} blocks for a state with {} layers",
            blocks.len(),
            state.layers
        )));
    }
    Ok(())
}
