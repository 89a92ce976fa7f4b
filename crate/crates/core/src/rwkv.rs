//! RWKV time mixing and channel mixing, in recurrent and parallel form.
//!
//! The same blocks run along lines (line predictor) and along bands
//! (spectral predictor). The recurrent form keeps, per feature, the
//! numerator `a`, denominator `b` and a running exponent offset `m` such
//! that the true accumulators are `a * exp(m)` and `b * exp(m)`; no
//! exponential is ever taken of a positive argument. The parallel form
//! evaluates the weighted sums over the whole history directly.
//!
//! Per-cell recurrent state is `5 * f` doubles laid out as
//! `[a | b | m | previous time-mix input | previous channel-mix input]`.
//! Activations are `f32`; only the state is kept in double precision.

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::weights::{ChannelMixWeights, MixerWeights, RwkvBlock};

/// Fields per feature in one cell of recurrent state.
pub const CELL_FIELDS: usize = 5;

/// Initial value of a cell: `a = b = 0`, `m = -inf`, previous inputs zero.
pub fn init_cell(cell: &mut [f64]) {
    let f = cell.len() / CELL_FIELDS;
    cell.fill(0.0);
    cell[2 * f..3 * f].fill(f64::NEG_INFINITY);
}

/// Working buffers for one cell update, reused across calls.
#[derive(Debug, Clone)]
pub struct Scratch {
    xr: Vec<f32>,
    xk: Vec<f32>,
    xv: Vec<f32>,
    r: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    g: Vec<f32>,
    prev: Vec<f32>,
    normed: Vec<f32>,
    out: Vec<f32>,
}

impl Scratch {
    pub fn new(f: usize) -> Self {
        let z = vec![0.0; f];
        Scratch {
            xr: z.clone(),
            xk: z.clone(),
            xv: z.clone(),
            r: z.clone(),
            k: z.clone(),
            v: z.clone(),
            g: z.clone(),
            prev: z.clone(),
            normed: z.clone(),
            out: z,
        }
    }
}

#[inline]
fn token_shift(mu: &[f32], cur: &[f32], prev: &[f32], out: &mut [f32]) {
    for (((o, m), c), p) in out.iter_mut().zip(mu).zip(cur).zip(prev) {
        *o = m * c + (1.0 - m) * p;
    }
}

/// One recurrent time-mixing step. `state` is `[a | b | m | prev]` (`4 * f`).
pub fn time_mix_step(state: &mut [f64], u: &[f32], w: &MixerWeights, out: &mut [f32], s: &mut Scratch) {
    let f = u.len();
    let (a, rest) = state.split_at_mut(f);
    let (b, rest) = rest.split_at_mut(f);
    let (m, prev) = rest.split_at_mut(f);
    let prev = &mut prev[..f];
    load(prev, &mut s.prev);

    token_shift(&w.mu_r, u, &s.prev, &mut s.xr);
    token_shift(&w.mu_k, u, &s.prev, &mut s.xk);
    token_shift(&w.mu_v, u, &s.prev, &mut s.xv);
    w.w_r.apply(&s.xr, &mut s.r);
    w.w_k.apply(&s.xk, &mut s.k);
    w.w_v.apply(&s.xv, &mut s.v);

    for i in 0..f {
        let (k, v) = (s.k[i] as f64, s.v[i] as f64);
        let (ai, bi, mi) = (a[i], b[i], m[i]);
        // output: (a + e^{beta+k} v) / (b + e^{beta+k})
        let ww = w.beta[i] as f64 + k;
        let q = mi.max(ww);
        let e1 = (mi - q).exp();
        let e2 = (ww - q).exp();
        let p = (e1 * ai + e2 * v) / (e1 * bi + e2);
        // state: a <- e^{-alpha} a + e^k v, b <- e^{-alpha} b + e^k
        let ww = mi - w.alpha[i] as f64;
        let q = ww.max(k);
        let e1 = (ww - q).exp();
        let e2 = (k - q).exp();
        a[i] = e1 * ai + e2 * v;
        b[i] = e1 * bi + e2;
        m[i] = q;
        s.g[i] = sigmoid(s.r[i]) * p as f32;
    }
    w.w_o.apply(&s.g, out);
    store(u, prev);
}

#[inline]
fn load(src: &[f64], dst: &mut [f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s as f32);
}

#[inline]
fn store(src: &[f32], dst: &mut [f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s as f64);
}

/// One recurrent channel-mixing step; `prev` is the previous input.
pub fn channel_mix_step(prev: &mut [f32], u: &[f32], w: &ChannelMixWeights, out: &mut [f32], s: &mut Scratch) {
    let f = u.len();
    token_shift(&w.mu_r, u, prev, &mut s.xr);
    token_shift(&w.mu_k, u, prev, &mut s.xk);
    w.w_r.apply(&s.xr, &mut s.r);
    w.w_k.apply(&s.xk, &mut s.k);
    for i in 0..f {
        let k = s.k[i].max(0.0);
        s.v[i] = k * k;
    }
    w.w_v.apply(&s.v, out);
    for i in 0..f {
        out[i] *= sigmoid(s.r[i]);
    }
    prev.copy_from_slice(u);
}

/// One pre-norm residual pair on the residual stream `h`, advancing `cell` by one step.
pub fn block_step(cell: &mut [f64], h: &mut [f32], block: &RwkvBlock, s: &mut Scratch) {
    let f = h.len();
    let (mix_state, cm_prev) = cell.split_at_mut(4 * f);

    let mut normed = std::mem::take(&mut s.normed);
    let mut out = std::mem::take(&mut s.out);

    block.ln_mix.apply(h, &mut normed);
    time_mix_step(mix_state, &normed, &block.mix, &mut out, s);
    for (x, o) in h.iter_mut().zip(&out) {
        *x += o;
    }
    block.ln_cm.apply(h, &mut normed);
    let mut prev = std::mem::take(&mut s.prev);
    load(cm_prev, &mut prev);
    channel_mix_step(&mut prev, &normed, &block.cm, &mut out, s);
    store(&prev, cm_prev);
    s.prev = prev;
    for (x, o) in h.iter_mut().zip(&out) {
        *x += o;
    }

    s.normed = normed;
    s.out = out;
}

/// Advance a stack of blocks by one step. `cells` holds one `5 * f` cell per
/// block, in block order.
pub fn stack_step(cells: &mut [f64], h: &mut [f32], blocks: &[RwkvBlock], s: &mut Scratch) {
    let cell_len = CELL_FIELDS * h.len();
    for (cell, block) in cells.chunks_exact_mut(cell_len).zip(blocks) {
        block_step(cell, h, block, s);
    }
}

/// Recurrent time-mixing state for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMixState {
    pub cell: Vec<f64>,
}

impl TimeMixState {
    pub fn new(f: usize) -> Self {
        let mut cell = vec![0.0; 4 * f];
        cell[2 * f..3 * f].fill(f64::NEG_INFINITY);
        TimeMixState { cell }
    }

    /// Numerator and denominator accumulators with the offset folded back in.
    pub fn accumulators(&self) -> (Vec<f64>, Vec<f64>) {
        let f = self.cell.len() / 4;
        let m = &self.cell[2 * f..3 * f];
        let a = (0..f)
            .map(|i| self.cell[i] * m[i].exp())
            .collect();
        let b = (0..f)
            .map(|i| self.cell[f + i] * m[i].exp())
            .collect();
        (a, b)
    }

    pub fn step(&mut self, u: &[f32], w: &MixerWeights) -> Result<Vec<f32>> {
        check_width(u.len(), w.alpha.len())?;
        let mut out = vec![0.0; u.len()];
        time_mix_step(&mut self.cell, u, w, &mut out, &mut Scratch::new(u.len()));
        ensure_finite(&out, "time mixing")?;
        Ok(out)
    }
}

/// Recurrent channel-mixing state (the previous input).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixState {
    pub prev: Vec<f32>,
}

impl ChannelMixState {
    pub fn new(f: usize) -> Self {
        ChannelMixState { prev: vec![0.0; f] }
    }

    pub fn step(&mut self, u: &[f32], w: &ChannelMixWeights) -> Result<Vec<f32>> {
        check_width(u.len(), w.mu_r.len())?;
        let mut out = vec![0.0; u.len()];
        channel_mix_step(&mut self.prev, u, w, &mut out, &mut Scratch::new(u.len()));
        ensure_finite(&out, "channel mixing")?;
        Ok(out)
    }
}

fn check_width(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!(
            "feature vector of length {got} for blocks of width {want}"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite(v: &[f32], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn shifted(seq: &[f32], f: usize, mu: &[f32]) -> Vec<f32> {
    let zero = vec![0.0; f];
    let mut out = vec![0.0; seq.len()];
    for (t, o) in out.chunks_exact_mut(f).enumerate() {
        let cur = &seq[t * f..(t + 1) * f];
        let prev = if t == 0 { &zero[..] } else { &seq[(t - 1) * f..t * f] };
        token_shift(mu, cur, prev, o);
    }
    out
}

fn project(seq: &[f32], f: usize, w: &crate::nn::Matrix) -> Vec<f32> {
    let mut out = vec![0.0; seq.len()];
    for (x, o) in seq.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
        w.apply(x, o);
    }
    out
}

/// Whole-sequence time mixing in closed form. `seq` is `T x f`, row-major.
///
/// Output `t` is `W_o (sigmoid(r_t) * p_t)` with
/// `p_t = (sum_{j<t} e^{-(t-1-j) alpha + k_j} v_j + e^{beta + k_t} v_t)
///      / (sum_{j<t} e^{-(t-1-j) alpha + k_j} + e^{beta + k_t})`,
/// each sum shifted by its largest exponent.
pub fn time_mix_parallel(seq: &[f32], f: usize, w: &MixerWeights) -> Result<Vec<f32>> {
    check_width(f, w.alpha.len())?;
    if f == 0 || !seq.len().is_multiple_of(f) {
        return Err(Error::ShapeMismatch(format!("sequence of {} values is not a multiple of {f}", seq.len())));
    }
    let t_len = seq.len() / f;
    let r = project(&shifted(seq, f, &w.mu_r), f, &w.w_r);
    let k = project(&shifted(seq, f, &w.mu_k), f, &w.w_k);
    let v = project(&shifted(seq, f, &w.mu_v), f, &w.w_v);

    let mut out = vec![0.0; seq.len()];
    let mut g = vec![0.0; f];
    let mut expo = vec![0.0f64; t_len];
    for t in 0..t_len {
        for i in 0..f {
            let cur = w.beta[i] as f64 + k[t * f + i] as f64;
            let mut top = cur;
            for j in 0..t {
                let dist = (t - 1 - j) as f64;
                let decay = if dist == 0.0 { 0.0 } else { dist * w.alpha[i] as f64 };
                expo[j] = k[j * f + i] as f64 - decay;
                top = top.max(expo[j]);
            }
            let e_cur = (cur - top).exp();
            let mut num = e_cur * v[t * f + i] as f64;
            let mut den = e_cur;
            for j in 0..t {
                let e = (expo[j] - top).exp();
                num += e * v[j * f + i] as f64;
                den += e;
            }
            g[i] = sigmoid(r[t * f + i]) * (num / den) as f32;
        }
        w.w_o.apply(&g, &mut out[t * f..(t + 1) * f]);
    }
    ensure_finite(&out, "parallel time mixing")?;
    Ok(out)
}

/// Whole-sequence channel mixing (token shift with a zero first predecessor).
pub fn channel_mix_parallel(seq: &[f32], f: usize, w: &ChannelMixWeights) -> Result<Vec<f32>> {
    check_width(f, w.mu_r.len())?;
    if f == 0 || !seq.len().is_multiple_of(f) {
        return Err(Error::ShapeMismatch(format!("sequence of {} values is not a multiple of {f}", seq.len())));
    }
    let r = project(&shifted(seq, f, &w.mu_r), f, &w.w_r);
    let k = project(&shifted(seq, f, &w.mu_k), f, &w.w_k);
    let sq: Vec<f32> = k.iter().map(|&x| x.max(0.0) * x.max(0.0)).collect();
    let mut out = project(&sq, f, &w.w_v);
    for (o, r) in out.iter_mut().zip(&r) {
        *o *= sigmoid(*r);
    }
    ensure_finite(&out, "parallel channel mixing")?;
    Ok(out)
}

/// Whole-sequence evaluation of a block stack using the closed-form time mixing.
pub fn stack_parallel(seq: &[f32], f: usize, blocks: &[RwkvBlock]) -> Result<Vec<f32>> {
    let mut h = seq.to_vec();
    let mut normed = vec![0.0; seq.len()];
    for block in blocks {
        for (x, o) in h.chunks_exact(f).zip(normed.chunks_exact_mut(f)) {
            block.ln_mix.apply(x, o);
        }
        let mixed = time_mix_parallel(&normed, f, &block.mix)?;
        h.iter_mut().zip(&mixed).for_each(|(x, o)| *x += o);
        for (x, o) in h.chunks_exact(f).zip(normed.chunks_exact_mut(f)) {
            block.ln_cm.apply(x, o);
        }
        let mixed = channel_mix_parallel(&normed, f, &block.cm)?;
        h.iter_mut().zip(&mixed).for_each(|(x, o)| *x += o);
    }
    Ok(h)
}

/// Whole-sequence evaluation of a block stack by scanning the recurrence
/// block by block. Bit-identical to feeding the sequence one step at a time
/// through [`stack_step`].
pub fn stack_scan(seq: &[f32], f: usize, blocks: &[RwkvBlock], s: &mut Scratch) -> Vec<f32> {
    let mut h = seq.to_vec();
    let mut cell = vec![0.0f64; CELL_FIELDS * f];
    for block in blocks {
        init_cell(&mut cell);
        for x in h.chunks_exact_mut(f) {
            block_step(&mut cell, x, block, s);
        }
    }
    h
}
