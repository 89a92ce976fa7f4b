//! Spectral predictor: an RWKV stack over the band axis of the
//! feature-domain spatial residual `delta_z = enc(current line, z) - spatial(z)`.
//!
//! The compressor has every delta of a line at once and evaluates each
//! column as a whole sequence; the decompressor only learns `delta_z` after
//! band `z` is decoded and advances one band at a time. Both run the same
//! per-step arithmetic, so their outputs are bit-identical.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::FeatureLine;
use crate::rwkv::{self, Scratch, CELL_FIELDS};
use crate::weights::{ChannelMixWeights, MixerWeights, RwkvBlock};

/// Closed-form band mixing over a `T x f` sequence.
pub fn band_mix_parallel(seq: &[f32], f: usize, w: &MixerWeights) -> Result<Vec<f32>> {
    rwkv::time_mix_parallel(seq, f, w)
}

pub fn channel_mix_parallel(seq: &[f32], f: usize, w: &ChannelMixWeights) -> Result<Vec<f32>> {
    rwkv::channel_mix_parallel(seq, f, w)
}

/// Spectral features for one column: output `z` is computed from
/// `delta_0..=delta_z` and is used to predict band `z + 1`.
pub fn spectral_predict(deltas: &[f32], f: usize, blocks: &[RwkvBlock]) -> Result<Vec<f32>> {
    if f == 0 || !deltas.len().is_multiple_of(f) {
        return Err(Error::ShapeMismatch(format!(
            "delta sequence of {} values is not a multiple of {f}",
            deltas.len()
        )));
    }
    let out = rwkv::stack_scan(deltas, f, blocks, &mut Scratch::new(f));
    rwkv::ensure_finite(&out, "spectral predictor")?;
    Ok(out)
}

/// Same stack evaluated with the closed-form (all-history) band mixing.
pub fn spectral_predict_parallel(deltas: &[f32], f: usize, blocks: &[RwkvBlock]) -> Result<Vec<f32>> {
    rwkv::stack_parallel(deltas, f, blocks)
}

/// Whole-line spectral prediction. `deltas` holds `nz'` bands per column;
/// every column is processed independently.
pub fn spectral_predict_line(deltas: &FeatureLine, blocks: &[RwkvBlock]) -> Result<FeatureLine> {
    let f = deltas.f;
    let col = deltas.nz * f;
    let mut out = deltas.clone();
    if col > 0 {
        out.data
            .par_chunks_mut(col)
            .for_each_init(|| Scratch::new(f), |s, column| {
                let h = rwkv::stack_scan(column, f, blocks, s);
                column.copy_from_slice(&h);
            });
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("spectral predictor"));
    }
    Ok(out)
}

/// Incremental spectral state for one line: per column, one cell per block.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub nx: usize,
    pub f: usize,
    pub layers: usize,
    /// Bands consumed so far.
    pub position: usize,
    data: Vec<f64>,
}

impl SpectralState {
    pub fn new(nx: usize, f: usize, layers: usize) -> Self {
        let mut data = vec![0.0; nx * layers * CELL_FIELDS * f];
        for cell in data.chunks_exact_mut(CELL_FIELDS * f) {
            rwkv::init_cell(cell);
        }
        SpectralState {
            nx,
            f,
            layers,
            position: 0,
            data,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    /// Consume `delta_z` for every column (`nx x f`) and return the spectral
    /// features used for band `z + 1`.
    pub fn step(&mut self, deltas: &[f32], blocks: &[RwkvBlock]) -> Result<Vec<f32>> {
        let f = self.f;
        if deltas.len() != self.nx * f || blocks.len() != self.layers {
            return Err(Error::ShapeMismatch(format!(
                "spectral step got {} values and {} blocks for {} columns x {f} features, {} layers",
                deltas.len(),
                blocks.len(),
                self.nx,
                self.layers
            )));
        }
        let mut h = deltas.to_vec();
        let cells = self.layers * CELL_FIELDS * f;
        self.data
            .par_chunks_mut(cells)
            .zip(h.par_chunks_mut(f))
            .for_each_init(|| Scratch::new(f), |s, (c, x)| rwkv::stack_step(c, x, blocks, s));
        self.position += 1;
        rwkv::ensure_finite(&h, "spectral predictor")?;
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::rel_dev;
    use crate::weights::WeightSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blocks(seed: u64) -> Vec<RwkvBlock> {
        WeightSet::random(&ModelConfig::xs(), &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .spectral
    }

    fn rand_seq(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn length_one_band_mix_returns_value_projection() {
        let f = 32;
        let b = blocks(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = rand_seq(&mut rng, f);
        let par = band_mix_parallel(&seq, f, &b[0].mix).unwrap();
        let rec = crate::rwkv::TimeMixState::new(f).step(&seq, &b[0].mix).unwrap();
        for (a, b) in par.iter().zip(&rec) {
            assert!(rel_dev(*a, *b, 1e-3) < 1e-6);
        }
    }

    #[test]
    fn band_mix_matches_recurrent() {
        let f = 32;
        let b = blocks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = rand_seq(&mut rng, 20 * f);
        let par = band_mix_parallel(&seq, f, &b[0].mix).unwrap();
        let mut st = crate::rwkv::TimeMixState::new(f);
        for t in 0..20 {
            let o = st.step(&seq[t * f..(t + 1) * f], &b[0].mix).unwrap();
            for i in 0..f {
                assert!(rel_dev(o[i], par[t * f + i], 1e-3) < 1e-4);
            }
        }
    }

    #[test]
    fn zero_deltas_give_zero_mixing() {
        let f = 32;
        let b = blocks(5);
        let zeros = vec![0.0; 7 * f];
        assert!(band_mix_parallel(&zeros, f, &b[0].mix).unwrap().iter().all(|&v| v == 0.0));
        assert!(channel_mix_parallel(&zeros, f, &b[0].cm).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mix_length_one_equals_single_step() {
        let f = 32;
        let b = blocks(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seq = rand_seq(&mut rng, f);
        let par = channel_mix_parallel(&seq, f, &b[0].cm).unwrap();
        let rec = crate::rwkv::ChannelMixState::new(f).step(&seq, &b[0].cm).unwrap();
        assert_eq!(par, rec);
    }

    #[test]
    fn channel_mix_length_sixteen_matches_recurrent() {
        let f = 32;
        let b = blocks(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq = rand_seq(&mut rng, 16 * f);
        let par = channel_mix_parallel(&seq, f, &b[1].cm).unwrap();
        let mut st = crate::rwkv::ChannelMixState::new(f);
        for t in 0..16 {
            let o = st.step(&seq[t * f..(t + 1) * f], &b[1].cm).unwrap();
            for i in 0..f {
                assert!(rel_dev(o[i], par[t * f + i], 1e-3) < 1e-4);
            }
        }
    }

    #[test]
    fn incremental_equals_whole_sequence() {
        let f = 32;
        let b = blocks(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nx = 3;
        let len = 12;
        let line = FeatureLine {
            nx,
            nz: len,
            f,
            data: rand_seq(&mut rng, nx * len * f),
        };
        let whole = spectral_predict_line(&line, &b).unwrap();
        let mut st = SpectralState::new(nx, f, b.len());
        for z in 0..len {
            let mut band = Vec::new();
            for x in 0..nx {
                band.extend_from_slice(line.at(x, z));
            }
            let out = st.step(&band, &b).unwrap();
            for x in 0..nx {
                let a = &out[x * f..(x + 1) * f];
                let w = whole.at(x, z);
                for i in 0..f {
                    assert!(rel_dev(a[i], w[i], 1e-3) < 1e-5);
                }
                // same arithmetic, so in fact bit-identical
                assert_eq!(a, w);
            }
        }
    }

    #[test]
    fn closed_form_stack_matches_scan() {
        let f = 32;
        let b = blocks(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let seq = rand_seq(&mut rng, 24 * f);
        let scan = spectral_predict(&seq, f, &b).unwrap();
        let par = spectral_predict_parallel(&seq, f, &b).unwrap();
        assert_eq!(scan.len(), seq.len());
        for (a, b) in scan.iter().zip(&par) {
            assert!(rel_dev(*a, *b, 1e-3) < 1e-4);
        }
    }

    #[test]
    fn future_bands_do_not_leak() {
        let f = 32;
        let b = blocks(14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let seq = rand_seq(&mut rng, 10 * f);
        let base = spectral_predict(&seq, f, &b).unwrap();
        for z in 0..9 {
            let mut changed = seq.clone();
            for v in &mut changed[(z + 1) * f..(z + 2) * f] {
                *v += rng.gen_range(-2.0..2.0);
            }
            let out = spectral_predict(&changed, f, &b).unwrap();
            assert_eq!(&out[..(z + 1) * f], &base[..(z + 1) * f]);
        }
    }

    #[test]
    fn columns_never_mix() {
        let f = 32;
        let b = blocks(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let line = FeatureLine {
            nx: 4,
            nz: 5,
            f,
            data: rand_seq(&mut rng, 4 * 5 * f),
        };
        let base = spectral_predict_line(&line, &b).unwrap();
        let mut changed = line.clone();
        for v in changed.at_mut(2, 0) {
            *v *= -3.0;
        }
        let out = spectral_predict_line(&changed, &b).unwrap();
        for x in [0, 1, 3] {
            for z in 0..5 {
                assert_eq!(out.at(x, z), base.at(x, z));
            }
        }
    }
}
