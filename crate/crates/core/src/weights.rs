//! Trainable tensors and the `LRWK` weight file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "LRWK"                       magic
//! u32                          format version (1)
//! ModelConfig                  6 x u32 (n_enc, n_lp, n_sp, n_dec, features, enc_kernel),
//!                              2 x f64 (scale, guard_tau)
//! u32                          tensor count
//! per tensor:                  u16 name length, name (UTF-8), u8 rank,
//!                              rank x u32 dims, u64 byte offset into the data section
//! f32 data                     tensors back to back in directory order
//! u64                          CRC-64/XZ of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::checksum::crc64;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ConvKernel, LayerNormWeights, Matrix};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LRWK";
pub const WEIGHTS_VERSION: u32 = 1;

/// Weights of one time-mixing block (line mixing or band mixing).
#[derive(Debug, Clone, PartialEq)]
pub struct MixerWeights {
    pub w_r: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// Per-step decay, applied as `exp(-alpha)`.
    pub alpha: Vec<f32>,
    /// Bonus for the current token.
    pub beta: Vec<f32>,
    pub mu_r: Vec<f32>,
    pub mu_k: Vec<f32>,
    pub mu_v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixWeights {
    pub w_r: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub mu_r: Vec<f32>,
    pub mu_k: Vec<f32>,
}

/// A pre-norm residual pair: `u += mix(ln(u)); u += cm(ln(u))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RwkvBlock {
    pub ln_mix: LayerNormWeights,
    pub mix: MixerWeights,
    pub ln_cm: LayerNormWeights,
    pub cm: ChannelMixWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub conv: ConvKernel,
    pub ln: LayerNormWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub proj: Matrix,
    pub ln: LayerNormWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub blocks: Vec<DecoderBlock>,
    pub head: Vec<f32>,
    pub head_bias: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub encoder: Vec<EncoderBlock>,
    pub line: Vec<RwkvBlock>,
    pub spectral: Vec<RwkvBlock>,
    pub decoder: DecoderWeights,
    /// Spatial-only decoder used for band 0.
    pub first_band: DecoderWeights,
}

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn spec(name: String, shape: &[usize]) -> TensorSpec {
    TensorSpec {
        name,
        shape: shape.to_vec(),
    }
}

fn rwkv_specs(out: &mut Vec<TensorSpec>, prefix: &str, f: usize) {
    for n in ["ln_mix.gain", "ln_mix.bias"] {
        out.push(spec(format!("{prefix}.{n}"), &[f]));
    }
    for n in ["mix.w_r", "mix.w_k", "mix.w_v", "mix.w_o"] {
        out.push(spec(format!("{prefix}.{n}"), &[f, f]));
    }
    for n in ["mix.alpha", "mix.beta", "mix.mu_r", "mix.mu_k", "mix.mu_v"] {
        out.push(spec(format!("{prefix}.{n}"), &[f]));
    }
    for n in ["ln_cm.gain", "ln_cm.bias"] {
        out.push(spec(format!("{prefix}.{n}"), &[f]));
    }
    for n in ["cm.w_r", "cm.w_k", "cm.w_v"] {
        out.push(spec(format!("{prefix}.{n}"), &[f, f]));
    }
    for n in ["cm.mu_r", "cm.mu_k"] {
        out.push(spec(format!("{prefix}.{n}"), &[f]));
    }
}

fn decoder_specs(out: &mut Vec<TensorSpec>, prefix: &str, n_dec: usize, f: usize) {
    for b in 0..n_dec {
        out.push(spec(format!("{prefix}.{b}.proj"), &[f, f]));
        out.push(spec(format!("{prefix}.{b}.ln.gain"), &[f]));
        out.push(spec(format!("{prefix}.{b}.ln.bias"), &[f]));
    }
    out.push(spec(format!("{prefix}.head"), &[1, f]));
    out.push(spec(format!("{prefix}.head_bias"), &[1]));
}

/// Every tensor a weight set of this configuration holds, in file order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let f = config.features;
    let mut out = Vec::new();
    for b in 0..config.n_enc {
        let f_in = if b == 0 { 1 } else { f };
        out.push(spec(format!("enc.{b}.conv"), &[f_in, f, config.enc_kernel]));
        out.push(spec(format!("enc.{b}.ln.gain"), &[f]));
        out.push(spec(format!("enc.{b}.ln.bias"), &[f]));
    }
    for b in 0..config.n_lp {
        rwkv_specs(&mut out, &format!("lp.{b}"), f);
    }
    for b in 0..config.n_sp {
        rwkv_specs(&mut out, &format!("sp.{b}"), f);
    }
    decoder_specs(&mut out, "dec", config.n_dec, f);
    decoder_specs(&mut out, "dec0", config.n_dec, f);
    out
}

fn push_rwkv<'a>(out: &mut Vec<&'a [f32]>, b: &'a RwkvBlock) {
    out.extend([b.ln_mix.gain.as_slice(), &b.ln_mix.bias]);
    out.extend([
        b.mix.w_r.data.as_slice(),
        &b.mix.w_k.data,
        &b.mix.w_v.data,
        &b.mix.w_o.data,
    ]);
    out.extend([
        b.mix.alpha.as_slice(),
        &b.mix.beta,
        &b.mix.mu_r,
        &b.mix.mu_k,
        &b.mix.mu_v,
    ]);
    out.extend([b.ln_cm.gain.as_slice(), &b.ln_cm.bias]);
    out.extend([b.cm.w_r.data.as_slice(), &b.cm.w_k.data, &b.cm.w_v.data]);
    out.extend([b.cm.mu_r.as_slice(), &b.cm.mu_k]);
}

fn push_decoder<'a>(out: &mut Vec<&'a [f32]>, d: &'a DecoderWeights) {
    for b in &d.blocks {
        out.extend([b.proj.data.as_slice(), &b.ln.gain, &b.ln.bias]);
    }
    out.push(&d.head);
    out.push(std::slice::from_ref(&d.head_bias));
}

struct Cursor<I> {
    it: I,
}

impl<I: Iterator<Item = Vec<f32>>> Cursor<I> {
    fn vec(&mut self) -> Vec<f32> {
        self.it.next().expect("tensor list shorter than its specs")
    }
    fn mat(&mut self, f: usize) -> Matrix {
        Matrix {
            rows: f,
            cols: f,
            data: self.vec(),
        }
    }
    fn ln(&mut self) -> LayerNormWeights {
        LayerNormWeights {
            gain: self.vec(),
            bias: self.vec(),
        }
    }
    fn rwkv(&mut self, f: usize) -> RwkvBlock {
        let ln_mix = self.ln();
        let mix = MixerWeights {
            w_r: self.mat(f),
            w_k: self.mat(f),
            w_v: self.mat(f),
            w_o: self.mat(f),
            alpha: self.vec(),
            beta: self.vec(),
            mu_r: self.vec(),
            mu_k: self.vec(),
            mu_v: self.vec(),
        };
        let ln_cm = self.ln();
        let cm = ChannelMixWeights {
            w_r: self.mat(f),
            w_k: self.mat(f),
            w_v: self.mat(f),
            mu_r: self.vec(),
            mu_k: self.vec(),
        };
        RwkvBlock {
            ln_mix,
            mix,
            ln_cm,
            cm,
        }
    }
    fn decoder(&mut self, n_dec: usize, f: usize) -> DecoderWeights {
        let blocks = (0..n_dec)
            .map(|_| DecoderBlock {
                proj: self.mat(f),
                ln: self.ln(),
            })
            .collect();
        DecoderWeights {
            blocks,
            head: self.vec(),
            head_bias: self.vec()[0],
        }
    }
}

impl WeightSet {
    /// Flat tensor views in [`tensor_specs`] order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for b in &self.encoder {
            out.extend([b.conv.data.as_slice(), &b.ln.gain, &b.ln.bias]);
        }
        for b in &self.line {
            push_rwkv(&mut out, b);
        }
        for b in &self.spectral {
            push_rwkv(&mut out, b);
        }
        push_decoder(&mut out, &self.decoder);
        push_decoder(&mut out, &self.first_band);
        out
    }

    /// Rebuild from flat tensors in [`tensor_specs`] order, checking every shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(config);
        if specs.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "config implies {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            let n: usize = s.shape.iter().product();
            if n != t.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} has {} values, shape {:?} needs {n}",
                    s.name,
                    t.len(),
                    s.shape
                )));
            }
        }
        let f = config.features;
        let mut c = Cursor {
            it: tensors.into_iter(),
        };
        let mut encoder = Vec::new();
        for b in 0..config.n_enc {
            let f_in = if b == 0 { 1 } else { f };
            let conv = ConvKernel::new(f_in, f, config.enc_kernel, c.vec())?;
            encoder.push(EncoderBlock { conv, ln: c.ln() });
        }
        let line = (0..config.n_lp).map(|_| c.rwkv(f)).collect();
        let spectral = (0..config.n_sp).map(|_| c.rwkv(f)).collect();
        let decoder = c.decoder(config.n_dec, f);
        let first_band = c.decoder(config.n_dec, f);
        Ok(WeightSet {
            encoder,
            line,
            spectral,
            decoder,
            first_band,
        })
    }

    /// All-zero weights except unit LayerNorm gains and `mu = 0.5`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let tensors = tensor_specs(config)
            .iter()
            .map(|s| {
                let n = s.shape.iter().product();
                let fill = if s.name.ends_with(".gain") {
                    1.0
                } else if s.name.contains(".mu_") {
                    0.5
                } else {
                    0.0
                };
                vec![fill; n]
            })
            .collect();
        WeightSet::from_tensors(config, tensors)
    }

    /// Random initialization: uniform fan-in scaled matrices, decays in
    /// `[0.1, 2]`, bonuses in `[-1, 1]`, token-shift weights in `[0, 1]`,
    /// LayerNorm gains near 1.
    pub fn random(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let specs = tensor_specs(config);
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let name = s.name.as_str();
                let mut gen = |lo: f32, hi: f32| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f32>>();
                if name.ends_with(".gain") {
                    gen(0.8, 1.2)
                } else if name.ends_with(".bias") {
                    gen(-0.1, 0.1)
                } else if name.ends_with(".alpha") {
                    gen(0.1, 2.0)
                } else if name.ends_with(".beta") {
                    gen(-1.0, 1.0)
                } else if name.contains(".mu_") {
                    gen(0.0, 1.0)
                } else if name.ends_with("head_bias") {
                    gen(0.0, 0.5)
                } else {
                    // matrices and kernels: fan-in is the product of all but the output axis
                    let fan_in = match s.shape.as_slice() {
                        [f_in, _, k] => f_in * k,
                        [_, cols] => *cols,
                        _ => 1,
                    };
                    let a = 1.0 / (fan_in as f32).sqrt();
                    gen(-a, a)
                }
            })
            .collect();
        WeightSet::from_tensors(config, tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A weight set together with its configuration and file checksum.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: WeightSet,
    /// Trailing checksum of the serialized weight file.
    pub checksum: u64,
}

impl Model {
    pub fn new(config: ModelConfig, weights: WeightSet) -> Result<Self> {
        let bytes = encode_weights(&config, &weights)?;
        let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        Ok(Model {
            config,
            weights,
            checksum,
        })
    }

    pub fn random(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let weights = WeightSet::random(&config, rng)?;
        Model::new(config, weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (config, weights) = decode_weights(&bytes)?;
        let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        Ok(Model {
            config,
            weights,
            checksum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_weights(&self.config, &self.weights, path)
    }
}

pub fn encode_weights(config: &ModelConfig, weights: &WeightSet) -> Result<Vec<u8>> {
    config.validate()?;
    let specs = tensor_specs(config);
    let tensors = weights.tensors();
    if specs.len() != tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "config implies {} tensors, weight set has {}",
            specs.len(),
            tensors.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&config.to_bytes());
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (s, t) in specs.iter().zip(&tensors) {
        let n: usize = s.shape.iter().product();
        if n != t.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has {} values, shape {:?} needs {n}",
                s.name,
                t.len(),
                s.shape
            )));
        }
        out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.shape.len() as u8);
        for d in &s.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * n as u64;
    }
    for t in &tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = crc64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::malformed("weight file", "truncated directory"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ModelConfig, WeightSet)> {
    if bytes.len() < 4 + 4 + ModelConfig::ENCODED_LEN + 4 + 8 {
        return Err(Error::malformed("weight file", "too short"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHTS_MAGIC,
            found: magic,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = crc64(body);
    if stored != computed {
        return Err(Error::Checksum {
            what: "weight file",
            stored,
            computed,
        });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config = ModelConfig::from_bytes(r.take(ModelConfig::ENCODED_LEN)?)?;
    let count = r.u32()? as usize;
    let mut directory = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::malformed("weight file", "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        directory.push((TensorSpec { name, shape }, offset));
    }
    let data = &body[r.pos..];

    let expected = tensor_specs(&config);
    if expected.len() != directory.len() {
        return Err(Error::ShapeMismatch(format!(
            "config implies {} tensors, directory lists {}",
            expected.len(),
            directory.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (want, (have, offset)) in expected.iter().zip(&directory) {
        if want != have {
            return Err(Error::ShapeMismatch(format!(
                "directory entry {} {:?} does not match expected {} {:?}",
                have.name, have.shape, want.name, want.shape
            )));
        }
        let n: usize = have.shape.iter().product();
        let start = usize::try_from(*offset)
            .map_err(|_| Error::malformed("weight file", "offset overflow"))?;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::malformed("weight file", format!("tensor {} out of bounds", have.name)))?;
        let t: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(t);
    }
    let weights = WeightSet::from_tensors(&config, tensors)?;
    Ok((config, weights))
}

pub fn save_weights(config: &ModelConfig, weights: &WeightSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(config, weights)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightSet)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
