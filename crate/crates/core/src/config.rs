//! Architecture hyperparameters and the derived cost accounting.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Normalization divisor applied to raw DNs before they enter the network.
pub const DEFAULT_SCALE: f64 = 10_000.0;
/// Distance to a rounding boundary (in DN) below which a guard bit is sent.
pub const DEFAULT_GUARD_TAU: f64 = 1e-3;
pub const DEFAULT_ENC_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Encoder blocks (conv, LayerNorm, GeLU).
    pub n_enc: usize,
    /// Line-predictor (line mix, channel mix) pairs.
    pub n_lp: usize,
    /// Spectral-predictor (band mix, channel mix) pairs.
    pub n_sp: usize,
    /// Decoder blocks (projection, LayerNorm, GeLU) before the scalar head.
    pub n_dec: usize,
    /// Feature width.
    pub features: usize,
    pub scale: f64,
    pub guard_tau: f64,
    pub enc_kernel: usize,
}

/// The four reference configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSize {
    Xs,
    S,
    M,
    L,
}

impl ModelSize {
    pub const ALL: [ModelSize; 4] = [ModelSize::Xs, ModelSize::S, ModelSize::M, ModelSize::L];

    pub fn config(self) -> ModelConfig {
        let (n_enc, n_lp, n_sp, n_dec, features) = match self {
            ModelSize::Xs => (1, 2, 2, 1, 32),
            ModelSize::S => (2, 2, 2, 2, 64),
            ModelSize::M => (4, 4, 4, 4, 64),
            ModelSize::L => (4, 6, 6, 4, 96),
        };
        ModelConfig {
            n_enc,
            n_lp,
            n_sp,
            n_dec,
            features,
            scale: DEFAULT_SCALE,
            guard_tau: DEFAULT_GUARD_TAU,
            enc_kernel: DEFAULT_ENC_KERNEL,
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelSize::Xs => "XS",
            ModelSize::S => "S",
            ModelSize::M => "M",
            ModelSize::L => "L",
        })
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "XS" => Ok(ModelSize::Xs),
            "S" => Ok(ModelSize::S),
            "M" => Ok(ModelSize::M),
            "L" => Ok(ModelSize::L),
            other => Err(Error::InvalidArgument(format!("unknown model size {other:?}"))),
        }
    }
}

impl ModelConfig {
    pub fn xs() -> Self {
        ModelSize::Xs.config()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_enc", self.n_enc),
            ("n_lp", self.n_lp),
            ("n_sp", self.n_sp),
            ("n_dec", self.n_dec),
            ("features", self.features),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.guard_tau.is_finite() && self.guard_tau > 0.0 && self.guard_tau < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "guard_tau must lie in (0, 0.5), got {}",
                self.guard_tau
            )));
        }
        if self.enc_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "enc_kernel must be odd, got {}",
                self.enc_kernel
            )));
        }
        Ok(())
    }

    /// Little-endian encoding shared by the weight file and the config digest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40);
        for v in [
            self.n_enc,
            self.n_lp,
            self.n_sp,
            self.n_dec,
            self.features,
            self.enc_kernel,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.guard_tau.to_le_bytes());
        out
    }

    pub const ENCODED_LEN: usize = 6 * 4 + 2 * 8;

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < Self::ENCODED_LEN {
            return Err(Error::malformed("model config", "truncated"));
        }
        let u = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let cfg = ModelConfig {
            n_enc: u(0),
            n_lp: u(1),
            n_sp: u(2),
            n_dec: u(3),
            features: u(4),
            enc_kernel: u(5),
            scale: f(24),
            guard_tau: f(32),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> u64 {
        crate::checksum::crc64(&self.to_bytes())
    }

    /// Number of scalar weights in a [`crate::weights::WeightSet`] of this shape.
    pub fn count_params(&self) -> usize {
        crate::weights::tensor_specs(self)
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }

    /// Floating-point operations to predict one sample in steady state
    /// (a sample at `y > 0`, `z > 0`): encoder, line predictor, spectral
    /// predictor and decoder. A multiply-accumulate counts as 2; every other
    /// arithmetic op, comparison or transcendental counts as 1.
    pub fn count_flops_per_sample(&self) -> u64 {
        let f = self.features as u64;
        let k = self.enc_kernel as u64;
        let matvec = |rows: u64, cols: u64| 2 * rows * cols;
        // mean, centred square, sum, scale, affine
        let layernorm = 7 * f + 2;
        // cube, fma, tanh, add, two muls, plus the constant scale
        let gelu = 8 * f;
        let sigmoid = 3 * f;
        let token_shift = 3 * f;

        // p: add, max, 2 sub, 2 exp, 2 mul, 2 add, div; state: sub, max, 2 sub,
        // 2 exp, 3 mul, 2 add.
        let wkv = 22 * f;
        let time_mix = 3 * token_shift + 4 * matvec(f, f) + wkv + sigmoid + f;
        let channel_mix = 2 * token_shift + 3 * matvec(f, f) + 2 * f + sigmoid + f;
        let rwkv_pair = 2 * layernorm + time_mix + channel_mix + 2 * f;

        let mut encoder = 0;
        for b in 0..self.n_enc as u64 {
            let f_in = if b == 0 { 1 } else { f };
            encoder += matvec(f, f_in * k) + layernorm + gelu;
        }
        let delta = f;
        let decoder = f + self.n_dec as u64 * (matvec(f, f) + layernorm + gelu) + matvec(1, f) + 1;

        encoder
            + (self.n_lp + self.n_sp) as u64 * rwkv_pair
            + delta
            + decoder
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::xs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_sizes_match_reference_table() {
        let t = |s: ModelSize| {
            let c = s.config();
            (c.n_enc, c.n_lp, c.n_sp, c.n_dec, c.features)
        };
        assert_eq!(t(ModelSize::Xs), (1, 2, 2, 1, 32));
        assert_eq!(t(ModelSize::S), (2, 2, 2, 2, 64));
        assert_eq!(t(ModelSize::M), (4, 4, 4, 4, 64));
        assert_eq!(t(ModelSize::L), (4, 6, 6, 4, 96));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::xs();
        c.enc_kernel = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::xs();
        c.n_sp = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::xs();
        c.scale = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::xs();
        c.guard_tau = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_bytes_roundtrip() {
        let c = ModelSize::L.config();
        assert_eq!(ModelConfig::from_bytes(&c.to_bytes()).unwrap(), c);
        assert_eq!(c.to_bytes().len(), ModelConfig::ENCODED_LEN);
    }

    #[test]
    fn xs_params_near_thirty_thousand() {
        let n = ModelConfig::xs().count_params();
        assert!((25_500..=34_500).contains(&n), "XS params = {n}");
    }

    #[test]
    fn l_params_near_nine_hundred_thousand() {
        let n = ModelSize::L.config().count_params() as f64;
        assert!((n / 900_000.0 - 1.0).abs() <= 0.15, "L params = {n}");
    }

    #[test]
    fn all_reference_sizes_within_fifteen_percent() {
        for (size, reference) in [
            (ModelSize::Xs, 30_000.0),
            (ModelSize::S, 135_000.0),
            (ModelSize::M, 286_000.0),
            (ModelSize::L, 900_000.0),
        ] {
            let n = size.config().count_params() as f64;
            assert!((n / reference - 1.0).abs() <= 0.15, "{size}: {n} vs {reference}");
        }
    }

    #[test]
    fn unit_config_params_match_hand_count() {
        let c = ModelConfig {
            n_enc: 1,
            n_lp: 1,
            n_sp: 1,
            n_dec: 1,
            features: 1,
            scale: DEFAULT_SCALE,
            guard_tau: DEFAULT_GUARD_TAU,
            enc_kernel: 3,
        };
        // encoder: conv 1*1*3 + ln 2
        let encoder = 3 + 2;
        // pair: ln 2 + (4 matrices + alpha, beta, 3 mus) + ln 2 + (3 matrices + 2 mus)
        let pair = 2 + (4 + 5) + 2 + (3 + 2);
        // decoder: proj 1 + ln 2 + head 1 + bias 1
        let decoder = 1 + 2 + 1 + 1;
        assert_eq!(c.count_params(), encoder + 2 * pair + 2 * decoder);
    }

    #[test]
    fn flops_of_unit_model_by_hand() {
        let c = ModelConfig {
            n_enc: 1,
            n_lp: 1,
            n_sp: 1,
            n_dec: 1,
            features: 1,
            scale: DEFAULT_SCALE,
            guard_tau: DEFAULT_GUARD_TAU,
            enc_kernel: 3,
        };
        // layernorm 9, gelu 8, sigmoid 3, token shift 3, wkv 22
        let time_mix = 3 * 3 + 4 * 2 + 22 + 3 + 1;
        let channel_mix = 2 * 3 + 3 * 2 + 2 + 3 + 1;
        let pair = 2 * 9 + time_mix + channel_mix + 2;
        let encoder = 2 * 3 + 9 + 8;
        let decoder = 1 + (2 + 9 + 8) + 2 + 1;
        assert_eq!(c.count_flops_per_sample(), encoder + 2 * pair + 1 + decoder);
    }

    #[test]
    fn flops_grow_with_depth() {
        let c = ModelConfig::xs();
        let d = ModelConfig {
            n_enc: 2 * c.n_enc,
            n_lp: 2 * c.n_lp,
            n_sp: 2 * c.n_sp,
            n_dec: 2 * c.n_dec,
            ..c
        };
        assert!(d.count_flops_per_sample() > c.count_flops_per_sample());
    }
}
