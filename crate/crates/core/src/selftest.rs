//! Built-in invariant suites run by `linerwkv selftest`.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::synthetic_cube;
use crate::codec::{compress, decompress, CodecOptions};
use crate::config::ModelConfig;
use crate::cube::{Dims, HyperCube};
use crate::entropy::{BitReader, BitWriter, GolombContext};
use crate::line_predictor::{line_predict_parallel, line_predict_recurrent, LinePredState};
use crate::nn::{rel_dev, FeatureLine};
use crate::spectral::{spectral_predict, spectral_predict_parallel};
use crate::weights::{decode_weights, encode_weights, Model};

pub const EQUIVALENCE_TOL: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub outcome: Result<String, String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(detail) => format!("PASS {}: {detail}", self.name),
            Err(detail) => format!("FAIL {}: {detail}", self.name),
        }
    }
}

type Suite = std::result::Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn suite_weights(path: Option<&Path>, seed: u64) -> (Suite, Option<Arc<Model>>) {
    let model = match path {
        Some(p) => match Model::load(p) {
            Ok(m) => m,
            Err(e) => return (Err(format!("{}: {e}", p.display())), None),
        },
        None => match Model::random(ModelConfig::xs(), &mut ChaCha8Rng::seed_from_u64(seed)) {
            Ok(m) => m,
            Err(e) => return (Err(err(e)), None),
        },
    };
    let check = || -> Suite {
        let bytes = encode_weights(&model.config, &model.weights).map_err(err)?;
        let (cfg, w) = decode_weights(&bytes).map_err(err)?;
        if cfg != model.config || w != model.weights {
            return Err("re-encoded weights differ".into());
        }
        if !model.weights.all_finite() {
            return Err("non-finite weights".into());
        }
        Ok(format!("{} parameters, checksum {:#018x}", model.weights.param_count(), model.checksum))
    };
    let outcome = check();
    let ok = outcome.is_ok();
    (outcome, ok.then(|| Arc::new(model)))
}

/// Recurrent and closed-form predictors agree on random inputs.
pub fn suite_equivalence(model: &Model, seed: u64, draws: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = model.config.features;
    let mut worst = 0.0f32;
    for _ in 0..draws {
        let (nx, nz, len) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..=32));
        let lines: Vec<FeatureLine> = (0..len)
            .map(|_| FeatureLine {
                nx,
                nz,
                f,
                data: (0..nx * nz * f).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            })
            .collect();
        let par = line_predict_parallel(&lines, &model.weights.line).map_err(err)?;
        let mut state = LinePredState::new(nx, nz, f, model.config.n_lp);
        for (l, p) in lines.iter().zip(&par) {
            let r = line_predict_recurrent(&mut state, l, &model.weights.line).map_err(err)?;
            for (a, b) in r.data.iter().zip(&p.data) {
                worst = worst.max(rel_dev(*a, *b, 1e-3));
            }
        }
        let seq: Vec<f32> = (0..len * f).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let scan = spectral_predict(&seq, f, &model.weights.spectral).map_err(err)?;
        let par = spectral_predict_parallel(&seq, f, &model.weights.spectral).map_err(err)?;
        for (a, b) in scan.iter().zip(&par) {
            worst = worst.max(rel_dev(*a, *b, 1e-3));
        }
    }
    if worst < EQUIVALENCE_TOL {
        Ok(format!("{draws} draws, max relative deviation {worst:.2e}"))
    } else {
        Err(format!("max relative deviation {worst:.2e} exceeds {EQUIVALENCE_TOL:.0e}"))
    }
}

fn random_cube(rng: &mut ChaCha8Rng, dims: Dims) -> HyperCube {
    let hi = rng.gen_range(1..=u16::MAX);
    HyperCube::from_fn(dims, |_, _, _| rng.gen_range(0..=hi)).unwrap()
}

pub fn suite_roundtrip(model: &Arc<Model>, seed: u64, cubes: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = 0u64;
    let mut samples = 0usize;
    for i in 0..cubes {
        let dims = Dims::new(rng.gen_range(1..=12), rng.gen_range(2..=8), rng.gen_range(2..=8));
        let cube = if i % 2 == 0 {
            random_cube(&mut rng, dims)
        } else {
            synthetic_cube(dims, rng.gen()).map_err(err)?
        };
        let (bytes, stats) = compress(Arc::clone(model), &cube, CodecOptions::default()).map_err(err)?;
        let back = decompress(Arc::clone(model), &bytes, 0).map_err(err)?;
        if back != cube {
            return Err(format!("cube {i} ({dims}) did not roundtrip"));
        }
        bits += stats.total_bits;
        samples += dims.samples();
    }
    Ok(format!("{cubes} cubes, {:.3} bpppc overall", bits as f64 / samples as f64))
}

pub fn suite_bounds(model: &Arc<Model>, seed: u64) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in [1u32, 3, 7] {
        let ramp = HyperCube::from_fn(Dims::new(8, 3, 4), |y, x, z| (1000 + (y * 8 + x) * 4 + z) as u16).unwrap();
        let noisy = random_cube(&mut rng, Dims::new(6, 4, 3));
        for (name, cube) in [("ramp", ramp), ("random", noisy)] {
            let opts = CodecOptions { max_error: m, threads: 0 };
            let (bytes, _) = compress(Arc::clone(model), &cube, opts).map_err(err)?;
            let back = decompress(Arc::clone(model), &bytes, 0).map_err(err)?;
            let worst = cube
                .samples()
                .iter()
                .zip(back.samples())
                .map(|(a, b)| (*a as i32 - *b as i32).unsigned_abs())
                .max()
                .unwrap_or(0);
            if worst > m || (name == "ramp" && worst != m) {
                return Err(format!("m={m} {name}: max error {worst}"));
            }
        }
    }
    Ok("m in {1,3,7} within bound".into())
}

pub fn suite_entropy(seed: u64, values: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<u32> = (0..values).map(|i| rng.gen_range(0..(1u32 << (i % 18 + 1)))).collect();
    let mut enc = GolombContext::new();
    let mut w = BitWriter::new();
    for &v in &data {
        enc.encode(&mut w, v).map_err(err)?;
    }
    let bytes = w.finish();
    let mut r = BitReader::new(&bytes);
    let mut dec = GolombContext::new();
    for (i, &v) in data.iter().enumerate() {
        let got = dec.decode(&mut r).map_err(err)?;
        if got != v {
            return Err(format!("value {i}: {got} != {v}"));
        }
    }
    if dec != enc {
        return Err("final contexts differ".into());
    }
    Ok(format!("{values} values"))
}

/// Run every suite. With a weights path the weights suite validates that
/// file and the other suites use it; otherwise random XS weights are drawn
/// from `seed`.
pub fn run_selftest(weights: Option<&Path>, seed: u64) -> Vec<SuiteResult> {
    let (outcome, model) = suite_weights(weights, seed);
    let mut out = vec![SuiteResult { name: "weights", outcome }];
    let skipped = || Err("skipped: no usable weights".to_string());
    let run = |name, f: &dyn Fn(&Arc<Model>) -> Suite| SuiteResult {
        name,
        outcome: model.as_ref().map_or_else(skipped, f),
    };
    out.push(run("equivalence", &|m| suite_equivalence(m, seed, 20)));
    out.push(run("roundtrip", &|m| suite_roundtrip(m, seed, 6)));
    out.push(run("bounds", &|m| suite_bounds(m, seed)));
    out.push(SuiteResult {
        name: "entropy",
        outcome: suite_entropy(seed, 100_000),
    });
    out
}
