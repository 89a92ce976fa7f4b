//! Throughput and memory scaling measurements on synthetic cubes.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{compress, CodecOptions};
use crate::cube::{Dims, HyperCube};
use crate::error::{Error, Result};
use crate::report::Report;
use crate::weights::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub dims: Dims,
    pub seed: u64,
    /// Timed repetitions per run; the fastest is kept.
    pub repeats: usize,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: Dims::new(16, 32, 8),
            seed: 1,
            repeats: 3,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub label: String,
    pub dims: Dims,
    pub wall_time: Duration,
    pub bpppc: f64,
    pub state_bytes: usize,
}

impl BenchRun {
    pub fn samples_per_sec(&self) -> f64 {
        self.dims.samples() as f64 / self.wall_time.as_secs_f64().max(1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub runs: Vec<BenchRun>,
    pub ny_time_ratio: f64,
    pub ny_memory_ratio: f64,
    pub nx_memory_ratio: f64,
    pub nz_memory_ratio: f64,
    /// Largest relative deviation of state bytes from a least-squares line over nx.
    pub nx_fit_dev: f64,
    pub nz_fit_dev: f64,
}

/// Smooth synthetic scene with spectral structure and mild noise.
pub fn synthetic_cube(dims: Dims, seed: u64) -> Result<HyperCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    HyperCube::from_fn(dims, |y, x, z| {
        let spatial = 0.5 + 0.25 * ((x as f64 * 0.21 + phase).sin() + (y as f64 * 0.13).cos());
        let gain = 1.0 + 0.4 * (z as f64 * 0.3).sin();
        (3000.0 * spatial * gain + rng.gen_range(-15.0..15.0)).clamp(0.0, 65535.0) as u16
    })
}

/// Least-squares line through `(xs, ys)`; returns the largest `|y - fit| / fit`.
pub fn linear_fit_max_dev(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let fit = icpt + slope * x;
            (y - fit).abs() / fit.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

fn run_one(model: &Arc<Model>, label: &str, dims: Dims, cfg: &BenchConfig) -> Result<BenchRun> {
    let cube = synthetic_cube(dims, cfg.seed)?;
    let opts = CodecOptions {
        max_error: 0,
        threads: cfg.threads,
    };
    let mut best = Duration::MAX;
    let mut last = None;
    for _ in 0..cfg.repeats.max(1) {
        let t = Instant::now();
        let (_, stats) = compress(Arc::clone(model), &cube, opts)?;
        best = best.min(t.elapsed());
        last = Some(stats);
    }
    let stats = last.expect("at least one repetition");
    Ok(BenchRun {
        label: label.to_string(),
        dims,
        wall_time: best,
        bpppc: stats.bpppc(),
        state_bytes: stats.peak_state_bytes,
    })
}

pub fn run_bench(model: Arc<Model>, cfg: &BenchConfig) -> Result<BenchResult> {
    let d = cfg.dims;
    d.validate()?;
    if d.ny < 2 {
        return Err(Error::InvalidArgument("bench needs ny >= 2".into()));
    }
    // warm caches and the thread pool
    run_one(&model, "warmup", Dims::new(d.nx, 2, d.nz), cfg)?;

    let mut runs = vec![
        run_one(&model, "base", d, cfg)?,
        run_one(&model, "ny_x2", Dims::new(d.nx, 2 * d.ny, d.nz), cfg)?,
    ];
    let short = Dims::new(d.nx, 2, d.nz);
    let mut nx_series = Vec::new();
    let mut nz_series = Vec::new();
    for mult in 1..=4 {
        let r = run_one(&model, &format!("nx_x{mult}"), Dims::new(mult * d.nx, short.ny, d.nz), cfg)?;
        nx_series.push(((mult * d.nx) as f64, r.state_bytes as f64));
        runs.push(r);
        let r = run_one(&model, &format!("nz_x{mult}"), Dims::new(d.nx, short.ny, mult * d.nz), cfg)?;
        nz_series.push(((mult * d.nz) as f64, r.state_bytes as f64));
        runs.push(r);
    }
    let fit = |s: &[(f64, f64)]| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
        linear_fit_max_dev(&xs, &ys)
    };
    Ok(BenchResult {
        ny_time_ratio: runs[1].wall_time.as_secs_f64() / runs[0].wall_time.as_secs_f64().max(1e-9),
        ny_memory_ratio: runs[1].state_bytes as f64 / runs[0].state_bytes as f64,
        nx_memory_ratio: nx_series[1].1 / nx_series[0].1,
        nz_memory_ratio: nz_series[1].1 / nz_series[0].1,
        nx_fit_dev: fit(&nx_series),
        nz_fit_dev: fit(&nz_series),
        runs,
    })
}

impl BenchResult {
    pub fn report(&self) -> Report {
        let mut r = Report::new();
        for run in &self.runs {
            let p = format!("run.{}", run.label);
            r.push(format!("{p}.dims"), run.dims)
                .push(format!("{p}.wall_time_s"), format!("{:.6}", run.wall_time.as_secs_f64()))
                .push(format!("{p}.samples_per_s"), format!("{:.1}", run.samples_per_sec()))
                .push(format!("{p}.bpppc"), format!("{:.6}", run.bpppc))
                .push(format!("{p}.state_bytes"), run.state_bytes);
        }
        r.push("ny_time_ratio", format!("{:.4}", self.ny_time_ratio))
            .push("ny_memory_ratio", format!("{:.4}", self.ny_memory_ratio))
            .push("nx_memory_ratio", format!("{:.4}", self.nx_memory_ratio))
            .push("nz_memory_ratio", format!("{:.4}", self.nz_memory_ratio))
            .push("nx_memory_fit_max_dev", format!("{:.6}", self.nx_fit_dev))
            .push("nz_memory_fit_max_dev", format!("{:.6}", self.nz_fit_dev));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::report::{get, parse_report};

    #[test]
    fn linear_fit_of_exact_line_is_zero() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 17.0, 24.0, 31.0];
        assert!(linear_fit_max_dev(&xs, &ys) < 1e-12);
        assert!(linear_fit_max_dev(&xs, &[1.0, 4.0, 9.0, 16.0]) > 0.1);
    }

    #[test]
    fn small_bench_reports_scaling() {
        let model = Arc::new(Model::random(ModelConfig::xs(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        let cfg = BenchConfig {
            dims: Dims::new(4, 3, 3),
            seed: 2,
            repeats: 1,
            threads: 1,
        };
        let res = run_bench(model, &cfg).unwrap();
        let map = parse_report(&res.report().to_string()).unwrap();
        assert_eq!(get::<f64>(&map, "ny_memory_ratio").unwrap(), 1.0);
        let nx_ratio = get::<f64>(&map, "nx_memory_ratio").unwrap();
        assert!((1.9..=2.1).contains(&nx_ratio), "{nx_ratio}");
        assert!(get::<f64>(&map, "nx_memory_fit_max_dev").unwrap() < 0.1);
        assert!(get::<f64>(&map, "nz_memory_fit_max_dev").unwrap() < 0.1);
        assert!(get::<f64>(&map, "run.base.samples_per_s").unwrap() > 0.0);
    }
}
