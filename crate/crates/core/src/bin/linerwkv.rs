use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use linerwkv::bench::{run_bench, BenchConfig};
use linerwkv::codec::{compress, decompress, with_threads, CodecOptions, StreamHeader};
use linerwkv::config::ModelSize;
use linerwkv::cube::{read_cube, write_cube, Dims, SampleOrder};
use linerwkv::error::Error;
use linerwkv::selftest::run_selftest;
use linerwkv::weights::Model;

/// Exit status for unreadable inputs (missing files, bad paths).
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "linerwkv", version, about = "Line-recursive neural hyperspectral image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Print progress details to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Args)]
struct DimArgs {
    #[arg(long)]
    nx: usize,
    #[arg(long)]
    ny: usize,
    #[arg(long)]
    nz: usize,
    /// Sample order of the raw file: bsq, bil or bip.
    #[arg(long, default_value = "bip")]
    order: SampleOrder,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a raw little-endian u16 cube.
    Compress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        dims: DimArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Maximum absolute error per sample (0 = lossless).
        #[arg(long, default_value_t = 0)]
        max_error: u32,
        /// Write a key=value stats report here ("-" for stdout).
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Decompress a stream back to a raw cube.
    Decompress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Output sample order (defaults to the order recorded in the stream).
        #[arg(long)]
        order: Option<SampleOrder>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Print a stream header.
    Info {
        #[arg(long)]
        input: PathBuf,
    },
    /// Report the largest absolute difference between two raw cubes.
    Compare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[command(flatten)]
        dims: DimArgs,
    },
    /// Measure throughput and state memory on synthetic cubes.
    Bench {
        #[arg(long, default_value_t = 16)]
        nx: usize,
        #[arg(long, default_value_t = 32)]
        ny: usize,
        #[arg(long, default_value_t = 8)]
        nz: usize,
        /// Weights to benchmark; random weights of --size otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "xs")]
        size: ModelSize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Run the built-in invariant suites.
    Selftest {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Write a randomly initialized weight file.
    InitWeights {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "xs")]
        size: ModelSize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_INPUT,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn load_model(path: &Path) -> Result<Arc<Model>, Failure> {
    if !path.is_file() {
        return Err(Failure {
            code: EXIT_INPUT,
            message: format!("weights file not found: {}", path.display()),
        });
    }
    Ok(Arc::new(Model::load(path)?))
}

fn write_report(dest: Option<&Path>, text: &str) -> Result<(), Failure> {
    match dest {
        None => Ok(()),
        Some(p) if p == Path::new("-") => {
            print!("{text}");
            Ok(())
        }
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e).into()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let verbose = cli.verbose;
    match cli.cmd {
        Cmd::Compress {
            input,
            output,
            dims,
            weights,
            max_error,
            stats,
            threads,
        } => {
            let model = load_model(&weights)?;
            let d = Dims::new(dims.nx, dims.ny, dims.nz);
            let cube = read_cube(&input, d, dims.order)?;
            let opts = CodecOptions { max_error, threads };
            let (bytes, st) = compress(model, &cube, opts)?;
            fs::write(&output, &bytes).map_err(|e| Error::io(&output, e))?;
            if verbose {
                eprintln!("{}: {} bytes, {:.4} bpppc ({})", output.display(), bytes.len(), st.bpppc(), st.mode());
            }
            write_report(stats.as_deref(), &st.report().to_string())
        }
        Cmd::Decompress {
            input,
            output,
            weights,
            order,
            threads,
        } => {
            let model = load_model(&weights)?;
            let bytes = fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let t = Instant::now();
            let cube = decompress(model, &bytes, threads)?;
            let order = order.unwrap_or(cube.order());
            write_cube(&cube, &output, order)?;
            if verbose {
                eprintln!("{}: {} ({order}) in {:.3}s", output.display(), cube.dims(), t.elapsed().as_secs_f64());
            }
            Ok(())
        }
        Cmd::Info { input } => {
            let bytes = fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let h = StreamHeader::from_bytes(&bytes)?;
            println!("version={}", h.version);
            println!("dims={}", h.dims);
            println!("order={}", h.order);
            println!("mode={}", h.mode());
            println!("config_digest={:#018x}", h.config_digest);
            println!("weights_checksum={:#018x}", h.weights_checksum);
            println!("guard_tau={}", h.guard_tau);
            println!("bytes={}", bytes.len());
            println!("bpppc={:.6}", bytes.len() as f64 * 8.0 / h.dims.samples() as f64);
            Ok(())
        }
        Cmd::Compare {
            input,
            reference,
            dims,
        } => {
            let d = Dims::new(dims.nx, dims.ny, dims.nz);
            let a = read_cube(&input, d, dims.order)?;
            let b = read_cube(&reference, d, dims.order)?;
            let mut max = 0u32;
            let mut differing = 0usize;
            for (x, y) in a.samples().iter().zip(b.samples()) {
                let e = (*x as i32 - *y as i32).unsigned_abs();
                max = max.max(e);
                differing += (e > 0) as usize;
            }
            println!("max_abs_error={max}");
            println!("differing_samples={differing}");
            Ok(())
        }
        Cmd::Bench {
            nx,
            ny,
            nz,
            weights,
            size,
            seed,
            repeats,
            stats,
            threads,
        } => {
            let model = match weights {
                Some(p) => load_model(&p)?,
                None => Arc::new(Model::random(size.config(), &mut ChaCha8Rng::seed_from_u64(seed))?),
            };
            let cfg = BenchConfig {
                dims: Dims::new(nx, ny, nz),
                seed,
                repeats,
                threads,
            };
            let report = run_bench(model, &cfg)?.report().to_string();
            match stats {
                Some(p) => write_report(Some(&p), &report),
                None => {
                    print!("{report}");
                    Ok(())
                }
            }
        }
        Cmd::Selftest { weights, seed, threads } => {
            let results = with_threads(threads, || run_selftest(weights.as_deref(), seed))?;
            let mut failed = 0;
            for r in &results {
                println!("{}", r.line());
                failed += !r.passed() as usize;
            }
            if failed > 0 {
                return Err(fail(format!("{failed} of {} suites failed", results.len())));
            }
            Ok(())
        }
        Cmd::InitWeights { output, size, seed } => {
            let model = Model::random(size.config(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            model.save(&output)?;
            if verbose {
                eprintln!("{}: {size} weights, {} parameters", output.display(), model.weights.param_count());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("linerwkv: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
