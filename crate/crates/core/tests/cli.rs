use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use linerwkv::cube::{write_cube, Dims, HyperCube, SampleOrder};
use linerwkv::report::{get, parse_report};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_linerwkv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn linerwkv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn weights(&self, seed: u64) -> PathBuf {
        let p = self.path(&format!("w{seed}.lrwk"));
        let out = run(&["init-weights", "--output", s(&p), "--seed", &seed.to_string()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        p
    }

    fn cube(&self, dims: Dims) -> PathBuf {
        let cube = HyperCube::from_fn(dims, |y, x, z| (2000 + 37 * x + 11 * y + 300 * z + (x * y * z) % 17) as u16).unwrap();
        let p = self.path("cube.raw");
        write_cube(&cube, &p, SampleOrder::Bip).unwrap();
        p
    }
}

const DIMS: [&str; 6] = ["--nx", "16", "--ny", "16", "--nz", "8"];

fn compress(input: &Path, weights: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["compress", "--input", s(input), "--output", s(out), "--weights", s(weights)];
    args.extend_from_slice(&DIMS);
    args.extend_from_slice(extra);
    run(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn lossless_roundtrip_is_byte_identical() {
    let fx = Fixture::new();
    let w = fx.weights(1);
    let raw = fx.cube(Dims::new(16, 16, 8));
    let lrc = fx.path("c.lrc");
    let stats = fx.path("stats.txt");
    let o = compress(&raw, &w, &lrc, &["--stats", s(&stats)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let back = fx.path("back.raw");
    let o = run(&["decompress", "--input", s(&lrc), "--output", s(&back), "--weights", s(&w)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&raw).unwrap(), std::fs::read(&back).unwrap());

    let map = parse_report(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    let bpppc: f64 = get(&map, "bpppc").unwrap();
    let size = std::fs::metadata(&lrc).unwrap().len() as f64;
    assert!((bpppc - size * 8.0 / (16.0 * 16.0 * 8.0)).abs() < 1e-3, "{bpppc}");
}

#[test]
fn near_lossless_error_reported_by_compare() {
    let fx = Fixture::new();
    let w = fx.weights(2);
    let raw = fx.cube(Dims::new(16, 16, 8));
    let lrc = fx.path("c.lrc");
    let o = compress(&raw, &w, &lrc, &["--max-error", "3", "--stats", "-"]);
    assert!(o.status.success());
    let map = parse_report(&stdout(&o)).unwrap();
    assert_eq!(map["mode"], "near-lossless, m=3");
    let back = fx.path("back.raw");
    let o = run(&["decompress", "--input", s(&lrc), "--output", s(&back), "--weights", s(&w)]);
    assert!(o.status.success());

    let mut args = vec!["compare", "--input", s(&back), "--reference", s(&raw)];
    args.extend_from_slice(&DIMS);
    let o = run(&args);
    assert!(o.status.success());
    let map = parse_report(&stdout(&o)).unwrap();
    let max: u32 = get(&map, "max_abs_error").unwrap();
    assert!(max <= 3 && max > 0, "max_abs_error={max}");
}

#[test]
fn info_reads_the_header() {
    let fx = Fixture::new();
    let w = fx.weights(3);
    let raw = fx.cube(Dims::new(16, 16, 8));
    let lrc = fx.path("c.lrc");
    assert!(compress(&raw, &w, &lrc, &[]).status.success());
    let o = run(&["info", "--input", s(&lrc)]);
    assert!(o.status.success());
    let map = parse_report(&stdout(&o)).unwrap();
    assert_eq!(map["dims"], "16x16x8");
    assert_eq!(map["mode"], "lossless");
}

#[test]
fn missing_weights_exit_2_and_name_the_path() {
    let fx = Fixture::new();
    let raw = fx.cube(Dims::new(16, 16, 8));
    let missing = fx.path("nope.lrwk");
    let o = compress(&raw, &missing, &fx.path("c.lrc"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.lrwk"));
}

#[test]
fn missing_input_exits_2() {
    let fx = Fixture::new();
    let w = fx.weights(4);
    let o = compress(&fx.path("absent.raw"), &w, &fx.path("c.lrc"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn truncated_stream_fails() {
    let fx = Fixture::new();
    let w = fx.weights(5);
    let raw = fx.cube(Dims::new(16, 16, 8));
    let lrc = fx.path("c.lrc");
    assert!(compress(&raw, &w, &lrc, &[]).status.success());
    let bytes = std::fs::read(&lrc).unwrap();
    std::fs::write(&lrc, &bytes[..bytes.len() / 2]).unwrap();
    let o = run(&["decompress", "--input", s(&lrc), "--output", s(&fx.path("b.raw")), "--weights", s(&w)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn other_weights_are_refused() {
    let fx = Fixture::new();
    let w = fx.weights(6);
    let other = fx.weights(7);
    let raw = fx.cube(Dims::new(16, 16, 8));
    let lrc = fx.path("c.lrc");
    assert!(compress(&raw, &w, &lrc, &[]).status.success());
    let o = run(&["decompress", "--input", s(&lrc), "--output", s(&fx.path("b.raw")), "--weights", s(&other)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("weights"));
}

#[test]
fn wrong_input_size_is_rejected() {
    let fx = Fixture::new();
    let w = fx.weights(8);
    let raw = fx.cube(Dims::new(16, 15, 8));
    let o = compress(&raw, &w, &fx.path("c.lrc"), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_report_scaling() {
    let o = run(&["bench", "--nx", "8", "--ny", "64", "--nz", "4", "--repeats", "5", "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let map = parse_report(&stdout(&o)).unwrap();
    let ny_time: f64 = get(&map, "ny_time_ratio").unwrap();
    assert!((1.8..=2.2).contains(&ny_time), "ny_time_ratio={ny_time}");
    assert_eq!(get::<f64>(&map, "ny_memory_ratio").unwrap(), 1.0);
    let nx_mem: f64 = get(&map, "nx_memory_ratio").unwrap();
    assert!((1.9..=2.1).contains(&nx_mem), "nx_memory_ratio={nx_mem}");
    assert!(get::<f64>(&map, "run.base.samples_per_s").unwrap() > 0.0);
}

#[test]
fn selftest_passes_on_good_weights_and_fails_on_corrupt() {
    let fx = Fixture::new();
    let w = fx.weights(9);
    let o = run(&["selftest", "--weights", s(&w)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 5);

    let mut bytes = std::fs::read(&w).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&w, bytes).unwrap();
    let o = run(&["selftest", "--weights", s(&w)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL weights"));
}
