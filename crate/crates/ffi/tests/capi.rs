use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use linerwkv::config::ModelConfig;
use linerwkv::weights::{encode_weights, Model};
use linerwkv_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_bytes(seed: u64) -> Vec<u8> {
    let m = Model::random(ModelConfig::xs(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    encode_weights(&m.config, &m.weights).unwrap()
}

fn load(seed: u64) -> *mut LrwModel {
    let bytes = model_bytes(seed);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lrw_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut m) }, LrwStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = lrw_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cube(d: LrwDims) -> Vec<u16> {
    (0..d.nx * d.ny * d.nz).map(|i| (3000 + (i * 37) % 401) as u16).collect()
}

const DIMS: LrwDims = LrwDims { nx: 5, ny: 4, nz: 3 };

fn compressed(m: *const LrwModel, samples: &[u16], max_error: u32) -> Vec<u8> {
    let mut buf = LrwBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    let s = unsafe { lrw_compress(m, samples.as_ptr(), DIMS, max_error, 1, &mut buf) };
    assert_eq!(s, LrwStatus::Ok, "{}", last_error());
    let out = unsafe { std::slice::from_raw_parts(buf.data, buf.len) }.to_vec();
    unsafe { lrw_buffer_free(&mut buf) };
    assert!(buf.data.is_null() && buf.len == 0);
    out
}

#[test]
fn one_shot_roundtrip() {
    let m = load(1);
    let samples = cube(DIMS);
    let bytes = compressed(m, &samples, 0);

    let mut d = LrwDims { nx: 0, ny: 0, nz: 0 };
    assert_eq!(unsafe { lrw_stream_dims(bytes.as_ptr(), bytes.len(), &mut d) }, LrwStatus::Ok);
    assert_eq!(d, DIMS);
    let mut back = vec![0u16; samples.len()];
    let s = unsafe { lrw_decompress(m, bytes.as_ptr(), bytes.len(), 0, back.as_mut_ptr(), back.len()) };
    assert_eq!(s, LrwStatus::Ok);
    assert_eq!(back, samples);
    unsafe { lrw_model_free(m) };
}

#[test]
fn line_by_line_matches_one_shot() {
    let m = load(2);
    let samples = cube(DIMS);
    let line = DIMS.nx * DIMS.nz;

    let mut enc = ptr::null_mut();
    assert_eq!(unsafe { lrw_encoder_new(m, DIMS, 2, &mut enc) }, LrwStatus::Ok);
    for l in samples.chunks_exact(line) {
        assert_eq!(unsafe { lrw_encoder_push_line(enc, l.as_ptr(), l.len()) }, LrwStatus::Ok);
    }
    let mut buf = LrwBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(unsafe { lrw_encoder_finish(enc, &mut buf) }, LrwStatus::Ok);
    let streamed = unsafe { std::slice::from_raw_parts(buf.data, buf.len) }.to_vec();
    unsafe { lrw_buffer_free(&mut buf) };
    assert_eq!(streamed, compressed(m, &samples, 2));

    let mut dec = ptr::null_mut();
    assert_eq!(unsafe { lrw_decoder_new(m, streamed.as_ptr(), streamed.len(), &mut dec) }, LrwStatus::Ok);
    // the decoder keeps its own reference to the weights
    unsafe { lrw_model_free(m) };
    let mut d = LrwDims { nx: 0, ny: 0, nz: 0 };
    assert_eq!(unsafe { lrw_decoder_dims(dec, &mut d) }, LrwStatus::Ok);
    assert_eq!(d, DIMS);
    let mut back = vec![0u16; samples.len()];
    for y in 0..DIMS.ny {
        let s = unsafe { lrw_decoder_next_line(dec, back[y * line..].as_mut_ptr(), line) };
        assert_eq!(s, LrwStatus::Ok);
    }
    let mut spare = vec![0u16; line];
    assert_eq!(unsafe { lrw_decoder_next_line(dec, spare.as_mut_ptr(), line) }, LrwStatus::Finished);
    assert_eq!(unsafe { lrw_decoder_finish(dec) }, LrwStatus::Ok);
    assert!(back.iter().zip(&samples).all(|(a, b)| (*a as i32 - *b as i32).abs() <= 2));
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = load(3);
    let samples = cube(DIMS);
    let bytes = compressed(m, &samples, 0);
    let mut back = vec![0u16; samples.len()];

    let s = unsafe { lrw_decompress(m, bytes.as_ptr(), bytes.len() - 3, 0, back.as_mut_ptr(), back.len()) };
    assert_eq!(s, LrwStatus::Format);
    assert!(!last_error().is_empty());

    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 1] ^= 1;
    let s = unsafe { lrw_decompress(m, flipped.as_ptr(), n, 0, back.as_mut_ptr(), back.len()) };
    assert_eq!(s, LrwStatus::Checksum);

    let other = load(4);
    let s = unsafe { lrw_decompress(other, bytes.as_ptr(), bytes.len(), 0, back.as_mut_ptr(), back.len()) };
    assert_eq!(s, LrwStatus::WeightsMismatch);
    assert!(last_error().contains("weights"));

    let s = unsafe { lrw_decompress(m, bytes.as_ptr(), bytes.len(), 0, back.as_mut_ptr(), back.len() - 1) };
    assert_eq!(s, LrwStatus::InvalidArgument);

    let s = unsafe { lrw_decompress(ptr::null(), bytes.as_ptr(), bytes.len(), 0, back.as_mut_ptr(), back.len()) };
    assert_eq!(s, LrwStatus::NullPointer);

    let mut enc = ptr::null_mut();
    assert_eq!(unsafe { lrw_encoder_new(m, DIMS, 0, &mut enc) }, LrwStatus::Ok);
    let short = [0u16; 3];
    assert_eq!(unsafe { lrw_encoder_push_line(enc, short.as_ptr(), 3) }, LrwStatus::InvalidArgument);
    unsafe { lrw_encoder_free(enc) };

    let missing = CString::new("/nonexistent/w.lrwk").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lrw_model_load(missing.as_ptr(), &mut out) }, LrwStatus::Io);
    assert!(last_error().contains("/nonexistent/w.lrwk"));
    assert!(out.is_null());

    unsafe {
        lrw_model_free(m);
        lrw_model_free(other);
        lrw_model_free(ptr::null_mut());
        lrw_decoder_free(ptr::null_mut());
    }
}

#[test]
fn checksum_matches_core() {
    let m = load(5);
    let core = Model::random(ModelConfig::xs(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(unsafe { lrw_model_checksum(m) }, core.checksum);
    unsafe { lrw_model_free(m) };
}

#[test]
fn status_names_are_distinct() {
    let all = [
        LrwStatus::Ok,
        LrwStatus::NullPointer,
        LrwStatus::InvalidArgument,
        LrwStatus::Io,
        LrwStatus::Format,
        LrwStatus::Checksum,
        LrwStatus::WeightsMismatch,
        LrwStatus::Numeric,
        LrwStatus::Finished,
        LrwStatus::Panic,
    ];
    let names: std::collections::HashSet<String> = all
        .iter()
        .map(|s| unsafe { CStr::from_ptr(lrw_status_name(*s)) }.to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), all.len());
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(crate_dir().join("include/linerwkv.h")).unwrap();
    for name in [
        "lrw_model_load",
        "lrw_model_free",
        "lrw_compress",
        "lrw_decompress",
        "lrw_encoder_push_line",
        "lrw_decoder_next_line",
        "lrw_buffer_free",
        "lrw_last_error",
        "typedef struct LrwModel LrwModel;",
        "LRW_STATUS_WEIGHTS_MISMATCH = 6",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

fn static_lib() -> Option<PathBuf> {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("liblinerwkv_ffi.a");
    lib.is_file().then_some(lib)
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok()
}

#[test]
fn c_program_roundtrips_through_the_header() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built, skipping");
        return;
    };
    if !have("cc") {
        eprintln!("no C compiler, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("roundtrip");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/roundtrip.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let weights = dir.path().join("w.lrwk");
    std::fs::write(&weights, model_bytes(6)).unwrap();
    let run = Command::new(&exe).arg(Path::new(&weights)).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
