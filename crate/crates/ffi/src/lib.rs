//! C interface to the codec.
//!
//! All handles are opaque and owned by the caller until passed to the
//! matching `*_free` (or a consuming `*_finish`). Every fallible call
//! returns an [`LrwStatus`]; on failure a message is available from
//! [`lrw_last_error`] on the same thread. Samples are `uint16_t`; whole
//! cubes are `(y, x, z)` order with z fastest, single lines `(x, z)`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::sync::Arc;

use linerwkv::codec::{compress, decompress, CodecOptions, StreamDecoder, StreamEncoder, StreamHeader};
use linerwkv::cube::{Dims, HyperCube, LineSlab, SampleOrder};
use linerwkv::error::Error;
use linerwkv::weights::{decode_weights, Model};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checksum = 5,
    WeightsMismatch = 6,
    Numeric = 7,
    /// The decoder has produced every line.
    Finished = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LrwDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

/// Byte buffer allocated by the library; release with [`lrw_buffer_free`].
#[repr(C)]
#[derive(Debug)]
pub struct LrwBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// Loaded weights. May be shared by any number of encoders and decoders
/// and freed before them.
pub struct LrwModel(Arc<Model>);

pub struct LrwEncoder {
    inner: StreamEncoder,
    nx: usize,
    nz: usize,
}

pub struct LrwDecoder {
    // declared before `bytes` so it is dropped first
    inner: Option<StreamDecoder<'static>>,
    bytes: *mut [u8],
}

impl Drop for LrwDecoder {
    fn drop(&mut self) {
        self.inner = None;
        // SAFETY: `bytes` came from Box::into_raw in lrw_decoder_new and the
        // only borrow of it was just dropped.
        drop(unsafe { Box::from_raw(self.bytes) });
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(LrwStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => LrwStatus::Io,
            Error::Checksum { .. } => LrwStatus::Checksum,
            Error::WeightsMismatch(_) => LrwStatus::WeightsMismatch,
            Error::NonFinite(_) | Error::OutOfRange { .. } => LrwStatus::Numeric,
            Error::InvalidDimensions(_)
            | Error::InvalidConfig(_)
            | Error::ShapeMismatch(_)
            | Error::SizeMismatch { .. }
            | Error::InvalidArgument(_) => LrwStatus::InvalidArgument,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Malformed { .. }
            | Error::StreamExhausted => LrwStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LrwStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LrwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrwStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LrwStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn model_ref<'a>(m: *const LrwModel) -> Result<&'a LrwModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn dims(d: LrwDims) -> Dims {
    Dims::new(d.nx, d.ny, d.nz)
}

fn into_buffer(bytes: Vec<u8>) -> LrwBuffer {
    let mut b = bytes.into_boxed_slice();
    let len = b.len();
    let data = b.as_mut_ptr();
    std::mem::forget(b);
    LrwBuffer { data, len }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lrw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated name of a status code.
#[no_mangle]
pub extern "C" fn lrw_status_name(status: LrwStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        LrwStatus::Ok => b"ok\0",
        LrwStatus::NullPointer => b"null pointer\0",
        LrwStatus::InvalidArgument => b"invalid argument\0",
        LrwStatus::Io => b"i/o error\0",
        LrwStatus::Format => b"malformed data\0",
        LrwStatus::Checksum => b"checksum mismatch\0",
        LrwStatus::WeightsMismatch => b"weights mismatch\0",
        LrwStatus::Numeric => b"numeric error\0",
        LrwStatus::Finished => b"finished\0",
        LrwStatus::Panic => b"internal panic\0",
    };
    s.as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrw_model_load(path: *const c_char, out: *mut *mut LrwModel) -> LrwStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(LrwStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = Model::load(path)?;
        *out = Box::into_raw(Box::new(LrwModel(Arc::new(model))));
        Ok(())
    })
}

/// Load weights from an in-memory weight file image.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lrw_model_from_bytes(data: *const u8, len: usize, out: *mut *mut LrwModel) -> LrwStatus {
    guard(|| {
        let bytes = input(data, len, "data")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (config, weights) = decode_weights(bytes)?;
        let model = Model::new(config, weights)?;
        *out = Box::into_raw(Box::new(LrwModel(Arc::new(model))));
        Ok(())
    })
}

/// Checksum of the weight file, as recorded in streams.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lrw_model_checksum(model: *const LrwModel) -> u64 {
    model.as_ref().map_or(0, |m| m.0.checksum)
}

/// # Safety
/// `model` must come from `lrw_model_load`/`lrw_model_from_bytes` and not be
/// used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lrw_model_free(model: *mut LrwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `buf` must come from this library; it is reset to empty.
#[no_mangle]
pub unsafe extern "C" fn lrw_buffer_free(buf: *mut LrwBuffer) {
    let Some(b) = buf.as_mut() else { return };
    if !b.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    }
    b.data = ptr::null_mut();
    b.len = 0;
}

/// Compress a whole cube in one call. `threads = 0` uses every core.
///
/// # Safety
/// `samples` must hold `nx * ny * nz` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lrw_compress(
    model: *const LrwModel,
    samples: *const u16,
    dims_in: LrwDims,
    max_error: u32,
    threads: usize,
    out: *mut LrwBuffer,
) -> LrwStatus {
    guard(|| {
        let model = model_ref(model)?;
        let d = dims(dims_in);
        d.validate()?;
        let samples = input(samples, d.samples(), "samples")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cube = HyperCube::new(d, samples.to_vec())?;
        let (bytes, _) = compress(Arc::clone(&model.0), &cube, CodecOptions { max_error, threads })?;
        *out = into_buffer(bytes);
        Ok(())
    })
}

/// Dimensions recorded in a stream header.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lrw_stream_dims(data: *const u8, len: usize, out: *mut LrwDims) -> LrwStatus {
    guard(|| {
        let bytes = input(data, len, "data")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let h = StreamHeader::from_bytes(bytes)?;
        *out = LrwDims {
            nx: h.dims.nx,
            ny: h.dims.ny,
            nz: h.dims.nz,
        };
        Ok(())
    })
}

/// Decompress a whole stream into `samples`, which must hold exactly the
/// number of samples reported by [`lrw_stream_dims`].
///
/// # Safety
/// `data` must point to `len` readable bytes, `samples` to `samples_len`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn lrw_decompress(
    model: *const LrwModel,
    data: *const u8,
    len: usize,
    threads: usize,
    samples: *mut u16,
    samples_len: usize,
) -> LrwStatus {
    guard(|| {
        let model = model_ref(model)?;
        let bytes = input(data, len, "data")?;
        let h = StreamHeader::from_bytes(bytes)?;
        if samples_len != h.dims.samples() {
            return Err(Error::SizeMismatch {
                expected: h.dims.samples() as u64,
                actual: samples_len as u64,
            }
            .into());
        }
        if samples.is_null() {
            return Err(null("samples"));
        }
        let cube = decompress(Arc::clone(&model.0), bytes, threads)?;
        slice::from_raw_parts_mut(samples, samples_len).copy_from_slice(cube.samples());
        Ok(())
    })
}

/// Start a line-by-line encoder.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrw_encoder_new(
    model: *const LrwModel,
    dims_in: LrwDims,
    max_error: u32,
    out: *mut *mut LrwEncoder,
) -> LrwStatus {
    guard(|| {
        let model = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = dims(dims_in);
        let inner = StreamEncoder::new(Arc::clone(&model.0), d, SampleOrder::Bip, max_error)?;
        *out = Box::into_raw(Box::new(LrwEncoder {
            inner,
            nx: d.nx,
            nz: d.nz,
        }));
        Ok(())
    })
}

/// Encode the next line, `nx * nz` samples in `(x, z)` order.
///
/// # Safety
/// `enc` must be a live encoder and `line` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lrw_encoder_push_line(enc: *mut LrwEncoder, line: *const u16, len: usize) -> LrwStatus {
    guard(|| {
        let enc = enc.as_mut().ok_or_else(|| null("encoder"))?;
        let data = input(line, len, "line")?;
        let slab = LineSlab::new(enc.inner.lines_done(), enc.nx, enc.nz, data.to_vec())?;
        enc.inner.push_line(&slab)?;
        Ok(())
    })
}

/// Finish the stream and release the encoder, whatever the outcome.
///
/// # Safety
/// `enc` must be a live encoder; it is invalid after this call.
#[no_mangle]
pub unsafe extern "C" fn lrw_encoder_finish(enc: *mut LrwEncoder, out: *mut LrwBuffer) -> LrwStatus {
    guard(|| {
        if enc.is_null() {
            return Err(null("encoder"));
        }
        let enc = Box::from_raw(enc);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (bytes, _) = enc.inner.finish()?;
        *out = into_buffer(bytes);
        Ok(())
    })
}

/// # Safety
/// `enc` must be a live encoder or null.
#[no_mangle]
pub unsafe extern "C" fn lrw_encoder_free(enc: *mut LrwEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Start a line-by-line decoder. The stream bytes are copied.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lrw_decoder_new(
    model: *const LrwModel,
    data: *const u8,
    len: usize,
    out: *mut *mut LrwDecoder,
) -> LrwStatus {
    guard(|| {
        let model = model_ref(model)?;
        let bytes = input(data, len, "data")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let owned: *mut [u8] = Box::into_raw(bytes.to_vec().into_boxed_slice());
        let mut dec = Box::new(LrwDecoder { inner: None, bytes: owned });
        // SAFETY: the boxed bytes outlive `inner`, see Drop.
        let view: &'static [u8] = &*owned;
        dec.inner = Some(StreamDecoder::new(Arc::clone(&model.0), view)?);
        *out = Box::into_raw(dec);
        Ok(())
    })
}

/// # Safety
/// `dec` must be a live decoder and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrw_decoder_dims(dec: *const LrwDecoder, out: *mut LrwDims) -> LrwStatus {
    guard(|| {
        let dec = dec.as_ref().and_then(|d| d.inner.as_ref()).ok_or_else(|| null("decoder"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = dec.header().dims;
        *out = LrwDims {
            nx: d.nx,
            ny: d.ny,
            nz: d.nz,
        };
        Ok(())
    })
}

/// Reconstruct the next line into `line` (`nx * nz` values, `(x, z)` order).
/// Returns `FINISHED` once every line has been produced.
///
/// # Safety
/// `dec` must be a live decoder and `line` hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn lrw_decoder_next_line(dec: *mut LrwDecoder, line: *mut u16, len: usize) -> LrwStatus {
    let mut finished = false;
    let status = guard(|| {
        let dec = dec.as_mut().and_then(|d| d.inner.as_mut()).ok_or_else(|| null("decoder"))?;
        let d = dec.header().dims;
        if len != d.line_samples() {
            return Err(Error::SizeMismatch {
                expected: d.line_samples() as u64,
                actual: len as u64,
            }
            .into());
        }
        if line.is_null() {
            return Err(null("line"));
        }
        match dec.next_line()? {
            Some(slab) => slice::from_raw_parts_mut(line, len).copy_from_slice(&slab.data),
            None => finished = true,
        }
        Ok(())
    });
    if status == LrwStatus::Ok && finished {
        LrwStatus::Finished
    } else {
        status
    }
}

/// Verify that the stream was consumed exactly and its checksum matches,
/// then release the decoder.
///
/// # Safety
/// `dec` must be a live decoder; it is invalid after this call.
#[no_mangle]
pub unsafe extern "C" fn lrw_decoder_finish(dec: *mut LrwDecoder) -> LrwStatus {
    guard(|| {
        if dec.is_null() {
            return Err(null("decoder"));
        }
        let mut dec = Box::from_raw(dec);
        let inner = dec.inner.take().ok_or_else(|| null("decoder"))?;
        inner.finish()?;
        Ok(())
    })
}

/// # Safety
/// `dec` must be a live decoder or null.
#[no_mangle]
pub unsafe extern "C" fn lrw_decoder_free(dec: *mut LrwDecoder) {
    if !dec.is_null() {
        drop(Box::from_raw(dec));
    }
}
