//! The "LRC1" bitstream: header, Golomb-coded residuals and guard bits, and
//! a trailing cube checksum.
//!
//! ```text
//! magic "LRC1" | version u16 | nx u32 | ny u32 | nz u32 | order u8 | m u32
//! | config digest u64 | weights checksum u64 | guard_tau f64       (little-endian)
//! body: line 0 DPCM residuals, then for each later line, band by band,
//!       column by column: [guard bit] codeword                    (MSB-first bits)
//! zero padding to a byte | cube checksum u64
//! ```
//!
//! Residuals of band `z` use their own adaptive context for the whole cube;
//! line 0 uses a separate one. The checksum covers the coded samples (after
//! prequantization) in `(y, x, z)` order.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::checksum::SampleChecksum;
use crate::cube::{Dims, HyperCube, LineSlab, SampleOrder};
use crate::entropy::{unzigzag, zigzag, BitReader, BitWriter, GolombContext};
use crate::error::{Error, Result};
use crate::pipeline::{prequantize_sample, LineResiduals, Pipeline, PipelineState, ResidualSource};
use crate::report::Report;
use crate::weights::Model;

pub const STREAM_MAGIC: [u8; 4] = *b"LRC1";
pub const STREAM_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 3 * 4 + 1 + 4 + 8 + 8 + 8;
pub const TRAILER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamHeader {
    pub version: u16,
    pub dims: Dims,
    pub order: SampleOrder,
    /// Prequantization bound; 0 for lossless.
    pub max_error: u32,
    pub config_digest: u64,
    pub weights_checksum: u64,
    pub guard_tau: f64,
}

impl StreamHeader {
    pub fn new(model: &Model, dims: Dims, order: SampleOrder, max_error: u32) -> Self {
        StreamHeader {
            version: STREAM_VERSION,
            dims,
            order,
            max_error,
            config_digest: model.config.digest(),
            weights_checksum: model.checksum,
            guard_tau: model.config.guard_tau,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN);
        b.extend_from_slice(&STREAM_MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        for d in [self.dims.nx, self.dims.ny, self.dims.nz] {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.push(self.order.code());
        b.extend_from_slice(&self.max_error.to_le_bytes());
        b.extend_from_slice(&self.config_digest.to_le_bytes());
        b.extend_from_slice(&self.weights_checksum.to_le_bytes());
        b.extend_from_slice(&self.guard_tau.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 4 {
            return Err(Error::StreamExhausted);
        }
        let found: [u8; 4] = b[..4].try_into().unwrap();
        if found != STREAM_MAGIC {
            return Err(Error::BadMagic {
                expected: STREAM_MAGIC,
                found,
            });
        }
        if b.len() < HEADER_LEN {
            return Err(Error::StreamExhausted);
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != STREAM_VERSION {
            return Err(Error::UnsupportedVersion(version as u32));
        }
        let dims = Dims::new(u32_at(6) as usize, u32_at(10) as usize, u32_at(14) as usize);
        dims.validate()?;
        let order = SampleOrder::from_code(b[18])
            .ok_or_else(|| Error::malformed("stream header", format!("unknown sample order {}", b[18])))?;
        let guard_tau = f64::from_le_bytes(b[39..47].try_into().unwrap());
        if !(guard_tau > 0.0 && guard_tau < 0.5) {
            return Err(Error::malformed("stream header", format!("guard_tau {guard_tau} out of range")));
        }
        Ok(StreamHeader {
            version,
            dims,
            order,
            max_error: u32_at(19),
            config_digest: u64_at(23),
            weights_checksum: u64_at(31),
            guard_tau,
        })
    }

    /// Refuse to decode with weights other than those used to encode.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.weights_checksum != model.checksum {
            return Err(Error::WeightsMismatch(format!(
                "stream was coded with weights {:#018x}, loaded weights are {:#018x}",
                self.weights_checksum, model.checksum
            )));
        }
        if self.config_digest != model.config.digest() || self.guard_tau != model.config.guard_tau {
            return Err(Error::WeightsMismatch("model configuration differs from the stream".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> String {
        if self.max_error == 0 {
            "lossless".into()
        } else {
            format!("near-lossless, m={}", self.max_error)
        }
    }
}

/// Rate and timing figures of one compression run.
#[derive(Debug, Clone, PartialEq)]
pub struct CodingStats {
    pub dims: Dims,
    pub max_error: u32,
    /// Size of the whole stream, header and trailer included.
    pub total_bits: u64,
    /// Bits spent on residual codewords per band, over all lines.
    pub band_bits: Vec<u64>,
    pub guard_bits: u64,
    pub wall_time: Duration,
    pub peak_state_bytes: usize,
}

impl CodingStats {
    fn samples(&self) -> f64 {
        self.dims.samples() as f64
    }

    pub fn bpppc(&self) -> f64 {
        self.total_bits as f64 / self.samples()
    }

    pub fn band_bpppc(&self) -> Vec<f64> {
        let per_band = (self.dims.nx * self.dims.ny) as f64;
        self.band_bits.iter().map(|&b| b as f64 / per_band).collect()
    }

    pub fn guard_bpppc(&self) -> f64 {
        self.guard_bits as f64 / self.samples()
    }

    pub fn samples_per_sec(&self) -> f64 {
        self.samples() / self.wall_time.as_secs_f64().max(1e-9)
    }

    pub fn mode(&self) -> String {
        if self.max_error == 0 {
            "lossless".into()
        } else {
            format!("near-lossless, m={}", self.max_error)
        }
    }

    pub fn report(&self) -> Report {
        let mut r = Report::new();
        r.push("mode", self.mode())
            .push("nx", self.dims.nx)
            .push("ny", self.dims.ny)
            .push("nz", self.dims.nz)
            .push("total_bits", self.total_bits)
            .push("bpppc", format!("{:.6}", self.bpppc()))
            .push_list(
                "band_bpppc",
                &self.band_bpppc().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>(),
            )
            .push("guard_bits", self.guard_bits)
            .push("guard_bpppc", format!("{:.6}", self.guard_bpppc()))
            .push("wall_time_s", format!("{:.6}", self.wall_time.as_secs_f64()))
            .push("samples_per_s", format!("{:.1}", self.samples_per_sec()))
            .push("peak_state_bytes", self.peak_state_bytes);
        r
    }
}

fn push_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::malformed("encoder snapshot", "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

const SNAPSHOT_MAGIC: [u8; 4] = *b"LRCS";

/// Line-by-line compressor. Lines are pushed in order; output bytes can be
/// drained at any time.
pub struct StreamEncoder {
    header: StreamHeader,
    pipeline: Pipeline,
    dpcm: GolombContext,
    bands: Vec<GolombContext>,
    writer: BitWriter,
    checksum: SampleChecksum,
    out: Vec<u8>,
    band_bits: Vec<u64>,
    guard_bits: u64,
    started: Instant,
    elapsed: Duration,
}

impl StreamEncoder {
    pub fn new(model: Arc<Model>, dims: Dims, order: SampleOrder, max_error: u32) -> Result<Self> {
        dims.validate()?;
        let header = StreamHeader::new(&model, dims, order, max_error);
        let pipeline = Pipeline::new(model, dims.nx, dims.nz)?;
        Ok(StreamEncoder {
            out: header.to_bytes(),
            header,
            pipeline,
            dpcm: GolombContext::new(),
            bands: vec![GolombContext::new(); dims.nz],
            writer: BitWriter::new(),
            checksum: SampleChecksum::new(),
            band_bits: vec![0; dims.nz],
            guard_bits: 0,
            started: Instant::now(),
            elapsed: Duration::ZERO,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn lines_done(&self) -> usize {
        self.pipeline.y()
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// Code one line of original samples (prequantized here when `m > 0`).
    pub fn push_line(&mut self, slab: &LineSlab) -> Result<LineResiduals> {
        if self.lines_done() >= self.header.dims.ny {
            return Err(Error::InvalidArgument("more lines pushed than the header declares".into()));
        }
        let m = self.header.max_error;
        let quantized;
        let slab = if m > 0 {
            let mut q = slab.clone();
            q.data.iter_mut().for_each(|v| *v = prequantize_sample(*v, m));
            quantized = q;
            &quantized
        } else {
            slab
        };
        let res = self.pipeline.predict_line(slab)?;
        self.checksum.update(&slab.data);
        for z in 0..res.nz {
            for x in 0..res.nx {
                let i = res.index(x, z);
                let before = self.writer.bit_len();
                if let Some(side) = res.guards[i] {
                    self.writer.write_bit(side);
                    self.guard_bits += 1;
                }
                let after_guard = self.writer.bit_len();
                let ctx = if res.is_dpcm() { &mut self.dpcm } else { &mut self.bands[z] };
                ctx.encode(&mut self.writer, zigzag(res.eps[i]))?;
                debug_assert!(after_guard - before <= 1);
                self.band_bits[z] += self.writer.bit_len() - after_guard;
            }
        }
        self.out.extend(self.writer.take_bytes());
        Ok(res)
    }

    /// Move out the bytes completed so far.
    pub fn drain(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.out)
    }

    fn stats(&self, total_bits: u64) -> CodingStats {
        CodingStats {
            dims: self.header.dims,
            max_error: self.header.max_error,
            total_bits,
            band_bits: self.band_bits.clone(),
            guard_bits: self.guard_bits,
            wall_time: self.elapsed + self.started.elapsed(),
            peak_state_bytes: self.pipeline.state_bytes(),
        }
    }

    /// Flush the body and append the checksum. Returns the undrained bytes.
    pub fn finish(mut self) -> Result<(Vec<u8>, CodingStats)> {
        if self.lines_done() != self.header.dims.ny {
            return Err(Error::InvalidArgument(format!(
                "stream declares {} lines, {} were pushed",
                self.header.dims.ny,
                self.lines_done()
            )));
        }
        let body_bits = self.writer.bit_len();
        let writer = std::mem::take(&mut self.writer);
        self.out.extend(writer.finish());
        self.out.extend_from_slice(&self.checksum.finalize().to_le_bytes());
        let total_bits = (HEADER_LEN as u64 + body_bits.div_ceil(8) + TRAILER_LEN as u64) * 8;
        let stats = self.stats(total_bits);
        Ok((self.out, stats))
    }

    /// Serialize everything needed to continue later. Undrained bytes are
    /// returned separately and must precede the resumed encoder's output.
    pub fn suspend(mut self) -> (Vec<u8>, Vec<u8>) {
        let model = Arc::clone(self.pipeline.model());
        let mut s = Vec::new();
        s.extend_from_slice(&SNAPSHOT_MAGIC);
        s.extend_from_slice(&self.header.to_bytes());
        for ctx in std::iter::once(&self.dpcm).chain(&self.bands) {
            push_u64(&mut s, ctx.accumulator);
            s.extend_from_slice(&ctx.counter.to_le_bytes());
        }
        push_u64(&mut s, self.checksum.value());
        let (pending, nbits) = self.writer.pending();
        s.push(pending);
        s.push(nbits as u8);
        push_u64(&mut s, self.writer.bit_len());
        push_u64(&mut s, self.guard_bits);
        for &b in &self.band_bits {
            push_u64(&mut s, b);
        }
        push_u64(&mut s, (self.elapsed + self.started.elapsed()).as_nanos() as u64);
        s.extend(self.pipeline.state().to_bytes(&model.config));
        (self.drain(), s)
    }

    pub fn resume(model: Arc<Model>, snapshot: &[u8]) -> Result<Self> {
        let mut c = Cursor { b: snapshot, pos: 0 };
        if c.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::malformed("encoder snapshot", "bad magic"));
        }
        let header = StreamHeader::from_bytes(c.take(HEADER_LEN)?)?;
        header.check_model(&model)?;
        let nz = header.dims.nz;
        let mut ctxs = Vec::with_capacity(nz + 1);
        for _ in 0..=nz {
            ctxs.push(GolombContext {
                accumulator: c.u64()?,
                counter: c.u32()?,
            });
        }
        let checksum = SampleChecksum::resume(c.u64()?);
        let pending = c.take(2)?;
        let (pending, nbits) = (pending[0], pending[1] as u32);
        let written = c.u64()?;
        let guard_bits = c.u64()?;
        let band_bits = (0..nz).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let elapsed = Duration::from_nanos(c.u64()?);
        let state = PipelineState::from_bytes(&snapshot[c.pos..], &model.config)?;
        if (state.line.nx, state.line.nz) != (header.dims.nx, header.dims.nz) {
            return Err(Error::malformed("encoder snapshot", "state does not match the header"));
        }
        let pipeline = Pipeline::from_state(model, state)?;
        Ok(StreamEncoder {
            header,
            pipeline,
            dpcm: ctxs[0],
            bands: ctxs[1..].to_vec(),
            writer: BitWriter::resume((pending, nbits), written),
            checksum,
            out: Vec::new(),
            band_bits,
            guard_bits,
            started: Instant::now(),
            elapsed,
        })
    }
}

struct StreamSource<'r, 'a> {
    reader: &'r mut BitReader<'a>,
    dpcm: &'r mut GolombContext,
    bands: &'r mut [GolombContext],
}

impl ResidualSource for StreamSource<'_, '_> {
    fn next_dpcm(&mut self) -> Result<i32> {
        Ok(unzigzag(self.dpcm.decode(self.reader)?))
    }

    fn next_guard(&mut self) -> Result<bool> {
        self.reader.read_bit()
    }

    fn next_residual(&mut self, z: usize) -> Result<i32> {
        Ok(unzigzag(self.bands[z].decode(self.reader)?))
    }
}

/// Line-by-line decompressor over a complete stream.
pub struct StreamDecoder<'a> {
    header: StreamHeader,
    pipeline: Pipeline,
    dpcm: GolombContext,
    bands: Vec<GolombContext>,
    reader: BitReader<'a>,
    stored_checksum: u64,
    checksum: SampleChecksum,
}

impl<'a> StreamDecoder<'a> {
    pub fn new(model: Arc<Model>, bytes: &'a [u8]) -> Result<Self> {
        let header = StreamHeader::from_bytes(bytes)?;
        header.check_model(&model)?;
        if bytes.len() < HEADER_LEN + TRAILER_LEN {
            return Err(Error::StreamExhausted);
        }
        let body = &bytes[HEADER_LEN..bytes.len() - TRAILER_LEN];
        let stored_checksum = u64::from_le_bytes(bytes[bytes.len() - TRAILER_LEN..].try_into().unwrap());
        let pipeline = Pipeline::new(model, header.dims.nx, header.dims.nz)?;
        Ok(StreamDecoder {
            header,
            pipeline,
            dpcm: GolombContext::new(),
            bands: vec![GolombContext::new(); header.dims.nz],
            reader: BitReader::new(body),
            stored_checksum,
            checksum: SampleChecksum::new(),
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn pipeline_mut(&mut self) -> &mut Pipeline {
        &mut self.pipeline
    }

    /// The next reconstructed line, or `None` after the last one.
    pub fn next_line(&mut self) -> Result<Option<LineSlab>> {
        if self.pipeline.y() >= self.header.dims.ny {
            return Ok(None);
        }
        let mut src = StreamSource {
            reader: &mut self.reader,
            dpcm: &mut self.dpcm,
            bands: &mut self.bands,
        };
        let slab = self.pipeline.reconstruct_line(&mut src)?;
        self.checksum.update(&slab.data);
        Ok(Some(slab))
    }

    /// Check that the body was consumed exactly and the checksum matches.
    pub fn finish(self) -> Result<()> {
        if self.pipeline.y() != self.header.dims.ny {
            return Err(Error::InvalidArgument("not all lines were decoded".into()));
        }
        if self.reader.remaining_bits() >= 8 {
            return Err(Error::malformed(
                "bitstream",
                format!("{} unused bits after the last line", self.reader.remaining_bits()),
            ));
        }
        let computed = self.checksum.finalize();
        if computed != self.stored_checksum {
            return Err(Error::Checksum {
                what: "decoded cube",
                stored: self.stored_checksum,
                computed,
            });
        }
        Ok(())
    }
}

/// Options shared by [`compress`] and [`decompress`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CodecOptions {
    pub max_error: u32,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
}

/// Run `f` on a pool of `threads` workers (0 = the global pool).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

pub fn compress(model: Arc<Model>, cube: &HyperCube, opts: CodecOptions) -> Result<(Vec<u8>, CodingStats)> {
    with_threads(opts.threads, || {
        let mut enc = StreamEncoder::new(model, cube.dims(), cube.order(), opts.max_error)?;
        for line in cube.iter_lines() {
            enc.push_line(&line)?;
        }
        enc.finish()
    })?
}

pub fn decompress(model: Arc<Model>, bytes: &[u8], threads: usize) -> Result<HyperCube> {
    with_threads(threads, || {
        let mut dec = StreamDecoder::new(model, bytes)?;
        let d = dec.header().dims;
        let order = dec.header().order;
        let mut lines = Vec::with_capacity(d.ny);
        while let Some(l) = dec.next_line()? {
            lines.push(l);
        }
        dec.finish()?;
        Ok(HyperCube::from_lines(d.nx, d.nz, lines)?.with_order(order))
    })?
}
