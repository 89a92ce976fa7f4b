//! Raw hyperspectral cubes and line-by-line access.
//!
//! Files are headerless little-endian `u16` samples; dimensions and the
//! interleave order come from the caller. In memory a [`HyperCube`] is
//! always held in `(y, x, z)` order with `z` fastest, which is the layout
//! the codec consumes one line at a time.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Interleave order of a raw cube file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleOrder {
    /// Band sequential: `(z, y, x)`, x fastest.
    Bsq,
    /// Band interleaved by line: `(y, z, x)`, x fastest.
    Bil,
    /// Band interleaved by pixel: `(y, x, z)`, z fastest.
    Bip,
}

impl SampleOrder {
    pub fn code(self) -> u8 {
        match self {
            SampleOrder::Bsq => 0,
            SampleOrder::Bil => 1,
            SampleOrder::Bip => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SampleOrder::Bsq),
            1 => Some(SampleOrder::Bil),
            2 => Some(SampleOrder::Bip),
            _ => None,
        }
    }

    /// Position of sample `(y, x, z)` in a buffer stored in this order.
    #[inline]
    pub fn index(self, dims: Dims, y: usize, x: usize, z: usize) -> usize {
        let Dims { nx, ny, nz } = dims;
        match self {
            SampleOrder::Bsq => (z * ny + y) * nx + x,
            SampleOrder::Bil => (y * nz + z) * nx + x,
            SampleOrder::Bip => (y * nx + x) * nz + z,
        }
    }
}

impl fmt::Display for SampleOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleOrder::Bsq => "bsq",
            SampleOrder::Bil => "bil",
            SampleOrder::Bip => "bip",
        })
    }
}

impl FromStr for SampleOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bsq" => Ok(SampleOrder::Bsq),
            "bil" => Ok(SampleOrder::Bil),
            "bip" => Ok(SampleOrder::Bip),
            other => Err(Error::InvalidArgument(format!(
                "unknown sample order {other:?} (expected bsq, bil or bip)"
            ))),
        }
    }
}

/// Cube extent: columns (across-track), lines (along-track), bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn samples(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn line_samples(&self) -> usize {
        self.nx * self.nz
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 1 || self.ny < 2 || self.nz < 2 {
            return Err(Error::InvalidDimensions(format!(
                "need nx >= 1, ny >= 2, nz >= 2; got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A full image cube of unsigned 16-bit samples in canonical `(y, x, z)` layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperCube {
    dims: Dims,
    /// Order the cube was read from, used as the default when writing.
    order: SampleOrder,
    samples: Vec<u16>,
}

impl HyperCube {
    /// Build a cube from samples already in canonical `(y, x, z)` order.
    pub fn new(dims: Dims, samples: Vec<u16>) -> Result<Self> {
        dims.validate()?;
        if samples.len() != dims.samples() {
            return Err(Error::ShapeMismatch(format!(
                "cube {dims} needs {} samples, got {}",
                dims.samples(),
                samples.len()
            )));
        }
        Ok(HyperCube {
            dims,
            order: SampleOrder::Bip,
            samples,
        })
    }

    /// Build a cube from samples laid out in `order`.
    pub fn from_ordered(dims: Dims, order: SampleOrder, samples: &[u16]) -> Result<Self> {
        dims.validate()?;
        if samples.len() != dims.samples() {
            return Err(Error::ShapeMismatch(format!(
                "cube {dims} needs {} samples, got {}",
                dims.samples(),
                samples.len()
            )));
        }
        let mut canonical = vec![0u16; samples.len()];
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                for z in 0..dims.nz {
                    canonical[SampleOrder::Bip.index(dims, y, x, z)] =
                        samples[order.index(dims, y, x, z)];
                }
            }
        }
        Ok(HyperCube {
            dims,
            order,
            samples: canonical,
        })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u16) -> Result<Self> {
        dims.validate()?;
        let mut samples = Vec::with_capacity(dims.samples());
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                for z in 0..dims.nz {
                    samples.push(f(y, x, z));
                }
            }
        }
        HyperCube::new(dims, samples)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn order(&self) -> SampleOrder {
        self.order
    }

    pub fn with_order(mut self, order: SampleOrder) -> Self {
        self.order = order;
        self
    }

    /// Canonical `(y, x, z)` sample buffer.
    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u16] {
        &mut self.samples
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, z: usize) -> u16 {
        self.samples[SampleOrder::Bip.index(self.dims, y, x, z)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, z: usize, v: u16) {
        let i = SampleOrder::Bip.index(self.dims, y, x, z);
        self.samples[i] = v;
    }

    /// Samples permuted into `order`.
    pub fn to_ordered(&self, order: SampleOrder) -> Vec<u16> {
        if order == SampleOrder::Bip {
            return self.samples.clone();
        }
        let mut out = vec![0u16; self.samples.len()];
        for y in 0..self.dims.ny {
            for x in 0..self.dims.nx {
                for z in 0..self.dims.nz {
                    out[order.index(self.dims, y, x, z)] = self.get(y, x, z);
                }
            }
        }
        out
    }

    /// One line of the cube, all bands.
    pub fn line(&self, y: usize) -> LineSlab {
        let n = self.dims.line_samples();
        LineSlab {
            y,
            nx: self.dims.nx,
            nz: self.dims.nz,
            data: self.samples[y * n..(y + 1) * n].to_vec(),
        }
    }

    pub fn iter_lines(&self) -> impl Iterator<Item = LineSlab> + '_ {
        (0..self.dims.ny).map(move |y| self.line(y))
    }

    /// Reassemble a cube from consecutive slabs starting at `y = 0`.
    pub fn from_lines(nx: usize, nz: usize, lines: impl IntoIterator<Item = LineSlab>) -> Result<Self> {
        let mut samples = Vec::new();
        let mut ny = 0;
        for slab in lines {
            if slab.y != ny || slab.nx != nx || slab.nz != nz {
                return Err(Error::ShapeMismatch(format!(
                    "slab y={} ({}x{}) does not continue a {nx}x{nz} cube at line {ny}",
                    slab.y, slab.nx, slab.nz
                )));
            }
            samples.extend_from_slice(&slab.data);
            ny += 1;
        }
        HyperCube::new(Dims::new(nx, ny, nz), samples)
    }
}

/// One full line (all columns, all bands), `(x, z)` layout with z fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineSlab {
    pub y: usize,
    pub nx: usize,
    pub nz: usize,
    pub data: Vec<u16>,
}

impl LineSlab {
    pub fn new(y: usize, nx: usize, nz: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != nx * nz {
            return Err(Error::ShapeMismatch(format!(
                "line slab {nx}x{nz} needs {} samples, got {}",
                nx * nz,
                data.len()
            )));
        }
        Ok(LineSlab { y, nx, nz, data })
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize) -> u16 {
        self.data[x * self.nz + z]
    }

    #[inline]
    pub fn set(&mut self, x: usize, z: usize, v: u16) {
        self.data[x * self.nz + z] = v;
    }

    /// Band `z` across all columns.
    pub fn band(&self, z: usize) -> Vec<u16> {
        (0..self.nx).map(|x| self.get(x, z)).collect()
    }
}

pub fn read_cube(path: impl AsRef<Path>, dims: Dims, order: SampleOrder) -> Result<HyperCube> {
    let path = path.as_ref();
    dims.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 2 * dims.samples() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let raw: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    HyperCube::from_ordered(dims, order, &raw)
}

pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>, order: SampleOrder) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = cube
        .to_ordered(order)
        .iter()
        .flat_map(|s| s.to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
