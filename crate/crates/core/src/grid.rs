//! Single-band rasters and the HGRD binary grid format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "HGRD" | version u16 = 1 | dtype u8 | reserved u8 = 0 | width u32 | height u32
//! | origin_x f64 | origin_y f64 | pixel_size f64 | nodata f64 | row-major payload
//! ```
//!
//! dtype 0 is `f32`, 1 is `u8` (class codes). dtype 2 (`f64`) is an extension used
//! for high-precision intermediate grids.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};

pub const MAGIC: &[u8; 4] = b"HGRD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 48;

/// Default nodata value for reflectance and index grids.
pub const NODATA_F32: f32 = -9999.0;
/// Nodata code for class grids.
pub const NODATA_CLASS: u8 = 255;
pub const DEFAULT_PIXEL_SIZE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Element type of a grid.
pub trait Sample: Copy + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    const SIZE: usize;
    fn to_f64(self) -> f64;
    /// Exact conversion; `None` if `v` is not representable.
    fn from_f64_exact(v: f64) -> Option<Self>;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Floating-point samples that can carry computed values.
pub trait FloatSample: Sample {
    fn from_f64_lossy(v: f64) -> Self;
}

impl Sample for f32 {
    const DTYPE: DType = DType::F32;
    const SIZE: usize = 4;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64_exact(v: f64) -> Option<Self> {
        let s = v as f32;
        (s as f64 == v || (v.is_nan() && s.is_nan())).then_some(s)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl FloatSample for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Sample for f64 {
    const DTYPE: DType = DType::F64;
    const SIZE: usize = 8;
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64_exact(v: f64) -> Option<Self> {
        Some(v)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl FloatSample for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

impl Sample for u8 {
    const DTYPE: DType = DType::U8;
    const SIZE: usize = 1;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64_exact(v: f64) -> Option<Self> {
        (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8)
    }
    fn is_finite(self) -> bool {
        true
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// Projected placement of the upper-left corner plus square pixel size, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
}

impl Default for GeoTransform {
    fn default() -> Self {
        GeoTransform {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_size: DEFAULT_PIXEL_SIZE,
        }
    }
}

/// ARD tile index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TileId {
    pub h: u32,
    pub v: u32,
}

/// A single-band raster in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T: Sample> {
    width: usize,
    height: usize,
    geo: GeoTransform,
    nodata: T,
    samples: Vec<T>,
}

pub type FloatGrid = Grid<f32>;
pub type ClassGrid = Grid<u8>;

fn same_value<T: Sample>(a: T, b: T) -> bool {
    a == b || (!a.is_finite() && !b.is_finite() && a.to_f64().is_nan() && b.to_f64().is_nan())
}

impl<T: Sample> Grid<T> {
    pub fn new(
        width: usize,
        height: usize,
        geo: GeoTransform,
        nodata: T,
        samples: Vec<T>,
    ) -> Result<Self> {
        let grid = Grid {
            width,
            height,
            geo,
            nodata,
            samples,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn filled(width: usize, height: usize, geo: GeoTransform, nodata: T, value: T) -> Result<Self> {
        Self::new(width, height, geo, nodata, vec![value; width * height])
    }

    /// Checks every structural invariant of the grid.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if self.width > u32::MAX as usize || self.height > u32::MAX as usize {
            return Err(Error::InvalidArgument("grid dimensions exceed u32".into()));
        }
        if self.samples.len() != self.width * self.height {
            return Err(Error::Length(format!(
                "expected {} samples for {}x{}, got {}",
                self.width * self.height,
                self.width,
                self.height,
                self.samples.len()
            )));
        }
        if !(self.geo.pixel_size > 0.0 && self.geo.pixel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel size must be positive, got {}",
                self.geo.pixel_size
            )));
        }
        if let Some(i) = self
            .samples
            .iter()
            .position(|&v| !v.is_finite() && !self.is_nodata(v))
        {
            return Err(Error::Data(format!(
                "sample {i} is non-finite and not nodata ({:?})",
                self.samples[i]
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn geo(&self) -> GeoTransform {
        self.geo
    }

    pub fn nodata(&self) -> T {
        self.nodata
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn is_nodata(&self, v: T) -> bool {
        same_value(v, self.nodata)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.samples[self.index(x, y)]
    }

    /// `Some(v)` unless the sample is nodata.
    pub fn value(&self, x: usize, y: usize) -> Option<T> {
        let v = self.get(x, y);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn same_shape<U: Sample>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height && self.geo == other.geo
    }

    pub fn ensure_same_shape<U: Sample>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} {:?} vs {}x{} {:?}",
                self.width, self.height, self.geo, other.width, other.height, other.geo
            )))
        }
    }

    /// New grid on the same raster frame.
    pub fn with_samples<U: Sample>(&self, nodata: U, samples: Vec<U>) -> Result<Grid<U>> {
        Grid::new(self.width, self.height, self.geo, nodata, samples)
    }

    /// Serializes to the HGRD byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.samples.len() * T::SIZE);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE as u8);
        out.push(0);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.geo.origin_x.to_le_bytes());
        out.extend_from_slice(&self.geo.origin_y.to_le_bytes());
        out.extend_from_slice(&self.geo.pixel_size.to_le_bytes());
        out.extend_from_slice(&self.nodata.to_f64().to_le_bytes());
        for &s in &self.samples {
            s.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "expected dtype {:?}, file has {:?}",
                T::DTYPE,
                header.dtype
            )));
        }
        decode_payload(&header, bytes)
    }
}

struct Header {
    dtype: DType,
    width: usize,
    height: usize,
    geo: GeoTransform,
    nodata: f64,
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing HGRD magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length(format!(
            "header truncated: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported HGRD version {version}")));
    }
    let dtype = DType::from_code(bytes[6])?;
    if bytes[7] != 0 {
        return Err(Error::Format("reserved header byte must be 0".into()));
    }
    let width = le_u32(bytes, 8) as usize;
    let height = le_u32(bytes, 12) as usize;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("degenerate dimensions {width}x{height}")));
    }
    Ok(Header {
        dtype,
        width,
        height,
        geo: GeoTransform {
            origin_x: le_f64(bytes, 16),
            origin_y: le_f64(bytes, 24),
            pixel_size: le_f64(bytes, 32),
        },
        nodata: le_f64(bytes, 40),
    })
}

fn decode_payload<T: Sample>(h: &Header, bytes: &[u8]) -> Result<Grid<T>> {
    let expected = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(T::SIZE))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Length(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let nodata = T::from_f64_exact(h.nodata).ok_or_else(|| {
        Error::Format(format!("nodata {} not representable as {:?}", h.nodata, T::DTYPE))
    })?;
    let samples = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
    Grid::new(h.width, h.height, h.geo, nodata, samples).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Format(m),
        other => other,
    })
}

/// A grid of any supported sample type, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyGrid {
    F32(Grid<f32>),
    U8(Grid<u8>),
    F64(Grid<f64>),
}

impl AnyGrid {
    pub fn dtype(&self) -> DType {
        match self {
            AnyGrid::F32(_) => DType::F32,
            AnyGrid::U8(_) => DType::U8,
            AnyGrid::F64(_) => DType::F64,
        }
    }
}

/// Reads any HGRD file.
pub fn read_grid(path: &Path) -> Result<AnyGrid> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes)?;
    Ok(match header.dtype {
        DType::F32 => AnyGrid::F32(decode_payload(&header, &bytes)?),
        DType::U8 => AnyGrid::U8(decode_payload(&header, &bytes)?),
        DType::F64 => AnyGrid::F64(decode_payload(&header, &bytes)?),
    })
}

/// Reads an HGRD file that must hold samples of type `T`.
pub fn read_grid_as<T: Sample>(path: &Path) -> Result<Grid<T>> {
    Grid::from_bytes(&read_bytes(path)?)
}

pub fn write_grid<T: Sample>(grid: &Grid<T>, path: &Path) -> Result<()> {
    write_atomic(path, &grid.to_bytes()?)
}
