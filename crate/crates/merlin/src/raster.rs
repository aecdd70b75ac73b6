//! Bit-exact persistence of complex images, reflectivity maps and tensor
//! bundles, plus 8-bit PNG ingest/export.
//!
//! All binary containers are little-endian, row-major, 32-bit floats:
//! - SLC container: magic `SLC1`, width u32, height u32, then interleaved
//!   `(re, im)` f32 pairs.
//! - Reflectivity container: magic `RFL1`, width u32, height u32, one u8
//!   `convolved` flag, then one f32 per pixel.
//! - Tensor container: magic `TNS1`, entry count u32, then per entry a u16
//!   name length + UTF-8 name, u8 ndim, u32 dims, f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Reflectivity floor applied by loaders; the training loss takes `log r`,
/// so zero reflectivity is a singularity.
pub const R_FLOOR: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: wanted {wanted} bytes, got {got}")]
    Truncated { wanted: usize, got: usize },
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
    #[error("invalid dimensions {width}x{height}")]
    BadDims { width: usize, height: usize },
    #[error("not an 8-bit grayscale image: {0}")]
    NotGrayscale(String),
    #[error("image decode error: {0}")]
    Decode(#[from] image::ImageError),
    #[error("malformed container: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, RasterError>;

/// A 2-D grid of complex samples, split into real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub width: usize,
    pub height: usize,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl ComplexImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1);
        Self {
            width,
            height,
            re: vec![0.0; width * height],
            im: vec![0.0; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, re: Vec<f32>, im: Vec<f32>) -> Result<Self> {
        if width < 1 || height < 1 || re.len() != width * height || im.len() != re.len() {
            return Err(RasterError::BadDims { width, height });
        }
        for (i, v) in re.iter().chain(im.iter()).enumerate() {
            if !v.is_finite() {
                return Err(RasterError::NonFinite {
                    index: i % (width * height),
                });
            }
        }
        Ok(Self {
            width,
            height,
            re,
            im,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// A 2-D grid of strictly positive reflectivities. `convolved` is set once
/// the values have been pushed through the squared system kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectivityImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub convolved: bool,
}

impl ReflectivityImage {
    pub fn new(width: usize, height: usize, values: Vec<f32>, convolved: bool) -> Result<Self> {
        if width < 1 || height < 1 || values.len() != width * height {
            return Err(RasterError::BadDims { width, height });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(RasterError::NonFinite { index: i });
            }
            if *v <= 0.0 {
                return Err(RasterError::Malformed(format!(
                    "non-positive reflectivity {v} at index {i}"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            values,
            convolved,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height], false).unwrap()
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A plain single-channel grid (intensity, amplitude, ratio...).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One named dense tensor inside a [`TensorContainer`].
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// An ordered bundle of named tensors. Round-trips preserve names, dims and
/// every float bit pattern.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub entries: Vec<TensorEntry>,
}

impl TensorContainer {
    pub fn push(&mut self, name: &str, dims: &[u32], data: Vec<f32>) {
        let numel: u64 = dims.iter().map(|&d| d as u64).product();
        assert_eq!(numel as usize, data.len(), "dims/data mismatch for {name}");
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate tensor name {name}"
        );
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"TNS1")?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.dims.len() as u8])?;
            for d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for v in &e.data {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, *b"TNS1")?;
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| RasterError::Malformed(format!("tensor name not UTF-8: {e}")))?;
            let ndim = read_u8(r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(r)?);
            }
            let numel: u64 = dims.iter().map(|&d| d as u64).product();
            let mut data = Vec::with_capacity(numel as usize);
            for _ in 0..numel {
                data.push(f32::from_bits(read_u32(r)?));
            }
            entries.push(TensorEntry { name, dims, data });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(RasterError::Truncated {
                wanted: buf.len(),
                got,
            });
        }
        got += n;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact(r, &mut found)?;
    if found != expected {
        return Err(RasterError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn save_slc(img: &ComplexImage, path: impl AsRef<Path>) -> Result<()> {
    for (i, v) in img.re.iter().chain(img.im.iter()).enumerate() {
        if !v.is_finite() {
            return Err(RasterError::NonFinite {
                index: i % img.len(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"SLC1")?;
    w.write_all(&(img.width as u32).to_le_bytes())?;
    w.write_all(&(img.height as u32).to_le_bytes())?;
    for i in 0..img.len() {
        w.write_all(&img.re[i].to_bits().to_le_bytes())?;
        w.write_all(&img.im[i].to_bits().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_slc(path: impl AsRef<Path>) -> Result<ComplexImage> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, *b"SLC1")?;
    let width = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    if width < 1 || height < 1 {
        return Err(RasterError::BadDims { width, height });
    }
    let len = width * height;
    let mut re = Vec::with_capacity(len);
    let mut im = Vec::with_capacity(len);
    for i in 0..len {
        let a = f32::from_bits(read_u32(&mut r)?);
        let b = f32::from_bits(read_u32(&mut r)?);
        if !a.is_finite() || !b.is_finite() {
            return Err(RasterError::NonFinite { index: i });
        }
        re.push(a);
        im.push(b);
    }
    Ok(ComplexImage {
        width,
        height,
        re,
        im,
    })
}

pub fn save_rfl(img: &ReflectivityImage, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"RFL1")?;
    w.write_all(&(img.width as u32).to_le_bytes())?;
    w.write_all(&(img.height as u32).to_le_bytes())?;
    w.write_all(&[img.convolved as u8])?;
    for v in &img.values {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_rfl(path: impl AsRef<Path>) -> Result<ReflectivityImage> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, *b"RFL1")?;
    let width = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    if width < 1 || height < 1 {
        return Err(RasterError::BadDims { width, height });
    }
    let convolved = read_u8(&mut r)? != 0;
    let len = width * height;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(f32::from_bits(read_u32(&mut r)?));
    }
    ReflectivityImage::new(width, height, values, convolved)
}

/// Convert an 8-bit grayscale PNG into ground-truth reflectivities with
/// `r = (g/255 * amplitude_peak)^2`, floored at [`R_FLOOR`].
pub fn ingest_grayscale(path: impl AsRef<Path>, amplitude_peak: f32) -> Result<ReflectivityImage> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(RasterError::NotGrayscale(format!(
                "unsupported color type {:?}",
                other.color()
            )))
        }
    };
    let (width, height) = (gray.width() as usize, gray.height() as usize);
    let values = gray
        .into_raw()
        .into_iter()
        .map(|g| {
            let amp = g as f32 / 255.0 * amplitude_peak;
            (amp * amp).max(R_FLOOR)
        })
        .collect();
    ReflectivityImage::new(width, height, values, false)
}

/// Display mapping used by [`export_png`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportMode {
    /// Clip at the 99.5th percentile, then scale linearly to `[0, 255]`.
    AmplitudeQuantile,
    /// Map `log(max(x, 1e-10))` linearly from min..max to `[0, 255]`.
    Log,
}

/// Nearest-rank percentile of already sorted data, `q` in `[0, 1]`.
fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    debug_assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Quantize a grid to 8-bit and write a grayscale PNG.
pub fn export_png(grid: &Grid, mode: ExportMode, path: impl AsRef<Path>) -> Result<()> {
    for (i, v) in grid.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(RasterError::NonFinite { index: i });
        }
    }
    let bytes = quantize(grid, mode);
    let img = image::GrayImage::from_raw(grid.width as u32, grid.height as u32, bytes)
        .ok_or_else(|| RasterError::Malformed("grid/PNG size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// The 8-bit LUT behind [`export_png`], exposed for tests.
pub fn quantize(grid: &Grid, mode: ExportMode) -> Vec<u8> {
    match mode {
        ExportMode::AmplitudeQuantile => {
            let mut sorted = grid.values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let clip = percentile_sorted(&sorted, 0.995);
            if clip <= 0.0 {
                return vec![0; grid.len()];
            }
            grid.values
                .iter()
                .map(|&v| ((v.max(0.0).min(clip) / clip) * 255.0).round() as u8)
                .collect()
        }
        ExportMode::Log => {
            let logs: Vec<f32> = grid.values.iter().map(|&v| v.max(1e-10).ln()).collect();
            let lo = logs.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = logs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if hi <= lo {
                return vec![255; grid.len()];
            }
            logs.iter()
                .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
                .collect()
        }
    }
}
