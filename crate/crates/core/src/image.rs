//! Raster types shared across the pipeline, the MATF container and PNG export.
//!
//! MATF layout:
//!
//! ```text
//! bytes 0..4     magic "MATF"
//! bytes 4..8     u32 little-endian JSON header length H
//! bytes 8..8+H   UTF-8 JSON header
//! then           width*height little-endian f64 samples (row-major),
//!                or width*height bytes (0/1) for masks
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MATF_MAGIC: &[u8; 4] = b"MATF";

/// A single-channel, row-major raster with isotropic pixel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::InvalidImage(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        Self::filled(width, height, pixel_size, 0.0)
    }

    pub fn filled(width: usize, height: usize, pixel_size: f64, value: f64) -> Result<Self> {
        Self::new(width, height, pixel_size, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Same geometry, new samples. Validates length and finiteness.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.width, self.height, self.pixel_size, data)
    }

    pub fn same_geometry(&self, other: &ImageGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixel_size == other.pixel_size
    }

    pub(crate) fn check_same_geometry(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what}: {}x{}@{} vs {}x{}@{}",
                self.width, self.height, self.pixel_size, other.width, other.height,
                other.pixel_size
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Water,
    Bone,
}

impl Material {
    pub const ALL: [Material; 2] = [Material::Water, Material::Bone];

    pub fn index(self) -> usize {
        match self {
            Material::Water => 0,
            Material::Bone => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Material::Water => "water",
            Material::Bone => "bone",
        }
    }
}

/// Density map (g/cm³) of one material.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialImage {
    grid: ImageGrid,
    material: Material,
}

impl MaterialImage {
    pub fn new(grid: ImageGrid, material: Material) -> Self {
        Self { grid, material }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn material(&self) -> Material {
        self.material
    }

    pub fn data(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn into_grid(self) -> ImageGrid {
        self.grid
    }
}

/// Co-registered high/low energy attenuation images (cm⁻¹).
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationPair {
    high: ImageGrid,
    low: ImageGrid,
}

impl AttenuationPair {
    pub fn new(high: ImageGrid, low: ImageGrid) -> Result<Self> {
        high.check_same_geometry(&low, "attenuation pair")?;
        Ok(Self { high, low })
    }

    pub fn high(&self) -> &ImageGrid {
        &self.high
    }

    pub fn low(&self) -> &ImageGrid {
        &self.low
    }
}

/// Boolean pixel mask with its population count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionOfInterest {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    count: usize,
}

impl RegionOfInterest {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "mask length {} does not match {width}x{height}",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArgument("region of interest is empty".into()));
        }
        Ok(Self {
            width,
            height,
            mask,
            count,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
            count: width * height,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub(crate) fn check_matches(&self, grid: &ImageGrid) -> Result<()> {
        if self.width == grid.width() && self.height == grid.height() {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "ROI {}x{} vs image {}x{}",
                self.width,
                self.height,
                grid.width(),
                grid.height()
            )))
        }
    }

    /// Samples of `grid` under the mask, in raster order.
    pub fn select<'a>(&'a self, grid: &'a ImageGrid) -> impl Iterator<Item = f64> + 'a {
        grid.data()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
    }
}

/// What the samples of a MATF file represent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Semantic {
    #[serde(rename = "density_g_cm3")]
    Density,
    #[serde(rename = "attenuation_cm-1")]
    Attenuation,
    #[serde(rename = "mask")]
    Mask,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatfHeader {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    dtype: String,
    semantic: Semantic,
}

fn encode_matf(header: &MatfHeader, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + payload.len());
    buf.extend_from_slice(MATF_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(payload);
    Ok(buf)
}

fn decode_matf(bytes: &[u8]) -> Result<(MatfHeader, &[u8])> {
    if bytes.len() < 8 || &bytes[0..4] != MATF_MAGIC {
        return Err(Error::Format("magic mismatch: not a MATF file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: MatfHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    Ok((header, &body[hlen..]))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a real-valued MATF image, returning the grid and its semantic tag.
pub fn read_matf(path: impl AsRef<Path>) -> Result<(ImageGrid, Semantic)> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (header, payload) = decode_matf(&bytes)?;
    if header.dtype != "f64le" {
        return Err(Error::Format(format!(
            "expected dtype f64le, found {}",
            header.dtype
        )));
    }
    let n = header
        .width
        .checked_mul(header.height)
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let expected = n * 8;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = ImageGrid::new(header.width, header.height, header.pixel_size_mm, data)?;
    Ok((grid, header.semantic))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    read_matf(path).map(|(g, _)| g)
}

/// Write a density image. See [`write_image_as`] for other semantics.
pub fn write_image(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    write_image_as(grid, Semantic::Density, path)
}

pub fn write_image_as(grid: &ImageGrid, semantic: Semantic, path: impl AsRef<Path>) -> Result<()> {
    if semantic == Semantic::Mask {
        return Err(Error::InvalidArgument(
            "use write_mask for mask payloads".into(),
        ));
    }
    // Grids are validated on construction; re-check so a hand-built payload never escapes.
    if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let header = MatfHeader {
        width: grid.width(),
        height: grid.height(),
        pixel_size_mm: grid.pixel_size(),
        dtype: "f64le".into(),
        semantic,
    };
    let mut payload = Vec::with_capacity(grid.len() * 8);
    for v in grid.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path.as_ref(), &encode_matf(&header, &payload)?)
}

pub fn write_mask(roi: &RegionOfInterest, pixel_size: f64, path: impl AsRef<Path>) -> Result<()> {
    let header = MatfHeader {
        width: roi.width(),
        height: roi.height(),
        pixel_size_mm: pixel_size,
        dtype: "u8".into(),
        semantic: Semantic::Mask,
    };
    let payload: Vec<u8> = roi.mask().iter().map(|&m| m as u8).collect();
    write_bytes(path.as_ref(), &encode_matf(&header, &payload)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<RegionOfInterest> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (header, payload) = decode_matf(&bytes)?;
    if header.semantic != Semantic::Mask {
        return Err(Error::Format("file is not a mask".into()));
    }
    let expected = header.width * header.height;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let mask = payload
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask byte {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    RegionOfInterest::new(header.width, header.height, mask)
}

/// Gray level of `v` under the display window `[lo, hi]`.
pub fn window_level(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (255.0 * t).round() as u8
}

/// Export an 8-bit grayscale PNG with a linear display window.
pub fn render_png(grid: &ImageGrid, window_lo: f64, window_hi: f64, path: impl AsRef<Path>) -> Result<()> {
    if !(window_hi > window_lo) || !window_lo.is_finite() || !window_hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "degenerate display window [{window_lo}, {window_hi}]"
        )));
    }
    let path = path.as_ref();
    let pixels: Vec<u8> = grid
        .data()
        .iter()
        .map(|&v| window_level(v, window_lo, window_hi))
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        grid.width() as u32,
        grid.height() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("png encoding: {e}"));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Flush helper kept separate so callers can stream several outputs.
/// Writes a UTF-8 text file.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
