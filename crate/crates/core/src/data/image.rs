use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::metrics::ChangeMap;
use crate::tensor::Tensor;

use super::manifest::ManifestEntry;

pub const MIN_SIDE: usize = 16;
pub const MAX_SIDE: usize = 512;

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 || pixels.is_empty() {
            return Err(Error::Shape(format!(
                "RGB image {width}×{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Planar `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.pixels[p * 3 + c] as f64 / 255.0
        })
    }
}

/// Co-registered images of one scene at two times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub t0: RgbImage,
    pub t1: RgbImage,
}

impl ImagePair {
    pub fn new(t0: RgbImage, t1: RgbImage) -> Result<Self> {
        if (t0.width, t0.height) != (t1.width, t1.height) {
            return Err(Error::Shape(format!(
                "bitemporal images differ: {}×{} vs {}×{}",
                t0.height, t0.width, t1.height, t1.width
            )));
        }
        Ok(Self { t0, t1 })
    }

    pub fn height(&self) -> usize {
        self.t0.height
    }

    pub fn width(&self) -> usize {
        self.t0.width
    }

    pub fn check_bounds(&self, min: usize, max: usize) -> Result<()> {
        let ok = |s: usize| (min..=max).contains(&s);
        if !ok(self.height()) || !ok(self.width()) {
            return Err(Error::Shape(format!(
                "image {}×{} outside supported range {min}–{max}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

fn ingest(path: &Path, reason: impl ToString) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| ingest(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| ingest(path, e))?;
    writer.write_image_data(data).map_err(|e| ingest(path, e))?;
    writer.finish().map_err(|e| ingest(path, e))?;
    Ok(())
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| ingest(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| ingest(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingest(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ingest(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ingest(path, "unexpanded palette image")),
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_png(
        path,
        img.width,
        img.height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &img.pixels,
    )
}

/// Loads any 8-bit PNG as RGB: grey is replicated, alpha is dropped.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let d = read_png(path)?;
    let pixels = match d.channels {
        3 => d.data,
        4 => d
            .data
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        1 => d.data.iter().flat_map(|&g| [g, g, g]).collect(),
        _ => d
            .data
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
    };
    RgbImage::new(d.width, d.height, pixels)
}

/// Single-channel PNG with `{0, 255}`.
pub fn save_label(path: &Path, label: &LabelMap) -> Result<()> {
    let data: Vec<u8> = label.data().iter().map(|&v| v * 255).collect();
    write_png(
        path,
        label.width(),
        label.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
    )
}

/// Reads a `{0, 255}` label image into `{0, 1}`.
pub fn load_label(path: &Path) -> Result<LabelMap> {
    let d = read_png(path)?;
    if d.channels != 1 {
        return Err(ingest(
            path,
            format!(
                "label must be single-channel, found {} channels",
                d.channels
            ),
        ));
    }
    let data = d
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(ingest(
                path,
                format!("label value {other} is neither 0 nor 255"),
            )),
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(d.height, d.width, data)
}

pub fn save_gray(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Shape(format!(
            "grey image {width}×{height} vs {} values",
            values.len()
        )));
    }
    write_png(
        path,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        values,
    )
}

/// 1-bit PNG: white = changed, black = unchanged.
pub fn save_change_map(path: &Path, map: &ChangeMap) -> Result<()> {
    let (h, w) = map.shape();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if map.mask()[y * w + x] == 1 {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(
        path,
        w,
        h,
        png::ColorType::Grayscale,
        png::BitDepth::One,
        &packed,
    )
}

/// Loads one manifest entry; every file must decode at the same size.
pub fn load_pair(entry: &ManifestEntry) -> Result<(ImagePair, LabelMap)> {
    let t0 = load_rgb(&entry.t0)?;
    let t1 = load_rgb(&entry.t1)?;
    let label = load_label(&entry.label)?;
    let dims = [(t0.height, t0.width), (t1.height, t1.width), label.shape()];
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::Ingest {
            path: entry.t0.clone(),
            reason: format!(
                "size mismatch: {} is {}×{}, {} is {}×{}, {} is {}×{}",
                entry.t0.display(),
                dims[0].0,
                dims[0].1,
                entry.t1.display(),
                dims[1].0,
                dims[1].1,
                entry.label.display(),
                dims[2].0,
                dims[2].1
            ),
        });
    }
    Ok((ImagePair::new(t0, t1)?, label))
}
