//! Raster buffers, PNG I/O and bilinear resizing.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Side length every image is brought to before corruption transforms run.
pub const CANONICAL_SIDE: usize = 224;

/// Row-major 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height}x3 image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data).expect("non-empty dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `v / 255` per element.
    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }
}

/// Row-major RGB raster of reals, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "float image {width}x{height}x3 with {} elements",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data).expect("non-empty dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `round(clamp(v) * 255)` per element.
    pub fn to_buffer(&self) -> ImageBuffer {
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::new(self.width, self.height, data).expect("valid dims")
    }

    /// Planar `[3, H, W]` copy of the data.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[plane + p] = px[1];
            out[2 * plane + p] = px[2];
        }
        out
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Decode {
        location: "header chunks (IHDR/PLTE)".into(),
        message: e.to_string(),
    })?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        location: "IHDR".into(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode {
        location: "image data (IDAT)".into(),
        message: e.to_string(),
    })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Channel(format!(
            "bit depth {:?} is not supported, expected 8-bit",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let pixels = match info.color_type {
        png::ColorType::Rgb => {
            let mut out = Vec::with_capacity(w * h * 3);
            for row in buf.chunks(stride).take(h) {
                out.extend_from_slice(&row[..w * 3]);
            }
            out
        }
        png::ColorType::Grayscale => {
            let mut out = Vec::with_capacity(w * h * 3);
            for row in buf.chunks(stride).take(h) {
                for &g in &row[..w] {
                    out.extend_from_slice(&[g, g, g]);
                }
            }
            out
        }
        other => {
            return Err(Error::Channel(format!(
                "color type {other:?} carries alpha or is unsupported"
            )))
        }
    };
    ImageBuffer::new(w, h, pixels)
}

/// Deterministic lossless PNG encoding (fixed compression and filter settings).
pub fn encode_image(img: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Balanced);
        encoder.set_filter(png::Filter::Paeth);
        let mut writer = encoder.write_header().expect("writing to a Vec");
        writer
            .write_image_data(&img.data)
            .expect("buffer length validated at construction");
    }
    out
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { location, message } => Error::Decode {
            location: format!("{} ({location})", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_image(img)).map_err(|e| Error::io(path, e))
}

/// Source coordinate and weights for one output coordinate under
/// half-pixel-centered sampling.
#[inline]
fn sample_axis(out_idx: usize, scale: f64, in_len: usize) -> (usize, usize, f32) {
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = (src - i0 as f64) as f32;
    (i0, i1, frac.clamp(0.0, 1.0))
}

/// Bilinear resize, align-corners disabled: output pixel centers map to
/// `(i + 0.5) * in/out - 0.5` in source coordinates, clamped at the borders.
pub fn resize_bilinear(img: &FloatImage, out_w: usize, out_h: usize) -> FloatImage {
    assert!(out_w >= 1 && out_h >= 1, "resize target must be at least 1x1");
    if out_w == img.width && out_h == img.height {
        return img.clone();
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let xs: Vec<_> = (0..out_w).map(|x| sample_axis(x, sx, img.width)).collect();
    let mut data = vec![0.0f32; out_w * out_h * 3];
    let w = img.width;
    for oy in 0..out_h {
        let (y0, y1, fy) = sample_axis(oy, sy, img.height);
        let row0 = &img.data[y0 * w * 3..(y0 + 1) * w * 3];
        let row1 = &img.data[y1 * w * 3..(y1 + 1) * w * 3];
        let out_row = &mut data[oy * out_w * 3..(oy + 1) * out_w * 3];
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let a = row0[x0 * 3 + c] * (1.0 - fx) + row0[x1 * 3 + c] * fx;
                let b = row1[x0 * 3 + c] * (1.0 - fx) + row1[x1 * 3 + c] * fx;
                out_row[ox * 3 + c] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    FloatImage {
        width: out_w,
        height: out_h,
        data,
    }
}
