//! RGB float images and 8-bit PNG persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use kinelift_autograd::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Interleaved RGB image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn from_rgb(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                m[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        m.map(|v| v / n)
    }

    /// Snap every value to the nearest 8-bit level so PNG storage is lossless.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    /// Planar `[3, H, W]` tensor.
    pub fn to_chw<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = T::lit(self.data[p * 3 + c] as f64);
            }
        }
        Tensor::new(&[3, self.height, self.width], out)
    }

    /// From a planar `[3, H, W]` buffer, clamping into `[0, 1]`.
    pub fn from_chw<T: Scalar>(height: usize, width: usize, planar: &[T]) -> Result<Image> {
        let plane = height * width;
        if planar.len() != 3 * plane {
            return Err(Error::Shape(format!("expected 3x{height}x{width} values, got {}", planar.len())));
        }
        let mut data = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let v = planar[c * plane + p].as_f64();
                data[p * 3 + c] = if v.is_finite() { v.clamp(0.0, 1.0) as f32 } else { 0.0 };
            }
        }
        Ok(Image { height, width, data })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer.finish().map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!("{}: only 8-bit images are supported", path.display())));
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let bytes = &buf[..info.buffer_size()];
        let data: Vec<f32> = match info.color_type {
            png::ColorType::Rgb => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            png::ColorType::Rgba => bytes
                .chunks(4)
                .flat_map(|px| px[..3].iter().map(|&b| b as f32 / 255.0).collect::<Vec<_>>())
                .collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&b| [b as f32 / 255.0; 3]).collect(),
            other => return Err(Error::Format(format!("{}: unsupported color type {other:?}", path.display()))),
        };
        Image::from_rgb(h, w, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
