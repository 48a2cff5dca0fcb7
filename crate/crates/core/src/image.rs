//! 8-bit RGB images: PNG I/O, resizing and conversion to encoder tensors.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} bytes for a {width}x{height} RGB image", data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` tensor scaled to [-1, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(vec![3, h, w], |i| {
            let (c, rest) = (i / (w * h), i % (w * h));
            self.data[rest * 3 + c] as f32 / 127.5 - 1.0
        })
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3, H, W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let mut data = vec![0u8; w * h * 3];
        for c in 0..3 {
            for p in 0..w * h {
                let v = (t.data()[c * w * h + p] + 1.0) * 127.5;
                data[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage::new(w, h, data)
    }

    /// Center-crops to a square, then resamples to `size` with bilinear
    /// interpolation (identity when already `size` square).
    pub fn center_crop_resize(&self, size: usize) -> RgbImage {
        let side = self.width.min(self.height);
        let (x0, y0) = ((self.width - side) / 2, (self.height - side) / 2);
        if side == size {
            let mut out = RgbImage::filled(size, size, [0; 3]);
            for y in 0..size {
                for x in 0..size {
                    out.set_pixel(x, y, self.pixel(x0 + x, y0 + y));
                }
            }
            return out;
        }
        let scale = side as f64 / size as f64;
        let mut out = RgbImage::filled(size, size, [0; 3]);
        for y in 0..size {
            for x in 0..size {
                let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
                let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
                let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
                let (fx, fy) = (sx - ix as f64, sy - iy as f64);
                let (jx, jy) = ((ix + 1).min(side - 1), (iy + 1).min(side - 1));
                let mut rgb = [0u8; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let p = |x: usize, y: usize| self.pixel(x0 + x, y0 + y)[c] as f64;
                    let top = p(ix, iy) * (1.0 - fx) + p(jx, iy) * fx;
                    let bot = p(ix, jy) * (1.0 - fx) + p(jx, jy) * fx;
                    *v = (top * (1.0 - fy) + bot * fy).round() as u8;
                }
                out.set_pixel(x, y, rgb);
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Format { path: "<png>".into(), reason: e.to_string() })?;
            w.write_image_data(&self.data)
                .map_err(|e| Error::Format { path: "<png>".into(), reason: e.to_string() })?;
        }
        Ok(buf)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        Self::decode_from(std::io::Cursor::new(bytes), Path::new("<png>"))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let mut f = BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        std::io::Write::write_all(&mut f, &bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode_from(BufReader::new(f), path)
    }

    fn decode_from<R: std::io::BufRead + std::io::Seek>(r: R, path: &Path) -> Result<Self> {
        let bad = |e: png::DecodingError| Error::format(path, e.to_string());
        let mut dec = png::Decoder::new(r);
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(bad)?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let data: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
        };
        RgbImage::new(w, h, data)
    }
}
