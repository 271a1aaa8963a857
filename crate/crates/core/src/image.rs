//! RGB float images and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Degenerate(format!("image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::dim(
                "image",
                format!(
                    "{width}x{height}x3 needs {} values, got {}",
                    width * height * 3,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Image {
            width,
            height,
            data,
        }
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Sub-image `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::dim(
                "crop",
                format!(
                    "window {w}x{h} at ({x0},{y0}) outside {}x{}",
                    self.width, self.height
                ),
            ));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image::new(w, h, data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::Degenerate(format!("resize to {width}x{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let taps = |out: usize, scale: f64, len: usize| {
            let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let t = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, t)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let (y0, y1, ty) = taps(y, sy, self.height);
            for &(x0, x1, tx) in &xs {
                let p00 = self.get(x0, y0);
                let p10 = self.get(x1, y0);
                let p01 = self.get(x0, y1);
                let p11 = self.get(x1, y1);
                for c in 0..3 {
                    let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
                    let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                    data.push((top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        Image::new(width, height, data)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("expected P6 magic, got {:?}", fields[0]));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| format!("bad header field {s:?}"))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = w * h * 3;
        if bytes.len() < pos + n {
            return Err(format!("raster truncated: need {n} bytes"));
        }
        let scale = maxval as f32;
        let data = bytes[pos..pos + n]
            .iter()
            .map(|&b| b as f32 / scale)
            .collect();
        Image::new(w, h, data).map_err(|e| e.to_string())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_ppm(&bytes).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg,
        })
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut s = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                s[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        s.map(|v| v / n)
    }
}
