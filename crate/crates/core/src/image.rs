//! Linear RGB images in `[0, 1]` and binary PPM (P6) I/O.

use std::io::Write;
use std::path::Path;

use crate::mesh::MeshError;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major interleaved RGB.
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, MeshError> {
        let err = |msg: &str| MeshError::Parse {
            line: 0,
            msg: format!("ppm: {msg}"),
        };
        let mut pos = 0usize;
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
                return Err(err("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
        }
        if fields[0] != "P6" {
            return Err(err("expected P6"));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| err("bad header number"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(err("only 8-bit PPM is supported"));
        }
        // single whitespace byte separates the header from the raster
        pos += 1;
        let n = 3 * width as usize * height as usize;
        let raster = bytes.get(pos..pos + n).ok_or_else(|| err("truncated raster"))?;
        Ok(Self {
            width,
            height,
            data: raster.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        let path = path.as_ref();
        let io = |source| MeshError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_ppm()).map_err(io)
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| MeshError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_ppm(&bytes)
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Mean absolute difference over all pixels and channels.
pub fn mean_l1(a: &Image, b: &Image) -> f64 {
    assert!(a.same_size(b), "image size mismatch");
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    sum / a.data.len() as f64
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    assert!(a.same_size(b), "image size mismatch");
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.data.len() as f64
}

pub const PSNR_CAP: f64 = 99.0;

/// PSNR for `[0, 1]` data, capped at [`PSNR_CAP`] for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}
