//! Planar `C x H x W` byte rasters and their two on-disk encodings: binary
//! PPM (`P6`, maxval 255, three channels) and the `LFIMG1` tensor format
//! (magic, then `C`, `H`, `W` as little-endian `u32`, then the planar bytes).

use std::path::Path;

use crate::error::{Error, Result};

const LFIMG_MAGIC: &[u8; 6] = b"LFIMG1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Planar, row-major: `data[(c * height + y) * width + x]`.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Format(format!(
                "raster of {} bytes does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, color: &[u8]) -> Self {
        let mut data = vec![0u8; channels * height * width];
        for (c, plane) in data.chunks_mut(height * width).enumerate() {
            plane.fill(color[c % color.len()]);
        }
        Self { channels, height, width, data }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Nearest-neighbour resize: output pixel `(y, x)` samples source pixel
    /// `(y * H_src / H, x * W_src / W)` in integer arithmetic.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = vec![0u8; self.channels * height * width];
        for c in 0..self.channels {
            for y in 0..height {
                let sy = y * self.height / height;
                for x in 0..width {
                    let sx = x * self.width / width;
                    out[(c * height + y) * width + x] = self.get(c, sy, sx);
                }
            }
        }
        Image { channels: self.channels, height, width, data: out }
    }

    /// Cuts the image into row-major `p x p` patches, each flattened as
    /// `[channel][row][col]`.
    pub fn patches(&self, p: usize) -> Vec<Vec<u8>> {
        let (rows, cols) = (self.height / p, self.width / p);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for col in 0..cols {
                let mut patch = Vec::with_capacity(self.channels * p * p);
                for c in 0..self.channels {
                    for dy in 0..p {
                        let start = (c * self.height + r * p + dy) * self.width + col * p;
                        patch.extend_from_slice(&self.data[start..start + p]);
                    }
                }
                out.push(patch);
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::Format(format!("PPM needs 3 channels, image has {}", self.channels)));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.height * self.width;
        out.reserve(3 * plane);
        for i in 0..plane {
            out.extend_from_slice(&[self.data[i], self.data[plane + i], self.data[2 * plane + i]]);
        }
        Ok(out)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PPM header".into()))?);
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval} is not 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let plane = width * height;
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() != 3 * plane {
            return Err(Error::Format(format!("PPM raster has {} bytes, expected {}", body.len(), 3 * plane)));
        }
        let mut data = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = body[3 * i + c];
            }
        }
        Ok(Image { channels: 3, height, width, data })
    }

    pub fn to_lfimg(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.data.len());
        out.extend_from_slice(LFIMG_MAGIC);
        for v in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_lfimg(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 18 || &bytes[..6] != LFIMG_MAGIC {
            return Err(Error::Format("missing LFIMG1 header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        Image::new(field(0), field(1), field(2), bytes[18..].to_vec())
    }

    /// Decodes either format, sniffing the magic bytes.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        if bytes.starts_with(LFIMG_MAGIC) {
            Image::from_lfimg(bytes)
        } else {
            Image::from_ppm(bytes)
        }
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes PPM for `.ppm` paths and `LFIMG1` otherwise.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => img.to_ppm()?,
        _ => img.to_lfimg(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        let data = (0..3 * 4 * 6).map(|i| (i * 7 % 256) as u8).collect();
        Image::new(3, 4, 6, data).unwrap()
    }

    #[test]
    fn ppm_is_bit_exact() {
        let img = sample();
        let bytes = img.to_ppm().unwrap();
        assert!(bytes.starts_with(b"P6\n6 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 72);
        // first pixel interleaves the three planes
        assert_eq!(&bytes[11..14], &[img.get(0, 0, 0), img.get(1, 0, 0), img.get(2, 0, 0)]);
        assert_eq!(Image::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6 # comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = Image::from_ppm(&bytes).unwrap();
        assert_eq!(img.data, vec![1, 4, 2, 5, 3, 6]);
        assert!(Image::from_ppm(b"P6\n2 1\n65535\n").is_err());
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn lfimg_is_bit_exact() {
        let img = Image::new(1, 2, 2, vec![9, 8, 7, 6]).unwrap();
        let bytes = img.to_lfimg();
        assert_eq!(&bytes[..6], b"LFIMG1");
        assert_eq!(&bytes[6..18], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[18..], &[9, 8, 7, 6]);
        assert_eq!(Image::decode(&bytes).unwrap(), img);
        assert!(Image::from_lfimg(&bytes[..20]).is_err());
    }

    #[test]
    fn nearest_resize_and_patches() {
        let img = Image::new(1, 2, 2, vec![1, 2, 3, 4]).unwrap();
        let big = img.resize_nearest(4, 4);
        assert_eq!(big.data, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        assert_eq!(big.resize_nearest(2, 2), img);
        let p = big.patches(2);
        assert_eq!(p, vec![vec![1; 4], vec![2; 4], vec![3; 4], vec![4; 4]]);
    }
}
