//! Deterministic mean-colour quantizer producing discrete image tokens.
//!
//! Each patch's per-channel mean is quantized to `q` uniform levels and the
//! three levels are packed as `r * q^2 + g * q + b`, so the codebook size is
//! `q^3`. Single-channel patches use the grey level for all three.

use crate::error::{Error, Result};

/// Levels per channel `q` for a codebook of `image_vocab = q^3` ids.
pub fn codebook_levels(image_vocab: usize) -> Result<usize> {
    let q = (image_vocab as f64).cbrt().round() as usize;
    if q < 2 || q * q * q != image_vocab {
        return Err(Error::Config(format!(
            "image vocabulary {image_vocab} is not the cube of an integer >= 2"
        )));
    }
    Ok(q)
}

/// One token id in `[0, image_vocab)` per patch; `patches` hold
/// `channels` planes each.
pub fn tokenize_image(patches: &[Vec<u8>], channels: usize, image_vocab: usize) -> Result<Vec<u32>> {
    let q = codebook_levels(image_vocab)?;
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("image tokenizer needs 1 or 3 channels, got {channels}")));
    }
    patches
        .iter()
        .map(|patch| {
            if patch.is_empty() || patch.len() % channels != 0 {
                return Err(Error::Shape(format!("patch of {} values for {channels} channels", patch.len())));
            }
            let plane = patch.len() / channels;
            let level = |c: usize| {
                let sum: u64 = patch[c * plane..(c + 1) * plane].iter().map(|&v| u64::from(v)).sum();
                // floor(mean * q / 256) without leaving integers
                ((sum * q as u64) / (256 * plane as u64)).min(q as u64 - 1) as u32
            };
            let (r, g, b) = if channels == 1 { (level(0), level(0), level(0)) } else { (level(0), level(1), level(2)) };
            let q = q as u32;
            Ok(r * q * q + g * q + b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::Image;

    #[test]
    fn codebook_sizes() {
        assert_eq!(codebook_levels(512).unwrap(), 8);
        assert_eq!(codebook_levels(8).unwrap(), 2);
        assert_eq!(codebook_levels(8000).unwrap(), 20);
        assert!(codebook_levels(8192).is_err());
        assert!(codebook_levels(1).is_err());
    }

    #[test]
    fn constant_images() {
        let black = Image::filled(3, 32, 32, &[0]);
        assert_eq!(tokenize_image(&black.patches(16), 3, 512).unwrap(), vec![0; 4]);
        let white = Image::filled(3, 32, 32, &[255]);
        assert_eq!(tokenize_image(&white.patches(16), 3, 512).unwrap(), vec![511; 4]);
    }

    /// Independent route: average every pixel of a patch in floating point
    /// straight from the raster, then quantize.
    fn oracle(img: &Image, p: usize, q: usize) -> Vec<u32> {
        let mut out = vec![];
        for r in 0..img.height / p {
            for c in 0..img.width / p {
                let mut lv = [0u32; 3];
                for (ch, l) in lv.iter_mut().enumerate() {
                    let mut s = 0.0f64;
                    for y in r * p..(r + 1) * p {
                        for x in c * p..(c + 1) * p {
                            s += img.get(ch, y, x) as f64;
                        }
                    }
                    let mean = s / (p * p) as f64;
                    *l = ((mean / 256.0 * q as f64).floor() as u32).min(q as u32 - 1);
                }
                out.push(lv[0] * (q * q) as u32 + lv[1] * q as u32 + lv[2]);
            }
        }
        out
    }

    #[test]
    fn half_black_half_white() {
        let mut img = Image::filled(3, 32, 32, &[0]);
        for ch in 0..3 {
            for y in 0..32 {
                for x in 16..32 {
                    img.set(ch, y, x, 255);
                }
            }
        }
        let expected = oracle(&img, 16, 8);
        assert_eq!(expected, vec![0, 511, 0, 511]);
        assert_eq!(tokenize_image(&img.patches(16), 3, 512).unwrap(), expected);
    }

    #[test]
    fn agrees_with_pixel_oracle_on_noise() {
        let data: Vec<u8> = (0..3 * 48 * 48).map(|i: usize| (i.wrapping_mul(2654435761) >> 7) as u8).collect();
        let img = Image::new(3, 48, 48, data).unwrap();
        for (v, q) in [(8, 2), (64, 4), (512, 8), (8000, 20)] {
            let ids = tokenize_image(&img.patches(16), 3, v).unwrap();
            assert!(ids.iter().all(|&t| (t as usize) < v));
            assert_eq!(ids, oracle(&img, 16, q));
        }
    }
}
