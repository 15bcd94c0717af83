//! PNG round-trips between [0,1] f64 tensors and 8-bit files. Lossless and
//! deterministic: the same tensor always produces the same bytes, and loading
//! recovers exactly the quantized levels k/255.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a [3,H,W] tensor as RGB PNG.
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            context: "save_rgb",
            expected: vec![3, 0, 0],
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                quantize_u8(img.at3(0, y, x)),
                quantize_u8(img.at3(1, y, x)),
                quantize_u8(img.at3(2, y, x)),
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out.save(path)?;
    Ok(())
}

/// Load an RGB PNG as a [3,H,W] tensor with values k/255.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set3(c, y, x, px.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Save an [H,W] mask as grayscale PNG (0 or 255 for binary masks).
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            context: "save_mask",
            expected: vec![0, 0],
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[0], s[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([quantize_u8(mask.at2(y, x))]));
        }
    }
    out.save(path)?;
    Ok(())
}

/// Load a grayscale PNG as an [H,W] tensor with values k/255.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set2(y, x, img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip_is_exact_on_quantized_values() {
        let dir = std::env::temp_dir().join("portraitlab_imageio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.png");

        let mut img = Tensor::zeros(&[3, 4, 5]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 13) % 256) as f64 / 255.0;
        }
        save_rgb(&path, &img).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(img.shape(), back.shape());
        assert!(img.sub(&back).unwrap().max_abs() < 1e-12);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn mask_roundtrip() {
        let dir = std::env::temp_dir().join("portraitlab_imageio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.png");

        let mut mask = Tensor::zeros(&[3, 3]);
        mask.set2(1, 1, 1.0);
        save_mask(&path, &mask).unwrap();
        let back = load_mask(&path).unwrap();
        assert!(mask.sub(&back).unwrap().max_abs() < 1e-12);
        std::fs::remove_file(&path).ok();
    }
}
