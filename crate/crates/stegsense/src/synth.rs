//! Synthetic grayscale covers: seeded noise shaped by texture-dependent
//! smoothing plus a low-frequency illumination gradient.

use crate::error::{Error, Result};
use crate::image::Image8;
use crate::rng;
use rand::Rng;

/// Texture class of a synthesized cover. Smooth fields hide embedding noise
/// worst; busy fields keep full high-frequency content and are the hardest
/// detection case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Smooth,
    Mixed,
    Busy,
}

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Smooth => "smooth",
            Texture::Mixed => "mixed",
            Texture::Busy => "busy",
        }
    }

    pub fn parse(s: &str) -> Result<Texture> {
        match s {
            "smooth" => Ok(Texture::Smooth),
            "mixed" => Ok(Texture::Mixed),
            "busy" => Ok(Texture::Busy),
            other => Err(Error::Config(format!(
                "unknown texture '{other}' (expected smooth, mixed or busy)"
            ))),
        }
    }

    fn blur_passes(self) -> usize {
        match self {
            Texture::Smooth => 4,
            Texture::Mixed => 1,
            Texture::Busy => 0,
        }
    }

    fn contrast(self) -> f64 {
        match self {
            Texture::Smooth => 25.0,
            Texture::Mixed => 35.0,
            Texture::Busy => 50.0,
        }
    }
}

pub fn synthesize_cover(w: usize, h: usize, seed: u64, texture: Texture) -> Result<Image8> {
    if w < 16 || h < 16 {
        return Err(Error::Config(format!(
            "cover size {w}x{h} below the 16x16 minimum"
        )));
    }
    let mut r = rng::stream(seed);
    let mut field: Vec<f64> = (0..w * h).map(|_| r.gen::<f64>()).collect();
    let grad_x: f64 = r.gen_range(-40.0..40.0);
    let grad_y: f64 = r.gen_range(-40.0..40.0);
    for _ in 0..texture.blur_passes() {
        field = box_blur3(&field, w, h);
    }
    // Blurring collapses the variance, so renormalize before applying the
    // texture contrast; otherwise smooth covers would quantize to a handful
    // of gray levels.
    let n = (w * h) as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    let contrast = texture.contrast();
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64 - 0.5;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64 - 0.5;
            let v = 128.0 + contrast * (field[y * w + x] - mean) / std + grad_x * fx + grad_y * fy;
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image8::new(w, h, pixels)
}

/// One 3x3 box-filter pass with edge replication.
fn box_blur3(field: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += field[sy * w + sx];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

/// Mean absolute horizontal second difference, the roughness statistic used
/// to compare texture classes.
pub fn mean_second_difference(img: &Image8) -> f64 {
    let (w, h) = (img.width(), img.height());
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 1..w - 1 {
            let d = f64::from(img.get(x + 1, y)) - 2.0 * f64::from(img.get(x, y))
                + f64::from(img.get(x - 1, y));
            acc += d.abs();
            count += 1;
        }
    }
    acc / count as f64
}
