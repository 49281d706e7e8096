//! 8-bit grayscale images and conversions to the tensor domain.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major 8-bit grayscale image. Dimensions are nonzero and
/// `width * height == pixels.len()` always holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Image8> {
        if width == 0 || height == 0 {
            return Err(Error::dim("image", format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::dim(
                "image",
                format!(
                    "{} pixels for {width}x{height} (need {})",
                    pixels.len(),
                    width * height
                ),
            ));
        }
        Ok(Image8 {
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

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Raw 0..255 values as a [1, 1, h, w] tensor (the residual stage expects
    /// unnormalized pixels).
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| f64::from(v)).collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("length matches by invariant")
    }
}

/// Stacks same-sized images into a [n, 1, h, w] batch of raw 0..255 values.
pub fn batch_tensor(images: &[&Image8]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::dim("batch_tensor", "empty image list"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for (i, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::dim(
                "batch_tensor",
                format!(
                    "image {i} is {}x{}, batch is {w}x{h}",
                    img.width(),
                    img.height()
                ),
            ));
        }
        data.extend(img.pixels().iter().map(|&v| f64::from(v)));
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Bilinear resample to a new size. Sample points are pixel centers
/// (align-corners off); out-of-range taps clamp to the edge.
pub fn resize_bilinear(img: &Image8, width: usize, height: usize) -> Result<Image8> {
    if width == 0 || height == 0 {
        return Err(Error::dim(
            "resize",
            format!("empty target {width}x{height}"),
        ));
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    let mut out = Vec::with_capacity(width * height);
    for oy in 0..height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(img.height() - 1);
        let y1 = (y0 + 1).min(img.height() - 1);
        let wy = fy - y0 as f64;
        for ox in 0..width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(img.width() - 1);
            let x1 = (x0 + 1).min(img.width() - 1);
            let wx = fx - x0 as f64;
            let top = f64::from(img.get(x0, y0)) * (1.0 - wx) + f64::from(img.get(x1, y0)) * wx;
            let bot = f64::from(img.get(x0, y1)) * (1.0 - wx) + f64::from(img.get(x1, y1)) * wx;
            let v = top * (1.0 - wy) + bot * wy;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image8::new(width, height, out)
}
