//! Image preprocessing: fit onto the model canvas and normalize.

use image::RgbImage;
use ndarray::IxDyn;

use crate::tensor::Array;

use super::{ModelConfig, ModelError};

// Fixed document-image statistics; preprocessing must not depend on the
// dataset so checkpoints stay self-describing.
const MEAN: f64 = 0.5;
const STD: f64 = 0.5;

/// Scales the image to fit the canvas preserving aspect ratio (bilinear),
/// centers it on a white field, and normalizes channels. Output is
/// `[3, canvas_h, canvas_w]`.
pub fn preprocess_image(img: &RgbImage, cfg: &ModelConfig) -> Array {
    let (ch, cw) = (cfg.canvas_height, cfg.canvas_width);
    let (h, w) = (img.height() as usize, img.width() as usize);
    let scale = (ch as f64 / h as f64).min(cw as f64 / w as f64).min(1.0);
    let th = ((h as f64 * scale).round() as usize).clamp(1, ch);
    let tw = ((w as f64 * scale).round() as usize).clamp(1, cw);
    let resized = bilinear_resize(img, tw, th);
    let (off_y, off_x) = ((ch - th) / 2, (cw - tw) / 2);

    let mut out = Array::from_elem(IxDyn(&[3, ch, cw]), (1.0 - MEAN) / STD);
    for y in 0..th {
        for x in 0..tw {
            let px = resized[(y, x)];
            for c in 0..3 {
                let v = px[c] / 255.0;
                out[[c, off_y + y, off_x + x]] = (v - MEAN) / STD;
            }
        }
    }
    out
}

fn bilinear_resize(img: &RgbImage, tw: usize, th: usize) -> Vec2d {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec2d::new(th, tw);
    for y in 0..th {
        // map target pixel centers into source coordinates
        let sy = ((y as f64 + 0.5) * h as f64 / th as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..tw {
            let sx = ((x as f64 + 0.5) * w as f64 / tw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let mut px = [0.0f64; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let p00 = img.get_pixel(x0 as u32, y0 as u32)[c] as f64;
                let p01 = img.get_pixel(x1 as u32, y0 as u32)[c] as f64;
                let p10 = img.get_pixel(x0 as u32, y1 as u32)[c] as f64;
                let p11 = img.get_pixel(x1 as u32, y1 as u32)[c] as f64;
                *slot = p00 * (1.0 - fx) * (1.0 - fy)
                    + p01 * fx * (1.0 - fy)
                    + p10 * (1.0 - fx) * fy
                    + p11 * fx * fy;
            }
            out.set(y, x, px);
        }
    }
    out
}

pub(crate) struct Vec2d {
    data: Vec<[f64; 3]>,
    cols: usize,
}

impl Vec2d {
    fn new(rows: usize, cols: usize) -> Self {
        Vec2d {
            data: vec![[0.0; 3]; rows * cols],
            cols,
        }
    }

    fn set(&mut self, r: usize, c: usize, v: [f64; 3]) {
        self.data[r * self.cols + c] = v;
    }
}

impl std::ops::Index<(usize, usize)> for Vec2d {
    type Output = [f64; 3];
    fn index(&self, (r, c): (usize, usize)) -> &Self::Output {
        &self.data[r * self.cols + c]
    }
}

/// Stacks per-image `[3, H, W]` arrays into a `[B, 3, H, W]` batch.
pub fn batch_images(images: &[Array]) -> Result<Array, ModelError> {
    let first = images
        .first()
        .ok_or_else(|| ModelError::ShapeError("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut out = Array::zeros(IxDyn(&[
        images.len(),
        shape[0],
        shape[1],
        shape[2],
    ]));
    for (i, img) in images.iter().enumerate() {
        if img.shape() != shape.as_slice() {
            return Err(ModelError::ShapeError(
                "inconsistent image shapes in batch".into(),
            ));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    Ok(out)
}
