use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resize of a channel-first `[C,H,W]` buffer with half-pixel
/// centres and edge clamping.
pub fn resize_bilinear(src: &[f64], channels: usize, (h, w): (usize, usize), (th, tw): (usize, usize)) -> Vec<f64> {
    assert_eq!(src.len(), channels * h * w);
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(th, h);
    let xs = axis(tw, w);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut out = Vec::with_capacity(channels * th * tw);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], wx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], wx);
                out.push(lerp(top, bottom, wy));
            }
        }
    }
    out
}

/// Decodes a PNG to `[3,H,W]`, resized to `target` = (H, W).
///
/// Grayscale is promoted to RGB and alpha dropped. With `normalize` the
/// values are scaled to [0,1]; otherwise they stay in [0,255].
pub fn load_image(path: &Path, target: (usize, usize), normalize: bool) -> Result<Tensor> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::config(format!("image target must be positive, got {target:?}")));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let mut planar = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px.0[c] as f64 * scale;
        }
    }
    let data = if (h, w) == target {
        planar
    } else {
        resize_bilinear(&planar, 3, (h, w), target)
    };
    Tensor::new(&[3, target.0, target.1], data)
}
