use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Sample};
use crate::error::{Error, Result};

/// Shape names; the class id of a synthetic sample is its index here.
pub const SHAPES: [&str; 4] = ["বৃত্ত", "বর্গ", "ত্রিভুজ", "রম্বস"];

/// Colour names with their RGB fill.
pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("লাল", [220, 30, 30]),
    ("সবুজ", [30, 160, 60]),
    ("নীল", [30, 70, 220]),
    ("হলুদ", [235, 205, 0]),
    ("বেগুনি", [140, 50, 170]),
    ("কমলা", [245, 130, 0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticOptions {
    /// Side length of the square PNGs.
    pub image_size: u32,
    /// Use a reworded second caption instead of a spacing variant of the first.
    pub paraphrase: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            image_size: 32,
            paraphrase: false,
        }
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        // apex up, base at dy = r
        2 => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
        _ => dx.abs() + dy.abs() <= r,
    }
}

fn render(shape: usize, color: [u8; 3], size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let r = s * rng.gen_range(0.22..0.38);
    let cx = rng.gen_range(r..=s - r);
    let cy = rng.gen_range(r..=s - r);
    RgbImage::from_fn(size, size, |x, y| {
        if inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
            Rgb(color)
        } else {
            Rgb([255, 255, 255])
        }
    })
}

fn captions(color: &str, shape: &str, paraphrase: bool) -> Vec<String> {
    let second = if paraphrase {
        format!("{color} রঙের একটি {shape}।")
    } else {
        format!("একটি {color} {shape} ।")
    };
    vec![format!("একটি {color} {shape}।"), second]
}

/// Writes `n` shape images plus `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    generate_synthetic_dataset_with(n, seed, out_dir, SyntheticOptions::default())
}

pub fn generate_synthetic_dataset_with(
    n: usize,
    seed: u64,
    out_dir: &Path,
    options: SyntheticOptions,
) -> Result<DatasetManifest> {
    if options.image_size < 8 {
        return Err(Error::config("synthetic images need at least 8 pixels per side"));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let shape = i % SHAPES.len();
        let (color_name, rgb) = COLORS[rng.gen_range(0..COLORS.len())];
        let img = render(shape, rgb, options.image_size, &mut rng);
        let rel = format!("images/img_{i:04}.png");
        let path = out_dir.join(&rel);
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        samples.push(Sample {
            image_path: rel,
            class_id: shape,
            captions: captions(color_name, SHAPES[shape], options.paraphrase),
        });
    }
    let manifest = DatasetManifest::new(out_dir, samples);
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
