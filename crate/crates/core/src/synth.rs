//! Procedural image corpora for desk-scale runs and tests.
//!
//! Content images are smooth: low-frequency color gradients with a few soft
//! blobs. Style images are textured: stripes, checks or dots over a small
//! random palette, with a little grain.

use std::f32::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;

/// Edge lengths drawn for generated images.
pub const SIZES: [usize; 5] = [64, 80, 96, 112, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Content,
    Style,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|k| a[k] + (b[k] - a[k]) * t)
}

pub fn content_image(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let corners = [color(rng), color(rng), color(rng), color(rng)];
    let blobs: Vec<([f32; 3], f32, f32, f32)> = (0..rng.gen_range(1..4))
        .map(|_| (color(rng), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.12..0.3)))
        .collect();
    let wave = (rng.gen_range(0.5..1.5f32), rng.gen_range(0.0..TAU));
    Image::from_fn(height, width, |r, c| {
        let y = r as f32 / (height - 1) as f32;
        let x = c as f32 / (width - 1) as f32;
        let top = mix(corners[0], corners[1], x);
        let bottom = mix(corners[2], corners[3], x);
        let mut px = mix(top, bottom, y);
        for (col, cy, cx, rad) in &blobs {
            let d2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (rad * rad);
            px = mix(px, *col, 0.8 * (-d2).exp());
        }
        let shade = 0.06 * (TAU * wave.0 * (x + y) + wave.1).sin();
        px.map(|v| (v + shade).clamp(0.0, 1.0))
    })
}

pub fn style_image(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let palette = [color(rng), color(rng), color(rng)];
    let pattern = rng.gen_range(0..3);
    // coarse enough to survive the 8x bottleneck after training-size resizing
    let period = rng.gen_range(8.0..20.0f32);
    let angle = rng.gen_range(0.0..TAU);
    let (sa, ca) = angle.sin_cos();
    let grain = rng.gen_range(0.01..0.04f32);
    let noise: Vec<f32> = (0..height * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Image::from_fn(height, width, |r, c| {
        let (y, x) = (r as f32, c as f32);
        let u = (x * ca + y * sa) / period;
        let v = (-x * sa + y * ca) / period;
        let px = match pattern {
            0 => {
                let t = 0.5 + 0.5 * (TAU * u).sin();
                mix(palette[0], palette[1], t)
            }
            1 => {
                let cell = (u.floor() as i64 + v.floor() as i64).rem_euclid(2);
                if cell == 0 { palette[0] } else { palette[1] }
            }
            _ => {
                let (fu, fv) = (u - u.round(), v - v.round());
                if fu * fu + fv * fv < 0.09 { palette[2] } else { mix(palette[0], palette[1], 0.3) }
            }
        };
        let n = grain * noise[r * width + c];
        px.map(|v| (v + n).clamp(0.0, 1.0))
    })
}

/// Writes `count` PNG images of `kind` into `dir` and returns their paths.
pub fn write_corpus(dir: impl AsRef<Path>, kind: SynthKind, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let h = SIZES[rng.gen_range(0..SIZES.len())];
        let w = SIZES[rng.gen_range(0..SIZES.len())];
        let img = match kind {
            SynthKind::Content => content_image(h, w, &mut rng)?,
            SynthKind::Style => style_image(h, w, &mut rng)?,
        };
        let path = dir.join(format!("{i:03}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_seeded_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_corpus(dir.path().join("a"), SynthKind::Style, 3, 5).unwrap();
        let b = write_corpus(dir.path().join("b"), SynthKind::Style, 3, 5).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
            let img = Image::load(pa).unwrap();
            assert!(SIZES.contains(&img.height()) && SIZES.contains(&img.width()));
        }
    }

    #[test]
    fn content_is_smoother_than_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let roughness = |img: &Image| {
            let mut s = 0.0;
            for r in 0..img.height() {
                for c in 1..img.width() {
                    s += (img.pixel(r, c)[0] - img.pixel(r, c - 1)[0]).abs();
                }
            }
            s / (img.height() * img.width()) as f32
        };
        let c = content_image(64, 64, &mut rng).unwrap();
        let s = style_image(64, 64, &mut rng).unwrap();
        assert!(roughness(&c) * 4.0 < roughness(&s), "{} vs {}", roughness(&c), roughness(&s));
    }
}
