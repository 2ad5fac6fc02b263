//! Synthetic groups with a known common object.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::manifest::{ingest_group, GroupManifest};
use crate::raster::{save_image, save_mask, BinaryMask, RasterImage};
use crate::rng::{prng, sub_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    /// Bright disc of radius `size/6` centred in the middle third.
    DiscGroup,
    /// Bright horizontal bar `size/6` tall in the middle third.
    StripeGroup,
}

impl FixtureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disc-group" => Some(Self::DiscGroup),
            "stripe-group" => Some(Self::StripeGroup),
            _ => None,
        }
    }
}

/// Geometry of the planted object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc { cy: f64, cx: f64, radius: f64 },
    Bar { top: usize, left: usize, height: usize, width: usize },
}

impl Shape {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        match *self {
            Shape::Disc { cy, cx, radius } => (r as f64 - cy).hypot(c as f64 - cx) <= radius,
            Shape::Bar { top, left, height, width } => {
                (top..top + height).contains(&r) && (left..left + width).contains(&c)
            }
        }
    }
}

/// One generated image with its exact object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureImage {
    pub stem: String,
    pub shape: Shape,
    pub image: RasterImage,
    pub mask: BinaryMask,
}

const BACKGROUND: [f64; 3] = [0.10, 0.12, 0.16];
const OBJECT: [f64; 3] = [0.92, 0.80, 0.34];

/// Dark background with a faint oriented wave plus per-pixel grain.
fn background(rng: &mut crate::rng::Prng, size: usize) -> Vec<[f64; 3]> {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(6.0..12.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    (0..size * size)
        .map(|p| {
            let (r, c) = ((p / size) as f64, (p % size) as f64);
            let wave = 0.03 * (std::f64::consts::TAU * (c * ca + r * sa) / period).sin();
            let mut px = [0.0; 3];
            for (v, base) in px.iter_mut().zip(BACKGROUND) {
                *v = base + wave + rng.random_range(-0.03..0.03);
            }
            px
        })
        .collect()
}

pub fn generate(kind: FixtureKind, n: usize, size: usize, seed: u64) -> Result<Vec<FixtureImage>> {
    if n < 2 {
        return Err(Error::config("n", "a fixture group needs at least 2 images"));
    }
    if size < 32 {
        return Err(Error::config("size", "fixture images must be at least 32 pixels"));
    }
    let mut rng = prng(sub_seed(seed, "fixture"));
    let s = size as f64;
    (0..n)
        .map(|i| {
            let bg = background(&mut rng, size);
            let tint: Vec<f64> = OBJECT.iter().map(|v| v + rng.random_range(-0.03..0.03)).collect();
            let shape = match kind {
                FixtureKind::DiscGroup => Shape::Disc {
                    cy: rng.random_range(s / 3.0..2.0 * s / 3.0),
                    cx: rng.random_range(s / 3.0..2.0 * s / 3.0),
                    radius: s / 6.0,
                },
                FixtureKind::StripeGroup => Shape::Bar {
                    top: rng.random_range(size / 3..2 * size / 3 - size / 6),
                    left: size / 6,
                    height: size / 6,
                    width: size - 2 * (size / 6),
                },
            };
            let mask = BinaryMask::from_fn(size, size, |r, c| shape.contains(r, c));
            let grain: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.02..0.02)).collect();
            let image = RasterImage::from_fn(size, size, |ch, r, c| {
                let p = r * size + c;
                let v = if mask.data()[p] == 1 { tint[ch] + grain[p] } else { bg[p][ch] };
                v.clamp(0.0, 1.0)
            })?
            .quantized();
            Ok(FixtureImage { stem: format!("{i:03}"), shape, image, mask })
        })
        .collect()
}

/// Writes `images/<stem>.png` and `masks/<stem>.png` under `dir` and
/// returns the ingested manifest.
pub fn make_fixture(kind: FixtureKind, n: usize, size: usize, seed: u64, dir: impl AsRef<Path>) -> Result<GroupManifest> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    for f in generate(kind, n, size, seed)? {
        save_image(&f.image, images.join(format!("{}.png", f.stem)))?;
        save_mask(&f.mask, masks.join(format!("{}.png", f.stem)))?;
    }
    ingest_group(dir)
}
