//! Built-in cluster-based co-saliency detector.
//!
//! Pixels of the whole group are clustered jointly on colour plus weighted
//! position. Each cluster gets three cues (colour contrast against the other
//! clusters, closeness to the image centre, and how evenly it is spread
//! over the images of the group); a pixel's saliency is the product of its
//! cluster's cues, min-max normalised per image.
//!
//! Cluster sums are accumulated in fixed point, so reordering the group
//! permutes the output maps bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SaliencyMap;
use crate::raster::{RasterImage, CHANNELS};

pub use crate::metrics::binarize;

/// Weight of the normalised coordinates in the clustering feature.
pub const COORD_WEIGHT: f64 = 0.3;
/// Width of the Gaussian centre prior, in units of the half-diagonal.
pub const SPATIAL_SIGMA: f64 = 0.25;

const DIM: usize = 5;
const FIXED_SCALE: f64 = (1u64 << 40) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub clusters: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { clusters: 6, iterations: 10, seed: 0 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::config("detector_clusters", "must be >= 2"));
        }
        if self.iterations == 0 {
            return Err(Error::config("detector_iterations", "must be >= 1"));
        }
        Ok(())
    }
}

type Feature = [f64; DIM];

fn features(img: &RasterImage) -> Vec<Feature> {
    let (h, w) = (img.height(), img.width());
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    (0..h * w)
        .map(|p| {
            let (r, c) = (p / w, p % w);
            [
                img.channel(0)[p],
                img.channel(1)[p],
                img.channel(2)[p],
                COORD_WEIGHT * norm(c, w),
                COORD_WEIGHT * norm(r, h),
            ]
        })
        .collect()
}

#[inline]
fn dist2(a: &Feature, b: &Feature) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn color_dist(a: &Feature, b: &Feature) -> f64 {
    a[..CHANNELS].iter().zip(&b[..CHANNELS]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Seeded hash of a feature vector's bits; independent of pixel order.
fn feature_hash(f: &Feature, seed: u64) -> u64 {
    f.iter().fold(crate::rng::splitmix64(seed), |h, v| crate::rng::splitmix64(h ^ v.to_bits()))
}

fn lex_less(a: &Feature, b: &Feature) -> bool {
    a.iter().zip(b).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y)
}

/// Farthest-point seeding: the first centre is the pixel with the smallest
/// seeded hash, each next one the pixel farthest from all chosen centres
/// (ties to the lexicographically smaller feature).
fn init_centers(points: &[Feature], k: usize, seed: u64) -> Vec<Feature> {
    let first = points
        .iter()
        .min_by(|a, b| feature_hash(a, seed).cmp(&feature_hash(b, seed)).then_with(|| a.partial_cmp(b).expect("finite")))
        .expect("non-empty");
    let mut centers = vec![*first];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, first)).collect();
    while centers.len() < k {
        let mut best = 0;
        for i in 1..points.len() {
            if nearest[i] > nearest[best] || (nearest[i] == nearest[best] && lex_less(&points[i], &points[best])) {
                best = i;
            }
        }
        let c = points[best];
        centers.push(c);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(dist2(p, &c));
        }
    }
    centers
}

fn assign(points: &[Feature], centers: &[Feature], labels: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let d = dist2(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        *l = best;
        objective += best_d;
    }
    objective
}

/// Lloyd iterations with a fixed count. Returns labels and final centres.
fn kmeans(points: &[Feature], k: usize, iterations: usize, seed: u64) -> (Vec<usize>, Vec<Feature>) {
    let mut centers = init_centers(points, k, seed);
    let mut labels = vec![0; points.len()];
    let mut objective = assign(points, &centers, &mut labels);
    for _ in 0..iterations {
        let mut sums = vec![[0i128; DIM]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += (v * FIXED_SCALE).round() as i128;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                for (cv, sv) in c.iter_mut().zip(s) {
                    *cv = *sv as f64 / FIXED_SCALE / n as f64;
                }
            }
        }
        let next = assign(points, &centers, &mut labels);
        assert!(
            next <= objective * (1.0 + 1e-9) + 1e-9,
            "k-means objective increased from {objective} to {next}"
        );
        objective = next;
    }
    (labels, centers)
}

/// Saliency map for every image of the group, in input order.
pub fn detect_group(cfg: &DetectorConfig, group: &[RasterImage]) -> Result<Vec<SaliencyMap>> {
    cfg.validate()?;
    if group.is_empty() {
        return Err(Error::Empty("detector needs at least one image"));
    }
    let per_image: Vec<Vec<Feature>> = group.iter().map(features).collect();
    let points: Vec<Feature> = per_image.iter().flatten().copied().collect();

    let first = &points[0][..CHANNELS];
    if points.iter().all(|p| &p[..CHANNELS] == first) {
        return Ok(group.iter().map(|g| SaliencyMap::uniform(g.height(), g.width(), 0.5)).collect());
    }

    let k = cfg.clusters.min(points.len());
    let (labels, centers) = kmeans(&points, k, cfg.iterations, cfg.seed);

    // colour contrast
    let mut contrast: Vec<f64> = (0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| color_dist(&centers[i], &centers[j])).sum::<f64>() / (k - 1) as f64)
        .collect();
    let max_contrast = contrast.iter().copied().fold(0.0, f64::max);
    if max_contrast > 0.0 {
        contrast.iter_mut().for_each(|c| *c /= max_contrast);
    }

    // centre prior and per-image occupancy
    let m = group.len();
    let mut dist_sum = vec![0i128; k];
    let mut counts = vec![0usize; k];
    let mut occupancy = vec![vec![0usize; m]; k];
    let mut offset = 0;
    for (i, img) in group.iter().enumerate() {
        let (h, w) = (img.height(), img.width());
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (hy, hx) = ((h as f64 / 2.0).max(0.5), (w as f64 / 2.0).max(0.5));
        for p in 0..h * w {
            let l = labels[offset + p];
            let (dy, dx) = (((p / w) as f64 - cy) / hy, ((p % w) as f64 - cx) / hx);
            dist_sum[l] += ((dy * dy + dx * dx).sqrt() / std::f64::consts::SQRT_2 * FIXED_SCALE).round() as i128;
            counts[l] += 1;
            occupancy[l][i] += 1;
        }
        offset += h * w;
    }
    let spatial: Vec<f64> = (0..k)
        .map(|l| {
            if counts[l] == 0 {
                return 0.0;
            }
            let mean = dist_sum[l] as f64 / FIXED_SCALE / counts[l] as f64;
            (-(mean * mean) / (2.0 * SPATIAL_SIGMA * SPATIAL_SIGMA)).exp()
        })
        .collect();
    let correspondence: Vec<f64> = (0..k)
        .map(|l| {
            if counts[l] == 0 || m == 1 {
                return 1.0;
            }
            let ratios: Vec<f64> = occupancy[l].iter().map(|&n| n as f64 / counts[l] as f64).collect();
            let mean = 1.0 / m as f64;
            let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / m as f64;
            let max_var = (m - 1) as f64 / (m * m) as f64;
            1.0 - var / max_var
        })
        .collect();
    let cue: Vec<f64> = (0..k).map(|l| contrast[l] * spatial[l] * correspondence[l]).collect();

    let mut maps = Vec::with_capacity(m);
    let mut offset = 0;
    for img in group {
        let n = img.pixels();
        let raw: Vec<f64> = labels[offset..offset + n].iter().map(|&l| cue[l]).collect();
        offset += n;
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = if hi > lo { raw.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.5; n] };
        maps.push(SaliencyMap::new(img.height(), img.width(), data)?);
    }
    Ok(maps)
}
