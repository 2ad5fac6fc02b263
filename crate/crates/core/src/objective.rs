//! Attack losses and the assembled objective with its gradients.
//!
//! The contrast losses are the negated mean (over taps) of the per-channel
//! population standard deviation of feature maps; the smoothness loss
//! penalises the squared log exposure and the offset-map total variation.
//! The attack maximises `contrast + smooth`.

use serde::{Deserialize, Serialize};

use crate::attack::PerturbationState;
use crate::error::{Error, Result};
use crate::exposure::ExposureField;
use crate::features::{splice, ConvStack, FeatureStack};
use crate::raster::{RasterImage, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_s: f64,
}

impl LossWeights {
    pub fn new(lambda_b: f64, lambda_s: f64) -> Result<Self> {
        for (key, v) in [("lambda_b", lambda_b), ("lambda_s", lambda_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { lambda_b, lambda_s })
    }
}

/// Objective value breakdown for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub j_contrast: f64,
    pub j_smooth: f64,
    pub total: f64,
    /// Mean channel standard deviation at each tap.
    pub tap_stds: Vec<f64>,
}

/// Smoothness term and its gradients on the coefficients and offsets.
pub fn j_smooth(field: &ExposureField, w: LossWeights) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let log = field.eval_log()?;
    let upstream: Vec<f64> = log.iter().map(|&l| -2.0 * w.lambda_b * l).collect();
    let (grad_a, mut grad_u) = field.backward(&upstream)?;
    let (tv, tv_grad) = field.tv_energy();
    for (g, t) in grad_u.iter_mut().zip(&tv_grad) {
        *g -= w.lambda_s * t;
    }
    let log_energy: f64 = log.iter().map(|l| l * l).sum();
    Ok((-w.lambda_b * log_energy - w.lambda_s * tv, grad_a, grad_u))
}

/// Mean over channels of the population standard deviation of each
/// channel, per tap, and the arithmetic mean of those over taps.
pub fn channel_std_mean(features: &FeatureStack) -> Result<(Vec<f64>, f64)> {
    let mut per_tap = Vec::with_capacity(features.maps.len());
    for (j, m) in features.maps.iter().enumerate() {
        let n = m.height * m.width;
        if n < 2 {
            return Err(Error::ShapeMismatch(format!("tap {j} has {n} spatial element(s); std needs at least 2")));
        }
        let sum: f64 = (0..m.channels).map(|c| channel_stats(m.plane(c)).1).sum();
        per_tap.push(sum / m.channels as f64);
    }
    if per_tap.is_empty() {
        return Err(Error::Empty("feature stack has no taps"));
    }
    let avg = per_tap.iter().sum::<f64>() / per_tap.len() as f64;
    Ok((per_tap, avg))
}

/// `(mean, population std)` by two passes.
fn channel_stats(values: &[f64]) -> (f64, f64) {
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Gradient of the tap-averaged channel std w.r.t. every feature value.
/// A channel with zero spread contributes a zero gradient.
fn channel_std_mean_grad(features: &FeatureStack) -> FeatureStack {
    let taps = features.maps.len() as f64;
    let mut grad = features.zeros_like();
    for (m, g) in features.maps.iter().zip(&mut grad.maps) {
        let n = m.height * m.width;
        let scale = 1.0 / (taps * m.channels as f64 * n as f64);
        for c in 0..m.channels {
            let plane = m.plane(c);
            let (mean, std) = channel_stats(plane);
            if std == 0.0 {
                continue;
            }
            for (gv, v) in g.data[c * n..(c + 1) * n].iter_mut().zip(plane) {
                *gv = scale * (v - mean) / std;
            }
        }
    }
    grad
}

/// Contrast loss against a fixed set of reference images whose features
/// are computed once.
#[derive(Debug, Clone)]
pub struct ContrastTarget {
    clean: RasterImage,
    ref_features: Vec<FeatureStack>,
}

impl ContrastTarget {
    /// References of a different size are resampled (nearest neighbour) to
    /// the clean image's size before feature extraction.
    pub fn new(stack: &ConvStack, clean: &RasterImage, refs: &[RasterImage]) -> Result<Self> {
        let ref_features = refs
            .iter()
            .map(|r| stack.forward(&r.resize_nearest(clean.height(), clean.width())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clean: clean.clone(), ref_features })
    }

    pub fn clean(&self) -> &RasterImage {
        &self.clean
    }

    pub fn reference_count(&self) -> usize {
        self.ref_features.len()
    }

    /// Contrast loss at `img`, the per-tap std means, and the gradient on
    /// `img`. Only the block of the splice belonging to `img` receives
    /// gradient.
    pub fn evaluate(&self, stack: &ConvStack, img: &RasterImage) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let trace = stack.forward_trace(img)?;
        let own = trace.features(stack);
        let mut all = Vec::with_capacity(1 + self.ref_features.len());
        all.push(own.clone());
        all.extend(self.ref_features.iter().cloned());
        let spliced = splice(&all)?;
        let (per_tap, avg) = channel_std_mean(&spliced)?;
        let grad_spliced = channel_std_mean_grad(&spliced);
        // the target occupies the leading rows of every spliced channel
        let mut cot = own.zeros_like();
        for ((c, g), m) in cot.maps.iter_mut().zip(&grad_spliced.maps).zip(&own.maps) {
            let n = m.height * m.width;
            let total = g.height * g.width;
            for ch in 0..m.channels {
                for (dst, src) in c.data[ch * n..(ch + 1) * n].iter_mut().zip(&g.data[ch * total..ch * total + n]) {
                    *dst = -src;
                }
            }
        }
        let grad = stack.backward_trace(&trace, &cot)?;
        Ok((-avg, per_tap, grad))
    }
}

/// Single-image contrast loss and its image gradient.
pub fn j_cons(img: &RasterImage, stack: &ConvStack) -> Result<(f64, Vec<f64>)> {
    j_co_cons(img, &[], stack)
}

/// Group contrast loss over `img` spliced with `refs`; gradient on `img`
/// only. With no references this is exactly [`j_cons`].
pub fn j_co_cons(img: &RasterImage, refs: &[RasterImage], stack: &ConvStack) -> Result<(f64, Vec<f64>)> {
    let target = ContrastTarget::new(stack, img, refs)?;
    let (value, _, grad) = target.evaluate(stack, img)?;
    Ok((value, grad))
}

/// Objective report plus gradients for every parameter group.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub report: ObjectiveReport,
    pub grad_a: Vec<f64>,
    pub grad_u: Vec<f64>,
    pub grad_noise: Vec<f64>,
    /// The clamped perturbed image the contrast loss was evaluated on.
    pub image: RasterImage,
    pub log_exposure: Vec<f64>,
}

/// Perturbed image `clamp(exposure * clean + noise, 0, 1)` and a mask of the
/// entries that were not clamped.
pub fn perturb(clean: &RasterImage, exposure: &[f64], noise: &[f64]) -> Result<(RasterImage, Vec<bool>)> {
    let n = clean.pixels();
    if exposure.len() != n || noise.len() != CHANNELS * n {
        return Err(Error::ShapeMismatch("perturbation does not match image shape".into()));
    }
    let mut data = Vec::with_capacity(CHANNELS * n);
    let mut active = Vec::with_capacity(CHANNELS * n);
    for (i, (&v, &z)) in clean.data().iter().zip(noise).enumerate() {
        let raw = exposure[i % n] * v + z;
        active.push((0.0..=1.0).contains(&raw));
        data.push(raw.clamp(0.0, 1.0));
    }
    Ok((RasterImage::from_clamped(clean.height(), clean.width(), data)?, active))
}

/// Evaluates `contrast(perturb(clean)) + smooth` and the gradients on
/// coefficients, offsets and noise. Clamped entries pass no gradient.
pub fn total_objective(
    state: &PerturbationState,
    target: &ContrastTarget,
    stack: &ConvStack,
    w: LossWeights,
) -> Result<ObjectiveEval> {
    let clean = target.clean();
    let n = clean.pixels();
    let log_exposure = state.field.eval_log()?;
    let exposure: Vec<f64> = log_exposure.iter().map(|l| l.exp()).collect();
    let (image, active) = perturb(clean, &exposure, &state.noise)?;
    let (j_contrast, tap_stds, grad_img) = target.evaluate(stack, &image)?;

    let grad_noise: Vec<f64> = grad_img.iter().zip(&active).map(|(&g, &a)| if a { g } else { 0.0 }).collect();
    // d/d(log exposure) = exposure * sum_c g * clean, plus the smoothness term
    let mut upstream = vec![0.0; n];
    for (i, (&g, &v)) in grad_noise.iter().zip(clean.data()).enumerate() {
        upstream[i % n] += g * v;
    }
    for ((u, &e), &l) in upstream.iter_mut().zip(&exposure).zip(&log_exposure) {
        *u = *u * e - 2.0 * w.lambda_b * l;
    }
    let (grad_a, mut grad_u) = state.field.backward(&upstream)?;
    let (tv, tv_grad) = state.field.tv_energy();
    for (g, t) in grad_u.iter_mut().zip(&tv_grad) {
        *g -= w.lambda_s * t;
    }
    let log_energy: f64 = log_exposure.iter().map(|l| l * l).sum();
    let j_smooth = -w.lambda_b * log_energy - w.lambda_s * tv;
    Ok(ObjectiveEval {
        report: ObjectiveReport { j_contrast, j_smooth, total: j_contrast + j_smooth, tap_stds },
        grad_a,
        grad_u,
        grad_noise,
        image,
        log_exposure,
    })
}
