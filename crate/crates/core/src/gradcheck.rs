//! Central finite-difference checks of the analytic gradients.
//!
//! The routines here perturb one scalar at a time and re-evaluate the
//! forward computation, so they share no code with the backward passes they
//! check. The `gradcheck` subcommand runs [`run_suite`] and fails when any
//! check exceeds its tolerance.

use rand::Rng;
use serde::Serialize;

use crate::attack::{AttackConfig, PerturbationState, Variant};
use crate::error::Result;
use crate::features::{Architecture, ConvStack, WeightSource};
use crate::objective::{total_objective, ContrastTarget, LossWeights};
use crate::raster::RasterImage;
use crate::rng::prng;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for each index
/// in `indices`.
pub fn central_differences(
    x: &[f64],
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let plus = f(&probe)?;
            probe[i] = x[i] - step;
            let minus = f(&probe)?;
            probe[i] = x[i];
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub degree: usize,
    pub rel_err_a: f64,
    pub rel_err_u: f64,
    pub rel_err_noise: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random 16x16 image kept away from the clamp boundaries.
pub fn interior_image(size: usize, seed: u64) -> RasterImage {
    let mut rng = prng(seed);
    RasterImage::from_fn(size, size, |_, _, _| rng.random_range(0.25..0.75)).expect("valid image")
}

/// Random perturbation state small enough that no pixel touches the clamp.
pub fn random_state(degree: usize, size: usize, seed: u64) -> PerturbationState {
    let mut rng = prng(seed);
    let mut state = PerturbationState::zeros(degree, size, size);
    for a in state.field.coeffs_mut() {
        *a = rng.random_range(-0.05..0.05);
    }
    for u in state.field.offsets_mut() {
        *u = rng.random_range(-0.1..0.1);
    }
    for n in &mut state.noise {
        *n = rng.random_range(-0.03..0.03);
    }
    state
}

/// Compares every analytic gradient of the full attack objective with
/// central differences at one random point.
pub fn check_total_objective(
    stack: &ConvStack,
    variant: Variant,
    degree: usize,
    seed: u64,
    size: usize,
    tolerance: f64,
) -> Result<CheckResult> {
    let img = interior_image(size, seed);
    let state = random_state(degree, size, seed.wrapping_add(1));
    let weights = LossWeights::new(0.3, 0.2)?;
    let cfg = AttackConfig { variant, degree, ..AttackConfig::defaults(variant) };
    let group = [img.clone(), interior_image(size, seed ^ 0x55)];
    let refs = crate::attack::build_reference_set(&cfg, &group, 0)?;
    let target = ContrastTarget::new(stack, &img, &refs)?;
    let eval = total_objective(&state, &target, stack, weights)?;
    let step = 1e-7;

    let mut rng = prng(seed ^ 0x9e37);
    let pick = |len: usize, k: usize, rng: &mut crate::rng::Prng| -> Vec<usize> {
        if len <= k {
            (0..len).collect()
        } else {
            let mut idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..len)).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        }
    };

    let a_idx: Vec<usize> = (0..state.field.coeffs().len()).collect();
    let fd_a = central_differences(state.field.coeffs(), &a_idx, step, |a| {
        let mut s = state.clone();
        s.field.coeffs_mut().copy_from_slice(a);
        Ok(total_objective(&s, &target, stack, weights)?.report.total)
    })?;

    let u_idx = pick(state.field.offsets().len(), 48, &mut rng);
    let fd_u = central_differences(state.field.offsets(), &u_idx, step, |u| {
        let mut s = state.clone();
        s.field.offsets_mut().copy_from_slice(u);
        Ok(total_objective(&s, &target, stack, weights)?.report.total)
    })?;

    let n_idx = pick(state.noise.len(), 48, &mut rng);
    let fd_n = central_differences(&state.noise, &n_idx, step, |n| {
        let mut s = state.clone();
        s.noise.copy_from_slice(n);
        Ok(total_objective(&s, &target, stack, weights)?.report.total)
    })?;

    let gather = |g: &[f64], idx: &[usize]| idx.iter().map(|&i| g[i]).collect::<Vec<_>>();
    let rel_err_a = relative_error(&eval.grad_a, &fd_a);
    let rel_err_u = relative_error(&gather(&eval.grad_u, &u_idx), &fd_u);
    let rel_err_noise = relative_error(&gather(&eval.grad_noise, &n_idx), &fd_n);
    Ok(CheckResult {
        name: format!("total_objective/{}", variant.name()),
        seed,
        degree,
        rel_err_a,
        rel_err_u,
        rel_err_noise,
        tolerance,
        passed: rel_err_a <= tolerance && rel_err_u <= tolerance && rel_err_noise <= tolerance,
    })
}

/// Full-objective gradient suite: 16x16 images, degrees 0..=3, 10 seeds,
/// alternating the single and augment contrast losses.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let stack = ConvStack::build(&Architecture::default(), WeightSource::Seed(crate::rng::sub_seed(seed, "weights")))?;
    let mut results = Vec::new();
    for s in 0..10u64 {
        for degree in 0..=3 {
            let variant = if s % 2 == 0 { Variant::Single } else { Variant::Augment };
            results.push(check_total_objective(&stack, variant, degree, seed.wrapping_add(s * 31 + degree as u64), 16, 1e-3)?);
        }
    }
    Ok(results)
}
