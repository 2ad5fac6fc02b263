//! Momentum sign-gradient ascent over exposure coefficients, offsets and
//! additive noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::ExposureField;
use crate::features::{augment_references, ConvStack};
use crate::objective::{perturb, total_objective, ContrastTarget, LossWeights};
use crate::raster::{RasterImage, CHANNELS};

/// Which reference set anchors the contrast loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No references: single-image contrast.
    Single,
    /// The other images of the group.
    Group,
    /// Four flips/rotations of the target.
    Augment,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::Group => "group",
            Variant::Augment => "augment",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(Variant::Single),
            "group" => Some(Variant::Group),
            "augment" => Some(Variant::Augment),
            _ => None,
        }
    }

    /// Default squared-log-exposure weight for this variant.
    pub fn default_lambda_b(self) -> f64 {
        match self {
            Variant::Single => 0.5,
            Variant::Group | Variant::Augment => 0.01,
        }
    }
}

/// Attack hyperparameters. Pixel-valued quantities (`epsilon`, `alpha_n`)
/// are on the `[0, 1]` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub alpha_a: f64,
    pub alpha_u: f64,
    pub alpha_n: f64,
    pub epsilon: f64,
    pub mu: f64,
    pub degree: usize,
    pub lambda_b: f64,
    pub lambda_s: f64,
    pub enable_noise: bool,
    pub enable_exposure: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Standard settings: 20 iterations, eps 16/255, degree 10.
    pub fn defaults(variant: Variant) -> Self {
        Self {
            variant,
            iterations: 20,
            alpha_a: 0.1,
            alpha_u: 0.01,
            alpha_n: 1.0 / 255.0,
            epsilon: 16.0 / 255.0,
            mu: 1.0,
            degree: 10,
            lambda_b: variant.default_lambda_b(),
            lambda_s: 0.01,
            enable_noise: true,
            enable_exposure: true,
            seed: 0,
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_b, self.lambda_s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if !(self.epsilon.is_finite() && (0.0..=1.0).contains(&self.epsilon)) {
            return Err(Error::config("epsilon", format!("must lie in [0, 255] pixel units, got {}", self.epsilon * 255.0)));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::config("mu", format!("must be finite and >= 0, got {}", self.mu)));
        }
        let steps = [
            ("alpha_a", self.alpha_a, self.enable_exposure),
            ("alpha_u", self.alpha_u, self.enable_exposure),
            ("alpha_n", self.alpha_n, self.enable_noise),
        ];
        for (key, v, enabled) in steps {
            if !v.is_finite() || v < 0.0 || (enabled && v == 0.0) {
                return Err(Error::config(key, format!("must be > 0 when its parameter group is enabled, got {v}")));
            }
        }
        self.weights()?;
        Ok(())
    }
}

/// Optimisable parameters and their momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    pub field: ExposureField,
    /// Additive noise, channel-major like the image.
    pub noise: Vec<f64>,
    pub momentum_a: Vec<f64>,
    pub momentum_u: Vec<f64>,
    pub momentum_noise: Vec<f64>,
}

impl PerturbationState {
    pub fn zeros(degree: usize, height: usize, width: usize) -> Self {
        let field = ExposureField::zeros(degree, height, width);
        let n = height * width;
        Self {
            momentum_a: vec![0.0; field.coeffs().len()],
            momentum_u: vec![0.0; 2 * n],
            momentum_noise: vec![0.0; CHANNELS * n],
            noise: vec![0.0; CHANNELS * n],
            field,
        }
    }

    pub fn max_abs_noise(&self) -> f64 {
        self.noise.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `clamp(exposure * img + noise, 0, 1)`.
    pub fn apply(&self, img: &RasterImage) -> Result<RasterImage> {
        if self.field.height() != img.height() || self.field.width() != img.width() {
            return Err(Error::ShapeMismatch("perturbation state and image differ in size".into()));
        }
        Ok(perturb(img, &self.field.eval()?, &self.noise)?.0)
    }
}

/// All-zero state; applying it returns `img` unchanged.
pub fn init_state(cfg: &AttackConfig, img: &RasterImage) -> PerturbationState {
    PerturbationState::zeros(cfg.degree, img.height(), img.width())
}

/// Reference images for attacking `group[target]`.
pub fn build_reference_set(cfg: &AttackConfig, group: &[RasterImage], target: usize) -> Result<Vec<RasterImage>> {
    let img = group.get(target).ok_or_else(|| Error::Group(format!("target index {target} outside group of {}", group.len())))?;
    Ok(match cfg.variant {
        Variant::Single => Vec::new(),
        Variant::Augment => augment_references(img),
        Variant::Group => {
            if group.len() < 2 {
                return Err(Error::Group("group variant needs at least one other image in the group".into()));
            }
            group.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, g)| g.clone()).collect()
        }
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `m <- mu*m + g/|g|_1; p <- p + alpha*sign(m)`.
fn momentum_ascent(name: &'static str, param: &mut [f64], momentum: &mut [f64], grad: &[f64], mu: f64, alpha: f64) -> Result<()> {
    if param.len() != grad.len() || momentum.len() != grad.len() {
        return Err(Error::ShapeMismatch(format!("gradient for `{name}` has {} entries, parameter {}", grad.len(), param.len())));
    }
    let l1: f64 = grad.iter().map(|g| g.abs()).sum();
    if !l1.is_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let inv = if l1 > 0.0 { 1.0 / l1 } else { 0.0 };
    for ((p, m), g) in param.iter_mut().zip(momentum.iter_mut()).zip(grad) {
        *m = mu * *m + g * inv;
        *p += alpha * sign(*m);
    }
    Ok(())
}

/// One ascent step on every enabled parameter group, then projection of
/// the noise onto the `epsilon` L-infinity ball.
pub fn step(state: &mut PerturbationState, grad_a: &[f64], grad_u: &[f64], grad_noise: &[f64], cfg: &AttackConfig) -> Result<()> {
    for (name, g) in [("a", grad_a), ("u", grad_u), ("noise", grad_noise)] {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    if cfg.enable_exposure {
        momentum_ascent("a", state.field.coeffs_mut(), &mut state.momentum_a, grad_a, cfg.mu, cfg.alpha_a)?;
        momentum_ascent("u", state.field.offsets_mut(), &mut state.momentum_u, grad_u, cfg.mu, cfg.alpha_u)?;
    }
    if cfg.enable_noise {
        momentum_ascent("noise", &mut state.noise, &mut state.momentum_noise, grad_noise, cfg.mu, cfg.alpha_n)?;
        for v in &mut state.noise {
            *v = v.clamp(-cfg.epsilon, cfg.epsilon);
        }
    }
    Ok(())
}

/// Per-iteration trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub j_contrast: f64,
    pub j_smooth: f64,
    pub total: f64,
    pub max_abs_noise: f64,
    pub max_abs_log_exposure: f64,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub image: RasterImage,
    pub trace: Vec<TraceEntry>,
    pub state: PerturbationState,
}

impl AttackOutcome {
    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|t| serde_json::to_string(t).expect("trace serialises") + "\n").collect()
    }
}

/// Runs `cfg.iterations` objective evaluations and ascent steps on
/// `group[target]`; the rest of the group is used only as references.
pub fn run_attack(cfg: &AttackConfig, stack: &ConvStack, group: &[RasterImage], target: usize) -> Result<AttackOutcome> {
    cfg.validate()?;
    let refs = build_reference_set(cfg, group, target)?;
    let img = &group[target];
    let contrast = ContrastTarget::new(stack, img, &refs)?;
    let weights = cfg.weights()?;
    let mut state = init_state(cfg, img);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let diverged = |iteration: usize| move |e: Error| Error::AttackDiverged { iteration, source: Box::new(e) };
    for iter in 0..cfg.iterations {
        let eval = total_objective(&state, &contrast, stack, weights).map_err(diverged(iter))?;
        trace.push(TraceEntry {
            iter,
            j_contrast: eval.report.j_contrast,
            j_smooth: eval.report.j_smooth,
            total: eval.report.total,
            max_abs_noise: state.max_abs_noise(),
            max_abs_log_exposure: eval.log_exposure.iter().fold(0.0, |m, v| m.max(v.abs())),
        });
        step(&mut state, &eval.grad_a, &eval.grad_u, &eval.grad_noise, cfg).map_err(diverged(iter))?;
    }
    let image = state.apply(img).map_err(diverged(cfg.iterations))?;
    Ok(AttackOutcome { image, trace, state })
}

/// Adds independent `U(-epsilon, epsilon)` noise to every channel of every
/// pixel and clamps to `[0, 1]`.
pub fn random_noise_baseline(img: &RasterImage, epsilon: f64, seed: u64) -> Result<RasterImage> {
    if !(epsilon.is_finite() && (0.0..=1.0).contains(&epsilon)) {
        return Err(Error::config("noise_baseline_epsilon", format!("must lie in [0, 1], got {epsilon}")));
    }
    let mut rng = crate::rng::prng(seed);
    let data = img.data().iter().map(|&v| v + epsilon * (2.0 * rng.random::<f64>() - 1.0)).collect();
    RasterImage::from_clamped(img.height(), img.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Architecture, WeightSource};
    use crate::rng::prng;

    fn image(n: usize, seed: u64) -> RasterImage {
        let mut rng = prng(seed);
        RasterImage::from_fn(n, n, |_, _, _| rng.random::<f64>()).unwrap()
    }

    fn small_cfg(variant: Variant) -> AttackConfig {
        AttackConfig { iterations: 4, degree: 3, ..AttackConfig::defaults(variant) }
    }

    fn stack() -> ConvStack {
        ConvStack::build(&Architecture::default(), WeightSource::Seed(2)).unwrap()
    }

    #[test]
    fn init_is_identity() {
        let img = image(16, 1);
        let mut cfg = small_cfg(Variant::Augment);
        let a = init_state(&cfg, &img);
        assert_eq!(a.apply(&img).unwrap(), img);
        cfg.seed = 99;
        assert_eq!(init_state(&cfg, &img), a);
    }

    #[test]
    fn reference_sets() {
        let group: Vec<_> = (0..5).map(|s| image(16, s)).collect();
        let cfg = |v| small_cfg(v);
        assert!(build_reference_set(&cfg(Variant::Single), &group, 2).unwrap().is_empty());
        assert_eq!(build_reference_set(&cfg(Variant::Augment), &group[..1], 0).unwrap().len(), 4);
        let refs = build_reference_set(&cfg(Variant::Group), &group, 2).unwrap();
        assert_eq!(refs, vec![group[0].clone(), group[1].clone(), group[3].clone(), group[4].clone()]);
        assert!(matches!(build_reference_set(&cfg(Variant::Group), &group[..1], 0), Err(Error::Group(_))));
    }

    #[test]
    fn zero_gradient_step_is_noop() {
        let cfg = small_cfg(Variant::Single);
        let mut s = PerturbationState::zeros(3, 8, 8);
        let before = s.clone();
        let (na, nu, nn) = (s.field.coeffs().len(), s.field.offsets().len(), s.noise.len());
        step(&mut s, &vec![0.0; na], &vec![0.0; nu], &vec![0.0; nn], &cfg).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn positive_gradient_moves_noise_by_alpha() {
        let cfg = small_cfg(Variant::Single);
        let mut s = PerturbationState::zeros(3, 8, 8);
        let (na, nu, nn) = (s.field.coeffs().len(), s.field.offsets().len(), s.noise.len());
        step(&mut s, &vec![0.0; na], &vec![0.0; nu], &vec![0.5; nn], &cfg).unwrap();
        assert!(s.noise.iter().all(|&v| v == cfg.alpha_n));
    }

    #[test]
    fn noise_stays_in_ball() {
        let cfg = AttackConfig { alpha_n: 0.05, epsilon: 0.07, ..small_cfg(Variant::Single) };
        let mut s = PerturbationState::zeros(1, 8, 8);
        let mut rng = prng(3);
        let (na, nu, nn) = (s.field.coeffs().len(), s.field.offsets().len(), s.noise.len());
        for _ in 0..10 {
            let g: Vec<f64> = (0..nn).map(|_| rng.random_range(-1.0..1.0)).collect();
            step(&mut s, &vec![0.0; na], &vec![0.0; nu], &g, &cfg).unwrap();
            assert!(s.max_abs_noise() <= cfg.epsilon);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let cfg = small_cfg(Variant::Single);
        let mut s = PerturbationState::zeros(1, 8, 8);
        let (na, nu, nn) = (s.field.coeffs().len(), s.field.offsets().len(), s.noise.len());
        let mut g = vec![0.0; nn];
        g[3] = f64::NAN;
        assert!(matches!(step(&mut s, &vec![0.0; na], &vec![0.0; nu], &g, &cfg), Err(Error::NonFiniteGradient("noise"))));
    }

    #[test]
    fn disabled_groups_leave_input_unchanged() {
        let cfg = AttackConfig { enable_noise: false, enable_exposure: false, ..small_cfg(Variant::Augment) };
        let img = image(16, 4);
        let out = run_attack(&cfg, &stack(), std::slice::from_ref(&img), 0).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.trace.len(), cfg.iterations);
    }

    #[test]
    fn ablations_freeze_their_group() {
        let img = image(16, 5);
        let s = stack();
        let no_exp = run_attack(&AttackConfig { enable_exposure: false, ..small_cfg(Variant::Augment) }, &s, std::slice::from_ref(&img), 0).unwrap();
        assert!(no_exp.state.field.eval().unwrap().iter().all(|&e| e == 1.0));
        assert!(no_exp.state.max_abs_noise() > 0.0);
        let no_noise = run_attack(&AttackConfig { enable_noise: false, ..small_cfg(Variant::Augment) }, &s, std::slice::from_ref(&img), 0).unwrap();
        assert!(no_noise.state.noise.iter().all(|&v| v == 0.0));
        assert!(no_noise.state.field.coeffs().iter().any(|&a| a != 0.0));
    }

    #[test]
    fn attack_is_deterministic_and_bounded() {
        let group: Vec<_> = (0..3).map(|s| image(16, 10 + s)).collect();
        let cfg = small_cfg(Variant::Group);
        let a = run_attack(&cfg, &stack(), &group, 1).unwrap();
        let b = run_attack(&cfg, &stack(), &group, 1).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.trace.iter().all(|t| t.max_abs_noise <= cfg.epsilon));
        assert!(a.state.max_abs_noise() <= cfg.epsilon);
        let line = a.trace_jsonl();
        assert_eq!(line.lines().count(), cfg.iterations);
        assert!(line.starts_with("{\"iter\":0,"));
    }

    #[test]
    fn divergence_reports_iteration() {
        let cfg = AttackConfig { alpha_a: 20.0, iterations: 5, degree: 0, lambda_b: 0.0, ..small_cfg(Variant::Single) };
        let err = run_attack(&cfg, &stack(), &[image(16, 6)], 0).unwrap_err();
        assert!(matches!(err, Error::AttackDiverged { .. }), "{err}");
    }

    #[test]
    fn baseline_noise() {
        let img = image(16, 7);
        assert_eq!(random_noise_baseline(&img, 0.0, 1).unwrap(), img);
        let a = random_noise_baseline(&img, 16.0 / 255.0, 1).unwrap();
        assert_eq!(a, random_noise_baseline(&img, 16.0 / 255.0, 1).unwrap());
        assert_ne!(a, random_noise_baseline(&img, 16.0 / 255.0, 2).unwrap());
        for (x, y) in a.data().iter().zip(img.data()) {
            assert!((x - y).abs() <= 16.0 / 255.0 + 1e-15);
        }
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = AttackConfig { iterations: 0, ..AttackConfig::defaults(Variant::Single) };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "iterations"));
        let cfg = AttackConfig { alpha_n: 0.0, ..AttackConfig::defaults(Variant::Single) };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "alpha_n"));
        let cfg = AttackConfig { alpha_n: 0.0, enable_noise: false, ..AttackConfig::defaults(Variant::Single) };
        assert!(cfg.validate().is_ok());
    }
}
