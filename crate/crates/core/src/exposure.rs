//! Locally-offset polynomial exposure model.
//!
//! The log exposure at pixel `p` is
//! `sum_{d+l<=D} a[d,l] * (x_p + u_p)^d * (y_p + v_p)^l`, where `(x_p, y_p)`
//! are pixel coordinates normalised to `[-1, 1]` per axis and `(u_p, v_p)`
//! is a per-pixel offset. Coefficients are stored in `(d, l)` lexicographic
//! order. One field is shared by all colour channels.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Largest `|log exposure|` accepted before a field is declared divergent.
pub const LOG_EXPOSURE_LIMIT: f64 = 30.0;

/// Number of monomials `x^d y^l` with `d + l <= degree`.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

/// Position of `a[d,l]` in the coefficient vector.
#[inline]
pub const fn coeff_index(degree: usize, d: usize, l: usize) -> usize {
    d * (degree + 1) - d * (d.saturating_sub(1)) / 2 + l
}

/// Normalised coordinate of index `i` along an axis of length `n`.
#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureField {
    degree: usize,
    height: usize,
    width: usize,
    coeffs: Vec<f64>,
    /// `u` plane followed by `v` plane, row-major, `2 * height * width` long.
    offsets: Vec<f64>,
}

impl ExposureField {
    /// Identity field: all coefficients and offsets zero.
    pub fn zeros(degree: usize, height: usize, width: usize) -> Self {
        Self {
            degree,
            height,
            width,
            coeffs: vec![0.0; coeff_count(degree)],
            offsets: vec![0.0; 2 * height * width],
        }
    }

    pub fn from_parts(degree: usize, height: usize, width: usize, coeffs: Vec<f64>, offsets: Vec<f64>) -> Result<Self> {
        if coeffs.len() != coeff_count(degree) {
            return Err(Error::ShapeMismatch(format!(
                "degree {degree} needs {} coefficients, got {}",
                coeff_count(degree),
                coeffs.len()
            )));
        }
        if offsets.len() != 2 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} field needs {} offsets, got {}",
                2 * height * width,
                offsets.len()
            )));
        }
        if coeffs.iter().chain(&offsets).any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("exposure field contains non-finite values".into()));
        }
        Ok(Self { degree, height, width, coeffs, offsets })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn offsets_mut(&mut self) -> &mut [f64] {
        &mut self.offsets
    }

    pub fn coeff(&self, d: usize, l: usize) -> f64 {
        self.coeffs[coeff_index(self.degree, d, l)]
    }

    pub fn set_coeff(&mut self, d: usize, l: usize, value: f64) {
        let i = coeff_index(self.degree, d, l);
        self.coeffs[i] = value;
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Fills `px[k] = (x+u)^k`, `py[k] = (y+v)^k` for pixel `p`.
    #[inline]
    fn powers(&self, p: usize, px: &mut [f64], py: &mut [f64]) {
        let n = self.pixels();
        let (row, col) = (p / self.width, p % self.width);
        let x = normalized_coord(col, self.width) + self.offsets[p];
        let y = normalized_coord(row, self.height) + self.offsets[n + p];
        px[0] = 1.0;
        py[0] = 1.0;
        for k in 1..=self.degree {
            px[k] = px[k - 1] * x;
            py[k] = py[k - 1] * y;
        }
    }

    /// Per-pixel log exposure, without the divergence check.
    pub fn log_values(&self) -> Vec<f64> {
        let big_d = self.degree;
        let mut px = vec![0.0; big_d + 1];
        let mut py = vec![0.0; big_d + 1];
        (0..self.pixels())
            .map(|p| {
                self.powers(p, &mut px, &mut py);
                let mut s = 0.0;
                let mut k = 0;
                for (d, &xd) in px.iter().enumerate() {
                    for &yl in &py[..=big_d - d] {
                        s += self.coeffs[k] * xd * yl;
                        k += 1;
                    }
                }
                s
            })
            .collect()
    }

    /// Per-pixel log exposure. Fails if any value exceeds
    /// [`LOG_EXPOSURE_LIMIT`] in magnitude or is not finite.
    pub fn eval_log(&self) -> Result<Vec<f64>> {
        let values = self.log_values();
        let worst = values.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        if worst > LOG_EXPOSURE_LIMIT {
            return Err(Error::DivergentExposure { magnitude: worst, limit: LOG_EXPOSURE_LIMIT });
        }
        Ok(values)
    }

    /// Per-pixel multiplicative exposure, always positive.
    pub fn eval(&self) -> Result<Vec<f64>> {
        Ok(self.eval_log()?.into_iter().map(f64::exp).collect())
    }

    /// Vector-Jacobian product of [`eval_log`](Self::eval_log): given a
    /// cotangent on the log exposure, returns gradients on the coefficients
    /// and on the offsets (`u` plane then `v` plane).
    pub fn backward(&self, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.pixels();
        if upstream.len() != n {
            return Err(Error::ShapeMismatch(format!("cotangent has {} values, field has {n} pixels", upstream.len())));
        }
        let big_d = self.degree;
        let mut grad_a = vec![0.0; self.coeffs.len()];
        let mut grad_u = vec![0.0; 2 * n];
        let mut px = vec![0.0; big_d + 1];
        let mut py = vec![0.0; big_d + 1];
        for (p, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.powers(p, &mut px, &mut py);
            let (mut du, mut dv) = (0.0, 0.0);
            let mut k = 0;
            for d in 0..=big_d {
                for l in 0..=big_d - d {
                    let a = self.coeffs[k];
                    grad_a[k] += g * px[d] * py[l];
                    if d > 0 {
                        du += a * d as f64 * px[d - 1] * py[l];
                    }
                    if l > 0 {
                        dv += a * l as f64 * px[d] * py[l - 1];
                    }
                    k += 1;
                }
            }
            grad_u[p] = g * du;
            grad_u[n + p] = g * dv;
        }
        Ok((grad_a, grad_u))
    }

    /// Squared-gradient energy of the offset map and its gradient w.r.t. the
    /// offsets. Forward differences along both axes on both planes; the
    /// difference past the last row/column is zero.
    pub fn tv_energy(&self) -> (f64, Vec<f64>) {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let mut energy = 0.0;
        let mut grad = vec![0.0; 2 * n];
        for plane in 0..2 {
            let u = &self.offsets[plane * n..(plane + 1) * n];
            let g = &mut grad[plane * n..(plane + 1) * n];
            for r in 0..h {
                for c in 0..w {
                    let p = r * w + c;
                    if c + 1 < w {
                        let diff = u[p + 1] - u[p];
                        energy += diff * diff;
                        g[p + 1] += 2.0 * diff;
                        g[p] -= 2.0 * diff;
                    }
                    if r + 1 < h {
                        let diff = u[p + w] - u[p];
                        energy += diff * diff;
                        g[p + w] += 2.0 * diff;
                        g[p] -= 2.0 * diff;
                    }
                }
            }
        }
        (energy, grad)
    }

    /// Key-value text form: `degree`, `height`, `width`, then `coeffs` in
    /// `(d, l)` lexicographic order and raw `offsets`, space separated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "degree = {}", self.degree);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "coeffs = {}", join(&self.coeffs));
        let _ = writeln!(s, "offsets = {}", join(&self.offsets));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut degree = None;
        let mut height = None;
        let mut width = None;
        let mut coeffs = None;
        let mut offsets = None;
        let bad = |msg: String| Error::ShapeMismatch(format!("exposure field text: {msg}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("no `=` in line {line:?}")))?;
            let value = value.trim();
            let int = || value.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            let floats = || {
                value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{key}: {e}"))))
                    .collect::<Result<Vec<_>>>()
            };
            match key.trim() {
                "degree" => degree = Some(int()?),
                "height" => height = Some(int()?),
                "width" => width = Some(int()?),
                "coeffs" => coeffs = Some(floats()?),
                "offsets" => offsets = Some(floats()?),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| bad(format!("missing key {k:?}"));
        Self::from_parts(
            degree.ok_or_else(|| missing("degree"))?,
            height.ok_or_else(|| missing("height"))?,
            width.ok_or_else(|| missing("width"))?,
            coeffs.ok_or_else(|| missing("coeffs"))?,
            offsets.ok_or_else(|| missing("offsets"))?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_field(degree: usize, h: usize, w: usize, seed: u64, scale: f64) -> ExposureField {
        let mut rng = crate::rng::prng(seed);
        let mut f = ExposureField::zeros(degree, h, w);
        for a in f.coeffs_mut() {
            *a = rng.random_range(-scale..scale);
        }
        for u in f.offsets_mut() {
            *u = rng.random_range(-0.2..0.2);
        }
        f
    }

    // Independent oracle: powi-based direct double sum.
    fn direct_log(f: &ExposureField) -> Vec<f64> {
        let (h, w, big_d) = (f.height(), f.width(), f.degree());
        let n = h * w;
        let mut out = vec![0.0; n];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let x = normalized_coord(c, w) + f.offsets()[p];
                let y = normalized_coord(r, h) + f.offsets()[n + p];
                for d in 0..=big_d {
                    for l in 0..=big_d - d {
                        out[p] += f.coeff(d, l) * x.powi(d as i32) * y.powi(l as i32);
                    }
                }
            }
        }
        out
    }

    fn scalar_objective(f: &ExposureField, weights: &[f64]) -> f64 {
        f.log_values().iter().zip(weights).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn monomial_count() {
        for d in 0..=10 {
            assert_eq!(ExposureField::zeros(d, 2, 2).coeffs().len(), (d + 1) * (d + 2) / 2);
        }
        assert_eq!(coeff_count(10), 66);
        assert_eq!(coeff_index(3, 0, 0), 0);
        assert_eq!(coeff_index(3, 1, 0), 4);
        assert_eq!(coeff_index(3, 3, 0), coeff_count(3) - 1);
    }

    #[test]
    fn zero_field_is_identity() {
        for degree in [0, 1, 4, 10] {
            let mut f = random_field(degree, 5, 7, degree as u64, 1.0);
            f.coeffs_mut().fill(0.0);
            assert!(f.eval().unwrap().iter().all(|&v| v == 1.0));
            assert!(f.eval_log().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_term() {
        let mut f = ExposureField::zeros(3, 4, 4);
        f.set_coeff(0, 0, 2f64.ln());
        for v in f.eval().unwrap() {
            assert!((v - 2.0).abs() < 1e-15);
        }
        f.set_coeff(0, 0, 0.7);
        assert!(f.eval_log().unwrap().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn single_monomial_row() {
        let mut f = ExposureField::zeros(1, 1, 3);
        f.set_coeff(1, 0, 1.0);
        let e = f.eval().unwrap();
        let want = [(-1f64).exp(), 1.0, 1f64.exp()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_matches_direct_sum_and_exp() {
        for seed in 0..5 {
            let f = random_field(4, 6, 9, seed, 0.5);
            let fast = f.eval_log().unwrap();
            let slow = direct_log(&f);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (e, l) in f.eval().unwrap().iter().zip(&fast) {
                assert!((e - l.exp()).abs() <= 1e-12 * e);
                assert!(*e > 0.0);
            }
        }
    }

    #[test]
    fn divergence_guard() {
        let mut f = ExposureField::zeros(0, 3, 3);
        f.set_coeff(0, 0, 31.0);
        assert!(matches!(f.eval(), Err(Error::DivergentExposure { .. })));
        f.set_coeff(0, 0, -30.0);
        assert!(f.eval().is_ok());
    }

    #[test]
    fn backward_trivial_cases() {
        let f = random_field(3, 4, 4, 1, 0.5);
        let (ga, gu) = f.backward(&[0.0; 16]).unwrap();
        assert!(ga.iter().chain(&gu).all(|&v| v == 0.0));

        let f = random_field(0, 4, 4, 2, 0.5);
        let up: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.4).collect();
        let (ga, gu) = f.backward(&up).unwrap();
        assert!((ga[0] - up.iter().sum::<f64>()).abs() < 1e-14);
        assert!(gu.iter().all(|&v| v == 0.0));

        assert!(matches!(f.backward(&[0.0; 3]), Err(Error::ShapeMismatch(_))));
    }

    fn fd_check(f: &ExposureField, seed: u64, tol: f64) {
        let n = f.height() * f.width();
        let mut rng = crate::rng::prng(seed ^ 0xabc);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ga, gu) = f.backward(&weights).unwrap();
        let h = 1e-4;
        let mut fd_a = Vec::new();
        for k in 0..f.coeffs().len() {
            let (mut p, mut m) = (f.clone(), f.clone());
            p.coeffs_mut()[k] += h;
            m.coeffs_mut()[k] -= h;
            fd_a.push((scalar_objective(&p, &weights) - scalar_objective(&m, &weights)) / (2.0 * h));
        }
        let mut fd_u = Vec::new();
        for k in 0..2 * n {
            let (mut p, mut m) = (f.clone(), f.clone());
            p.offsets_mut()[k] += h;
            m.offsets_mut()[k] -= h;
            fd_u.push((scalar_objective(&p, &weights) - scalar_objective(&m, &weights)) / (2.0 * h));
        }
        assert!(crate::gradcheck::relative_error(&ga, &fd_a) <= tol, "grad_a: {:?} vs {:?}", ga, fd_a);
        assert!(crate::gradcheck::relative_error(&gu, &fd_u) <= tol);
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(&random_field(3, 8, 8, 11, 0.5), 11, 1e-5);
        for seed in 0..10 {
            for degree in 0..=3 {
                fd_check(&random_field(degree, 8, 8, seed * 7 + degree as u64, 0.5), seed, 1e-4);
            }
        }
    }

    #[test]
    fn tv_energy_cases() {
        let mut f = ExposureField::zeros(1, 3, 3);
        f.offsets_mut().fill(0.25);
        assert_eq!(f.tv_energy().0, 0.0);

        let mut f = ExposureField::zeros(1, 2, 2);
        // u = column index, v = 0
        f.offsets_mut()[..4].copy_from_slice(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(f.tv_energy().0, 2.0);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let f = random_field(2, 8, 8, 100 + seed, 0.3);
            let (_, g) = f.tv_energy();
            let h = 1e-5;
            let fd: Vec<f64> = (0..g.len())
                .map(|k| {
                    let (mut p, mut m) = (f.clone(), f.clone());
                    p.offsets_mut()[k] += h;
                    m.offsets_mut()[k] -= h;
                    (p.tv_energy().0 - m.tv_energy().0) / (2.0 * h)
                })
                .collect();
            assert!(crate::gradcheck::relative_error(&g, &fd) <= 1e-6);
        }
    }

    #[test]
    fn text_roundtrip() {
        let f = random_field(3, 4, 5, 9, 0.5);
        let back = ExposureField::from_text(&f.to_text()).unwrap();
        assert_eq!(back, f);
        assert!(ExposureField::from_text("degree = 1\nheight = 1\nwidth = 1\ncoeffs = 0 0\noffsets = 0 0").is_err());
    }
}
