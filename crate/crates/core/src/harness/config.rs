//! Run configuration: a flat JSON object whose unset keys take defaults.
//!
//! `epsilon`, `alpha_n` and `noise_baseline_epsilon` are written in 0-255
//! pixel units and converted to the internal `[0, 1]` scale here.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Variant};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::rng::sub_seed;

/// Experimental conditions, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Clean,
    /// Exposure and noise together.
    Joint,
    WoNoise,
    WoExposure,
    /// Uniform random noise of amplitude `noise_baseline_epsilon`.
    NoiseBaseline,
}

impl Condition {
    pub const ALL: [Condition; 5] =
        [Condition::Clean, Condition::Joint, Condition::WoNoise, Condition::WoExposure, Condition::NoiseBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Joint => "joint",
            Condition::WoNoise => "wo-noise",
            Condition::WoExposure => "wo-exposure",
            Condition::NoiseBaseline => "noise-baseline",
        }
    }

    /// Whether the condition runs the optimizer.
    pub fn is_attack(self) -> bool {
        matches!(self, Condition::Joint | Condition::WoNoise | Condition::WoExposure)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clean" => Condition::Clean,
            "joint" => Condition::Joint,
            "wo-noise" | "w/o-noise" | "w/o noise" => Condition::WoNoise,
            "wo-exposure" | "w/o-exposure" | "w/o exposure" => Condition::WoExposure,
            "noise-baseline" => Condition::NoiseBaseline,
            _ => return Err(Error::config("conditions", format!("unknown condition `{s}`"))),
        })
    }
}

/// The file as written: every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    variant: Option<String>,
    iterations: Option<usize>,
    alpha_a: Option<f64>,
    alpha_u: Option<f64>,
    alpha_n: Option<f64>,
    epsilon: Option<f64>,
    mu: Option<f64>,
    degree: Option<usize>,
    lambda_b: Option<f64>,
    lambda_s: Option<f64>,
    enable_noise: Option<bool>,
    enable_exposure: Option<bool>,
    seed: Option<u64>,
    detector_clusters: Option<usize>,
    detector_iterations: Option<usize>,
    noise_baseline_epsilon: Option<f64>,
    conditions: Option<Vec<String>>,
    targets: Option<Vec<usize>>,
    weights: Option<PathBuf>,
}

/// Every effective value, in config-file units. Serializes back to a
/// config file that parses to the same settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub variant: Variant,
    pub iterations: usize,
    pub alpha_a: f64,
    pub alpha_u: f64,
    /// 0-255 units.
    pub alpha_n: f64,
    /// 0-255 units.
    pub epsilon: f64,
    pub mu: f64,
    pub degree: usize,
    pub lambda_b: f64,
    pub lambda_s: f64,
    pub enable_noise: bool,
    pub enable_exposure: bool,
    pub seed: u64,
    pub detector_clusters: usize,
    pub detector_iterations: usize,
    /// 0-255 units.
    pub noise_baseline_epsilon: f64,
    pub conditions: Vec<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

/// Largest accepted polynomial degree.
pub const MAX_DEGREE: usize = 20;

impl Settings {
    /// Defaults for `variant`, all conditions, seed 0.
    pub fn defaults(variant: Variant) -> Self {
        let a = AttackConfig::defaults(variant);
        let d = DetectorConfig::default();
        Self {
            variant,
            iterations: a.iterations,
            alpha_a: a.alpha_a,
            alpha_u: a.alpha_u,
            alpha_n: 1.0,
            epsilon: 16.0,
            mu: a.mu,
            degree: a.degree,
            lambda_b: a.lambda_b,
            lambda_s: a.lambda_s,
            enable_noise: true,
            enable_exposure: true,
            seed: 0,
            detector_clusters: d.clusters,
            detector_iterations: d.iterations,
            noise_baseline_epsilon: 16.0,
            conditions: Condition::ALL.to_vec(),
            targets: None,
            weights: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let variant = match file.variant.as_deref() {
            None => Variant::Augment,
            Some(v) => Variant::parse(v)
                .ok_or_else(|| Error::config("variant", format!("expected single, group or augment, got `{v}`")))?,
        };
        let d = Self::defaults(variant);
        let conditions = match file.conditions {
            None => d.conditions,
            Some(names) => names.iter().map(|n| n.parse()).collect::<Result<_>>()?,
        };
        let s = Self {
            variant,
            iterations: file.iterations.unwrap_or(d.iterations),
            alpha_a: file.alpha_a.unwrap_or(d.alpha_a),
            alpha_u: file.alpha_u.unwrap_or(d.alpha_u),
            alpha_n: file.alpha_n.unwrap_or(d.alpha_n),
            epsilon: file.epsilon.unwrap_or(d.epsilon),
            mu: file.mu.unwrap_or(d.mu),
            degree: file.degree.unwrap_or(d.degree),
            lambda_b: file.lambda_b.unwrap_or(d.lambda_b),
            lambda_s: file.lambda_s.unwrap_or(d.lambda_s),
            enable_noise: file.enable_noise.unwrap_or(d.enable_noise),
            enable_exposure: file.enable_exposure.unwrap_or(d.enable_exposure),
            seed: file.seed.unwrap_or(d.seed),
            detector_clusters: file.detector_clusters.unwrap_or(d.detector_clusters),
            detector_iterations: file.detector_iterations.unwrap_or(d.detector_iterations),
            noise_baseline_epsilon: file.noise_baseline_epsilon.unwrap_or(d.noise_baseline_epsilon),
            conditions,
            targets: file.targets,
            weights: file.weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("settings serialise") + "\n"
    }

    /// Re-applies a variant override, resetting `lambda_b` to the variant's
    /// default when it was left at the previous variant's default.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        if self.lambda_b == self.variant.default_lambda_b() {
            self.lambda_b = variant.default_lambda_b();
        }
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be a positive number, got {v}")))
            }
        };
        let nonneg = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be a non-negative number, got {v}")))
            }
        };
        let pixel = |key: &str, v: f64| {
            if v.is_finite() && (0.0..=255.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("must lie in [0, 255], got {v}")))
            }
        };
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        positive("alpha_a", self.alpha_a)?;
        positive("alpha_u", self.alpha_u)?;
        positive("alpha_n", self.alpha_n)?;
        pixel("alpha_n", self.alpha_n)?;
        pixel("epsilon", self.epsilon)?;
        nonneg("mu", self.mu)?;
        if self.degree > MAX_DEGREE {
            return Err(Error::config("degree", format!("must be <= {MAX_DEGREE}, got {}", self.degree)));
        }
        nonneg("lambda_b", self.lambda_b)?;
        nonneg("lambda_s", self.lambda_s)?;
        pixel("noise_baseline_epsilon", self.noise_baseline_epsilon)?;
        if self.conditions.is_empty() {
            return Err(Error::config("conditions", "must name at least one condition"));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if self.conditions[..i].contains(c) {
                return Err(Error::config("conditions", format!("`{c}` listed twice")));
            }
        }
        if let Some(t) = &self.targets {
            if t.is_empty() {
                return Err(Error::config("targets", "must name at least one image index"));
            }
        }
        self.detector().validate()?;
        self.attack().validate()
    }

    /// Optimizer settings on the `[0, 1]` scale.
    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            variant: self.variant,
            iterations: self.iterations,
            alpha_a: self.alpha_a,
            alpha_u: self.alpha_u,
            alpha_n: self.alpha_n / 255.0,
            epsilon: self.epsilon / 255.0,
            mu: self.mu,
            degree: self.degree,
            lambda_b: self.lambda_b,
            lambda_s: self.lambda_s,
            enable_noise: self.enable_noise,
            enable_exposure: self.enable_exposure,
            seed: self.seed,
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            clusters: self.detector_clusters,
            iterations: self.detector_iterations,
            seed: sub_seed(self.seed, "detector"),
        }
    }

    pub fn weights_seed(&self) -> u64 {
        sub_seed(self.seed, "weights")
    }

    /// Seed of the baseline noise added to image `stem`.
    pub fn baseline_seed(&self, stem: &str) -> u64 {
        sub_seed(sub_seed(self.seed, "baseline"), stem)
    }

    /// The settings a single condition actually runs with.
    pub fn for_condition(&self, condition: Condition) -> Self {
        let mut s = self.clone();
        s.conditions = vec![condition];
        match condition {
            Condition::Clean | Condition::NoiseBaseline => {
                s.enable_noise = false;
                s.enable_exposure = false;
            }
            Condition::Joint => {}
            Condition::WoNoise => s.enable_noise = false,
            Condition::WoExposure => s.enable_exposure = false,
        }
        s
    }
}

/// Reads `path` and splits the effective settings into the optimizer and
/// detector configurations.
pub fn parse_config(path: impl AsRef<Path>) -> Result<(AttackConfig, DetectorConfig, Settings)> {
    let s = Settings::load(path)?;
    Ok((s.attack(), s.detector(), s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let s = Settings::from_json("{}").unwrap();
        let a = s.attack();
        assert_eq!(a.iterations, 20);
        assert_eq!(a.epsilon, 16.0 / 255.0);
        assert_eq!(a.alpha_n, 1.0 / 255.0);
        assert_eq!((a.mu, a.alpha_a, a.alpha_u, a.degree, a.lambda_s), (1.0, 0.1, 0.01, 10, 0.01));
        assert_eq!(a.variant, Variant::Augment);
        assert_eq!(a.lambda_b, 0.01);
        assert_eq!(s.conditions, Condition::ALL);
    }

    #[test]
    fn lambda_b_follows_variant() {
        assert_eq!(Settings::from_json(r#"{"variant":"single"}"#).unwrap().lambda_b, 0.5);
        assert_eq!(Settings::from_json(r#"{"variant":"augment"}"#).unwrap().lambda_b, 0.01);
        assert_eq!(Settings::from_json(r#"{"variant":"single","lambda_b":0.2}"#).unwrap().lambda_b, 0.2);
        let s = Settings::from_json("{}").unwrap().with_variant(Variant::Single);
        assert_eq!(s.lambda_b, 0.5);
    }

    fn key_of(text: &str) -> String {
        match Settings::from_json(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error for {text}, got {other:?}"),
        }
    }

    #[test]
    fn range_errors_name_the_key() {
        assert_eq!(key_of(r#"{"iterations":0}"#), "iterations");
        assert_eq!(key_of(r#"{"epsilon":300}"#), "epsilon");
        assert_eq!(key_of(r#"{"alpha_a":0}"#), "alpha_a");
        assert_eq!(key_of(r#"{"lambda_s":-1}"#), "lambda_s");
        assert_eq!(key_of(r#"{"detector_clusters":1}"#), "detector_clusters");
        assert_eq!(key_of(r#"{"degree":99}"#), "degree");
        assert_eq!(key_of(r#"{"variant":"both"}"#), "variant");
        assert_eq!(key_of(r#"{"conditions":["clean","clean"]}"#), "conditions");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        match Settings::from_json(r#"{"iteratoins":5}"#) {
            Err(Error::ConfigParse(msg)) => assert!(msg.contains("iteratoins"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Settings::from_json("[1,2"), Err(Error::ConfigParse(_))));
    }

    #[test]
    fn echo_round_trips() {
        let s = Settings::from_json(r#"{"variant":"group","epsilon":8,"targets":[0,2],"conditions":["clean","w/o noise"]}"#)
            .unwrap();
        assert_eq!(s.conditions, vec![Condition::Clean, Condition::WoNoise]);
        assert_eq!(Settings::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn condition_overrides() {
        let s = Settings::from_json("{}").unwrap();
        let w = s.for_condition(Condition::WoNoise);
        assert!(!w.enable_noise && w.enable_exposure);
        let w = s.for_condition(Condition::WoExposure);
        assert!(w.enable_noise && !w.enable_exposure);
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), c);
        }
    }

    #[test]
    fn named_sub_seeds_differ() {
        let s = Settings::from_json(r#"{"seed":3}"#).unwrap();
        assert_ne!(s.weights_seed(), s.detector().seed);
        assert_ne!(s.baseline_seed("a"), s.baseline_seed("b"));
    }
}
