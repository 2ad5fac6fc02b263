//! Runs every configured condition over a group and writes the reports.
//!
//! Output layout under the run directory:
//!
//! ```text
//! report.json            full report (settings echo, rows, aggregates)
//! aggregates.json        one {condition, S, AP, F_beta, MAE} object per condition
//! <condition>/metrics.csv
//! <condition>/maps/<stem>.png
//! <condition>/adv/<stem>.png        perturbed conditions only
//! <condition>/traces/<stem>.jsonl   optimizer conditions only
//! <condition>/exposure/<stem>.txt   optimizer conditions only
//! ```

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{random_noise_baseline, run_attack, AttackOutcome};
use crate::detector::detect_group;
use crate::error::{Error, Result};
use crate::features::{Architecture, ConvStack, WeightSource};
use crate::harness::config::{Condition, Settings};
use crate::harness::manifest::{GroupManifest, LoadedGroup};
use crate::metrics::{aggregate, evaluate, records_csv, Aggregate, EvalRecord, SaliencyMap};
use crate::raster::{save_gray, save_image, write_atomic, RasterImage};

/// One evaluated target image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub image: String,
    #[serde(flatten)]
    pub record: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    /// Effective settings for this condition.
    pub settings: Settings,
    pub rows: Vec<Row>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub group: String,
    pub seed: u64,
    pub settings: Settings,
    pub conditions: Vec<ConditionReport>,
    /// Not serialized, so identical runs write identical reports.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn condition(&self, c: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|r| r.condition == c)
    }

    /// Success rate of condition `c`.
    pub fn success(&self, c: Condition) -> Option<f64> {
        self.condition(c).map(|r| r.aggregate.success_rate)
    }

    /// Checks that every aggregate equals its recomputation from the rows.
    pub fn verify(&self) -> Result<()> {
        for c in &self.conditions {
            let records: Vec<EvalRecord> = c.rows.iter().map(|r| r.record).collect();
            let again = aggregate(&records)?;
            let pairs = [
                ("S", c.aggregate.success_rate, again.success_rate),
                ("AP", c.aggregate.ap, again.ap),
                ("F_beta", c.aggregate.f_beta, again.f_beta),
                ("MAE", c.aggregate.mae, again.mae),
            ];
            for (key, stored, fresh) in pairs {
                if (stored - fresh).abs() > 1e-12 {
                    return Err(Error::Report(format!(
                        "condition `{}`: stored {key} = {stored} but rows give {fresh}",
                        c.condition
                    )));
                }
            }
            for r in &c.rows {
                if r.record.success != (r.record.iou < crate::metrics::SUCCESS_IOU) {
                    return Err(Error::Report(format!("row `{}` of `{}`: success flag disagrees with IoU", r.image, c.condition)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        report.verify()?;
        Ok(report)
    }

    /// Reads a `report.json` and verifies its aggregates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("report {}", path.display())))
    }

    fn aggregates_json(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            condition: Condition,
            #[serde(flatten)]
            aggregate: &'a Aggregate,
        }
        let lines: Vec<Line> = self.conditions.iter().map(|c| Line { condition: c.condition, aggregate: &c.aggregate }).collect();
        serde_json::to_string_pretty(&lines).expect("aggregates serialise") + "\n"
    }
}

/// Builds the feature extractor named by `settings`.
pub fn build_stack(settings: &Settings) -> Result<ConvStack> {
    let arch = Architecture::default();
    match &settings.weights {
        Some(path) => ConvStack::build(&arch, WeightSource::File(path.clone())),
        None => ConvStack::build(&arch, WeightSource::Seed(settings.weights_seed())),
    }
}

/// What one target produced under one condition.
pub struct TargetResult {
    pub stem: String,
    /// The image as written to disk (8-bit quantized).
    pub perturbed: Option<RasterImage>,
    pub outcome: Option<AttackOutcome>,
    pub map: SaliencyMap,
    pub record: EvalRecord,
}

/// Perturbs `group.images[target]` according to `condition`. Returns `None`
/// for the clean condition.
pub fn perturb_target(
    settings: &Settings,
    condition: Condition,
    stack: &ConvStack,
    group: &LoadedGroup,
    target: usize,
) -> Result<Option<(RasterImage, Option<AttackOutcome>)>> {
    let img = &group.images[target];
    let stem = &group.stems[target];
    let run = || -> Result<_> {
        Ok(match condition {
            Condition::Clean => None,
            Condition::NoiseBaseline => {
                let eps = settings.noise_baseline_epsilon / 255.0;
                Some((random_noise_baseline(img, eps, settings.baseline_seed(stem))?.quantized(), None))
            }
            _ => {
                let cfg = settings.for_condition(condition).attack();
                let outcome = run_attack(&cfg, stack, &group.images, target)?;
                Some((outcome.image.quantized(), Some(outcome)))
            }
        })
    };
    run().map_err(|e| e.context(format!("image `{stem}` under `{condition}`")))
}

fn run_condition(
    settings: &Settings,
    condition: Condition,
    stack: &ConvStack,
    group: &LoadedGroup,
    targets: &[usize],
) -> Result<Vec<TargetResult>> {
    let detector = settings.detector();
    let clean_maps = if condition == Condition::Clean { Some(detect_group(&detector, &group.images)?) } else { None };
    targets
        .par_iter()
        .map(|&t| {
            let stem = group.stems[t].clone();
            let perturbed = perturb_target(settings, condition, stack, group, t)?;
            let map = match (&clean_maps, &perturbed) {
                (Some(maps), _) => maps[t].clone(),
                (None, Some((img, _))) => {
                    let mut attacked = group.images.clone();
                    attacked[t] = img.clone();
                    detect_group(&detector, &attacked)?.swap_remove(t)
                }
                (None, None) => unreachable!("only the clean condition leaves the target untouched"),
            };
            let record = evaluate(&map, &group.masks[t]).map_err(|e| e.context(format!("image `{stem}`")))?;
            let (perturbed, outcome) = match perturbed {
                Some((img, outcome)) => (Some(img), outcome),
                None => (None, None),
            };
            Ok(TargetResult { stem, perturbed, outcome, map, record })
        })
        .collect()
}

fn write_condition(dir: &Path, report: &ConditionReport, results: &[TargetResult]) -> Result<()> {
    let mkdir = |d: &Path| fs::create_dir_all(d).map_err(|e| Error::io(d, e));
    mkdir(&dir.join("maps"))?;
    for r in results {
        save_gray(r.map.height(), r.map.width(), r.map.data(), dir.join("maps").join(format!("{}.png", r.stem)))?;
        if let Some(img) = &r.perturbed {
            mkdir(&dir.join("adv"))?;
            save_image(img, dir.join("adv").join(format!("{}.png", r.stem)))?;
        }
        if let Some(outcome) = &r.outcome {
            mkdir(&dir.join("traces"))?;
            mkdir(&dir.join("exposure"))?;
            write_atomic(&dir.join("traces").join(format!("{}.jsonl", r.stem)), outcome.trace_jsonl().as_bytes())?;
            write_atomic(&dir.join("exposure").join(format!("{}.txt", r.stem)), outcome.state.field.to_text().as_bytes())?;
        }
    }
    let csv = records_csv(report.rows.iter().map(|r| (r.image.as_str(), &r.record)));
    write_atomic(&dir.join("metrics.csv"), csv.as_bytes())
}

/// Runs every condition in `settings` over the manifest's targets. When
/// `out` is given, images, maps, traces and reports are written there.
pub fn run_experiment(settings: &Settings, manifest: &GroupManifest, out: Option<&Path>) -> Result<RunReport> {
    let start = Instant::now();
    settings.validate()?;
    let manifest = match &settings.targets {
        Some(t) => manifest.clone().with_targets(t.clone())?,
        None => manifest.clone(),
    };
    if manifest.targets.is_empty() {
        return Err(Error::Empty("target list"));
    }
    let group = manifest.load()?;
    let stack = build_stack(settings)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut conditions = Vec::with_capacity(settings.conditions.len());
    for &condition in &settings.conditions {
        let results = run_condition(settings, condition, &stack, &group, &manifest.targets)?;
        let rows: Vec<Row> = results.iter().map(|r| Row { image: r.stem.clone(), record: r.record }).collect();
        let records: Vec<EvalRecord> = rows.iter().map(|r| r.record).collect();
        let report = ConditionReport {
            condition,
            settings: settings.for_condition(condition),
            aggregate: aggregate(&records)?,
            rows,
        };
        if let Some(out) = out {
            write_condition(&out.join(condition.name()), &report, &results)?;
        }
        conditions.push(report);
    }
    let report = RunReport {
        group: manifest.name.clone(),
        seed: settings.seed,
        settings: settings.clone(),
        conditions,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(out) = out {
        write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
        write_atomic(&out.join("aggregates.json"), report.aggregates_json().as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fixture::{make_fixture, FixtureKind};

    fn quick(conditions: &str) -> Settings {
        Settings::from_json(&format!(r#"{{"iterations":2,"degree":2,"conditions":{conditions}}}"#)).unwrap()
    }

    #[test]
    fn clean_twice_is_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let m = make_fixture(FixtureKind::DiscGroup, 3, 32, 1, tmp.path()).unwrap();
        let s = quick(r#"["clean"]"#);
        let a = run_experiment(&s, &m, None).unwrap();
        let b = run_experiment(&s, &m, None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.conditions[0].rows.len(), 3);
    }

    #[test]
    fn wo_noise_echo_and_files() {
        let tmp = tempfile::tempdir().unwrap();
        let m = make_fixture(FixtureKind::DiscGroup, 3, 32, 2, tmp.path().join("g")).unwrap();
        let s = Settings { targets: Some(vec![1]), ..quick(r#"["wo-noise","noise-baseline"]"#) };
        let out = tmp.path().join("run");
        let report = run_experiment(&s, &m, Some(&out)).unwrap();
        let wo = report.condition(Condition::WoNoise).unwrap();
        assert!(!wo.settings.enable_noise && wo.settings.enable_exposure);
        assert_eq!(wo.rows.len(), 1);
        assert_eq!(wo.rows[0].image, "001");
        for f in ["report.json", "aggregates.json", "wo-noise/metrics.csv", "wo-noise/adv/001.png",
            "wo-noise/maps/001.png", "wo-noise/traces/001.jsonl", "wo-noise/exposure/001.txt",
            "noise-baseline/adv/001.png"] {
            assert!(out.join(f).is_file(), "{f} missing");
        }
        let trace = fs::read_to_string(out.join("wo-noise/traces/001.jsonl")).unwrap();
        assert_eq!(trace.lines().count(), 2);
        assert_eq!(RunReport::load(out.join("report.json")).unwrap().to_json(), report.to_json());
    }

    #[test]
    fn tampered_aggregate_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let m = make_fixture(FixtureKind::DiscGroup, 2, 32, 3, tmp.path()).unwrap();
        let mut report = run_experiment(&quick(r#"["clean"]"#), &m, None).unwrap();
        report.conditions[0].aggregate.mae += 0.01;
        assert!(matches!(RunReport::from_json(&report.to_json()), Err(Error::Report(_))));
    }

    #[test]
    fn failing_image_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let m = make_fixture(FixtureKind::DiscGroup, 2, 32, 3, tmp.path()).unwrap();
        fs::write(&m.entries[1].image, b"junk").unwrap();
        let err = run_experiment(&quick(r#"["clean"]"#), &m, None).unwrap_err().to_string();
        assert!(err.contains("001"), "{err}");
    }
}
