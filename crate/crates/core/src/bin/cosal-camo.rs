use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use cosal_camo::attack::Variant;
use cosal_camo::detector::detect_group;
use cosal_camo::error::{Error, Result};
use cosal_camo::gradcheck::run_suite;
use cosal_camo::harness::experiment::{build_stack, perturb_target};
use cosal_camo::harness::manifest::list_images;
use cosal_camo::harness::{ingest_group, make_fixture, run_experiment, Condition, FixtureKind, Settings};
use cosal_camo::metrics::{aggregate, evaluate, records_csv, SaliencyMap};
use cosal_camo::raster::{load_image, save_gray, save_image, write_atomic};

#[derive(Parser)]
#[command(name = "cosal-camo", version, about = "Exposure-and-noise camouflage against a co-saliency detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic group with exact masks.
    Fixture {
        #[arg(long, default_value = "disc-group")]
        kind: String,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb the target images of a group.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// joint, wo-noise, wo-exposure or noise-baseline.
        #[arg(long, default_value = "joint")]
        condition: String,
    },
    /// Run the co-saliency detector over a group's images.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score saliency maps against a group's masks.
    Eval {
        #[arg(long)]
        group: PathBuf,
        /// Directory of `<stem>.png` grayscale maps.
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all configured conditions and write the reports.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the run to one condition.
        #[arg(long)]
        condition: Option<String>,
    },
    /// Finite-difference check of the full objective gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = match &common.config {
        Some(path) => Settings::load(path)?,
        None => Settings::from_json("{}")?,
    };
    if let Some(v) = &common.variant {
        let v = Variant::parse(v)
            .ok_or_else(|| Error::Config { key: "variant".into(), reason: format!("expected single, group or augment, got `{v}`") })?;
        s = s.with_variant(v);
    }
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn mkdir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).map_err(|e| Error::Io { path: d.to_path_buf(), source: e })
}

fn attack(common: &Common, group: &Path, out: &Path, condition: &str) -> Result<()> {
    let s = settings(common)?;
    let condition: Condition = condition.parse()?;
    if condition == Condition::Clean {
        return Err(Error::Config { key: "condition".into(), reason: "`clean` does not perturb anything".into() });
    }
    let manifest = match &s.targets {
        Some(t) => ingest_group(group)?.with_targets(t.clone())?,
        None => ingest_group(group)?,
    };
    let loaded = manifest.load()?;
    let stack = build_stack(&s)?;
    let results: Vec<_> = manifest
        .targets
        .par_iter()
        .map(|&t| perturb_target(&s, condition, &stack, &loaded, t).map(|r| (t, r)))
        .collect::<Result<_>>()?;
    for sub in ["adv", "traces", "exposure"] {
        mkdir(&out.join(sub))?;
    }
    for (t, r) in results {
        let stem = &loaded.stems[t];
        let Some((img, outcome)) = r else { continue };
        save_image(&img, out.join("adv").join(format!("{stem}.png")))?;
        if let Some(o) = outcome {
            write_atomic(&out.join("traces").join(format!("{stem}.jsonl")), o.trace_jsonl().as_bytes())?;
            write_atomic(&out.join("exposure").join(format!("{stem}.txt")), o.state.field.to_text().as_bytes())?;
        }
        println!("{stem}: written");
    }
    Ok(())
}

fn detect(common: &Common, group: &Path, out: &Path) -> Result<()> {
    let s = settings(common)?;
    let entries = list_images(group)?;
    let images = entries.iter().map(|(_, p)| load_image(p)).collect::<Result<Vec<_>>>()?;
    let maps = detect_group(&s.detector(), &images)?;
    mkdir(&out.join("maps"))?;
    for ((stem, _), m) in entries.iter().zip(&maps) {
        save_gray(m.height(), m.width(), m.data(), out.join("maps").join(format!("{stem}.png")))?;
    }
    println!("{} maps written to {}", maps.len(), out.join("maps").display());
    Ok(())
}

fn eval(group: &Path, maps: &Path, out: &Path) -> Result<()> {
    let manifest = ingest_group(group)?;
    let loaded = manifest.load()?;
    let mut rows = Vec::new();
    for (stem, mask) in loaded.stems.iter().zip(&loaded.masks) {
        let img = load_image(maps.join(format!("{stem}.png")))?;
        let map = SaliencyMap::new(img.height(), img.width(), img.channel(0).to_vec())?;
        rows.push((stem.clone(), evaluate(&map, mask).map_err(|e| e.context(format!("image `{stem}`")))?));
    }
    let records: Vec<_> = rows.iter().map(|(_, r)| *r).collect();
    let agg = aggregate(&records)?;
    mkdir(out)?;
    write_atomic(&out.join("metrics.csv"), records_csv(rows.iter().map(|(s, r)| (s.as_str(), r))).as_bytes())?;
    let json = serde_json::to_string_pretty(&agg).expect("aggregate serialises") + "\n";
    write_atomic(&out.join("aggregate.json"), json.as_bytes())?;
    print!("{json}");
    Ok(())
}

fn experiment(common: &Common, group: &Path, out: &Path, condition: Option<&str>) -> Result<()> {
    let mut s = settings(common)?;
    if let Some(c) = condition {
        s.conditions = vec![c.parse()?];
    }
    let report = run_experiment(&s, &ingest_group(group)?, Some(out))?;
    println!("{:<16} {:>6} {:>8} {:>8} {:>8}", "condition", "S", "AP", "F_beta", "MAE");
    for c in &report.conditions {
        let a = c.aggregate;
        println!("{:<16} {:>6.3} {:>8.4} {:>8.4} {:>8.4}", c.condition.name(), a.success_rate, a.ap, a.f_beta, a.mae);
    }
    println!("wall clock {:.1}s", report.wall_clock_secs);
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let results = run_suite(seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        println!(
            "{:<8} {} seed {:>4} D={} a {:.2e} u {:.2e} noise {:.2e}  {}",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.seed,
            r.degree,
            r.rel_err_a,
            r.rel_err_u,
            r.rel_err_noise,
            r.tolerance
        );
    }
    println!("{} of {} checks passed", results.iter().filter(|r| r.passed).count(), results.len());
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Fixture { kind, n, size, seed, out } => {
            let kind = FixtureKind::parse(&kind)
                .ok_or_else(|| Error::Config { key: "kind".into(), reason: format!("expected disc-group or stripe-group, got `{kind}`") })?;
            let m = make_fixture(kind, n, size, seed, &out)?;
            println!("{} images written to {}", m.entries.len(), out.display());
        }
        Command::Attack { common, group, out, condition } => attack(&common, &group, &out, &condition)?,
        Command::Detect { common, group, out } => detect(&common, &group, &out)?,
        Command::Eval { group, maps, out } => eval(&group, &maps, &out)?,
        Command::Experiment { common, group, out, condition } => experiment(&common, &group, &out, condition.as_deref())?,
        Command::Gradcheck { seed } => return gradcheck(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
