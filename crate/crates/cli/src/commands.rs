//! Command implementations. A cohort directory holds `cohort.json`,
//! `images/<id>.msv` and `labels/<id>.msv`; an adaptation run directory
//! holds `predictions/<id>.msv`, `steps.jsonl` and `cases.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vista::backbone::{Pretrainer, SegmentationModel};
use vista::config::{ablation_variant, Variant};
use vista::engine::{init_state, run_no_tta, run_stream, run_tent_baseline, write_step_records, CaseResult};
use vista::io::{load_labels, load_probabilities, load_volume, save_labels, save_probabilities, save_volume, Container};
use vista::metrics::{binarize, evaluate_case, format_table, macro_report, MetricsReport};
use vista::phantom::{make_cohort, CohortManifest};
use vista::{LabelVolume, MultiSequenceVolume};

use crate::config::{self, AdaptConfig, PretrainConfig, SimulateConfig};
use crate::manifest::{read_json, write_json, RunClock, RunManifest};

const COHORT_FILE: &str = "cohort.json";
const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FILE: &str = "model.ckpt";
const EXT: &str = "msv";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn case_path(dir: &Path, sub: &str, id: &str) -> PathBuf {
    dir.join(sub).join(format!("{id}.{EXT}"))
}

pub fn simulate(config_path: &Path, out: &Path) -> Result<RunManifest> {
    let clock = RunClock::start();
    let cfg: SimulateConfig = config::load(config_path, &SimulateConfig::source())?;
    let shift = cfg.shift_spec();
    let cases = make_cohort(cfg.cases, &cfg.phantom, &cfg.contrast, &shift)?;
    create_dir(&out.join("images"))?;
    create_dir(&out.join("labels"))?;
    for c in &cases {
        save_volume(&c.volume, case_path(out, "images", &c.id))?;
        save_labels(&c.labels, cfg.phantom.spacing, case_path(out, "labels", &c.id))?;
    }
    write_json(&CohortManifest::new(&cfg.phantom, &cfg.contrast, &shift, &cases), &out.join(COHORT_FILE))?;
    let manifest = clock.finish(
        "simulate",
        serde_json::to_value(&cfg)?,
        vec![cfg.phantom.seed, cfg.shift.seed],
        vec![config_path.into()],
        vec![out.into()],
    );
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn read_cohort(dir: &Path) -> Result<CohortManifest> {
    read_json(&dir.join(COHORT_FILE)).with_context(|| format!("{} is not a cohort directory", dir.display()))
}

fn load_images(dir: &Path, cohort: &CohortManifest) -> Result<Vec<(String, MultiSequenceVolume)>> {
    cohort.cases.iter().map(|c| Ok((c.id.clone(), load_volume(case_path(dir, "images", &c.id))?))).collect()
}

fn load_cohort_labels(dir: &Path, cohort: &CohortManifest) -> Result<Vec<LabelVolume>> {
    cohort.cases.iter().map(|c| Ok(load_labels(case_path(dir, "labels", &c.id))?.0)).collect()
}

/// Optimizer state and epoch counter stored next to the weights so that
/// training can resume.
#[derive(Serialize, Deserialize)]
struct TrainState {
    options: vista::backbone::PretrainOptions,
    adam: vista::backbone::Adam,
    epochs_completed: usize,
}

pub fn pretrain(config_path: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<RunManifest> {
    let clock = RunClock::start();
    let cfg: PretrainConfig = config::load(config_path, &PretrainConfig::default())?;
    let cohort = read_cohort(data)?;
    let images = load_images(data, &cohort)?;
    let labels = load_cohort_labels(data, &cohort)?;
    let dataset: Vec<_> = images.into_iter().map(|(_, v)| v).zip(labels).collect();

    let (mut model, mut trainer) = match resume {
        Some(path) => {
            let c = Container::load(path)?;
            let model = SegmentationModel::from_container_expecting(&c, &cfg.model)?;
            let state: TrainState = serde_json::from_value(c.header.meta.get("train").cloned().unwrap_or_default())
                .with_context(|| format!("{} has no resumable training state", path.display()))?;
            let trainer =
                Pretrainer { options: cfg.train, adam: state.adam, epochs_completed: state.epochs_completed };
            (model, trainer)
        }
        None => {
            let model = SegmentationModel::build(cfg.model)?;
            let trainer = Pretrainer::new(&model, cfg.train);
            (model, trainer)
        }
    };
    let first_epoch = trainer.epochs_completed;
    let report = trainer.run(&mut model, &dataset, cfg.train.epochs)?;

    create_dir(out)?;
    let state = TrainState { options: cfg.train, adam: trainer.adam.clone(), epochs_completed: trainer.epochs_completed };
    model.to_container(json!({ "train": state })).save(out.join(CHECKPOINT_FILE))?;
    let curve: String = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\n", json!({ "epoch": first_epoch + i + 1, "loss": l })))
        .collect();
    fs::write(out.join("curve.jsonl"), curve)?;

    let mut inputs = vec![config_path.to_path_buf(), data.to_path_buf()];
    inputs.extend(resume.map(Path::to_path_buf));
    let manifest = clock.finish(
        "pretrain",
        json!({ "config": cfg, "resumed_from_epoch": first_epoch }),
        vec![cfg.model.seed, cfg.train.seed],
        inputs,
        vec![out.join(CHECKPOINT_FILE)],
    );
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vista,
    Tent,
    None,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub steps: usize,
    pub skipped: Option<String>,
}

pub struct AdaptArgs<'a> {
    pub config: &'a Path,
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub method: Method,
    pub variant: Variant,
    pub seed: Option<u64>,
}

pub fn adapt(args: AdaptArgs) -> Result<RunManifest> {
    let clock = RunClock::start();
    let file: AdaptConfig = config::load(args.config, &AdaptConfig::default())?;
    let mut base = file.adapt.clone();
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    let cfg = ablation_variant(&base, args.variant)?;
    let source = SegmentationModel::from_container(&Container::load(args.checkpoint)?)?;
    let cohort = read_cohort(args.data)?;
    let stream = load_images(args.data, &cohort)?;

    let results: Vec<CaseResult> = match args.method {
        Method::None => {
            let vols: Vec<_> = stream.iter().map(|(_, v)| v.clone()).collect();
            let preds = run_no_tta(&source, &vols)?;
            stream
                .iter()
                .zip(preds)
                .map(|((id, _), p)| CaseResult { case_id: id.clone(), prediction: p, steps: vec![], skipped: None })
                .collect()
        }
        Method::Tent => run_tent_baseline(&mut init_state(&source, &cfg)?, &stream)?,
        Method::Vista => run_stream(&mut init_state(&source, &cfg)?, &stream)?,
    };

    create_dir(&args.out.join("predictions"))?;
    for (r, (_, vol)) in results.iter().zip(&stream) {
        save_probabilities(&r.prediction, vol.spacing(), case_path(args.out, "predictions", &r.case_id))?;
    }
    let steps: Vec<_> = results.iter().flat_map(|r| r.steps.iter().cloned()).collect();
    let log = fs::File::create(args.out.join("steps.jsonl"))?;
    write_step_records(&steps, std::io::BufWriter::new(log))?;
    let cases: Vec<_> = results
        .iter()
        .map(|r| CaseSummary { case_id: r.case_id.clone(), steps: r.steps.len(), skipped: r.skipped.clone() })
        .collect();
    write_json(&cases, &args.out.join("cases.json"))?;

    let manifest = clock.finish(
        "adapt",
        json!({ "config": file, "method": args.method, "variant": args.variant.to_string(), "effective": cfg }),
        vec![cfg.seed],
        vec![args.config.into(), args.checkpoint.into(), args.data.into()],
        vec![args.out.into()],
    );
    write_json(&manifest, &args.out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Scores one or more adaptation runs (for example, one per seed) against
/// the cohort labels. Writes `metrics.json`, `table.txt` and a manifest
/// into `out`.
pub fn evaluate(data: &Path, runs: &[PathBuf], name: &str, out: &Path) -> Result<(MetricsReport, String)> {
    let clock = RunClock::start();
    let cohort = read_cohort(data)?;
    let labels = load_cohort_labels(data, &cohort)?;
    let spacing = cohort.spec.spacing;
    let mut per_run = Vec::with_capacity(runs.len());
    for run in runs {
        let pred_dir = run.join("predictions");
        let present = fs::read_dir(&pred_dir).map(|d| d.count()).unwrap_or(0);
        if present == 0 {
            bail!("no predictions in {}", pred_dir.display());
        }
        let mut metrics = Vec::with_capacity(cohort.cases.len());
        for (case, gt) in cohort.cases.iter().zip(&labels) {
            let (p, _) = load_probabilities(case_path(run, "predictions", &case.id))
                .with_context(|| format!("prediction for {} in {}", case.id, run.display()))?;
            metrics.push(evaluate_case(&case.id, &binarize(&p, 0.5), gt, spacing)?);
        }
        per_run.push(metrics);
    }
    let report = macro_report(&per_run)?;
    let table = format_table(&[(name.to_owned(), report.clone())]);
    create_dir(out)?;
    write_json(&report, &out.join("metrics.json"))?;
    fs::write(out.join("table.txt"), &table)?;
    let manifest = clock.finish(
        "evaluate",
        json!({ "name": name }),
        vec![],
        std::iter::once(data.to_path_buf()).chain(runs.iter().cloned()).collect(),
        vec![out.into()],
    );
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    Ok((report, table))
}
