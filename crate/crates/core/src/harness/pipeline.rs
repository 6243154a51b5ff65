//! File-level workflows behind the command-line verbs and the Python bindings.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::ablation::{run_ablation_grid, AblationTable, ModelDelta};
use super::config::RunConfig;
use super::dataset::{load_records, load_run_data, ImageStore, Prepared, Preprocessor, Records};
use super::gradcam::{gradcam_instance, CamTarget, Heatmap};
use super::plot::plot_overlay;
use super::train::{evaluate_checkpoint, predict, predictions_table, train, CheckpointExtra, TrainOutcome};
use crate::data::io::write_aggregated;
use crate::data::{generate_synthetic_dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{BackboneScale, Checkpoint};
use crate::objectives::MetricReport;

pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const HEATMAP_SUFFIX: &str = ".heatmap.json";

/// A run's data after preprocessing: fit and validation parts of the training file, and the
/// test file when one is configured.
pub struct Session {
    pub run: RunConfig,
    pub preprocessor: Preprocessor,
    pub fit: Prepared,
    pub val: Prepared,
    pub test: Option<Prepared>,
}

pub fn prepare(run: &RunConfig) -> Result<Session> {
    run.validate()?;
    let mut data = load_run_data(run)?;
    prepare_records(run, &data.train, data.test.as_ref(), &mut data.images)
}

pub fn prepare_records(run: &RunConfig, train: &Records, test: Option<&Records>, images: &mut ImageStore) -> Result<Session> {
    let preprocessor = Preprocessor::fit(train, images, run)?;
    let all = preprocessor.transform(train, images)?;
    let (fit, val) = all.validation_split(run.validation_fraction);
    let test = test.map(|t| preprocessor.transform(t, images)).transpose()?;
    Ok(Session {
        run: run.clone(),
        preprocessor,
        fit,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub best_epoch: usize,
    pub validation: MetricReport,
    pub test: Option<MetricReport>,
    pub checkpoint: Option<PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::file(path, e))
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::file(path, e))
}

/// Trains a prepared session; with `out`, writes the run configuration, epoch log,
/// checkpoint, report and test predictions there.
pub fn train_session(session: &Session, out: Option<&Path>) -> Result<(TrainOutcome, RunReport)> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let p = dir.join(RUN_CONFIG_FILE);
        fs::write(&p, session.run.to_text()).map_err(|e| Error::file(&p, e))?;
    }
    let outcome = train(&session.run, &session.preprocessor, &session.fit, &session.val, out)?;
    let best = &outcome.log[outcome.best_epoch];
    let validation = MetricReport {
        sprc_mean: best.sprc_mean,
        lcc_mean: best.lcc_mean,
        sprc_std: best.sprc_std,
        lcc_std: best.lcc_std,
    };
    let test = match &session.test {
        Some(t) => Some(evaluate_checkpoint(&outcome.checkpoint, t)?),
        None => None,
    };
    let report = RunReport {
        best_epoch: outcome.best_epoch,
        validation,
        test,
        checkpoint: outcome.checkpoint_path.clone(),
    };
    if let Some(dir) = out {
        write_json(&dir.join(REPORT_FILE), &report)?;
        if let Some(t) = &session.test {
            let net = outcome.checkpoint.network()?;
            let preds = predict(&net, &outcome.checkpoint.weights, t)?;
            write_jsonl(&dir.join(PREDICTIONS_FILE), &predictions_table(&preds, t))?;
        }
    }
    Ok((outcome, report))
}

pub fn train_run(run: &RunConfig) -> Result<(TrainOutcome, RunReport)> {
    let session = prepare(run)?;
    train_session(&session, Some(&run.out))
}

fn image_dir_for(data: &Path, images: Option<&Path>) -> PathBuf {
    images
        .map(Path::to_path_buf)
        .or_else(|| data.parent().map(|p| p.join("images")))
        .unwrap_or_else(|| PathBuf::from("images"))
}

/// Rebuilds a checkpoint's inputs for `data` using the preprocessing state stored with it.
pub fn prepare_for_checkpoint(ckpt: &Checkpoint, data: &Path, images: Option<&Path>) -> Result<(Prepared, ImageStore)> {
    let extra = CheckpointExtra::from_checkpoint(ckpt)?;
    let records = load_records(data)?;
    let mut store = ImageStore::from_dir(image_dir_for(data, images));
    let prepared = extra.preprocessor.transform(&records, &mut store)?;
    Ok((prepared, store))
}

/// Scores a saved checkpoint on a data file; with `out`, writes the report and predictions.
pub fn eval_run(checkpoint: &Path, data: &Path, images: Option<&Path>, out: Option<&Path>) -> Result<MetricReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (prepared, _) = prepare_for_checkpoint(&ckpt, data, images)?;
    let report = evaluate_checkpoint(&ckpt, &prepared)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        let net = ckpt.network()?;
        let preds = predict(&net, &ckpt.weights, &prepared)?;
        write_jsonl(&dir.join(PREDICTIONS_FILE), &predictions_table(&preds, &prepared))?;
    }
    Ok(report)
}

/// Runs an ablation grid on the run's data, scoring each row on the test file (or on the
/// validation part when there is none).
pub fn ablate_run(run: &RunConfig, grid: &[ModelDelta], jobs: usize) -> Result<AblationTable> {
    let session = prepare(run)?;
    let test = session.test.as_ref().unwrap_or(&session.val);
    let val = if session.test.is_some() { &session.val } else { &session.fit };
    run_ablation_grid(run, &session.preprocessor, &session.fit, val, test, grid, Some(&run.out), jobs)
}

/// A heatmap plus the image it explains, as written next to its overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub instance: String,
    pub image_id: String,
    pub image_path: Option<PathBuf>,
    pub heatmap: Heatmap,
}

impl HeatmapExport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn source_image(&self) -> Result<RgbImage> {
        let p = self
            .image_path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("no source image recorded for {}", self.image_id)))?;
        Ok(image::open(p)?.to_rgb8())
    }
}

fn find_instance(data: &Prepared, instance: &str) -> Result<usize> {
    if let Some(i) = data.keys.iter().position(|k| k == instance) {
        return Ok(i);
    }
    match instance.parse::<usize>() {
        Ok(i) if i < data.len() => Ok(i),
        _ => Err(Error::invalid(format!("no instance {instance:?} (give a key or an index below {})", data.len()))),
    }
}

fn image_path(dir: &Path, id: &str) -> Option<PathBuf> {
    [String::new(), ".png".into(), ".jpg".into(), ".jpeg".into()]
        .iter()
        .map(|ext| dir.join(format!("{id}{ext}")))
        .find(|p| p.is_file())
}

/// Grad-CAM for one instance of a data file (key, or row index); with `out`, writes the
/// heatmap JSON and its overlay on the source image.
pub fn gradcam_run(
    checkpoint: &Path,
    data: &Path,
    images: Option<&Path>,
    instance: &str,
    layer: &str,
    target: Option<CamTarget>,
    out: Option<&Path>,
) -> Result<HeatmapExport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ckpt.network()?;
    let (prepared, mut store) = prepare_for_checkpoint(&ckpt, data, images)?;
    let index = find_instance(&prepared, instance)?;
    let heatmap = gradcam_instance(&net, &ckpt.weights, &prepared, index, layer, target)?;
    let image_id = prepared.image_ids[index].clone();
    let export = HeatmapExport {
        instance: prepared.keys[index].clone(),
        image_path: image_path(&image_dir_for(data, images), &image_id),
        image_id,
        heatmap,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let safe = super::plot::heatmap_file(layer);
        let stem = safe.trim_end_matches(".png");
        write_json(&dir.join(format!("{stem}{HEATMAP_SUFFIX}")), &export)?;
        let source = store.get(&export.image_id)?.clone();
        plot_overlay(&export.heatmap, &source, dir)?;
    }
    Ok(export)
}

/// Writes a planted-effect dataset under `dir`: `images/`, `clicks.csv`, `aggregated.jsonl`,
/// an 80/20 hashed `train.jsonl`/`test.jsonl` split and a `run.cfg` pointing at them.
pub fn write_synthetic(dir: &Path, seed: u64, instances: usize, scale: BackboneScale) -> Result<RunConfig> {
    let mut cfg = SyntheticConfig::new(seed, instances);
    cfg.image_size = scale.input_size() as u32;
    let ds = generate_synthetic_dataset(&cfg)?;
    ds.write(dir)?;
    let aggregated = ds.aggregated();
    write_aggregated(&dir.join("aggregated.jsonl"), &aggregated)?;
    let (train, test) = Records::Ads(aggregated).hashed_split(0.2, "test");
    for (name, part) in [("train.jsonl", train), ("test.jsonl", test)] {
        let Records::Ads(v) = part else { unreachable!("ad records split into ad records") };
        write_aggregated(&dir.join(name), &v)?;
    }
    let mut run = RunConfig::defaults(scale);
    run.seed = seed;
    run.train_data = Some(PathBuf::from("train.jsonl"));
    run.test_data = Some(PathBuf::from("test.jsonl"));
    run.images = Some(PathBuf::from("images"));
    let p = dir.join(RUN_CONFIG_FILE);
    fs::write(&p, run.to_text()).map_err(|e| Error::file(&p, e))?;
    Ok(run)
}
