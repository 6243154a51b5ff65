//! Training loop, prediction and checkpoint evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{Prepared, Preprocessor};
use crate::error::{Error, Result};
use crate::model::{Adam, Checkpoint, Mode, ModelConfig, Network, Weights};
use crate::objectives::{evaluate, LossBatch, LossKind, MetricReport, ScoreMode, Scores};

pub const CHECKPOINT_FILE: &str = "checkpoint.m2fn";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub sprc_mean: f64,
    pub lcc_mean: f64,
    pub sprc_std: Option<f64>,
    pub lcc_std: Option<f64>,
    /// Whether this epoch produced the retained checkpoint.
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: Option<PathBuf>,
}

/// Contents of a checkpoint's free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointExtra {
    pub preprocessor: Preprocessor,
    pub epoch: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl CheckpointExtra {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint lacks preprocessing state: {e}")))
    }
}

fn loss_batch<'a>(
    mode: ScoreMode,
    output: &'a Array2<f64>,
    targets: &'a Array2<f64>,
    weights: &'a ndarray::Array1<f64>,
) -> Result<LossBatch<'a>> {
    match mode {
        ScoreMode::Regression => LossBatch::regression_view(output.view(), targets.view(), weights.view()),
        ScoreMode::Distribution => LossBatch::distribution(output.view(), targets.view()),
    }
}

/// Model outputs for every instance, in order, using running statistics.
pub fn predict(net: &Network, weights: &Weights, data: &Prepared) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.len(), net.config().output_dim()));
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let b = data.batch(chunk);
        let f = net.forward(weights, &b.images, Some(b.aux.view()), Mode::Eval)?;
        for (k, &i) in chunk.iter().enumerate() {
            out.row_mut(i).assign(&f.output.row(k));
        }
    }
    Ok(out)
}

pub fn report_for(predictions: &Array2<f64>, data: &Prepared) -> Result<MetricReport> {
    match data.mode {
        ScoreMode::Regression => {
            let p: Vec<f64> = predictions.column(0).to_vec();
            let t: Vec<f64> = data.targets.column(0).to_vec();
            evaluate(Scores::Scalars(&p), Scores::Scalars(&t))
        }
        ScoreMode::Distribution => evaluate(Scores::Distributions(predictions.view()), Scores::Distributions(data.targets.view())),
    }
}

/// Loss over a whole dataset, averaged per instance.
pub fn dataset_loss(loss: LossKind, predictions: &Array2<f64>, data: &Prepared) -> Result<f64> {
    let (v, _) = loss.value_and_grad(&loss_batch(data.mode, predictions, &data.targets, &data.weights)?)?;
    Ok(v)
}

/// Evaluates a checkpoint on prepared data, refusing mismatched score modes.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Prepared) -> Result<MetricReport> {
    if ckpt.config.output_mode != data.mode {
        return Err(Error::ModeMismatch("checkpoint output mode differs from the dataset's"));
    }
    let net = ckpt.network()?;
    report_for(&predict(&net, &ckpt.weights, data)?, data)
}

/// Splits indices into shuffled batches; a trailing batch of one joins the previous batch.
fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn zero_undefined(r: Result<MetricReport>, epoch: usize) -> Result<MetricReport> {
    match r {
        Ok(r) => Ok(r),
        Err(Error::UndefinedCorrelation(why)) => {
            log::warn!("epoch {epoch}: correlation undefined ({why}); recording 0");
            Ok(MetricReport {
                sprc_mean: 0.0,
                lcc_mean: 0.0,
                sprc_std: None,
                lcc_std: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// The model configuration a run uses once the auxiliary width is known.
pub fn resolved_model(run: &RunConfig, pre: &Preprocessor) -> ModelConfig {
    let mut m = run.model.clone();
    m.dim_aux = pre.dim_aux();
    m
}

/// Trains on `train`, selects the epoch with the best SPRC(mean) on `val` (the training set
/// when `val` is empty), and writes the checkpoint and epoch log under `out` when given.
///
/// A non-finite loss or gradient aborts with [`Error::NumericFailure`]; the last good
/// checkpoint stays on disk.
pub fn train(run: &RunConfig, pre: &Preprocessor, train: &Prepared, val: &Prepared, out: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("training needs at least two instances"));
    }
    if train.mode != run.model.output_mode {
        return Err(Error::ModeMismatch("training data mode differs from the model output mode"));
    }
    let val = if val.is_empty() { train } else { val };
    let config = resolved_model(run, pre);
    let net = Network::new(config.clone())?;
    let mut weights = net.init(run.seed);
    if config.output_mode == ScoreMode::Regression {
        let w = &train.weights;
        let mean = (w * &train.targets.column(0)).sum() / w.sum();
        net.set_output_bias(&mut weights, mean)?;
    }
    let mut opt = Adam::new(&weights.params, run.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x0005_EED0_FBA7_C4E5);

    let mut log_writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let p = dir.join(EPOCH_LOG_FILE);
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::file(&p, e))?))
        }
        None => None,
    };
    let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));
    let make_ckpt = |weights: &Weights, epoch: usize| {
        let mut w = weights.clone();
        w.params.round_to_f32();
        w.buffers.round_to_f32();
        let extra = CheckpointExtra {
            preprocessor: pre.clone(),
            epoch,
            seed: run.seed,
            loss: run.loss,
        };
        Checkpoint::new(config.clone(), w, serde_json::to_value(extra).expect("serializable"))
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 0..run.epochs.max(1) {
        let mut total = 0.0;
        for (bi, idx) in batches(train.len(), run.batch_size, &mut rng).iter().enumerate() {
            let b = train.batch(idx);
            let f = net.forward(&weights, &b.images, Some(b.aux.view()), Mode::Train)?;
            let lb = loss_batch(config.output_mode, &f.output, &b.targets, &b.weights)?;
            let (loss, d_out) = run.loss.value_and_grad(&lb)?;
            let grads = if loss.is_finite() {
                Some(net.backward(&weights, &f, d_out.view())?)
            } else {
                None
            };
            match grads {
                Some(g) if g.params.all_finite() => {
                    opt.step(&mut weights.params, &g.params)?;
                    net.update_running_stats(&mut weights, &f.batch_stats)?;
                    total += loss * idx.len() as f64;
                }
                _ => {
                    if best.is_none() {
                        if let Some(p) = &ckpt_path {
                            make_ckpt(&weights, epoch).save(p)?;
                        }
                    }
                    log::error!("non-finite loss or gradient at epoch {epoch}, batch {bi}");
                    return Err(Error::NumericFailure { epoch, batch: bi });
                }
            }
        }
        if !weights.params.all_finite() {
            return Err(Error::NumericFailure { epoch, batch: 0 });
        }
        let train_loss = total / train.len() as f64;
        let preds = predict(&net, &weights, val)?;
        let val_loss = dataset_loss(run.loss, &preds, val)?;
        if !val_loss.is_finite() {
            return Err(Error::NumericFailure { epoch, batch: 0 });
        }
        let report = zero_undefined(report_for(&preds, val), epoch)?;
        let improved = best.as_ref().is_none_or(|(s, _, _)| report.sprc_mean > *s);
        if improved {
            let ck = make_ckpt(&weights, epoch);
            if let Some(p) = &ckpt_path {
                ck.save(p)?;
            }
            best = Some((report.sprc_mean, epoch, ck));
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            sprc_mean: report.sprc_mean,
            lcc_mean: report.lcc_mean,
            sprc_std: report.sprc_std,
            lcc_std: report.lcc_std,
            best: improved,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} sprc {:.4} lcc {:.4}",
            rec.sprc_mean,
            rec.lcc_mean
        );
        if let Some(w) = log_writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(rec);
    }
    let (_, best_epoch, checkpoint) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        log,
        best_epoch,
        checkpoint,
        checkpoint_path: ckpt_path,
    })
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Per-instance dump used to cross-check evaluation.
pub fn predictions_table(predictions: &Array2<f64>, data: &Prepared) -> Vec<serde_json::Value> {
    predictions
        .axis_iter(Axis(0))
        .zip(&data.keys)
        .enumerate()
        .map(|(i, (p, k))| {
            serde_json::json!({
                "key": k,
                "prediction": p.to_vec(),
                "target": data.targets.row(i).to_vec(),
            })
        })
        .collect()
}
