//! Module-switch and CBN block-mask ablation grids.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{Prepared, Preprocessor};
use super::train::{evaluate_checkpoint, train};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, CBN_BLOCKS};
use crate::objectives::MetricReport;

/// A change applied to the base model configuration for one grid row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelDelta {
    /// `[aux, cbn, attention, high_fusion]`.
    Modules([bool; 4]),
    Mask([bool; CBN_BLOCKS]),
}

impl ModelDelta {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        match *self {
            ModelDelta::Modules([a, c, t, h]) => base.clone().with_modules(a, c, t, h),
            ModelDelta::Mask(m) => base.clone().with_modules(true, true, true, true).with_mask(m),
        }
    }

    pub fn label(&self, base: &ModelConfig) -> String {
        let m = self.apply(base);
        match self {
            ModelDelta::Modules(_) => m.module_label(),
            ModelDelta::Mask(_) => m.mask_label(),
        }
    }
}

/// The eight module-switch rows, from the pure image pipeline to everything on.
pub fn module_grid() -> Vec<ModelDelta> {
    ["××××", "O×××", "OO××", "O×O×", "O××O", "OOO×", "OO×O", "OOOO"]
        .iter()
        .map(|s| {
            let mut bits = [false; 4];
            for (b, c) in bits.iter_mut().zip(s.chars()) {
                *b = c == 'O';
            }
            ModelDelta::Modules(bits)
        })
        .collect()
}

/// Six CBN placements with the other modules on.
pub fn mask_grid() -> Vec<ModelDelta> {
    [
        [1, 1, 1, 1, 1],
        [0, 0, 0, 0, 1],
        [0, 0, 1, 1, 1],
        [0, 0, 1, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 0, 0, 0, 0],
    ]
    .iter()
    .map(|m| ModelDelta::Mask(m.map(|b| b == 1)))
    .collect()
}

pub fn parse_grid(name: &str) -> Result<Vec<ModelDelta>> {
    match name {
        "modules" => Ok(module_grid()),
        "masks" => Ok(mask_grid()),
        other => Err(Error::invalid(format!("unknown grid `{other}` (expected modules or masks)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub label: String,
    pub delta: ModelDelta,
    pub best_epoch: Option<usize>,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Successful rows by descending SPRC(mean), ties by grid order, then failed rows.
    pub fn ranked(&self) -> Vec<&AblationRow> {
        let mut ok: Vec<&AblationRow> = self.rows.iter().filter(|r| r.report.is_some()).collect();
        ok.sort_by(|a, b| {
            let (x, y) = (a.report.as_ref().expect("filtered"), b.report.as_ref().expect("filtered"));
            y.sprc_mean.total_cmp(&x.sprc_mean).then(a.index.cmp(&b.index))
        });
        ok.extend(self.rows.iter().filter(|r| r.report.is_none()));
        ok
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("rank\tconfig\tsprc\tlcc\tbest_epoch\n");
        for (i, r) in self.ranked().into_iter().enumerate() {
            match (&r.report, &r.error) {
                (Some(m), _) => {
                    let _ = writeln!(
                        s,
                        "{}\t{}\t{:.4}\t{:.4}\t{}",
                        i + 1,
                        r.label,
                        m.sprc_mean,
                        m.lcc_mean,
                        r.best_epoch.map_or("-".into(), |e| e.to_string())
                    );
                }
                (None, e) => {
                    let _ = writeln!(s, "-\t{}\tfailed: {}", r.label, e.as_deref().unwrap_or("unknown"));
                }
            }
        }
        s
    }
}

fn run_row(
    index: usize,
    delta: &ModelDelta,
    base: &RunConfig,
    pre: &Preprocessor,
    data: (&Prepared, &Prepared, &Prepared),
    out: Option<&Path>,
) -> AblationRow {
    let label = delta.label(&base.model);
    let mut run = base.clone();
    run.model = delta.apply(&base.model);
    let dir = out.map(|o| o.join(format!("{index:02}")));
    let (fit, val, test) = data;
    let result = train(&run, pre, fit, val, dir.as_deref())
        .and_then(|o| evaluate_checkpoint(&o.checkpoint, test).map(|r| (o.best_epoch, r)));
    match result {
        Ok((epoch, report)) => AblationRow {
            index,
            label,
            delta: delta.clone(),
            best_epoch: Some(epoch),
            report: Some(report),
            error: None,
        },
        Err(e) => {
            log::warn!("ablation row {index} ({label}) failed: {e}");
            AblationRow {
                index,
                label,
                delta: delta.clone(),
                best_epoch: None,
                report: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Trains every grid row with the same seed and data, scoring each on `test`.
///
/// A failing row is recorded with its error and the rest of the grid still runs. Rows run
/// on up to `jobs` threads, each writing under its own `out/NN` directory.
pub fn run_ablation_grid(
    base: &RunConfig,
    pre: &Preprocessor,
    fit: &Prepared,
    val: &Prepared,
    test: &Prepared,
    grid: &[ModelDelta],
    out: Option<&Path>,
    jobs: usize,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    let jobs = jobs.clamp(1, grid.len());
    let data = (fit, val, test);
    let mut rows: Vec<AblationRow> = if jobs == 1 {
        grid.iter().enumerate().map(|(i, d)| run_row(i, d, base, pre, data, out)).collect()
    } else {
        let indexed: Vec<(usize, &ModelDelta)> = grid.iter().enumerate().collect();
        let per = indexed.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = indexed
                .chunks(per)
                .map(|chunk| s.spawn(move || chunk.iter().map(|&(i, d)| run_row(i, d, base, pre, data, out)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("ablation worker panicked")).collect()
        })
    };
    rows.sort_by_key(|r| r.index);
    let table = AblationTable { rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let p = dir.join("ablation.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&table)?).map_err(|e| Error::file(&p, e))?;
        let p = dir.join("ablation.tsv");
        std::fs::write(&p, table.to_text()).map_err(|e| Error::file(&p, e))?;
    }
    Ok(table)
}
