//! `m2fn` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure
//! (non-finite loss), 4 nothing to plot.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2fn_core::data::io::{aggregate_click_file, write_aggregated};
use m2fn_core::data::Aggregator;
use m2fn_core::harness::ablation::parse_grid;
use m2fn_core::harness::pipeline::{ablate_run, eval_run, gradcam_run, train_run, write_synthetic, HeatmapExport, HEATMAP_SUFFIX};
use m2fn_core::harness::plot::{plot_ablation, plot_loss_curve, plot_overlay};
use m2fn_core::harness::train::{read_epoch_log, EPOCH_LOG_FILE};
use m2fn_core::harness::{AblationTable, CamTarget, RunConfig};
use m2fn_core::model::BackboneScale;
use m2fn_core::objectives::LossKind;
use m2fn_core::Error;

#[derive(Parser)]
#[command(name = "m2fn", version, about = "Multi-step modality fusion for image assessment")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Backbone scale: tiny (32 px desk defaults) or full (224 px VGG19)
    #[arg(long, global = true)]
    scale: Option<String>,
    /// wmse (regression head), kld or emd (distribution head)
    #[arg(long, global = true)]
    loss: Option<String>,
    /// Output directory (file for `aggregate`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate click logs (CSV or JSON lines) into per-key CTR instances
    Aggregate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_impressions: u64,
    },
    /// Generate a planted-effect synthetic dataset with a ready run.cfg
    Synth {
        #[arg(long, default_value_t = 2000)]
        instances: usize,
    },
    /// Train and keep the checkpoint with the best validation SPRC
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a data file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Run a module-switch or CBN block-mask ablation grid
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// `modules` (8 switch rows) or `masks` (6 block masks)
        #[arg(long, default_value = "modules")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Grad-CAM heatmap for one instance at a backbone layer
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Instance key or row index
        #[arg(long, default_value = "0")]
        instance: String,
        #[arg(long, default_value = "block5")]
        layer: String,
        /// Bucket to explain for distribution heads (default: most probable)
        #[arg(long)]
        bucket: Option<usize>,
    },
    /// Render epoch logs, ablation tables and heatmaps as PNG files
    Plot {
        /// Files or run directories
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Training data (aggregated JSON lines or AVA-style ratings)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::Config(_) | Error::UnknownLayer { .. }) => 1,
            Failure::Core(Error::NumericFailure { .. }) => 3,
            Failure::Core(Error::NothingToPlot) => 4,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

fn scale_of(common: &Common) -> std::result::Result<Option<BackboneScale>, Failure> {
    common
        .scale
        .as_deref()
        .map(|s| BackboneScale::parse(s).map_err(|e| usage(e.to_string())))
        .transpose()
}

/// Config file (or scale defaults), then command-line overrides.
fn run_config(common: &Common, data: Option<&DataArgs>, epochs: Option<usize>) -> std::result::Result<RunConfig, Failure> {
    let scale = scale_of(common)?;
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults(scale.unwrap_or(BackboneScale::Tiny)),
    };
    if let (Some(s), Some(_)) = (scale, &common.config) {
        run.set("scale", s.name())?;
    }
    if let Some(s) = common.seed {
        run.seed = s;
    }
    if let Some(l) = &common.loss {
        run.set_loss(LossKind::parse(l).map_err(|e| usage(e.to_string()))?);
    }
    if let Some(o) = &common.out {
        run.out = o.clone();
    }
    if let Some(e) = epochs {
        run.epochs = e;
    }
    if let Some(d) = data {
        if let Some(p) = &d.data {
            run.train_data = Some(p.clone());
        }
        if let Some(p) = &d.test {
            run.test_data = Some(p.clone());
        }
        if let Some(p) = &d.images {
            run.images = Some(p.clone());
        }
    }
    run.validate()?;
    if run.train_data.is_none() {
        return Err(usage("no training data: pass --data or set train_data in --config"));
    }
    Ok(run)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn aggregate(common: &Common, inputs: &[PathBuf], min_impressions: u64) -> Outcome {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("aggregated.jsonl"));
    let mut agg = Aggregator::new();
    for p in inputs {
        aggregate_click_file(p, &mut agg)?;
    }
    let seen = agg.records_seen();
    let instances = agg.finish(min_impressions)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::File {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    write_aggregated(&out, &instances)?;
    eprintln!("{seen} records -> {} instances in {}", instances.len(), out.display());
    Ok(())
}

fn synth(common: &Common, instances: usize) -> Outcome {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
    let scale = scale_of(common)?.unwrap_or(BackboneScale::Tiny);
    write_synthetic(&out, common.seed.unwrap_or(0), instances, scale)?;
    eprintln!("wrote {instances} instances to {}", out.display());
    Ok(())
}

/// Epoch logs, ablation tables and heatmap exports found at `p` (a file or a directory).
fn plot_inputs(p: &Path) -> std::result::Result<Vec<PathBuf>, Failure> {
    if p.is_dir() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::File {
                path: p.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| {
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name == EPOCH_LOG_FILE || name == "ablation.json" || name.ends_with(HEATMAP_SUFFIX)
            })
            .collect();
        found.sort();
        Ok(found)
    } else if p.exists() {
        Ok(vec![p.to_path_buf()])
    } else {
        Err(Failure::Core(Error::File {
            path: p.to_path_buf(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        }))
    }
}

fn plot(common: &Common, inputs: &[PathBuf]) -> Outcome {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("plots"));
    let mut files = Vec::new();
    for p in inputs {
        files.extend(plot_inputs(p)?);
    }
    let mut written = Vec::new();
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let result = if name.ends_with(HEATMAP_SUFFIX) {
            let export = HeatmapExport::load(f)?;
            plot_overlay(&export.heatmap, &export.source_image()?, &out)
        } else if name.ends_with(".jsonl") {
            plot_loss_curve(&read_epoch_log(f)?, &out)
        } else {
            let text = std::fs::read_to_string(f).map_err(|e| Error::File {
                path: f.clone(),
                source: e,
            })?;
            let table: AblationTable = serde_json::from_str(&text).map_err(Error::from)?;
            plot_ablation(&table, &out)
        };
        match result {
            Ok(p) => written.push(p),
            Err(Error::NothingToPlot) => eprintln!("{}: nothing to plot", f.display()),
            Err(e) => return Err(e.into()),
        }
    }
    if written.is_empty() {
        return Err(Error::NothingToPlot.into());
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    let common = &cli.common;
    match &cli.command {
        Command::Aggregate { inputs, min_impressions } => aggregate(common, inputs, *min_impressions),
        Command::Synth { instances } => synth(common, *instances),
        Command::Train { data, epochs } => {
            let run = run_config(common, Some(data), *epochs)?;
            let (_, report) = train_run(&run)?;
            print_json(&report);
            Ok(())
        }
        Command::Eval { checkpoint, data, images } => {
            let report = eval_run(checkpoint, data, images.as_deref(), common.out.as_deref())?;
            print_json(&report);
            Ok(())
        }
        Command::Ablate {
            data,
            epochs,
            grid,
            jobs,
        } => {
            let run = run_config(common, Some(data), *epochs)?;
            let grid = parse_grid(grid).map_err(|e| usage(e.to_string()))?;
            let table = ablate_run(&run, &grid, *jobs)?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Gradcam {
            checkpoint,
            data,
            images,
            instance,
            layer,
            bucket,
        } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("gradcam"));
            let target = bucket.map(CamTarget::Bucket);
            let export = gradcam_run(checkpoint, data, images.as_deref(), instance, layer, target, Some(&out))?;
            eprintln!(
                "{} ({}) at {} -> {}",
                export.instance,
                export.image_id,
                export.heatmap.layer_name,
                out.display()
            );
            Ok(())
        }
        Command::Plot { inputs } => plot(common, inputs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
