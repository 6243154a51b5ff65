//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::merge::DEFAULT_MERGE_THRESHOLD;
use crate::data::TEXT_EMBEDDING_DIM;
use crate::error::{Error, Result};
use crate::model::{BackboneScale, CbnGranularity, ModelConfig, CBN_BLOCKS};
use crate::objectives::{LossKind, ScoreMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Aggregated JSON lines (ad data) or an AVA-style rating file.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub images: Option<PathBuf>,
    /// Precomputed text embeddings (binary plus JSON sidecar); uncached texts use the stub.
    pub embedding_cache: Option<PathBuf>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub validation_fraction: f64,
    pub merge_threshold: u64,
    pub anova: bool,
    pub embedder_seed: u64,
    pub text_dim: usize,
    pub lognormal_shape: f64,
    pub tag_slots: usize,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" | "O" | "o" => Ok(true),
        "false" | "no" | "off" | "0" | "×" | "x" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_mask(v: &str) -> Result<[bool; CBN_BLOCKS]> {
    let bits: Vec<&str> = v
        .trim_matches(|c| c == '{' || c == '}')
        .split(',')
        .map(str::trim)
        .collect();
    if bits.len() != CBN_BLOCKS {
        return Err(Error::Config(format!("cbn_block_mask needs {CBN_BLOCKS} flags, got {v:?}")));
    }
    let mut mask = [false; CBN_BLOCKS];
    for (m, b) in mask.iter_mut().zip(bits) {
        *m = parse_bool("cbn_block_mask", b)?;
    }
    Ok(mask)
}

impl RunConfig {
    /// Desk-scale defaults for `scale = tiny`, 224 px VGG19-scale defaults for `scale = full`.
    pub fn defaults(scale: BackboneScale) -> Self {
        let (lr, batch, epochs, merge) = match scale {
            BackboneScale::Tiny => (1e-3, 32, 20, 5_000),
            BackboneScale::Full => (1e-4, 128, 100, DEFAULT_MERGE_THRESHOLD),
        };
        Self {
            train_data: None,
            test_data: None,
            images: None,
            embedding_cache: None,
            out: PathBuf::from("runs"),
            model: ModelConfig::for_scale(scale, 0),
            optimizer: OptimizerKind::Adam,
            learning_rate: lr,
            batch_size: batch,
            epochs,
            seed: 0,
            loss: LossKind::WeightedMse,
            validation_fraction: 0.1,
            merge_threshold: merge,
            anova: true,
            embedder_seed: 0,
            text_dim: TEXT_EMBEDDING_DIM,
            lognormal_shape: crate::data::distribution::DEFAULT_LOGNORMAL_SHAPE,
            tag_slots: 2,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. A `scale` key, wherever it appears,
    /// selects the defaults the other keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let scale = match pairs.iter().rev().find(|(k, _)| k == "scale") {
            Some((_, v)) => BackboneScale::parse(v)?,
            None => BackboneScale::Tiny,
        };
        let mut cfg = Self::defaults(scale);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are taken relative to the file's directory
    /// and made absolute, so the configuration can be copied elsewhere.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = std::path::absolute(path)
            .map_err(|e| Error::file(path, e))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        for p in [&mut cfg.train_data, &mut cfg.test_data, &mut cfg.images, &mut cfg.embedding_cache]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies one key. Changing `scale` resets the scale-dependent model widths.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "train_data" => self.train_data = Some(PathBuf::from(v)),
            "test_data" => self.test_data = Some(PathBuf::from(v)),
            "images" => self.images = Some(PathBuf::from(v)),
            "embedding_cache" => self.embedding_cache = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "scale" => {
                let scale = BackboneScale::parse(v)?;
                if scale != m.backbone_scale {
                    let preset = ModelConfig::for_scale(scale, m.dim_aux);
                    m.backbone_scale = scale;
                    m.cbn_hidden = preset.cbn_hidden;
                    m.att_hidden = preset.att_hidden;
                    m.high_hidden = preset.high_hidden;
                    m.head_hidden = preset.head_hidden;
                }
            }
            "use_aux" => m.use_aux = parse_bool(key, v)?,
            "use_cbn" => {
                let on = parse_bool(key, v)?;
                *m = m.clone().with_modules(m.use_aux, on, m.use_attention, m.use_high_fusion);
            }
            "use_attention" => m.use_attention = parse_bool(key, v)?,
            "use_high_fusion" => m.use_high_fusion = parse_bool(key, v)?,
            "cbn_block_mask" => m.cbn_block_mask = parse_mask(v)?,
            "cbn_granularity" => {
                m.cbn_granularity = match v {
                    "first_conv" => CbnGranularity::FirstConv,
                    "whole_block" => CbnGranularity::WholeBlock,
                    _ => return Err(Error::Config(format!("cbn_granularity: unknown value {v:?}"))),
                }
            }
            "cbn_hidden" => m.cbn_hidden = parse_num(key, v)?,
            "att_hidden" => m.att_hidden = parse_num(key, v)?,
            "high_hidden" => m.high_hidden = parse_num(key, v)?,
            "head_hidden" => m.head_hidden = parse_num(key, v)?,
            "bn_epsilon" => m.bn_epsilon = parse_num(key, v)?,
            "bn_momentum" => m.bn_momentum = parse_num(key, v)?,
            "output_mode" => {
                m.output_mode = match v {
                    "regression" => ScoreMode::Regression,
                    "distribution" => ScoreMode::Distribution,
                    _ => return Err(Error::Config(format!("output_mode: unknown value {v:?}"))),
                }
            }
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::Config(format!("optimizer: unsupported {v:?} (only adam)"))),
                }
            }
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "loss" => self.set_loss(LossKind::parse(v).map_err(|e| Error::Config(e.to_string()))?),
            "validation_fraction" => self.validation_fraction = parse_num(key, v)?,
            "merge_threshold" => self.merge_threshold = parse_num(key, v)?,
            "anova" => self.anova = parse_bool(key, v)?,
            "embedder_seed" => self.embedder_seed = parse_num(key, v)?,
            "text_dim" => self.text_dim = parse_num(key, v)?,
            "lognormal_shape" => self.lognormal_shape = parse_num(key, v)?,
            "tag_slots" => self.tag_slots = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Sets the loss and the output mode it implies.
    pub fn set_loss(&mut self, loss: LossKind) {
        self.loss = loss;
        self.model.output_mode = loss.mode();
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss.mode() != self.model.output_mode {
            return Err(Error::Config(format!(
                "loss {} does not fit output_mode {:?}",
                self.loss.name(),
                self.model.output_mode
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch statistics)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.text_dim == 0 || self.tag_slots == 0 {
            return Err(Error::Config("text_dim and tag_slots must be positive".into()));
        }
        let mut m = self.model.clone();
        m.dim_aux = m.dim_aux.max(1);
        m.validate()
    }

    /// Serializes back to the flat format; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = &self.train_data {
            kv("train_data", p.display().to_string());
        }
        if let Some(p) = &self.test_data {
            kv("test_data", p.display().to_string());
        }
        if let Some(p) = &self.images {
            kv("images", p.display().to_string());
        }
        if let Some(p) = &self.embedding_cache {
            kv("embedding_cache", p.display().to_string());
        }
        kv("out", self.out.display().to_string());
        kv("scale", m.backbone_scale.name().into());
        kv("loss", self.loss.name().into());
        kv("use_aux", m.use_aux.to_string());
        kv("use_cbn", m.use_cbn.to_string());
        kv("use_attention", m.use_attention.to_string());
        kv("use_high_fusion", m.use_high_fusion.to_string());
        kv("cbn_block_mask", m.mask_label());
        kv(
            "cbn_granularity",
            match m.cbn_granularity {
                CbnGranularity::FirstConv => "first_conv",
                CbnGranularity::WholeBlock => "whole_block",
            }
            .into(),
        );
        kv("cbn_hidden", m.cbn_hidden.to_string());
        kv("att_hidden", m.att_hidden.to_string());
        kv("high_hidden", m.high_hidden.to_string());
        kv("head_hidden", m.head_hidden.to_string());
        kv("bn_epsilon", format!("{:e}", m.bn_epsilon));
        kv("bn_momentum", m.bn_momentum.to_string());
        kv("optimizer", "adam".into());
        kv("learning_rate", format!("{:e}", self.learning_rate));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("validation_fraction", self.validation_fraction.to_string());
        kv("merge_threshold", self.merge_threshold.to_string());
        kv("anova", self.anova.to_string());
        kv("embedder_seed", self.embedder_seed.to_string());
        kv("text_dim", self.text_dim.to_string());
        kv("lognormal_shape", self.lognormal_shape.to_string());
        kv("tag_slots", self.tag_slots.to_string());
        s
    }
}
