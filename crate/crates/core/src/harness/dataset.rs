//! Turns aggregated ad instances or AVA-style entries into model-ready tensors.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::ava::{load_ava_style, AvaEntry, Split};
use crate::data::color::{dominant_color, ColorPalette, DEFAULT_CLUSTERS};
use crate::data::distribution::{lognormal_distribution, BucketEdges};
use crate::data::embedding::{CachedEmbedder, EmbeddingCache, EmbeddingProvider, StubEmbedder};
use crate::data::encode::{encode_auxiliary, encode_tags, AuxFields, AuxLayout, BlockKind};
use crate::data::io::read_aggregated;
use crate::data::split::hashed_selection;
use crate::data::{anova_screen, AggregatedInstance, Attribute, MergeMaps};
use crate::error::{Error, Result};
use crate::objectives::ScoreMode;

/// Per-channel normalization applied to `[0, 1]` pixel values.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Images by id, loaded on first use from a directory or supplied in memory.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    dir: Option<PathBuf>,
    images: HashMap<String, RgbImage>,
}

impl ImageStore {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            images: HashMap::new(),
        }
    }

    pub fn from_images(images: impl IntoIterator<Item = (String, RgbImage)>) -> Self {
        Self {
            dir: None,
            images: images.into_iter().collect(),
        }
    }

    fn resolve(dir: &Path, id: &str) -> Option<PathBuf> {
        let direct = dir.join(id);
        if direct.is_file() {
            return Some(direct);
        }
        ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
    }

    pub fn get(&mut self, id: &str) -> Result<&RgbImage> {
        if !self.images.contains_key(id) {
            let dir = self
                .dir
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("image {id:?} not available")))?;
            let path = Self::resolve(dir, id)
                .ok_or_else(|| Error::invalid(format!("no image file for {id:?} under {}", dir.display())))?;
            let img = image::open(&path)?.to_rgb8();
            self.images.insert(id.to_string(), img);
        }
        Ok(&self.images[id])
    }
}

/// Resizes to `size × size` and normalizes per channel into a `3 × size × size` tensor.
pub fn image_tensor(img: &RgbImage, size: usize) -> Array3<f64> {
    let s = size as u32;
    let resized;
    let img = if img.width() == s && img.height() == s {
        img
    } else {
        resized = image::imageops::resize(img, s, s, FilterType::Triangle);
        &resized
    };
    let mut t = Array3::zeros((3, size, size));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t[[c, y as usize, x as usize]] = (p.0[c] as f64 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Ads(Vec<AggregatedInstance>),
    Ava(Vec<AvaEntry>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Ads(v) => v.len(),
            Records::Ava(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<String> {
        match self {
            Records::Ads(v) => v.iter().map(|i| i.instance_key()).collect(),
            Records::Ava(v) => v.iter().map(|e| e.image_id.clone()).collect(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Records {
        match self {
            Records::Ads(v) => Records::Ads(idx.iter().map(|&i| v[i].clone()).collect()),
            Records::Ava(v) => Records::Ava(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    /// Deterministic split by hashed key: `(kept, held_out)` with exactly
    /// `floor(fraction · n)` held out. `salt` decorrelates different splits of the same data.
    pub fn hashed_split(&self, fraction: f64, salt: &str) -> (Records, Records) {
        let keys: Vec<String> = self.keys().iter().map(|k| format!("{salt}:{k}")).collect();
        let held = hashed_selection(&keys, fraction);
        let (a, b): (Vec<usize>, Vec<usize>) = (0..keys.len()).partition(|&i| !held[i]);
        (self.select(&a), self.select(&b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Ads,
    Ava,
}

/// Fitted preprocessing state, stored with checkpoints so evaluation reproduces inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub source: SourceKind,
    pub image_size: usize,
    pub mode: ScoreMode,
    pub merges: MergeMaps,
    pub layout: AuxLayout,
    /// Attributes removed by the ANOVA screen.
    pub dropped: Vec<Attribute>,
    pub edges: Option<BucketEdges>,
    pub lognormal_shape: f64,
    pub embedder_seed: u64,
    pub text_dim: usize,
    #[serde(default)]
    pub embedding_cache: Option<PathBuf>,
}

fn domcols(instances: &[AggregatedInstance], images: &mut ImageStore) -> Result<HashMap<String, u8>> {
    let palette = ColorPalette::standard();
    let mut out = HashMap::new();
    for inst in instances {
        if !out.contains_key(&inst.image_id) {
            let code = dominant_color(images.get(&inst.image_id)?, &palette, DEFAULT_CLUSTERS)?.code;
            out.insert(inst.image_id.clone(), code);
        }
    }
    Ok(out)
}

fn raw_level(inst: &AggregatedInstance, attr: Attribute, domcol: &HashMap<String, u8>) -> u8 {
    match attr {
        Attribute::Domcol => domcol[&inst.image_id],
        a => inst.attributes.get(a).expect("logged attribute"),
    }
}

/// Memoizes an embedder; the same few texts recur across many instances.
struct Memo<'a> {
    inner: &'a dyn EmbeddingProvider,
    cache: std::cell::RefCell<HashMap<String, Vec<f64>>>,
}

impl EmbeddingProvider for Memo<'_> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.borrow().get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.cache.borrow_mut().insert(text.to_string(), v.clone());
        Ok(v)
    }
}

impl Preprocessor {
    /// Fits merge maps, the ANOVA screen and (for distribution targets) CTR bucket edges on
    /// training instances.
    pub fn fit_ads(train: &[AggregatedInstance], images: &mut ImageStore, run: &RunConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("no training instances"));
        }
        let domcol = domcols(train, images)?;
        let mut counts: BTreeMap<Attribute, BTreeMap<u8, u64>> = BTreeMap::new();
        for inst in train {
            for attr in Attribute::ALL {
                *counts
                    .entry(attr)
                    .or_default()
                    .entry(raw_level(inst, attr, &domcol))
                    .or_default() += inst.impressions;
            }
        }
        let merges = MergeMaps::fit(&counts, run.merge_threshold)?;
        let mut dropped = Vec::new();
        if run.anova {
            let ctrs: Vec<f64> = train.iter().map(|i| i.ctr).collect();
            for attr in Attribute::ALL {
                let levels: Vec<u8> = train
                    .iter()
                    .map(|i| merges.map(attr, raw_level(i, attr, &domcol)))
                    .collect::<Result<_>>()?;
                match anova_screen(&levels, &ctrs) {
                    Ok(r) if r.keep => {}
                    Ok(r) => {
                        log::info!("dropping {} (F = {:.3}, p = {:.3})", attr.name(), r.f_statistic, r.p_value);
                        dropped.push(attr);
                    }
                    Err(e) => {
                        log::info!("dropping {}: {e}", attr.name());
                        dropped.push(attr);
                    }
                }
            }
        }
        let layout = AuxLayout::ad_attributes(&merges, run.text_dim).retain(|b| match &b.kind {
            BlockKind::OneHot { attribute, .. } => !dropped.contains(attribute),
            BlockKind::Text => true,
        });
        let mode = run.model.output_mode;
        let edges = match mode {
            ScoreMode::Distribution => Some(BucketEdges::from_ctr_deciles(
                &train.iter().map(|i| i.ctr).collect::<Vec<_>>(),
            )?),
            ScoreMode::Regression => None,
        };
        Ok(Self {
            source: SourceKind::Ads,
            image_size: run.model.backbone_scale.input_size(),
            mode,
            merges,
            layout,
            dropped,
            edges,
            lognormal_shape: run.lognormal_shape,
            embedder_seed: run.embedder_seed,
            text_dim: run.text_dim,
            embedding_cache: run.embedding_cache.clone(),
        })
    }

    pub fn for_ava(run: &RunConfig) -> Self {
        Self {
            source: SourceKind::Ava,
            image_size: run.model.backbone_scale.input_size(),
            mode: run.model.output_mode,
            merges: MergeMaps::identity(),
            layout: AuxLayout::tags(run.tag_slots, run.text_dim),
            dropped: Vec::new(),
            edges: None,
            lognormal_shape: run.lognormal_shape,
            embedder_seed: run.embedder_seed,
            text_dim: run.text_dim,
            embedding_cache: run.embedding_cache.clone(),
        }
    }

    pub fn fit(records: &Records, images: &mut ImageStore, run: &RunConfig) -> Result<Self> {
        match records {
            Records::Ads(v) => Self::fit_ads(v, images, run),
            Records::Ava(_) => Ok(Self::for_ava(run)),
        }
    }

    pub fn dim_aux(&self) -> usize {
        self.layout.dim()
    }

    fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>> {
        let stub = StubEmbedder::with_dim(self.embedder_seed, self.text_dim);
        Ok(match &self.embedding_cache {
            Some(path) => {
                let cache = EmbeddingCache::load(path)?;
                if cache.dim() != self.text_dim {
                    return Err(Error::Shape(format!(
                        "embedding cache has dimension {}, run expects {}",
                        cache.dim(), self.text_dim
                    )));
                }
                Box::new(CachedEmbedder::new(cache, Some(Box::new(stub))))
            }
            None => Box::new(stub),
        })
    }

    pub fn transform(&self, records: &Records, images: &mut ImageStore) -> Result<Prepared> {
        if records.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let base = self.embedder()?;
        let embedder = Memo {
            inner: base.as_ref(),
            cache: Default::default(),
        };
        let layout = Arc::new(self.layout.clone());
        let n = records.len();
        let out_dim = match self.mode {
            ScoreMode::Regression => 1,
            ScoreMode::Distribution => crate::data::distribution::BUCKETS,
        };
        let mut aux = Array2::zeros((n, layout.dim()));
        let mut targets = Array2::zeros((n, out_dim));
        let mut weights = Array1::zeros(n);
        let mut image_ids = Vec::with_capacity(n);
        match records {
            Records::Ads(v) => {
                if self.source != SourceKind::Ads {
                    return Err(Error::ModeMismatch("preprocessor was fitted on rating data, not ad instances"));
                }
                let domcol = domcols(v, images)?;
                for (i, inst) in v.iter().enumerate() {
                    let fields = AuxFields {
                        attributes: &inst.attributes,
                        domcol: domcol[&inst.image_id],
                    };
                    let a = encode_auxiliary(&fields, &self.merges, &layout, &embedder)?;
                    aux.row_mut(i).assign(&Array1::from(a.values));
                    match self.mode {
                        ScoreMode::Regression => targets[[i, 0]] = inst.ctr,
                        ScoreMode::Distribution => {
                            let edges = self.edges.as_ref().ok_or(Error::ModeMismatch("no bucket edges fitted"))?;
                            let d = lognormal_distribution(inst.ctr, inst.impressions, edges, self.lognormal_shape)?;
                            targets.row_mut(i).assign(&ndarray::ArrayView1::from(&d.buckets()[..]));
                        }
                    }
                    weights[i] = inst.impressions as f64;
                    image_ids.push(inst.image_id.clone());
                }
            }
            Records::Ava(v) => {
                if self.source != SourceKind::Ava {
                    return Err(Error::ModeMismatch("preprocessor was fitted on ad instances, not rating data"));
                }
                for (i, e) in v.iter().enumerate() {
                    let a = encode_tags(&e.tags, &layout, &embedder)?;
                    aux.row_mut(i).assign(&Array1::from(a.values));
                    match self.mode {
                        ScoreMode::Regression => targets[[i, 0]] = e.distribution.mean(),
                        ScoreMode::Distribution => targets
                            .row_mut(i)
                            .assign(&ndarray::ArrayView1::from(&e.distribution.buckets()[..])),
                    }
                    weights[i] = 1.0;
                    image_ids.push(e.image_id.clone());
                }
            }
        }
        let mut unique: Vec<String> = Vec::new();
        let mut pos: HashMap<String, usize> = HashMap::new();
        let image_index: Vec<usize> = image_ids
            .iter()
            .map(|id| {
                *pos.entry(id.clone()).or_insert_with(|| {
                    unique.push(id.clone());
                    unique.len() - 1
                })
            })
            .collect();
        let s = self.image_size;
        let mut tensor = Array4::zeros((unique.len(), 3, s, s));
        for (k, id) in unique.iter().enumerate() {
            tensor.index_axis_mut(Axis(0), k).assign(&image_tensor(images.get(id)?, s));
        }
        Ok(Prepared {
            keys: records.keys(),
            image_ids,
            images: Arc::new(tensor),
            image_index,
            aux,
            targets,
            weights,
            mode: self.mode,
        })
    }
}

/// Model inputs and targets for a set of instances. Distinct images are stored once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub keys: Vec<String>,
    pub image_ids: Vec<String>,
    pub images: Arc<Array4<f64>>,
    pub image_index: Vec<usize>,
    pub aux: Array2<f64>,
    pub targets: Array2<f64>,
    pub weights: Array1<f64>,
    pub mode: ScoreMode,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f64>,
    pub aux: Array2<f64>,
    pub targets: Array2<f64>,
    pub weights: Array1<f64>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((idx.len(), c, h, w));
        for (k, &i) in idx.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), k)
                .assign(&self.images.index_axis(Axis(0), self.image_index[i]));
        }
        Batch {
            images,
            aux: self.aux.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
            weights: self.weights.select(Axis(0), idx),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Prepared {
        Prepared {
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
            image_ids: idx.iter().map(|&i| self.image_ids[i].clone()).collect(),
            images: Arc::clone(&self.images),
            image_index: idx.iter().map(|&i| self.image_index[i]).collect(),
            aux: self.aux.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
            weights: self.weights.select(Axis(0), idx),
            mode: self.mode,
        }
    }

    /// Splits off the validation part by hashed key.
    pub fn validation_split(&self, fraction: f64) -> (Prepared, Prepared) {
        let keys: Vec<String> = self.keys.iter().map(|k| format!("validation:{k}")).collect();
        let held = hashed_selection(&keys, fraction);
        let (a, b): (Vec<usize>, Vec<usize>) = (0..keys.len()).partition(|&i| !held[i]);
        (self.subset(&a), self.subset(&b))
    }
}

/// Training and (optional) test records named by a run configuration.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Records,
    pub test: Option<Records>,
    pub images: ImageStore,
}

fn is_rating_file(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("txt") | Some("ava"))
}

/// Reads aggregated JSON lines, or an AVA-style rating file whose split column supplies the
/// test set when `test_data` is absent.
pub fn load_records(path: &Path) -> Result<Records> {
    if is_rating_file(path) {
        Ok(Records::Ava(load_ava_style(path)?))
    } else {
        Ok(Records::Ads(read_aggregated(path)?))
    }
}

pub fn load_run_data(run: &RunConfig) -> Result<RunData> {
    let train_path = run
        .train_data
        .as_ref()
        .ok_or_else(|| Error::Config("train_data is not set".into()))?;
    let images = ImageStore::from_dir(
        run.images
            .clone()
            .or_else(|| train_path.parent().map(|p| p.join("images")))
            .unwrap_or_else(|| PathBuf::from("images")),
    );
    let mut train = load_records(train_path)?;
    let mut test = match &run.test_data {
        Some(p) => Some(load_records(p)?),
        None => None,
    };
    if let (Records::Ava(all), None) = (&train, &test) {
        let (tr, te): (Vec<AvaEntry>, Vec<AvaEntry>) = all.iter().cloned().partition(|e| e.split == Split::Train);
        if !te.is_empty() {
            train = Records::Ava(tr);
            test = Some(Records::Ava(te));
        }
    }
    if train.is_empty() {
        return Err(Error::invalid(format!("{} holds no instances", train_path.display())));
    }
    Ok(RunData { train, test, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    fn synthetic(n: usize) -> (Records, ImageStore) {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(5, n)).unwrap();
        let images = ImageStore::from_images(ds.images.iter().map(|i| (i.id.clone(), i.pixels.clone())));
        (Records::Ads(ds.aggregated()), images)
    }

    #[test]
    fn prepared_shapes_and_targets() {
        let (records, mut images) = synthetic(60);
        let mut run = RunConfig::defaults(crate::model::BackboneScale::Tiny);
        run.text_dim = 8;
        let pre = Preprocessor::fit(&records, &mut images, &run).unwrap();
        let data = pre.transform(&records, &mut images).unwrap();
        assert_eq!(data.len(), 60);
        assert_eq!(data.aux.ncols(), pre.dim_aux());
        assert_eq!(data.images.dim().1..=data.images.dim().3, 3..=32);
        let Records::Ads(v) = &records else { unreachable!() };
        for (i, inst) in v.iter().enumerate() {
            assert_eq!(data.targets[[i, 0]], inst.ctr);
            assert_eq!(data.weights[i], inst.impressions as f64);
        }
        // every kept one-hot block has exactly one hot entry
        for block in pre.layout.blocks() {
            if let BlockKind::OneHot { .. } = block.kind {
                for row in data.aux.rows() {
                    let s: f64 = row.slice(ndarray::s![block.offset..block.offset + block.width]).sum();
                    assert_eq!(s, 1.0);
                }
            }
        }
        let b = data.batch(&[3, 0]);
        assert_eq!(b.images.dim(), (2, 3, 32, 32));
        assert_eq!(b.targets[[0, 0]], data.targets[[3, 0]]);
    }

    #[test]
    fn distribution_targets_are_normalized() {
        let (records, mut images) = synthetic(40);
        let mut run = RunConfig::defaults(crate::model::BackboneScale::Tiny);
        run.text_dim = 4;
        run.set_loss(crate::objectives::LossKind::Kld);
        let pre = Preprocessor::fit(&records, &mut images, &run).unwrap();
        let json = serde_json::to_string(&pre).unwrap();
        assert_eq!(serde_json::from_str::<Preprocessor>(&json).unwrap(), pre);
        let data = pre.transform(&records, &mut images).unwrap();
        for r in data.targets.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn splits_are_disjoint_and_exact() {
        let (records, _) = synthetic(100);
        let (a, b) = records.hashed_split(0.2, "test");
        assert_eq!((a.len(), b.len()), (80, 20));
        let ka = a.keys();
        assert!(b.keys().iter().all(|k| !ka.contains(k)));
    }
}
