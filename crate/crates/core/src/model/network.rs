//! The full network: convolutional backbone with optional conditional normalization,
//! auxiliary-conditioned spatial attention, gated fusion, and the fully connected head.

use indexmap::IndexMap;
use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{attention_backward, attention_forward, AttentionCache, AttentionParams};
use super::config::{CbnGranularity, ModelConfig};
use super::fusion::{fusion_backward, fusion_forward, FusionCache, FusionParams};
use super::layers::*;
use super::params::{ParamStore, Weights};
use crate::error::{Error, Result};
use crate::objectives::ScoreMode;

pub const ATTENTION_TAP: &str = "attention";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

#[derive(Debug, Clone)]
enum Stage {
    Conv { weight: String },
    Norm { prefix: String, conditional: bool },
    Relu,
    Pool,
    Tap(String),
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone)]
pub struct BatchStat {
    pub prefix: String,
    pub mean: Array1<f64>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct CbnCache {
    gamma_hidden: Array2<f64>,
    beta_hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
enum StageCache {
    Conv { input: Array4<f64> },
    Norm { cache: NormCache, cbn: Option<CbnCache> },
    Relu { output: Array4<f64> },
    Pool { input_dim: (usize, usize, usize, usize), arg: Vec<u32> },
    Tap,
}

/// Everything the backward pass needs, plus the outputs callers read.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Scalar scores (`N × 1`) or bucket probabilities (`N × 10`).
    pub output: Array2<f64>,
    pub logits: Array2<f64>,
    /// Attention weights over `H·W` locations, when attention is enabled.
    pub attention: Option<Array2<f64>>,
    /// Spatial activations by layer name.
    pub taps: IndexMap<String, Array4<f64>>,
    pub batch_stats: Vec<BatchStat>,
    mode: Mode,
    aux: Option<Array2<f64>>,
    stages: Vec<StageCache>,
    attention_cache: Option<AttentionCache>,
    flat: Array2<f64>,
    feature_dim: (usize, usize, usize, usize),
    fusion_cache: Option<FusionCache>,
    head_input: Array2<f64>,
    head_hidden1: Array2<f64>,
    head_hidden2: Array2<f64>,
}

impl Forward {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamStore,
    /// Gradient of the objective w.r.t. each tapped activation.
    pub taps: IndexMap<String, Array4<f64>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    stages: Vec<Stage>,
    params: Vec<TensorSpec>,
    buffers: Vec<TensorSpec>,
    head_in: usize,
}

fn vec1(t: &ArrayD<f64>) -> Array1<f64> {
    t.clone().into_dimensionality().expect("vector")
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let d = config.dim_aux;
        let mut cin = 3;
        let p = |params: &mut Vec<TensorSpec>, name: String, shape: Vec<usize>, init: Init| {
            params.push(TensorSpec { name, shape, init })
        };
        for (b, block) in config.backbone_scale.blocks().iter().enumerate() {
            for (i, &cout) in block.channels.iter().enumerate() {
                let conv = format!("block{}.conv{}.weight", b + 1, i + 1);
                p(&mut params, conv.clone(), vec![cout, cin * 9], Init::Normal { fan_in: cin * 9, gain: 2f64.sqrt() });
                let prefix = format!("block{}.norm{}", b + 1, i + 1);
                let conditional = config.use_cbn
                    && config.cbn_block_mask[b]
                    && (i == 0 || config.cbn_granularity == CbnGranularity::WholeBlock);
                p(&mut params, format!("{prefix}.gamma"), vec![cout], Init::Ones);
                p(&mut params, format!("{prefix}.beta"), vec![cout], Init::Zeros);
                if conditional {
                    for which in ["cbn_gamma", "cbn_beta"] {
                        let h = config.cbn_hidden;
                        p(&mut params, format!("{prefix}.{which}.fc1.weight"), vec![h, d], Init::Normal { fan_in: d, gain: 2f64.sqrt() });
                        p(&mut params, format!("{prefix}.{which}.fc1.bias"), vec![h], Init::Zeros);
                        // zero output layer: conditional starts out identical to plain normalization
                        p(&mut params, format!("{prefix}.{which}.fc2.weight"), vec![cout, h], Init::Zeros);
                        p(&mut params, format!("{prefix}.{which}.fc2.bias"), vec![cout], Init::Zeros);
                    }
                }
                p(&mut buffers, format!("{prefix}.running_mean"), vec![cout], Init::Zeros);
                p(&mut buffers, format!("{prefix}.running_var"), vec![cout], Init::Ones);
                stages.push(Stage::Conv { weight: conv });
                stages.push(Stage::Norm { prefix, conditional });
                stages.push(Stage::Relu);
                cin = cout;
            }
            stages.push(Stage::Tap(format!("block{}", b + 1)));
            if block.pool {
                stages.push(Stage::Pool);
            }
        }
        let (c, h, w) = config.backbone_scale.feature_shape();
        let flat = c * h * w;
        if config.use_attention {
            let a = config.att_hidden;
            p(&mut params, "attention.fc1.weight".into(), vec![a, c + d], Init::Normal { fan_in: c + d, gain: 2f64.sqrt() });
            p(&mut params, "attention.fc1.bias".into(), vec![a], Init::Zeros);
            p(&mut params, "attention.fc2.weight".into(), vec![1, a], Init::Normal { fan_in: a, gain: 1.0 });
            p(&mut params, "attention.fc2.bias".into(), vec![1], Init::Zeros);
        }
        let head_in = if config.use_high_fusion {
            let hh = config.high_hidden;
            p(&mut params, "fusion.image.weight".into(), vec![hh, flat], Init::Normal { fan_in: flat, gain: 1.0 });
            p(&mut params, "fusion.image.bias".into(), vec![hh], Init::Zeros);
            p(&mut params, "fusion.aux.weight".into(), vec![hh, d], Init::Normal { fan_in: d, gain: 1.0 });
            p(&mut params, "fusion.aux.bias".into(), vec![hh], Init::Zeros);
            hh
        } else {
            let hh = config.high_hidden;
            p(&mut params, "proj.weight".into(), vec![hh, flat], Init::Normal { fan_in: flat, gain: 1.0 });
            p(&mut params, "proj.bias".into(), vec![hh], Init::Zeros);
            if config.use_aux {
                hh + d
            } else {
                hh
            }
        };
        let hd = config.head_hidden;
        p(&mut params, "head.fc1.weight".into(), vec![hd, head_in], Init::Normal { fan_in: head_in, gain: 2f64.sqrt() });
        p(&mut params, "head.fc1.bias".into(), vec![hd], Init::Zeros);
        p(&mut params, "head.fc2.weight".into(), vec![hd, hd], Init::Normal { fan_in: hd, gain: 2f64.sqrt() });
        p(&mut params, "head.fc2.bias".into(), vec![hd], Init::Zeros);
        let out = config.output_dim();
        p(&mut params, "head.out.weight".into(), vec![out, hd], Init::Normal { fan_in: hd, gain: 0.1 });
        p(&mut params, "head.out.bias".into(), vec![out], Init::Zeros);
        Ok(Self {
            config,
            stages,
            params,
            buffers,
            head_in,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone_scale.input_size()
    }

    /// Names of layers whose activations can be inspected or explained.
    pub fn tap_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .stages
            .iter()
            .filter_map(|s| match s {
                Stage::Tap(n) => Some(n.clone()),
                _ => None,
            })
            .collect();
        if self.config.use_attention {
            names.push(ATTENTION_TAP.to_string());
        }
        names
    }

    /// Names of normalization layers whose scale and shift depend on the auxiliary vector.
    pub fn conditional_norms(&self) -> Vec<String> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Norm { prefix, conditional: true } => Some(prefix.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn init(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |specs: &[TensorSpec]| {
            let mut store = ParamStore::new();
            for s in specs {
                let t = match s.init {
                    Init::Zeros => ArrayD::zeros(IxDyn(&s.shape)),
                    Init::Ones => ArrayD::ones(IxDyn(&s.shape)),
                    Init::Normal { fan_in, gain } => {
                        let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
                        ArrayD::from_shape_simple_fn(IxDyn(&s.shape), || dist.sample(&mut rng))
                    }
                };
                store.insert(s.name.clone(), t);
            }
            store
        };
        let params = make(&self.params);
        let buffers = make(&self.buffers);
        Weights { params, buffers }
    }

    /// Checks that `weights` holds exactly the tensors this architecture expects.
    pub fn check_weights(&self, weights: &Weights) -> Result<()> {
        for (specs, store) in [(&self.params, &weights.params), (&self.buffers, &weights.buffers)] {
            for s in specs.iter() {
                match store.shape_of(&s.name) {
                    None => return Err(Error::Checkpoint(format!("missing tensor {}", s.name))),
                    Some(found) if found != s.shape.as_slice() => {
                        return Err(Error::ParameterShape {
                            name: s.name.clone(),
                            expected: s.shape.clone(),
                            found: found.to_vec(),
                        })
                    }
                    _ => {}
                }
            }
            if store.len() != specs.len() {
                let extra: Vec<&str> = store.names().filter(|n| !specs.iter().any(|s| s.name == *n)).collect();
                return Err(Error::Checkpoint(format!("unexpected tensors {extra:?}")));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, images: &Array4<f64>, aux: Option<ArrayView2<'_, f64>>) -> Result<()> {
        let (n, c, h, w) = images.dim();
        let s = self.input_size();
        if n == 0 || c != 3 || h != s || w != s {
            return Err(Error::Shape(format!("images {:?}, expected N × 3 × {s} × {s}", images.dim())));
        }
        if self.config.use_aux {
            match aux {
                Some(a) if a.dim() == (n, self.config.dim_aux) => {}
                Some(a) => {
                    return Err(Error::Shape(format!(
                        "auxiliary matrix {:?}, expected {n} × {}",
                        a.dim(),
                        self.config.dim_aux
                    )))
                }
                None => return Err(Error::invalid("this configuration needs auxiliary vectors")),
            }
        }
        Ok(())
    }

    fn mlp(w: &ParamStore, prefix: &str, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let pre = linear_forward(x, w.matrix(&format!("{prefix}.fc1.weight"))?, w.vector(&format!("{prefix}.fc1.bias"))?);
        let h = pre.mapv(|v| v.max(0.0));
        let out = linear_forward(h.view(), w.matrix(&format!("{prefix}.fc2.weight"))?, w.vector(&format!("{prefix}.fc2.bias"))?);
        Ok((out, pre))
    }

    fn mlp_backward(
        w: &ParamStore,
        prefix: &str,
        x: ArrayView2<'_, f64>,
        pre: &Array2<f64>,
        d_out: ArrayView2<'_, f64>,
        grads: &mut ParamStore,
    ) -> Result<()> {
        let h = pre.mapv(|v| v.max(0.0));
        let (mut dh, dw2, db2) = linear_backward(h.view(), w.matrix(&format!("{prefix}.fc2.weight"))?, d_out);
        ndarray::Zip::from(&mut dh).and(pre).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let dw1 = dh.t().dot(&x);
        grads.accumulate_2d(&format!("{prefix}.fc2.weight"), dw2);
        grads.accumulate_1d(&format!("{prefix}.fc2.bias"), db2);
        grads.accumulate_2d(&format!("{prefix}.fc1.weight"), dw1);
        grads.accumulate_1d(&format!("{prefix}.fc1.bias"), dh.sum_axis(Axis(0)));
        Ok(())
    }

    fn attention_params<'a>(&self, w: &'a ParamStore) -> Result<AttentionParams<'a>> {
        Ok(AttentionParams {
            fc1_weight: w.matrix("attention.fc1.weight")?,
            fc1_bias: w.vector("attention.fc1.bias")?,
            fc2_weight: w.matrix("attention.fc2.weight")?,
            fc2_bias: w.vector("attention.fc2.bias")?[0],
        })
    }

    fn fusion_params<'a>(&self, w: &'a ParamStore) -> Result<FusionParams<'a>> {
        Ok(FusionParams {
            image_weight: w.matrix("fusion.image.weight")?,
            image_bias: w.vector("fusion.image.bias")?,
            aux_weight: w.matrix("fusion.aux.weight")?,
            aux_bias: w.vector("fusion.aux.bias")?,
        })
    }

    /// Runs the network on `N × 3 × S × S` images. `aux` is required (`N × dim_aux`) when
    /// the configuration uses the auxiliary vector and ignored otherwise.
    pub fn forward(
        &self,
        weights: &Weights,
        images: &Array4<f64>,
        aux: Option<ArrayView2<'_, f64>>,
        mode: Mode,
    ) -> Result<Forward> {
        self.check_inputs(images, aux)?;
        let n = images.dim().0;
        let w = &weights.params;
        let aux = if self.config.use_aux { aux.map(|a| a.to_owned()) } else { None };
        let mut x = images.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut taps = IndexMap::new();
        let mut batch_stats = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Conv { weight } => {
                    let y = conv3x3_forward(&x, w.matrix(weight)?);
                    caches.push(StageCache::Conv { input: std::mem::replace(&mut x, y) });
                }
                Stage::Norm { prefix, conditional } => {
                    let c = x.dim().1;
                    let gamma = w.vector(&format!("{prefix}.gamma"))?;
                    let beta = w.vector(&format!("{prefix}.beta"))?;
                    let mut scale = gamma.broadcast((n, c)).expect("broadcast").to_owned();
                    let mut shift = beta.broadcast((n, c)).expect("broadcast").to_owned();
                    let cbn = if *conditional {
                        let a = aux.as_ref().expect("validated").view();
                        let (dg, gh) = Self::mlp(w, &format!("{prefix}.cbn_gamma"), a)?;
                        let (db, bh) = Self::mlp(w, &format!("{prefix}.cbn_beta"), a)?;
                        scale += &dg;
                        shift += &db;
                        Some(CbnCache {
                            gamma_hidden: gh,
                            beta_hidden: bh,
                        })
                    } else {
                        None
                    };
                    let rm = weights.buffers.vector(&format!("{prefix}.running_mean"))?;
                    let rv = weights.buffers.vector(&format!("{prefix}.running_var"))?;
                    let (y, cache, stats) =
                        norm_forward(&x, scale, shift.view(), (rm, rv), mode == Mode::Train, self.config.bn_epsilon)?;
                    if let Some((mean, var)) = stats {
                        let (_, _, hh, ww) = x.dim();
                        let m = (n * hh * ww) as f64;
                        batch_stats.push(BatchStat {
                            prefix: prefix.clone(),
                            mean,
                            var: var * (m / (m - 1.0)),
                        });
                    }
                    caches.push(StageCache::Norm { cache, cbn });
                    x = y;
                }
                Stage::Relu => {
                    x = relu_forward(&x);
                    caches.push(StageCache::Relu { output: x.clone() });
                }
                Stage::Pool => {
                    let input_dim = x.dim();
                    let (y, arg) = maxpool2_forward(&x);
                    x = y;
                    caches.push(StageCache::Pool { input_dim, arg });
                }
                Stage::Tap(name) => {
                    taps.insert(name.clone(), x.clone());
                    caches.push(StageCache::Tap);
                }
            }
        }
        let feature_dim = x.dim();
        let (attention, attention_cache) = if self.config.use_attention {
            let a = aux.as_ref().expect("validated").view();
            let (attended, cache) = attention_forward(&x, a, &self.attention_params(w)?);
            x = attended;
            taps.insert(ATTENTION_TAP.to_string(), x.clone());
            (Some(cache.alpha.clone()), Some(cache))
        } else {
            (None, None)
        };
        let (_, c, h, ww) = feature_dim;
        let flat = x.into_shape_with_order((n, c * h * ww)).expect("contiguous");
        let (head_input, fusion_cache) = if self.config.use_high_fusion {
            let a = aux.as_ref().expect("validated").view();
            let (fused, cache) = fusion_forward(flat.view(), a, &self.fusion_params(w)?);
            (fused, Some(cache))
        } else {
            let proj = linear_forward(flat.view(), w.matrix("proj.weight")?, w.vector("proj.bias")?);
            match &aux {
                Some(a) => (concatenate(Axis(1), &[proj.view(), a.view()]).expect("same rows"), None),
                None => (proj, None),
            }
        };
        debug_assert_eq!(head_input.ncols(), self.head_in);
        let h1 = linear_forward(head_input.view(), w.matrix("head.fc1.weight")?, w.vector("head.fc1.bias")?).mapv(|v| v.max(0.0));
        let h2 = linear_forward(h1.view(), w.matrix("head.fc2.weight")?, w.vector("head.fc2.bias")?).mapv(|v| v.max(0.0));
        let logits = linear_forward(h2.view(), w.matrix("head.out.weight")?, w.vector("head.out.bias")?);
        let output = match self.config.output_mode {
            ScoreMode::Regression => logits.clone(),
            ScoreMode::Distribution => softmax_rows(&logits),
        };
        Ok(Forward {
            output,
            logits,
            attention,
            taps,
            batch_stats,
            mode,
            aux,
            stages: caches,
            attention_cache,
            flat,
            feature_dim,
            fusion_cache,
            head_input,
            head_hidden1: h1,
            head_hidden2: h2,
        })
    }

    /// Backpropagates the gradient of an objective w.r.t. `fwd.output`.
    pub fn backward(&self, weights: &Weights, fwd: &Forward, d_output: ArrayView2<'_, f64>) -> Result<Gradients> {
        if d_output.dim() != fwd.output.dim() {
            return Err(Error::Shape(format!("output gradient {:?} vs output {:?}", d_output.dim(), fwd.output.dim())));
        }
        let d_logits = match self.config.output_mode {
            ScoreMode::Regression => d_output.to_owned(),
            ScoreMode::Distribution => softmax_backward(&fwd.output, d_output),
        };
        self.backward_logits(weights, fwd, d_logits.view())
    }

    pub fn backward_logits(&self, weights: &Weights, fwd: &Forward, d_logits: ArrayView2<'_, f64>) -> Result<Gradients> {
        let w = &weights.params;
        let mut g = ParamStore::new();
        let mut tap_grads = IndexMap::new();
        let relu_mask = |d: &mut Array2<f64>, act: &Array2<f64>| {
            ndarray::Zip::from(d).and(act).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            })
        };
        let (mut d, dw, db) = linear_backward(fwd.head_hidden2.view(), w.matrix("head.out.weight")?, d_logits);
        g.accumulate_2d("head.out.weight", dw);
        g.accumulate_1d("head.out.bias", db);
        relu_mask(&mut d, &fwd.head_hidden2);
        let (mut d, dw, db) = linear_backward(fwd.head_hidden1.view(), w.matrix("head.fc2.weight")?, d.view());
        g.accumulate_2d("head.fc2.weight", dw);
        g.accumulate_1d("head.fc2.bias", db);
        relu_mask(&mut d, &fwd.head_hidden1);
        let (d_in, dw, db) = linear_backward(fwd.head_input.view(), w.matrix("head.fc1.weight")?, d.view());
        g.accumulate_2d("head.fc1.weight", dw);
        g.accumulate_1d("head.fc1.bias", db);

        let (n, c, h, ww) = fwd.feature_dim;
        let d_flat = if let Some(cache) = &fwd.fusion_cache {
            let a = fwd.aux.as_ref().expect("aux present").view();
            let fg = fusion_backward(cache, fwd.flat.view(), a, &self.fusion_params(w)?, d_in.view());
            g.accumulate_2d("fusion.image.weight", fg.image_weight);
            g.accumulate_1d("fusion.image.bias", fg.image_bias);
            g.accumulate_2d("fusion.aux.weight", fg.aux_weight);
            g.accumulate_1d("fusion.aux.bias", fg.aux_bias);
            fg.image
        } else {
            let hh = self.config.high_hidden;
            let d_proj = d_in.slice(ndarray::s![.., ..hh]);
            let (dx, dw, db) = linear_backward(fwd.flat.view(), w.matrix("proj.weight")?, d_proj);
            g.accumulate_2d("proj.weight", dw);
            g.accumulate_1d("proj.bias", db);
            dx
        };
        let mut dx = d_flat.into_shape_with_order((n, c, h, ww)).expect("contiguous");
        if let Some(cache) = &fwd.attention_cache {
            tap_grads.insert(ATTENTION_TAP.to_string(), dx.clone());
            let a = fwd.aux.as_ref().expect("aux present").view();
            let ag = attention_backward(cache, a, &self.attention_params(w)?, &dx);
            g.accumulate_2d("attention.fc1.weight", ag.fc1_weight);
            g.accumulate_1d("attention.fc1.bias", ag.fc1_bias);
            g.accumulate_2d("attention.fc2.weight", ag.fc2_weight);
            g.accumulate_1d("attention.fc2.bias", Array1::from(vec![ag.fc2_bias]));
            dx = ag.features;
        }
        for (stage, cache) in self.stages.iter().zip(&fwd.stages).rev() {
            match (stage, cache) {
                (Stage::Conv { weight }, StageCache::Conv { input }) => {
                    let (d, dw) = conv3x3_backward(input, w.matrix(weight)?, &dx);
                    g.accumulate_2d(weight, dw);
                    dx = d;
                }
                (Stage::Norm { prefix, .. }, StageCache::Norm { cache, cbn }) => {
                    let (d, dscale, dshift) = norm_backward(cache, &dx);
                    g.accumulate_1d(&format!("{prefix}.gamma"), dscale.sum_axis(Axis(0)));
                    g.accumulate_1d(&format!("{prefix}.beta"), dshift.sum_axis(Axis(0)));
                    if let Some(cb) = cbn {
                        let a = fwd.aux.as_ref().expect("aux present").view();
                        Self::mlp_backward(w, &format!("{prefix}.cbn_gamma"), a, &cb.gamma_hidden, dscale.view(), &mut g)?;
                        Self::mlp_backward(w, &format!("{prefix}.cbn_beta"), a, &cb.beta_hidden, dshift.view(), &mut g)?;
                    }
                    dx = d;
                }
                (Stage::Relu, StageCache::Relu { output }) => dx = relu_backward(output, &dx),
                (Stage::Pool, StageCache::Pool { input_dim, arg }) => dx = maxpool2_backward(*input_dim, arg, &dx),
                (Stage::Tap(name), StageCache::Tap) => {
                    tap_grads.insert(name.clone(), dx.clone());
                }
                _ => unreachable!("stage and cache lists are built together"),
            }
        }
        // same tensor order as the parameters themselves
        let mut ordered = ParamStore::new();
        for s in &self.params {
            let t = match g.get(&s.name) {
                Ok(t) => t.as_standard_layout().into_owned(),
                Err(_) => ArrayD::zeros(IxDyn(&s.shape)),
            };
            ordered.insert(s.name.clone(), t);
        }
        let mut taps = IndexMap::new();
        for name in self.tap_names() {
            if let Some(t) = tap_grads.shift_remove(&name) {
                taps.insert(name, t);
            }
        }
        Ok(Gradients { params: ordered, taps })
    }

    /// Folds the batch statistics of a training forward pass into the running statistics.
    pub fn update_running_stats(&self, weights: &mut Weights, stats: &[BatchStat]) -> Result<()> {
        let m = self.config.bn_momentum;
        for s in stats {
            let rm = weights.buffers.get_mut(&format!("{}.running_mean", s.prefix))?;
            let updated = vec1(rm) * (1.0 - m) + &s.mean * m;
            *rm = updated.into_dyn();
            let rv = weights.buffers.get_mut(&format!("{}.running_var", s.prefix))?;
            let updated = vec1(rv) * (1.0 - m) + &s.var * m;
            *rv = updated.into_dyn();
        }
        Ok(())
    }

    /// Sets the regression output bias, typically to the mean training target.
    pub fn set_output_bias(&self, weights: &mut Weights, value: f64) -> Result<()> {
        weights.params.get_mut("head.out.bias")?.fill(value);
        Ok(())
    }
}
