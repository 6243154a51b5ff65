//! Independent reference computations and fixtures shared by the integration tests.
#![allow(dead_code)]

use m2fn_core::data::{generate_synthetic_dataset, SyntheticConfig};
use m2fn_core::harness::{ImageStore, Prepared, Preprocessor, Records, RunConfig};
use m2fn_core::model::BackboneScale;
use ndarray::{Array2, Array3};

/// Ranks by counting: `1 + #smaller + (#equal − 1)/2`.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson from raw sums: `(nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²))`.
pub fn moment_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

pub fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    moment_pearson(&brute_ranks(xs), &brute_ranks(ys))
}

/// Mean over rows of `Σ_k p log(p / max(q, floor))`, skipping `p = 0`.
pub fn naive_kld(target: &Array2<f64>, pred: &Array2<f64>, floor: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..target.nrows() {
        for k in 0..target.ncols() {
            let p = target[[i, k]];
            if p > 0.0 {
                total += p * (p / pred[[i, k]].max(floor)).ln();
            }
        }
    }
    total / target.nrows() as f64
}

/// Mean over rows of `((1/K) Σ_k |CDF_p(k) − CDF_q(k)|^r)^{1/r}`, CDFs summed from scratch.
pub fn naive_emd(target: &Array2<f64>, pred: &Array2<f64>, r: f64) -> f64 {
    let k = target.ncols();
    let mut total = 0.0;
    for i in 0..target.nrows() {
        let mut acc = 0.0;
        for j in 0..k {
            let ct: f64 = (0..=j).map(|m| target[[i, m]]).sum();
            let cp: f64 = (0..=j).map(|m| pred[[i, m]]).sum();
            acc += (ct - cp).abs().powf(r);
        }
        total += (acc / k as f64).powf(1.0 / r);
    }
    total / target.nrows() as f64
}

/// One-way ANOVA F from group totals: `SSB = Σ T_g²/n_g − T²/n`, `SSW = Σy² − Σ T_g²/n_g`.
/// Groups with a single observation are left out, as the screen does.
pub fn textbook_anova_f(levels: &[u8], ys: &[f64]) -> f64 {
    let mut groups: std::collections::BTreeMap<u8, Vec<f64>> = Default::default();
    for (&l, &y) in levels.iter().zip(ys) {
        groups.entry(l).or_default().push(y);
    }
    groups.retain(|_, g| g.len() >= 2);
    let k = groups.len() as f64;
    let n: f64 = groups.values().map(|g| g.len() as f64).sum();
    let t: f64 = groups.values().flatten().sum();
    let sum_sq: f64 = groups.values().flatten().map(|y| y * y).sum();
    let tg: f64 = groups.values().map(|g| g.iter().sum::<f64>().powi(2) / g.len() as f64).sum();
    let ssb = tg - t * t / n;
    let ssw = sum_sq - tg;
    (ssb / (k - 1.0)) / (ssw / (n - k))
}

/// Largest relative error `|a − b| / max(|a|, |b|, floor)` across pairs.
pub fn max_rel_err(pairs: impl IntoIterator<Item = (f64, f64)>, floor: f64) -> f64 {
    pairs
        .into_iter()
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A 1×1-convolution toy: `A_c = Σ_i W_ci X_i`, score `y = Σ_c v_c mean(A_c)`.
/// Returns activations and `∂y/∂A`.
pub fn toy_conv_model(x: &Array3<f64>, w: &Array2<f64>, v: &[f64]) -> (Array3<f64>, Array3<f64>) {
    let (cin, h, wd) = x.dim();
    let cout = w.nrows();
    let mut a = Array3::zeros((cout, h, wd));
    for c in 0..cout {
        for i in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    a[[c, y, xx]] += w[[c, i]] * x[[i, y, xx]];
                }
            }
        }
    }
    let g = Array3::from_shape_fn((cout, h, wd), |(c, _, _)| v[c] / (h * wd) as f64);
    (a, g)
}

/// The closed-form toy heatmap: `relu(Σ_i (vᵀW)_i X_i)` scaled to unit maximum.
pub fn toy_closed_form(x: &Array3<f64>, w: &Array2<f64>, v: &[f64]) -> Array2<f64> {
    let (cin, h, wd) = x.dim();
    let u: Vec<f64> = (0..cin).map(|i| (0..w.nrows()).map(|c| v[c] * w[[c, i]]).sum()).collect();
    let mut m = Array2::from_shape_fn((h, wd), |(y, xx)| (0..cin).map(|i| u[i] * x[[i, y, xx]]).sum::<f64>().max(0.0));
    let max = m.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        m.mapv_inplace(|t| t / max);
    }
    m
}

/// Desk-scale run settings with narrow text blocks so tests stay quick.
pub fn quick_run(seed: u64, epochs: usize) -> RunConfig {
    let mut run = RunConfig::defaults(BackboneScale::Tiny);
    run.seed = seed;
    run.epochs = epochs;
    run.text_dim = 16;
    run.batch_size = 16;
    run
}

pub struct Fixture {
    pub records: Records,
    pub images: ImageStore,
}

pub fn synthetic_fixture(seed: u64, n: usize) -> Fixture {
    fixture_from(SyntheticConfig::new(seed, n))
}

/// `n` instances that all show different images, for sets small enough that shared
/// images would leave identical inputs with different targets.
pub fn distinct_image_fixture(seed: u64, n: usize) -> Fixture {
    let mut cfg = SyntheticConfig::new(seed, 4 * n);
    cfg.n_images = Some(4 * n);
    let mut fx = fixture_from(cfg);
    let Records::Ads(all) = &fx.records else { unreachable!() };
    let mut seen = std::collections::HashSet::new();
    let kept: Vec<_> = all.iter().filter(|i| seen.insert(i.image_id.clone())).take(n).cloned().collect();
    assert_eq!(kept.len(), n, "not enough distinct images");
    fx.records = Records::Ads(kept);
    fx
}

fn fixture_from(cfg: SyntheticConfig) -> Fixture {
    let ds = generate_synthetic_dataset(&cfg).unwrap();
    Fixture {
        images: ImageStore::from_images(ds.images.iter().map(|i| (i.id.clone(), i.pixels.clone()))),
        records: Records::Ads(ds.aggregated()),
    }
}

impl Fixture {
    pub fn prepare(&mut self, run: &RunConfig) -> (Preprocessor, Prepared) {
        let pre = Preprocessor::fit(&self.records, &mut self.images, run).unwrap();
        let data = pre.transform(&self.records, &mut self.images).unwrap();
        (pre, data)
    }
}

/// Random `N × 3 × S × S` images and `N × D` auxiliary rows.
pub fn random_inputs(n: usize, size: usize, dim_aux: usize, seed: u64) -> (ndarray::Array4<f64>, Array2<f64>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let img = ndarray::Array4::from_shape_fn((n, 3, size, size), |_| rng.random_range(-1.5..1.5));
    let aux = Array2::from_shape_fn((n, dim_aux), |_| rng.random_range(-1.0..1.0));
    (img, aux)
}

fn entry<'a>(w: &'a mut m2fn_core::model::Weights, name: &str, k: usize) -> &'a mut f64 {
    &mut w.params.get_mut(name).unwrap().as_slice_mut().unwrap()[k]
}

/// Largest relative error between backpropagated and central-difference gradients of
/// `Σ r ⊙ output` (training-mode statistics), over the first, middle and last entry of
/// every parameter tensor.
pub fn network_gradient_error(cfg: m2fn_core::model::ModelConfig, seed: u64) -> f64 {
    use m2fn_core::model::{Mode, Network, Weights};
    use rand::{Rng, SeedableRng};
    let net = Network::new(cfg.clone()).unwrap();
    let mut w = net.init(seed);
    // the conditional branches start at zero; give them a slope so their gradients flow
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    for (name, t) in w.params.iter_mut() {
        if name.contains("cbn_") && name.contains(".fc2.") {
            t.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
    }
    let (img, aux) = random_inputs(3, net.input_size(), cfg.dim_aux, seed + 1);
    let f = net.forward(&w, &img, Some(aux.view()), Mode::Train).unwrap();
    let r = Array2::from_shape_fn(f.output.dim(), |_| rng.random_range(-1.0..1.0));
    let objective = |w: &Weights| (&net.forward(w, &img, Some(aux.view()), Mode::Train).unwrap().output * &r).sum();
    let g = net.backward(&w, &f, r.view()).unwrap();
    // small enough that no ReLU or max-pool switches branch inside the step
    let eps = 1e-6;
    let names: Vec<String> = w.params.names().map(String::from).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = w.params.get(&name).unwrap().len();
        for k in [0, len / 2, len - 1] {
            let orig = *entry(&mut w, &name, k);
            *entry(&mut w, &name, k) = orig + eps;
            let up = objective(&w);
            *entry(&mut w, &name, k) = orig - eps;
            let down = objective(&w);
            *entry(&mut w, &name, k) = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = g.params.get(&name).unwrap().as_slice().unwrap()[k];
            worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-6));
        }
    }
    worst
}

/// Largest relative error between a loss's analytic gradient and central differences.
pub fn loss_gradient_error(kind: m2fn_core::objectives::LossKind, pred: &Array2<f64>, target: &Array2<f64>, weights: &[f64]) -> f64 {
    use m2fn_core::objectives::{LossBatch, ScoreMode};
    let value = |p: &Array2<f64>| -> (f64, Array2<f64>) {
        let batch = match kind.mode() {
            ScoreMode::Regression => {
                LossBatch::regression_view(p.view(), target.view(), ndarray::ArrayView1::from(weights)).unwrap()
            }
            ScoreMode::Distribution => LossBatch::distribution(p.view(), target.view()).unwrap(),
        };
        kind.value_and_grad(&batch).unwrap()
    };
    let (_, grad) = value(pred);
    // central differences are exact on the quadratic, so a wide step only removes rounding
    let eps = if kind.mode() == ScoreMode::Regression { 1e-3 } else { 1e-7 };
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(pred.dim()) {
        let mut up = pred.clone();
        up[idx] += eps;
        let mut down = pred.clone();
        down[idx] -= eps;
        let fd = (value(&up).0 - value(&down).0) / (2.0 * eps);
        worst = worst.max((fd - grad[idx]).abs() / (fd.abs() + grad[idx].abs()).max(1e-6));
    }
    worst
}

/// Tiny configuration with narrow module MLPs.
pub fn small_config(cfg: m2fn_core::model::ModelConfig) -> m2fn_core::model::ModelConfig {
    m2fn_core::model::ModelConfig {
        cbn_hidden: 6,
        att_hidden: 8,
        high_hidden: 8,
        head_hidden: 12,
        ..cfg
    }
}

/// Weights for `target` copied by name from `source`.
pub fn transplant(target: &m2fn_core::model::Network, source: &m2fn_core::model::Weights) -> m2fn_core::model::Weights {
    let mut w = target.init(0);
    for store in [&mut w.params, &mut w.buffers] {
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let src = source.params.get(&n).or_else(|_| source.buffers.get(&n)).unwrap();
            *store.get_mut(&n).unwrap() = src.clone();
        }
    }
    w
}

/// Largest output or tap difference, in both modes, between a network with CBN on every
/// block at its zero-initialized modulation and the same network with plain batch norm.
pub fn cbn_reduction_error(seed: u64) -> f64 {
    use m2fn_core::model::{Mode, ModelConfig, Network, CBN_BLOCKS};
    let dim_aux = 7;
    let with = Network::new(small_config(ModelConfig::tiny(dim_aux)).with_mask([true; CBN_BLOCKS])).unwrap();
    let without = Network::new(small_config(ModelConfig::tiny(dim_aux)).with_modules(true, false, true, true)).unwrap();
    let mut w = with.init(seed);
    // running statistics away from their defaults so evaluation mode is exercised too
    for (n, t) in w.buffers.iter_mut() {
        t.fill(if n.ends_with("running_var") { 1.7 } else { 0.3 });
    }
    let plain = transplant(&without, &w);
    let (img, aux) = random_inputs(4, 32, dim_aux, seed + 1);
    let max_diff = |a: &ndarray::ArrayD<f64>, b: &ndarray::ArrayD<f64>| (a - b).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
    let mut worst: f64 = 0.0;
    for mode in [Mode::Train, Mode::Eval] {
        let a = with.forward(&w, &img, Some(aux.view()), mode).unwrap();
        let b = without.forward(&plain, &img, Some(aux.view()), mode).unwrap();
        worst = worst.max(max_diff(&a.output.clone().into_dyn(), &b.output.clone().into_dyn()));
        for (name, t) in &a.taps {
            worst = worst.max(max_diff(&t.clone().into_dyn(), &b.taps[name].clone().into_dyn()));
        }
    }
    worst
}
