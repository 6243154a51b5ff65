//! Gradient-weighted class activation maps over tapped backbone layers.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::dataset::Prepared;
use crate::error::{Error, Result};
use crate::model::{Mode, Network, Weights};
use crate::objectives::ScoreMode;

/// What the map explains: the scalar score, or one bucket's probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamTarget {
    Score,
    Bucket(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Row-major `H × W` values in `[0, 1]`.
    pub values: Array2<f64>,
    pub layer_name: String,
    pub target: CamTarget,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

fn max_normalize(mut m: Array2<f64>) -> Array2<f64> {
    let max = m.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        m.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    } else {
        m.fill(0.0);
    }
    m
}

/// `ReLU(Σ_c ᾱ_c A_c)` with `ᾱ_c` the spatial mean of channel `c`'s gradient, scaled so the
/// maximum is 1 (all zeros when nothing is positive). Inputs are `C × H × W`.
pub fn gradcam_from(activations: ArrayView3<'_, f64>, gradients: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    if activations.dim() != gradients.dim() {
        return Err(Error::Shape(format!(
            "activations {:?} vs gradients {:?}",
            activations.dim(),
            gradients.dim()
        )));
    }
    let (c, h, w) = activations.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("empty activation map".into()));
    }
    let alpha: Array1<f64> = gradients.mean_axis(Axis(1)).and_then(|g| g.mean_axis(Axis(1))).expect("nonempty");
    let mut cam = Array2::<f64>::zeros((h, w));
    for (a, &wt) in activations.axis_iter(Axis(0)).zip(&alpha) {
        cam.scaled_add(wt, &a);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    Ok(max_normalize(cam))
}

/// Bilinear resize to `height × width`, renormalized so a nonzero map keeps its maximum at 1.
pub fn resize_map(map: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([map[[y as usize, x as usize]] as f32]));
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    let resized = Array2::from_shape_fn((height, width), |(y, x)| out.get_pixel(x as u32, y as u32)[0].max(0.0) as f64);
    max_normalize(resized)
}

/// The default explanation target: the score, or the most probable bucket.
pub fn default_target(mode: ScoreMode, output: ndarray::ArrayView1<'_, f64>) -> CamTarget {
    match mode {
        ScoreMode::Regression => CamTarget::Score,
        ScoreMode::Distribution => CamTarget::Bucket(
            output
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0),
        ),
    }
}

/// Grad-CAM for one `3 × S × S` image at `layer`, resized to the input resolution.
/// Normalization layers use running statistics.
pub fn gradcam(
    net: &Network,
    weights: &Weights,
    image: ArrayView3<'_, f64>,
    aux: Option<ndarray::ArrayView1<'_, f64>>,
    layer: &str,
    target: Option<CamTarget>,
) -> Result<Heatmap> {
    let valid = net.tap_names();
    if !valid.iter().any(|v| v == layer) {
        return Err(Error::UnknownLayer {
            name: layer.to_string(),
            valid,
        });
    }
    let images: Array4<f64> = image.to_owned().insert_axis(Axis(0));
    let aux = aux.map(|a| a.to_owned().insert_axis(Axis(0)));
    let fwd = net.forward(weights, &images, aux.as_ref().map(|a| a.view()), Mode::Eval)?;
    let mode = net.config().output_mode;
    let target = target.unwrap_or_else(|| default_target(mode, fwd.output.row(0)));
    let mut d = Array2::<f64>::zeros(fwd.output.dim());
    match (mode, target) {
        (ScoreMode::Regression, CamTarget::Score) => d[[0, 0]] = 1.0,
        (ScoreMode::Distribution, CamTarget::Bucket(k)) if k < d.ncols() => d[[0, k]] = 1.0,
        (_, t) => return Err(Error::invalid(format!("target {t:?} does not fit a {mode:?} head"))),
    }
    let grads = net.backward(weights, &fwd, d.view())?;
    let acts = &fwd.taps[layer];
    let g = &grads.taps[layer];
    let cam = gradcam_from(acts.slice(s![0, .., .., ..]), g.slice(s![0, .., .., ..]))?;
    let size = net.input_size();
    Ok(Heatmap {
        values: resize_map(&cam, size, size),
        layer_name: layer.to_string(),
        target,
    })
}

/// Grad-CAM for instance `index` of prepared data.
pub fn gradcam_instance(
    net: &Network,
    weights: &Weights,
    data: &Prepared,
    index: usize,
    layer: &str,
    target: Option<CamTarget>,
) -> Result<Heatmap> {
    if index >= data.len() {
        return Err(Error::invalid(format!("instance {index} out of range ({} instances)", data.len())));
    }
    let img = data.images.index_axis(Axis(0), data.image_index[index]);
    gradcam(net, weights, img, Some(data.aux.row(index)), layer, target)
}
