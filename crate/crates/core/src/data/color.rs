//! Dominant colour extraction: K-means over pixels, then nearest palette anchor under a
//! Mahalanobis metric built from a minimum-covariance-determinant estimate.
//!
//! The procedure depends only on the multiset of pixel values: pixels are sorted before any
//! sampling, so every permutation of an image yields the same label.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLUSTERS: usize = 5;
pub const DEFAULT_DOMINANCE_THRESHOLD: f64 = 0.4;
pub const MAX_SAMPLED_PIXELS: usize = 10_000;
const KMEANS_SEED: u64 = 0x5eed;
const KMEANS_MAX_ITER: usize = 100;
const MCD_STARTS: usize = 10;
const MCD_MAX_CSTEPS: usize = 30;
/// Added to the MCD scatter diagonal (RGB units squared) so flat images stay invertible.
const COVARIANCE_RIDGE: f64 = 1.0;

type Rgb = [f64; 3];
type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub code: u8,
    pub label: String,
    /// `None` for the `multiple` pseudo-colour.
    pub anchor: Option<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPalette {
    colors: Vec<PaletteColor>,
    pub dominance_threshold: f64,
}

impl Default for ColorPalette {
    fn default() -> Self {
        Self::standard()
    }
}

impl ColorPalette {
    /// The ten dominant-colour labels with their reference RGB values.
    pub fn standard() -> Self {
        let table: [(&str, Option<[u8; 3]>); 10] = [
            ("black", Some([0, 0, 0])),
            ("blue", Some([0, 0, 255])),
            ("brown", Some([139, 69, 19])),
            ("green", Some([0, 128, 0])),
            ("grey", Some([128, 128, 128])),
            ("multiple", None),
            ("pink", Some([255, 192, 203])),
            ("red", Some([255, 0, 0])),
            ("white", Some([255, 255, 255])),
            ("yellow", Some([255, 255, 0])),
        ];
        let colors = table
            .iter()
            .enumerate()
            .map(|(i, (label, anchor))| PaletteColor {
                code: i as u8 + 1,
                label: (*label).to_owned(),
                anchor: *anchor,
            })
            .collect();
        ColorPalette {
            colors,
            dominance_threshold: DEFAULT_DOMINANCE_THRESHOLD,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid("dominance threshold must lie in (0, 1)"));
        }
        self.dominance_threshold = threshold;
        Ok(self)
    }

    pub fn colors(&self) -> &[PaletteColor] {
        &self.colors
    }

    pub fn by_label(&self, label: &str) -> Option<&PaletteColor> {
        self.colors.iter().find(|c| c.label == label)
    }

    pub fn by_code(&self, code: u8) -> Option<&PaletteColor> {
        self.colors.iter().find(|c| c.code == code)
    }

    fn multiple(&self) -> &PaletteColor {
        self.colors
            .iter()
            .find(|c| c.anchor.is_none())
            .expect("palette has a `multiple` entry")
    }

    fn nearest(&self, point: Rgb, precision: &Mat3) -> &PaletteColor {
        self.colors
            .iter()
            .filter_map(|c| c.anchor.map(|a| (c, a)))
            .map(|(c, a)| {
                let d = [point[0] - a[0] as f64, point[1] - a[1] as f64, point[2] - a[2] as f64];
                (c, quad_form(precision, d))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("palette has anchors")
    }
}

fn quad_form(m: &Mat3, d: Rgb) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            acc += d[i] * m[i][j] * d[j];
        }
    }
    acc
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if !(det.abs() > 1e-300) {
        return None;
    }
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            out[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(out)
}

fn mean_cov(points: &[Rgb]) -> (Rgb, Mat3) {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (mean, cov)
}

fn ridge(mut cov: Mat3) -> Mat3 {
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += COVARIANCE_RIDGE;
    }
    cov
}

/// Robust location/scatter via concentration steps on h-subsets (FastMCD without the
/// consistency factor, which does not change nearest-anchor decisions).
pub fn mcd_covariance(points: &[Rgb], seed: u64) -> (Rgb, Mat3) {
    let n = points.len();
    let h = (n + 3).div_ceil(2);
    if n <= 4 {
        return mean_cov(points);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Rgb, Mat3)> = None;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for _ in 0..MCD_STARTS {
        idx.shuffle(&mut rng);
        let start: Vec<Rgb> = idx[..4].iter().map(|&i| points[i]).collect();
        let (mut mean, mut cov) = mean_cov(&start);
        let mut prev_det = f64::INFINITY;
        for _ in 0..MCD_MAX_CSTEPS {
            let prec = inv3(&ridge(cov)).expect("ridge keeps scatter invertible");
            dist.clear();
            dist.extend(points.iter().enumerate().map(|(i, p)| {
                (quad_form(&prec, [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]), i)
            }));
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let subset: Vec<Rgb> = dist[..h].iter().map(|&(_, i)| points[i]).collect();
            (mean, cov) = mean_cov(&subset);
            let det = det3(&cov);
            if det >= prev_det {
                break;
            }
            prev_det = det;
        }
        let det = det3(&cov);
        if best.as_ref().is_none_or(|b| det < b.0) {
            best = Some((det, mean, cov));
        }
    }
    let (_, mean, cov) = best.expect("at least one start");
    (mean, cov)
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Rgb>,
    pub sizes: Vec<usize>,
    pub assignments: Vec<usize>,
}

fn sq_dist(a: Rgb, b: Rgb) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Lloyd's algorithm with k-means++ seeding. `k` is capped at the number of distinct points.
pub fn kmeans(points: &[Rgb], k: usize, seed: u64) -> KMeansResult {
    let mut distinct: Vec<Rgb> = points.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    distinct.dedup();
    let k = k.min(distinct.len()).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![distinct[rng.random_range(0..distinct.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = distinct
            .iter()
            .map(|&p| centroids.iter().map(|&c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut r = rng.random_range(0.0..total);
        let mut pick = distinct.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        centroids.push(distinct[pick]);
    }

    let mut assignments = vec![0usize; points.len()];
    for iter in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, &p) in assignments.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&i, &j| sq_dist(p, centroids[i]).total_cmp(&sq_dist(p, centroids[j])))
                .expect("k >= 1");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for c in 0..3 {
                sums[a][c] += p[c];
            }
        }
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = [
                    sums[i][0] / counts[i] as f64,
                    sums[i][1] / counts[i] as f64,
                    sums[i][2] / counts[i] as f64,
                ];
            }
        }
    }
    let mut sizes = vec![0usize; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    KMeansResult {
        centroids,
        sizes,
        assignments,
    }
}

/// Labels an image with its dominant palette colour, or `multiple` when the largest pixel
/// cluster holds less than the palette's dominance threshold.
pub fn dominant_color<'p>(image: &RgbImage, palette: &'p ColorPalette, k: usize) -> Result<&'p PaletteColor> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::invalid("empty image"));
    }
    if k < 2 {
        return Err(Error::invalid("dominant colour needs at least 2 clusters"));
    }
    let mut pixels: Vec<[u8; 3]> = image.pixels().map(|p| p.0).collect();
    pixels.sort_unstable();

    let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if pixels.first() == pixels.last() {
        let p = pixels[0];
        return Ok(palette.nearest([p[0] as f64, p[1] as f64, p[2] as f64], &identity));
    }

    let sample: Vec<Rgb> = if pixels.len() <= MAX_SAMPLED_PIXELS {
        pixels.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED);
        (0..MAX_SAMPLED_PIXELS)
            .map(|_| {
                let p = pixels[rng.random_range(0..pixels.len())];
                [p[0] as f64, p[1] as f64, p[2] as f64]
            })
            .collect()
    };

    let clusters = kmeans(&sample, k, KMEANS_SEED);
    let (largest, &size) = clusters
        .sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("k >= 1");
    let share = size as f64 / sample.len() as f64;
    if share < palette.dominance_threshold {
        return Ok(palette.multiple());
    }
    let (_, cov) = mcd_covariance(&sample, KMEANS_SEED);
    let precision = inv3(&ridge(cov)).expect("ridge keeps scatter invertible");
    Ok(palette.nearest(clusters.centroids[largest], &precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb as Px;

    fn solid(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, Px(c))
    }

    #[test]
    fn palette_has_ten_labels() {
        let p = ColorPalette::standard();
        let labels: Vec<_> = p.colors().iter().map(|c| c.label.as_str()).collect();
        assert_eq!(
            labels,
            ["black", "blue", "brown", "green", "grey", "multiple", "pink", "red", "white", "yellow"]
        );
    }

    #[test]
    fn single_colour_short_circuits() {
        let p = ColorPalette::standard();
        assert_eq!(dominant_color(&solid(8, 8, [0, 0, 0]), &p, 5).unwrap().label, "black");
        assert_eq!(dominant_color(&solid(8, 8, [255, 0, 0]), &p, 5).unwrap().label, "red");
    }

    #[test]
    fn half_red_half_blue_is_multiple() {
        let mut img = solid(100, 100, [255, 0, 0]);
        for y in 50..100 {
            for x in 0..100 {
                img.put_pixel(x, y, Px([0, 0, 255]));
            }
        }
        // exact pixel count of each colour
        let red = img.pixels().filter(|p| p.0 == [255, 0, 0]).count();
        assert_eq!(red as f64 / 10_000.0, 0.5);
        let p = ColorPalette::standard().with_threshold(0.6).unwrap();
        assert_eq!(dominant_color(&img, &p, 5).unwrap().label, "multiple");
        // the same split passes a 0.4 threshold and picks one of the two colours
        let standard = ColorPalette::standard();
        let label = &dominant_color(&img, &standard, 5).unwrap().label;
        assert!(label == "red" || label == "blue");
    }

    #[test]
    fn mostly_green_with_noise() {
        let mut img = solid(40, 40, [10, 120, 15]);
        for i in 0..300u32 {
            img.put_pixel(i % 40, i / 40, Px([(i * 37 % 256) as u8, (i * 91 % 256) as u8, (i * 13 % 256) as u8]));
        }
        let p = ColorPalette::standard();
        assert_eq!(dominant_color(&img, &p, 5).unwrap().label, "green");
    }

    #[test]
    fn rejects_bad_input() {
        let p = ColorPalette::standard();
        assert!(dominant_color(&RgbImage::new(0, 0), &p, 5).is_err());
        assert!(dominant_color(&solid(2, 2, [1, 2, 3]), &p, 1).is_err());
    }

    #[test]
    fn mcd_ignores_outliers() {
        let mut pts: Vec<Rgb> = (0..200).map(|i| [100.0 + (i % 7) as f64, 50.0 + (i % 5) as f64, 20.0 + (i % 3) as f64]).collect();
        pts.extend((0..20).map(|i| [250.0, 250.0 - i as f64, 0.0]));
        let (mean, _) = mcd_covariance(&pts, 1);
        assert!((mean[0] - 103.0).abs() < 2.0, "{mean:?}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut img = solid(24, 24, [200, 30, 40]);
            for _ in 0..250 {
                let (x, y) = (rng.random_range(0..24), rng.random_range(0..24));
                img.put_pixel(x, y, Px([rng.random(), rng.random(), rng.random()]));
            }
            let mut px: Vec<_> = img.pixels().copied().collect();
            px.shuffle(&mut rng);
            let mut shuffled = RgbImage::new(24, 24);
            for (dst, src) in shuffled.pixels_mut().zip(px) {
                *dst = src;
            }
            let p = ColorPalette::standard();
            proptest::prop_assert_eq!(
                &dominant_color(&img, &p, 5).unwrap().label,
                &dominant_color(&shuffled, &p, 5).unwrap().label
            );
        }
    }
}
