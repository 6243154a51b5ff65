//! Seeded generator of ad-like images and exposure logs with planted click effects.
//!
//! Each image has a flat background colour, a white text banner at the top or bottom, and a
//! small square sprite. Click probability is
//!
//! ```text
//! p = base + color_delta·[background favoured]
//!          + age_text_delta·[age ≥ 5 ∧ banner on top]
//!          + time_delta·[hour in peak set]
//! ```
//!
//! An image-only model sees the colour effect and the banner effect averaged over ages; the
//! age split of the banner effect and the hour effect need the auxiliary attributes.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::aggregate::AggregatedInstance;
use super::color::ColorPalette;
use super::schema::{AttributeTuple, ClickLogRecord};
use crate::error::{Error, Result};

/// Background labels; the first three are favoured by the colour effect.
pub const BACKGROUNDS: [&str; 6] = ["red", "yellow", "pink", "blue", "green", "grey"];
const SPRITES: [[u8; 3]; 3] = [[139, 69, 19], [20, 20, 20], [90, 0, 140]];
pub const PEAK_HOURS: [u8; 10] = [2, 3, 4, 9, 10, 11, 12, 15, 16, 17];

const TITLES: [&str; 8] = [
    "Build your kingdom today",
    "The hit RPG everyone is playing",
    "Race to the top",
    "Puzzle fans wanted",
    "Claim your free hero",
    "A new season has begun",
    "Strategy meets adventure",
    "Spin and win big",
];
const DESCS: [&str; 6] = [
    "Join millions of players worldwide",
    "Download now and get bonus gems",
    "Team up with friends in real time",
    "Relax with hundreds of levels",
    "Limited time event rewards",
    "We pay back 50% of your purchases",
];
const OCR_TEXTS: [&str; 6] = ["PLAY NOW", "FREE GIFT", "NEW!", "TOP 1", "EVENT", "JOIN"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffects {
    pub base_rate: f64,
    pub color_delta: f64,
    pub age_text_delta: f64,
    pub time_delta: f64,
}

impl Default for PlantedEffects {
    fn default() -> Self {
        PlantedEffects {
            base_rate: 0.06,
            color_delta: 0.04,
            age_text_delta: 0.05,
            time_delta: 0.03,
        }
    }
}

impl PlantedEffects {
    pub fn none(base_rate: f64) -> Self {
        PlantedEffects {
            base_rate,
            color_delta: 0.0,
            age_text_delta: 0.0,
            time_delta: 0.0,
        }
    }

    pub fn click_probability(&self, background: &str, banner_top: bool, age: u8, hour: u8) -> f64 {
        let mut p = self.base_rate;
        if BACKGROUNDS[..3].contains(&background) {
            p += self.color_delta;
        }
        if age >= 5 && banner_top {
            p += self.age_text_delta;
        }
        if PEAK_HOURS.contains(&hour) {
            p += self.time_delta;
        }
        p.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_instances: usize,
    pub image_size: u32,
    pub effects: PlantedEffects,
    /// Distinct images; defaults to one per ten instances.
    pub n_images: Option<usize>,
    pub min_impressions: u64,
    pub max_impressions: u64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n_instances: usize) -> Self {
        SyntheticConfig {
            seed,
            n_instances,
            image_size: 32,
            effects: PlantedEffects::default(),
            n_images: None,
            min_impressions: 100,
            max_impressions: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub pixels: RgbImage,
    pub background: String,
    pub banner_top: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub image: usize,
    pub attributes: AttributeTuple,
    pub impressions: u64,
    pub clicks: u64,
    pub click_probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config_seed: u64,
    pub images: Vec<SyntheticImage>,
    pub instances: Vec<SyntheticInstance>,
}

fn draw_image(size: u32, background: [u8; 3], banner_top: bool, sprite: [u8; 3], sprite_x: u32) -> RgbImage {
    let s = size;
    let mut img = RgbImage::from_pixel(s, s, Rgb(background));
    let margin = (s / 16).max(1);
    let banner_h = (s / 4).max(1);
    let y0 = if banner_top { margin } else { s - margin - banner_h };
    let (x0, x1) = ((s / 8).max(1), s - (s / 8).max(1));
    for y in y0..y0 + banner_h {
        for x in x0..x1 {
            img.put_pixel(x, y, Rgb([255, 255, 255]));
        }
    }
    // glyph row inside the banner
    let gy = y0 + banner_h / 2;
    for x in (x0 + 1..x1.saturating_sub(1)).filter(|x| x % 3 != 0) {
        img.put_pixel(x, gy, Rgb([0, 0, 0]));
    }
    let side = (s / 4).max(1);
    let sy = s / 2 - side / 2;
    for y in sy..sy + side {
        for x in sprite_x..(sprite_x + side).min(s) {
            img.put_pixel(x, y, Rgb(sprite));
        }
    }
    img
}

pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.n_instances == 0 {
        return Err(Error::invalid("n_instances must be at least 1"));
    }
    if cfg.image_size < 8 {
        return Err(Error::invalid("image_size must be at least 8"));
    }
    if cfg.min_impressions == 0 || cfg.min_impressions > cfg.max_impressions {
        return Err(Error::invalid("impression range must satisfy 1 <= min <= max"));
    }
    let palette = ColorPalette::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_images = cfg.n_images.unwrap_or((cfg.n_instances / 10).max(1)).max(1);

    struct ImageMeta {
        cate2: u8,
        cate3: u8,
        title: &'static str,
        desc: &'static str,
        ocr: &'static str,
    }
    let mut images = Vec::with_capacity(n_images);
    let mut metas = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let background = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
        let anchor = palette.by_label(background).and_then(|c| c.anchor).expect("anchored label");
        let banner_top = rng.random_bool(0.5);
        let sprite = SPRITES[rng.random_range(0..SPRITES.len())];
        let side = (cfg.image_size / 4).max(1);
        let sprite_x = rng.random_range(0..=cfg.image_size - side);
        images.push(SyntheticImage {
            id: format!("img-{i:05}"),
            pixels: draw_image(cfg.image_size, anchor, banner_top, sprite, sprite_x),
            background: background.to_owned(),
            banner_top,
        });
        metas.push(ImageMeta {
            cate2: rng.random_range(1..=4),
            cate3: rng.random_range(1..=9),
            title: TITLES[rng.random_range(0..TITLES.len())],
            desc: DESCS[rng.random_range(0..DESCS.len())],
            ocr: OCR_TEXTS[rng.random_range(0..OCR_TEXTS.len())],
        });
    }

    let mut seen = HashSet::new();
    let mut instances = Vec::with_capacity(cfg.n_instances);
    while instances.len() < cfg.n_instances {
        let image = rng.random_range(0..n_images);
        let m = &metas[image];
        let attributes = AttributeTuple {
            gender: rng.random_range(1..=2),
            age: rng.random_range(1..=9),
            month: rng.random_range(1..=12),
            weekday: rng.random_range(1..=7),
            time: rng.random_range(0..=23),
            position: rng.random_range(1..=4),
            cate2: m.cate2,
            cate3: m.cate3,
            title: m.title.to_owned(),
            desc: m.desc.to_owned(),
            ocr: m.ocr.to_owned(),
        };
        if !seen.insert((image, attributes.clone())) {
            continue;
        }
        let img = &images[image];
        let p = cfg
            .effects
            .click_probability(&img.background, img.banner_top, attributes.age, attributes.time);
        let impressions = rng.random_range(cfg.min_impressions..=cfg.max_impressions);
        let clicks = Binomial::new(impressions, p)
            .map_err(|e| Error::invalid(format!("click model: {e}")))?
            .sample(&mut rng);
        instances.push(SyntheticInstance {
            image,
            attributes,
            impressions,
            clicks,
            click_probability: p,
        });
    }
    Ok(SyntheticDataset {
        config_seed: cfg.seed,
        images,
        instances,
    })
}

impl SyntheticDataset {
    /// Exposure stream of one instance: clicked rows first.
    pub fn records_of<'a>(&'a self, instance: &'a SyntheticInstance) -> impl Iterator<Item = ClickLogRecord> + 'a {
        let id = &self.images[instance.image].id;
        (0..instance.impressions)
            .map(move |i| ClickLogRecord::from_key(id, &instance.attributes, i < instance.clicks))
    }

    pub fn records(&self) -> impl Iterator<Item = ClickLogRecord> + '_ {
        self.instances.iter().flat_map(move |inst| self.records_of(inst))
    }

    /// Aggregated view without materializing the exposure stream.
    pub fn aggregated(&self) -> Vec<AggregatedInstance> {
        self.instances
            .iter()
            .map(|i| {
                AggregatedInstance::new(
                    self.images[i.image].id.clone(),
                    i.attributes.clone(),
                    i.impressions,
                    i.clicks,
                )
            })
            .collect()
    }

    pub fn image(&self, id: &str) -> Option<&SyntheticImage> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Writes `images/<id>.png` and `clicks.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::file(&img_dir, e))?;
        for img in &self.images {
            img.pixels.save(img_dir.join(format!("{}.png", img.id)))?;
        }
        let path = dir.join("clicks.csv");
        super::io::write_click_csv(&path, self.records())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::color::dominant_color;

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            min_impressions: 5,
            max_impressions: 20,
            ..SyntheticConfig::new(42, 30)
        };
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        a.write(&dir.path().join("a")).unwrap();
        b.write(&dir.path().join("b")).unwrap();
        for f in ["clicks.csv", "images/img-00000.png", "images/img-00002.png"] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        let c = generate_synthetic_dataset(&SyntheticConfig::new(43, 30)).unwrap();
        assert_ne!(a.instances, c.instances);
    }

    #[test]
    fn background_is_the_dominant_colour() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(3, 60)).unwrap();
        let palette = ColorPalette::standard();
        for img in &ds.images {
            assert_eq!(dominant_color(&img.pixels, &palette, 5).unwrap().label, img.background);
        }
    }

    #[test]
    fn instances_are_unique_keys() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_images: Some(1),
            ..SyntheticConfig::new(1, 500)
        })
        .unwrap();
        let keys: HashSet<_> = ds.instances.iter().map(|i| (i.image, i.attributes.clone())).collect();
        assert_eq!(keys.len(), 500);
    }

    #[test]
    fn closed_form_probability() {
        let e = PlantedEffects::default();
        assert!((e.click_probability("red", true, 7, 3) - (0.06 + 0.04 + 0.05 + 0.03)).abs() < 1e-15);
        assert!((e.click_probability("grey", true, 2, 5) - 0.06).abs() < 1e-15);
        assert!((e.click_probability("blue", false, 2, 5) - 0.06).abs() < 1e-15);
        assert!((e.click_probability("blue", false, 7, 5) - 0.06).abs() < 1e-15);
    }
}
