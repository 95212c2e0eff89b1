//! Synthetic verification cohort with planted signal.
//!
//! Each household gets a latent SEP value `z ~ N(0, 1)`. Categorical assets
//! follow ordered thresholds on `z` plus noise, income and expenditure are
//! log-normal around an exponential trend in `z`, and every image type
//! renders visual cues (brightness level, stripe frequency, blob size) driven
//! by a per-type cue `c = s * z + sqrt(1 - s^2) * e` where `s` is the
//! configured signal strength for that type. Satellite views are painted into
//! one georeferenced scene raster, one tile per household.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Geocode, HouseholdRecord, ImageRef, ImageType};
use crate::error::{Error, Result};
use crate::imagery::{GeoTransform, Image, Raster};
use crate::{par, rng};

/// Ordered categories, richest first, and the share of households in each at
/// `z`-quantiles (before noise).
pub const ASSET_SCHEMA: &[(&str, &[(&str, f64)])] = &[
    ("water_source", &[("piped", 0.25), ("protected_well", 0.30), ("unprotected_well", 0.30), ("surface", 0.15)]),
    ("floor", &[("tile", 0.15), ("cement", 0.45), ("earth", 0.40)]),
    ("roof", &[("concrete", 0.10), ("metal_sheet", 0.60), ("thatch", 0.30)]),
    ("wall", &[("block", 0.40), ("brick", 0.25), ("reed", 0.35)]),
    ("lighting", &[("electricity", 0.35), ("solar", 0.20), ("paraffin", 0.25), ("none", 0.20)]),
    ("cooking_fuel", &[("gas", 0.10), ("charcoal", 0.40), ("firewood", 0.50)]),
    ("latrine", &[("flush", 0.15), ("improved_pit", 0.30), ("traditional_pit", 0.40), ("none", 0.15)]),
    ("television", &[("yes", 0.35), ("no", 0.65)]),
    ("fridge", &[("yes", 0.20), ("no", 0.80)]),
    ("radio", &[("yes", 0.50), ("no", 0.50)]),
    ("mobile_phone", &[("yes", 0.70), ("no", 0.30)]),
    ("bicycle", &[("yes", 0.30), ("no", 0.70)]),
];

pub const INCOME_SOURCES: &[&str] = &["business", "farming", "other", "remittances", "salary"];
pub const EXPENDITURE_SOURCES: &[&str] =
    &["education", "energy", "food", "health", "housing", "transport"];

/// Default orientation anchor for the asset index.
pub const ANCHOR: (&str, &str) = ("water_source", "piped");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_households: usize,
    /// Side of the rendered photographs in pixels.
    pub image_size: usize,
    /// Probability that any single photograph is missing.
    pub missing_rate: f64,
    /// Probability that any single asset answer is missing.
    pub asset_missing_rate: f64,
    /// Signal strength for image types not listed in `signal`.
    pub default_signal: f64,
    pub signal: BTreeMap<ImageType, f64>,
    /// Standard deviation of per-variable asset noise relative to `z`.
    pub asset_noise: f64,
    /// Log-scale noise on total expenditure.
    pub expenditure_noise: f64,
    /// Log-scale noise on total income.
    pub income_noise: f64,
    /// Satellite scene resolution in meters per pixel.
    pub pixel_size: f64,
    /// Side of each household's tile in the scene, meters.
    pub tile_m: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_households: 975,
            image_size: 64,
            missing_rate: 0.03,
            asset_missing_rate: 0.002,
            default_signal: 0.3,
            signal: BTreeMap::new(),
            asset_noise: 0.6,
            expenditure_noise: 0.6,
            income_noise: 0.9,
            pixel_size: 2.0,
            tile_m: 200.0,
        }
    }
}

impl SynthConfig {
    pub fn signal_of(&self, t: ImageType) -> f64 {
        self.signal.get(&t).copied().unwrap_or(self.default_signal)
    }

    /// Same signal strength for every image type.
    pub fn with_uniform_signal(mut self, s: f64) -> Self {
        self.default_signal = s;
        self.signal.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let unit = |name: &str, v: f64, errors: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                errors.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        };
        unit("missing_rate", self.missing_rate, &mut errors);
        unit("asset_missing_rate", self.asset_missing_rate, &mut errors);
        unit("default_signal", self.default_signal, &mut errors);
        for (t, s) in &self.signal {
            unit(&format!("signal.{t}"), *s, &mut errors);
        }
        if self.n_households < 2 {
            errors.push("n_households must be at least 2".into());
        }
        if self.image_size < 4 {
            errors.push("image_size must be at least 4".into());
        }
        for (name, v) in [
            ("asset_noise", self.asset_noise),
            ("expenditure_noise", self.expenditure_noise),
            ("income_noise", self.income_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.pixel_size > 0.0) || !(self.tile_m >= 4.0 * self.pixel_size) {
            errors.push("tile_m must cover at least 4 pixels of positive size".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn tile_px(&self) -> usize {
        (self.tile_m / self.pixel_size).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    /// Photo references point at `images/<type>/<id>.png`, relative to
    /// wherever the caller writes [`SyntheticCohort::photos`].
    pub households: Vec<HouseholdRecord>,
    pub latent: Vec<f64>,
    /// Per household, the cue driving each image type (indexed by
    /// [`ImageType::index`]).
    pub cues: Vec<[f64; 13]>,
    /// Rendered photographs, present only where not missing.
    pub photos: Vec<BTreeMap<ImageType, Image>>,
    pub scene: Raster,
}

impl SyntheticCohort {
    pub fn photo_path(image_type: ImageType, id: &str) -> PathBuf {
        PathBuf::from("images").join(image_type.name()).join(format!("{id}.png"))
    }
}

fn logistic(c: f64) -> f64 {
    1.0 / (1.0 + (-1.7 * c).exp())
}

/// Inverse standard normal CDF (Acklam's rational approximation).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

fn draw_asset<R: Rng>(rng: &mut R, z: f64, noise: f64, categories: &[(&str, f64)]) -> String {
    let scale = (1.0 + noise * noise).sqrt();
    let value = z + noise * rng.sample::<f64, _>(StandardNormal);
    // Categories are listed richest first: walk from the top share downwards.
    let mut upper_share = 0.0;
    for (label, share) in categories {
        upper_share += share;
        if upper_share >= 1.0 - 1e-12 {
            return label.to_string();
        }
        if value > scale * normal_quantile(1.0 - upper_share) {
            return label.to_string();
        }
    }
    categories.last().unwrap().0.to_string()
}

fn split_money<R: Rng>(rng: &mut R, total: f64, sources: &[&str]) -> BTreeMap<String, f64> {
    let mut weights: Vec<f64> = sources
        .iter()
        .map(|_| {
            let w: f64 = rng.sample(Exp1);
            if rng.random::<f64>() < 0.6 { w } else { 0.0 }
        })
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        weights[0] = 1.0;
    }
    let sum: f64 = weights.iter().sum();
    sources
        .iter()
        .zip(&weights)
        .map(|(s, w)| (s.to_string(), (total * w / sum).round()))
        .collect()
}

const PALETTE: [[f64; 3]; 13] = [
    [0.45, 0.42, 0.35],
    [0.40, 0.45, 0.32],
    [0.55, 0.35, 0.25],
    [0.60, 0.55, 0.50],
    [0.45, 0.50, 0.55],
    [0.50, 0.50, 0.52],
    [0.55, 0.45, 0.35],
    [0.35, 0.40, 0.55],
    [0.45, 0.35, 0.30],
    [0.40, 0.38, 0.36],
    [0.50, 0.55, 0.58],
    [0.50, 0.45, 0.40],
    [0.35, 0.50, 0.60],
];

/// Render one photograph whose appearance is driven by `u` in `(0, 1)`:
/// overall brightness, stripe frequency and blob radius all grow with `u`.
/// Hue tint, stripe orientation and blob position are nuisance.
pub fn render_photo<R: Rng>(rng: &mut R, image_type: ImageType, u: f64, size: usize) -> Image {
    let base = PALETTE[image_type.index()];
    let tint: [f64; 3] = {
        let a = rng.random_range(-0.08..0.08);
        let b = rng.random_range(-0.08..0.08);
        [a, b, -a - b]
    };
    let level = 0.35 + 0.9 * u;
    let freq = (1.0 + 5.0 * u) * std::f64::consts::TAU / size as f64;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (st, ct) = theta.sin_cos();
    let radius = size as f64 * (0.06 + 0.18 * u);
    let by = rng.random_range(radius..size as f64 - radius);
    let bx = rng.random_range(radius..size as f64 - radius);
    let blob = [0.95, 0.92, 0.80];

    let mut pixels = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64, c as f64);
            let stripe = 0.07 * (freq * (x * ct + y * st)).sin();
            let inside = (y - by).powi(2) + (x - bx).powi(2) <= radius * radius;
            for ch in 0..3 {
                let v = if inside {
                    blob[ch]
                } else {
                    (base[ch] + tint[ch]) * level + stripe
                };
                let noise = rng.random_range(-0.03..0.03);
                pixels.push(((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image { width: size, height: size, pixels, provenance: None }
}

/// Paint a household tile: neighbourhood density follows `u100`, the central
/// dwelling's roof size and brightness follow `u25`. Metal roofs get a few
/// saturated glint pixels.
fn render_tile<R: Rng>(rng: &mut R, u25: f64, u100: f64, tile: usize) -> Vec<u8> {
    let mut px = vec![0.0f64; tile * tile * 3];
    let ground = [0.36 + 0.08 * u100, 0.40 - 0.06 * u100, 0.22 + 0.06 * u100];
    for (i, v) in px.iter_mut().enumerate() {
        *v = ground[i % 3] + rng.random_range(-0.03..0.03);
    }
    let paint = |px: &mut Vec<f64>, r0: usize, c0: usize, h: usize, w: usize, color: [f64; 3]| {
        for r in r0..(r0 + h).min(tile) {
            for c in c0..(c0 + w).min(tile) {
                for ch in 0..3 {
                    px[(r * tile + c) * 3 + ch] = color[ch];
                }
            }
        }
    };
    let metal = [0.78, 0.79, 0.82];
    let thatch = [0.42, 0.32, 0.20];
    let lerp = |a: [f64; 3], b: [f64; 3], t: f64| [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t);

    // Road through the neighbourhood.
    if rng.random::<f64>() < u100 {
        let r0 = rng.random_range(0..tile / 5);
        paint(&mut px, r0, 0, (tile / 25).max(1), tile, [0.55, 0.53, 0.50]);
    }
    let core = tile * 3 / 10;
    let n_buildings = 3 + (12.0 * u100).round() as usize;
    for _ in 0..n_buildings {
        let side = (tile / 14).max(2) + rng.random_range(0..(tile / 14).max(1));
        let (r0, c0) = loop {
            let r0 = rng.random_range(0..tile - side);
            let c0 = rng.random_range(0..tile - side);
            let clear = |a: usize| a + side < tile / 2 - core / 2 || a > tile / 2 + core / 2;
            if clear(r0) || clear(c0) {
                break (r0, c0);
            }
        };
        let t = if rng.random::<f64>() < u100 { 1.0 } else { 0.2 };
        paint(&mut px, r0, c0, side, side, lerp(thatch, metal, t));
    }
    // Dwelling at the tile center.
    let side = ((tile as f64 * (0.04 + 0.09 * u25)).round() as usize).max(2);
    let r0 = tile / 2 - side / 2;
    paint(&mut px, r0, r0, side, side, lerp(thatch, metal, u25));
    if u25 > 0.6 {
        for _ in 0..3 {
            let r = r0 + rng.random_range(0..side);
            let c = r0 + rng.random_range(0..side);
            paint(&mut px, r, c, 1, 1, [1.0, 1.0, 1.0]);
        }
    }
    px.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

struct HouseholdDraw {
    record: HouseholdRecord,
    latent: f64,
    cues: [f64; 13],
    photos: BTreeMap<ImageType, Image>,
    tile: Vec<u8>,
}

fn draw_household(config: &SynthConfig, seed: u64, index: usize, geocode: Geocode) -> HouseholdDraw {
    let mut g = rng::stream(seed, "synth-household", index as u64);
    let id = format!("hh{:04}", index + 1);
    let z: f64 = g.sample(StandardNormal);

    let mut cues = [0.0; 13];
    for t in ImageType::ALL {
        let s = config.signal_of(t);
        let e: f64 = g.sample(StandardNormal);
        cues[t.index()] = s * z + (1.0 - s * s).max(0.0).sqrt() * e;
    }

    let mut assets = BTreeMap::new();
    for (var, cats) in ASSET_SCHEMA {
        let label = draw_asset(&mut g, z, config.asset_noise, cats);
        let missing = g.random::<f64>() < config.asset_missing_rate;
        assets.insert(var.to_string(), (!missing).then_some(label));
    }

    let eps_e: f64 = g.sample(StandardNormal);
    let eps_i: f64 = g.sample(StandardNormal);
    let expenditure = (2500f64.ln() + 0.7 * z + config.expenditure_noise * eps_e).exp();
    let income = (3000f64.ln() + 0.8 * z + config.income_noise * eps_i).exp();
    let expenditure_sources = split_money(&mut g, expenditure, EXPENDITURE_SOURCES);
    let income_sources = split_money(&mut g, income, INCOME_SOURCES);

    let mut images = BTreeMap::new();
    let mut photos = BTreeMap::new();
    for t in ImageType::photos() {
        let mut pg = rng::stream(seed, "synth-photo", (index * 13 + t.index()) as u64);
        if pg.random::<f64>() < config.missing_rate {
            images.insert(t, ImageRef::Missing);
            continue;
        }
        let img = render_photo(&mut pg, t, logistic(cues[t.index()]), config.image_size)
            .with_provenance(&id, t);
        images.insert(t, ImageRef::Path(SyntheticCohort::photo_path(t, &id)));
        photos.insert(t, img);
    }

    let mut tg = rng::stream(seed, "synth-tile", index as u64);
    let tile = render_tile(
        &mut tg,
        logistic(cues[ImageType::Satellite25m.index()]),
        logistic(cues[ImageType::Satellite100m.index()]),
        config.tile_px(),
    );

    HouseholdDraw {
        record: HouseholdRecord {
            id,
            geocode,
            assets,
            income_sources,
            expenditure_sources,
            images,
        },
        latent: z,
        cues,
        photos,
        tile,
    }
}

/// Generate a cohort. Output depends only on `config` and `seed`.
pub fn generate_synthetic_cohort(config: &SynthConfig, seed: u64) -> Result<SyntheticCohort> {
    config.validate()?;
    let n = config.n_households;
    let tile = config.tile_px();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let geo = GeoTransform { origin_x: 500_000.0, origin_y: 7_190_000.0, pixel_size: config.pixel_size };

    let draws = par::map((0..n).collect(), |i| {
        let (tr, tc) = (i / cols, i % cols);
        let (x, y) = geo.center_of((tr * tile + tile / 2) as i64, (tc * tile + tile / 2) as i64);
        draw_household(config, seed, i, Geocode { x, y })
    });

    let (width, height) = (cols * tile, rows * tile);
    let mut pixels = vec![0u8; width * height * 3];
    for (i, d) in draws.iter().enumerate() {
        let (tr, tc) = (i / cols, i % cols);
        for r in 0..tile {
            let dst = ((tr * tile + r) * width + tc * tile) * 3;
            pixels[dst..dst + tile * 3].copy_from_slice(&d.tile[r * tile * 3..(r + 1) * tile * 3]);
        }
    }
    // Empty grid cells get bare ground.
    for i in n..rows * cols {
        let (tr, tc) = (i / cols, i % cols);
        for r in 0..tile {
            let dst = ((tr * tile + r) * width + tc * tile) * 3;
            for p in pixels[dst..dst + tile * 3].chunks_mut(3) {
                p.copy_from_slice(&[97, 97, 61]);
            }
        }
    }
    let scene = Raster::new(width, height, pixels, geo)?;

    let mut out = SyntheticCohort {
        households: Vec::with_capacity(n),
        latent: Vec::with_capacity(n),
        cues: Vec::with_capacity(n),
        photos: Vec::with_capacity(n),
        scene,
    };
    for d in draws {
        out.households.push(d.record);
        out.latent.push(d.latent);
        out.cues.push(d.cues);
        out.photos.push(d.photos);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_expenditure_sep, compute_income_sep};
    use crate::imagery::crop_buffer;
    use crate::stats::spearman;

    fn small(n: usize) -> SynthConfig {
        SynthConfig { n_households: n, image_size: 16, tile_m: 60.0, ..SynthConfig::default() }
    }

    #[test]
    fn quantile_approximation_is_accurate() {
        assert!(normal_quantile(0.5).abs() < 1e-9);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-5);
        assert!((normal_quantile(0.01) + 2.326348).abs() < 1e-5);
    }

    #[test]
    fn strong_signal_drives_light_source_brightness() {
        let mut cfg = small(200);
        cfg.missing_rate = 0.0;
        cfg.signal.insert(ImageType::LightSource, 1.0);
        let c = generate_synthetic_cohort(&cfg, 21).unwrap();
        let brightness: Vec<f64> =
            c.photos.iter().map(|p| p[&ImageType::LightSource].mean_brightness()).collect();
        let rho = spearman(&c.latent, &brightness).unwrap();
        assert!(rho >= 0.9, "rho = {rho}");
    }

    #[test]
    fn no_missing_images_at_zero_rate() {
        let mut cfg = small(50);
        cfg.missing_rate = 0.0;
        let c = generate_synthetic_cohort(&cfg, 2).unwrap();
        assert!(c.households.iter().all(|h| h.images.values().all(|r| !r.is_missing())));
        assert!(c.photos.iter().all(|p| p.len() == 11));
    }

    #[test]
    fn zero_signal_images_carry_no_latent_information() {
        let cfg = small(200).with_uniform_signal(0.0);
        let c = generate_synthetic_cohort(&cfg, 8).unwrap();
        for t in ImageType::photos() {
            let (lat, bright): (Vec<f64>, Vec<f64>) = c
                .photos
                .iter()
                .zip(&c.latent)
                .filter_map(|(p, z)| p.get(&t).map(|img| (*z, img.mean_brightness())))
                .unzip();
            let rho = spearman(&lat, &bright).unwrap();
            assert!(rho.abs() < 0.15, "{t}: rho = {rho}");
        }
        for t in [ImageType::Satellite25m, ImageType::Satellite100m] {
            let buffer = if t == ImageType::Satellite25m { 8.0 } else { 29.0 };
            let bright: Vec<f64> = c
                .households
                .iter()
                .map(|h| crop_buffer(&c.scene, (h.geocode.x, h.geocode.y), buffer).unwrap().mean_brightness())
                .collect();
            let rho = spearman(&c.latent, &bright).unwrap();
            assert!(rho.abs() < 0.15, "{t}: rho = {rho}");
        }
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let mut cfg = small(10);
        cfg.missing_rate = 1.5;
        assert!(generate_synthetic_cohort(&cfg, 1).is_err());
        let mut cfg = small(10);
        cfg.signal.insert(ImageType::Wall, -0.1);
        assert!(generate_synthetic_cohort(&cfg, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_money_monotone() {
        let cfg = small(120);
        let a = generate_synthetic_cohort(&cfg, 5).unwrap();
        let b = generate_synthetic_cohort(&cfg, 5).unwrap();
        assert_eq!(a.households, b.households);
        assert_eq!(a.scene, b.scene);
        let income: Vec<f64> = a.households.iter().map(|h| compute_income_sep(h).unwrap()).collect();
        let exp: Vec<f64> = a.households.iter().map(|h| compute_expenditure_sep(h).unwrap()).collect();
        assert!(spearman(&a.latent, &income).unwrap() > 0.4);
        assert!(spearman(&a.latent, &exp).unwrap() > 0.5);
        assert!(income.iter().chain(&exp).all(|v| *v >= 0.0));
    }

    #[test]
    fn every_household_window_fits_the_scene() {
        let cfg = SynthConfig { n_households: 10, image_size: 8, ..SynthConfig::default() };
        let c = generate_synthetic_cohort(&cfg, 1).unwrap();
        for h in &c.households {
            let near = crop_buffer(&c.scene, (h.geocode.x, h.geocode.y), 25.0).unwrap();
            let far = crop_buffer(&c.scene, (h.geocode.x, h.geocode.y), 100.0).unwrap();
            assert_eq!(near.width, 25);
            assert_eq!(far.width, 100);
        }
    }
}
