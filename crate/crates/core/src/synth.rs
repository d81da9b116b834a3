//! Synthetic few-shot segmentation data with planted latent classes.
//!
//! Every class gets a fixed appearance signature (hue, saturation, stripe
//! orientation and period) drawn from `appearance_seed`, so datasets built
//! with different layout seeds share class appearances. Base classes are
//! written to the public masks; latent classes are painted into the images
//! but labelled background, and only the oracle masks record them.
//!
//! On disk:
//!
//! ```text
//! out/images/<id>.png     RGB image
//! out/masks/<id>.png      public labels (base ids, 0, 255 on base-object rims)
//! out/oracle/<id>.png     true ids of every object, base and latent
//! out/oracle/legend.txt   `base = ...` / `latent = ...`
//! out/splits.txt          fold partition of the base classes
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_id_list, KeyValues};
use crate::dataset::{self, SplitConfig, BACKGROUND, IGNORE, SPLIT_FILE};
use crate::error::{Error, Result};

pub const ORACLE_DIR: &str = "oracle";
pub const LEGEND_FILE: &str = "legend.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_base_classes: usize,
    pub num_latent_classes: usize,
    pub images: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub num_folds: usize,
    /// Seed of the class signatures.
    pub appearance_seed: u64,
    /// Seed of the layouts, backgrounds and per-object jitter.
    pub seed: u64,
    /// Smallest allowed hue gap between two class signatures (fraction of the wheel).
    pub min_signature_distance: f64,
    /// Mark a one-pixel rim around base objects as ignore.
    pub ignore_rim: bool,
    /// Relative value modulation of the stripe texture.
    pub stripe_contrast: f64,
    /// Width of the per-object hue jitter of base classes (fraction of the wheel).
    pub base_hue_spread: f64,
    /// Width of the per-object hue jitter of latent classes.
    pub latent_hue_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_base_classes: 2,
            num_latent_classes: 2,
            images: 60,
            image_size: 64,
            min_objects: 2,
            max_objects: 3,
            min_radius: 6.0,
            max_radius: 10.0,
            num_folds: 2,
            appearance_seed: 0,
            seed: 0,
            min_signature_distance: 0.05,
            ignore_rim: true,
            stripe_contrast: 0.15,
            base_hue_spread: 0.16,
            latent_hue_spread: 0.04,
        }
    }
}

impl SynthConfig {
    /// Six base classes with one held out per fold and two latent classes,
    /// used for the training runs.
    pub fn benchmark() -> Self {
        Self {
            num_base_classes: 6,
            images: 120,
            num_folds: 6,
            ..Self::default()
        }
    }
}

/// Appearance of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub stripe_angle: f64,
    pub stripe_period: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Legend {
    pub base: Vec<u8>,
    pub latent: Vec<u8>,
}

impl Legend {
    pub fn render(&self) -> String {
        let join = |v: &[u8]| v.iter().map(u8::to_string).collect::<Vec<_>>().join(",");
        let mut kv = KeyValues::new();
        kv.set("base", join(&self.base));
        kv.set("latent", join(&self.latent));
        kv.render()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let list = |k: &str| -> Result<Vec<u8>> {
            kv.get(k)
                .map(parse_id_list)
                .unwrap_or_else(|| Err(Error::Config(format!("legend lacks `{k}`"))))
        };
        Ok(Self {
            base: list("base")?,
            latent: list("latent")?,
        })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(ORACLE_DIR).join(LEGEND_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub pixels: Array3<u8>,
    pub mask: Array2<u8>,
    pub oracle: Array2<u8>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub signatures: Vec<Signature>,
    pub images: Vec<SynthImage>,
    pub splits: SplitConfig,
    pub legend: Legend,
}

impl SynthDataset {
    /// In-memory [`dataset::Dataset`] view of the public images and masks.
    pub fn to_dataset(&self) -> Result<dataset::Dataset> {
        let samples = self
            .images
            .iter()
            .map(|im| dataset::ImageSample::new(im.id.clone(), im.pixels.clone(), im.mask.clone()))
            .collect::<Result<Vec<_>>>()?;
        dataset::Dataset::from_samples(samples, self.splits.clone())
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        for sub in ["images", "masks", ORACLE_DIR] {
            let dir = out.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for im in &self.images {
            let name = format!("{}.png", im.id);
            dataset::write_rgb(&out.join("images").join(&name), &im.pixels)?;
            dataset::write_gray(&out.join("masks").join(&name), &im.mask)?;
            dataset::write_gray(&out.join(ORACLE_DIR).join(&name), &im.oracle)?;
        }
        let legend = out.join(ORACLE_DIR).join(LEGEND_FILE);
        std::fs::write(&legend, self.legend.render()).map_err(|e| Error::io(&legend, e))?;
        let split = out.join(SPLIT_FILE);
        std::fs::write(&split, self.splits.render()).map_err(|e| Error::io(&split, e))?;
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Class signatures: hues evenly spaced around the wheel (random offset and
/// random class-to-slot assignment), each with its own stripe pattern.
pub fn signatures(config: &SynthConfig) -> Result<Vec<Signature>> {
    let n = config.num_base_classes + config.num_latent_classes;
    if n == 0 {
        return Err(Error::Config("no classes requested".into()));
    }
    let gap = 1.0 / n as f64;
    if gap < config.min_signature_distance {
        return Err(Error::Config(format!(
            "{n} classes cannot keep a hue gap of {}",
            config.min_signature_distance
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.appearance_seed);
    let offset: f64 = rng.random();
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    Ok(slots
        .into_iter()
        .map(|slot| Signature {
            hue: (offset + slot as f64 * gap).rem_euclid(1.0),
            saturation: rng.random_range(0.4..0.5),
            value: rng.random_range(0.85..0.95),
            stripe_angle: rng.random_range(0.0..PI),
            stripe_period: rng.random_range(8.0..16.0),
        })
        .collect())
}

struct Placed {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    class_index: usize,
    hue_jitter: f64,
    value_jitter: f64,
    phase: f64,
}

impl Placed {
    /// Normalised elliptical radius of pixel centre (y, x); < 1 inside.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    let b = config.num_base_classes;
    let l = config.num_latent_classes;
    if b == 0 {
        return Err(Error::Config("at least one base class is required".into()));
    }
    if b + l > 254 {
        return Err(Error::Config("too many classes for 8-bit masks".into()));
    }
    if config.min_objects == 0 || config.min_objects > config.max_objects {
        return Err(Error::Config("objects-per-image range is empty".into()));
    }
    if !(config.min_radius > 0.0 && config.min_radius <= config.max_radius) {
        return Err(Error::Config("radius range is empty".into()));
    }
    let size = config.image_size;
    if (2.0 * config.min_radius + 2.0) > size as f64 {
        return Err(Error::Layout(format!(
            "objects of radius {} do not fit in {size}x{size}",
            config.min_radius
        )));
    }
    let sigs = signatures(config)?;
    let base_ids: Vec<u8> = (1..=b as u8).collect();
    let latent_ids: Vec<u8> = (b as u8 + 1..=(b + l) as u8).collect();
    let splits = SplitConfig::even(&base_ids, config.num_folds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut images = Vec::with_capacity(config.images);
    for n in 0..config.images {
        images.push(render_image(config, &sigs, &mut rng, format!("img_{n:04}"))?);
    }
    Ok(SynthDataset {
        config: config.clone(),
        signatures: sigs,
        images,
        splits,
        legend: Legend {
            base: base_ids,
            latent: latent_ids,
        },
    })
}

const LAYOUT_RESTARTS: usize = 200;
const PLACEMENT_ATTEMPTS: usize = 100;

fn try_layout(config: &SynthConfig, classes: &[usize], rng: &mut ChaCha8Rng) -> Option<Vec<Placed>> {
    let size = config.image_size as f64;
    let mut placed: Vec<Placed> = Vec::with_capacity(classes.len());
    for &class_index in classes {
        let spread = if class_index < config.num_base_classes {
            config.base_hue_spread
        } else {
            config.latent_hue_spread
        };
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let ry = rng.random_range(config.min_radius..=config.max_radius);
            let rx = rng.random_range(config.min_radius..=config.max_radius);
            let r = ry.max(rx);
            if 2.0 * r + 2.0 > size {
                continue;
            }
            let cy = rng.random_range(r + 1.0..size - r - 1.0);
            let cx = rng.random_range(r + 1.0..size - r - 1.0);
            let clear = placed.iter().all(|p| {
                let d = ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt();
                d > p.rx.max(p.ry) + r + 2.0
            });
            if clear {
                placed.push(Placed {
                    cy,
                    cx,
                    ry,
                    rx,
                    angle: rng.random_range(0.0..PI),
                    class_index,
                    hue_jitter: (rng.random::<f64>() - 0.5) * spread,
                    value_jitter: rng.random_range(-0.05..0.05),
                    phase: rng.random_range(0.0..2.0 * PI),
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

fn render_image(
    config: &SynthConfig,
    sigs: &[Signature],
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<SynthImage> {
    let size = config.image_size;
    let b = config.num_base_classes;
    let l = config.num_latent_classes;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let classes: Vec<usize> = (0..count)
        .map(|k| match k {
            // first object base, second latent (when any), the rest free
            0 => rng.random_range(0..b),
            1 if l > 0 => b + rng.random_range(0..l),
            _ => rng.random_range(0..b + l),
        })
        .collect();
    let placed = (0..LAYOUT_RESTARTS)
        .find_map(|_| try_layout(config, &classes, rng))
        .ok_or_else(|| {
            Error::Layout(format!(
                "cannot place {count} objects in a {size}x{size} image"
            ))
        })?;

    let bg_hue: f64 = rng.random();
    let bg_sat = rng.random_range(0.0..0.2);
    let bg_val = rng.random_range(0.1..0.3);
    let mut pixels = Array3::<u8>::zeros((size, size, 3));
    let mut mask = Array2::<u8>::from_elem((size, size), BACKGROUND);
    let mut oracle = Array2::<u8>::from_elem((size, size), BACKGROUND);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let noise = rng.random_range(-0.05..0.05);
            let mut rgb = hsv_to_rgb(bg_hue, bg_sat, bg_val + noise);
            for p in &placed {
                let r = p.radius(fy, fx);
                let class_id = (p.class_index + 1) as u8;
                let is_base = p.class_index < b;
                if r < 1.0 {
                    let sig = &sigs[p.class_index];
                    let (s, c) = sig.stripe_angle.sin_cos();
                    let stripe = (2.0 * PI * (fx * c + fy * s) / sig.stripe_period + p.phase).sin();
                    let v = (sig.value + p.value_jitter) * (1.0 + config.stripe_contrast * stripe)
                        + rng.random_range(-0.02..0.02);
                    rgb = hsv_to_rgb(sig.hue + p.hue_jitter, sig.saturation, v);
                    oracle[[y, x]] = class_id;
                    if is_base {
                        mask[[y, x]] = class_id;
                    }
                } else if is_base && config.ignore_rim && r < 1.0 + 1.0 / p.rx.min(p.ry) {
                    mask[[y, x]] = IGNORE;
                }
            }
            for c in 0..3 {
                pixels[[y, x, c]] = to_u8(rgb[c]);
            }
        }
    }
    Ok(SynthImage {
        id,
        pixels,
        mask,
        oracle,
    })
}

/// Per-latent-class agreement between pseudo labels and the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScore {
    pub class_id: u8,
    pub pixels: usize,
    /// Among the class's pixels with a non-zero pseudo label, the share
    /// carrying the most frequent one (0 when none is mined).
    pub purity: f64,
    pub dominant_label: u8,
    /// Share of the class's pixels with a non-zero pseudo label.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningScore {
    pub per_class: Vec<LatentScore>,
    pub mean_purity: f64,
    pub mean_coverage: f64,
}

/// Scores aligned `(id, pseudo mask, oracle mask)` triples against the
/// latent classes of `legend`.
pub fn score_mining_masks<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a Array2<u8>, &'a Array2<u8>)>,
    legend: &Legend,
) -> Result<MiningScore> {
    // class -> label -> count
    let mut hist: BTreeMap<u8, BTreeMap<u8, usize>> =
        legend.latent.iter().map(|&c| (c, BTreeMap::new())).collect();
    for (id, pseudo, oracle) in pairs {
        if pseudo.dim() != oracle.dim() {
            return Err(Error::IdMismatch(format!(
                "`{id}`: pseudo {:?} vs oracle {:?}",
                pseudo.dim(),
                oracle.dim()
            )));
        }
        for (&o, &p) in oracle.iter().zip(pseudo.iter()) {
            if let Some(h) = hist.get_mut(&o) {
                *h.entry(p).or_default() += 1;
            }
        }
    }
    let mut per_class = Vec::new();
    for (class_id, h) in hist {
        let pixels: usize = h.values().sum();
        if pixels == 0 {
            continue;
        }
        let (dominant_label, top) = h
            .iter()
            .filter(|(&l, _)| l != BACKGROUND)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&l, &c)| (l, c))
            .unwrap_or((BACKGROUND, 0));
        let zero = h.get(&BACKGROUND).copied().unwrap_or(0);
        let mined = pixels - zero;
        per_class.push(LatentScore {
            class_id,
            pixels,
            purity: if mined == 0 { 0.0 } else { top as f64 / mined as f64 },
            dominant_label,
            coverage: (pixels - zero) as f64 / pixels as f64,
        });
    }
    if per_class.is_empty() {
        return Err(Error::Config("no latent-class pixels to score".into()));
    }
    let n = per_class.len() as f64;
    Ok(MiningScore {
        mean_purity: per_class.iter().map(|s| s.purity).sum::<f64>() / n,
        mean_coverage: per_class.iter().map(|s| s.coverage).sum::<f64>() / n,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            images: 20,
            seed: 3,
            num_latent_classes: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.images, b.images);
        let c = generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn masks_never_contain_latent_ids() {
        let d = generate(&SynthConfig::default()).unwrap();
        for im in &d.images {
            for (&m, &o) in im.mask.iter().zip(im.oracle.iter()) {
                assert!(!d.legend.latent.contains(&m));
                if d.legend.latent.contains(&o) {
                    assert_eq!(m, BACKGROUND);
                }
            }
        }
    }

    #[test]
    fn latent_pixels_in_most_images() {
        let d = generate(&SynthConfig::default()).unwrap();
        let with_latent = d
            .images
            .iter()
            .filter(|im| im.oracle.iter().any(|o| d.legend.latent.contains(o)))
            .count();
        assert!(with_latent as f64 >= 0.9 * d.images.len() as f64);
    }

    #[test]
    fn loads_as_dataset() {
        let d = generate(&small()).unwrap();
        let ds = d.to_dataset().unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.universe().len(), 2);
    }

    #[test]
    fn signatures_are_separated() {
        let cfg = SynthConfig {
            num_base_classes: 4,
            num_latent_classes: 3,
            ..SynthConfig::default()
        };
        let sigs = signatures(&cfg).unwrap();
        for (i, a) in sigs.iter().enumerate() {
            for b in &sigs[i + 1..] {
                let d = (a.hue - b.hue).abs();
                assert!(d.min(1.0 - d) >= cfg.min_signature_distance - 1e-12);
            }
        }
        let crowded = SynthConfig {
            num_base_classes: 20,
            num_latent_classes: 10,
            ..SynthConfig::default()
        };
        assert!(signatures(&crowded).is_err());
    }

    #[test]
    fn unsatisfiable_layout() {
        let cfg = SynthConfig {
            image_size: 24,
            min_objects: 6,
            max_objects: 6,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Layout(_))));
    }

    #[test]
    fn mining_score_identity_and_zero() {
        let d = generate(&SynthConfig::default()).unwrap();
        let relabel: Vec<Array2<u8>> = d
            .images
            .iter()
            .map(|im| im.oracle.mapv(|o| if d.legend.latent.contains(&o) { o } else { 0 }))
            .collect();
        let s = score_mining_masks(
            d.images
                .iter()
                .zip(&relabel)
                .map(|(im, p)| (im.id.as_str(), p, &im.oracle)),
            &d.legend,
        )
        .unwrap();
        assert!(s.per_class.iter().all(|c| c.purity == 1.0 && c.coverage == 1.0));

        let zeros: Vec<Array2<u8>> = d.images.iter().map(|im| Array2::zeros(im.oracle.dim())).collect();
        let s = score_mining_masks(
            d.images
                .iter()
                .zip(&zeros)
                .map(|(im, p)| (im.id.as_str(), p, &im.oracle)),
            &d.legend,
        )
        .unwrap();
        assert_eq!(s.mean_coverage, 0.0);
    }

    #[test]
    fn legend_roundtrip() {
        let l = Legend {
            base: vec![1, 2],
            latent: vec![3],
        };
        assert_eq!(Legend::parse(&l.render()).unwrap(), l);
    }
}
