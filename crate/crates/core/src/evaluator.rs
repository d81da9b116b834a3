//! Episodic evaluation: 1-way predictions, per-class IoU accumulation and
//! multi-seed summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, FoldSplit, BACKGROUND, IGNORE};
use crate::encoder::{FeatureMap, Network, Weights};
use crate::episode::{sample_episodes, Episode};
use crate::error::{Error, Result};
use crate::grid::resize_nearest;
use crate::protomath::score_map;
use crate::rectifier::{fuse_background, rectify_foreground, RegionBank, DEFAULT_BETA, DEFAULT_FUSION_WEIGHT, DEFAULT_TOP_IMAGES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub shots: usize,
    pub rectify_fg: bool,
    pub rectify_bg: bool,
    pub use_ema: bool,
    pub sigma: f64,
    pub fusion_weight: f64,
    pub beta: f64,
    pub top_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            seeds: (0..5).collect(),
            shots: 1,
            rectify_fg: false,
            rectify_bg: false,
            use_ema: true,
            sigma: 20.0,
            fusion_weight: DEFAULT_FUSION_WEIGHT,
            beta: DEFAULT_BETA,
            top_images: DEFAULT_TOP_IMAGES,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is needed".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(())
    }
}

/// Optional prototype adjustments for [`predict_episode`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Rectification<'a> {
    /// Global background prototype and fusion weight.
    pub background: Option<(ArrayView1<'a, f64>, f64)>,
    /// Region bank, number of top images and beta.
    pub foreground: Option<(&'a RegionBank, usize, f64)>,
}

/// A support or query image as seen by the predictor.
#[derive(Debug, Clone, Copy)]
pub struct EncodedImage<'a> {
    pub feature: &'a FeatureMap,
    pub embedding: ArrayView1<'a, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Binary mask at query resolution.
    pub mask: Array2<u8>,
    pub no_regions: bool,
}

/// Mean feature over the pixels of `mask` equal to `label`, with features
/// nearest-upsampled to the mask resolution. Small support objects that
/// would vanish from a downsampled mask still count this way.
pub fn pool_at_mask_resolution(features: &[(&FeatureMap, &Array2<u8>)], label: u8) -> Option<Array1<f64>> {
    let c = features.first()?.0.channels();
    let mut sum = Array1::<f64>::zeros(c);
    let mut n = 0usize;
    for (f, mask) in features {
        let (h, w) = mask.dim();
        let (fh, fw) = (f.height(), f.width());
        let mut counts = Array2::<usize>::zeros((fh, fw));
        for ((y, x), &v) in mask.indexed_iter() {
            if v == label {
                counts[[y * fh / h, x * fw / w]] += 1;
            }
        }
        for ((y, x), &k) in counts.indexed_iter() {
            if k > 0 {
                sum.scaled_add(k as f64, &f.values.slice(ndarray::s![.., y, x]));
                n += k;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Segments the query of one episode given encoded supports and their
/// binary masks.
pub fn predict_episode(
    supports: &[(EncodedImage<'_>, &Array2<u8>)],
    query: EncodedImage<'_>,
    query_size: (usize, usize),
    sigma: f64,
    rect: &Rectification<'_>,
) -> Result<Prediction> {
    let pairs: Vec<(&FeatureMap, &Array2<u8>)> = supports.iter().map(|(e, m)| (e.feature, *m)).collect();
    let fg = pool_at_mask_resolution(&pairs, 1).ok_or(Error::EmptyRegion(1))?;
    // a support without background contributes a neutral prototype
    let mut bg = pool_at_mask_resolution(&pairs, BACKGROUND).unwrap_or_else(|| Array1::zeros(fg.len()));
    if let Some((global, w)) = rect.background {
        bg = fuse_background(bg.view(), global, w)?;
    }
    let mut fg = fg;
    let mut no_regions = false;
    if let Some((bank, n, beta)) = rect.foreground {
        let mut emb = Array1::<f64>::zeros(fg.len());
        for (e, _) in supports {
            emb += &e.embedding;
        }
        emb /= supports.len() as f64;
        let r = rectify_foreground(fg.view(), emb.view(), bank, n, beta)?;
        no_regions = r.no_regions;
        fg = r.prototype;
    }
    let score = score_map(query.feature, &[bg.view(), fg.view()], sigma)?;
    let mask = resize_nearest(&score.argmax(), query_size.0, query_size.1);
    Ok(Prediction { mask, no_regions })
}

/// Per-class foreground intersections and unions summed over episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    pub totals: BTreeMap<u8, (u64, u64)>,
    pub episodes: BTreeMap<u8, usize>,
}

impl IouAccumulator {
    /// Adds one episode; `gt` is binary with ignore pixels left out.
    pub fn add(&mut self, class_id: u8, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs gt {:?}", pred.dim(), gt.dim())));
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p == 1, g == 1);
            inter += u64::from(p && g);
            union += u64::from(p || g);
        }
        let t = self.totals.entry(class_id).or_default();
        t.0 += inter;
        t.1 += union;
        *self.episodes.entry(class_id).or_default() += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&c, &(i, u)) in &other.totals {
            let t = self.totals.entry(c).or_default();
            t.0 += i;
            t.1 += u;
        }
        for (&c, &n) in &other.episodes {
            *self.episodes.entry(c).or_default() += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: u8,
    /// `None` when the class was never sampled or its union is empty.
    pub iou: Option<f64>,
    pub intersection: u64,
    pub union: u64,
    pub episodes: usize,
}

/// IoU per class in `classes` plus their unweighted mean; absent classes
/// are left out of the mean.
pub fn miou(acc: &IouAccumulator, classes: &[u8]) -> (Vec<ClassIou>, Option<f64>) {
    let mut rows = Vec::with_capacity(classes.len());
    let mut present = Vec::new();
    for &c in classes {
        let (i, u) = acc.totals.get(&c).copied().unwrap_or((0, 0));
        let iou = (u > 0).then(|| i as f64 / u as f64);
        match iou {
            Some(v) => present.push(v),
            None => log::warn!("class {c} has no evaluated pixels; left out of the mean"),
        }
        rows.push(ClassIou {
            class_id: c,
            iou,
            intersection: i,
            union: u,
            episodes: acc.episodes.get(&c).copied().unwrap_or(0),
        });
    }
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (rows, mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub classes: Vec<ClassIou>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub fold: usize,
    pub checkpoint_step: usize,
    pub seeds: Vec<SeedReport>,
    pub mean_miou: f64,
    /// Population standard deviation of the per-seed mIoU.
    pub std_miou: f64,
    /// Per-class IoU averaged over seeds.
    pub mean_class_iou: Vec<(u8, Option<f64>)>,
    /// Episodes in which foreground rectification found no region.
    pub no_region_episodes: usize,
    pub param_count: usize,
    /// Omitted in deterministic mode so reports are reproducible.
    pub episodes_per_sec: Option<f64>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "fold {}  shots {}  episodes {}  seeds {:?}  fg {}  bg {}  ema {}",
            self.fold, c.shots, c.episodes, c.seeds, c.rectify_fg, c.rectify_bg, c.use_ema
        );
        let _ = write!(out, "{:>6}", "class");
        for s in &self.seeds {
            let _ = write!(out, "  seed {:<4}", s.seed);
        }
        let _ = writeln!(out, "  {:>8}", "mean");
        for (row, &(class_id, mean)) in self.mean_class_iou.iter().enumerate() {
            let _ = write!(out, "{class_id:>6}");
            for s in &self.seeds {
                let _ = write!(out, "  {:>9}", fmt_pct(s.classes[row].iou));
            }
            let _ = writeln!(out, "  {:>8}", fmt_pct(mean));
        }
        let _ = write!(out, "{:>6}", "mIoU");
        for s in &self.seeds {
            let _ = write!(out, "  {:>9}", fmt_pct(Some(s.miou)));
        }
        let _ = writeln!(out, "  {:>8}", fmt_pct(Some(self.mean_miou)));
        let _ = writeln!(out, "mean {:.2} +- {:.2}", 100.0 * self.mean_miou, 100.0 * self.std_miou);
        let _ = writeln!(out, "parameters {}", self.param_count);
        if let Some(eps) = self.episodes_per_sec {
            let _ = writeln!(out, "episodes/sec {eps:.1}");
        }
        if self.no_region_episodes > 0 {
            let _ = writeln!(out, "episodes without rectification regions {}", self.no_region_episodes);
        }
        out
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Lazily encoded dataset images.
pub struct FeatureCache<'a> {
    net: &'a Network,
    weights: &'a Weights,
    dataset: &'a Dataset,
    slots: Vec<Option<(FeatureMap, Array1<f64>)>>,
}

impl<'a> FeatureCache<'a> {
    pub fn new(net: &'a Network, weights: &'a Weights, dataset: &'a Dataset) -> Self {
        Self {
            net,
            weights,
            dataset,
            slots: vec![None; dataset.len()],
        }
    }

    pub fn ensure(&mut self, sample: usize) -> Result<()> {
        if self.slots[sample].is_none() {
            let s = &self.dataset.samples()[sample];
            let f = self.net.encode(self.weights, &s.pixels, &s.id)?;
            let emb = f.global_average();
            self.slots[sample] = Some((f, emb));
        }
        Ok(())
    }

    /// Panics unless [`FeatureCache::ensure`] was called for `sample`.
    pub fn get(&self, sample: usize) -> EncodedImage<'_> {
        let (feature, emb) = self.slots[sample].as_ref().expect("sample encoded");
        EncodedImage {
            feature,
            embedding: emb.view(),
        }
    }
}

/// Everything besides the dataset that [`run_eval`] reads.
pub struct EvalInputs<'a> {
    pub checkpoint: &'a Checkpoint,
    pub bank: Option<&'a RegionBank>,
    pub deterministic: bool,
}

/// Predicts one episode using cached features.
pub fn predict_cached(
    cache: &mut FeatureCache<'_>,
    dataset: &Dataset,
    ep: &Episode,
    sigma: f64,
    rect: &Rectification<'_>,
) -> Result<Prediction> {
    for i in ep.sample_indices() {
        cache.ensure(i)?;
    }
    let supports: Vec<(EncodedImage<'_>, &Array2<u8>)> = ep.support.iter().map(|s| (cache.get(s.sample), &s.mask)).collect();
    let q = &dataset.samples()[ep.query.sample];
    predict_episode(&supports, cache.get(ep.query.sample), (q.height(), q.width()), sigma, rect)
}

pub fn run_eval(inputs: &EvalInputs<'_>, dataset: &Dataset, fold: &FoldSplit, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let ck = inputs.checkpoint;
    let (net, weights) = ck.inference(config.use_ema && ck.ema_params.is_some())?;
    if config.use_ema && ck.ema_params.is_none() {
        log::info!("checkpoint has no EMA weights; evaluating the live ones");
    }
    let global = match (config.rectify_bg, ck.global_bg()) {
        (true, None) => return Err(Error::Config("background fusion needs a trained global background prototype".into())),
        (true, Some(g)) => Some(g),
        (false, _) => None,
    };
    let bank = match (config.rectify_fg, inputs.bank) {
        (true, None) => return Err(Error::Config("foreground rectification needs a region bank".into())),
        (true, Some(b)) => {
            if b.channels != net.config.feature_channels {
                return Err(Error::Shape("region bank width differs from the encoder".into()));
            }
            Some(b)
        }
        (false, _) => None,
    };
    let rect = Rectification {
        background: global.as_ref().map(|g| (g.view(), config.fusion_weight)),
        foreground: bank.map(|b| (b, config.top_images, config.beta)),
    };
    let classes: Vec<u8> = fold.test_classes.iter().copied().collect();
    let mut cache = FeatureCache::new(&net, &weights, dataset);
    let mut seeds = Vec::with_capacity(config.seeds.len());
    let mut no_region_episodes = 0;
    let started = Instant::now();
    let mut total_episodes = 0usize;
    for &seed in &config.seeds {
        let episodes = sample_episodes(dataset, fold, config.shots, config.episodes, seed, true)?;
        let mut acc = IouAccumulator::default();
        for ep in &episodes {
            if !fold.test_classes.contains(&ep.class_id) {
                return Err(Error::ClassLeak(ep.class_id));
            }
            let pred = predict_cached(&mut cache, dataset, ep, config.sigma, &rect)?;
            no_region_episodes += usize::from(pred.no_regions);
            acc.add(ep.class_id, &pred.mask, &ep.query.mask)?;
        }
        total_episodes += episodes.len();
        let (rows, mean) = miou(&acc, &classes);
        let miou = mean.ok_or_else(|| Error::Config(format!("seed {seed}: no class was evaluated")))?;
        seeds.push(SeedReport { seed, classes: rows, miou });
    }
    let elapsed = started.elapsed().as_secs_f64();
    let n = seeds.len() as f64;
    let mean_miou = seeds.iter().map(|s| s.miou).sum::<f64>() / n;
    let std_miou = (seeds.iter().map(|s| (s.miou - mean_miou).powi(2)).sum::<f64>() / n).sqrt();
    let mean_class_iou = classes
        .iter()
        .enumerate()
        .map(|(row, &c)| {
            let vals: Vec<f64> = seeds.iter().filter_map(|s| s.classes[row].iou).collect();
            (c, (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    Ok(EvalReport {
        config: config.clone(),
        fold: fold.fold_index,
        checkpoint_step: ck.step,
        seeds,
        mean_miou,
        std_miou,
        mean_class_iou,
        no_region_episodes,
        param_count: net.encoder_param_count(),
        episodes_per_sec: (!inputs.deterministic && elapsed > 0.0).then(|| total_episodes as f64 / elapsed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn perfect_and_disjoint_iou() {
        let gt = array![[1u8, 0], [255, 1]];
        let mut acc = IouAccumulator::default();
        acc.add(3, &array![[1u8, 0], [0, 1]], &gt).unwrap();
        acc.add(4, &array![[0u8, 1], [1, 0]], &gt).unwrap();
        let (rows, mean) = miou(&acc, &[3, 4, 5]);
        assert_eq!(rows[0].iou, Some(1.0));
        assert_eq!(rows[1].iou, Some(0.0));
        assert_eq!(rows[2].iou, None);
        assert_eq!(mean, Some(0.5));
    }

    #[test]
    fn upsampled_pooling_weights_cells_by_area() {
        let f = FeatureMap::new(Array3::from_shape_vec((1, 1, 2), vec![1.0, 3.0]).unwrap(), "f", 2);
        let mask = array![[1u8, 1, 1, 0]];
        let p = pool_at_mask_resolution(&[(&f, &mask)], 1).unwrap();
        assert!((p[0] - 5.0 / 3.0).abs() < 1e-12);
        assert!(pool_at_mask_resolution(&[(&f, &mask)], 7).is_none());
    }

    #[test]
    fn swapped_prototypes_invert_prediction() {
        let f = FeatureMap::new(
            Array3::from_shape_vec((2, 1, 3), vec![1.0, 0.0, 0.6, 0.0, 1.0, 0.5]).unwrap(),
            "q",
            1,
        );
        let emb = f.global_average();
        let enc = EncodedImage {
            feature: &f,
            embedding: emb.view(),
        };
        let m = array![[1u8, 0, 255]];
        let a = predict_episode(&[(enc, &m)], enc, (1, 3), 20.0, &Rectification::default()).unwrap();
        let inv = array![[0u8, 1, 255]];
        let b = predict_episode(&[(enc, &inv)], enc, (1, 3), 20.0, &Rectification::default()).unwrap();
        for (x, y) in a.mask.iter().zip(&b.mask) {
            assert_eq!(*x, 1 - *y);
        }
    }
}
