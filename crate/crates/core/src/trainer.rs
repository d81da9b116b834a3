//! Joint episodic and pseudo-mask training.
//!
//! One step draws `pairs_per_batch` 1-way episodes from the train classes
//! and `pseudo_per_batch` pseudo-labelled images. The episodic term is the
//! cosine score-map cross-entropy of the query against the support
//! prototypes (background fused with the running global prototype once it
//! exists); the pseudo term is pixel cross-entropy of the auxiliary head.
//! After the momentum-SGD update the parameter EMA and the global
//! background prototype are advanced.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::dataset::{self, Dataset, FoldSplit, BACKGROUND, IGNORE};
use crate::encoder::{stack_images, FeatureMap, Network, Weights};
use crate::episode::sample_episodes;
use crate::error::{Error, Result};
use crate::grid::{flip_horizontal, flip_horizontal_rgb, resize_nearest};
use crate::miner::{EntrySource, Manifest};
use crate::protomath::episodic_loss_backward;
use crate::rectifier::fuse_background;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub total_steps: usize,
    pub pairs_per_batch: usize,
    pub pseudo_per_batch: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub param_ema_decay: f64,
    pub bg_proto_momentum: f64,
    /// Weight of the global prototype in the training-time background fusion.
    pub bg_fusion_weight: f64,
    pub crop: usize,
    pub shots: usize,
    /// Brightness/contrast jitter amplitude of the pseudo branch.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            lr_decay_factor: 10.0,
            lr_decay_every: 2000,
            total_steps: 6000,
            pairs_per_batch: 4,
            pseudo_per_batch: 32,
            lambda: 1.0,
            sigma: 20.0,
            param_ema_decay: 0.999,
            bg_proto_momentum: 0.999,
            bg_fusion_weight: 0.9,
            crop: 473,
            shots: 1,
            color_jitter: 0.2,
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($mac:ident) => {
        $mac!(
            lr,
            momentum,
            lr_decay_factor,
            lr_decay_every,
            total_steps,
            pairs_per_batch,
            pseudo_per_batch,
            lambda,
            sigma,
            param_ema_decay,
            bg_proto_momentum,
            bg_fusion_weight,
            crop,
            shots,
            color_jitter,
            seed
        )
    };
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "momentum",
        "lr_decay_factor",
        "lr_decay_every",
        "total_steps",
        "pairs_per_batch",
        "pseudo_per_batch",
        "lambda",
        "sigma",
        "param_ema_decay",
        "bg_proto_momentum",
        "bg_fusion_weight",
        "crop",
        "shots",
        "color_jitter",
        "seed",
    ];

    /// Overrides fields from a `key = value` set; unknown keys are errors.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(bad) = kv.keys().find(|k| !Self::KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown training key `{bad}`")));
        }
        macro_rules! apply_all {
            ($($f:ident),*) => { $( kv.apply(stringify!($f), &mut self.$f)?; )* };
        }
        config_keys!(apply_all);
        self.validate()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        macro_rules! set_all {
            ($($f:ident),*) => { $( kv.set(stringify!($f), self.$f); )* };
        }
        config_keys!(set_all);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("sigma", self.sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let unit = [
            ("momentum", self.momentum),
            ("param_ema_decay", self.param_ema_decay),
            ("bg_proto_momentum", self.bg_proto_momentum),
        ];
        for (name, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.bg_fusion_weight) {
            return Err(Error::Config("bg_fusion_weight must lie in [0, 1]".into()));
        }
        if !(self.lambda >= 0.0) || !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::Config("lambda and color_jitter must be non-negative (jitter < 1)".into()));
        }
        if self.lr_decay_every == 0 || self.pairs_per_batch == 0 || self.shots == 0 || self.crop == 0 {
            return Err(Error::Config(
                "lr_decay_every, pairs_per_batch, shots and crop must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `lr * (1 / factor)^floor(step / every)`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let decays = (step / config.lr_decay_every) as i32;
    config.lr * config.lr_decay_factor.powi(-decays)
}

/// `global <- m * global + (1 - m) * current`; the first update copies.
pub fn update_global_bg(global: &mut Option<Array1<f64>>, current: ArrayView1<f64>, m: f64) -> Result<()> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::Config(format!("background momentum must lie in (0, 1), got {m}")));
    }
    if current.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("current background prototype".into()));
    }
    match global {
        None => *global = Some(current.to_owned()),
        Some(g) => {
            if g.len() != current.len() {
                return Err(Error::Shape("background prototype width changed".into()));
            }
            g.zip_mut_with(&current, |g, &c| *g = m * *g + (1.0 - m) * c);
        }
    }
    Ok(())
}

/// `shadow <- decay * shadow + (1 - decay) * params`, element-wise.
pub fn update_param_ema(shadow: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
    }
    if shadow.len() != params.len() {
        return Err(Error::Shape(format!(
            "EMA shadow has {} entries, parameters {}",
            shadow.len(),
            params.len()
        )));
    }
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
    Ok(())
}

/// Mean softmax cross-entropy over non-ignore pixels and its gradient with
/// respect to the logits.
pub fn pixel_cross_entropy(logits: &Array4<f64>, labels: &[Array2<u8>]) -> Result<(f64, Array4<f64>)> {
    let (b, k, h, w) = logits.dim();
    if labels.len() != b || labels.iter().any(|l| l.dim() != (h, w)) {
        return Err(Error::Shape("pseudo labels do not match the logit maps".into()));
    }
    let mut grad = Array4::<f64>::zeros(logits.dim());
    let mut loss = 0.0;
    let mut n = 0usize;
    let mut p = vec![0.0; k];
    for (i, lab) in labels.iter().enumerate() {
        for ((y, x), &t) in lab.indexed_iter() {
            if t == IGNORE {
                continue;
            }
            let t = t as usize;
            if t >= k {
                return Err(Error::Shape(format!("pseudo label {t} for {k} classes")));
            }
            let max = (0..k).map(|c| logits[[i, c, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = (logits[[i, c, y, x]] - max).exp();
                z += *pc;
            }
            loss -= logits[[i, t, y, x]] - max - z.ln();
            for (c, pc) in p.iter().enumerate() {
                grad[[i, c, y, x]] = pc / z;
            }
            grad[[i, t, y, x]] -= 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    grad.mapv_inplace(|g| g / n as f64);
    Ok((loss / n as f64, grad))
}

/// Random horizontal flip followed by a crop (or ignore-padding) to
/// `crop × crop`. Padding uses the mean colour and label 255.
pub fn flip_and_crop(
    pixels: &Array3<u8>,
    mask: &Array2<u8>,
    crop: usize,
    rng: &mut impl Rng,
) -> (Array3<u8>, Array2<u8>) {
    let (pixels, mask) = if rng.random_bool(0.5) {
        (flip_horizontal_rgb(pixels), flip_horizontal(mask))
    } else {
        (pixels.clone(), mask.clone())
    };
    let (h, w) = mask.dim();
    let (oy, py) = crop_offsets(h, crop, rng);
    let (ox, px) = crop_offsets(w, crop, rng);
    let pad: [u8; 3] = [124, 116, 104];
    let mut out_px = Array3::<u8>::zeros((crop, crop, 3));
    let mut out_mask = Array2::<u8>::from_elem((crop, crop), IGNORE);
    for y in 0..crop {
        for x in 0..crop {
            let (sy, sx) = (y + oy, x + ox);
            let inside = sy >= py && sx >= px && sy - py < h && sx - px < w;
            if inside {
                let (sy, sx) = (sy - py, sx - px);
                out_mask[[y, x]] = mask[[sy, sx]];
                for c in 0..3 {
                    out_px[[y, x, c]] = pixels[[sy, sx, c]];
                }
            } else {
                for c in 0..3 {
                    out_px[[y, x, c]] = pad[c];
                }
            }
        }
    }
    (out_px, out_mask)
}

/// `(offset into the padded source, padding before the source)`.
fn crop_offsets(len: usize, crop: usize, rng: &mut impl Rng) -> (usize, usize) {
    if len >= crop {
        (rng.random_range(0..=len - crop), 0)
    } else {
        let pad = crop - len;
        (0, rng.random_range(0..=pad))
    }
}

/// Brightness and contrast jitter by factors drawn from `1 ± amount`.
pub fn color_jitter(pixels: &Array3<u8>, amount: f64, rng: &mut impl Rng) -> Array3<u8> {
    if amount == 0.0 {
        return pixels.clone();
    }
    let brightness = rng.random_range(1.0 - amount..=1.0 + amount);
    let contrast = rng.random_range(1.0 - amount..=1.0 + amount);
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / pixels.len() as f64;
    pixels.mapv(|v| {
        let v = ((v as f64 - mean) * contrast + mean) * brightness;
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Support and query images of one training episode with binary masks
/// (1 = episode class, 0 = rest, 255 = ignore), already augmented.
#[derive(Debug, Clone)]
pub struct TrainEpisode {
    pub class_id: u8,
    pub supports: Vec<(Array3<u8>, Array2<u8>)>,
    pub query: (Array3<u8>, Array2<u8>),
}

#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub pixels: Array3<u8>,
    pub labels: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: Weights,
    pub ema: Weights,
    pub velocity: Vec<f64>,
    pub global_bg: Option<Array1<f64>>,
    pub step: usize,
}

impl TrainState {
    pub fn new(weights: Weights) -> Self {
        Self {
            ema: weights.clone(),
            velocity: vec![0.0; weights.params.len()],
            weights,
            global_bg: None,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_gt: f64,
    pub l_pseudo: f64,
    pub total: f64,
}

/// Feature-resolution masks of an episode, or `None` when a prototype or the
/// query supervision would be empty.
fn episode_masks(ep: &TrainEpisode, fh: usize, fw: usize) -> Option<(Vec<Array2<u8>>, Array2<u8>)> {
    let sup: Vec<Array2<u8>> = ep.supports.iter().map(|(_, m)| resize_nearest(m, fh, fw)).collect();
    let query = resize_nearest(&ep.query.1, fh, fw);
    let has = |v: u8| sup.iter().any(|m| m.iter().any(|&x| x == v));
    (has(1) && has(BACKGROUND) && query.iter().any(|&x| x != IGNORE)).then_some((sup, query))
}

/// Whether `episode_loss` can be computed for this episode on `net`.
pub fn episode_is_usable(net: &Network, ep: &TrainEpisode) -> bool {
    let (h, w) = ep.query.1.dim();
    let (fh, fw) = net.feature_size(h, w);
    episode_masks(ep, fh, fw).is_some()
}

fn mean_columns(features: &Array4<f64>, items: &[(usize, &Array2<u8>)], label: u8) -> (Array1<f64>, usize) {
    let c = features.dim().1;
    let mut sum = Array1::<f64>::zeros(c);
    let mut n = 0usize;
    for &(b, mask) in items {
        for ((y, x), &v) in mask.indexed_iter() {
            if v == label {
                for ch in 0..c {
                    sum[ch] += features[[b, ch, y, x]];
                }
                n += 1;
            }
        }
    }
    (sum / n.max(1) as f64, n)
}

fn scatter_columns(grad: &mut Array4<f64>, items: &[(usize, &Array2<u8>)], label: u8, d: &Array1<f64>, n: usize) {
    let c = grad.dim().1;
    for &(b, mask) in items {
        for ((y, x), &v) in mask.indexed_iter() {
            if v == label {
                for ch in 0..c {
                    grad[[b, ch, y, x]] += d[ch] / n as f64;
                }
            }
        }
    }
}

/// One optimisation step of `L_gt + lambda * L_pseudo`.
pub fn train_step(
    net: &Network,
    state: &mut TrainState,
    episodes: &[TrainEpisode],
    pseudo: &[PseudoSample],
    config: &TrainConfig,
) -> Result<StepMetrics> {
    if episodes.is_empty() {
        return Err(Error::Config("a training step needs at least one episode".into()));
    }
    let step = state.step;
    let lr = lr_schedule(step, config);
    let mut grad = vec![0.0; state.weights.params.len()];

    // episodic branch: supports and queries of all episodes in one batch
    let mut images: Vec<&Array3<u8>> = Vec::new();
    for ep in episodes {
        images.extend(ep.supports.iter().map(|(p, _)| p));
        images.push(&ep.query.0);
    }
    let x = stack_images(&images)?;
    let (feats, cache) = net.encode_train(&state.weights.params, &mut state.weights.buffers, &x)?;
    let (_, c, fh, fw) = feats.dim();
    let mut d_feats = Array4::<f64>::zeros(feats.dim());
    let mut l_gt = 0.0;
    let mut current_bgs = Vec::with_capacity(episodes.len());
    let scale = 1.0 / episodes.len() as f64;
    let mut base = 0usize;
    for ep in episodes {
        let (sup_masks, query_mask) = episode_masks(ep, fh, fw)
            .ok_or_else(|| Error::EmptyRegion(ep.class_id as i64))?;
        let items: Vec<(usize, &Array2<u8>)> = sup_masks.iter().enumerate().map(|(i, m)| (base + i, m)).collect();
        let q = base + ep.supports.len();
        let (fg, n_fg) = mean_columns(&feats, &items, 1);
        let (bg_now, n_bg) = mean_columns(&feats, &items, BACKGROUND);
        let (bg, w) = match &state.global_bg {
            Some(g) => (fuse_background(bg_now.view(), g.view(), config.bg_fusion_weight)?, config.bg_fusion_weight),
            None => (bg_now.clone(), 0.0),
        };
        let query = FeatureMap::new(feats.index_axis(Axis(0), q).to_owned(), "", net.config.output_stride);
        let g = episodic_loss_backward(&query, &[bg.view(), fg.view()], config.sigma, &query_mask)?;
        l_gt += g.loss * scale;
        d_feats
            .index_axis_mut(Axis(0), q)
            .scaled_add(scale, &g.d_feature);
        scatter_columns(&mut d_feats, &items, 1, &(&g.d_prototypes[1] * scale), n_fg);
        scatter_columns(&mut d_feats, &items, BACKGROUND, &(&g.d_prototypes[0] * (scale * (1.0 - w))), n_bg);
        current_bgs.push(bg_now);
        base = q + 1;
    }
    debug_assert_eq!(c, net.config.feature_channels);
    if !l_gt.is_finite() {
        return Err(Error::NonFiniteLoss { step, term: "episodic" });
    }
    net.encode_backward(&state.weights.params, &cache, d_feats, &mut grad);

    // pseudo-mask branch
    let mut l_pseudo = 0.0;
    if !pseudo.is_empty() && config.lambda > 0.0 {
        let imgs: Vec<&Array3<u8>> = pseudo.iter().map(|p| &p.pixels).collect();
        let x = stack_images(&imgs)?;
        let (pf, pcache) = net.encode_train(&state.weights.params, &mut state.weights.buffers, &x)?;
        let (logits, hcache) = net.head_train(&state.weights.params, &mut state.weights.buffers, &pf)?;
        let (_, _, ph, pw) = logits.dim();
        let labels: Vec<Array2<u8>> = pseudo.iter().map(|p| resize_nearest(&p.labels, ph, pw)).collect();
        let (loss, d_logits) = pixel_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, term: "pseudo" });
        }
        l_pseudo = loss;
        let d_pf = net.head_backward(&state.weights.params, &hcache, d_logits * config.lambda, &mut grad);
        net.encode_backward(&state.weights.params, &pcache, d_pf, &mut grad);
    }

    for ((p, v), g) in state.weights.params.iter_mut().zip(&mut state.velocity).zip(&grad) {
        *v = config.momentum * *v + g;
        *p -= lr * *v;
    }
    if state.weights.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss { step, term: "parameter update" });
    }
    update_param_ema(&mut state.ema.params, &state.weights.params, config.param_ema_decay)?;
    update_param_ema(&mut state.ema.buffers, &state.weights.buffers, config.param_ema_decay)?;
    for bg in &current_bgs {
        update_global_bg(&mut state.global_bg, bg.view(), config.bg_proto_momentum)?;
    }
    state.step += 1;
    Ok(StepMetrics {
        step,
        lr,
        l_gt,
        l_pseudo,
        total: l_gt + config.lambda * l_pseudo,
    })
}

/// Pseudo-labelled images of one mining run, paired with their pixels.
#[derive(Debug, Clone)]
pub struct PseudoSet {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub items: Vec<(String, EntrySource, PseudoSample)>,
}

impl PseudoSet {
    /// Loads every successful manifest entry. Labelled entries take their
    /// pixels from `dataset`, unlabelled ones from the manifest's
    /// `unlabeled_dir`.
    pub fn load(dir: &Path, dataset: &Dataset) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let mut items = Vec::new();
        for entry in manifest.entries.iter().filter(|e| e.ok) {
            let pixels = match entry.source {
                EntrySource::Labeled => match dataset.get(&entry.id) {
                    Some(s) => s.pixels.clone(),
                    None => {
                        log::warn!("pseudo entry `{}` is not in the dataset; skipped", entry.id);
                        continue;
                    }
                },
                EntrySource::Unlabeled => {
                    let root = manifest.unlabeled_dir.as_ref().ok_or_else(|| {
                        Error::format(dir.join(crate::miner::MANIFEST_FILE), "unlabeled entry without unlabeled_dir")
                    })?;
                    dataset::read_rgb(&find_image(root, &entry.id)?)?
                }
            };
            let labels = manifest.load_mask(dir, entry)?;
            if labels.dim() != (pixels.dim().0, pixels.dim().1) {
                return Err(Error::IdMismatch(format!("pseudo mask of `{}` has the wrong size", entry.id)));
            }
            items.push((entry.id.clone(), entry.source, PseudoSample { pixels, labels }));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            items,
        })
    }
}

fn find_image(root: &Path, id: &str) -> Result<PathBuf> {
    dataset::list_images(root)?
        .into_iter()
        .find(|(stem, _)| stem == id)
        .map(|(_, path)| path)
        .ok_or_else(|| Error::IdMismatch(format!("no unlabeled image `{id}` under {}", root.display())))
}

/// Everything `run_training` needs besides the config.
pub struct TrainInputs<'a> {
    pub dataset: &'a Dataset,
    pub fold: &'a FoldSplit,
    pub pseudo: Option<&'a PseudoSet>,
    /// Checkpoint holding the pretrained initialisation of the encoder.
    pub init: &'a Checkpoint,
}

fn sample_batch(
    net: &Network,
    view: &Dataset,
    fold: &FoldSplit,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainEpisode>> {
    let mut out = Vec::with_capacity(config.pairs_per_batch);
    let mut attempts = 0;
    while out.len() < config.pairs_per_batch {
        attempts += 1;
        if attempts > 100 * config.pairs_per_batch {
            return Err(Error::Config("cannot draw usable training episodes".into()));
        }
        let ep = sample_episodes(view, fold, config.shots, 1, rng.random(), false)?.remove(0);
        if fold.test_classes.contains(&ep.class_id) {
            return Err(Error::ClassLeak(ep.class_id));
        }
        let mut aug = |item: &crate::episode::EpisodeItem| {
            flip_and_crop(&view.samples()[item.sample].pixels, &item.mask, config.crop, rng)
        };
        let supports = ep.support.iter().map(&mut aug).collect();
        let query = aug(&ep.query);
        let ep = TrainEpisode {
            class_id: ep.class_id,
            supports,
            query,
        };
        if episode_is_usable(net, &ep) {
            out.push(ep);
        }
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Runs `config.total_steps` steps from the initial encoder and returns the
/// final checkpoint. Every step's metrics are also written to `log` as one
/// JSON line.
pub fn run_training(inputs: &TrainInputs<'_>, config: &TrainConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    config.validate()?;
    let fold = inputs.fold;
    if let Some(&c) = fold.train_classes.intersection(&fold.test_classes).next() {
        return Err(Error::ClassLeak(c));
    }
    let mining = config.pseudo_per_batch > 0 && inputs.pseudo.is_some();
    if config.pseudo_per_batch > 0 && inputs.pseudo.is_none() {
        return Err(Error::Config(
            "pseudo_per_batch > 0 needs pseudo masks (or disable mining)".into(),
        ));
    }
    let head = match (mining, inputs.pseudo) {
        (true, Some(p)) => {
            let init_fp = inputs.init.encoder_fingerprint()?;
            if p.manifest.encoder_fingerprint != init_fp {
                return Err(Error::Fingerprint {
                    expected: p.manifest.encoder_fingerprint.clone(),
                    found: init_fp,
                });
            }
            if p.items.is_empty() {
                return Err(Error::Config("pseudo set has no usable entries".into()));
            }
            Some(p.manifest.k + 1)
        }
        _ => None,
    };
    let net = Network::new(inputs.init.encoder.clone(), head)?;
    let mut weights = net.init(config.seed);
    let (init_net, init_weights) = inputs.init.network(false)?;
    net.load_encoder_from(&mut weights, &init_net.encoder_only(&init_weights))?;

    let view = inputs.dataset.training_view(fold)?;
    // padding past the largest image only adds ignore pixels
    let echo = config;
    let largest = view
        .samples()
        .iter()
        .map(|s| s.height().max(s.width()))
        .chain(inputs.pseudo.into_iter().flat_map(|p| p.items.iter().map(|(_, _, s)| s.labels.dim().0.max(s.labels.dim().1))))
        .max()
        .unwrap_or(config.crop);
    let capped;
    let config = if largest < config.crop {
        log::info!("crop {} capped at the largest image side {largest}", config.crop);
        capped = TrainConfig {
            crop: largest,
            ..config.clone()
        };
        &capped
    } else {
        config
    };
    let mut state = TrainState::new(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut metrics = Vec::with_capacity(config.total_steps);
    for _ in 0..config.total_steps {
        let episodes = sample_batch(&net, &view, fold, config, &mut rng)?;
        let pseudo: Vec<PseudoSample> = match (mining, inputs.pseudo) {
            (true, Some(p)) => {
                let n = config.pseudo_per_batch.min(p.items.len());
                index::sample(&mut rng, p.items.len(), n)
                    .into_iter()
                    .map(|i| {
                        let s = &p.items[i].2;
                        let (px, lab) = flip_and_crop(&s.pixels, &s.labels, config.crop, &mut rng);
                        PseudoSample {
                            pixels: color_jitter(&px, config.color_jitter, &mut rng),
                            labels: lab,
                        }
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        let m = train_step(&net, &mut state, &episodes, &pseudo, config)?;
        let line = serde_json::to_string(&m)?;
        writeln!(log, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        metrics.push(m);
    }
    let checkpoint = Checkpoint::from_training(
        &net,
        &state,
        echo,
        inputs.init,
        fold.fold_index,
        inputs.pseudo.map(|p| p.manifest.rep_fingerprint.clone()),
    )?;
    Ok(TrainOutcome { checkpoint, metrics })
}
