//! Desk-scale stand-in for a pretrained backbone.
//!
//! The encoder is trained for a few hundred steps on dense per-pixel
//! classification of a generic synthetic corpus: many hue classes drawn
//! from their own appearance seed, all labelled. The result plays the role
//! of the pretrained initialisation that mining and training start from.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{stack_images, EncoderConfig, Network, Weights};
use crate::error::{Error, Result};
use crate::grid::resize_nearest;
use crate::synth::{self, SynthConfig};
use crate::trainer::pixel_cross_entropy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub classes: usize,
    pub images: usize,
    pub image_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Appearance seed of the corpus; kept away from the benchmark's.
    pub appearance_seed: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            classes: 16,
            images: 100,
            image_size: 48,
            steps: 300,
            batch: 8,
            lr: 0.05,
            momentum: 0.9,
            appearance_seed: 1000,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn corpus(&self) -> SynthConfig {
        SynthConfig {
            num_base_classes: self.classes,
            num_latent_classes: 0,
            images: self.images,
            image_size: self.image_size,
            num_folds: 1,
            appearance_seed: self.appearance_seed,
            seed: self.seed.wrapping_add(self.appearance_seed),
            min_signature_distance: 0.0,
            ignore_rim: false,
            ..SynthConfig::default()
        }
    }
}

/// Trains encoder plus a throw-away classifier head and returns the encoder.
pub fn pretrain(encoder: &EncoderConfig, config: &PretrainConfig) -> Result<(Network, Weights)> {
    if config.classes == 0 || config.batch == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("pretraining needs classes, batch and lr > 0".into()));
    }
    let corpus = synth::generate(&config.corpus())?;
    let net = Network::new(encoder.clone(), Some(config.classes + 1))?;
    let mut w = net.init(config.seed);
    let mut velocity = vec![0.0; w.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (fh, fw) = net.feature_size(config.image_size, config.image_size);
    for step in 0..config.steps {
        let picks: Vec<usize> = (0..config.batch)
            .map(|_| rng.random_range(0..corpus.images.len()))
            .collect();
        let images: Vec<_> = picks.iter().map(|&i| &corpus.images[i].pixels).collect();
        let labels: Vec<Array2<u8>> = picks
            .iter()
            .map(|&i| resize_nearest(&corpus.images[i].oracle, fh, fw))
            .collect();
        let x = stack_images(&images)?;
        let (feats, ecache) = net.encode_train(&w.params, &mut w.buffers, &x)?;
        let (logits, hcache) = net.head_train(&w.params, &mut w.buffers, &feats)?;
        let (loss, d_logits) = pixel_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, term: "pretraining" });
        }
        let mut grad = vec![0.0; w.params.len()];
        let d_feats = net.head_backward(&w.params, &hcache, d_logits, &mut grad);
        net.encode_backward(&w.params, &ecache, d_feats, &mut grad);
        for ((p, v), g) in w.params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = config.momentum * *v + g;
            *p -= config.lr * *v;
        }
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    let enc = Network::new(encoder.clone(), None)?;
    let weights = net.encoder_only(&w);
    Ok((enc, weights))
}
