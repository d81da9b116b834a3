//! Browser demo: generate a synthetic scene, split it into latent regions
//! with k-means over encoder features, and show a cosine score map for a
//! clicked pixel.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`.

use latentproto::encoder::{EncoderConfig, FeatureMap, Network};
use latentproto::grid::resize_nearest;
use latentproto::miner::kmeans;
use latentproto::protomath::cosine;
use latentproto::synth::{self, SynthConfig};
use latentproto::viz;
use ndarray::{Array2, Array3};
use wasm_bindgen::prelude::*;

fn rgba(rgb: &Array3<u8>) -> Vec<u8> {
    let (h, w, _) = rgb.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&[rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]], 255]);
        }
    }
    out
}

fn err(e: latentproto::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Scene {
    net: Network,
    pixels: Array3<u8>,
    oracle: Array2<u8>,
    feature: FeatureMap,
    size: usize,
}

#[wasm_bindgen]
impl Scene {
    /// A random scene with `latent` unlabelled classes among the objects.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, latent: u32) -> Result<Scene, JsError> {
        let config = SynthConfig {
            images: 1,
            num_latent_classes: latent as usize,
            num_folds: 1,
            seed: seed as u64,
            ..SynthConfig::default()
        };
        let data = synth::generate(&config).map_err(err)?;
        let img = data.images.into_iter().next().ok_or_else(|| JsError::new("no image generated"))?;
        let net = Network::new(EncoderConfig::default(), None).map_err(err)?;
        let weights = net.init(7);
        let feature = net.encode(&weights, &img.pixels, &img.id).map_err(err)?;
        Ok(Scene {
            size: img.pixels.dim().0,
            net,
            pixels: img.pixels,
            oracle: img.oracle,
            feature,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image(&self) -> Vec<u8> {
        rgba(&self.pixels)
    }

    /// Every object class coloured, latent ones included.
    pub fn oracle(&self) -> Vec<u8> {
        let k = self.oracle.iter().filter(|&&v| v != 255).map(|&v| v as usize).max().unwrap_or(0);
        rgba(&viz::colorize(&self.oracle, &viz::palette(k)))
    }

    /// Cluster map of the encoder features into `k` groups, upsampled to
    /// image size.
    pub fn clusters(&self, k: u32, seed: u32) -> Result<Vec<u8>, JsError> {
        let (c, h, w) = self.feature.values.dim();
        let cols: Vec<Vec<f64>> = (0..h * w)
            .map(|i| (0..c).map(|ch| self.feature.values[[ch, i / w, i % w]]).collect())
            .collect();
        let pts: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let km = kmeans(&pts, k as usize, seed as u64).map_err(err)?;
        let labels = Array2::from_shape_fn((h, w), |(y, x)| km.assignments[y * w + x] as u8 + 1);
        let up = resize_nearest(&labels, self.size, self.size);
        Ok(rgba(&viz::colorize(&up, &viz::palette(k as usize))))
    }

    /// Cosine map of every position against the feature at
    /// image pixel `(x, y)`, drawn as a heat overlay.
    pub fn similarity(&self, x: u32, y: u32) -> Vec<u8> {
        let (_, h, w) = self.feature.values.dim();
        let fy = (y as usize * h / self.size).min(h - 1);
        let fx = (x as usize * w / self.size).min(w - 1);
        let probe = self.feature.values.slice(ndarray::s![.., fy, fx]).to_owned();
        let cos = Array2::from_shape_fn((h, w), |(yy, xx)| {
            cosine(self.feature.values.slice(ndarray::s![.., yy, xx]), probe.view())
        });
        let heat = Array3::from_shape_fn((self.size, self.size, 3), |(py, px, ch)| {
            let v = cos[[py * h / self.size, px * w / self.size]].clamp(0.0, 1.0);
            let base = self.pixels[[py, px, ch]] as f64 * 0.35;
            let tint = [255.0 * v, 80.0 * v, 40.0 * (1.0 - v)][ch];
            (base + 0.65 * tint).round().min(255.0) as u8
        });
        rgba(&heat)
    }

    pub fn parameter_count(&self) -> usize {
        self.net.encoder_param_count()
    }
}
