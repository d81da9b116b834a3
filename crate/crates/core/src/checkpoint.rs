//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "latentproto-checkpoint", "version": 1,
//!   "encoder": {...}, "head_classes": 6 | null,
//!   "train_config": {...} | null, "pretrain": {...} | null,
//!   "param_layout": {...}, "buffer_layout": {...},
//!   "params": [...], "buffers": [...],
//!   "ema_params": [...] | null, "ema_buffers": [...] | null,
//!   "global_bg": [...] | null, "step": 500, "fold": 0 | null,
//!   "init_fingerprint": "..." | null, "rep_fingerprint": "..." | null
//! }
//! ```
//!
//! Floats are written with round-trip precision, so save/load is lossless.

use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Network, Weights};
use crate::error::{Error, Result};
use crate::nn::ParamLayout;
use crate::pretrain::PretrainConfig;
use crate::trainer::{TrainConfig, TrainState};

pub const FORMAT_TAG: &str = "latentproto-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub head_classes: Option<usize>,
    pub train_config: Option<TrainConfig>,
    pub pretrain: Option<PretrainConfig>,
    pub param_layout: ParamLayout,
    pub buffer_layout: ParamLayout,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
    pub ema_params: Option<Vec<f64>>,
    pub ema_buffers: Option<Vec<f64>>,
    pub global_bg: Option<Vec<f64>>,
    pub step: usize,
    pub fold: Option<usize>,
    /// Encoder fingerprint of the initialisation training started from.
    pub init_fingerprint: Option<String>,
    /// Representative-set fingerprint of the pseudo masks used in training.
    pub rep_fingerprint: Option<String>,
}

impl Checkpoint {
    /// An initialisation checkpoint (no training state).
    pub fn from_weights(net: &Network, weights: &Weights, pretrain: Option<PretrainConfig>) -> Result<Self> {
        check_sizes(net, weights)?;
        Ok(Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            encoder: net.config.clone(),
            head_classes: net.head_classes,
            train_config: None,
            pretrain,
            param_layout: net.layout.clone(),
            buffer_layout: net.buffer_layout.clone(),
            params: weights.params.clone(),
            buffers: weights.buffers.clone(),
            ema_params: None,
            ema_buffers: None,
            global_bg: None,
            step: 0,
            fold: None,
            init_fingerprint: None,
            rep_fingerprint: None,
        })
    }

    pub fn from_training(
        net: &Network,
        state: &TrainState,
        config: &TrainConfig,
        init: &Checkpoint,
        fold: usize,
        rep_fingerprint: Option<String>,
    ) -> Result<Self> {
        let mut ck = Self::from_weights(net, &state.weights, init.pretrain.clone())?;
        ck.train_config = Some(config.clone());
        ck.ema_params = Some(state.ema.params.clone());
        ck.ema_buffers = Some(state.ema.buffers.clone());
        ck.global_bg = state.global_bg.as_ref().map(|g| g.to_vec());
        ck.step = state.step;
        ck.fold = Some(fold);
        ck.init_fingerprint = Some(init.encoder_fingerprint()?);
        ck.rep_fingerprint = rep_fingerprint;
        Ok(ck)
    }

    /// Rebuilds the network and returns the live or EMA weights.
    pub fn network(&self, use_ema: bool) -> Result<(Network, Weights)> {
        let net = Network::new(self.encoder.clone(), self.head_classes)?;
        if net.layout != self.param_layout || net.buffer_layout != self.buffer_layout {
            return Err(Error::Layout("stored layout differs from the rebuilt network".into()));
        }
        let weights = if use_ema {
            match (&self.ema_params, &self.ema_buffers) {
                (Some(p), Some(b)) => Weights {
                    params: p.clone(),
                    buffers: b.clone(),
                },
                _ => return Err(Error::Config("checkpoint has no EMA weights".into())),
            }
        } else {
            Weights {
                params: self.params.clone(),
                buffers: self.buffers.clone(),
            }
        };
        check_sizes(&net, &weights)?;
        if weights.params.iter().chain(&weights.buffers).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        Ok((net, weights))
    }

    /// Encoder-only network for inference (the auxiliary head is dropped).
    pub fn inference(&self, use_ema: bool) -> Result<(Network, Weights)> {
        let (net, weights) = self.network(use_ema)?;
        let enc = Network::new(self.encoder.clone(), None)?;
        Ok((enc, net.encoder_only(&weights)))
    }

    /// Fingerprint of the live encoder parameters.
    pub fn encoder_fingerprint(&self) -> Result<String> {
        let (net, weights) = self.network(false)?;
        Ok(net.encoder_fingerprint(&weights))
    }

    pub fn global_bg(&self) -> Option<Array1<f64>> {
        self.global_bg.as_ref().map(|g| Array1::from(g.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if ck.format != FORMAT_TAG {
            return Err(Error::format(path, format!("format tag `{}`", ck.format)));
        }
        if ck.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }
}

fn check_sizes(net: &Network, weights: &Weights) -> Result<()> {
    if weights.params.len() != net.layout.total || weights.buffers.len() != net.buffer_layout.total {
        return Err(Error::Shape(format!(
            "weights hold {}/{} values, layout expects {}/{}",
            weights.params.len(),
            weights.buffers.len(),
            net.layout.total,
            net.buffer_layout.total
        )));
    }
    Ok(())
}
