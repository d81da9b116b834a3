//! Feature extractor and auxiliary pseudo-label head.
//!
//! The tiny encoder is three 3×3 conv blocks followed by a 1×1
//! projection; blocks two and three have stride two (output stride 4). The
//! projection is a bare convolution so features keep their sign. The auxiliary head is conv-BN-ReLU,
//! conv-BN-ReLU, 1×1 conv.

use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_forward, BatchNorm2d, BnCache, Conv2d, ConvCache, ParamLayout};

/// Per-channel input normalisation applied after scaling pixels to [0, 1].
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Tiny,
    Residual50,
    Residual101,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Arch::Tiny),
            "residual50" => Ok(Arch::Residual50),
            "residual101" => Ok(Arch::Residual101),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub feature_channels: usize,
    pub output_stride: usize,
    /// Width of the first block.
    pub stem_channels: usize,
    pub pretrained_init: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Tiny,
            feature_channels: 16,
            output_stride: 4,
            stem_channels: 16,
            pretrained_init: None,
        }
    }
}

/// Dense `C × H' × W'` embedding of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub source_id: String,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>, source_id: impl Into<String>, stride: usize) -> Self {
        Self {
            values,
            source_id: source_id.into(),
            stride,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn global_average(&self) -> ndarray::Array1<f64> {
        let (c, h, w) = self.values.dim();
        self.values
            .to_shape((c, h * w))
            .expect("contiguous feature")
            .mean_axis(Axis(1))
            .expect("non-empty feature")
    }
}

/// Scales to [0, 1] and applies [`INPUT_MEAN`]/[`INPUT_STD`]; returns `3 × H × W`.
pub fn image_tensor(pixels: &Array3<u8>) -> Array3<f64> {
    let (h, w, _) = pixels.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        (pixels[[y, x, c]] as f64 / 255.0 - INPUT_MEAN[c]) / INPUT_STD[c]
    })
}

pub fn stack_images(images: &[&Array3<u8>]) -> Result<Array4<f64>> {
    let views: Vec<Array3<f64>> = images.iter().map(|p| image_tensor(p)).collect();
    let views: Vec<_> = views.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(format!("batch images differ: {e}")))
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    relu: bool,
}

pub struct BlockCache {
    conv: ConvCache,
    bn: Option<BnCache>,
    activation: Option<Array4<f64>>,
}

pub struct ForwardCache {
    blocks: Vec<BlockCache>,
}

impl ForwardCache {
    /// On/off state of every rectifier unit, for spotting kink crossings in
    /// finite-difference probes.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .filter_map(|b| b.activation.as_ref())
            .flat_map(|a| a.iter().map(|&v| v > 0.0))
            .collect()
    }
}

enum Buffers<'a> {
    Frozen(&'a [f64]),
    Tracking(&'a mut [f64]),
}

fn run_blocks(
    blocks: &[Block],
    params: &[f64],
    mut buffers: Buffers<'_>,
    x: &Array4<f64>,
    keep_cache: bool,
) -> Result<(Array4<f64>, Option<ForwardCache>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut cur: Option<Array4<f64>> = None;
    for block in blocks {
        let input = cur.as_ref().unwrap_or(x);
        let (mut y, conv_cache) = block.conv.forward(params, input, keep_cache);
        let mut bn_cache = None;
        if let Some(bn) = &block.bn {
            y = match &mut buffers {
                Buffers::Frozen(b) => bn.forward_eval(params, b, &y),
                Buffers::Tracking(b) => {
                    let (out, c) = bn.forward_train(params, b, &y);
                    bn_cache = Some(c);
                    out
                }
            };
        }
        if block.relu {
            relu_forward(&mut y);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {}", block.name)));
        }
        if keep_cache {
            caches.push(BlockCache {
                conv: conv_cache.expect("cache requested"),
                bn: bn_cache,
                activation: block.relu.then(|| y.clone()),
            });
        }
        cur = Some(y);
    }
    let out = cur.expect("at least one block");
    Ok((out, keep_cache.then_some(ForwardCache { blocks: caches })))
}

fn backward_blocks(
    blocks: &[Block],
    params: &[f64],
    cache: &ForwardCache,
    dout: Array4<f64>,
    grad: &mut [f64],
    need_dx: bool,
) -> Option<Array4<f64>> {
    let mut d = dout;
    for (i, (block, bc)) in blocks.iter().zip(&cache.blocks).enumerate().rev() {
        if let Some(act) = &bc.activation {
            relu_backward(act, &mut d);
        }
        if let (Some(bn), Some(c)) = (&block.bn, &bc.bn) {
            d = bn.backward(params, c, &d, grad);
        }
        let want = need_dx || i > 0;
        match block.conv.backward(params, &bc.conv, &d, grad, want) {
            Some(dx) => d = dx,
            None => return None,
        }
    }
    Some(d)
}

/// Flat parameter vector plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
}

impl Weights {
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.params.iter().chain(&self.buffers) {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }
}

/// Architecture description: layer shapes and their offsets into [`Weights`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: EncoderConfig,
    pub head_classes: Option<usize>,
    pub layout: ParamLayout,
    pub buffer_layout: ParamLayout,
    encoder: Vec<Block>,
    head: Vec<Block>,
    encoder_params: usize,
    encoder_buffers: usize,
}

impl Network {
    /// `head_classes` is K+1 when an auxiliary head is attached.
    pub fn new(config: EncoderConfig, head_classes: Option<usize>) -> Result<Self> {
        match config.arch {
            Arch::Tiny => {}
            other => {
                return Err(Error::UnsupportedArch(
                    serde_json::to_string(&other)?.trim_matches('"').to_string(),
                ))
            }
        }
        let s = config.output_stride;
        if !matches!(s, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!("output stride {s} not in {{1,2,4,8}}")));
        }
        if config.feature_channels == 0 || config.stem_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let strided = s.trailing_zeros() as usize;
        let mut layout = ParamLayout::default();
        let mut buffer_layout = ParamLayout::default();
        let c = config.feature_channels;
        let widths = [(3, config.stem_channels), (config.stem_channels, c), (c, c), (c, c)];
        let mut encoder = Vec::new();
        for (i, &(cin, cout)) in widths.iter().enumerate() {
            let name = format!("enc.conv{}", i + 1);
            // blocks 2.. take the stride-2 slots
            let stride = if i >= 1 && i <= strided { 2 } else { 1 };
            let last = i == widths.len() - 1;
            // the last block is a 1x1 projection
            let k = if last { 1 } else { 3 };
            let conv = Conv2d::new(&mut layout, &name, cin, cout, k, stride);
            let bn = (!last).then(|| {
                BatchNorm2d::new(&mut layout, &mut buffer_layout, &format!("enc.bn{}", i + 1), cout)
            });
            encoder.push(Block {
                name,
                conv,
                bn,
                relu: !last,
            });
        }
        let encoder_params = layout.total;
        let encoder_buffers = buffer_layout.total;
        let mut head = Vec::new();
        if let Some(k1) = head_classes {
            if k1 < 2 {
                return Err(Error::Config("auxiliary head needs at least 2 classes".into()));
            }
            for i in 0..2 {
                let name = format!("head.conv{}", i + 1);
                let conv = Conv2d::new(&mut layout, &name, c, c, 3, 1);
                let bn = BatchNorm2d::new(&mut layout, &mut buffer_layout, &format!("head.bn{}", i + 1), c);
                head.push(Block {
                    name,
                    conv,
                    bn: Some(bn),
                    relu: true,
                });
            }
            let conv = Conv2d::new(&mut layout, "head.conv3", c, k1, 1, 1);
            head.push(Block {
                name: "head.conv3".into(),
                conv,
                bn: None,
                relu: false,
            });
        }
        Ok(Self {
            config,
            head_classes,
            layout,
            buffer_layout,
            encoder,
            head,
            encoder_params,
            encoder_buffers,
        })
    }

    pub fn init(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.layout.total];
        let mut buffers = vec![0.0; self.buffer_layout.total];
        for block in self.encoder.iter().chain(&self.head) {
            block.conv.init(&mut params, &mut rng);
            if let Some(bn) = &block.bn {
                bn.init(&mut params, &mut buffers);
            }
        }
        Weights { params, buffers }
    }

    pub fn zero_final_layer(&self, params: &mut [f64]) {
        self.encoder.last().expect("encoder").conv.zero(params);
    }

    /// Parameters of the inference graph (encoder only).
    pub fn encoder_param_count(&self) -> usize {
        self.encoder_params
    }

    /// Hash of the encoder part of `weights` (auxiliary head excluded).
    pub fn encoder_fingerprint(&self, weights: &Weights) -> String {
        let mut hasher = Sha256::new();
        for v in weights.params[..self.encoder_params]
            .iter()
            .chain(&weights.buffers[..self.encoder_buffers])
        {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }

    /// Copies encoder parameters and statistics from `src` (which may come
    /// from a network with or without a head).
    pub fn load_encoder_from(&self, dst: &mut Weights, src: &Weights) -> Result<()> {
        if src.params.len() < self.encoder_params || src.buffers.len() < self.encoder_buffers {
            return Err(Error::Shape("source weights smaller than encoder".into()));
        }
        dst.params[..self.encoder_params].copy_from_slice(&src.params[..self.encoder_params]);
        dst.buffers[..self.encoder_buffers].copy_from_slice(&src.buffers[..self.encoder_buffers]);
        Ok(())
    }

    /// Weights without the auxiliary head.
    pub fn encoder_only(&self, weights: &Weights) -> Weights {
        Weights {
            params: weights.params[..self.encoder_params].to_vec(),
            buffers: weights.buffers[..self.encoder_buffers].to_vec(),
        }
    }

    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.encoder
            .iter()
            .fold((h, w), |(h, w), b| b.conv.out_size(h, w))
    }

    pub fn encode(&self, weights: &Weights, pixels: &Array3<u8>, id: &str) -> Result<FeatureMap> {
        let (h, w, _) = pixels.dim();
        if h < self.config.output_stride || w < self.config.output_stride {
            return Err(Error::Shape(format!("image {h}x{w} smaller than stride")));
        }
        let x = image_tensor(pixels).insert_axis(Axis(0));
        let (y, _) = run_blocks(&self.encoder, &weights.params, Buffers::Frozen(&weights.buffers), &x, false)?;
        Ok(FeatureMap::new(
            y.index_axis_move(Axis(0), 0),
            id,
            self.config.output_stride,
        ))
    }

    /// Training-mode forward over a batch (batch-norm statistics from the batch).
    pub fn encode_train(&self, params: &[f64], buffers: &mut [f64], x: &Array4<f64>) -> Result<(Array4<f64>, ForwardCache)> {
        let (y, cache) = run_blocks(&self.encoder, params, Buffers::Tracking(buffers), x, true)?;
        Ok((y, cache.expect("cache")))
    }

    /// Training-mode forward with frozen statistics (used by gradient probes).
    pub fn encode_frozen_with_cache(&self, weights: &Weights, x: &Array4<f64>) -> Result<(Array4<f64>, ForwardCache)> {
        let (y, cache) = run_blocks(&self.encoder, &weights.params, Buffers::Frozen(&weights.buffers), x, true)?;
        Ok((y, cache.expect("cache")))
    }

    pub fn encode_backward(&self, params: &[f64], cache: &ForwardCache, d_features: Array4<f64>, grad: &mut [f64]) {
        backward_blocks(&self.encoder, params, cache, d_features, grad, false);
    }

    fn check_head(&self, num_classes: usize, channels: usize) -> Result<()> {
        match self.head_classes {
            None => Err(Error::Config("network has no auxiliary head".into())),
            Some(k) if k != num_classes => Err(Error::Shape(format!(
                "head configured for {k} classes, asked for {num_classes}"
            ))),
            Some(_) if channels != self.config.feature_channels => Err(Error::Shape(format!(
                "head expects {} channels, got {channels}",
                self.config.feature_channels
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Per-pixel logits `(K+1) × H' × W'` with frozen statistics.
    pub fn aux_head(&self, weights: &Weights, feature: &FeatureMap, num_classes: usize) -> Result<Array3<f64>> {
        self.check_head(num_classes, feature.channels())?;
        let x = feature.values.clone().insert_axis(Axis(0));
        let (y, _) = run_blocks(&self.head, &weights.params, Buffers::Frozen(&weights.buffers), &x, false)?;
        Ok(y.index_axis_move(Axis(0), 0))
    }

    pub fn head_train(&self, params: &[f64], buffers: &mut [f64], features: &Array4<f64>) -> Result<(Array4<f64>, ForwardCache)> {
        let k = self.head_classes.unwrap_or(0);
        self.check_head(k, features.dim().1)?;
        let (y, cache) = run_blocks(&self.head, params, Buffers::Tracking(buffers), features, true)?;
        Ok((y, cache.expect("cache")))
    }

    pub fn head_frozen_with_cache(&self, weights: &Weights, features: &Array4<f64>) -> Result<(Array4<f64>, ForwardCache)> {
        let k = self.head_classes.unwrap_or(0);
        self.check_head(k, features.dim().1)?;
        let (y, cache) = run_blocks(&self.head, &weights.params, Buffers::Frozen(&weights.buffers), features, true)?;
        Ok((y, cache.expect("cache")))
    }

    /// Accumulates head gradients and returns `dL/dfeatures`.
    pub fn head_backward(&self, params: &[f64], cache: &ForwardCache, d_logits: Array4<f64>, grad: &mut [f64]) -> Array4<f64> {
        backward_blocks(&self.head, params, cache, d_logits, grad, true).expect("dx requested")
    }
}
