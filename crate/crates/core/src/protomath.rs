//! Prototype arithmetic: masked average pooling, cosine score maps, the
//! episodic query loss and nearest-prototype labelling.
//!
//! Everything here is a pure function of its inputs. The `*_backward`
//! variants return the gradients the trainer needs.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use crate::dataset::IGNORE;
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};

/// Guard added to each norm inside [`cosine`].
pub const COSINE_EPS: f64 = 1e-8;
pub const DEFAULT_SIGMA: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoOrigin {
    SupportFg,
    SupportBg,
    ClusterCenter,
    GlobalBg,
    Region,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Array1<f64>,
    pub class_id: i64,
    pub origin: ProtoOrigin,
}

impl Prototype {
    pub fn new(vector: Array1<f64>, class_id: i64, origin: ProtoOrigin) -> Self {
        Self {
            vector,
            class_id,
            origin,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel class probabilities, `classes × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub probs: Array3<f64>,
}

impl ScoreMap {
    pub fn num_classes(&self) -> usize {
        self.probs.dim().0
    }

    /// Per-pixel argmax, lowest index on ties.
    pub fn argmax(&self) -> Array2<u8> {
        let (k, h, w) = self.probs.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for c in 1..k {
                if self.probs[[c, y, x]] > self.probs[[best, y, x]] {
                    best = c;
                }
            }
            best as u8
        })
    }
}

fn check_mask(feature: &FeatureMap, mask: &Array2<u8>) -> Result<()> {
    let (_, h, w) = feature.values.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} vs feature {}x{}",
            mask.dim(),
            h,
            w
        )));
    }
    Ok(())
}

/// Mean of the feature columns where `mask == class_id`.
pub fn masked_average_pool(
    feature: &FeatureMap,
    mask: &Array2<u8>,
    class_id: u8,
) -> Result<Array1<f64>> {
    masked_average_pool_union(&[feature], &[mask], class_id)
}

/// Masked average pooling over the union of several (feature, mask) pairs:
/// one mean over every selected pixel of every map.
pub fn masked_average_pool_union(
    features: &[&FeatureMap],
    masks: &[&Array2<u8>],
    class_id: u8,
) -> Result<Array1<f64>> {
    if features.is_empty() || features.len() != masks.len() {
        return Err(Error::Shape("feature/mask lists differ in length".into()));
    }
    let c = features[0].channels();
    let mut sum = Array1::<f64>::zeros(c);
    let mut count = 0usize;
    for (f, m) in features.iter().zip(masks) {
        check_mask(f, m)?;
        if f.channels() != c {
            return Err(Error::Shape("feature maps differ in channel count".into()));
        }
        for ((y, x), &v) in m.indexed_iter() {
            if v == class_id {
                for ch in 0..c {
                    sum[ch] += f.values[[ch, y, x]];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion(class_id as i64));
    }
    Ok(sum / count as f64)
}

/// Cosine similarity with [`COSINE_EPS`] added to both norms.
pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let dot = u.dot(&v);
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    dot / ((nu + COSINE_EPS) * (nv + COSINE_EPS))
}

/// Unit-direction-ish view of every pixel: returns `(columns, norms)` where
/// columns is `H*W × C`.
fn pixel_columns(feature: &FeatureMap) -> (Array2<f64>, Array1<f64>) {
    let (c, h, w) = feature.values.dim();
    let cols = feature
        .values
        .to_shape((c, h * w))
        .expect("contiguous feature")
        .t()
        .to_owned();
    let norms = cols.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    (cols, norms)
}

fn validate_prototypes(feature: &FeatureMap, prototypes: &[ArrayView1<f64>]) -> Result<()> {
    if prototypes.len() < 2 {
        return Err(Error::DegenerateSoftmax(prototypes.len()));
    }
    for p in prototypes {
        if p.len() != feature.channels() {
            return Err(Error::Shape(format!(
                "prototype of dim {} vs {} feature channels",
                p.len(),
                feature.channels()
            )));
        }
    }
    Ok(())
}

/// `probs[c, y, x] = softmax_c(sigma * cos(F(y, x), p_c))`.
pub fn score_map(
    feature: &FeatureMap,
    prototypes: &[ArrayView1<f64>],
    sigma: f64,
) -> Result<ScoreMap> {
    validate_prototypes(feature, prototypes)?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (_, h, w) = feature.values.dim();
    let k = prototypes.len();
    let (cols, norms) = pixel_columns(feature);
    let pnorms: Vec<f64> = prototypes.iter().map(|p| p.dot(p).sqrt()).collect();
    let mut probs = Array3::<f64>::zeros((k, h, w));
    let mut logits = vec![0.0; k];
    for (i, col) in cols.outer_iter().enumerate() {
        let (y, x) = (i / w, i % w);
        for (c, p) in prototypes.iter().enumerate() {
            let cos = col.dot(p) / ((norms[i] + COSINE_EPS) * (pnorms[c] + COSINE_EPS));
            logits[c] = sigma * cos;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for c in 0..k {
            probs[[c, y, x]] = logits[c] / z;
        }
    }
    Ok(ScoreMap { probs })
}

/// Mean negative log-likelihood of `gt` over its non-ignore pixels.
pub fn episodic_loss(score: &ScoreMap, gt: &Array2<u8>) -> Result<f64> {
    let (k, h, w) = score.probs.dim();
    if gt.dim() != (h, w) {
        return Err(Error::Shape(format!("gt {:?} vs score {h}x{w}", gt.dim())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((y, x), &g) in gt.indexed_iter() {
        if g == IGNORE {
            continue;
        }
        if g as usize >= k {
            return Err(Error::Shape(format!("label {g} for {k} classes")));
        }
        total -= score.probs[[g as usize, y, x]].max(f64::MIN_POSITIVE).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok(total / n as f64)
}

/// Gradients of `episodic_loss(score_map(feature, prototypes, sigma), gt)`.
pub struct EpisodicGrad {
    pub loss: f64,
    pub d_feature: Array3<f64>,
    pub d_prototypes: Vec<Array1<f64>>,
}

pub fn episodic_loss_backward(
    feature: &FeatureMap,
    prototypes: &[ArrayView1<f64>],
    sigma: f64,
    gt: &Array2<u8>,
) -> Result<EpisodicGrad> {
    let score = score_map(feature, prototypes, sigma)?;
    let loss = episodic_loss(&score, gt)?;
    let (c, h, w) = feature.values.dim();
    let k = prototypes.len();
    let n_valid = gt.iter().filter(|&&g| g != IGNORE).count() as f64;
    let (cols, norms) = pixel_columns(feature);
    let pnorms: Vec<f64> = prototypes.iter().map(|p| p.dot(p).sqrt()).collect();

    let mut d_feature = Array3::<f64>::zeros((c, h, w));
    let mut d_prototypes = vec![Array1::<f64>::zeros(c); k];
    for (i, u) in cols.outer_iter().enumerate() {
        let (y, x) = (i / w, i % w);
        let g = gt[[y, x]];
        if g == IGNORE {
            continue;
        }
        let a = norms[i] + COSINE_EPS;
        for (ci, p) in prototypes.iter().enumerate() {
            let target = if ci == g as usize { 1.0 } else { 0.0 };
            let ds = (score.probs[[ci, y, x]] - target) / n_valid * sigma;
            if ds == 0.0 {
                continue;
            }
            let b = pnorms[ci] + COSINE_EPS;
            let dot = u.dot(p);
            // d cos / du = v/(ab) - dot/(a^2 b) * u/|u|
            let su = if norms[i] > 0.0 {
                dot / (a * a * b * norms[i])
            } else {
                0.0
            };
            let sv = if pnorms[ci] > 0.0 {
                dot / (a * b * b * pnorms[ci])
            } else {
                0.0
            };
            for ch in 0..c {
                d_feature[[ch, y, x]] += ds * (p[ch] / (a * b) - su * u[ch]);
                d_prototypes[ci][ch] += ds * (u[ch] / (a * b) - sv * p[ch]);
            }
        }
    }
    Ok(EpisodicGrad {
        loss,
        d_feature,
        d_prototypes,
    })
}

/// Nearest prototype by cosine similarity for every pixel; ties resolve to
/// the lowest index.
pub fn nn_classify(feature: &FeatureMap, rep_set: &[ArrayView1<f64>]) -> Result<Array2<u8>> {
    if rep_set.is_empty() {
        return Err(Error::EmptyRepSet);
    }
    if rep_set.len() > 255 {
        return Err(Error::Shape(format!("{} prototypes exceed u8 labels", rep_set.len())));
    }
    for p in rep_set {
        if p.len() != feature.channels() {
            return Err(Error::Shape("prototype/feature channel mismatch".into()));
        }
    }
    let (_, h, w) = feature.values.dim();
    let (cols, norms) = pixel_columns(feature);
    let pnorms: Vec<f64> = rep_set.iter().map(|p| p.dot(p).sqrt()).collect();
    let mut labels = Array2::<u8>::zeros((h, w));
    for (i, col) in cols.outer_iter().enumerate() {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (k, p) in rep_set.iter().enumerate() {
            let sim = col.dot(p) / ((norms[i] + COSINE_EPS) * (pnorms[k] + COSINE_EPS));
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        labels[[i / w, i % w]] = best as u8;
    }
    Ok(labels)
}
