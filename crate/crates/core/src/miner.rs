//! Offline latent-class mining.
//!
//! Prototypes of every (image, train class) pair are clustered into K
//! sub-clusters; together with the mean background prototype they form the
//! representative set. Every pixel of an image is then labelled with its
//! most cosine-similar representative (0 = background, 1..=K = clusters).

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, Dataset, FoldSplit, BACKGROUND, IGNORE};
use crate::encoder::{Network, Weights};
use crate::error::{Error, Result};
use crate::grid::resize_nearest;
use crate::protomath::{masked_average_pool, nn_classify, ProtoOrigin, Prototype};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REP_SET_FILE: &str = "rep_set.json";
pub const INIT_CHECKPOINT_FILE: &str = "init.ckpt.json";
pub const UNLABELED_SUBDIR: &str = "unlabeled";

pub const DEFAULT_CLUSTERS: usize = 5;
pub const COCO_CLUSTERS: usize = 15;

const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub background: Vec<f64>,
    pub clusters: Vec<Vec<f64>>,
    pub k: usize,
    pub encoder_fingerprint: String,
}

impl RepresentativeSet {
    /// Prototypes in label order: background first, then clusters 1..=K.
    pub fn prototypes(&self) -> Vec<Prototype> {
        std::iter::once(Prototype::new(
            Array1::from(self.background.clone()),
            0,
            ProtoOrigin::SupportBg,
        ))
        .chain(self.clusters.iter().enumerate().map(|(i, c)| {
            Prototype::new(Array1::from(c.clone()), i as i64 + 1, ProtoOrigin::ClusterCenter)
        }))
        .collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.encoder_fingerprint.as_bytes());
        hasher.update((self.k as u64).to_le_bytes());
        for v in self.background.iter().chain(self.clusters.iter().flatten()) {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub labels: Array2<u8>,
    pub source_id: String,
    pub rep_fingerprint: String,
}

/// One prototype per (image, present train class) and one background
/// prototype per image that has background at feature resolution.
pub fn collect_prototypes(
    dataset: &Dataset,
    fold: &FoldSplit,
    net: &Network,
    weights: &Weights,
) -> Result<(Vec<Prototype>, Vec<Prototype>)> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for sample in dataset.samples() {
        if sample.mask.iter().all(|&v| v == IGNORE) {
            log::warn!("skipping `{}`: mask is entirely ignore", sample.id);
            continue;
        }
        let feature = net.encode(weights, &sample.pixels, &sample.id)?;
        let mask = resize_nearest(&sample.mask, feature.height(), feature.width());
        for &c in sample.class_set.iter().filter(|c| fold.train_classes.contains(c)) {
            match masked_average_pool(&feature, &mask, c) {
                Ok(v) => fg.push(Prototype::new(v, c as i64, ProtoOrigin::SupportFg)),
                Err(Error::EmptyRegion(_)) => {
                    log::warn!("class {c} of `{}` vanishes at feature resolution", sample.id)
                }
                Err(e) => return Err(e),
            }
        }
        let mut bg_mask = mask.clone();
        bg_mask.mapv_inplace(|v| if fold.test_classes.contains(&v) { BACKGROUND } else { v });
        if bg_mask.iter().any(|&v| v == BACKGROUND) {
            let v = masked_average_pool(&feature, &bg_mask, BACKGROUND)?;
            bg.push(Prototype::new(v, 0, ProtoOrigin::SupportBg));
        }
    }
    Ok((fg, bg))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective (sum of squared distances) after every assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one assignment")
    }
}

fn assign(points: &[&[f64]], centers: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (p, slot) in points.iter().zip(out.iter_mut()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        *slot = best;
        total += best_d;
    }
    total
}

/// Lloyd's algorithm from k-means++ seeding. Stops when no center moves by
/// more than 1e-6 or after 300 iterations. A cluster that loses all its
/// points is re-seeded with the point farthest from its assigned center.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::TooFewPoints {
            points: points.len(),
            k: k.max(1),
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points differ in dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("pushed")));
        }
    }

    let mut assignments = vec![0usize; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        trace.push(assign(points, &centers, &mut assignments));
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut reseeded = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[j]).sqrt());
            centers[j] = new;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let (far, _) = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, sq_dist(p, &centers[assignments[i]])))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            centers[j] = points[far].to_vec();
            reseeded = true;
        }
        if (!reseeded && shift < KMEANS_TOL) || iterations >= KMEANS_MAX_ITERS {
            break;
        }
    }
    trace.push(assign(points, &centers, &mut assignments));
    Ok(KMeans {
        centers,
        assignments,
        objective_trace: trace,
        iterations,
    })
}

pub fn build_rep_set(
    fg: &[Prototype],
    bg: &[Prototype],
    k: usize,
    seed: u64,
    encoder_fingerprint: &str,
) -> Result<RepresentativeSet> {
    if bg.is_empty() {
        return Err(Error::NoBackground);
    }
    if fg.is_empty() {
        return Err(Error::TooFewPoints { points: 0, k });
    }
    let points: Vec<&[f64]> = fg
        .iter()
        .map(|p| p.vector.as_slice().expect("contiguous prototype"))
        .collect();
    let km = kmeans(&points, k, seed)?;
    let dim = bg[0].dim();
    let mut background = vec![0.0; dim];
    for p in bg {
        for (b, v) in background.iter_mut().zip(p.vector.iter()) {
            *b += v;
        }
    }
    for b in &mut background {
        *b /= bg.len() as f64;
    }
    let rep = RepresentativeSet {
        background,
        clusters: km.centers,
        k,
        encoder_fingerprint: encoder_fingerprint.to_string(),
    };
    if rep
        .clusters
        .iter()
        .chain(std::iter::once(&rep.background))
        .any(|v| v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0))
    {
        return Err(Error::NonFinite("representative set".into()));
    }
    Ok(rep)
}

/// Nearest-representative labelling at feature resolution, upsampled to the
/// image by nearest neighbour.
pub fn annotate(
    pixels: &Array3<u8>,
    id: &str,
    net: &Network,
    weights: &Weights,
    rep: &RepresentativeSet,
) -> Result<PseudoMask> {
    let fp = net.encoder_fingerprint(weights);
    if fp != rep.encoder_fingerprint {
        return Err(Error::Fingerprint {
            expected: rep.encoder_fingerprint.clone(),
            found: fp,
        });
    }
    let feature = net.encode(weights, pixels, id)?;
    let protos = rep.prototypes();
    let views: Vec<_> = protos.iter().map(|p| p.vector.view()).collect();
    let labels = nn_classify(&feature, &views)?;
    let (h, w, _) = pixels.dim();
    Ok(PseudoMask {
        labels: resize_nearest(&labels, h, w),
        source_id: id.to_string(),
        rep_fingerprint: rep.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntrySource {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Mask path relative to the manifest directory.
    pub file: String,
    pub source: EntrySource,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rep_fingerprint: String,
    pub encoder_fingerprint: String,
    pub k: usize,
    pub seed: u64,
    pub fold: usize,
    pub feature_source: String,
    pub dataset_root: Option<PathBuf>,
    pub unlabeled_dir: Option<PathBuf>,
    pub partial: bool,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_mask(&self, dir: &Path, entry: &ManifestEntry) -> Result<Array2<u8>> {
        dataset::read_gray(&dir.join(&entry.file))
    }

    pub fn entry(&self, id: &str, source: EntrySource) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id && e.source == source)
    }
}

/// An image to pseudo-annotate.
pub struct AnnotateSource<'a> {
    pub id: &'a str,
    pub pixels: &'a Array3<u8>,
    pub source: EntrySource,
}

pub struct AnnotateRun<'a> {
    pub net: &'a Network,
    pub weights: &'a Weights,
    pub rep: &'a RepresentativeSet,
    pub seed: u64,
    pub fold: usize,
    pub dataset_root: Option<PathBuf>,
    pub unlabeled_dir: Option<PathBuf>,
}

/// Writes one mask per source under `out_dir` (unlabeled ones under
/// `unlabeled/`) and the manifest. Per-file failures are recorded in the
/// manifest and flag it as partial.
pub fn annotate_dataset(run: &AnnotateRun<'_>, sources: &[AnnotateSource<'_>], out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if sources.iter().any(|s| s.source == EntrySource::Unlabeled) {
        let dir = out_dir.join(UNLABELED_SUBDIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(sources.len());
    for src in sources {
        let file = match src.source {
            EntrySource::Labeled => format!("{}.png", src.id),
            EntrySource::Unlabeled => format!("{UNLABELED_SUBDIR}/{}.png", src.id),
        };
        let result = annotate(src.pixels, src.id, run.net, run.weights, run.rep)
            .and_then(|pm| dataset::write_gray(&out_dir.join(&file), &pm.labels));
        let error = match result {
            Ok(()) => None,
            Err(e @ Error::Fingerprint { .. }) => return Err(e),
            Err(e) => {
                log::warn!("pseudo mask for `{}` failed: {e}", src.id);
                Some(e.to_string())
            }
        };
        entries.push(ManifestEntry {
            id: src.id.to_string(),
            file,
            source: src.source,
            ok: error.is_none(),
            error,
        });
    }
    let manifest = Manifest {
        rep_fingerprint: run.rep.fingerprint(),
        encoder_fingerprint: run.rep.encoder_fingerprint.clone(),
        k: run.rep.k,
        seed: run.seed,
        fold: run.fold,
        feature_source: format!(
            "encoder output, {} channels, stride {}",
            run.net.config.feature_channels, run.net.config.output_stride
        ),
        dataset_root: run.dataset_root.clone(),
        unlabeled_dir: run.unlabeled_dir.clone(),
        partial: entries.iter().any(|e| !e.ok),
        entries,
    };
    manifest.write(out_dir)?;
    let rep_path = out_dir.join(REP_SET_FILE);
    let text = serde_json::to_string_pretty(run.rep)? + "\n";
    std::fs::write(&rep_path, text).map_err(|e| Error::io(&rep_path, e))?;
    Ok(manifest)
}

pub fn read_rep_set(dir: &Path) -> Result<RepresentativeSet> {
    let path = dir.join(REP_SET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}
