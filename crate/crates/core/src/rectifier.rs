//! Inference-time prototype rectification.
//!
//! Background: blend the support background prototype with the global one
//! learned during training. Foreground: find the bank images most similar
//! to the support image, take the most support-like pseudo-labelled region
//! of each, and mix their similarity-weighted average into the support
//! prototype.
//!
//! Region bank sidecar (little-endian):
//!
//! ```text
//! magic    b"LPRB"
//! version  u32 = 1
//! channels u32, k u32, entries u32, vectors u32
//! vectors  `vectors × channels` f64
//! index    per entry: id_len u32, id bytes, embedding u32, regions u32,
//!          then per region: label u8, vector u32
//! ```

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array1, ArrayView1};

use crate::encoder::{Network, Weights};
use crate::error::{Error, Result};
use crate::grid::resize_nearest;
use crate::protomath::{cosine, masked_average_pool};
use crate::trainer::PseudoSet;

pub const DEFAULT_FUSION_WEIGHT: f64 = 0.9;
pub const DEFAULT_BETA: f64 = 0.2;
pub const DEFAULT_TOP_IMAGES: usize = 4;
/// Regions smaller than this many feature pixels are not stored.
pub const MIN_REGION_PIXELS: usize = 10;
/// Floor applied to region similarities before normalising them.
pub const MU_FLOOR: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"LPRB";
const BANK_VERSION: u32 = 1;

/// `w * global + (1 - w) * current`.
pub fn fuse_background(current: ArrayView1<f64>, global: ArrayView1<f64>, w: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("fusion weight must lie in [0, 1], got {w}")));
    }
    if current.len() != global.len() {
        return Err(Error::Shape("background prototypes differ in width".into()));
    }
    let out = &global * w + &current * (1.0 - w);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused background prototype".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankRegion {
    pub label: u8,
    pub vector: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub id: String,
    /// Global average of the image's feature map.
    pub embedding: Array1<f64>,
    pub regions: Vec<BankRegion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionBank {
    pub channels: usize,
    pub k: usize,
    pub entries: Vec<BankEntry>,
}

/// One bank entry per pseudo-labelled image: its embedding and one
/// prototype per pseudo label `1..=K` covering at least
/// [`MIN_REGION_PIXELS`] feature pixels.
pub fn build_region_bank(net: &Network, weights: &Weights, pseudo: &PseudoSet) -> Result<RegionBank> {
    let k = pseudo.manifest.k;
    for e in pseudo.manifest.entries.iter().filter(|e| !e.ok) {
        log::warn!("no pseudo mask for `{}`; left out of the region bank", e.id);
    }
    let mut entries = Vec::with_capacity(pseudo.items.len());
    for (id, _, sample) in &pseudo.items {
        let feature = net.encode(weights, &sample.pixels, id)?;
        let labels = resize_nearest(&sample.labels, feature.height(), feature.width());
        let mut regions = Vec::new();
        for label in 1..=k as u8 {
            if labels.iter().filter(|&&v| v == label).count() < MIN_REGION_PIXELS {
                continue;
            }
            regions.push(BankRegion {
                label,
                vector: masked_average_pool(&feature, &labels, label)?,
            });
        }
        entries.push(BankEntry {
            id: id.clone(),
            embedding: feature.global_average(),
            regions,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok(RegionBank {
        channels: net.config.feature_channels,
        k,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rectified {
    pub prototype: Array1<f64>,
    /// `(entry index, region index)` of every region that was mixed in.
    pub selected: Vec<(usize, usize)>,
    pub mu: Vec<f64>,
    /// Set when none of the top images carried a region.
    pub no_regions: bool,
}

/// Bank entries ordered by embedding similarity to `embedding`, most
/// similar first; ties fall back to the entry id so storage order does not
/// matter.
pub fn rank_images(bank: &RegionBank, embedding: ArrayView1<f64>) -> Vec<usize> {
    let sims: Vec<f64> = bank.entries.iter().map(|e| cosine(e.embedding.view(), embedding)).collect();
    let mut order: Vec<usize> = (0..bank.entries.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| bank.entries[a].id.cmp(&bank.entries[b].id))
    });
    order
}

pub fn rectify_foreground(
    support: ArrayView1<f64>,
    support_embedding: ArrayView1<f64>,
    bank: &RegionBank,
    n_images: usize,
    beta: f64,
) -> Result<Rectified> {
    if bank.entries.is_empty() {
        return Err(Error::EmptyBank);
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    if n_images == 0 {
        return Err(Error::Config("at least one bank image must be selected".into()));
    }
    if support.len() != bank.channels || support_embedding.len() != bank.channels {
        return Err(Error::Shape("support vectors do not match the bank width".into()));
    }
    let mut selected = Vec::new();
    let mut sims = Vec::new();
    for &e in rank_images(bank, support_embedding).iter().take(n_images) {
        let best = bank.entries[e]
            .regions
            .iter()
            .enumerate()
            .map(|(r, reg)| (r, cosine(reg.vector.view(), support)))
            .fold(None, |acc: Option<(usize, f64)>, (r, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((r, s)),
            });
        if let Some((r, s)) = best {
            selected.push((e, r));
            sims.push(s.max(MU_FLOOR));
        }
    }
    if selected.is_empty() {
        return Ok(Rectified {
            prototype: support.to_owned(),
            selected,
            mu: Vec::new(),
            no_regions: true,
        });
    }
    let total: f64 = sims.iter().sum();
    let mu: Vec<f64> = sims.iter().map(|s| s / total).collect();
    let mut mixed = Array1::<f64>::zeros(support.len());
    for (&(e, r), &m) in selected.iter().zip(&mu) {
        mixed.scaled_add(m, &bank.entries[e].regions[r].vector);
    }
    let prototype = &support * (1.0 - beta) + &mixed * beta;
    Ok(Rectified {
        prototype,
        selected,
        mu,
        no_regions: false,
    })
}

impl RegionBank {
    pub fn region_count(&self) -> usize {
        self.entries.iter().map(|e| e.regions.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut vectors: Vec<&Array1<f64>> = Vec::new();
        let mut index = Vec::new();
        for e in &self.entries {
            put_u32(&mut index, e.id.len() as u32);
            index.extend_from_slice(e.id.as_bytes());
            put_u32(&mut index, vectors.len() as u32);
            vectors.push(&e.embedding);
            put_u32(&mut index, e.regions.len() as u32);
            for r in &e.regions {
                index.push(r.label);
                put_u32(&mut index, vectors.len() as u32);
                vectors.push(&r.vector);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [BANK_VERSION, self.channels as u32, self.k as u32, self.entries.len() as u32, vectors.len() as u32] {
            put_u32(&mut out, v);
        }
        for v in vectors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&index);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let channels = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n_entries = r.u32()? as usize;
        let n_vectors = r.u32()? as usize;
        let mut vectors = Vec::with_capacity(n_vectors);
        for _ in 0..n_vectors {
            let mut v = Array1::<f64>::zeros(channels);
            for x in v.iter_mut() {
                *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err("non-finite vector".into());
            }
            vectors.push(v);
        }
        let vector = |i: u32| vectors.get(i as usize).cloned().ok_or_else(|| format!("vector {i} out of range"));
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let len = r.u32()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let embedding = vector(r.u32()?)?;
            let n_regions = r.u32()? as usize;
            let mut regions = Vec::with_capacity(n_regions);
            for _ in 0..n_regions {
                let label = r.take(1)?[0];
                regions.push(BankRegion {
                    label,
                    vector: vector(r.u32()?)?,
                });
            }
            entries.push(BankEntry { id, embedding, regions });
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { channels, k, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
