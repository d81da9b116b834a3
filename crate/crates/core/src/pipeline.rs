//! The stages behind the command-line tool, usable without it.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, Dataset};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::miner::{self, AnnotateRun, AnnotateSource, EntrySource, Manifest, INIT_CHECKPOINT_FILE};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::rectifier::{build_region_bank, RegionBank};
use crate::synth::{self, Legend, MiningScore};
use crate::trainer::{run_training, PseudoSet, TrainConfig, TrainInputs, TrainOutcome};

/// Extension of the region bank written next to a checkpoint.
pub const BANK_SUFFIX: &str = "bank.bin";

pub fn bank_path(checkpoint: &Path) -> PathBuf {
    let name = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    checkpoint.with_file_name(format!("{stem}.{BANK_SUFFIX}"))
}

/// Pretrained initialisation of the default encoder.
pub fn pretrained_init(seed: u64) -> Result<Checkpoint> {
    let config = PretrainConfig {
        seed,
        ..PretrainConfig::default()
    };
    let (net, weights) = pretrain(&EncoderConfig::default(), &config)?;
    Checkpoint::from_weights(&net, &weights, Some(config))
}

pub struct MineOptions<'a> {
    pub fold: usize,
    pub clusters: usize,
    pub seed: u64,
    /// Encoder to mine with; pretrained from scratch when absent.
    pub init: Option<&'a Checkpoint>,
    pub unlabeled_dir: Option<&'a Path>,
}

/// Clusters train-class prototypes of the fold's training view and writes a
/// pseudo mask for every training-view image (plus any unlabeled images),
/// the manifest, the representative set and the init checkpoint to `out`.
pub fn mine(dataset: &Dataset, opts: &MineOptions<'_>, out: &Path) -> Result<Manifest> {
    let fold = dataset.fold(opts.fold)?;
    let owned;
    let init = match opts.init {
        Some(c) => c,
        None => {
            owned = pretrained_init(opts.seed)?;
            &owned
        }
    };
    let (net, weights) = init.inference(false)?;
    let view = dataset.training_view(&fold)?;
    let (fg, bg) = miner::collect_prototypes(&view, &fold, &net, &weights)?;
    let rep = miner::build_rep_set(&fg, &bg, opts.clusters, opts.seed, &net.encoder_fingerprint(&weights))?;
    let unlabeled = match opts.unlabeled_dir {
        Some(dir) => dataset::list_images(dir)?
            .into_iter()
            .map(|(id, path)| Ok((id, dataset::read_rgb(&path)?)))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let mut sources: Vec<AnnotateSource<'_>> = view
        .samples()
        .iter()
        .map(|s| AnnotateSource {
            id: &s.id,
            pixels: &s.pixels,
            source: EntrySource::Labeled,
        })
        .collect();
    sources.extend(unlabeled.iter().map(|(id, px)| AnnotateSource {
        id,
        pixels: px,
        source: EntrySource::Unlabeled,
    }));
    let run = AnnotateRun {
        net: &net,
        weights: &weights,
        rep: &rep,
        seed: opts.seed,
        fold: opts.fold,
        dataset_root: dataset.root.clone(),
        unlabeled_dir: opts.unlabeled_dir.map(Path::to_path_buf),
    };
    let manifest = miner::annotate_dataset(&run, &sources, out)?;
    init.save(&out.join(INIT_CHECKPOINT_FILE))?;
    Ok(manifest)
}

/// Scores the labelled pseudo masks in `pseudo_dir` against the oracle of a
/// synthetic dataset at `data_root`.
pub fn score_mining(pseudo_dir: &Path, data_root: &Path) -> Result<MiningScore> {
    let manifest = Manifest::read(pseudo_dir)?;
    let legend = Legend::read(data_root)?;
    let mut triples = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.ok && e.source == EntrySource::Labeled) {
        let pseudo = manifest.load_mask(pseudo_dir, e)?;
        let oracle_path = data_root.join(synth::ORACLE_DIR).join(format!("{}.png", e.id));
        if !oracle_path.exists() {
            return Err(Error::IdMismatch(format!("no oracle mask for `{}`", e.id)));
        }
        triples.push((e.id.clone(), pseudo, dataset::read_gray(&oracle_path)?));
    }
    synth::score_mining_masks(triples.iter().map(|(id, p, o)| (id.as_str(), p, o)), &legend)
}

pub struct TrainOptions<'a> {
    pub fold: usize,
    pub pseudo_dir: Option<&'a Path>,
    pub init: Option<&'a Checkpoint>,
    pub metrics: Option<&'a Path>,
}

/// Trains from the init checkpoint (the pseudo directory's, unless one is
/// given) and, when pseudo masks are available, builds the region bank
/// with the EMA encoder.
pub fn train(dataset: &Dataset, config: &TrainConfig, opts: &TrainOptions<'_>) -> Result<(TrainOutcome, Option<RegionBank>)> {
    let fold = dataset.fold(opts.fold)?;
    let pseudo = opts.pseudo_dir.map(|d| PseudoSet::load(d, dataset)).transpose()?;
    let owned;
    let init = match (opts.init, opts.pseudo_dir) {
        (Some(c), _) => c,
        (None, Some(dir)) => {
            owned = Checkpoint::load(&dir.join(INIT_CHECKPOINT_FILE))?;
            &owned
        }
        (None, None) => return Err(Error::Config("training needs an init checkpoint or a pseudo-mask directory".into())),
    };
    let inputs = TrainInputs {
        dataset,
        fold: &fold,
        pseudo: pseudo.as_ref().filter(|_| config.pseudo_per_batch > 0),
        init,
    };
    let outcome = match opts.metrics {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            run_training(&inputs, config, &mut w)?
        }
        None => run_training(&inputs, config, &mut std::io::sink())?,
    };
    let bank = match &pseudo {
        Some(p) => {
            let (net, weights) = outcome.checkpoint.inference(true)?;
            Some(build_region_bank(&net, &weights, p)?)
        }
        None => None,
    };
    Ok((outcome, bank))
}

/// Loads a dataset directory, using the synthetic split file if present.
pub fn load_data(root: &Path) -> Result<Dataset> {
    dataset::load_dataset_dir(root)
}
