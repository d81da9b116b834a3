//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::dataset;
use crate::episode::sample_episodes;
use crate::error::{Error, Result};
use crate::evaluator::{predict_cached, run_eval, EvalConfig, EvalInputs, FeatureCache, Rectification};
use crate::miner::{self, DEFAULT_CLUSTERS};
use crate::pipeline::{self, bank_path, MineOptions, TrainOptions};
use crate::rectifier::RegionBank;
use crate::synth::{self, SynthConfig};
use crate::trainer::TrainConfig;
use crate::viz;

pub const DETERMINISTIC_ENV: &str = "LATENTPROTO_DETERMINISTIC";

pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, Parser)]
#[command(name = "latentproto", version, about = "Few-shot segmentation with latent-class mining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with base and latent classes.
    Synth(SynthArgs),
    /// Pseudo-annotate latent classes with a frozen encoder.
    Mine(MineArgs),
    /// Train the encoder on episodes and pseudo masks.
    Train(TrainArgs),
    /// Evaluate 1-way episodes on the held-out classes.
    Eval(EvalArgs),
    /// Write prediction panels (or pseudo-mask panels with --pseudo).
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub base: usize,
    #[arg(long, default_value_t = 2)]
    pub latent: usize,
    #[arg(long, default_value_t = 60)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub appearance_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the six-class benchmark preset; --base, --latent, --images and
    /// --folds are ignored.
    #[arg(long)]
    pub benchmark: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder checkpoint to mine with (default: pretrain one).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Extra images without masks to annotate as well.
    #[arg(long)]
    pub unlabeled_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pseudo-mask directory written by `mine`.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// `key = value` file overriding training defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial encoder (default: the pseudo directory's init checkpoint).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Train on episodes only.
    #[arg(long)]
    pub no_mine: bool,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; the region bank goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step metrics as JSON lines (default: next to the checkpoint).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    /// Comma-separated episode seeds.
    #[arg(long, alias = "seed", value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub rectify_fg: bool,
    #[arg(long)]
    pub rectify_bg: bool,
    #[arg(long)]
    pub no_ema: bool,
    /// Region bank (default: next to the checkpoint).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Report path; a `.txt` table is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub rectify_fg: bool,
    #[arg(long)]
    pub rectify_bg: bool,
    /// Render pseudo masks from this directory instead of predictions.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Mine(a) => cmd_mine(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Visualize(a) => cmd_visualize(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let config = if a.benchmark {
        SynthConfig {
            image_size: a.size,
            appearance_seed: a.appearance_seed,
            seed: a.seed,
            ..SynthConfig::benchmark()
        }
    } else {
        SynthConfig {
            num_base_classes: a.base,
            num_latent_classes: a.latent,
            images: a.images,
            image_size: a.size,
            num_folds: a.folds,
            appearance_seed: a.appearance_seed,
            seed: a.seed,
            ..SynthConfig::default()
        }
    };
    synth::generate(&config)?.write(&a.out)?;
    log::info!("wrote {} images to {}", config.images, a.out.display());
    Ok(())
}

pub fn cmd_mine(a: &MineArgs) -> Result<()> {
    let data = pipeline::load_data(&a.data)?;
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let opts = MineOptions {
        fold: a.fold,
        clusters: a.clusters,
        seed: a.seed,
        init: init.as_ref(),
        unlabeled_dir: a.unlabeled_dir.as_deref(),
    };
    let manifest = pipeline::mine(&data, &opts, &a.out)?;
    let ok = manifest.entries.iter().filter(|e| e.ok).count();
    log::info!("{ok}/{} pseudo masks written to {}", manifest.entries.len(), a.out.display());
    if a.data.join(synth::ORACLE_DIR).is_dir() {
        let score = pipeline::score_mining(&a.out, &a.data)?;
        for c in &score.per_class {
            log::info!(
                "latent class {}: purity {:.3} coverage {:.3} (label {})",
                c.class_id,
                c.purity,
                c.coverage,
                c.dominant_label
            );
        }
    }
    Ok(())
}

/// Training configuration from defaults, the config file and flags.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &a.config {
        config.apply(&KeyValues::read(path)?)?;
    }
    if let Some(n) = a.iters {
        config.total_steps = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if a.no_mine {
        config.pseudo_per_batch = 0;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = train_config(a)?;
    if a.dump_config {
        print!("{}", config.to_key_values().render());
        return Ok(());
    }
    let data = pipeline::load_data(&a.data)?;
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("metrics.jsonl"));
    let opts = TrainOptions {
        fold: a.fold,
        pseudo_dir: a.pseudo.as_deref(),
        init: init.as_ref(),
        metrics: Some(&metrics),
    };
    let (outcome, bank) = pipeline::train(&data, &config, &opts)?;
    outcome.checkpoint.save(&a.out)?;
    if let Some(bank) = bank {
        bank.save(&bank_path(&a.out))?;
    }
    if let Some(last) = outcome.metrics.last() {
        log::info!("step {}: l_gt {:.4} l_pseudo {:.4}", last.step, last.l_gt, last.l_pseudo);
    }
    Ok(())
}

fn load_bank(explicit: Option<&Path>, checkpoint: &Path, needed: bool) -> Result<Option<RegionBank>> {
    if !needed {
        return Ok(None);
    }
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| bank_path(checkpoint));
    RegionBank::load(&path).map(Some)
}

pub fn eval_config(a: &EvalArgs) -> EvalConfig {
    EvalConfig {
        episodes: a.episodes,
        seeds: a.seeds.clone(),
        shots: a.shots,
        rectify_fg: a.rectify_fg,
        rectify_bg: a.rectify_bg,
        use_ema: !a.no_ema,
        ..EvalConfig::default()
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = pipeline::load_data(&a.data)?;
    let fold = data.fold(a.fold)?;
    let bank = load_bank(a.bank.as_deref(), &a.checkpoint, a.rectify_fg)?;
    let inputs = EvalInputs {
        checkpoint: &ck,
        bank: bank.as_ref(),
        deterministic: deterministic(),
    };
    let report = run_eval(&inputs, &data, &fold, &eval_config(a))?;
    report.save_json(&a.out)?;
    let text = report.render_text();
    let txt = a.out.with_extension("txt");
    std::fs::write(&txt, &text).map_err(|e| Error::io(&txt, e))?;
    print!("{text}");
    Ok(())
}

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let data = pipeline::load_data(&a.data)?;
    if let Some(dir) = &a.pseudo {
        let manifest = miner::Manifest::read(dir)?;
        for e in manifest.entries.iter().filter(|e| e.ok && e.source == miner::EntrySource::Labeled).take(a.count) {
            let sample = data.get(&e.id).ok_or_else(|| Error::IdMismatch(format!("`{}` not in the dataset", e.id)))?;
            let labels = manifest.load_mask(dir, e)?;
            let panel = viz::pseudo_panel(&sample.pixels, &labels, manifest.k);
            dataset::write_rgb(&a.out.join(format!("pseudo_{}.png", e.id)), &panel)?;
        }
        return Ok(());
    }
    let ck_path = a
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("visualize needs --checkpoint or --pseudo".into()))?;
    let ck = Checkpoint::load(ck_path)?;
    let fold = data.fold(a.fold)?;
    let (net, weights) = ck.inference(ck.ema_params.is_some())?;
    let bank = load_bank(None, ck_path, a.rectify_fg)?;
    let global = if a.rectify_bg {
        Some(ck.global_bg().ok_or_else(|| Error::Config("checkpoint has no global background".into()))?)
    } else {
        None
    };
    let defaults = EvalConfig::default();
    let rect = Rectification {
        background: global.as_ref().map(|g| (g.view(), defaults.fusion_weight)),
        foreground: bank.as_ref().map(|b| (b, defaults.top_images, defaults.beta)),
    };
    let mut cache = FeatureCache::new(&net, &weights, &data);
    for (i, ep) in sample_episodes(&data, &fold, 1, a.count, a.seed, true)?.iter().enumerate() {
        let pred = predict_cached(&mut cache, &data, ep, defaults.sigma, &rect)?;
        let s = &data.samples()[ep.support[0].sample];
        let q = &data.samples()[ep.query.sample];
        let panel = viz::episode_panel(&s.pixels, &ep.support[0].mask, &q.pixels, &ep.query.mask, &pred.mask);
        dataset::write_rgb(&a.out.join(format!("episode_{i:03}_class{}.png", ep.class_id)), &panel)?;
    }
    Ok(())
}
