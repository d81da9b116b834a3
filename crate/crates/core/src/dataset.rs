//! Image/mask samples, class partitions and the on-disk dataset layout.
//!
//! A dataset root looks like
//!
//! ```text
//! root/images/<id>.png   RGB (or .jpg)
//! root/masks/<id>.png    8-bit single channel, pixel value = class id
//! ```
//!
//! Class id 0 is background and [`IGNORE`] marks pixels excluded from every
//! loss and metric. The class universe and fold partitions come from a
//! separate split file (see [`SplitConfig`]).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::config::{parse_id_list, KeyValues};
use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const IGNORE: u8 = 255;

/// Name of the split file `synth` writes next to `images/` and `masks/`.
pub const SPLIT_FILE: &str = "splits.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// H×W×3.
    pub pixels: Array3<u8>,
    /// H×W class ids.
    pub mask: Array2<u8>,
    pub class_set: BTreeSet<u8>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array3<u8>, mask: Array2<u8>) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image `{id}` has {c} channels")));
        }
        if mask.dim() != (h, w) {
            let (mh, mw) = mask.dim();
            return Err(Error::MaskShape {
                id,
                img_h: h,
                img_w: w,
                mask_h: mh,
                mask_w: mw,
            });
        }
        let class_set = classes_in(&mask);
        Ok(Self {
            id,
            pixels,
            mask,
            class_set,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn has_background(&self) -> bool {
        self.mask.iter().any(|&v| v == BACKGROUND)
    }
}

pub fn classes_in(mask: &Array2<u8>) -> BTreeSet<u8> {
    mask.iter()
        .copied()
        .filter(|&v| v != BACKGROUND && v != IGNORE)
        .collect()
}

/// Number of folds and the test classes of each. Train classes are the
/// complement within the universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitConfig {
    pub test_classes: Vec<Vec<u8>>,
}

impl SplitConfig {
    /// Distributes `classes` evenly over `num_folds` contiguous groups.
    pub fn even(classes: &[u8], num_folds: usize) -> Result<Self> {
        if num_folds == 0 || num_folds > classes.len() {
            return Err(Error::SplitConfig(format!(
                "{num_folds} folds for {} classes",
                classes.len()
            )));
        }
        let mut test_classes = vec![Vec::new(); num_folds];
        let base = classes.len() / num_folds;
        let extra = classes.len() % num_folds;
        let mut it = classes.iter().copied();
        for (f, group) in test_classes.iter_mut().enumerate() {
            let n = base + usize::from(f < extra);
            group.extend(it.by_ref().take(n));
        }
        Ok(Self { test_classes })
    }

    pub fn num_folds(&self) -> usize {
        self.test_classes.len()
    }

    pub fn universe(&self) -> BTreeSet<u8> {
        self.test_classes.iter().flatten().copied().collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let num_folds: usize = kv
            .get("num_folds")
            .ok_or_else(|| Error::SplitConfig("missing `num_folds`".into()))?
            .parse()
            .map_err(|_| Error::SplitConfig("`num_folds` is not an integer".into()))?;
        if num_folds == 0 {
            return Err(Error::SplitConfig("`num_folds` must be positive".into()));
        }
        let mut test_classes = Vec::with_capacity(num_folds);
        for f in 0..num_folds {
            let key = format!("fold{f}");
            let raw = kv
                .get(&key)
                .ok_or_else(|| Error::SplitConfig(format!("missing `{key}`")))?;
            let ids = parse_id_list(raw)?;
            if ids.is_empty() {
                return Err(Error::SplitConfig(format!("`{key}` lists no classes")));
            }
            test_classes.push(ids);
        }
        let mut seen = BTreeSet::new();
        for id in test_classes.iter().flatten() {
            if *id == BACKGROUND || *id == IGNORE {
                return Err(Error::SplitConfig(format!("reserved id {id} used as class")));
            }
            if !seen.insert(*id) {
                return Err(Error::SplitConfig(format!("class {id} in more than one fold")));
            }
        }
        Ok(Self { test_classes })
    }

    pub fn render(&self) -> String {
        let mut kv = KeyValues::new();
        kv.set("num_folds", self.num_folds());
        for (f, ids) in self.test_classes.iter().enumerate() {
            let list: Vec<String> = ids.iter().map(u8::to_string).collect();
            kv.set(&format!("fold{f}"), list.join(","));
        }
        kv.render()
    }

    pub fn fold(&self, fold_index: usize) -> Result<FoldSplit> {
        let test = self
            .test_classes
            .get(fold_index)
            .ok_or(Error::FoldOutOfRange {
                fold: fold_index,
                num_folds: self.num_folds(),
            })?;
        let test_classes: BTreeSet<u8> = test.iter().copied().collect();
        let train_classes = self
            .universe()
            .difference(&test_classes)
            .copied()
            .collect();
        Ok(FoldSplit {
            fold_index,
            train_classes,
            test_classes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_classes: BTreeSet<u8>,
    pub test_classes: BTreeSet<u8>,
}

impl FoldSplit {
    pub fn classes(&self, use_test_classes: bool) -> &BTreeSet<u8> {
        if use_test_classes {
            &self.test_classes
        } else {
            &self.train_classes
        }
    }
}

/// Read-only collection of samples with a class → sample inverted index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: Option<PathBuf>,
    samples: Vec<ImageSample>,
    universe: BTreeSet<u8>,
    splits: SplitConfig,
    index: BTreeMap<u8, Vec<usize>>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<ImageSample>, splits: SplitConfig) -> Result<Self> {
        let universe = splits.universe();
        for s in &samples {
            if let Some(&value) = s
                .mask
                .iter()
                .find(|&&v| v != BACKGROUND && v != IGNORE && !universe.contains(&v))
            {
                return Err(Error::MaskValueOutsideUniverse {
                    id: s.id.clone(),
                    value,
                });
            }
        }
        let mut index: BTreeMap<u8, Vec<usize>> =
            universe.iter().map(|&c| (c, Vec::new())).collect();
        for (i, s) in samples.iter().enumerate() {
            for c in &s.class_set {
                index.entry(*c).or_default().push(i);
            }
        }
        Ok(Self {
            root: None,
            samples,
            universe,
            splits,
            index,
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn universe(&self) -> &BTreeSet<u8> {
        &self.universe
    }

    pub fn splits(&self) -> &SplitConfig {
        &self.splits
    }

    pub fn fold(&self, fold_index: usize) -> Result<FoldSplit> {
        self.splits.fold(fold_index)
    }

    /// Sample indices whose mask contains `class_id`.
    pub fn containing(&self, class_id: u8) -> &[usize] {
        self.index.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Training-time view of a fold: images that contain at least one train
    /// class, with every test-class pixel relabelled as background.
    pub fn training_view(&self, fold: &FoldSplit) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .filter(|s| s.class_set.iter().any(|c| fold.train_classes.contains(c)))
            .map(|s| {
                let mask = s.mask.mapv(|v| {
                    if fold.test_classes.contains(&v) {
                        BACKGROUND
                    } else {
                        v
                    }
                });
                ImageSample::new(s.id.clone(), s.pixels.clone(), mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut view = Dataset::from_samples(samples, self.splits.clone())?;
        view.root = self.root.clone();
        Ok(view)
    }
}

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_rgb(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let data: Vec<u8> = pixels.iter().copied().collect();
    image::save_buffer(path, &data, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::image(path, e))
}

pub fn write_gray(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let data: Vec<u8> = values.iter().copied().collect();
    image::save_buffer(path, &data, w as u32, h as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::image(path, e))
}

/// Lists `(id, path)` for every `.png`/`.jpg`/`.jpeg` file in `dir`, sorted by id.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dataset(root: &Path, split_config: &Path) -> Result<Dataset> {
    let split_text =
        std::fs::read_to_string(split_config).map_err(|e| Error::io(split_config, e))?;
    let splits = SplitConfig::parse(&split_text)?;
    let image_dir = root.join("images");
    let images = if image_dir.is_dir() {
        list_images(&image_dir)?
    } else {
        Vec::new()
    };
    if images.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    let universe = splits.universe();
    let mut samples = Vec::with_capacity(images.len());
    for (id, path) in images {
        let mask_path = root.join("masks").join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::MissingMask(id));
        }
        let pixels = read_rgb(&path)?;
        let mask = read_gray(&mask_path)?;
        if let Some(&value) = mask
            .iter()
            .find(|&&v| v != BACKGROUND && v != IGNORE && !universe.contains(&v))
        {
            return Err(Error::MaskValueOutsideUniverse { id, value });
        }
        samples.push(ImageSample::new(id, pixels, mask)?);
    }
    let mut ds = Dataset::from_samples(samples, splits)?;
    ds.root = Some(root.to_path_buf());
    Ok(ds)
}

/// Loads `root` using the split file stored inside it.
pub fn load_dataset_dir(root: &Path) -> Result<Dataset> {
    load_dataset(root, &root.join(SPLIT_FILE))
}
