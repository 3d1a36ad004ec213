//! Synthetic texture-diagnostic and shape-diagnostic datasets, their
//! on-disk layout and the train/eval preprocessing pipelines.

mod preprocess;
mod shape;
mod texture;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use preprocess::{crop, flip_horizontal, preprocess_eval, preprocess_train, PreprocessConfig};
pub use shape::{class_layouts, render_shape, Layout, Part, GRID};
pub use texture::{render_texture, texture_class, TextureClass};

use crate::error::{EscError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Texture,
    Shape,
}

impl Regime {
    /// Pixel level (in `[0, 1]`) that normalizes to zero.
    pub fn background(self) -> f32 {
        match self {
            Regime::Texture => 0.5,
            Regime::Shape => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Texture => "texture",
            Regime::Shape => "shape",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = EscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "texture" => Ok(Regime::Texture),
            "shape" => Ok(Regime::Shape),
            other => Err(EscError::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub class: usize,
    pub split: Split,
    /// Generation index; train and test use disjoint index ranges.
    pub index: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub regime: Regime,
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
    pub background: f32,
    pub seed: u64,
    /// Part placement per class (shape regime only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layouts: Option<Vec<Layout>>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Per-class sample counts in one split.
    pub fn class_counts(&self, split: Split) -> BTreeMap<usize, usize> {
        let mut m: BTreeMap<usize, usize> = self.classes.iter().map(|c| (*c, 0)).collect();
        for s in self.split(split) {
            *m.entry(s.class).or_default() += 1;
        }
        m
    }

    /// Library parts (with slots) used by a sample's class.
    pub fn parts_of(&self, class: usize) -> Option<Vec<(Part, usize)>> {
        self.layouts.as_ref().and_then(|l| l.get(class)).map(Layout::parts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(EscError::Data(format!("unsupported manifest schema {}", self.schema_version)));
        }
        for split in [Split::Train, Split::Test] {
            let counts = self.class_counts(split);
            let mut values = counts.values();
            if let Some(first) = values.next() {
                if values.any(|v| v != first) {
                    return Err(EscError::Data(format!(
                        "unequal per-class counts in {} split: {counts:?}",
                        split.name()
                    )));
                }
            }
            if counts.len() != self.classes.len() {
                return Err(EscError::Data("sample with unknown class".into()));
            }
        }
        Ok(())
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig::for_input(self.image_size, self.background)
    }
}

/// Generation request for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub regime: Regime,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(EscError::Config("need at least two classes".into()));
        }
        if self.size < 8 {
            return Err(EscError::Config("image size must be at least 8".into()));
        }
        Ok(())
    }
}

/// 8-bit interleaved image as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn from_unit_gray(size: usize, values: &[f32]) -> Self {
        Self {
            height: size,
            width: size,
            channels: 1,
            data: values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(match img {
            image::DynamicImage::ImageLuma8(g) => Self {
                height: h,
                width: w,
                channels: 1,
                data: g.into_raw(),
            },
            other => Self {
                height: h,
                width: w,
                channels: 3,
                data: other.to_rgb8().into_raw(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.clone())
                .ok_or_else(|| EscError::Data("bad gray buffer".into()))?
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, self.data.clone())
                .ok_or_else(|| EscError::Data("bad rgb buffer".into()))?
                .save(path)?,
            c => return Err(EscError::Data(format!("unsupported channel count {c}"))),
        }
        Ok(())
    }

    /// Crop of rows `y0..y0+h`, columns `x0..x0+w`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }
}

fn sample_seed(root: u64, class: usize, index: usize) -> u64 {
    rng::derive_seed(root, &format!("sample/{class}/{index}"))
}

/// Renders one sample of a class.
pub fn render_sample(regime: Regime, layouts: Option<&[Layout]>, class: usize, size: usize, seed: u64) -> RawImage {
    let values = match (regime, layouts) {
        (Regime::Shape, Some(l)) => render_shape(&l[class], size, seed),
        (Regime::Shape, None) => panic!("shape rendering needs class layouts"),
        (Regime::Texture, _) => render_texture(class, size, seed),
    };
    RawImage::from_unit_gray(size, &values)
}

/// Builds the manifest (with every per-sample seed) without touching disk.
pub fn plan_dataset(cfg: &GenConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let layouts = match cfg.regime {
        Regime::Shape => Some(class_layouts(cfg.classes, cfg.seed)?),
        Regime::Texture => None,
    };
    let mut samples = Vec::with_capacity(cfg.classes * (cfg.train_per_class + cfg.test_per_class));
    for (split, range) in [
        (Split::Train, 0..cfg.train_per_class),
        (Split::Test, cfg.train_per_class..cfg.train_per_class + cfg.test_per_class),
    ] {
        for class in 0..cfg.classes {
            for index in range.clone() {
                let id = format!("{class:03}_{index:05}");
                samples.push(SampleRecord {
                    path: format!("{}/class{class:03}/{id}.png", split.name()),
                    id,
                    class,
                    split,
                    index,
                    seed: sample_seed(cfg.seed, class, index),
                });
            }
        }
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        name: format!("{}-{}x{}-s{}", cfg.regime.name(), cfg.classes, cfg.train_per_class, cfg.seed),
        regime: cfg.regime,
        classes: (0..cfg.classes).collect(),
        class_names: (0..cfg.classes).map(|c| format!("class{c:03}")).collect(),
        image_size: cfg.size,
        channels: 1,
        background: cfg.regime.background(),
        seed: cfg.seed,
        layouts,
        samples,
    })
}

/// Renders every sample to `out/<split>/<class>/<id>.png` and writes
/// `out/manifest.json`.
pub fn generate_dataset(cfg: &GenConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = plan_dataset(cfg)?;
    for s in &manifest.samples {
        let path = out.join(&s.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        render_sample(manifest.regime, manifest.layouts.as_deref(), s.class, manifest.image_size, s.seed).save(&path)?;
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn generate_texture_dataset(classes: usize, per_class: usize, size: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    generate_dataset(
        &GenConfig {
            regime: Regime::Texture,
            classes,
            train_per_class: per_class,
            test_per_class: (per_class / 5).max(1),
            size,
            seed,
        },
        out,
    )
}

pub fn generate_shape_dataset(classes: usize, per_class: usize, size: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    generate_dataset(
        &GenConfig {
            regime: Regime::Shape,
            classes,
            train_per_class: per_class,
            test_per_class: (per_class / 5).max(1),
            size,
            seed,
        },
        out,
    )
}

/// Decoded images of one split.
#[derive(Clone, Debug, Default)]
pub struct SplitData {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub images: Vec<RawImage>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Eval-preprocessed `[N, C, S, S]` batch of the given indices.
    pub fn eval_batch(&self, indices: &[usize], cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
        let items = indices
            .iter()
            .map(|&i| cfg.eval(&self.images[i]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }
}

/// A manifest plus decoded images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE))
            .map_err(|e| EscError::Data(format!("cannot read manifest in {}: {e}", root.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let mut train = SplitData::default();
        let mut test = SplitData::default();
        for s in &manifest.samples {
            let img = RawImage::load(&root.join(&s.path))?;
            if img.height != manifest.image_size || img.width != manifest.image_size {
                return Err(EscError::Data(format!(
                    "{} is {}x{}, expected {}",
                    s.path, img.height, img.width, manifest.image_size
                )));
            }
            let dst = match s.split {
                Split::Train => &mut train,
                Split::Test => &mut test,
            };
            dst.ids.push(s.id.clone());
            dst.labels.push(s.class);
            dst.images.push(img);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            train,
            test,
        })
    }

    /// Renders a dataset straight into memory (no files).
    pub fn in_memory(cfg: &GenConfig) -> Result<Self> {
        let manifest = plan_dataset(cfg)?;
        let mut train = SplitData::default();
        let mut test = SplitData::default();
        for s in &manifest.samples {
            let img = render_sample(manifest.regime, manifest.layouts.as_deref(), s.class, manifest.image_size, s.seed);
            let dst = match s.split {
                Split::Train => &mut train,
                Split::Test => &mut test,
            };
            dst.ids.push(s.id.clone());
            dst.labels.push(s.class);
            dst.images.push(img);
        }
        Ok(Self {
            root: PathBuf::new(),
            manifest,
            train,
            test,
        })
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        self.manifest.preprocess_config()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(regime: Regime) -> GenConfig {
        GenConfig {
            regime,
            classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            size: 32,
            seed: 11,
        }
    }

    #[test]
    fn manifest_counts_and_disjoint_indices() {
        let m = plan_dataset(&cfg(Regime::Texture)).unwrap();
        assert_eq!(m.samples.len(), 18);
        assert!(m.class_counts(Split::Train).values().all(|c| *c == 4));
        assert!(m.class_counts(Split::Test).values().all(|c| *c == 2));
        let max_train = m.split(Split::Train).map(|s| s.index).max().unwrap();
        let min_test = m.split(Split::Test).map(|s| s.index).min().unwrap();
        assert!(max_train < min_test);
        m.validate().unwrap();
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&cfg(Regime::Shape), dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let mem = Dataset::in_memory(&cfg(Regime::Shape)).unwrap();
        assert_eq!(ds.train.images, mem.train.images);
        assert_eq!(ds.test.labels, mem.test.labels);
    }

    #[test]
    fn unequal_counts_fail_validation() {
        let mut m = plan_dataset(&cfg(Regime::Texture)).unwrap();
        m.samples.pop();
        assert!(m.validate().is_err());
    }

    #[test]
    fn too_few_classes() {
        let mut c = cfg(Regime::Shape);
        c.classes = 1;
        assert!(plan_dataset(&c).is_err());
    }
}
