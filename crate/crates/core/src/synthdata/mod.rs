//! Synthetic part-annotated image dataset.
//!
//! [`generate`] renders a dataset in memory; [`SyntheticDataset::write`] stores it as
//! a JSON manifest plus 8-bit PNGs and [`Dataset::load`] reads it back.

mod generator;
mod manifest;
pub mod render;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub use generator::{class_code, GeneratorConfig, ATTRIBUTES, PART_NAMES};
pub use manifest::{DatasetManifest, ItemRecord, PartRecord, SplitRecord, MANIFEST_VERSION};
pub use render::Point;

/// Pixel statistics used to normalize network inputs.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

/// One annotated part. `location` is `None` for occluded parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartAnnotation {
    pub id: usize,
    pub location: Option<Point>,
}

impl PartAnnotation {
    pub fn visible(&self) -> bool {
        self.location.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    /// `[3, H, W]` in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub parts: Vec<PartAnnotation>,
    pub split: Split,
}

impl AnnotatedImage {
    pub(crate) fn from_u8(
        data: &[u8],
        size: usize,
        label: usize,
        parts: Vec<PartAnnotation>,
        split: Split,
    ) -> Result<Self> {
        let pixels = Tensor::new(&[3, size, size], data.iter().map(|&v| f64::from(v) / 255.0).collect())?;
        Ok(Self { pixels, label, parts, split })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// The network input: pixels shifted and scaled by [`PIXEL_MEAN`] / [`PIXEL_STD`].
    pub fn normalized(&self) -> Tensor {
        let mut t = self.pixels.clone();
        t.data_mut().iter_mut().for_each(|v| *v = (*v - PIXEL_MEAN) / PIXEL_STD);
        t
    }
}

/// Render a dataset in memory.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticDataset> {
    let rendered = generator::generate_images(config)?;
    let (images, encoded): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let dataset = Dataset::from_images(config.classes, config.parts, config.image_size, images)?;
    Ok(SyntheticDataset { config: config.clone(), dataset, raw: encoded })
}

/// A freshly generated dataset together with its raw 8-bit pixels.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: GeneratorConfig,
    pub dataset: Dataset,
    raw: Vec<Vec<u8>>,
}

impl SyntheticDataset {
    /// Write `manifest.json` and `train/*.png`, `test/*.png` under `dir`.
    pub fn write(&self, dir: &std::path::Path) -> Result<DatasetManifest> {
        manifest::write(self, dir)
    }

    pub(crate) fn raw(&self) -> &[Vec<u8>] {
        &self.raw
    }
}

/// Loaded, in-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_parts: usize,
    pub image_size: usize,
    train: Vec<AnnotatedImage>,
    test: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn from_images(
        num_classes: usize,
        num_parts: usize,
        image_size: usize,
        images: Vec<AnnotatedImage>,
    ) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for img in images {
            if img.label >= num_classes {
                return Err(Error::InvalidConfig(format!("label {} with only {num_classes} classes", img.label)));
            }
            if img.pixels.shape() != [3, image_size, image_size] {
                return Err(Error::shape(format!(
                    "image of shape {:?} in a {image_size}px dataset",
                    img.pixels.shape()
                )));
            }
            match img.split {
                Split::Train => train.push(img),
                Split::Test => test.push(img),
            }
        }
        Ok(Self { num_classes, num_parts, image_size, train, test })
    }

    /// Read and validate a manifest and every image it references.
    pub fn load(manifest_path: &std::path::Path) -> Result<Self> {
        manifest::load(manifest_path)
    }

    pub fn split(&self, split: Split) -> &[AnnotatedImage] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[AnnotatedImage] {
        &self.train
    }

    pub fn test(&self) -> &[AnnotatedImage] {
        &self.test
    }

    /// Indices into `split` of the images labelled `class`; empty if there are none.
    pub fn class_indices(&self, split: Split, class: usize) -> Vec<usize> {
        self.split(split).iter().enumerate().filter(|(_, img)| img.label == class).map(|(i, _)| i).collect()
    }

    /// Seeded permutation of `split` for one epoch.
    pub fn shuffled(&self, split: Split, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.split(split).len()).collect();
        let mut rng = rng::stream(rng::split(seed, epoch as u64), rng::streams::SHUFFLE);
        order.shuffle(&mut rng);
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            classes: 3,
            parts: 4,
            train_per_class: 2,
            test_per_class: 3,
            image_size: 32,
            seed: 11,
            occlusion_prob: 0.3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.raw, b.raw);
        let c = generate(&GeneratorConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.raw, c.raw);
    }

    #[test]
    fn class_index_partitions_test_split() {
        let d = generate(&small()).unwrap().dataset;
        let mut all: Vec<usize> = (0..3).flat_map(|k| d.class_indices(Split::Test, k)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.test().len()).collect::<Vec<_>>());
        for k in 0..3 {
            assert_eq!(d.class_indices(Split::Test, k).len(), 3);
        }
        assert!(d.class_indices(Split::Test, 7).is_empty());
    }

    #[test]
    fn visible_parts_inside_bounds() {
        let d = generate(&small()).unwrap().dataset;
        for img in d.train().iter().chain(d.test()) {
            assert_eq!(img.parts.len(), 4);
            for p in img.parts.iter().filter_map(|p| p.location) {
                assert!(p.x >= 0.0 && p.x < 32.0 && p.y >= 0.0 && p.y < 32.0);
            }
        }
    }

    #[test]
    fn shuffle_depends_on_epoch_only_through_seed() {
        let d = generate(&small()).unwrap().dataset;
        assert_eq!(d.shuffled(Split::Train, 1, 0), d.shuffled(Split::Train, 1, 0));
        assert_ne!(d.shuffled(Split::Train, 1, 0), d.shuffled(Split::Train, 1, 1));
    }
}
