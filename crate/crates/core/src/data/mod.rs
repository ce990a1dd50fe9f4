//! Two-domain datasets: synthetic generation, directory ingestion,
//! preprocessing, augmentation and mixed-domain batch composition.

mod augment;
mod batch;
mod io;
mod preprocess;
mod synthetic;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment, flip_horizontal, flip_vertical, AugmentParams};
pub use batch::{compose_batch, SampleBatch};
pub use io::{export_dataset, ingest_dataset, IngestConfig, SPLIT_DIRS};
pub use preprocess::{clahe, preprocess, preprocess_with, ClaheParams, PreprocessConfig};
pub use synthetic::{
    generate_synthetic_domains, SplitCounts, StructureKind, SyntheticSpec, SyntheticStyle,
};

use crate::{DomainId, Error, Result};

/// Intensity image with values in `[0, 1]`.
pub type Image = Array2<f64>;
/// Per-pixel class ids.
pub type Mask = Array2<u8>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image: Image,
    pub mask: Mask,
    pub domain: DomainId,
    pub id: String,
}

impl LabeledSample {
    pub fn new(
        image: Image,
        mask: Mask,
        domain: DomainId,
        id: impl Into<String>,
        classes: usize,
    ) -> Result<Self> {
        let id = id.into();
        if image.dim() != mask.dim() {
            return Err(Error::Input(format!(
                "sample {id}: image {:?} and mask {:?} differ in size",
                image.dim(),
                mask.dim()
            )));
        }
        if let Some(&bad) = mask.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::Input(format!(
                "sample {id}: mask class {bad} >= class count {classes}"
            )));
        }
        Ok(Self {
            image,
            mask,
            domain,
            id,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSample {
    pub image: Image,
    pub domain: DomainId,
    pub id: String,
    /// Ground truth withheld from training. Only used to re-partition the
    /// target training pool at a different annotation ratio.
    pub reference_mask: Option<Mask>,
}

impl UnlabeledSample {
    pub fn new(image: Image, id: impl Into<String>) -> Self {
        Self {
            image,
            domain: DomainId::Target,
            id: id.into(),
            reference_mask: None,
        }
    }
}

/// Per-batch quotas drawn from each pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub n_source_labeled: usize,
    pub n_target_labeled: usize,
    pub n_target_unlabeled: usize,
}

impl BatchLayout {
    pub const fn new(source: usize, target_labeled: usize, target_unlabeled: usize) -> Self {
        Self {
            n_source_labeled: source,
            n_target_labeled: target_labeled,
            n_target_unlabeled: target_unlabeled,
        }
    }

    /// Vessel-task layout: 8/4/4.
    pub const VESSEL: BatchLayout = BatchLayout::new(8, 4, 4);
    /// Circular-structure layout: 12/6/6.
    pub const CIRCULAR: BatchLayout = BatchLayout::new(12, 6, 6);

    pub fn total(&self) -> usize {
        self.n_source_labeled + self.n_target_labeled + self.n_target_unlabeled
    }
}

/// Every split of a two-domain experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDatasets {
    pub source_labeled: Vec<LabeledSample>,
    pub target_labeled: Vec<LabeledSample>,
    pub target_unlabeled: Vec<UnlabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub classes: usize,
    /// Physical pixel size in mm, used for surface distances.
    pub spacing: f64,
}

impl DomainDatasets {
    pub fn image_count(&self) -> usize {
        self.source_labeled.len()
            + self.target_labeled.len()
            + self.target_unlabeled.len()
            + self.validation.len()
            + self.test.len()
    }

    /// SHA-256 over every split's ids, pixels and masks.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, split) in [
            ("source", &self.source_labeled),
            ("target_labeled", &self.target_labeled),
        ] {
            h.update(name.as_bytes());
            hash_labeled(&mut h, split);
        }
        h.update(b"target_unlabeled");
        for s in &self.target_unlabeled {
            h.update(s.id.as_bytes());
            hash_image(&mut h, &s.image);
        }
        h.update(b"validation");
        hash_labeled(&mut h, &self.validation);
        h.update(b"test");
        hash_labeled(&mut h, &self.test);
        hex(&h.finalize())
    }

    /// SHA-256 of the test split alone; rows evaluated on the same test set carry the same value.
    pub fn test_set_hash(&self) -> String {
        samples_hash(&self.test)
    }

    /// Redistributes the target training pool (labeled plus unlabeled with
    /// reference masks) so that `round(ratio * pool)` images carry labels.
    /// The split is a deterministic function of `seed`.
    pub fn with_annotation_ratio(&self, ratio: f64, seed: u64) -> Result<DomainDatasets> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!(
                "annotation ratio must lie in (0, 1], got {ratio}"
            )));
        }
        let mut pool: Vec<LabeledSample> = self.target_labeled.clone();
        for u in &self.target_unlabeled {
            let mask = u.reference_mask.clone().ok_or_else(|| {
                Error::Config(format!(
                    "unlabeled sample {} has no reference mask; cannot re-partition",
                    u.id
                ))
            })?;
            pool.push(LabeledSample {
                image: u.image.clone(),
                mask,
                domain: DomainId::Target,
                id: u.id.clone(),
            });
        }
        let n_labeled = (ratio * pool.len() as f64).round() as usize;
        if n_labeled == 0 {
            return Err(Error::Config(format!(
                "ratio {ratio} of {} target images yields no labeled image",
                pool.len()
            )));
        }
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        let unlabeled = pool.split_off(n_labeled);
        Ok(DomainDatasets {
            target_labeled: pool,
            target_unlabeled: unlabeled
                .into_iter()
                .map(|s| UnlabeledSample {
                    image: s.image,
                    domain: DomainId::Target,
                    id: s.id,
                    reference_mask: Some(s.mask),
                })
                .collect(),
            ..self.clone()
        })
    }
}

pub(crate) fn samples_hash(samples: &[LabeledSample]) -> String {
    let mut h = Sha256::new();
    hash_labeled(&mut h, samples);
    hex(&h.finalize())
}

fn hash_labeled(h: &mut Sha256, samples: &[LabeledSample]) {
    for s in samples {
        h.update(s.id.as_bytes());
        hash_image(h, &s.image);
        h.update(s.mask.as_standard_layout().as_slice().expect("contiguous"));
    }
}

fn hash_image(h: &mut Sha256, img: &Image) {
    let (rows, cols) = img.dim();
    h.update((rows as u64).to_le_bytes());
    h.update((cols as u64).to_le_bytes());
    for v in img.iter() {
        h.update(v.to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_sample_validates_shape_and_classes() {
        let img = Image::zeros((4, 4));
        assert!(LabeledSample::new(img.clone(), Mask::zeros((4, 3)), DomainId::Source, "a", 2).is_err());
        let mut m = Mask::zeros((4, 4));
        m[[1, 1]] = 2;
        assert!(LabeledSample::new(img.clone(), m.clone(), DomainId::Source, "a", 2).is_err());
        assert!(LabeledSample::new(img, m, DomainId::Source, "a", 3).is_ok());
    }

    #[test]
    fn paper_layouts_have_expected_sizes() {
        assert_eq!(BatchLayout::VESSEL.total(), 16);
        assert_eq!(BatchLayout::CIRCULAR.total(), 24);
    }
}
