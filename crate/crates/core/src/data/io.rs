//! Directory layout: `<root>/<split>/{images,masks}/<id>.png`, images as
//! 8-bit grayscale, masks as 8-bit class ids.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    preprocess_with, ClaheParams, DomainDatasets, Image, LabeledSample, Mask, PreprocessConfig,
    UnlabeledSample,
};
use crate::nn::resize_nearest;
use crate::{DomainId, Error, Result};

/// Split directory names in the order S_L, T_L, T_U, validation, test.
pub const SPLIT_DIRS: [&str; 5] = [
    "source",
    "target_labeled",
    "target_unlabeled",
    "validation",
    "test",
];

const META_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub classes: usize,
    /// Use only the green channel of colour images.
    #[serde(default)]
    pub green_channel: bool,
    #[serde(default)]
    pub clahe: bool,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Square output side; `None` keeps the stored size.
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default = "one")]
    pub spacing: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    classes: usize,
    spacing: f64,
}

fn write_gray(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([img[[y as usize, x as usize]]]));
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn quantize(img: &Image) -> Array2<u8> {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Writes every split of `ds` under `root`. Unlabeled samples that carry a
/// reference mask get it written to their `masks/` directory.
pub fn export_dataset(ds: &DomainDatasets, root: &Path) -> Result<usize> {
    let mut written = 0;
    let labeled_splits: [(&str, &[LabeledSample]); 4] = [
        (SPLIT_DIRS[0], &ds.source_labeled),
        (SPLIT_DIRS[1], &ds.target_labeled),
        (SPLIT_DIRS[3], &ds.validation),
        (SPLIT_DIRS[4], &ds.test),
    ];
    for (dir, samples) in labeled_splits {
        let (img_dir, mask_dir) = make_dirs(root, dir)?;
        for s in samples {
            write_gray(&img_dir.join(format!("{}.png", s.id)), &quantize(&s.image))?;
            write_gray(&mask_dir.join(format!("{}.png", s.id)), &s.mask)?;
            written += 1;
        }
    }
    let (img_dir, mask_dir) = make_dirs(root, SPLIT_DIRS[2])?;
    for s in &ds.target_unlabeled {
        write_gray(&img_dir.join(format!("{}.png", s.id)), &quantize(&s.image))?;
        if let Some(m) = &s.reference_mask {
            write_gray(&mask_dir.join(format!("{}.png", s.id)), m)?;
        }
        written += 1;
    }
    let meta = serde_json::to_string_pretty(&Meta {
        classes: ds.classes,
        spacing: ds.spacing,
    })?;
    let meta_path = root.join(META_FILE);
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))?;
    Ok(written)
}

fn make_dirs(root: &Path, split: &str) -> Result<(PathBuf, PathBuf)> {
    let img = root.join(split).join("images");
    let mask = root.join(split).join("masks");
    for d in [&img, &mask] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.clone(), e))?;
    }
    Ok((img, mask))
}

fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Input(format!("bad file name {}", path.display())))?
                .to_string();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_image(path: &Path, cfg: &IngestConfig) -> Result<Image> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = if cfg.green_channel {
        let rgb = img.to_rgb8();
        Array2::from_shape_fn((h, w), |(y, x)| rgb.get_pixel(x as u32, y as u32)[1] as f64)
    } else {
        let g = img.to_luma8();
        Array2::from_shape_fn((h, w), |(y, x)| g.get_pixel(x as u32, y as u32)[0] as f64)
    };
    let out_size = cfg.size.map_or((h, w), |s| (s, s));
    preprocess_with(
        raw.view(),
        &PreprocessConfig {
            clahe: cfg.clahe.then(ClaheParams::default),
            gamma: cfg.gamma,
            out_size,
        },
    )
    .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn load_mask(path: &Path, cfg: &IngestConfig) -> Result<Mask> {
    let g = open(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let m = Array2::from_shape_fn((h, w), |(y, x)| g.get_pixel(x as u32, y as u32)[0]);
    Ok(match cfg.size {
        Some(s) => resize_nearest(m.view(), (s, s)),
        None => m,
    })
}

fn load_labeled(root: &Path, split: &str, domain: DomainId, cfg: &IngestConfig) -> Result<Vec<LabeledSample>> {
    let mask_dir = root.join(split).join("masks");
    list_pngs(&root.join(split).join("images"))?
        .into_iter()
        .map(|(id, path)| {
            let mask_path = mask_dir.join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(Error::Input(format!("missing mask {}", mask_path.display())));
            }
            LabeledSample::new(
                load_image(&path, cfg)?,
                load_mask(&mask_path, cfg)?,
                domain,
                id,
                cfg.classes,
            )
        })
        .collect()
}

/// Reads a dataset directory. A `dataset.json` next to the splits, when
/// present, supplies the class count and pixel spacing.
pub fn ingest_dataset(root: &Path, cfg: &IngestConfig) -> Result<DomainDatasets> {
    if !root.is_dir() {
        return Err(Error::Input(format!("dataset directory {} not found", root.display())));
    }
    let mut cfg = cfg.clone();
    let meta_path = root.join(META_FILE);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        cfg.classes = meta.classes;
        cfg.spacing = meta.spacing;
    }
    let unl_dir = root.join(SPLIT_DIRS[2]);
    let target_unlabeled = list_pngs(&unl_dir.join("images"))?
        .into_iter()
        .map(|(id, path)| {
            let mask_path = unl_dir.join("masks").join(format!("{id}.png"));
            let reference_mask = if mask_path.exists() {
                Some(load_mask(&mask_path, &cfg)?)
            } else {
                None
            };
            Ok(UnlabeledSample {
                image: load_image(&path, &cfg)?,
                domain: DomainId::Target,
                id,
                reference_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainDatasets {
        source_labeled: load_labeled(root, SPLIT_DIRS[0], DomainId::Source, &cfg)?,
        target_labeled: load_labeled(root, SPLIT_DIRS[1], DomainId::Target, &cfg)?,
        target_unlabeled,
        validation: load_labeled(root, SPLIT_DIRS[3], DomainId::Target, &cfg)?,
        test: load_labeled(root, SPLIT_DIRS[4], DomainId::Target, &cfg)?,
        classes: cfg.classes,
        spacing: cfg.spacing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_domains, SyntheticSpec};

    #[test]
    fn export_then_ingest_preserves_masks_and_counts() {
        let mut spec = SyntheticSpec::desk_circular(3);
        spec.counts = crate::data::SplitCounts {
            source_labeled: 3,
            target_labeled: 2,
            target_unlabeled: 2,
            validation: 1,
            test: 2,
        };
        let ds = generate_synthetic_domains(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(export_dataset(&ds, dir.path()).unwrap(), 10);
        let cfg = IngestConfig {
            classes: 2,
            green_channel: false,
            clahe: false,
            gamma: 1.0,
            size: None,
            spacing: 0.5,
        };
        let back = ingest_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(back.classes, 3);
        assert_eq!(back.image_count(), 10);
        for (a, b) in ds.test.iter().zip(&back.test) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert!(b.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(back.target_unlabeled.iter().all(|u| u.reference_mask.is_some()));
    }

    #[test]
    fn missing_directory_is_an_input_error() {
        let cfg = IngestConfig {
            classes: 2,
            green_channel: true,
            clahe: true,
            gamma: 1.0,
            size: Some(32),
            spacing: 1.0,
        };
        assert!(matches!(
            ingest_dataset(Path::new("/definitely/not/here"), &cfg),
            Err(Error::Input(_))
        ));
    }
}
