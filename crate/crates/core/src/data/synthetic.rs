//! Desk-scale two-domain benchmark generator.
//!
//! Both domains draw the same structure family (branching tubes or a nested
//! disc/annulus) and differ only in how they are rendered: background level,
//! foreground contrast and polarity, texture, blur, noise, scale and clutter.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DomainDatasets, Image, LabeledSample, Mask, UnlabeledSample};
use crate::{DomainId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    /// Random branching curves, two classes (background, vessel).
    Tubular,
    /// Disc inside an annulus, three classes (background, inner disc, ring).
    Circular,
}

impl StructureKind {
    pub fn classes(self) -> usize {
        match self {
            StructureKind::Tubular => 2,
            StructureKind::Circular => 3,
        }
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tubular" => Ok(StructureKind::Tubular),
            "circular" => Ok(StructureKind::Circular),
            other => Err(Error::Parameter(format!(
                "unknown structure kind {other:?} (expected tubular or circular)"
            ))),
        }
    }
}

fn default_texture_amplitude() -> f64 {
    0.05
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyle {
    pub background_level: f64,
    /// Added to the background inside the structure; the sign selects
    /// bright-on-dark versus dark-on-bright.
    pub foreground_contrast: f64,
    pub noise_sigma: f64,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
    pub texture_seed: u64,
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f64,
    /// Structure-like blobs placed away from the labeled structure.
    #[serde(default)]
    pub distractors: usize,
    /// Multiplier on structure size.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl SyntheticStyle {
    fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter("noise_sigma must be >= 0".into()));
        }
        if !(self.texture_amplitude >= 0.0) {
            return Err(Error::Parameter("texture_amplitude must be >= 0".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Parameter("scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source_labeled: usize,
    pub target_labeled: usize,
    pub target_unlabeled: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.source_labeled + self.target_labeled + self.target_unlabeled + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: StructureKind,
    /// Side length of the square images.
    pub size: usize,
    pub source: SyntheticStyle,
    pub target: SyntheticStyle,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 64x64 disc/annulus task: clean high-contrast source, cluttered
    /// low-contrast target with smaller structures.
    pub fn desk_circular(seed: u64) -> Self {
        Self {
            kind: StructureKind::Circular,
            size: 64,
            source: SyntheticStyle {
                background_level: 0.15,
                foreground_contrast: 0.6,
                noise_sigma: 0.03,
                blur_radius: 0,
                texture_seed: 11,
                texture_amplitude: 0.03,
                distractors: 4,
                scale: 1.0,
            },
            target: SyntheticStyle {
                background_level: 0.5,
                foreground_contrast: 0.25,
                noise_sigma: 0.1,
                blur_radius: 1,
                texture_seed: 23,
                texture_amplitude: 0.1,
                distractors: 6,
                scale: 0.8,
            },
            counts: SplitCounts {
                source_labeled: 40,
                target_labeled: 4,
                target_unlabeled: 36,
                validation: 16,
                test: 40,
            },
            seed,
        }
    }

    /// 64x64 branching-tube task with opposite polarity across domains.
    pub fn desk_tubular(seed: u64) -> Self {
        Self {
            kind: StructureKind::Tubular,
            size: 64,
            source: SyntheticStyle {
                background_level: 0.2,
                foreground_contrast: 0.5,
                noise_sigma: 0.03,
                blur_radius: 0,
                texture_seed: 5,
                texture_amplitude: 0.03,
                distractors: 0,
                scale: 1.0,
            },
            target: SyntheticStyle {
                background_level: 0.7,
                foreground_contrast: -0.35,
                noise_sigma: 0.07,
                blur_radius: 1,
                texture_seed: 9,
                texture_amplitude: 0.08,
                distractors: 2,
                scale: 0.8,
            },
            counts: SplitCounts {
                source_labeled: 40,
                target_labeled: 4,
                target_unlabeled: 36,
                validation: 8,
                test: 20,
            },
            seed,
        }
    }
}

const SPLIT_SOURCE: u64 = 1;
const SPLIT_TL: u64 = 2;
const SPLIT_TU: u64 = 3;
const SPLIT_VAL: u64 = 4;
const SPLIT_TEST: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ (split << 48)) ^ index as u64))
}

/// Generates `(S_L, T_L, T_U, validation, test)` from `spec`. Every sample is
/// drawn from its own seeded stream, so output is a pure function of `spec`.
pub fn generate_synthetic_domains(spec: &SyntheticSpec) -> Result<DomainDatasets> {
    spec.source.validate()?;
    spec.target.validate()?;
    let c = &spec.counts;
    if [c.source_labeled, c.target_labeled, c.target_unlabeled, c.validation, c.test]
        .contains(&0)
    {
        return Err(Error::Config("every split count must be positive".into()));
    }
    if spec.source == spec.target {
        return Err(Error::Config(
            "source and target styles are identical; there is no domain gap".into(),
        ));
    }
    if spec.size < 16 {
        return Err(Error::Parameter("synthetic image size must be >= 16".into()));
    }
    let classes = spec.kind.classes();
    let labeled = |split: u64, prefix: &str, n: usize, domain: DomainId| -> Result<Vec<LabeledSample>> {
        let style = match domain {
            DomainId::Source => &spec.source,
            DomainId::Target => &spec.target,
        };
        (0..n)
            .map(|i| {
                let mut rng = sample_rng(spec.seed, split, i);
                let (image, mask) = render_sample(spec.kind, spec.size, style, &mut rng, split, i);
                LabeledSample::new(image, mask, domain, format!("{prefix}_{i:04}"), classes)
            })
            .collect()
    };
    let source_labeled = labeled(SPLIT_SOURCE, "src", c.source_labeled, DomainId::Source)?;
    let target_labeled = labeled(SPLIT_TL, "tl", c.target_labeled, DomainId::Target)?;
    let target_unlabeled = labeled(SPLIT_TU, "tu", c.target_unlabeled, DomainId::Target)?
        .into_iter()
        .map(|s| UnlabeledSample {
            image: s.image,
            domain: DomainId::Target,
            id: s.id,
            reference_mask: Some(s.mask),
        })
        .collect();
    let validation = labeled(SPLIT_VAL, "val", c.validation, DomainId::Target)?;
    let test = labeled(SPLIT_TEST, "test", c.test, DomainId::Target)?;
    Ok(DomainDatasets {
        source_labeled,
        target_labeled,
        target_unlabeled,
        validation,
        test,
        classes,
        spacing: 1.0,
    })
}

fn render_sample(
    kind: StructureKind,
    size: usize,
    style: &SyntheticStyle,
    rng: &mut ChaCha8Rng,
    split: u64,
    index: usize,
) -> (Image, Mask) {
    let (mask, exclusion) = match kind {
        StructureKind::Circular => circular_mask(size, style.scale, rng),
        StructureKind::Tubular => tubular_mask(size, style.scale, rng),
    };
    let bg = style.background_level;
    let c = style.foreground_contrast;
    let mut img = mask.mapv(|m| match (kind, m) {
        (_, 0) => bg,
        (StructureKind::Circular, 2) => bg + 0.5 * c,
        _ => bg + c,
    });
    add_distractors(&mut img, style, &exclusion, rng);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(splitmix(
        style.texture_seed ^ splitmix((split << 32) ^ index as u64),
    ));
    add_texture(&mut img, style.texture_amplitude, &mut tex_rng);
    if style.blur_radius > 0 {
        img = box_blur(&img, style.blur_radius);
    }
    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).expect("finite sigma");
        img.mapv_inplace(|v| v + normal.sample(rng));
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    (img, mask)
}

/// Nested ellipses sharing one metric, so the inner class can never touch
/// the background. Returns the mask and a keep-out disc `(cy, cx, r)`.
fn circular_mask(size: usize, scale: f64, rng: &mut ChaCha8Rng) -> (Mask, Vec<(f64, f64, f64)>) {
    let s = size as f64;
    let outer = (scale * s * rng.random_range(0.16..0.26)).clamp(4.0, 0.4 * s);
    let inner = (outer * rng.random_range(0.5..0.72)).min(outer - 2.0).max(1.0);
    let ratio: f64 = rng.random_range(0.85..1.15);
    let (ax, ay) = (ratio, 1.0 / ratio);
    let theta: f64 = rng.random_range(0.0..PI);
    let margin = outer * ratio.max(1.0 / ratio) + 2.0;
    let cy = rng.random_range(margin..(s - margin).max(margin + 1e-9));
    let cx = rng.random_range(margin..(s - margin).max(margin + 1e-9));
    let (sin, cos) = theta.sin_cos();
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let d = ((u / ax).powi(2) + (v / ay).powi(2)).sqrt();
        if d < inner {
            1
        } else if d < outer {
            2
        } else {
            0
        }
    });
    (mask, vec![(cy, cx, margin)])
}

fn tubular_mask(size: usize, scale: f64, rng: &mut ChaCha8Rng) -> (Mask, Vec<(f64, f64, f64)>) {
    let s = size as f64;
    let mut mask = Mask::zeros((size, size));
    let mut keep_out = Vec::new();
    let trees = rng.random_range(1..=2);
    for _ in 0..trees {
        // Enter from a random border point, heading roughly inwards.
        let side = rng.random_range(0..4);
        let t = rng.random_range(0.2 * s..0.8 * s);
        let (y, x, heading) = match side {
            0 => (0.0, t, PI / 2.0),
            1 => (s - 1.0, t, -PI / 2.0),
            2 => (t, 0.0, 0.0),
            _ => (t, s - 1.0, PI),
        };
        let heading = heading + rng.random_range(-0.4..0.4);
        let radius = scale * rng.random_range(1.2..2.2);
        let length = s * rng.random_range(0.7..1.1);
        grow_branch(&mut mask, &mut keep_out, rng, (y, x), heading, radius, length, 0);
    }
    (mask, keep_out)
}

#[allow(clippy::too_many_arguments)]
fn grow_branch(
    mask: &mut Mask,
    keep_out: &mut Vec<(f64, f64, f64)>,
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    mut heading: f64,
    radius: f64,
    length: f64,
    depth: usize,
) {
    let (h, w) = mask.dim();
    let wobble = Normal::new(0.0, 0.12).expect("finite");
    let (mut y, mut x) = start;
    let steps = length as usize;
    for step in 0..steps {
        stamp_disc(mask, y, x, radius);
        if step % 4 == 0 {
            keep_out.push((y, x, radius + 3.0));
        }
        if depth < 2 && step > 4 && rng.random_bool(0.03) {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let child = heading + sign * rng.random_range(0.4..0.9);
            let rest = (steps - step) as f64 * 0.6;
            grow_branch(mask, keep_out, rng, (y, x), child, (radius * 0.7).max(0.6), rest, depth + 1);
        }
        heading += wobble.sample(rng);
        y += heading.sin();
        x += heading.cos();
        if y < -2.0 || x < -2.0 || y > h as f64 + 1.0 || x > w as f64 + 1.0 {
            break;
        }
    }
}

fn stamp_disc(mask: &mut Mask, cy: f64, cx: f64, r: f64) {
    let (h, w) = mask.dim();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as isize).clamp(0, h as isize - 1) as usize;
    let x1 = ((cx + r).ceil() as isize).clamp(0, w as isize - 1) as usize;
    if cy + r < 0.0 || cx + r < 0.0 {
        return;
    }
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let d2 = (yy as f64 - cy).powi(2) + (xx as f64 - cx).powi(2);
            if d2 <= r * r {
                mask[[yy, xx]] = 1;
            }
        }
    }
}

/// Structure-intensity blobs outside every keep-out disc.
fn add_distractors(
    img: &mut Image,
    style: &SyntheticStyle,
    keep_out: &[(f64, f64, f64)],
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = img.dim();
    for _ in 0..style.distractors {
        for _attempt in 0..30 {
            let r = style.scale * rng.random_range(2.0..5.0);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let clear = keep_out
                .iter()
                .all(|&(ky, kx, kr)| ((cy - ky).powi(2) + (cx - kx).powi(2)).sqrt() > kr + r + 1.0);
            if !clear {
                continue;
            }
            let level = style.background_level + style.foreground_contrast * rng.random_range(0.5..1.0);
            let y0 = (cy - r).floor().max(0.0) as usize;
            let x0 = (cx - r).floor().max(0.0) as usize;
            let y1 = ((cy + r).ceil() as usize).min(h - 1);
            let x1 = ((cx + r).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                        img[[y, x]] = level;
                    }
                }
            }
            break;
        }
    }
}

/// Sum of three low-frequency plane waves.
fn add_texture(img: &mut Image, amplitude: f64, rng: &mut ChaCha8Rng) {
    if amplitude == 0.0 {
        return;
    }
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.random_range(0.02..0.1) * 2.0 * PI;
            let a: f64 = rng.random_range(0.0..PI);
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let k = amplitude / 3.0;
    for ((y, x), v) in img.indexed_iter_mut() {
        *v += k * waves
            .iter()
            .map(|&(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
            .sum::<f64>();
    }
}

/// Separable box blur with clamped borders.
fn box_blur(img: &Image, r: usize) -> Image {
    let (h, w) = img.dim();
    let ri = r as isize;
    let norm = 1.0 / (2 * r + 1) as f64;
    let horiz = Array2::from_shape_fn((h, w), |(y, x)| {
        (-ri..=ri)
            .map(|d| img[[y, (x as isize + d).clamp(0, w as isize - 1) as usize]])
            .sum::<f64>()
            * norm
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        (-ri..=ri)
            .map(|d| horiz[[(y as isize + d).clamp(0, h as isize - 1) as usize, x]])
            .sum::<f64>()
            * norm
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(style: &mut SyntheticStyle) {
        style.noise_sigma = 0.0;
        style.blur_radius = 0;
    }

    #[test]
    fn unknown_kind_is_a_parameter_error() {
        assert!(matches!("spiral".parse::<StructureKind>(), Err(Error::Parameter(_))));
        assert_eq!("circular".parse::<StructureKind>().unwrap(), StructureKind::Circular);
    }

    #[test]
    fn inner_disc_never_touches_background() {
        let mut spec = SyntheticSpec::desk_circular(4);
        clean(&mut spec.source);
        clean(&mut spec.target);
        let ds = generate_synthetic_domains(&spec).unwrap();
        for s in ds.source_labeled.iter().chain(&ds.test) {
            let m = &s.mask;
            let (h, w) = m.dim();
            assert!(m.iter().any(|&v| v == 1));
            for ((y, x), &v) in m.indexed_iter() {
                if v != 1 {
                    continue;
                }
                assert!(y > 0 && x > 0 && y + 1 < h && x + 1 < w);
                for (ny, nx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                    assert_ne!(m[[ny, nx]], 0, "{}: disc pixel ({y},{x}) touches background", s.id);
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let spec = SyntheticSpec::desk_tubular(17);
        let a = generate_synthetic_domains(&spec).unwrap();
        let b = generate_synthetic_domains(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = generate_synthetic_domains(&SyntheticSpec::desk_tubular(18)).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn opposite_contrast_flips_foreground_polarity() {
        let mut spec = SyntheticSpec::desk_tubular(2);
        spec.source.foreground_contrast = 0.4;
        spec.target.foreground_contrast = -0.4;
        let ds = generate_synthetic_domains(&spec).unwrap();
        let gap = |samples: &[LabeledSample]| {
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
            for s in samples {
                for (v, &m) in s.image.iter().zip(s.mask.iter()) {
                    if m > 0 {
                        fg += v;
                        nf += 1;
                    } else {
                        bg += v;
                        nb += 1;
                    }
                }
            }
            fg / nf as f64 - bg / nb as f64
        };
        assert!(gap(&ds.source_labeled) > 0.1);
        assert!(gap(&ds.test) < -0.1);
    }

    #[test]
    fn images_in_unit_range_and_masks_within_classes() {
        for spec in [SyntheticSpec::desk_circular(1), SyntheticSpec::desk_tubular(1)] {
            let ds = generate_synthetic_domains(&spec).unwrap();
            assert_eq!(ds.image_count(), spec.counts.total());
            for s in ds.source_labeled.iter().chain(&ds.validation) {
                assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(s.mask.iter().all(|&m| (m as usize) < spec.kind.classes()));
                assert_eq!(s.image.dim(), (64, 64));
            }
        }
    }

    #[test]
    fn zero_counts_and_identical_styles_are_rejected() {
        let mut spec = SyntheticSpec::desk_circular(0);
        spec.counts.test = 0;
        assert!(generate_synthetic_domains(&spec).is_err());
        let mut spec = SyntheticSpec::desk_circular(0);
        spec.target = spec.source.clone();
        assert!(generate_synthetic_domains(&spec).is_err());
    }
}
