use ndarray::{s, Array2};
use rand::Rng;

use super::{Image, Mask};
use crate::{Error, Result};

/// One concrete geometric transform; image and mask always share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Top-left corner of the crop window.
    pub crop_origin: (usize, usize),
    pub crop_size: (usize, usize),
}

impl AugmentParams {
    pub fn identity(size: (usize, usize)) -> Self {
        Self {
            hflip: false,
            vflip: false,
            crop_origin: (0, 0),
            crop_size: size,
        }
    }

    /// Random flips (p = 0.5 each) and a uniformly placed crop window.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        input: (usize, usize),
        crop_out: (usize, usize),
    ) -> Result<Self> {
        check_crop(input, crop_out)?;
        Ok(Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            crop_origin: (
                rng.random_range(0..=input.0 - crop_out.0),
                rng.random_range(0..=input.1 - crop_out.1),
            ),
            crop_size: crop_out,
        })
    }

    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        self.apply(img)
    }

    pub fn apply_mask(&self, mask: &Mask) -> Result<Mask> {
        self.apply(mask)
    }

    fn apply<T: Copy>(&self, grid: &Array2<T>) -> Result<Array2<T>> {
        check_crop(grid.dim(), self.crop_size)?;
        let (y0, x0) = self.crop_origin;
        let (ch, cw) = self.crop_size;
        if y0 + ch > grid.nrows() || x0 + cw > grid.ncols() {
            return Err(Error::Parameter("crop window exceeds the input".into()));
        }
        let mut out = grid.slice(s![y0..y0 + ch, x0..x0 + cw]).to_owned();
        if self.hflip {
            out = flip_horizontal(&out);
        }
        if self.vflip {
            out = flip_vertical(&out);
        }
        Ok(out)
    }
}

fn check_crop(input: (usize, usize), crop: (usize, usize)) -> Result<()> {
    if crop.0 > input.0 || crop.1 > input.1 {
        return Err(Error::Parameter(format!(
            "crop {crop:?} larger than input {input:?}"
        )));
    }
    if crop.0 == 0 || crop.1 == 0 {
        return Err(Error::Parameter("crop size must be non-zero".into()));
    }
    Ok(())
}

pub fn flip_horizontal<T: Copy>(grid: &Array2<T>) -> Array2<T> {
    grid.slice(s![.., ..;-1]).to_owned()
}

pub fn flip_vertical<T: Copy>(grid: &Array2<T>) -> Array2<T> {
    grid.slice(s![..;-1, ..]).to_owned()
}

/// Random flips and crop applied identically to an image and its mask.
/// The crop is a pure pixel selection, so label values are never interpolated.
pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    mask: Option<&Mask>,
    rng: &mut R,
    crop_out: (usize, usize),
) -> Result<(Image, Option<Mask>)> {
    if let Some(m) = mask {
        if m.dim() != image.dim() {
            return Err(Error::Input("image and mask sizes differ".into()));
        }
    }
    let params = AugmentParams::sample(rng, image.dim(), crop_out)?;
    let img = params.apply_image(image)?;
    let mask = mask.map(|m| params.apply_mask(m)).transpose()?;
    Ok((img, mask))
}
