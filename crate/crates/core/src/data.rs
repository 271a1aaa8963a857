//! Image loading and the resize / crop / flip pipeline feeding the encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{Manifest, Role};
use crate::rng::{self, stream, SeededRng};

/// An image tagged with its id and label, already resized to the pipeline's
/// `resize` side.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub image: Image,
}

/// Loads every row of `manifest`, resizing each image to `resize x resize`.
pub fn load_samples(manifest: &Manifest, resize: usize) -> Result<Vec<Sample>> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let image = Image::read_ppm(&manifest.resolve(row))?.resize(resize, resize)?;
            Ok(Sample {
                id: row.id(),
                label: row.label_id,
                image,
            })
        })
        .collect()
}

/// Deterministic eval view: center `crop x crop` window.
pub fn center_crop(image: &Image, crop: usize) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    if crop > w || crop > h {
        return Err(Error::dim(
            "center_crop",
            format!("crop {crop} larger than {w}x{h}"),
        ));
    }
    image.crop((w - crop) / 2, (h - crop) / 2, crop, crop)
}

/// Training view: uniformly placed `crop x crop` window, flipped
/// horizontally with probability 1/2.
pub fn random_crop_flip(image: &Image, crop: usize, rng: &mut SeededRng) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    if crop > w || crop > h {
        return Err(Error::dim(
            "random_crop",
            format!("crop {crop} larger than {w}x{h}"),
        ));
    }
    let x0 = rng.random_range(0..=w - crop);
    let y0 = rng.random_range(0..=h - crop);
    let out = image.crop(x0, y0, crop, crop)?;
    Ok(if rng.random_bool(0.5) {
        out.flip_horizontal()
    } else {
        out
    })
}

/// Branch tags for per-sample augmentation streams.
pub mod branch {
    pub const ORIG: u64 = 0;
    pub const DISC: u64 = 1;
    pub const BG: u64 = 2;
}

pub fn branch_of(role: Role) -> u64 {
    match role {
        Role::Orig => branch::ORIG,
        Role::Disc => branch::DISC,
        Role::Bg => branch::BG,
    }
}

/// Augmentation stream of one sample in one epoch. Keyed by position rather
/// than draw order, so skipping a branch never shifts another branch's crops.
pub fn augment_rng(seed: u64, epoch: usize, index: usize, branch: u64) -> SeededRng {
    rng::seeded(rng::derive_seed(
        seed,
        &[stream::AUGMENT, epoch as u64, index as u64, branch],
    ))
}
