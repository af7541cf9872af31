//! Colour-coded comparison of a predicted mask against ground truth.

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

pub const TRUE_POSITIVE: Rgb<u8> = Rgb([255, 255, 255]);
pub const TRUE_NEGATIVE: Rgb<u8> = Rgb([0, 0, 0]);
pub const FALSE_POSITIVE: Rgb<u8> = Rgb([0, 255, 0]);
pub const FALSE_NEGATIVE: Rgb<u8> = Rgb([128, 0, 128]);

pub fn pixel_colour(pred: bool, truth: bool) -> Rgb<u8> {
    match (pred, truth) {
        (true, true) => TRUE_POSITIVE,
        (false, false) => TRUE_NEGATIVE,
        (true, false) => FALSE_POSITIVE,
        (false, true) => FALSE_NEGATIVE,
    }
}

/// TP white, TN black, FP green, FN purple.
pub fn render_map(pred: &BinaryMask, target: &BinaryMask) -> Result<RgbImage> {
    if (pred.width(), pred.height()) != (target.width(), target.height()) {
        return Err(Error::invalid(format!(
            "prediction is {}x{} but the label is {}x{}",
            pred.width(),
            pred.height(),
            target.width(),
            target.height()
        )));
    }
    Ok(RgbImage::from_fn(
        pred.width() as u32,
        pred.height() as u32,
        |x, y| {
            let (x, y) = (x as usize, y as usize);
            pixel_colour(pred.get(x, y), target.get(x, y))
        },
    ))
}

/// Binary mask as 0/255 grayscale.
pub fn mask_image(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) {
            255
        } else {
            0
        }])
    })
}

/// Mask from a grayscale image, `> threshold` is set.
pub fn mask_from_image(img: &GrayImage, threshold: u8) -> BinaryMask {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p[0] > threshold).collect();
    BinaryMask::new(w as usize, h as usize, data).expect("pixel count matches dimensions")
}

/// Probability map rendered as 8-bit grayscale.
pub fn probability_image(width: usize, height: usize, probs: &[f32]) -> Result<GrayImage> {
    if probs.len() != width * height {
        return Err(Error::shape(format!(
            "{} probabilities for a {width}x{height} image",
            probs.len()
        )));
    }
    Ok(GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let p = probs[y as usize * width + x as usize].clamp(0.0, 1.0);
        Luma([(p * 255.0).round() as u8])
    }))
}
