//! Training-time augmentations for 8-bit depth images: crop, occlusion,
//! depth scale/shift, background substitution, film grain and shear.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_render::{DepthImage, BACKGROUND};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("crop rect {0:?} outside {1}x{2} image")]
    RectOutOfBounds(Rect, usize, usize),
    #[error("{name} = {value} outside allowed range")]
    ParamOutOfRange { name: &'static str, value: f64 },
    #[error("image has no object pixels")]
    NoObjectPixels,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn full(img: &DepthImage) -> Rect {
        Rect {
            x: 0,
            y: 0,
            width: img.width,
            height: img.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub crop_prob: f64,
    pub crop_min_frac: f64,
    pub occlude_prob: f64,
    pub background_prob: f64,
    pub noise_prob: f64,
    pub shear_prob: f64,
    pub zshift_prob: f64,
    pub noise_amplitude: u8,
    pub shear_max: f64,
    pub z_alpha_range: (f64, f64),
    pub z_beta_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_prob: 0.5,
            crop_min_frac: 0.85,
            occlude_prob: 0.2,
            background_prob: 0.2,
            noise_prob: 0.2,
            shear_prob: 0.2,
            zshift_prob: 0.2,
            noise_amplitude: 10,
            shear_max: 0.15,
            z_alpha_range: (0.8, 1.2),
            z_beta_range: (-20.0, 20.0),
        }
    }
}

impl AugmentPolicy {
    /// Every augmentation disabled; the pipeline then only resizes.
    pub fn none() -> Self {
        AugmentPolicy {
            crop_prob: 0.0,
            occlude_prob: 0.0,
            background_prob: 0.0,
            noise_prob: 0.0,
            shear_prob: 0.0,
            zshift_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn always() -> Self {
        AugmentPolicy {
            crop_prob: 1.0,
            occlude_prob: 1.0,
            background_prob: 1.0,
            noise_prob: 1.0,
            shear_prob: 1.0,
            zshift_prob: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let probs = [
            ("crop_prob", self.crop_prob),
            ("occlude_prob", self.occlude_prob),
            ("background_prob", self.background_prob),
            ("noise_prob", self.noise_prob),
            ("shear_prob", self.shear_prob),
            ("zshift_prob", self.zshift_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::InvalidPolicy(format!("{name} = {p}")));
            }
        }
        if !(self.crop_min_frac > 0.0 && self.crop_min_frac <= 1.0) {
            return Err(AugmentError::InvalidPolicy(format!(
                "crop_min_frac = {}",
                self.crop_min_frac
            )));
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !ordered(self.z_alpha_range) || !ordered(self.z_beta_range) || self.shear_max < 0.0 {
            return Err(AugmentError::InvalidPolicy("empty parameter range".into()));
        }
        Ok(())
    }
}

/// Bilinear sample with edge clamping; `x`, `y` are in pixel-index space.
fn bilinear(img: &DepthImage, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.at(x0, y0) as f64 * (1.0 - fx) + img.at(x1, y0) as f64 * fx;
    let bottom = img.at(x0, y1) as f64 * (1.0 - fx) + img.at(x1, y1) as f64 * fx;
    top * (1.0 - fy) + bottom * fy
}

fn to_gray(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Crops `rect` and rescales it to `out_w x out_h` with center-aligned
/// bilinear interpolation.
pub fn crop(img: &DepthImage, rect: Rect, out_w: usize, out_h: usize) -> Result<DepthImage, AugmentError> {
    if rect.width == 0
        || rect.height == 0
        || rect.x + rect.width > img.width
        || rect.y + rect.height > img.height
    {
        return Err(AugmentError::RectOutOfBounds(rect, img.width, img.height));
    }
    let sx = rect.width as f64 / out_w as f64;
    let sy = rect.height as f64 / out_h as f64;
    let mut gray = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let src_y = rect.y as f64 + (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let src_x = rect.x as f64 + (x as f64 + 0.5) * sx - 0.5;
            let v = bilinear(
                img,
                src_x.clamp(rect.x as f64, (rect.x + rect.width - 1) as f64),
                src_y.clamp(rect.y as f64, (rect.y + rect.height - 1) as f64),
            );
            gray.push(to_gray(v));
        }
    }
    Ok(DepthImage::new(out_w, out_h, gray))
}

/// Random crop rect whose sides are at least `min_frac` of the image sides.
pub fn random_crop_rect<R: Rng>(img: &DepthImage, min_frac: f64, rng: &mut R) -> Rect {
    let side = |n: usize, rng: &mut R| {
        let lo = ((n as f64 * min_frac).ceil() as usize).clamp(1, n);
        rng.random_range(lo..=n)
    };
    let w = side(img.width, rng);
    let h = side(img.height, rng);
    Rect {
        x: rng.random_range(0..=img.width - w),
        y: rng.random_range(0..=img.height - h),
        width: w,
        height: h,
    }
}

/// Rectangle of area exactly `floor(W*H/4)` with aspect (h/w) as close as
/// possible to a log-uniform draw in `[0.5, 2]`. Images too narrow for that
/// band fall back to any fitting factorization, and failing that to full-width
/// rows with a partial last row. Returns (rect, pixels in the partial row).
pub fn occlusion_region<R: Rng>(width: usize, height: usize, rng: &mut R) -> (Rect, usize) {
    let area = width * height / 4;
    let target: f64 = rng.random_range((0.5f64).ln()..=(2.0f64).ln()).exp();
    let log_gap = |&(w, h): &(usize, usize)| ((h as f64 / w as f64).ln() - target.ln()).abs();
    let fitting: Vec<(usize, usize)> = (1..=width.min(area))
        .filter(|w| area.is_multiple_of(*w) && area / w <= height)
        .map(|w| (w, area / w))
        .collect();
    let in_band: Vec<(usize, usize)> = fitting
        .iter()
        .copied()
        .filter(|&(w, h)| (0.5..=2.0).contains(&(h as f64 / w as f64)))
        .collect();
    let pool = if in_band.is_empty() { &fitting } else { &in_band };
    let best = pool
        .iter()
        .copied()
        .min_by(|a, b| log_gap(a).total_cmp(&log_gap(b)).then(a.0.cmp(&b.0)));
    let (w, h, partial) = match best {
        Some((w, h)) => (w, h, 0),
        None => {
            // area <= W*H/4 guarantees ceil(area / W) rows fit.
            let w = width.min(area.max(1));
            let full_rows = area / w;
            let rem = area - full_rows * w;
            (w, full_rows + usize::from(rem > 0), rem)
        }
    };
    let rect = Rect {
        x: rng.random_range(0..=width - w),
        y: rng.random_range(0..=height - h),
        width: w,
        height: h,
    };
    (rect, partial)
}

fn fill_region(img: &mut DepthImage, rect: Rect, partial: usize) {
    for dy in 0..rect.height {
        let cols = if partial > 0 && dy + 1 == rect.height {
            partial
        } else {
            rect.width
        };
        for dx in 0..cols {
            img.set(rect.x + dx, rect.y + dy, BACKGROUND);
        }
    }
}

/// Fills a random quarter-area rectangle with the background value.
pub fn occlude<R: Rng>(img: &DepthImage, rng: &mut R) -> DepthImage {
    let mut out = img.clone();
    if img.width * img.height < 4 {
        return out;
    }
    let (rect, partial) = occlusion_region(img.width, img.height, rng);
    fill_region(&mut out, rect, partial);
    out
}

/// Depth scale (`alpha`) and shift (`beta`) about mid-gray, applied to object
/// pixels only; results stay strictly below the background value.
pub fn zscale_shift(
    img: &DepthImage,
    alpha: f64,
    beta: f64,
    policy: &AugmentPolicy,
) -> Result<DepthImage, AugmentError> {
    let (a0, a1) = policy.z_alpha_range;
    let (b0, b1) = policy.z_beta_range;
    if !(a0..=a1).contains(&alpha) {
        return Err(AugmentError::ParamOutOfRange {
            name: "alpha",
            value: alpha,
        });
    }
    if !(b0..=b1).contains(&beta) {
        return Err(AugmentError::ParamOutOfRange {
            name: "beta",
            value: beta,
        });
    }
    let gray = img
        .gray
        .iter()
        .map(|&g| {
            if g == BACKGROUND {
                g
            } else {
                (alpha * (g as f64 - 128.0) + 128.0 + beta).round().clamp(0.0, 254.0) as u8
            }
        })
        .collect();
    Ok(DepthImage::new(img.width, img.height, gray))
}

/// Replaces the background with one constant drawn from the integers in
/// `(mean object gray, 254]`.
pub fn substitute_background<R: Rng>(img: &DepthImage, rng: &mut R) -> Result<DepthImage, AugmentError> {
    let (sum, count) = img
        .object_pixels()
        .fold((0u64, 0u64), |(s, n), g| (s + g as u64, n + 1));
    if count == 0 {
        return Err(AugmentError::NoObjectPixels);
    }
    let mean = sum as f64 / count as f64;
    let lo = mean.floor() as u16 + 1;
    if lo > 254 || count as usize == img.gray.len() {
        return Ok(img.clone());
    }
    let value = rng.random_range(lo..=254) as u8;
    let gray = img
        .gray
        .iter()
        .map(|&g| if g == BACKGROUND { value } else { g })
        .collect();
    Ok(DepthImage::new(img.width, img.height, gray))
}

/// Adds independent integer noise in `[-amplitude, amplitude]` to every pixel.
pub fn add_grain<R: Rng>(img: &DepthImage, amplitude: u8, rng: &mut R) -> DepthImage {
    if amplitude == 0 {
        return img.clone();
    }
    let a = amplitude as i16;
    let gray = img
        .gray
        .iter()
        .map(|&g| (g as i16 + rng.random_range(-a..=a)).clamp(0, 255) as u8)
        .collect();
    DepthImage::new(img.width, img.height, gray)
}

/// Horizontal shear `x' = x + factor * (y - H/2)`; samples falling outside the
/// source become background.
pub fn shear(img: &DepthImage, factor: f64, policy: &AugmentPolicy) -> Result<DepthImage, AugmentError> {
    if factor.abs() > policy.shear_max {
        return Err(AugmentError::ParamOutOfRange {
            name: "shear",
            value: factor,
        });
    }
    let half = img.height as f64 / 2.0;
    let max_x = (img.width - 1) as f64;
    let mut out = img.clone();
    for y in 0..img.height {
        let offset = factor * (y as f64 + 0.5 - half);
        for x in 0..img.width {
            let src = x as f64 - offset;
            let v = if src < 0.0 || src > max_x {
                BACKGROUND
            } else {
                let x0 = src.floor() as usize;
                let x1 = (x0 + 1).min(img.width - 1);
                let f = src - x0 as f64;
                if f == 0.0 {
                    img.at(x0, y)
                } else {
                    to_gray(img.at(x0, y) as f64 * (1.0 - f) + img.at(x1, y) as f64 * f)
                }
            };
            out.set(x, y, v);
        }
    }
    Ok(out)
}

/// Which augmentations fired, for bookkeeping and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Applied {
    pub background: bool,
    pub zshift: bool,
    pub shear: bool,
    pub occlude: bool,
    pub grain: bool,
    pub crop: bool,
}

/// Applies, in order, background substitution, depth scale/shift, shear,
/// occlusion, grain and crop, each with its policy probability, and returns
/// an `out_w x out_h` image. Without a crop the whole image is resized.
pub fn augment_pipeline<R: Rng>(
    img: &DepthImage,
    policy: &AugmentPolicy,
    out_w: usize,
    out_h: usize,
    rng: &mut R,
) -> Result<(DepthImage, Applied), AugmentError> {
    policy.validate()?;
    let mut applied = Applied::default();
    let mut cur = img.clone();
    if rng.random_bool(policy.background_prob) {
        applied.background = true;
        cur = match substitute_background(&cur, rng) {
            Err(AugmentError::NoObjectPixels) => cur,
            other => other?,
        };
    }
    if rng.random_bool(policy.zshift_prob) {
        applied.zshift = true;
        let alpha = rng.random_range(policy.z_alpha_range.0..=policy.z_alpha_range.1);
        let beta = rng.random_range(policy.z_beta_range.0..=policy.z_beta_range.1);
        cur = zscale_shift(&cur, alpha, beta, policy)?;
    }
    if rng.random_bool(policy.shear_prob) {
        applied.shear = true;
        let f = rng.random_range(-policy.shear_max..=policy.shear_max);
        cur = shear(&cur, f, policy)?;
    }
    if rng.random_bool(policy.occlude_prob) {
        applied.occlude = true;
        cur = occlude(&cur, rng);
    }
    if rng.random_bool(policy.noise_prob) {
        applied.grain = true;
        cur = add_grain(&cur, policy.noise_amplitude, rng);
    }
    let rect = if rng.random_bool(policy.crop_prob) {
        applied.crop = true;
        random_crop_rect(&cur, policy.crop_min_frac, rng)
    } else {
        Rect::full(&cur)
    };
    Ok((crop(&cur, rect, out_w, out_h)?, applied))
}
