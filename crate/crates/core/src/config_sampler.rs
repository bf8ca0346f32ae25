//! Sampling of the rendering configuration space, difference hashing and
//! greedy near-duplicate removal.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_render::{CameraConfig, DepthImage, DISTANCE_RANGE, FOV_RANGE};
use crate::mesh_io::MorphParams;
use crate::rng;

/// Morph scales drawn at sampling time stay inside this band.
pub const SAMPLED_MORPH_RANGE: (f64, f64) = (0.92, 1.08);
pub const DEFAULT_DEDUP_THRESHOLD: u32 = 4;
pub const DEFAULT_CONFIGS_PER_MODEL: usize = 480;

const HASH_W: usize = 9;
const HASH_H: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("image {0}x{1} is smaller than the 9x8 hash grid")]
    ImageTooSmall(usize, usize),
    #[error("config count must be at least 1")]
    ZeroCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPlan {
    pub model_id: String,
    pub configs: Vec<CameraConfig>,
    pub seed: u64,
}

/// Draws `count` independent configurations: uniform distance and field of
/// view, area-uniform direction on the full sphere, uniform per-axis morphs.
pub fn sample_configs(model_id: &str, count: usize, seed: u64) -> Result<RenderPlan, SamplerError> {
    if count == 0 {
        return Err(SamplerError::ZeroCount);
    }
    let mut rng = rng::rng_from(&[seed, rng::hash_str(model_id)]);
    let configs = (0..count)
        .map(|_| {
            let distance = rng.random_range(DISTANCE_RANGE.0..=DISTANCE_RANGE.1);
            let fov_deg = rng.random_range(FOV_RANGE.0..=FOV_RANGE.1);
            let z: f64 = rng.random_range(-1.0..=1.0);
            let azimuth: f64 = rng.random_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let mut axis_scales = [0.0; 3];
            for s in axis_scales.iter_mut() {
                *s = rng.random_range(SAMPLED_MORPH_RANGE.0..=SAMPLED_MORPH_RANGE.1);
            }
            CameraConfig {
                distance,
                fov_deg,
                sphere_dir: [r * azimuth.cos(), r * azimuth.sin(), z],
                morph: MorphParams { axis_scales },
            }
        })
        .collect();
    Ok(RenderPlan {
        model_id: model_id.to_string(),
        configs,
        seed,
    })
}

/// Fixed-camera turntable: constant distance, field of view and elevation,
/// `steps` equally spaced azimuths and no morph.
pub fn turntable_plan(model_id: &str, steps: usize, distance: f64, fov_deg: f64, elevation_deg: f64) -> RenderPlan {
    let el = elevation_deg.to_radians();
    let configs = (0..steps)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / steps as f64;
            CameraConfig {
                distance,
                fov_deg,
                sphere_dir: [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()],
                morph: MorphParams::IDENTITY,
            }
        })
        .collect();
    RenderPlan {
        model_id: model_id.to_string(),
        configs,
        seed: 0,
    }
}

/// 64-bit difference hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hash64(pub u64);

impl Hash64 {
    pub fn distance(self, other: Hash64) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

/// Overlap of source pixel `i` with output cell `c`, both measured in units
/// of `1/(src * dst)` so the weights are exact integers.
fn overlap(i: usize, c: usize, src: usize, dst: usize) -> u64 {
    let (a0, a1) = (i * dst, (i + 1) * dst);
    let (b0, b1) = (c * src, (c + 1) * src);
    a1.min(b1).saturating_sub(a0.max(b0)) as u64
}

/// Difference hash: area-average down to 9x8, then bit `(r, c)` (row-major,
/// least significant first) is set iff cell `(r, c)` is darker than `(r, c+1)`.
pub fn perceptual_hash(img: &DepthImage) -> Result<Hash64, SamplerError> {
    let (w, h) = (img.width, img.height);
    if w < HASH_W || h < HASH_H {
        return Err(SamplerError::ImageTooSmall(w, h));
    }
    // Every cell has total weight w*h, so integer sums compare exactly.
    let mut cells = [[0u64; HASH_W]; HASH_H];
    for y in 0..h {
        let r0 = y * HASH_H / h;
        let r1 = (((y + 1) * HASH_H).div_ceil(h)).min(HASH_H);
        for x in 0..w {
            let c0 = x * HASH_W / w;
            let c1 = (((x + 1) * HASH_W).div_ceil(w)).min(HASH_W);
            let g = img.at(x, y) as u64;
            for (r, row) in cells.iter_mut().enumerate().take(r1).skip(r0) {
                let wy = overlap(y, r, h, HASH_H);
                if wy == 0 {
                    continue;
                }
                for (c, cell) in row.iter_mut().enumerate().take(c1).skip(c0) {
                    *cell += wy * overlap(x, c, w, HASH_W) * g;
                }
            }
        }
    }
    let mut bits = 0u64;
    for (r, row) in cells.iter().enumerate() {
        for c in 0..HASH_W - 1 {
            if row[c] < row[c + 1] {
                bits |= 1 << (r * 8 + c);
            }
        }
    }
    Ok(Hash64(bits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupResult {
    pub kept: Vec<usize>,
    pub near_duplicate_fraction: f64,
}

/// Greedy first-seen-wins scan: an entry is dropped iff it lies within
/// `threshold` bits of an already kept entry.
pub fn dedup(hashes: &[Hash64], threshold: u32) -> DedupResult {
    let mut kept: Vec<usize> = Vec::new();
    for (i, &h) in hashes.iter().enumerate() {
        if kept.iter().all(|&k| hashes[k].distance(h) > threshold) {
            kept.push(i);
        }
    }
    let fraction = if hashes.is_empty() {
        0.0
    } else {
        (hashes.len() - kept.len()) as f64 / hashes.len() as f64
    };
    DedupResult {
        kept,
        near_duplicate_fraction: fraction,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupRow {
    pub model_id: String,
    pub total: usize,
    pub kept: usize,
    pub near_duplicate_fraction: f64,
}

pub fn write_dedup_csv<W: Write>(rows: &[DedupRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "model_id,total,kept,near_duplicate_fraction")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6}",
            r.model_id, r.total, r.kept, r.near_duplicate_fraction
        )?;
    }
    Ok(())
}
