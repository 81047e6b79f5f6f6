//! The three stochastic view augmentations, applied in order:
//! half-space crop with resampling, small rotation, clipped jitter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{unit_vector, Point, PointCloud};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub keep_fraction: f64,
    pub out_points: usize,
    pub max_angle_deg: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.85,
            out_points: 2048,
            max_angle_deg: 5.0,
            jitter_sigma: 0.01,
            jitter_clip: 0.025,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off; views are resampled copies.
    pub fn identity(out_points: usize) -> Self {
        Self {
            keep_fraction: 1.0,
            out_points,
            max_angle_deg: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if !(self.jitter_clip >= 0.0) || !(self.max_angle_deg >= 0.0) || !(self.jitter_sigma >= 0.0)
        {
            return Err(Error::Config(
                "augmentation magnitudes must be non-negative".into(),
            ));
        }
        if self.out_points == 0 {
            return Err(Error::Config("out_points must be positive".into()));
        }
        Ok(())
    }
}

/// `ceil(keep_fraction * n)`, guarded against representation error in the
/// product (0.85 * 100 must give 85, not 86).
pub fn keep_count(keep_fraction: f64, n: usize) -> usize {
    ((keep_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn survivors_with(
    pc: &PointCloud,
    keep_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PointCloud, Point)> {
    let dir = unit_vector(rng);
    let kept = keep_count(keep_fraction, pc.len());
    if kept < 4 {
        return Err(Error::Crop {
            kept,
            total: pc.len(),
        });
    }
    let proj: Vec<f64> = pc
        .points
        .iter()
        .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
        .collect();
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    order.truncate(kept);
    order.sort_unstable();
    Ok((pc.select(&order), dir))
}

fn crop_with(pc: &PointCloud, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let (kept, _) = survivors_with(pc, cfg.keep_fraction, rng)?;
    let picks: Vec<usize> = (0..cfg.out_points)
        .map(|_| rng.random_range(0..kept.len()))
        .collect();
    Ok(kept.select(&picks))
}

/// `Rz(z) * Ry(y) * Rx(x)`, angles in radians.
pub fn rotation_matrix(x: f64, y: f64, z: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

fn rotate_with(pc: &PointCloud, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> PointCloud {
    let max = cfg.max_angle_deg.to_radians();
    let mut angle = || {
        if max > 0.0 {
            rng.random_range(-max..=max)
        } else {
            0.0
        }
    };
    let (x, y, z) = (angle(), angle(), angle());
    let r = rotation_matrix(x, y, z);
    pc.map_points(|p| std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]))
}

fn jitter_with(pc: &PointCloud, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    if cfg.jitter_sigma == 0.0 {
        return Ok(pc.clone());
    }
    let normal = Normal::new(0.0, cfg.jitter_sigma)
        .map_err(|e| Error::Config(format!("jitter_sigma: {e}")))?;
    let clip = cfg.jitter_clip;
    Ok(pc.map_points(|p| {
        std::array::from_fn(|k| p[k] + normal.sample(&mut *rng).clamp(-clip, clip))
    }))
}

/// The points kept by the half-space crop, before resampling, and the crop
/// direction. Survivors are the `keep_count` points with the smallest
/// projection onto the direction.
pub fn crop_survivors(
    pc: &PointCloud,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(PointCloud, Point)> {
    survivors_with(pc, cfg.keep_fraction, &mut seed::rng(seed))
}

/// Half-space crop followed by resampling with replacement to
/// `cfg.out_points`.
pub fn random_crop(pc: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<PointCloud> {
    crop_with(pc, cfg, &mut seed::rng(seed))
}

pub fn random_rotation(pc: &PointCloud, cfg: &AugmentConfig, seed: u64) -> PointCloud {
    rotate_with(pc, cfg, &mut seed::rng(seed))
}

pub fn random_jitter(pc: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<PointCloud> {
    jitter_with(pc, cfg, &mut seed::rng(seed))
}

/// Two independently augmented views of `pc`.
pub fn make_views(
    pc: &PointCloud,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(PointCloud, PointCloud)> {
    cfg.validate()?;
    let view = |which: u64| -> Result<PointCloud> {
        let mut rng = seed::rng(seed::derive(seed, &[which]));
        let cropped = crop_with(pc, cfg, &mut rng)?;
        let rotated = rotate_with(&cropped, cfg, &mut rng);
        jitter_with(&rotated, cfg, &mut rng)
    };
    Ok((view(0)?, view(1)?))
}
