use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SkeletonPointCloud;

/// Training-time spatial augmentation: one random rotation of the `(x, y)`
/// plane about the cloud centroid, then per-point Gaussian jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Standard deviation of the jitter, in normalized frame units.
    pub jitter_sigma: f64,
    /// Rotation half-range in radians.
    pub rotate_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            jitter_sigma: 0.01,
            rotate_max: 0.1 * std::f64::consts::PI,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        }
    }
}

/// [`augment_with_rng`] driven by `cfg.seed`.
pub fn augment(cloud: &SkeletonPointCloud, cfg: &AugmentConfig) -> SkeletonPointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_with_rng(cloud, cfg, &mut rng)
}

pub fn augment_with_rng(cloud: &SkeletonPointCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> SkeletonPointCloud {
    let mut out = cloud.clone();
    if !cfg.enabled || cloud.is_empty() {
        return out;
    }
    rotate_xy(&mut out.points, sample_angle(cfg.rotate_max, rng));
    if cfg.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_sigma).expect("finite sigma");
        for p in &mut out.points {
            p[0] += noise.sample(rng);
            p[1] += noise.sample(rng);
        }
    }
    for p in &mut out.points {
        p[0] = p[0].clamp(0.0, 1.0);
        p[1] = p[1].clamp(0.0, 1.0);
    }
    out
}

fn sample_angle(rotate_max: f64, rng: &mut impl Rng) -> f64 {
    if rotate_max > 0.0 {
        rng.gen_range(-rotate_max..=rotate_max)
    } else {
        0.0
    }
}

/// Rotates `(x, y)` about the spatial centroid; `z` is untouched.
pub(crate) fn rotate_xy(points: &mut [[f64; 3]], angle: f64) {
    if angle == 0.0 || points.is_empty() {
        return;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (s, c) = angle.sin_cos();
    for p in points {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        p[0] = cx + c * dx - s * dy;
        p[1] = cy + s * dx + c * dy;
    }
}
