use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Uniform random scale range applied to xyz.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Per-coordinate Gaussian jitter, clipped to `±jitter_clip`.
    pub jitter_std: f64,
    pub jitter_clip: f64,
    /// At most this fraction of points is dropped (and refilled).
    pub max_drop_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_lo: 0.8,
            scale_hi: 1.25,
            jitter_std: 0.02,
            jitter_clip: 0.05,
            max_drop_ratio: 0.125,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err(Error::config(format!(
                "scale range [{}, {}] must satisfy 0 < lo <= hi",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_clip >= 0.0) {
            return Err(Error::config("jitter_std and jitter_clip must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.max_drop_ratio) {
            return Err(Error::config(format!(
                "max_drop_ratio must be in [0, 1), got {}",
                self.max_drop_ratio
            )));
        }
        Ok(())
    }
}

/// Random scale, clipped jitter and random point dropout, in that order.
///
/// Dropped rows are overwritten with the first surviving point so the
/// cloud keeps its size; duplicates do not change max-pooled features.
pub fn augment(cloud: &PointCloud, aug: &AugmentConfig, rng: &mut impl Rng) -> PointCloud {
    let mut out = cloud.clone();
    let ch = out.channels();
    let n = out.len();

    let scale = if aug.scale_hi > aug.scale_lo {
        rng.random_range(aug.scale_lo..=aug.scale_hi)
    } else {
        aug.scale_lo
    };
    let jitter = (aug.jitter_std > 0.0).then(|| Normal::new(0.0, aug.jitter_std).expect("valid std"));
    for row in out.values_mut().chunks_mut(ch) {
        for v in &mut row[..3] {
            *v *= scale;
            if let Some(normal) = &jitter {
                *v += normal.sample(rng).clamp(-aug.jitter_clip, aug.jitter_clip);
            }
        }
    }

    let max_drop = (aug.max_drop_ratio * n as f64).floor() as usize;
    let drop = if max_drop > 0 { rng.random_range(0..=max_drop) } else { 0 };
    if drop > 0 {
        let mut dropped = vec![false; n];
        for i in index::sample(rng, n, drop) {
            dropped[i] = true;
        }
        let keeper = dropped.iter().position(|d| !d).expect("fewer drops than points");
        let fill = out.point(keeper).to_vec();
        for (row, _) in out.values_mut().chunks_mut(ch).zip(&dropped).filter(|(_, &d)| d) {
            row.copy_from_slice(&fill);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        PointCloud::new(pts, 3, 0).unwrap()
    }

    fn quiet() -> AugmentConfig {
        AugmentConfig {
            scale_lo: 1.0,
            scale_hi: 1.0,
            jitter_std: 0.0,
            jitter_clip: 0.05,
            max_drop_ratio: 0.0,
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let c = cloud(50, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(augment(&c, &quiet(), &mut rng), c);
    }

    #[test]
    fn most_points_survive_dropout() {
        let c = cloud(1024, 3);
        let aug = AugmentConfig {
            max_drop_ratio: 0.125,
            ..quiet()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let out = augment(&c, &aug, &mut rng);
            let unchanged = (0..1024).filter(|&i| out.point(i) == c.point(i)).count();
            assert!(unchanged >= 896, "{unchanged}");
            assert_eq!(out.len(), 1024);
        }
    }

    #[test]
    fn scale_draws_stay_in_range() {
        let c = PointCloud::from_xyz(&[[1.0, 0.0, 0.0]], 0).unwrap();
        let aug = AugmentConfig {
            scale_lo: 0.8,
            scale_hi: 1.25,
            ..quiet()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<f64> = (0..10_000).map(|_| augment(&c, &aug, &mut rng).point(0)[0]).collect();
        let lo = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= 0.8 && hi <= 1.25);
        assert!(lo < 0.81 && hi > 1.24);
    }

    #[test]
    fn jitter_is_clipped_and_normals_untouched() {
        let vals: Vec<f64> = (0..600).map(|i| (i % 7) as f64 * 0.1).collect();
        let c = PointCloud::new(vals, 6, 0).unwrap();
        let aug = AugmentConfig {
            jitter_std: 0.5,
            jitter_clip: 0.05,
            ..quiet()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = augment(&c, &aug, &mut rng);
        for i in 0..100 {
            for d in 0..3 {
                assert!((out.point(i)[d] - c.point(i)[d]).abs() <= 0.05 + 1e-15);
            }
            assert_eq!(&out.point(i)[3..], &c.point(i)[3..]);
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(AugmentConfig { scale_lo: -0.8, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { max_drop_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
