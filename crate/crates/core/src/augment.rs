//! Train-time image augmentation: horizontal flip, zero padding, random
//! crop, and random erasing, applied in that fixed order.

use alloc::format;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Augmentation parameters. Zero probabilities with zero padding and a crop
/// equal to the input make `augment` the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    /// Zero-padding added on each side before cropping.
    pub pad: usize,
    /// Output side length; cropped at a random offset from the padded image.
    pub crop_hw: usize,
    pub erase_prob: f64,
    /// Erased rectangle area as a fraction of the crop, inclusive range.
    pub erase_area: (f64, f64),
    /// Per-channel fill for erased pixels, normally the dataset mean.
    pub fill: [f64; 3],
}

impl AugmentationConfig {
    /// Identity transform for the given image side.
    pub fn none(hw: usize) -> Self {
        AugmentationConfig {
            flip_prob: 0.0,
            pad: 0,
            crop_hw: hw,
            erase_prob: 0.0,
            erase_area: (0.02, 0.2),
            fill: [0.0; 3],
        }
    }

    /// Default train-time recipe for the given image side.
    pub fn standard(hw: usize, fill: [f64; 3]) -> Self {
        AugmentationConfig {
            flip_prob: 0.5,
            pad: 2,
            crop_hw: hw,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            fill,
        }
    }

    pub fn validate(&self, hw: usize) -> Result<()> {
        if self.crop_hw == 0 || self.crop_hw > hw + 2 * self.pad {
            return Err(Error::Config(format!(
                "crop {} does not fit the padded image of side {}",
                self.crop_hw,
                hw + 2 * self.pad
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        let (lo, hi) = self.erase_area;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config("erase area range must satisfy 0 < lo <= hi < 1".into()));
        }
        Ok(())
    }
}

/// Per-channel mean over a set of images, used as the erasing fill.
pub fn channel_means(images: &[&Tensor]) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let mut count = 0.0;
    for im in images {
        for r in 0..im.rows {
            for c in 0..3 {
                sums[c] += im.at(r, c);
            }
        }
        count += im.rows as f64;
    }
    if count == 0.0 {
        return [0.0; 3];
    }
    [sums[0] / count, sums[1] / count, sums[2] / count]
}

fn hflip(image: &Tensor, hw: usize) -> Tensor {
    let mut out = Tensor::zeros(image.rows, 3);
    for y in 0..hw {
        for x in 0..hw {
            for c in 0..3 {
                *out.at_mut(y * hw + x, c) = image.at(y * hw + (hw - 1 - x), c);
            }
        }
    }
    out
}

/// Apply flip, pad, random crop, random erase in order. The input is a
/// square (hw*hw) x 3 image; the output has side `config.crop_hw`.
pub fn augment(
    image: &Tensor,
    hw: usize,
    config: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if image.rows != hw * hw || image.cols != 3 {
        return Err(Error::Contract(format!(
            "expected ({} x 3) image, got ({} x {})",
            hw * hw,
            image.rows,
            image.cols
        )));
    }
    config.validate(hw)?;

    let flipped;
    let mut current: &Tensor = image;
    if config.flip_prob > 0.0 && rng.gen::<f64>() < config.flip_prob {
        flipped = hflip(image, hw);
        current = &flipped;
    }

    let padded_hw = hw + 2 * config.pad;
    let out_hw = config.crop_hw;
    let max_off = padded_hw - out_hw;
    let (oy, ox) = if max_off > 0 {
        (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off))
    } else {
        (0, 0)
    };

    let mut out = Tensor::zeros(out_hw * out_hw, 3);
    for y in 0..out_hw {
        for x in 0..out_hw {
            // position in the padded image, then back into the source
            let py = y + oy;
            let px = x + ox;
            if py >= config.pad && px >= config.pad {
                let sy = py - config.pad;
                let sx = px - config.pad;
                if sy < hw && sx < hw {
                    for c in 0..3 {
                        *out.at_mut(y * out_hw + x, c) = current.at(sy * hw + sx, c);
                    }
                }
            }
        }
    }

    if config.erase_prob > 0.0 && rng.gen::<f64>() < config.erase_prob {
        if let Some((ey, ex, eh, ew)) = sample_erase_rect(out_hw, config.erase_area, rng) {
            for y in ey..ey + eh {
                for x in ex..ex + ew {
                    for c in 0..3 {
                        *out.at_mut(y * out_hw + x, c) = config.fill[c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sample an axis-aligned rectangle whose area fraction lies inside the
/// configured range. Returns None if no fitting rectangle is found.
fn sample_erase_rect(
    hw: usize,
    (lo, hi): (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize, usize)> {
    let total = (hw * hw) as f64;
    for _ in 0..30 {
        let area = total * (lo + (hi - lo) * rng.gen::<f64>());
        let aspect = 0.3 + rng.gen::<f64>() * 3.0;
        let eh = math::round(math::sqrt(area * aspect)) as usize;
        let ew = math::round(math::sqrt(area / aspect)) as usize;
        if eh == 0 || ew == 0 || eh > hw || ew > hw {
            continue;
        }
        let frac = (eh * ew) as f64 / total;
        if frac < lo || frac > hi {
            continue;
        }
        let ey = rng.gen_range(0..=hw - eh);
        let ex = rng.gen_range(0..=hw - ew);
        return Some((ey, ex, eh, ew));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_image(hw: usize) -> Tensor {
        let mut t = Tensor::zeros(hw * hw, 3);
        for y in 0..hw {
            for x in 0..hw {
                *t.at_mut(y * hw + x, 0) = (y * hw + x) as f64 / (hw * hw) as f64 + 0.001;
                *t.at_mut(y * hw + x, 1) = 0.5;
                *t.at_mut(y * hw + x, 2) = x as f64 / hw as f64 + 0.001;
            }
        }
        t
    }

    #[test]
    fn degenerate_config_is_identity() {
        let im = test_image(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&im, 8, &AugmentationConfig::none(8), &mut rng).unwrap();
        assert_eq!(out.data, im.data);
    }

    #[test]
    fn double_flip_is_identity() {
        let im = test_image(8);
        let mut cfg = AugmentationConfig::none(8);
        cfg.flip_prob = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = augment(&im, 8, &cfg, &mut rng).unwrap();
        assert_ne!(once.data, im.data);
        let twice = augment(&once, 8, &cfg, &mut rng).unwrap();
        assert_eq!(twice.data, im.data);
    }

    #[test]
    fn erase_replaces_one_rectangle_within_area_range() {
        let hw = 16;
        let im = test_image(hw);
        let mut cfg = AugmentationConfig::none(hw);
        cfg.erase_prob = 1.0;
        cfg.fill = [9.0, 9.0, 9.0]; // sentinel no source pixel holds
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = augment(&im, hw, &cfg, &mut rng).unwrap();
        let changed: Vec<(usize, usize)> = (0..hw)
            .flat_map(|y| (0..hw).map(move |x| (y, x)))
            .filter(|&(y, x)| out.at(y * hw + x, 0) == 9.0)
            .collect();
        assert!(!changed.is_empty());
        let ymin = changed.iter().map(|p| p.0).min().unwrap();
        let ymax = changed.iter().map(|p| p.0).max().unwrap();
        let xmin = changed.iter().map(|p| p.1).min().unwrap();
        let xmax = changed.iter().map(|p| p.1).max().unwrap();
        let area = (ymax - ymin + 1) * (xmax - xmin + 1);
        assert_eq!(changed.len(), area, "erased region is a solid rectangle");
        let frac = area as f64 / (hw * hw) as f64;
        assert!((0.02..=0.2).contains(&frac), "area fraction {frac}");
        // everything outside the rectangle is untouched
        for y in 0..hw {
            for x in 0..hw {
                if !(ymin..=ymax).contains(&y) || !(xmin..=xmax).contains(&x) {
                    assert_eq!(out.at(y * hw + x, 0), im.at(y * hw + x, 0));
                }
            }
        }
    }

    #[test]
    fn pad_and_crop_shift_content() {
        let hw = 8;
        let im = test_image(hw);
        let mut cfg = AugmentationConfig::none(hw);
        cfg.pad = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&im, hw, &cfg, &mut rng).unwrap();
        assert_eq!(out.rows, hw * hw);
        // some crop offsets differ from the centered one, so over several
        // draws at least one output differs from the input
        let mut any_shift = false;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&im, hw, &cfg, &mut rng).unwrap();
            if out.data != im.data {
                any_shift = true;
            }
        }
        assert!(any_shift);
        let _ = out;
    }

    #[test]
    fn channel_means_average_over_images() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = Tensor::from_vec(2, 3, vec![0.0, 1.0, 0.5, 0.0, 1.0, 0.5]);
        let m = channel_means(&[&a, &b]);
        assert_eq!(m, [0.5, 0.5, 0.25]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let im = test_image(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = AugmentationConfig::none(8);
        cfg.crop_hw = 13; // larger than padded side
        assert!(augment(&im, 8, &cfg, &mut rng).is_err());
        let mut cfg = AugmentationConfig::none(8);
        cfg.erase_area = (0.0, 0.2);
        assert!(augment(&im, 8, &cfg, &mut rng).is_err());
        let mut cfg = AugmentationConfig::none(8);
        cfg.flip_prob = 1.5;
        assert!(augment(&im, 8, &cfg, &mut rng).is_err());
    }
}
