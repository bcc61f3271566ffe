//! Spatial augmentation shared by frames, ground truth and voxel grids.

use evlight_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;

/// Crop, then horizontal flip, then `rot` quarter turns counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub hflip: bool,
    pub rot: u8,
}

impl Augment {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
            hflip: false,
            rot: 0,
        }
    }

    pub fn sample(
        rng: &mut impl Rng,
        height: usize,
        width: usize,
        crop: Option<usize>,
        cfg: &AugmentConfig,
    ) -> Self {
        let (ch, cw) = crop.map_or((height, width), |c| (c.min(height), c.min(width)));
        let (top, left) = if cfg.random_crop {
            (
                rng.random_range(0..=height - ch),
                rng.random_range(0..=width - cw),
            )
        } else {
            (0, 0)
        };
        Self {
            top,
            left,
            height: ch,
            width: cw,
            hflip: cfg.hflip && rng.random_bool(0.5),
            rot: if cfg.rotate {
                rng.random_range(0..4)
            } else {
                0
            },
        }
    }

    pub fn output_size(&self) -> (usize, usize) {
        if self.rot % 2 == 1 {
            (self.width, self.height)
        } else {
            (self.height, self.width)
        }
    }

    /// Applies the transform to every channel of a `C×H×W` tensor.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.dims3();
        if self.top + self.height > h
            || self.left + self.width > w
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{} at ({}, {}) exceeds {h}x{w}",
                self.height, self.width, self.top, self.left
            )));
        }
        let (oh, ow) = self.output_size();
        let src = t.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    // invert the rotation, then the flip, into crop coordinates
                    let (cy, cx) = match self.rot % 4 {
                        0 => (y, x),
                        1 => (x, self.width - 1 - y),
                        2 => (self.height - 1 - y, self.width - 1 - x),
                        _ => (self.height - 1 - x, y),
                    };
                    let cx = if self.hflip { self.width - 1 - cx } else { cx };
                    out.push(src[(ch * h + self.top + cy) * w + self.left + cx]);
                }
            }
        }
        Tensor::new([c, oh, ow], out)
    }
}

/// Per-(epoch, sequence) generator, so resumed runs draw the same augmentations.
pub fn sample_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | (sample as u64 & 0xffff_ffff));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new([c, h, w], (0..c * h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn quarter_turn_hand_example() {
        // [[0 1 2], [3 4 5]] rotated counter-clockwise
        let t = ramp(1, 2, 3);
        let a = Augment {
            rot: 1,
            ..Augment::identity(2, 3)
        };
        assert_eq!(a.apply(&t).unwrap().data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
        let f = Augment {
            hflip: true,
            ..Augment::identity(2, 3)
        };
        assert_eq!(f.apply(&t).unwrap().data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn crop_selects_window() {
        let t = ramp(2, 4, 4);
        let a = Augment {
            top: 1,
            left: 2,
            height: 2,
            width: 2,
            hflip: false,
            rot: 0,
        };
        assert_eq!(
            a.apply(&t).unwrap().data(),
            &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]
        );
        let oob = Augment { top: 3, ..a };
        assert!(oob.apply(&t).is_err());
    }

    proptest! {
        #[test]
        fn four_turns_and_double_flip_are_identity(h in 1usize..6, w in 1usize..6, rot in 0u8..4) {
            let t = ramp(2, h, w);
            let mut cur = t.clone();
            for _ in 0..4 {
                let a = Augment { rot: 1, ..Augment::identity(cur.shape()[1], cur.shape()[2]) };
                cur = a.apply(&cur).unwrap();
            }
            prop_assert_eq!(&cur, &t);
            let f = Augment { hflip: true, ..Augment::identity(h, w) };
            prop_assert_eq!(f.apply(&f.apply(&t).unwrap()).unwrap(), t.clone());
            // every channel receives the same permutation
            let a = Augment { rot, hflip: true, ..Augment::identity(h, w) };
            let out = a.apply(&t).unwrap();
            let n = h * w;
            for i in 0..n {
                prop_assert_eq!(out.data()[n + i], out.data()[i] + n as f64);
            }
        }

        #[test]
        fn sampled_augment_fits(h in 8usize..20, w in 8usize..20, seed in 0u64..100) {
            let mut rng = sample_rng(seed, 1, 2);
            let a = Augment::sample(&mut rng, h, w, Some(8), &AugmentConfig::default());
            prop_assert!(a.top + a.height <= h && a.left + a.width <= w);
            prop_assert_eq!((a.height, a.width), (8, 8));
            let again = Augment::sample(&mut sample_rng(seed, 1, 2), h, w, Some(8), &AugmentConfig::default());
            prop_assert_eq!(a, again);
        }
    }
}
