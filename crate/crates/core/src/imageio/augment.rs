use rand::Rng;

use super::ImageBuffer;
use crate::error::{Error, Result};

/// Clockwise right-angle rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

/// One of the eight right-angle rotation / vertical-flip combinations.
/// The rotation is applied first, then the optional flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Augmentation {
    pub rotation: Rotation,
    pub vflip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        rotation: Rotation::R0,
        vflip: false,
    };

    pub fn all() -> [Augmentation; 8] {
        let mut out = [Self::IDENTITY; 8];
        let rotations = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = Augmentation {
                rotation: rotations[i / 2],
                vflip: i % 2 == 1,
            };
        }
        out
    }

    /// Uniform rotation, then an independent fair coin for the flip.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let rotation = match rng.gen_range(0..4) {
            0 => Rotation::R0,
            1 => Rotation::R90,
            2 => Rotation::R180,
            _ => Rotation::R270,
        };
        Augmentation {
            rotation,
            vflip: rng.gen_bool(0.5),
        }
    }

    /// Source position `(y, x)` for output position `(i, j)` of an `n×n` image.
    #[inline]
    fn source(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        let (out_h, _) = self.output_dims(h, w);
        let i = if self.vflip { out_h - 1 - i } else { i };
        match self.rotation {
            Rotation::R0 => (i, j),
            Rotation::R90 => (h - 1 - j, i),
            Rotation::R180 => (h - 1 - i, w - 1 - j),
            Rotation::R270 => (j, w - 1 - i),
        }
    }

    fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self.rotation {
            Rotation::R0 | Rotation::R180 => (h, w),
            Rotation::R90 | Rotation::R270 => (w, h),
        }
    }

    pub fn apply(self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let (h, w) = (img.height(), img.width());
        if h != w && matches!(self.rotation, Rotation::R90 | Rotation::R270) {
            return Err(Error::InvalidArgument(format!(
                "quarter-turn augmentation needs a square tile, got {h}x{w}"
            )));
        }
        let (oh, ow) = self.output_dims(h, w);
        Ok(ImageBuffer::from_fn(oh, ow, |i, j| {
            let (y, x) = self.source(i, j, h, w);
            img.pixel(y, x)
        }))
    }
}

/// Samples an augmentation from `rng` and applies it.
pub fn augment<R: Rng + ?Sized>(img: &ImageBuffer, rng: &mut R) -> Result<ImageBuffer> {
    Augmentation::sample(rng).apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn marker() -> ImageBuffer {
        // a b
        // c d
        ImageBuffer::from_vec(
            2,
            2,
            vec![
                0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3, 0.4, 0.4, 0.4,
            ],
        )
        .unwrap()
    }

    fn firsts(img: &ImageBuffer) -> Vec<f64> {
        img.pixels().map(|p| p[0]).collect()
    }

    #[test]
    fn identity_augmentation() {
        let img = marker();
        assert_eq!(Augmentation::IDENTITY.apply(&img).unwrap(), img);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let img = ImageBuffer::from_fn(5, 5, |y, x| [y as f64, x as f64, (y * x) as f64]);
        let a = Augmentation {
            rotation: Rotation::R180,
            vflip: false,
        };
        assert_eq!(a.apply(&a.apply(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn quarter_turn_of_marker() {
        // clockwise:  c a
        //             d b
        let a = Augmentation {
            rotation: Rotation::R90,
            vflip: false,
        };
        assert_eq!(firsts(&a.apply(&marker()).unwrap()), vec![0.3, 0.1, 0.4, 0.2]);
        let b = Augmentation {
            rotation: Rotation::R270,
            vflip: false,
        };
        assert_eq!(firsts(&b.apply(&marker()).unwrap()), vec![0.2, 0.4, 0.1, 0.3]);
        let f = Augmentation {
            rotation: Rotation::R0,
            vflip: true,
        };
        assert_eq!(firsts(&f.apply(&marker()).unwrap()), vec![0.3, 0.4, 0.1, 0.2]);
    }

    #[test]
    fn eight_outcomes_are_distinct_bijections() {
        let n = 4;
        let img = ImageBuffer::from_fn(n, n, |y, x| [(y * n + x) as f64, 0.0, 1.0]);
        let mut seen = std::collections::HashSet::new();
        for a in Augmentation::all() {
            let out = a.apply(&img).unwrap();
            let mut ids: Vec<usize> = out.pixels().map(|p| p[0] as usize).collect();
            seen.insert(ids.clone());
            ids.sort_unstable();
            assert_eq!(ids, (0..n * n).collect::<Vec<_>>());
            assert!(out.pixels().all(|p| p[1] == 0.0 && p[2] == 1.0));
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn non_square_quarter_turn_rejected() {
        let img = ImageBuffer::filled(2, 3, [0.5; 3]);
        let a = Augmentation {
            rotation: Rotation::R90,
            vflip: true,
        };
        assert!(a.apply(&img).is_err());
        let ok = Augmentation {
            rotation: Rotation::R180,
            vflip: true,
        };
        assert!(ok.apply(&img).is_ok());
    }

    #[test]
    fn sampling_is_seeded_and_covers_all_outcomes() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<_> = (0..200).map(|_| Augmentation::sample(&mut r1)).collect();
        let b: Vec<_> = (0..200).map(|_| Augmentation::sample(&mut r2)).collect();
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<_> = a.into_iter().collect();
        assert_eq!(distinct.len(), 8);
    }
}
