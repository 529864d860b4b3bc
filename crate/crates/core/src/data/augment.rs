//! Deterministic image augmentations (horizontal flip, pad-and-crop).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::seed::{self, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Number of views per example, `K >= 1`. View 0 is the identity.
    pub multiplicity: usize,
    pub horizontal_flip: bool,
    /// Zero-pad by this many pixels and crop back at a random offset;
    /// 0 disables the crop.
    pub pad: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            multiplicity: 1,
            horizontal_flip: false,
            pad: 0,
        }
    }
}

/// Identifies one augmented view: which example, at which step, which copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentIds {
    pub example: u64,
    pub step: u64,
    pub copy: u64,
}

/// Mirror a `[C, H, W]` image left to right.
pub fn horizontal_flip(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let w = shape[shape.len() - 1];
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(w).zip(x.data().chunks_exact(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

/// Translate by `(dy, dx)` with zero fill; the crop of a zero-padded image.
fn shift(x: &Tensor, dy: isize, dx: isize) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let mut out = Tensor::zeros(s.to_vec());
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let base = ch * (h * w) as usize;
        for i in 0..h {
            let si = i + dy;
            if !(0..h).contains(&si) {
                continue;
            }
            for j in 0..w {
                let sj = j + dx;
                if (0..w).contains(&sj) {
                    dst[base + (i * w + j) as usize] = src[base + (si * w + sj) as usize];
                }
            }
        }
    }
    out
}

fn check(example: &Tensor, spec: &AugmentSpec) -> Result<()> {
    if spec.multiplicity == 0 {
        return Err(DataError::Augment("multiplicity must be >= 1".into()));
    }
    let s = example.shape();
    if s.len() != 3 {
        return Err(DataError::Augment(format!("expected a [C, H, W] image, got {s:?}")));
    }
    if spec.pad > s[1] || spec.pad > s[2] {
        return Err(DataError::Augment(format!(
            "pad {} larger than {}x{} image",
            spec.pad, s[1], s[2]
        )));
    }
    Ok(())
}

fn view(example: &Tensor, spec: &AugmentSpec, ids: AugmentIds, seed_value: u64) -> Tensor {
    if ids.copy == 0 {
        return example.clone();
    }
    let mut rng = seed::stream(seed_value, &[tag::AUGMENT, ids.example, ids.step, ids.copy]);
    let mut out = if spec.horizontal_flip && rng.random::<bool>() {
        horizontal_flip(example)
    } else {
        example.clone()
    };
    if spec.pad > 0 {
        let p = spec.pad as i64;
        let dy = rng.random_range(-p..=p) as isize;
        let dx = rng.random_range(-p..=p) as isize;
        out = shift(&out, dy, dx);
    }
    out
}

/// `K` augmented copies of a `[C, H, W]` example; copy 0 is the identity.
/// The result depends only on `(example, spec, ids.example, ids.step, seed)`.
pub fn augment(example: &Tensor, spec: &AugmentSpec, example_id: u64, step: u64, seed_value: u64) -> Result<Vec<Tensor>> {
    check(example, spec)?;
    Ok((0..spec.multiplicity as u64)
        .map(|copy| {
            view(
                example,
                spec,
                AugmentIds {
                    example: example_id,
                    step,
                    copy,
                },
                seed_value,
            )
        })
        .collect())
}

/// [`augment`] stacked into one `[K, C, H, W]` tensor.
pub fn augment_views(example: &Tensor, spec: &AugmentSpec, example_id: u64, step: u64, seed_value: u64) -> Result<Tensor> {
    let views = augment(example, spec, example_id, step, seed_value)?;
    Ok(Tensor::stack(&views).expect("views share a shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        let data = (0..2 * 4 * 5).map(|i| (i as f64) / 40.0).collect();
        Tensor::new(vec![2, 4, 5], data).unwrap()
    }

    #[test]
    fn single_copy_is_identity() {
        let x = image();
        let spec = AugmentSpec {
            multiplicity: 1,
            horizontal_flip: true,
            pad: 2,
        };
        assert_eq!(augment(&x, &spec, 3, 7, 1).unwrap(), vec![x]);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = image();
        let f = horizontal_flip(&x);
        assert_ne!(f, x);
        assert_eq!(f.data()[0], x.data()[4]);
        assert_eq!(horizontal_flip(&f), x);
    }

    #[test]
    fn views_are_reproducible_and_in_range() {
        let x = image();
        let spec = AugmentSpec {
            multiplicity: 6,
            horizontal_flip: true,
            pad: 1,
        };
        let a = augment(&x, &spec, 11, 2, 99).unwrap();
        let b = augment(&x, &spec, 11, 2, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], x);
        for v in &a {
            assert_eq!(v.shape(), x.shape());
            assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        let other_step = augment(&x, &spec, 11, 3, 99).unwrap();
        assert_ne!(a, other_step);
    }

    #[test]
    fn oversized_pad_is_rejected() {
        let spec = AugmentSpec {
            multiplicity: 2,
            horizontal_flip: false,
            pad: 5,
        };
        assert!(matches!(augment(&image(), &spec, 0, 0, 0), Err(DataError::Augment(_))));
    }

    #[test]
    fn shift_moves_content() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(shift(&x, 1, 0).data(), &[0.3, 0.4, 0.0, 0.0]);
        assert_eq!(shift(&x, 0, -1).data(), &[0.0, 0.1, 0.0, 0.3]);
    }
}
