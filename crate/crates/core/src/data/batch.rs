use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index batches over `0..n`; the last batch may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl Batches {
    /// Dataset order.
    pub fn sequential(n: usize, size: usize) -> Self {
        Batches {
            order: (0..n).collect(),
            size: size.max(1),
            pos: 0,
        }
    }

    pub fn shuffled<R: Rng>(n: usize, size: usize, rng: &mut R) -> Self {
        let mut b = Self::sequential(n, size);
        b.order.shuffle(rng);
        b
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Zero-pads every image by `pad` pixels and crops back to its original size
/// at a random offset.
pub fn pad_crop<T: Scalar, R: Rng>(x: &Tensor<T>, pad: usize, rng: &mut R) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape,
            reason: "pad_crop expects n×c×h×w".into(),
        });
    }
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for i in 0..n {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[base + y * w + xx] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(&shape, out)
}
