//! Mini-batch index streams and image augmentation.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, InputShape};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Every image once per epoch, shuffled: classes appear at their natural frequency.
    Uniform,
    /// `n` draws per epoch with image probability proportional to `1 / N_y`.
    ClassBalanced,
}

/// Produces one epoch of index batches at a time.
#[derive(Debug, Clone)]
pub struct Loader {
    sampling: Sampling,
    batch_size: usize,
    by_class: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

impl Loader {
    pub fn new<T: Scalar>(dataset: &Dataset<T>, batch_size: usize, sampling: Sampling) -> Self {
        Loader {
            sampling,
            batch_size,
            by_class: dataset.indices_by_class(),
            labels: dataset.labels.clone(),
        }
    }

    /// Index batches for one epoch. A trailing single-sample batch is
    /// dropped because batch statistics need two rows.
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let n = self.labels.len();
        let order: Vec<usize> = match self.sampling {
            Sampling::Uniform => {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(rng);
                o
            }
            Sampling::ClassBalanced => {
                let present: Vec<&Vec<usize>> = self.by_class.iter().filter(|c| !c.is_empty()).collect();
                (0..n)
                    .map(|_| {
                        let class = present[rng.random_range(0..present.len())];
                        class[rng.random_range(0..class.len())]
                    })
                    .collect()
            }
        };
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
        }
        batches
    }

    pub fn class_histogram(&self, batches: &[Vec<usize>], class_count: usize) -> Vec<usize> {
        let mut h = vec![0; class_count];
        for &i in batches.iter().flatten() {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// Pearson chi-square statistic of `observed` counts against `expected` proportions.
pub fn chi_square(observed: &[usize], expected_counts: &[usize]) -> f64 {
    let total_obs: f64 = observed.iter().sum::<usize>() as f64;
    let total_exp: f64 = expected_counts.iter().sum::<usize>() as f64;
    observed
        .iter()
        .zip(expected_counts)
        .filter(|(_, &e)| e > 0)
        .map(|(&o, &e)| {
            let e = e as f64 * total_obs / total_exp;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

const PAD: usize = 4;

/// Gathers rows `indices`, applying a random padded crop and horizontal
/// flip to each image when `augment` is set.
pub fn gather<T: Scalar>(dataset: &Dataset<T>, indices: &[usize], augment: bool, rng: &mut impl Rng) -> Array2<T> {
    let mut out = Array2::zeros((indices.len(), dataset.input_dim()));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
        match (augment, dataset.shape) {
            (
                true,
                InputShape::Image {
                    channels,
                    height,
                    width,
                },
            ) => {
                let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
                let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
                let flip = rng.random_bool(0.5);
                crop_flip(dataset.row(i), dst.as_slice_mut().expect("contiguous row"), (channels, height, width), dy, dx, flip);
            }
            _ => dst.assign(&dataset.row(i)),
        }
    }
    out
}

fn crop_flip<T: Scalar>(
    src: ArrayView1<'_, T>,
    dst: &mut [T],
    (c, h, w): (usize, usize, usize),
    dy: isize,
    dx: isize,
    flip: bool,
) {
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x } as isize + dx;
                let sy = y as isize + dy;
                dst[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}
