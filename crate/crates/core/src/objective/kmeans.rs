use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit<T> {
    pub centroids: Mat<T>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub assignments: Vec<usize>,
}

impl<T: Scalar> KMeansFit<T> {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

#[inline]
pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum()
}

/// Nearest centroid, ties to the lowest index.
pub(crate) fn nearest<T: Scalar>(x: &[T], centroids: &Mat<T>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign<T: Scalar>(points: &Mat<T>, centroids: &Mat<T>) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = (0..points.rows).into_par_iter().map(|i| nearest(points.row(i), centroids)).collect();
    // Sequential sum keeps the reduction order fixed.
    let inertia = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), inertia)
}

fn plus_plus_seed<T: Scalar, R: Rng>(points: &Mat<T>, k: usize, rng: &mut R) -> Mat<T> {
    let n = points.rows;
    let mut centroids = Mat::zeros(k, points.cols);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iters` assignment steps or when the relative inertia
/// change drops below `1e-6`. Empty clusters keep their previous centroid.
pub fn kmeans_fit<T: Scalar>(points: &Mat<T>, k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit<T>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.rows < k {
        return Err(Error::invalid(format!("{} points is fewer than k = {k}", points.rows)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut history = Vec::new();
    let mut assignments = Vec::new();
    for _ in 0..max_iters.max(1) {
        let (a, inertia) = assign(points, &centroids);
        assignments = a;
        let prev = history.last().copied();
        history.push(inertia);
        if let Some(p) = prev {
            if p == 0.0 || (p - inertia).abs() / p < REL_TOL {
                break;
            }
        }
        let mut sums = vec![0f64; k * points.cols];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * points.cols..(c + 1) * points.cols].iter_mut().zip(points.row(i)) {
                *s += x.as_f64();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * points.cols..(c + 1) * points.cols]) {
                    *dst = T::lit(s / counts[c] as f64);
                }
            }
        }
    }
    Ok(KMeansFit { centroids, inertia_history: history, assignments })
}
