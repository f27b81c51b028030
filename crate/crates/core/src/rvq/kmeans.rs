//! Deterministic k-means used for per-stage codebook learning.
//!
//! Fixed 20 iterations, initialization by sampling distinct points, empty
//! clusters reseeded to the point farthest from its nearest centroid, ties
//! always broken toward the lowest index.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;
use crate::parallel;

pub const KMEANS_ITERS: usize = 20;

#[inline]
pub fn dist_sq(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Index of the nearest centroid row; ties go to the lowest index.
#[inline]
pub fn nearest(centroids: &Tensor<f32>, point: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = dist_sq(centroids.row(0), point);
    for c in 1..centroids.rows() {
        let d = dist_sq(centroids.row(c), point);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Train `k` centroids of dimension `dim` on `points` (row-major N×dim).
///
/// Deterministic for a fixed seed regardless of thread count.
pub fn kmeans(points: &[f32], n: usize, dim: usize, k: usize, seed: u64) -> Tensor<f32> {
    assert!(n >= 1 && k >= 1 && k <= n, "kmeans: k={k} points={n}");
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    // Init: shuffle indices, prefer pairwise-distinct sample values.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&j| row(j) != row(i)) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        chosen.push(i); // degenerate data: allow duplicate centroids
    }
    let mut centroids = Tensor::zeros(&[k, dim]);
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(row(i));
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        // Assignment step (data-parallel, order-stable).
        let assigned = parallel::map_indexed(n, |i| {
            let a = nearest(&centroids, row(i));
            (a, dist_sq(centroids.row(a), row(i)))
        });
        for (i, (a, _)) in assigned.iter().enumerate() {
            assignment[i] = *a;
        }

        // Update step.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignment[i];
            counts[a] += 1;
            let r = row(i);
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(r) {
                *s += v as f64;
            }
        }
        // Reseed empty clusters to the farthest points, one each, in
        // cluster-index order.
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let crow = centroids.row_mut(c);
                for (j, slot) in crow.iter_mut().enumerate() {
                    *slot = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            } else {
                let mut far_i = usize::MAX;
                let mut far_d = -1.0f32;
                for (i, (_, d)) in assigned.iter().enumerate() {
                    if *d > far_d && !taken.contains(&i) {
                        far_d = *d;
                        far_i = i;
                    }
                }
                if far_i != usize::MAX {
                    taken.push(far_i);
                    centroids.row_mut(c).copy_from_slice(row(far_i));
                }
            }
        }
    }
    centroids
}
