//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each centroid update.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centroids.row(c)));
        }
    }
    centroids
}

pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} for {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(x, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(x.row(i), &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            dist[i] = d;
        }
        if !changed || iterations >= max_iter {
            break;
        }
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &x.row(i));
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]))
                    .expect("k ≤ n leaves a cluster with two points");
                let old = assignment[far];
                sums.row_mut(old).scaled_add(-1.0, &x.row(far));
                counts[old] -= 1;
                sums.row_mut(c).assign(&x.row(far));
                counts[c] = 1;
                assignment[far] = c;
                dist[far] = 0.0;
            }
        }
        for c in 0..k {
            let mean = &sums.row(c) / counts[c] as f64;
            centroids.row_mut(c).assign(&mean);
        }
        trace.push((0..n).map(|i| sq_dist(x.row(i), centroids.row(assignment[i]))).sum());
    }
    let inertia = dist.iter().sum();
    Ok(KMeansResult {
        assignment,
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::StandardNormal;

    #[test]
    fn single_cluster_centroid_is_mean() {
        let x = array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]];
        let r = kmeans(&x, 1, 0, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.assignment, vec![0, 0, 0]);
        assert_eq!(r.centroids.row(0).to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn separated_pairs() {
        let x = array![[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 10.1]];
        let r = kmeans(&x, 2, 3, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
    }

    fn blobs() -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centres = [(0.0, 0.0), (4.0, 0.0), (2.0, 4.0)];
        Array2::from_shape_fn((12, 2), |(i, d)| {
            let c = centres[i % 3];
            let base = if d == 0 { c.0 } else { c.1 };
            base + 0.5 * rng.sample::<f64, _>(StandardNormal)
        })
    }

    #[test]
    fn inertia_near_best_of_restarts_and_monotone() {
        let x = blobs();
        let best = (0..50)
            .map(|s| kmeans(&x, 3, 100 + s, DEFAULT_MAX_ITER).unwrap().inertia)
            .fold(f64::INFINITY, f64::min);
        let r = kmeans(&x, 3, 0, DEFAULT_MAX_ITER).unwrap();
        assert!(r.inertia <= best * 1.01, "{} vs {best}", r.inertia);
        for w in r.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn duplicate_points_reseed_empty_clusters() {
        let x = array![[0.0], [0.0], [0.0], [1.0]];
        let r = kmeans(&x, 3, 1, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.assignment.len(), 4);
        assert!(kmeans(&x, 5, 1, DEFAULT_MAX_ITER).is_err());
    }
}
