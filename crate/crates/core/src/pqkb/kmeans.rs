//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

use super::PqError;
use crate::linalg::{argmin, squared_l2, Matrix};
use crate::rng;

/// Result of [`kmeans_fit`].
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Matrix,
    /// Final assignment of every point.
    pub assignments: Vec<usize>,
    /// Objective (sum of squared distances to the assigned centroid) after
    /// each assignment step, in order.
    pub objective: Vec<f64>,
}

impl KMeansFit {
    pub fn final_objective(&self) -> f64 {
        self.objective.last().copied().unwrap_or(0.0)
    }
}

/// Assigns every point to its nearest centroid (lowest index on ties).
/// Returns the assignments, each point's squared distance, and the total.
pub fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    let mut total = 0.0;
    for p in points.iter_rows() {
        let (i, d) = argmin(centroids.iter_rows().map(|c| squared_l2(p, c))).expect("k >= 1");
        labels.push(i);
        dists.push(d);
        total += d;
    }
    (labels, dists, total)
}

fn plus_plus_init<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| squared_l2(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against landing on a zero-weight tail through rounding
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point already coincides with a centroid
            chosen[0]
        };
        chosen.push(next);
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_l2(p, points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Fits `k` centroids to `points`. Deterministic for a given `seed`.
///
/// Empty clusters take the point currently farthest from its centroid, so
/// `N < k` is allowed and duplicates the data as needed.
pub fn kmeans_fit(points: &Matrix, k: usize, iters: usize, seed: u64) -> Result<KMeansFit, PqError> {
    if points.rows() == 0 {
        return Err(PqError::Validation("k-means needs at least one point".into()));
    }
    if k == 0 {
        return Err(PqError::Validation("k-means needs k >= 1".into()));
    }
    if !points.is_finite() {
        return Err(PqError::Validation("k-means input contains non-finite values".into()));
    }
    let mut r = rng::stream(seed, &[]);
    let mut centroids = plus_plus_init(points, k, &mut r);
    let (mut labels, mut dists, total) = assign(points, &centroids);
    let mut objective = vec![total];

    for _ in 0..iters {
        let dim = points.cols();
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter_rows().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
                centroids.row_mut(c).copy_from_slice(points.row(far));
                dists[far] = 0.0;
            }
        }
        let (new_labels, new_dists, total) = assign(points, &centroids);
        objective.push(total);
        let converged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if converged {
            break;
        }
    }
    Ok(KMeansFit { centroids, assignments: labels, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn three_points_three_clusters() {
        let pts = Matrix::from_rows(&[[0.0, 1.0], [5.0, -2.0], [3.0, 3.0]]).unwrap();
        let fit = kmeans_fit(&pts, 3, 5, 11).unwrap();
        assert_eq!(fit.final_objective(), 0.0);
        let mut got: Vec<Vec<f64>> = fit.centroids.iter_rows().map(<[f64]>::to_vec).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![vec![0.0, 1.0], vec![3.0, 3.0], vec![5.0, -2.0]]);
    }

    #[test]
    fn identical_points_collapse_all_centroids() {
        let pts = Matrix::from_rows(&vec![[1.5, -0.5]; 6]).unwrap();
        let fit = kmeans_fit(&pts, 4, 10, 3).unwrap();
        for c in fit.centroids.iter_rows() {
            assert_eq!(c, &[1.5, -0.5]);
        }
    }

    #[test]
    fn fewer_points_than_clusters_is_allowed() {
        let pts = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let fit = kmeans_fit(&pts, 5, 4, 0).unwrap();
        assert_eq!(fit.centroids.rows(), 5);
        assert_eq!(fit.final_objective(), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let pts = Matrix::from_rows(&[[0.0], [f64::NAN]]).unwrap();
        assert!(matches!(kmeans_fit(&pts, 1, 1, 0), Err(PqError::Validation(_))));
    }

    fn blobs(seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[]);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rows = Vec::new();
        for cx in [-5.0, 5.0] {
            for _ in 0..200 {
                rows.push([cx + noise.sample(&mut r), noise.sample(&mut r)]);
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn two_blobs_match_brute_force_means() {
        let pts = blobs(99);
        let fit = kmeans_fit(&pts, 2, 50, 5).unwrap();
        // oracle: the blobs are separated by 10σ, so the exhaustive nearest-mean
        // partition is by sign of x; compute exact means of each side.
        let mut means = [[0.0f64; 2]; 2];
        let mut counts = [0usize; 2];
        for p in pts.iter_rows() {
            let side = usize::from(p[0] > 0.0);
            means[side][0] += p[0];
            means[side][1] += p[1];
            counts[side] += 1;
        }
        for side in 0..2 {
            means[side][0] /= counts[side] as f64;
            means[side][1] /= counts[side] as f64;
            let closest = fit
                .centroids
                .iter_rows()
                .map(|c| squared_l2(c, &means[side]).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.2, "side {side}: {closest}");
        }
    }

    #[test]
    fn objective_never_increases() {
        let mut r = rng::stream(4, &[]);
        for trial in 0..20 {
            let rows: Vec<[f64; 3]> = (0..60)
                .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
                .collect();
            let pts = Matrix::from_rows(&rows).unwrap();
            let fit = kmeans_fit(&pts, 7, 30, trial).unwrap();
            for w in fit.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let pts = blobs(1);
        let a = kmeans_fit(&pts, 4, 10, 8).unwrap();
        let b = kmeans_fit(&pts, 4, 10, 8).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }
}
