use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed;

/// `K x D` centroid matrix and a tag naming the feature space it was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    centroids: Tensor<f32>,
    pub feature_kind: String,
}

impl Codebook {
    pub fn new(centroids: Tensor<f32>, feature_kind: impl Into<String>) -> Result<Self> {
        if centroids.shape().len() != 2 || centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "codebook must be K x D, got {:?}",
                centroids.shape()
            )));
        }
        centroids.ensure_finite("codebook centroids")?;
        for a in 0..centroids.rows() {
            for b in a + 1..centroids.rows() {
                if centroids.row(a) == centroids.row(b) {
                    return Err(Error::DegenerateInput(format!(
                        "centroids {a} and {b} are identical"
                    )));
                }
            }
        }
        Ok(Self {
            centroids,
            feature_kind: feature_kind.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Tensor<f32> {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        self.centroids.row(j)
    }

    /// Nearest centroid by squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        nearest(x, &self.centroids_f64(), self.dim())
    }

    fn centroids_f64(&self) -> Vec<f64> {
        self.centroids.data().iter().map(|&v| v as f64).collect()
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &c)| (x as f64 - c).powi(2)).sum()
}

fn nearest(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Result of a traced fit: the codebook plus the inertia after seeding and
/// after every Lloyd iteration.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans_fit(frames: &Tensor<f32>, k: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    kmeans_fit_traced(frames, k, seed, max_iters).map(|f| f.codebook)
}

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iters`
/// iterations or once assignments stop changing. An empty cluster is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans_fit_traced(
    frames: &Tensor<f32>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansFit> {
    let (n, dim) = (frames.rows(), frames.cols());
    if k == 0 || n < k || dim == 0 {
        return Err(Error::DegenerateInput(format!(
            "k-means needs at least K = {k} >= 1 points, got {n}"
        )));
    }
    let mut rng = seed::rng(seed);
    let point = |i: usize| frames.row(i);

    // k-means++ seeding
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(point(first).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "fewer than K = {k} distinct points"
            )));
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // rounding can land on a zero-weight point; walk back to a real one
        while d2[pick] == 0.0 {
            pick = (pick + n - 1) % n;
        }
        let c: Vec<f64> = point(pick).iter().map(|&v| v as f64).collect();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
        centroids.extend(c);
    }

    let assign = |centroids: &[f64]| -> (Vec<usize>, Vec<f64>) {
        (0..n).map(|i| nearest(point(i), centroids, dim)).unzip()
    };
    let (mut labels, mut dists) = assign(&centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = labels[i];
            counts[j] += 1;
            for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(point(i)) {
                *s += v as f64;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None::<(usize, f64)>, |best, i| match best {
                        Some((_, bd)) if bd >= dists[i] => best,
                        _ => Some((i, dists[i])),
                    })
                    .map(|(i, _)| i)
                    .expect("n >= k leaves a free point");
                taken[far] = true;
                dists[far] = 0.0;
                for d in 0..dim {
                    centroids[j * dim + d] = point(far)[d] as f64;
                }
            }
        }
        let (new_labels, new_dists) = assign(&centroids);
        trace.push(new_dists.iter().sum());
        let converged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if converged {
            break;
        }
    }
    let centroids = Tensor::matrix(k, dim, centroids.iter().map(|&v| v as f32).collect())?;
    Ok(KMeansFit {
        codebook: Codebook::new(centroids, "")?,
        inertia: trace,
        iterations,
    })
}

/// Labels each frame with its nearest centroid (ties to the lowest index).
pub fn kmeans_assign(features: &FeatureSequence, cb: &Codebook) -> Result<Vec<usize>> {
    if features.dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            actual: features.dim(),
        });
    }
    let c = cb.centroids_f64();
    Ok((0..features.frames())
        .map(|t| nearest(features.frame(t), &c, cb.dim()).0)
        .collect())
}

/// Sum of squared distances from each frame to its assigned centroid.
pub fn inertia(frames: &Tensor<f32>, cb: &Codebook, labels: &[usize]) -> f64 {
    let c = cb.centroids_f64();
    labels
        .iter()
        .enumerate()
        .map(|(i, &j)| sq_dist(frames.row(i), &c[j * cb.dim()..(j + 1) * cb.dim()]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clouds(rng: &mut seed::Rng) -> (Tensor<f32>, [f64; 2], [f64; 2]) {
        let mut data = Vec::new();
        let mut means = [[0.0; 2]; 2];
        for (c, center) in [(0usize, 0.0f32), (1, 10.0)] {
            for _ in 0..50 {
                let r = rng.random_range(0.0..0.1f32);
                let a = rng.random_range(0.0..std::f32::consts::TAU);
                let p = [center + r * a.cos(), center + r * a.sin()];
                means[c][0] += p[0] as f64 / 50.0;
                means[c][1] += p[1] as f64 / 50.0;
                data.extend(p);
            }
        }
        (Tensor::matrix(100, 2, data).unwrap(), means[0], means[1])
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 4.0, 2.0, 4.0]).unwrap();
        let cb = kmeans_fit(&x, 1, 0, 10).unwrap();
        assert_eq!(cb.centroid(0), &[1.0, 2.0]);
    }

    #[test]
    fn separates_two_clouds() {
        let (x, m0, m1) = clouds(&mut seed::rng(9));
        let cb = kmeans_fit(&x, 2, 1, 50).unwrap();
        let near = |c: &[f32], m: [f64; 2]| {
            ((c[0] as f64 - m[0]).powi(2) + (c[1] as f64 - m[1]).powi(2)).sqrt() < 0.2
        };
        let (a, b) = (cb.centroid(0), cb.centroid(1));
        assert!((near(a, m0) && near(b, m1)) || (near(a, m1) && near(b, m0)));
        assert_eq!(kmeans_fit(&x, 2, 1, 50).unwrap(), cb);
    }

    #[test]
    fn degenerate_inputs() {
        let x = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(kmeans_fit(&x, 3, 0, 5), Err(Error::DegenerateInput(_))));
        let dup = Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(kmeans_fit(&dup, 2, 0, 5), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn assign_labels_centroids_and_checks_dims() {
        let c = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        let cb = Codebook::new(c.clone(), "test").unwrap();
        let f = FeatureSequence::new(c, 10.0, 25.0).unwrap();
        assert_eq!(kmeans_assign(&f, &cb).unwrap(), vec![0, 1, 2, 3]);
        let g = FeatureSequence::new(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(), 10.0, 25.0).unwrap();
        assert!(matches!(
            kmeans_assign(&g, &cb),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
        // equidistant from centroids 1 and 2: lowest index wins
        let tie = FeatureSequence::new(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(), 10.0, 25.0).unwrap();
        assert_eq!(kmeans_assign(&tie, &cb).unwrap(), vec![1]);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = seed::rng(11);
        let c = Tensor::matrix(7, 3, (0..21).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let cb = Codebook::new(c, "t").unwrap();
        let x = Tensor::matrix(100, 3, (0..300).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let labels = kmeans_assign(&FeatureSequence::new(x.clone(), 10.0, 25.0).unwrap(), &cb).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for j in 0..7 {
                let mut d = 0.0;
                for k in 0..3 {
                    d += (x.row(i)[k] as f64 - cb.centroid(j)[k] as f64).powi(2);
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(l, best);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn inertia_never_increases(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = seed::rng(seed);
            let x = Tensor::matrix(60, 2, (0..120).map(|_| rng.random_range(-5.0f32..5.0)).collect()).unwrap();
            let fit = kmeans_fit_traced(&x, k, seed, 30).unwrap();
            for w in fit.inertia.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            prop_assert!(fit.inertia.last().unwrap() <= &fit.inertia[0]);
            let labels = kmeans_assign(&FeatureSequence::new(x.clone(), 10.0, 25.0).unwrap(), &fit.codebook).unwrap();
            for (i, &l) in labels.iter().enumerate() {
                let d = |j: usize| (0..2).map(|c| (x.row(i)[c] as f64 - fit.codebook.centroid(j)[c] as f64).powi(2)).sum::<f64>();
                for j in 0..k {
                    prop_assert!(d(l) <= d(j));
                }
            }
        }
    }
}
