//! Lloyd's K-means with k-means++ seeding: the initializer for the mixture
//! model and the shallow comparison row.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dissim::DissimilarityKind;
use crate::dmm::DmmParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KmeansOpts {
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
    pub seed: u64,
}

impl Default for KmeansOpts {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            n_init: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning run; Lloyd
    /// guarantees it is non-increasing.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn plus_plus_seeding(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let m = x.ncols();
    let mut centroids = Array2::zeros((k, m));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut dist2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            let d = sq_dist(x.row(i), centroids.row(c));
            if d < dist2[i] {
                dist2[i] = d;
            }
        }
    }
    centroids
}

fn lloyd(
    x: ArrayView2<f64>,
    mut centroids: Array2<f64>,
    max_iter: usize,
    tol: f64,
) -> KmeansResult {
    let n = x.nrows();
    let m = x.ncols();
    let k = centroids.nrows();
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        // assignment step; ties go to the lowest index
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = sq_dist(x.row(i), centroids.row(0));
            for c in 1..k {
                let d = sq_dist(x.row(i), centroids.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            labels[i] = best;
            inertia += best_d;
        }
        history.push(inertia);

        // update step
        let mut sums = Array2::<f64>::zeros((k, m));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..m {
                sums[[labels[i], j]] += x[[i, j]];
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its
                // assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(x.row(a), centroids.row(labels[a]))
                            .total_cmp(&sq_dist(x.row(b), centroids.row(labels[b])))
                    })
                    .unwrap();
                let moved = sq_dist(centroids.row(c), x.row(far)).sqrt();
                shift = shift.max(moved);
                centroids.row_mut(c).assign(&x.row(far));
            } else {
                let mut moved = 0.0;
                for j in 0..m {
                    let new = sums[[c, j]] / counts[c] as f64;
                    let d = new - centroids[[c, j]];
                    moved += d * d;
                    centroids[[c, j]] = new;
                }
                shift = shift.max(moved.sqrt());
            }
        }
        if shift < tol {
            break;
        }
    }
    // final assignment with the converged centroids
    let mut inertia = 0.0;
    for i in 0..n {
        let mut best = 0;
        let mut best_d = sq_dist(x.row(i), centroids.row(0));
        for c in 1..k {
            let d = sq_dist(x.row(i), centroids.row(c));
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        labels[i] = best;
        inertia += best_d;
    }
    history.push(inertia);
    KmeansResult {
        centroids,
        labels,
        inertia,
        inertia_history: history,
    }
}

/// Best of `n_init` Lloyd runs by inertia (ties keep the earlier run), each
/// started from k-means++ seeds.
pub fn kmeans(x: ArrayView2<f64>, k: usize, opts: &KmeansOpts) -> Result<KmeansResult> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if x.nrows() < k {
        return Err(Error::InvalidParameter(format!(
            "need at least k={k} samples, got {}",
            x.nrows()
        )));
    }
    if opts.n_init == 0 {
        return Err(Error::InvalidParameter("n_init must be at least 1".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<KmeansResult> = None;
    for _ in 0..opts.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let seeds = plus_plus_seeding(x, k, &mut rng);
        let run = lloyd(x, seeds, opts.max_iter, opts.tol);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Mixture parameters at the K-means solution: descriptors at the
/// centroids, zero biases, identity factors when the dissimilarity carries
/// a covariance. For non-Euclidean dissimilarities this is the starting
/// point of the subsequent shallow training run.
pub fn init_dmm_from_kmeans(
    kind: DissimilarityKind,
    alpha: f64,
    centroids: Array2<f64>,
) -> Result<DmmParams> {
    DmmParams::from_centroids(kind, alpha, centroids)
}
