//! The dissimilarity mixture model.
//!
//! `encode` soft-assigns samples with a softmax over `-alpha*d + phi`
//! (the E-step), `decode` rebuilds per-sample descriptors as convex
//! combinations of the cluster parameters, and `clustering_loss` is the
//! negated lower bound of the complete log-likelihood,
//! `sum_i alpha*d(h_i, theta_tilde_i) - phi_tilde_i`. Minimizing it by
//! gradient descent plays the role of the M-step.
//!
//! The backward pass differentiates the full graph, including the softmax's
//! dependence on the cluster parameters, and also produces the gradient
//! w.r.t. the input points so a deep encoder below can be trained
//! end-to-end.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dissim::{self, CovarianceFactor, Descriptor, DissimilarityKind};
use crate::error::{Error, Result};

/// Diagonal entries of the Cholesky factors are clamped to at least this
/// after every optimizer step.
pub const CHOLESKY_DIAG_MIN: f64 = 1e-6;

/// Cluster descriptors, reparameterized mixing biases and the softmax
/// inverse temperature.
///
/// `phi_k` absorbs `log(pi_k * b_k)`; the prior and the normalizer never
/// appear separately. `phi` is kept mean-zero by [`DmmParams::project`]
/// after every optimizer step (the softmax is shift-invariant, so this is
/// lossless for assignments while removing the unbounded loss direction).
#[derive(Debug, Clone, PartialEq)]
pub struct DmmParams {
    pub kind: DissimilarityKind,
    pub alpha: f64,
    /// K x m matrix of cluster descriptors.
    pub theta: Array2<f64>,
    /// Length-K vector of mixing biases.
    pub phi: Array1<f64>,
    /// Per-cluster Cholesky factors, Mahalanobis only.
    pub cov: Option<CovarianceFactor>,
}

impl DmmParams {
    pub fn new(
        kind: DissimilarityKind,
        alpha: f64,
        theta: Array2<f64>,
        phi: Array1<f64>,
        cov: Option<CovarianceFactor>,
    ) -> Result<Self> {
        if theta.nrows() == 0 {
            return Err(Error::EmptyInput("cluster descriptors"));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        if phi.len() != theta.nrows() {
            return Err(Error::DimensionMismatch {
                context: "mixing biases",
                expected: theta.nrows(),
                actual: phi.len(),
            });
        }
        if kind.uses_covariance() != cov.is_some() {
            return Err(Error::InvalidParameter(
                "covariance factors must be present exactly for the mahalanobis kind".into(),
            ));
        }
        if let Some(c) = &cov {
            if c.num_clusters() != theta.nrows() || c.dim() != theta.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "covariance factors",
                    expected: theta.nrows() * theta.ncols() * theta.ncols(),
                    actual: c.num_clusters() * c.dim() * c.dim(),
                });
            }
        }
        Ok(Self {
            kind,
            alpha,
            theta,
            phi,
            cov,
        })
    }

    /// Descriptors at the given centroids, zero biases, identity factors if
    /// the kind needs them.
    pub fn from_centroids(kind: DissimilarityKind, alpha: f64, centroids: Array2<f64>) -> Result<Self> {
        let k = centroids.nrows();
        let m = centroids.ncols();
        let cov = kind.uses_covariance().then(|| CovarianceFactor::identity(k, m));
        Self::new(kind, alpha, centroids, Array1::zeros(k), cov)
    }

    pub fn num_clusters(&self) -> usize {
        self.theta.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols()
    }

    /// Post-step projection: mean-zero `phi`, clamped factor diagonals.
    pub fn project(&mut self) {
        let mean = self.phi.mean().unwrap_or(0.0);
        self.phi.mapv_inplace(|v| v - mean);
        if let Some(cov) = &mut self.cov {
            cov.project(CHOLESKY_DIAG_MIN);
        }
    }

    pub fn descriptor(&self, k: usize) -> Descriptor<'_> {
        Descriptor {
            mu: self.theta.row(k),
            chol: self.cov.as_ref().map(|c| c.factor(k)),
        }
    }

    /// N x K matrix of dissimilarities between rows of `h` and clusters.
    pub fn pairwise(&self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        dissim::pairwise(&self.kind, h, self.theta.view(), self.cov.as_ref())
    }

    pub fn to_checkpoint(&self) -> DmmCheckpoint {
        let m = self.dim();
        let cov = self.cov.as_ref().map(|c| {
            let mut packed = Vec::new();
            for k in 0..c.num_clusters() {
                let f = c.factor(k);
                for i in 0..m {
                    for j in 0..=i {
                        packed.push(f[[i, j]]);
                    }
                }
            }
            packed
        });
        DmmCheckpoint {
            kind: self.kind.clone(),
            alpha: self.alpha,
            clusters: self.num_clusters(),
            dim: m,
            theta: self.theta.iter().copied().collect(),
            phi: self.phi.to_vec(),
            cov,
        }
    }

    pub fn from_checkpoint(ck: DmmCheckpoint) -> Result<Self> {
        let theta = Array2::from_shape_vec((ck.clusters, ck.dim), ck.theta)
            .map_err(|e| Error::InvalidParameter(format!("bad theta shape: {e}")))?;
        let cov = match ck.cov {
            None => None,
            Some(packed) => {
                let m = ck.dim;
                let per = m * (m + 1) / 2;
                if packed.len() != ck.clusters * per {
                    return Err(Error::InvalidParameter(format!(
                        "packed covariance has {} entries, expected {}",
                        packed.len(),
                        ck.clusters * per
                    )));
                }
                let mut factors = Array3::zeros((ck.clusters, m, m));
                let mut it = packed.into_iter();
                for k in 0..ck.clusters {
                    for i in 0..m {
                        for j in 0..=i {
                            factors[[k, i, j]] = it.next().unwrap();
                        }
                    }
                }
                Some(CovarianceFactor::new(factors)?)
            }
        };
        Self::new(ck.kind, ck.alpha, theta, Array1::from_vec(ck.phi), cov)
    }
}

/// Flat JSON-checkpoint form of [`DmmParams`]: row-major `theta`, packed
/// lower-triangular factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmmCheckpoint {
    pub kind: DissimilarityKind,
    pub alpha: f64,
    pub clusters: usize,
    pub dim: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<f64>>,
}

/// Row-stochastic posterior responsibilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignments {
    s: Array2<f64>,
}

impl Assignments {
    /// Validates that every entry is in `[0, 1]` and rows sum to one within
    /// `1e-9`.
    pub fn new(s: Array2<f64>) -> Result<Self> {
        for (i, row) in s.outer_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidParameter(format!(
                        "assignment out of [0,1] at row {i}: {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "assignment row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self { s })
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn num_samples(&self) -> usize {
        self.s.nrows()
    }

    pub fn num_clusters(&self) -> usize {
        self.s.ncols()
    }

    /// Argmax per row; ties break to the lowest cluster index.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.s
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = row[0];
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }
}

/// Soft-assigned descriptors and biases, one row per sample.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// N x m, each row in the convex hull of the cluster descriptors.
    pub theta_tilde: Array2<f64>,
    /// Length-N soft-assigned biases.
    pub phi_tilde: Array1<f64>,
}

/// E-step: `s_ik = softmax_k(-alpha * d(h_i, theta_k) + phi_k)`.
///
/// Computed with per-row max subtraction, so inverse temperatures up to 1e4
/// cannot overflow.
pub fn encode(params: &DmmParams, h: ArrayView2<f64>) -> Result<Assignments> {
    let d = params.pairwise(h)?;
    Ok(Assignments {
        s: softmax_assignments(&d, params.alpha, &params.phi),
    })
}

fn softmax_assignments(d: &Array2<f64>, alpha: f64, phi: &Array1<f64>) -> Array2<f64> {
    let (n, k) = d.dim();
    let mut s = Array2::zeros((n, k));
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            let logit = -alpha * d[[i, c]] + phi[c];
            s[[i, c]] = logit;
            if logit > max {
                max = logit;
            }
        }
        let mut sum = 0.0;
        for c in 0..k {
            let e = (s[[i, c]] - max).exp();
            s[[i, c]] = e;
            sum += e;
        }
        for c in 0..k {
            s[[i, c]] /= sum;
        }
    }
    s
}

/// Convex-combination decoder: `theta_tilde = S * Theta`, `phi_tilde = S * Phi`.
pub fn decode(params: &DmmParams, s: &Assignments) -> Result<Reconstruction> {
    if s.num_clusters() != params.num_clusters() {
        return Err(Error::DimensionMismatch {
            context: "decode assignments",
            expected: params.num_clusters(),
            actual: s.num_clusters(),
        });
    }
    Ok(Reconstruction {
        theta_tilde: s.s.dot(&params.theta),
        phi_tilde: s.s.dot(&params.phi),
    })
}

/// Everything the backward pass needs from one forward evaluation.
pub struct LossState {
    pub loss: f64,
    h: Array2<f64>,
    s: Array2<f64>,
    theta_tilde: Array2<f64>,
    /// Per-sample mixed covariance `W_tilde_i = sum_k s_ik W_k` (Mahalanobis).
    w_tilde: Option<Array3<f64>>,
    /// Per-sample `d(h_i, theta_tilde_i)`.
    d_tilde: Array1<f64>,
}

impl LossState {
    pub fn assignments(&self) -> ArrayView2<'_, f64> {
        self.s.view()
    }

    pub fn theta_tilde(&self) -> ArrayView2<'_, f64> {
        self.theta_tilde.view()
    }

    /// Per-sample mean of the loss, for reporting only; the training
    /// objective is the sum.
    pub fn mean_loss(&self) -> f64 {
        self.loss / self.h.nrows() as f64
    }
}

fn mixed_covariances(cov: &CovarianceFactor, s: &Array2<f64>) -> Array3<f64> {
    let (n, k) = s.dim();
    let m = cov.dim();
    // W_k = L_k L_k^T once per cluster, then blend per sample.
    let mut w = Array3::zeros((k, m, m));
    for c in 0..k {
        let l = cov.factor(c);
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for p in 0..m {
                    acc += l[[i, p]] * l[[j, p]];
                }
                w[[c, i, j]] = acc;
            }
        }
    }
    let mut mixed = Array3::zeros((n, m, m));
    for i in 0..n {
        for c in 0..k {
            let sik = s[[i, c]];
            for a in 0..m {
                for b in 0..m {
                    mixed[[i, a, b]] += sik * w[[c, a, b]];
                }
            }
        }
    }
    mixed
}

/// `d(h_i, theta_tilde_i)` for the Mahalanobis path, where the quadratic
/// form uses the soft-mixed covariance rather than a Cholesky factor.
fn mixed_mahalanobis(u: ArrayView1<f64>, w: &Array3<f64>, i: usize) -> f64 {
    let m = u.len();
    let mut q = 0.0;
    for a in 0..m {
        for b in 0..m {
            q += u[a] * w[[i, a, b]] * u[b];
        }
    }
    q.max(0.0).sqrt()
}

/// Forward pass of the clustering loss `sum_i alpha*d(h_i, theta_tilde_i) - phi_tilde_i`.
pub fn clustering_loss(params: &DmmParams, h: ArrayView2<f64>) -> Result<LossState> {
    let assignments = encode(params, h)?;
    let recon = decode(params, &assignments)?;
    let s = assignments.s;
    let n = h.nrows();
    let w_tilde = params
        .cov
        .as_ref()
        .map(|cov| mixed_covariances(cov, &s));
    let mut d_tilde = Array1::zeros(n);
    for i in 0..n {
        d_tilde[i] = match &w_tilde {
            Some(w) => {
                let u = Array1::from_iter(
                    h.row(i)
                        .iter()
                        .zip(recon.theta_tilde.row(i).iter())
                        .map(|(a, b)| a - b),
                );
                mixed_mahalanobis(u.view(), w, i)
            }
            None => dissim::eval(
                &params.kind,
                h.row(i),
                Descriptor::plain(recon.theta_tilde.row(i)),
            )?,
        };
    }
    let mut loss = 0.0;
    for i in 0..n {
        loss += params.alpha * d_tilde[i] - recon.phi_tilde[i];
    }
    Ok(LossState {
        loss,
        h: h.to_owned(),
        s,
        theta_tilde: recon.theta_tilde,
        w_tilde,
        d_tilde,
    })
}

/// Gradients of the (scaled) clustering loss.
#[derive(Debug, Clone)]
pub struct DmmGrads {
    pub theta: Array2<f64>,
    pub phi: Array1<f64>,
    pub cov: Option<Array3<f64>>,
    /// Gradient w.r.t. the input points, for deep encoders underneath.
    pub h: Array2<f64>,
}

/// Options for [`clustering_loss_backward_opts`].
pub struct BackwardOpts<'a> {
    /// Scale applied to the clustering loss (lambda_c in the composed loss).
    pub scale: f64,
    /// Extra upstream gradient flowing into `theta_tilde` (the deep decoder
    /// sits on top of the reconstruction in the composed model).
    pub upstream_theta_tilde: Option<ArrayView2<'a, f64>>,
    /// Ablation switch: treat the assignments as constants instead of
    /// backpropagating through the softmax.
    pub stop_gradient_assignments: bool,
}

impl Default for BackwardOpts<'_> {
    fn default() -> Self {
        Self {
            scale: 1.0,
            upstream_theta_tilde: None,
            stop_gradient_assignments: false,
        }
    }
}

/// Full-graph gradients of `clustering_loss` w.r.t. all parameters and the
/// inputs.
pub fn clustering_loss_backward(params: &DmmParams, state: &LossState) -> Result<DmmGrads> {
    clustering_loss_backward_opts(params, state, &BackwardOpts::default())
}

pub fn clustering_loss_backward_opts(
    params: &DmmParams,
    state: &LossState,
    opts: &BackwardOpts,
) -> Result<DmmGrads> {
    let (n, m) = state.h.dim();
    let k = params.num_clusters();
    let alpha = params.alpha;
    let scale = opts.scale;
    if let Some(up) = &opts.upstream_theta_tilde {
        if up.dim() != (n, m) {
            return Err(Error::DimensionMismatch {
                context: "upstream reconstruction gradient",
                expected: n * m,
                actual: up.len(),
            });
        }
    }

    let mut g_theta = Array2::<f64>::zeros((k, m));
    let mut g_phi = Array1::<f64>::zeros(k);
    let mut g_cov = params.cov.as_ref().map(|c| Array3::<f64>::zeros((k, c.dim(), c.dim())));
    let mut g_h = Array2::<f64>::zeros((n, m));

    // Cluster covariances W_k, reused for the <T_i, W_k> terms.
    let w_k = params.cov.as_ref().map(|cov| {
        let mut w = Array3::zeros((k, m, m));
        for c in 0..k {
            let l = cov.factor(c);
            for a in 0..m {
                for b in 0..m {
                    let mut acc = 0.0;
                    for p in 0..m {
                        acc += l[[a, p]] * l[[b, p]];
                    }
                    w[[c, a, b]] = acc;
                }
            }
        }
        w
    });

    // Accumulated dF/dW_k from the mixed-covariance path.
    let mut g_w = params.cov.as_ref().map(|_| Array3::<f64>::zeros((k, m, m)));

    for i in 0..n {
        let h_i = state.h.row(i);
        let tt_i = state.theta_tilde.row(i);
        let d_i = state.d_tilde[i];

        // t_i = dF/d theta_tilde_i, T_i = dF/d W_tilde_i (Mahalanobis).
        let mut t_i: Array1<f64>;
        let mut big_t: Option<Array2<f64>> = None;
        match &state.w_tilde {
            Some(w) => {
                let u = Array1::from_iter(h_i.iter().zip(tt_i.iter()).map(|(a, b)| a - b));
                let mut wu = Array1::<f64>::zeros(m);
                if d_i > 0.0 {
                    for a in 0..m {
                        for b in 0..m {
                            wu[a] += w[[i, a, b]] * u[b];
                        }
                    }
                }
                // d = sqrt(u^T W u): dd/dtheta_tilde = -Wu/d, dd/dW = u u^T / (2d)
                t_i = Array1::zeros(m);
                let mut t_mat = Array2::<f64>::zeros((m, m));
                if d_i > 0.0 {
                    for a in 0..m {
                        t_i[a] = scale * alpha * (-wu[a] / d_i);
                        for b in 0..m {
                            t_mat[[a, b]] = scale * alpha * u[a] * u[b] / (2.0 * d_i);
                        }
                    }
                }
                big_t = Some(t_mat);
                // direct dF/dh_i from the loss term: +Wu/d
                if d_i > 0.0 {
                    for a in 0..m {
                        g_h[[i, a]] += scale * alpha * wu[a] / d_i;
                    }
                }
            }
            None => {
                let desc = Descriptor::plain(tt_i);
                let gt = dissim::grad_theta(&params.kind, h_i, desc)?;
                t_i = gt.mu;
                t_i.mapv_inplace(|v| scale * alpha * v);
                let gx = dissim::grad_x(&params.kind, h_i, desc)?;
                for a in 0..m {
                    g_h[[i, a]] += scale * alpha * gx[a];
                }
            }
        }
        if let Some(up) = &opts.upstream_theta_tilde {
            for a in 0..m {
                t_i[a] += up[[i, a]];
            }
        }

        // Direct convex-combination paths: dF/dtheta_k += s_ik * t_i, etc.
        for c in 0..k {
            let sic = state.s[[i, c]];
            for a in 0..m {
                g_theta[[c, a]] += sic * t_i[a];
            }
            g_phi[c] -= scale * sic;
            if let (Some(t_mat), Some(gw)) = (&big_t, g_w.as_mut()) {
                for a in 0..m {
                    for b in 0..m {
                        gw[[c, a, b]] += sic * t_mat[[a, b]];
                    }
                }
            }
        }

        if opts.stop_gradient_assignments {
            continue;
        }

        // Softmax path: a_ik = dF/ds_ik, then b = s*(a - <a, s>) is dF/dz.
        let mut a_row = Array1::<f64>::zeros(k);
        for c in 0..k {
            let mut acc = 0.0;
            for x in 0..m {
                acc += t_i[x] * params.theta[[c, x]];
            }
            if let (Some(t_mat), Some(w)) = (&big_t, &w_k) {
                for x in 0..m {
                    for y in 0..m {
                        acc += t_mat[[x, y]] * w[[c, x, y]];
                    }
                }
            }
            acc -= scale * params.phi[c];
            a_row[c] = acc;
        }
        let mut dot = 0.0;
        for c in 0..k {
            dot += a_row[c] * state.s[[i, c]];
        }
        for c in 0..k {
            let b_ic = state.s[[i, c]] * (a_row[c] - dot);
            // z_ik = -alpha * D_ik + phi_k
            g_phi[c] += b_ic;
            let coeff = -alpha * b_ic;
            if coeff != 0.0 {
                let desc = params.descriptor(c);
                let gt = dissim::grad_theta(&params.kind, h_i, desc)?;
                for a in 0..m {
                    g_theta[[c, a]] += coeff * gt.mu[a];
                }
                if let (Some(gl), Some(gc)) = (&gt.chol, g_cov.as_mut()) {
                    for a in 0..m {
                        for b in 0..=a {
                            gc[[c, a, b]] += coeff * gl[[a, b]];
                        }
                    }
                }
                let gx = dissim::grad_x(&params.kind, h_i, desc)?;
                for a in 0..m {
                    g_h[[i, a]] += coeff * gx[a];
                }
            }
        }
    }

    // Chain dF/dW_k into the factors: dF/dL_k = 2 * sym(dF/dW_k) * L_k on
    // the lower triangle (the accumulated dF/dW_k is already symmetric).
    if let (Some(gw), Some(gc), Some(cov)) = (&g_w, g_cov.as_mut(), params.cov.as_ref()) {
        for c in 0..k {
            let l = cov.factor(c);
            for a in 0..m {
                for b in 0..=a {
                    let mut acc = 0.0;
                    for p in 0..m {
                        acc += 2.0 * gw[[c, a, p]] * l[[p, b]];
                    }
                    gc[[c, a, b]] += acc;
                }
            }
        }
    }

    Ok(DmmGrads {
        theta: g_theta,
        phi: g_phi,
        cov: g_cov,
        h: g_h,
    })
}

/// Hard prediction: `argmax_k s_ik`, ties to the lowest index.
pub fn predict(params: &DmmParams, h: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(encode(params, h)?.hard_labels())
}
