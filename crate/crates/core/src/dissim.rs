//! Catalog of convex, differentiable dissimilarity functions.
//!
//! Every kind evaluates `d(x, theta)` between a sample `x` and a cluster
//! descriptor `theta`, with analytic gradients w.r.t. both arguments.
//! Descriptors are a mean vector `mu`, plus a lower-triangular Cholesky
//! factor for the Mahalanobis form. All evaluations are pure functions;
//! `pairwise` batches them without changing a single bit of the result.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arguments of `log`/division are floored at this value once the positivity
/// precondition has passed, so mid-training underflow cannot produce NaNs.
const POSITIVITY_FLOOR: f64 = 1e-12;

/// The dissimilarity functions understood by the mixture model.
///
/// All are convex in the cluster descriptor on their stated domain
/// (Mahalanobis in the mean for a fixed factor). `NegDotProduct` is the one
/// signed case: it is `-x . mu`, so smaller still means closer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "period")]
pub enum DissimilarityKind {
    #[serde(rename = "euclidean")]
    Euclidean,
    #[serde(rename = "sq_euclidean")]
    SquaredEuclidean,
    #[serde(rename = "manhattan")]
    Manhattan,
    #[serde(rename = "neg_dot")]
    NegDotProduct,
    #[serde(rename = "itakura_saito")]
    ItakuraSaito,
    #[serde(rename = "kl")]
    KullbackLeibler,
    #[serde(rename = "mahalanobis")]
    Mahalanobis,
    /// Flat-torus metric with the given period per dimension.
    #[serde(rename = "periodic_euclidean")]
    PeriodicEuclidean(Vec<f64>),
}

impl DissimilarityKind {
    /// The lowercase tag used in config files.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Euclidean => "euclidean",
            Self::SquaredEuclidean => "sq_euclidean",
            Self::Manhattan => "manhattan",
            Self::NegDotProduct => "neg_dot",
            Self::ItakuraSaito => "itakura_saito",
            Self::KullbackLeibler => "kl",
            Self::Mahalanobis => "mahalanobis",
            Self::PeriodicEuclidean(_) => "periodic_euclidean",
        }
    }

    /// Build a kind from its config tag. `periodic_euclidean` needs a period
    /// per dimension; every other tag must come without one.
    pub fn from_tag(tag: &str, period: Option<Vec<f64>>) -> Result<Self> {
        let kind = match tag {
            "euclidean" => Self::Euclidean,
            "sq_euclidean" => Self::SquaredEuclidean,
            "manhattan" => Self::Manhattan,
            "neg_dot" => Self::NegDotProduct,
            "itakura_saito" => Self::ItakuraSaito,
            "kl" => Self::KullbackLeibler,
            "mahalanobis" => Self::Mahalanobis,
            "periodic_euclidean" => {
                let period = period.ok_or_else(|| {
                    Error::InvalidParameter(
                        "periodic_euclidean requires a period per dimension".into(),
                    )
                })?;
                if period.iter().any(|&p| !(p > 0.0)) {
                    return Err(Error::InvalidParameter(
                        "periodic_euclidean periods must be positive".into(),
                    ));
                }
                return Ok(Self::PeriodicEuclidean(period));
            }
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown dissimilarity tag: {other:?}"
                )))
            }
        };
        if period.is_some() {
            return Err(Error::InvalidParameter(format!(
                "dissimilarity {tag:?} does not take a period"
            )));
        }
        Ok(kind)
    }

    /// Whether samples and descriptors must be strictly positive.
    pub fn requires_positive(&self) -> bool {
        matches!(self, Self::ItakuraSaito | Self::KullbackLeibler)
    }

    /// Whether descriptors carry a per-cluster covariance factor.
    pub fn uses_covariance(&self) -> bool {
        matches!(self, Self::Mahalanobis)
    }
}

/// Per-cluster lower-triangular Cholesky factors `L_k` with positive
/// diagonals, so `W_k = L_k L_k^T` stays symmetric positive definite no
/// matter what unconstrained gradient steps do to the entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFactor {
    factors: Array3<f64>,
}

impl CovarianceFactor {
    /// Identity factors for `k` clusters in `m` dimensions.
    pub fn identity(k: usize, m: usize) -> Self {
        let mut factors = Array3::zeros((k, m, m));
        for c in 0..k {
            for j in 0..m {
                factors[[c, j, j]] = 1.0;
            }
        }
        Self { factors }
    }

    /// Wrap explicit factors, validating lower-triangularity and positive
    /// diagonals.
    pub fn new(factors: Array3<f64>) -> Result<Self> {
        let (k, m, m2) = factors.dim();
        if m != m2 {
            return Err(Error::DimensionMismatch {
                context: "covariance factor",
                expected: m,
                actual: m2,
            });
        }
        for c in 0..k {
            for i in 0..m {
                if factors[[c, i, i]] <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "cholesky factor {c} has non-positive diagonal at {i}"
                    )));
                }
                for j in (i + 1)..m {
                    if factors[[c, i, j]] != 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "cholesky factor {c} has non-zero entry above the diagonal at ({i},{j})"
                        )));
                    }
                }
            }
        }
        Ok(Self { factors })
    }

    pub fn num_clusters(&self) -> usize {
        self.factors.dim().0
    }

    pub fn dim(&self) -> usize {
        self.factors.dim().1
    }

    /// The factor `L_k` for one cluster.
    pub fn factor(&self, k: usize) -> ArrayView2<'_, f64> {
        self.factors.index_axis(ndarray::Axis(0), k)
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.factors
    }

    pub fn as_array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.factors
    }

    /// Clamp diagonals to at least `min` and zero anything that drifted above
    /// the diagonal; called after each optimizer step.
    pub fn project(&mut self, min: f64) {
        let (k, m, _) = self.factors.dim();
        for c in 0..k {
            for i in 0..m {
                if self.factors[[c, i, i]] < min {
                    self.factors[[c, i, i]] = min;
                }
                for j in (i + 1)..m {
                    self.factors[[c, i, j]] = 0.0;
                }
            }
        }
    }
}

/// A borrowed cluster descriptor: the mean row, plus the Cholesky factor for
/// Mahalanobis.
#[derive(Debug, Clone, Copy)]
pub struct Descriptor<'a> {
    pub mu: ArrayView1<'a, f64>,
    pub chol: Option<ArrayView2<'a, f64>>,
}

impl<'a> Descriptor<'a> {
    pub fn plain(mu: ArrayView1<'a, f64>) -> Self {
        Self { mu, chol: None }
    }

    pub fn with_factor(mu: ArrayView1<'a, f64>, chol: ArrayView2<'a, f64>) -> Self {
        Self {
            mu,
            chol: Some(chol),
        }
    }
}

/// Gradient of a dissimilarity w.r.t. the cluster descriptor. `chol` is the
/// lower-triangular gradient block, present only for Mahalanobis.
#[derive(Debug, Clone)]
pub struct ThetaGrad {
    pub mu: Array1<f64>,
    pub chol: Option<Array2<f64>>,
}

fn check_dims(x: ArrayView1<f64>, th: &Descriptor) -> Result<()> {
    if x.len() != th.mu.len() {
        return Err(Error::DimensionMismatch {
            context: "dissimilarity arguments",
            expected: x.len(),
            actual: th.mu.len(),
        });
    }
    if let Some(chol) = th.chol {
        if chol.nrows() != x.len() || chol.ncols() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "cholesky factor",
                expected: x.len(),
                actual: chol.nrows(),
            });
        }
    }
    Ok(())
}

fn check_positive(kind: &'static str, v: ArrayView1<f64>) -> Result<()> {
    for (i, &value) in v.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::Domain {
                kind,
                value,
                index: i,
            });
        }
    }
    Ok(())
}

fn check_period(period: &[f64], m: usize) -> Result<()> {
    if period.len() != m {
        return Err(Error::DimensionMismatch {
            context: "periodic_euclidean period",
            expected: m,
            actual: period.len(),
        });
    }
    Ok(())
}

/// Signed displacement wrapped into `[-period/2, period/2)`.
fn wrap_signed(delta: f64, period: f64) -> f64 {
    (delta + 0.5 * period).rem_euclid(period) - 0.5 * period
}

/// Evaluate `d(x, theta)`.
pub fn eval(kind: &DissimilarityKind, x: ArrayView1<f64>, th: Descriptor) -> Result<f64> {
    check_dims(x, &th)?;
    let mu = th.mu;
    match kind {
        DissimilarityKind::Euclidean => {
            let mut sum = 0.0;
            for (a, b) in x.iter().zip(mu.iter()) {
                let d = a - b;
                sum += d * d;
            }
            Ok(sum.sqrt())
        }
        DissimilarityKind::SquaredEuclidean => {
            let mut sum = 0.0;
            for (a, b) in x.iter().zip(mu.iter()) {
                let d = a - b;
                sum += d * d;
            }
            Ok(sum)
        }
        DissimilarityKind::Manhattan => {
            Ok(x.iter().zip(mu.iter()).map(|(a, b)| (a - b).abs()).sum())
        }
        DissimilarityKind::NegDotProduct => {
            Ok(-x.iter().zip(mu.iter()).map(|(a, b)| a * b).sum::<f64>())
        }
        DissimilarityKind::ItakuraSaito => {
            check_positive("itakura_saito", x)?;
            check_positive("itakura_saito", mu)?;
            let mut sum = 0.0;
            for (&a, &b) in x.iter().zip(mu.iter()) {
                let a = a.max(POSITIVITY_FLOOR);
                let b = b.max(POSITIVITY_FLOOR);
                let ratio = a / b;
                sum += ratio - ratio.ln() - 1.0;
            }
            Ok(sum)
        }
        DissimilarityKind::KullbackLeibler => {
            check_positive("kl", x)?;
            check_positive("kl", mu)?;
            let mut sum = 0.0;
            for (&a, &b) in x.iter().zip(mu.iter()) {
                let a = a.max(POSITIVITY_FLOOR);
                let b = b.max(POSITIVITY_FLOOR);
                sum += a * (a / b).ln();
            }
            Ok(sum)
        }
        DissimilarityKind::Mahalanobis => {
            let chol = th.chol.ok_or_else(|| {
                Error::InvalidParameter("mahalanobis requires a covariance factor".into())
            })?;
            // d = ||L^T (x - mu)|| since (x-mu)^T L L^T (x-mu) = ||L^T u||^2
            let m = x.len();
            let mut sum = 0.0;
            for j in 0..m {
                let mut vj = 0.0;
                for i in 0..m {
                    vj += chol[[i, j]] * (x[i] - mu[i]);
                }
                sum += vj * vj;
            }
            Ok(sum.sqrt())
        }
        DissimilarityKind::PeriodicEuclidean(period) => {
            check_period(period, x.len())?;
            let mut sum = 0.0;
            for ((&a, &b), &p) in x.iter().zip(mu.iter()).zip(period.iter()) {
                let d = wrap_signed(a - b, p);
                sum += d * d;
            }
            Ok(sum.sqrt())
        }
    }
}

/// Analytic gradient of `d(x, theta)` w.r.t. the descriptor.
///
/// Kinks (Euclidean at zero distance, Manhattan at coordinate ties) use
/// subgradient zero.
pub fn grad_theta(kind: &DissimilarityKind, x: ArrayView1<f64>, th: Descriptor) -> Result<ThetaGrad> {
    check_dims(x, &th)?;
    let mu = th.mu;
    let m = x.len();
    match kind {
        DissimilarityKind::Euclidean => {
            let d = eval(kind, x, th)?;
            let mut g = Array1::zeros(m);
            if d > 0.0 {
                for j in 0..m {
                    g[j] = -(x[j] - mu[j]) / d;
                }
            }
            Ok(ThetaGrad { mu: g, chol: None })
        }
        DissimilarityKind::SquaredEuclidean => {
            let g = Array1::from_iter(x.iter().zip(mu.iter()).map(|(a, b)| -2.0 * (a - b)));
            Ok(ThetaGrad { mu: g, chol: None })
        }
        DissimilarityKind::Manhattan => {
            let g = Array1::from_iter(x.iter().zip(mu.iter()).map(|(a, b)| {
                let d = a - b;
                if d == 0.0 {
                    0.0
                } else {
                    -d.signum()
                }
            }));
            Ok(ThetaGrad { mu: g, chol: None })
        }
        DissimilarityKind::NegDotProduct => Ok(ThetaGrad {
            mu: x.iter().map(|&a| -a).collect(),
            chol: None,
        }),
        DissimilarityKind::ItakuraSaito => {
            check_positive("itakura_saito", x)?;
            check_positive("itakura_saito", mu)?;
            let g = Array1::from_iter(x.iter().zip(mu.iter()).map(|(&a, &b)| {
                let a = a.max(POSITIVITY_FLOOR);
                let b = b.max(POSITIVITY_FLOOR);
                -a / (b * b) + 1.0 / b
            }));
            Ok(ThetaGrad { mu: g, chol: None })
        }
        DissimilarityKind::KullbackLeibler => {
            check_positive("kl", x)?;
            check_positive("kl", mu)?;
            let g = Array1::from_iter(x.iter().zip(mu.iter()).map(|(&a, &b)| {
                let a = a.max(POSITIVITY_FLOOR);
                let b = b.max(POSITIVITY_FLOOR);
                -a / b
            }));
            Ok(ThetaGrad { mu: g, chol: None })
        }
        DissimilarityKind::Mahalanobis => {
            let chol = th.chol.ok_or_else(|| {
                Error::InvalidParameter("mahalanobis requires a covariance factor".into())
            })?;
            let u = Array1::from_iter(x.iter().zip(mu.iter()).map(|(a, b)| a - b));
            // v = L^T u
            let mut v = Array1::<f64>::zeros(m);
            for j in 0..m {
                for i in 0..m {
                    v[j] += chol[[i, j]] * u[i];
                }
            }
            let d = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let mut g_mu = Array1::zeros(m);
            let mut g_l = Array2::zeros((m, m));
            if d > 0.0 {
                // dd/dmu = -(L v)/d ; dd/dL = (u v^T)/d on the lower triangle
                for i in 0..m {
                    let mut wi = 0.0;
                    for j in 0..m {
                        wi += chol[[i, j]] * v[j];
                    }
                    g_mu[i] = -wi / d;
                    for j in 0..=i {
                        g_l[[i, j]] = u[i] * v[j] / d;
                    }
                }
            }
            Ok(ThetaGrad {
                mu: g_mu,
                chol: Some(g_l),
            })
        }
        DissimilarityKind::PeriodicEuclidean(period) => {
            check_period(period, m)?;
            let d = eval(kind, x, th)?;
            let mut g = Array1::zeros(m);
            if d > 0.0 {
                for j in 0..m {
                    g[j] = -wrap_signed(x[j] - mu[j], period[j]) / d;
                }
            }
            Ok(ThetaGrad { mu: g, chol: None })
        }
    }
}

/// Analytic gradient of `d(x, theta)` w.r.t. the sample point.
pub fn grad_x(kind: &DissimilarityKind, x: ArrayView1<f64>, th: Descriptor) -> Result<Array1<f64>> {
    check_dims(x, &th)?;
    let mu = th.mu;
    let m = x.len();
    match kind {
        DissimilarityKind::Euclidean => {
            let d = eval(kind, x, th)?;
            let mut g = Array1::zeros(m);
            if d > 0.0 {
                for j in 0..m {
                    g[j] = (x[j] - mu[j]) / d;
                }
            }
            Ok(g)
        }
        DissimilarityKind::SquaredEuclidean => Ok(Array1::from_iter(
            x.iter().zip(mu.iter()).map(|(a, b)| 2.0 * (a - b)),
        )),
        DissimilarityKind::Manhattan => Ok(Array1::from_iter(x.iter().zip(mu.iter()).map(
            |(a, b)| {
                let d = a - b;
                if d == 0.0 {
                    0.0
                } else {
                    d.signum()
                }
            },
        ))),
        DissimilarityKind::NegDotProduct => Ok(mu.iter().map(|&b| -b).collect()),
        DissimilarityKind::ItakuraSaito => {
            check_positive("itakura_saito", x)?;
            check_positive("itakura_saito", mu)?;
            Ok(Array1::from_iter(x.iter().zip(mu.iter()).map(|(&a, &b)| {
                let a = a.max(POSITIVITY_FLOOR);
                let b = b.max(POSITIVITY_FLOOR);
                1.0 / b - 1.0 / a
            })))
        }
        DissimilarityKind::KullbackLeibler => {
            check_positive("kl", x)?;
            check_positive("kl", mu)?;
            Ok(Array1::from_iter(x.iter().zip(mu.iter()).map(|(&a, &b)| {
                let a = a.max(POSITIVITY_FLOOR);
                let b = b.max(POSITIVITY_FLOOR);
                (a / b).ln() + 1.0
            })))
        }
        DissimilarityKind::Mahalanobis => {
            let chol = th.chol.ok_or_else(|| {
                Error::InvalidParameter("mahalanobis requires a covariance factor".into())
            })?;
            let u = Array1::from_iter(x.iter().zip(mu.iter()).map(|(a, b)| a - b));
            let mut v = Array1::<f64>::zeros(m);
            for j in 0..m {
                for i in 0..m {
                    v[j] += chol[[i, j]] * u[i];
                }
            }
            let d = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let mut g = Array1::zeros(m);
            if d > 0.0 {
                for i in 0..m {
                    let mut wi = 0.0;
                    for j in 0..m {
                        wi += chol[[i, j]] * v[j];
                    }
                    g[i] = wi / d;
                }
            }
            Ok(g)
        }
        DissimilarityKind::PeriodicEuclidean(period) => {
            check_period(period, m)?;
            let d = eval(kind, x, th)?;
            let mut g = Array1::zeros(m);
            if d > 0.0 {
                for j in 0..m {
                    g[j] = wrap_signed(x[j] - mu[j], period[j]) / d;
                }
            }
            Ok(g)
        }
    }
}

/// Build the descriptor for cluster `k` out of a parameter matrix and an
/// optional covariance factor.
pub fn descriptor<'a>(
    theta: &'a ArrayView2<'a, f64>,
    cov: Option<&'a CovarianceFactor>,
    k: usize,
) -> Descriptor<'a> {
    Descriptor {
        mu: theta.row(k),
        chol: cov.map(|c| c.factor(k)),
    }
}

/// Pairwise dissimilarities between every row of `h` and every cluster.
///
/// Entry `(i, k)` is exactly `eval(kind, h_i, theta_k)`: the batch goes
/// through the same scalar kernel, so it is bit-identical to per-pair
/// evaluation.
pub fn pairwise(
    kind: &DissimilarityKind,
    h: ArrayView2<f64>,
    theta: ArrayView2<f64>,
    cov: Option<&CovarianceFactor>,
) -> Result<Array2<f64>> {
    if h.ncols() != theta.ncols() {
        return Err(Error::DimensionMismatch {
            context: "pairwise dissimilarity",
            expected: h.ncols(),
            actual: theta.ncols(),
        });
    }
    let (n, k) = (h.nrows(), theta.nrows());
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        for c in 0..k {
            let th = Descriptor {
                mu: theta.row(c),
                chol: cov.map(|f| f.factor(c)),
            };
            out[[i, c]] = eval(kind, h.row(i), th)?;
        }
    }
    Ok(out)
}

/// Every kind that makes sense without extra configuration, for test sweeps
/// and the gradient-check command. The periodic entry uses unit periods in
/// `dim` dimensions.
pub fn all_kinds(dim: usize) -> Vec<DissimilarityKind> {
    vec![
        DissimilarityKind::Euclidean,
        DissimilarityKind::SquaredEuclidean,
        DissimilarityKind::Manhattan,
        DissimilarityKind::NegDotProduct,
        DissimilarityKind::ItakuraSaito,
        DissimilarityKind::KullbackLeibler,
        DissimilarityKind::Mahalanobis,
        DissimilarityKind::PeriodicEuclidean(vec![1.0; dim]),
    ]
}
