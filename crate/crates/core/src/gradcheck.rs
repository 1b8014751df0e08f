//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Sampling is domain-aware: positive boxes for the Kullback-Leibler and
//! Itakura-Saito forms, displacement bands that keep the periodic metric
//! away from its wrap and zero kinks, and a margin check that keeps ReLU
//! preactivations away from zero for the deep checks.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deepnet::{self, CompositeLossWeights, MlpParams};
use crate::dissim::{self, CovarianceFactor, Descriptor, DissimilarityKind};
use crate::dmm::{self, DmmParams};
use crate::error::{Error, Result};
use crate::optim::{grad_check, GradCheckReport};

/// Tolerance for shallow gradients (dissimilarities, mixture loss).
pub const SHALLOW_TOL: f64 = 1e-5;
/// Tolerance for the composed deep loss; looser because of ReLU curvature.
pub const DEEP_TOL: f64 = 1e-4;

const FD_EPS: f64 = 1e-5;

/// One pass/fail line of a gradient-check run.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tol
    }
}

/// Sample `x` and a descriptor inside the kind's comfortable domain: away
/// from positivity boundaries, kinks and wrap discontinuities.
fn sample_pair(
    kind: &DissimilarityKind,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> (Array1<f64>, Array1<f64>, Option<Array2<f64>>) {
    let mut x = Array1::zeros(m);
    let mut mu = Array1::zeros(m);
    match kind {
        DissimilarityKind::ItakuraSaito | DissimilarityKind::KullbackLeibler => {
            for j in 0..m {
                x[j] = rng.gen_range(0.5..2.0);
                mu[j] = rng.gen_range(0.5..2.0);
            }
        }
        DissimilarityKind::PeriodicEuclidean(_) => {
            for j in 0..m {
                x[j] = rng.gen_range(0.85..0.95);
                mu[j] = rng.gen_range(0.02..0.30);
            }
        }
        _ => {
            for j in 0..m {
                x[j] = rng.gen_range(-2.0..2.0);
                // keep a safe per-coordinate offset: no zero-distance or
                // tie kinks within the finite-difference step
                let offset = rng.gen_range(0.3..1.3);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                mu[j] = x[j] + sign * offset;
            }
        }
    }
    let chol = kind.uses_covariance().then(|| random_factor(m, rng));
    (x, mu, chol)
}

fn random_factor(m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut l = Array2::zeros((m, m));
    for i in 0..m {
        l[[i, i]] = rng.gen_range(0.7..1.4);
        for j in 0..i {
            l[[i, j]] = rng.gen_range(-0.4..0.4);
        }
    }
    l
}

fn pack_lower(l: &Array2<f64>, out: &mut Vec<f64>) {
    for i in 0..l.nrows() {
        for j in 0..=i {
            out.push(l[[i, j]]);
        }
    }
}

fn unpack_lower(m: usize, flat: &mut impl Iterator<Item = f64>) -> Array2<f64> {
    let mut l = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            l[[i, j]] = flat.next().unwrap();
        }
    }
    l
}

/// Finite-difference reports for `grad_theta` and `grad_x` of one kind at a
/// random generic point.
pub fn dissim_reports(
    kind: &DissimilarityKind,
    seed: u64,
) -> Result<(GradCheckReport, GradCheckReport)> {
    dissim_reports_inner(kind, seed, false)
}

fn dissim_reports_inner(
    kind: &DissimilarityKind,
    seed: u64,
    fault: bool,
) -> Result<(GradCheckReport, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(2..=4);
    let kind = match kind {
        DissimilarityKind::PeriodicEuclidean(_) => {
            DissimilarityKind::PeriodicEuclidean(vec![1.0; m])
        }
        other => other.clone(),
    };
    let (x, mu, chol) = sample_pair(&kind, m, &mut rng);

    // gradient w.r.t. the descriptor (mean and factor entries)
    let mut packed = mu.to_vec();
    if let Some(l) = &chol {
        pack_lower(l, &mut packed);
    }
    let analytic = {
        let desc = match &chol {
            Some(l) => Descriptor::with_factor(mu.view(), l.view()),
            None => Descriptor::plain(mu.view()),
        };
        let g = dissim::grad_theta(&kind, x.view(), desc)?;
        let mut flat = g.mu.to_vec();
        if let Some(gl) = &g.chol {
            pack_lower(gl, &mut flat);
        }
        if fault {
            corrupt(&mut flat);
        }
        flat
    };
    let kind_t = kind.clone();
    let x_t = x.clone();
    let theta_report = grad_check(
        move |p| {
            let mu = Array1::from_vec(p[..m].to_vec());
            let chol_v = (p.len() > m).then(|| {
                let mut it = p[m..].iter().copied();
                unpack_lower(m, &mut it)
            });
            let desc = match &chol_v {
                Some(l) => Descriptor::with_factor(mu.view(), l.view()),
                None => Descriptor::plain(mu.view()),
            };
            dissim::eval(&kind_t, x_t.view(), desc).unwrap()
        },
        &packed,
        &analytic,
        FD_EPS,
    );

    // gradient w.r.t. the sample point
    let desc_owned_mu = mu.clone();
    let analytic_x = {
        let desc = match &chol {
            Some(l) => Descriptor::with_factor(mu.view(), l.view()),
            None => Descriptor::plain(mu.view()),
        };
        dissim::grad_x(&kind, x.view(), desc)?.to_vec()
    };
    let chol_t = chol.clone();
    let x_report = grad_check(
        move |p| {
            let xv = Array1::from_vec(p.to_vec());
            let desc = match &chol_t {
                Some(l) => Descriptor::with_factor(desc_owned_mu.view(), l.view()),
                None => Descriptor::plain(desc_owned_mu.view()),
            };
            dissim::eval(&kind, xv.view(), desc).unwrap()
        },
        &x.to_vec(),
        &analytic_x,
        FD_EPS,
    );
    Ok((theta_report, x_report))
}

/// A random small mixture instance in the kind's domain.
pub fn sample_dmm_instance(
    kind: &DissimilarityKind,
    n: usize,
    k: usize,
    m: usize,
    alpha: f64,
    seed: u64,
) -> Result<(DmmParams, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = match kind {
        DissimilarityKind::PeriodicEuclidean(_) => {
            DissimilarityKind::PeriodicEuclidean(vec![1.0; m])
        }
        other => other.clone(),
    };
    let mut h = Array2::zeros((n, m));
    let mut theta = Array2::zeros((k, m));
    match &kind {
        DissimilarityKind::ItakuraSaito | DissimilarityKind::KullbackLeibler => {
            h.mapv_inplace(|_| rng.gen_range(0.5..2.0));
            theta.mapv_inplace(|_| rng.gen_range(0.5..2.0));
        }
        DissimilarityKind::PeriodicEuclidean(_) => {
            h.mapv_inplace(|_| rng.gen_range(0.85..0.95));
            theta.mapv_inplace(|_| rng.gen_range(0.02..0.30));
        }
        _ => {
            h.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
            theta.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        }
    }
    let phi = Array1::from_iter((0..k).map(|_| rng.gen_range(-0.3..0.3)));
    let cov = kind.uses_covariance().then(|| {
        let mut factors = Array3::zeros((k, m, m));
        for c in 0..k {
            factors
                .index_axis_mut(ndarray::Axis(0), c)
                .assign(&random_factor(m, &mut rng));
        }
        CovarianceFactor::new(factors).unwrap()
    });
    let params = DmmParams::new(kind, alpha, theta, phi, cov)?;
    Ok((params, h))
}

fn pack_dmm(params: &DmmParams, h: &Array2<f64>) -> Vec<f64> {
    let mut flat: Vec<f64> = params.theta.iter().copied().collect();
    flat.extend(params.phi.iter().copied());
    if let Some(cov) = &params.cov {
        for c in 0..cov.num_clusters() {
            pack_lower(&cov.factor(c).to_owned(), &mut flat);
        }
    }
    flat.extend(h.iter().copied());
    flat
}

fn unpack_dmm(template: &DmmParams, h_shape: (usize, usize), flat: &[f64]) -> (DmmParams, Array2<f64>) {
    let k = template.num_clusters();
    let m = template.dim();
    let mut it = flat.iter().copied();
    let theta = Array2::from_shape_vec((k, m), (&mut it).take(k * m).collect()).unwrap();
    let phi = Array1::from_iter((&mut it).take(k));
    let cov = template.cov.as_ref().map(|_| {
        let mut factors = Array3::zeros((k, m, m));
        for c in 0..k {
            let l = unpack_lower(m, &mut it);
            factors.index_axis_mut(ndarray::Axis(0), c).assign(&l);
        }
        CovarianceFactor::new(factors).unwrap()
    });
    let h = Array2::from_shape_vec(h_shape, it.collect()).unwrap();
    let params = DmmParams::new(template.kind.clone(), template.alpha, theta, phi, cov).unwrap();
    (params, h)
}

fn pack_dmm_grads(grads: &dmm::DmmGrads) -> Vec<f64> {
    let mut flat: Vec<f64> = grads.theta.iter().copied().collect();
    flat.extend(grads.phi.iter().copied());
    if let Some(gc) = &grads.cov {
        for c in 0..gc.dim().0 {
            pack_lower(&gc.index_axis(ndarray::Axis(0), c).to_owned(), &mut flat);
        }
    }
    flat.extend(grads.h.iter().copied());
    flat
}

/// Finite-difference report for the full clustering-loss gradient
/// (descriptors, biases, factors and inputs) on a random small instance.
pub fn dmm_report(kind: &DissimilarityKind, seed: u64) -> Result<GradCheckReport> {
    dmm_report_inner(kind, seed, false)
}

fn dmm_report_inner(kind: &DissimilarityKind, seed: u64, fault: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let n = rng.gen_range(2..=8);
    let k = rng.gen_range(2..=3);
    let m = rng.gen_range(2..=4);
    let alpha = rng.gen_range(0.6..1.5);
    let (params, h) = sample_dmm_instance(kind, n, k, m, alpha, seed)?;
    let state = dmm::clustering_loss(&params, h.view())?;
    let grads = dmm::clustering_loss_backward(&params, &state)?;
    let packed = pack_dmm(&params, &h);
    let mut analytic = pack_dmm_grads(&grads);
    if fault {
        corrupt(&mut analytic);
    }
    let template = params.clone();
    Ok(grad_check(
        move |p| {
            let (params, h) = unpack_dmm(&template, (n, m), p);
            dmm::clustering_loss(&params, h.view()).unwrap().loss
        },
        &packed,
        &analytic,
        FD_EPS,
    ))
}

fn pack_mlp(mlp: &MlpParams, out: &mut Vec<f64>) {
    for layer in mlp.layers() {
        out.extend(layer.w.iter().copied());
        out.extend(layer.b.iter().copied());
    }
}

fn unpack_mlp(template: &MlpParams, it: &mut impl Iterator<Item = f64>) -> MlpParams {
    let mut mlp = template.clone();
    for layer in mlp.layers_mut() {
        for v in layer.w.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in layer.b.iter_mut() {
            *v = it.next().unwrap();
        }
    }
    mlp
}

fn pack_mlp_grads(grads: &deepnet::MlpGrads, out: &mut Vec<f64>) {
    for (w, b) in grads.weights.iter().zip(grads.biases.iter()) {
        out.extend(w.iter().copied());
        out.extend(b.iter().copied());
    }
}

/// Finite-difference report for the composed deep loss on a 3-5-2 encoder,
/// 2-5-3 decoder and a K=2 mixture in the latent space.
pub fn deepnet_report(kind: &DissimilarityKind, seed: u64) -> Result<GradCheckReport> {
    deepnet_report_inner(kind, seed, false)
}

fn deepnet_report_inner(
    kind: &DissimilarityKind,
    seed: u64,
    fault: bool,
) -> Result<GradCheckReport> {
    let weights = CompositeLossWeights::new(0.7, 0.4)?;
    let n = 4;
    let (enc_dims, dec_dims) = (vec![3usize, 5, 2], vec![2usize, 5, 3]);
    // resample until every ReLU preactivation clears the step size
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt << 32));
        let encoder = MlpParams::new_seeded(&enc_dims, &mut rng)?;
        let decoder = MlpParams::new_seeded(&dec_dims, &mut rng)?;
        let mut x = Array2::zeros((n, 3));
        x.mapv_inplace(|_| rng.gen_range(-1.5..1.5));
        let (params, _) = sample_dmm_instance(kind, n, 2, 2, rng.gen_range(0.6..1.5), seed ^ 0xabcd)?;
        let latent = encoder.forward(x.view())?;
        let margin = encoder
            .relu_margin(x.view())?
            .min(decoder.relu_margin(latent.view())?);
        attempt += 1;
        if margin < 1e-3 && attempt < 50 {
            continue;
        }

        let state = deepnet::composed_loss(&encoder, &params, &decoder, x.view(), weights)?;
        let grads = deepnet::composed_backward(&encoder, &params, &decoder, &state, weights, false)?;
        let mut packed = Vec::new();
        pack_mlp(&encoder, &mut packed);
        pack_mlp(&decoder, &mut packed);
        packed.extend(pack_dmm(&params, &Array2::zeros((0, 2))));
        let mut analytic = Vec::new();
        pack_mlp_grads(&grads.encoder, &mut analytic);
        pack_mlp_grads(&grads.decoder, &mut analytic);
        let dmm_grads = grads.dmm.as_ref().expect("lambda_c > 0");
        analytic.extend(pack_dmm_grads(&dmm::DmmGrads {
            theta: dmm_grads.theta.clone(),
            phi: dmm_grads.phi.clone(),
            cov: dmm_grads.cov.clone(),
            h: Array2::zeros((0, 2)),
        }));
        if fault {
            corrupt(&mut analytic);
        }
        let (enc_t, dec_t, dmm_t) = (encoder.clone(), decoder.clone(), params.clone());
        let x_t = x.clone();
        return Ok(grad_check(
            move |p| {
                let mut it = p.iter().copied();
                let enc = unpack_mlp(&enc_t, &mut it);
                let dec = unpack_mlp(&dec_t, &mut it);
                let rest: Vec<f64> = it.collect();
                let (dmm_params, _) = unpack_dmm(&dmm_t, (0, 2), &rest);
                deepnet::composed_loss(&enc, &dmm_params, &dec, x_t.view(), weights)
                    .unwrap()
                    .loss
            },
            &packed,
            &analytic,
            FD_EPS,
        ));
    }
}

/// Doubles the analytic gradient so the comparison reports a relative error
/// around 0.5; used by the test-only fault flag of the CLI.
fn corrupt(analytic: &mut [f64]) {
    for v in analytic.iter_mut() {
        *v *= 2.0;
    }
}

/// Gradient checks for every dissimilarity kind.
pub fn check_dissim(seed: u64, inject_fault: bool) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for kind in dissim::all_kinds(3) {
        let (theta_rep, x_rep) = dissim_reports_inner(&kind, seed, inject_fault)?;
        rows.push(CheckRow {
            name: format!("dissim/{}/grad_theta", kind.tag()),
            rel_err: theta_rep.rel_err,
            tol: SHALLOW_TOL,
        });
        rows.push(CheckRow {
            name: format!("dissim/{}/grad_x", kind.tag()),
            rel_err: x_rep.rel_err,
            tol: SHALLOW_TOL,
        });
    }
    Ok(rows)
}

/// Gradient checks for the clustering-loss backward pass, every kind.
pub fn check_dmm(seed: u64, inject_fault: bool) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for kind in dissim::all_kinds(3) {
        let rep = dmm_report_inner(&kind, seed, inject_fault)?;
        rows.push(CheckRow {
            name: format!("dmm/{}/clustering_loss", kind.tag()),
            rel_err: rep.rel_err,
            tol: SHALLOW_TOL,
        });
    }
    Ok(rows)
}

/// Gradient checks for the composed deep loss on latent-space-safe kinds.
pub fn check_deepnet(seed: u64, inject_fault: bool) -> Result<Vec<CheckRow>> {
    let kinds = [
        DissimilarityKind::Euclidean,
        DissimilarityKind::SquaredEuclidean,
        DissimilarityKind::Mahalanobis,
    ];
    let mut rows = Vec::new();
    for kind in kinds {
        let rep = deepnet_report_inner(&kind, seed, inject_fault)?;
        rows.push(CheckRow {
            name: format!("deepnet/{}/composed_loss", kind.tag()),
            rel_err: rep.rel_err,
            tol: DEEP_TOL,
        });
    }
    Ok(rows)
}

/// Dispatch by component name: `dissim`, `dmm` or `deepnet`.
pub fn check_component(component: &str, seed: u64, inject_fault: bool) -> Result<Vec<CheckRow>> {
    match component {
        "dissim" => check_dissim(seed, inject_fault),
        "dmm" => check_dmm(seed, inject_fault),
        "deepnet" => check_deepnet(seed, inject_fault),
        other => Err(Error::InvalidParameter(format!(
            "unknown component {other:?} (expected dissim, dmm or deepnet)"
        ))),
    }
}
