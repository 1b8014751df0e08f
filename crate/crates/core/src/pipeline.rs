//! Experiment orchestration: the three training regimes (shallow DMM,
//! AE+DMM on frozen representations, end-to-end DMAE), multi-seed
//! evaluation, reports and decision grids.
//!
//! Experiments are fully determined by their config and seeds: rerunning
//! one yields a byte-identical report. Trials are independent and may run
//! on a thread pool; results are collected in seed order either way.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{self, KmeansOpts};
use crate::data::{self, LabeledDataset};
use crate::deepnet::{self, CompositeLossWeights, MlpParams};
use crate::dissim::DissimilarityKind;
use crate::dmm::{self, BackwardOpts, DmmGrads, DmmParams};
use crate::error::{Error, Result};
use crate::metrics;
use crate::optim::{minibatches, OptimKind, Optimizer};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dmm,
    AeDmm,
    Dmae,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Dmm => "dmm",
            Mode::AeDmm => "ae_dmm",
            Mode::Dmae => "dmae",
        }
    }
}

fn default_n() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.1
}
fn default_radius_factor() -> f64 {
    0.1
}
fn default_sigma() -> f64 {
    0.05
}
fn default_arms() -> usize {
    5
}
fn default_blobs() -> usize {
    4
}
fn default_radial_std() -> f64 {
    0.3
}
fn default_angular_std() -> f64 {
    0.05
}
fn default_rate() -> f64 {
    0.25
}

/// Which dataset to generate or load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `pinwheel`, `toroidal`, `moons`, `circles` or `csv`.
    pub kind: String,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Seed of the generator; the same samples are reused across trials.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_radius_factor")]
    pub radius_factor: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_arms")]
    pub arms: usize,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    #[serde(default = "default_radial_std")]
    pub radial_std: f64,
    #[serde(default = "default_angular_std")]
    pub angular_std: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub label_column: Option<usize>,
}

impl DatasetConfig {
    pub fn is_synthetic(&self) -> bool {
        self.kind != "csv"
    }

    pub fn build(&self) -> Result<LabeledDataset> {
        match self.kind.as_str() {
            "pinwheel" => {
                let per = self.n / self.arms.max(1);
                data::gen_pinwheel(
                    per,
                    self.arms,
                    self.radial_std,
                    self.angular_std,
                    self.rate,
                    self.seed,
                )
            }
            "toroidal" => {
                let per = self.n / self.blobs.max(1);
                data::gen_toroidal(per, self.blobs, self.sigma, self.seed)
            }
            "moons" => data::gen_moons(self.n, self.noise_std, self.seed),
            "circles" => data::gen_circles(self.n, self.noise_std, self.radius_factor, self.seed),
            "csv" => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::Config("dataset.kind = \"csv\" requires dataset.path".into())
                })?;
                data::load_csv(path, self.label_column)
            }
            other => Err(Error::Config(format!(
                "unknown dataset kind {other:?} (expected pinwheel, toroidal, moons, circles or csv)"
            ))),
        }
    }
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Lowercase dissimilarity tag, e.g. `euclidean` or `periodic_euclidean`.
    pub dissimilarity: String,
    /// Period per dimension for `periodic_euclidean`; a single value
    /// broadcasts over all dimensions.
    #[serde(default)]
    pub period: Option<Vec<f64>>,
    pub k: usize,
    /// Softmax inverse temperature.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Ablation switch: do not backpropagate through the soft assignments.
    #[serde(default)]
    pub stop_gradient: bool,
}

impl ModelConfig {
    pub fn build_kind(&self, dim: usize) -> Result<DissimilarityKind> {
        let period = match &self.period {
            None => None,
            Some(p) if p.len() == 1 => Some(vec![p[0]; dim]),
            Some(p) => Some(p.clone()),
        };
        let kind = DissimilarityKind::from_tag(&self.dissimilarity, period)?;
        if let DissimilarityKind::PeriodicEuclidean(p) = &kind {
            if p.len() != dim {
                return Err(Error::Config(format!(
                    "model.period has {} entries for {dim}-dimensional data",
                    p.len()
                )));
            }
        }
        Ok(kind)
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn one() -> f64 {
    1.0
}
fn default_optimizer() -> OptimKind {
    OptimKind::Adam
}
fn default_n_init() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning rate of the pretraining stage; defaults to `lr`.
    #[serde(default)]
    pub pretrain_lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default = "one")]
    pub lambda_r: f64,
    #[serde(default = "one")]
    pub lambda_c: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimKind,
    #[serde(default = "default_n_init")]
    pub kmeans_n_init: usize,
}

fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Explicit per-trial seeds; overrides `base_seed + index`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl EvalConfig {
    pub fn trial_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.n_trials as u64).map(|i| self.base_seed + i).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub encoder_dims: Vec<usize>,
    pub decoder_dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub mode: Mode,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default = "default_eval")]
    pub eval: EvalConfig,
    #[serde(default)]
    pub net: Option<NetConfig>,
}

fn default_eval() -> EvalConfig {
    EvalConfig {
        n_trials: default_trials(),
        base_seed: 0,
        seeds: None,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{}_{}_{}",
                self.dataset.kind,
                self.mode.as_str(),
                self.model.dissimilarity
            )
        })
    }

    /// Structural validation. Hard inconsistencies are errors; values
    /// outside the explored hyperparameter bands come back as warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.model.k == 0 {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.model.alpha > 0.0) {
            return Err(Error::Config("model.alpha must be positive".into()));
        }
        if self.eval.trial_seeds().is_empty() {
            return Err(Error::Config("eval needs at least one trial".into()));
        }
        let needs_net = matches!(self.mode, Mode::AeDmm | Mode::Dmae);
        match (&self.net, needs_net) {
            (None, true) => {
                return Err(Error::Config(format!(
                    "mode {:?} requires a [net] section",
                    self.mode.as_str()
                )))
            }
            (Some(net), _) => {
                if net.encoder_dims.len() < 2 || net.decoder_dims.len() < 2 {
                    return Err(Error::Config("net dims need at least input and output".into()));
                }
                if net.encoder_dims.last() != net.decoder_dims.first() {
                    return Err(Error::Config(
                        "encoder output dimension must match decoder input dimension".into(),
                    ));
                }
                if net.encoder_dims.first() != net.decoder_dims.last() {
                    return Err(Error::Config(
                        "decoder output dimension must match encoder input dimension".into(),
                    ));
                }
            }
            (None, false) => {}
        }
        if self.mode == Mode::Dmae {
            CompositeLossWeights::new(self.train.lambda_r, self.train.lambda_c)
                .map_err(|e| Error::Config(e.to_string()))?;
        }

        // Explored bands; outside values are suspicious but allowed.
        let synthetic = self.dataset.is_synthetic();
        let (lr_band, epoch_band) = if synthetic {
            ((1e-5, 1e-3), (40usize, 250usize))
        } else {
            ((1e-5, 1.0), (50usize, 500usize))
        };
        if self.train.lr < lr_band.0 || self.train.lr > lr_band.1 {
            warnings.push(format!(
                "train.lr = {} is outside the explored band [{}, {}]",
                self.train.lr, lr_band.0, lr_band.1
            ));
        }
        for (what, value) in [
            ("train.epochs", self.train.epochs),
            ("train.pretrain_epochs", self.train.pretrain_epochs),
        ] {
            if value != 0 && (value < epoch_band.0 || value > epoch_band.1) {
                warnings.push(format!(
                    "{what} = {value} is outside the explored band [{}, {}]",
                    epoch_band.0, epoch_band.1
                ));
            }
        }
        if !(0.5..=1e4).contains(&self.model.alpha) {
            warnings.push(format!(
                "model.alpha = {} is outside the explored band [0.5, 1e4]",
                self.model.alpha
            ));
        }
        Ok(warnings)
    }
}

/// Everything a trial trains, kept for prediction and checkpointing.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub encoder: Option<MlpParams>,
    pub decoder: Option<MlpParams>,
    pub dmm: DmmParams,
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        self.encoder
            .as_ref()
            .map(|e| e.input_dim())
            .unwrap_or_else(|| self.dmm.dim())
    }

    /// Hard labels for raw input points (through the encoder when present).
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        match &self.encoder {
            Some(enc) => {
                let h = enc.forward(x)?;
                dmm::predict(&self.dmm, h.view())
            }
            None => dmm::predict(&self.dmm, x),
        }
    }

    /// Max responsibility per row, alongside the labels.
    pub fn predict_with_responsibility(&self, x: ArrayView2<f64>) -> Result<Vec<(usize, f64)>> {
        let s = match &self.encoder {
            Some(enc) => {
                let h = enc.forward(x)?;
                dmm::encode(&self.dmm, h.view())?
            }
            None => dmm::encode(&self.dmm, x)?,
        };
        let labels = s.hard_labels();
        Ok(labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, s.as_array()[[i, l]]))
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialCheckpoints {
    pub dmm: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<TrialCheckpoints>,
    /// Wall time is observability only; it is deliberately not serialized so
    /// reruns produce byte-identical reports.
    #[serde(skip)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: u32,
    pub name: String,
    pub mode: Mode,
    pub dataset: String,
    pub dissimilarity: String,
    pub k: usize,
    pub n_trials: usize,
    pub completed_trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_nmi: Option<f64>,
    pub trials: Vec<TrialReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The result of one multi-trial experiment: the serializable report plus
/// the trained models for checkpointing or decision grids.
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub models: Vec<Option<TrainedModel>>,
}

fn dmm_tensor_refs(params: &mut DmmParams) -> Vec<&mut [f64]> {
    let mut refs: Vec<&mut [f64]> = vec![
        params.theta.as_slice_mut().expect("contiguous"),
        params.phi.as_slice_mut().expect("contiguous"),
    ];
    if let Some(cov) = &mut params.cov {
        refs.push(cov.as_array_mut().as_slice_mut().expect("contiguous"));
    }
    refs
}

fn dmm_grad_refs(grads: &DmmGrads) -> Vec<&[f64]> {
    let mut refs: Vec<&[f64]> = vec![
        grads.theta.as_slice().expect("contiguous"),
        grads.phi.as_slice().expect("contiguous"),
    ];
    if let Some(cov) = &grads.cov {
        refs.push(cov.as_slice().expect("contiguous"));
    }
    refs
}

fn mlp_tensor_refs(mlp: &mut MlpParams) -> Vec<&mut [f64]> {
    let mut refs = Vec::new();
    for layer in mlp.layers_mut() {
        refs.push(layer.w.as_slice_mut().expect("contiguous"));
        refs.push(layer.b.as_slice_mut().expect("contiguous"));
    }
    refs
}

fn mlp_grad_refs(grads: &deepnet::MlpGrads) -> Vec<&[f64]> {
    let mut refs = Vec::new();
    for (w, b) in grads.weights.iter().zip(grads.biases.iter()) {
        refs.push(w.as_slice().expect("contiguous"));
        refs.push(b.as_slice().expect("contiguous"));
    }
    refs
}

/// K-means init followed by mini-batch gradient descent on the clustering
/// loss.
fn train_shallow_dmm(
    x: ArrayView2<f64>,
    kind: DissimilarityKind,
    alpha: f64,
    k: usize,
    train: &TrainConfig,
    stop_gradient: bool,
    kmeans_seed: u64,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<(DmmParams, f64)> {
    let km = baseline::kmeans(
        x,
        k,
        &KmeansOpts {
            n_init: train.kmeans_n_init,
            seed: kmeans_seed,
            ..Default::default()
        },
    )?;
    let mut params = baseline::init_dmm_from_kmeans(kind, alpha, km.centroids)?;
    let mut opt = Optimizer::new(train.optimizer, train.lr);
    let opts = BackwardOpts {
        scale: 1.0,
        upstream_theta_tilde: None,
        stop_gradient_assignments: stop_gradient,
    };
    for _ in 0..train.epochs {
        for batch in minibatches(x.nrows(), train.batch_size, shuffle_rng) {
            let xb = x.select(Axis(0), &batch);
            let state = dmm::clustering_loss(&params, xb.view())?;
            if !state.loss.is_finite() {
                return Err(Error::NonFiniteGradient {
                    context: "clustering loss",
                });
            }
            let grads = dmm::clustering_loss_backward_opts(&params, &state, &opts)?;
            opt.step(&mut dmm_tensor_refs(&mut params), &dmm_grad_refs(&grads))?;
            params.project();
        }
    }
    let final_loss = dmm::clustering_loss(&params, x)?.loss;
    Ok((params, final_loss))
}

/// Stage-1 pretraining: plain autoencoder on the reconstruction loss.
fn pretrain_autoencoder(
    encoder: &mut MlpParams,
    decoder: &mut MlpParams,
    x: ArrayView2<f64>,
    train: &TrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<()> {
    let lr = train.pretrain_lr.unwrap_or(train.lr);
    let mut opt = Optimizer::new(train.optimizer, lr);
    for _ in 0..train.pretrain_epochs {
        for batch in minibatches(x.nrows(), train.batch_size, shuffle_rng) {
            let xb = x.select(Axis(0), &batch);
            let (loss, enc_g, dec_g) = deepnet::ae_loss_and_grads(encoder, decoder, xb.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient {
                    context: "pretraining loss",
                });
            }
            let grads: Vec<&[f64]> = mlp_grad_refs(&enc_g)
                .into_iter()
                .chain(mlp_grad_refs(&dec_g))
                .collect();
            let mut tensors = mlp_tensor_refs(encoder);
            tensors.extend(mlp_tensor_refs(decoder));
            opt.step(&mut tensors, &grads)?;
        }
    }
    Ok(())
}

/// Stage-3 joint training of the composed loss.
#[allow(clippy::too_many_arguments)]
fn train_dmae_joint(
    encoder: &mut MlpParams,
    decoder: &mut MlpParams,
    params: &mut DmmParams,
    x: ArrayView2<f64>,
    weights: CompositeLossWeights,
    train: &TrainConfig,
    stop_gradient: bool,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut opt = Optimizer::new(train.optimizer, train.lr);
    for _ in 0..train.epochs {
        for batch in minibatches(x.nrows(), train.batch_size, shuffle_rng) {
            let xb = x.select(Axis(0), &batch);
            let state = deepnet::composed_loss(encoder, params, decoder, xb.view(), weights)?;
            if !state.loss.is_finite() {
                return Err(Error::NonFiniteGradient {
                    context: "composed loss",
                });
            }
            let grads =
                deepnet::composed_backward(encoder, params, decoder, &state, weights, stop_gradient)?;
            let grad_refs: Vec<&[f64]> = mlp_grad_refs(&grads.encoder)
                .into_iter()
                .chain(mlp_grad_refs(&grads.decoder))
                .chain(grads.dmm.as_ref().map(dmm_grad_refs).unwrap_or_default())
                .collect();
            let mut tensors = mlp_tensor_refs(encoder);
            tensors.extend(mlp_tensor_refs(decoder));
            if grads.dmm.is_some() {
                tensors.extend(dmm_tensor_refs(params));
            }
            opt.step(&mut tensors, &grad_refs)?;
            if grads.dmm.is_some() {
                params.project();
            }
        }
    }
    Ok(())
}

fn evaluate(dataset: &LabeledDataset, labels: &[usize]) -> Result<(Option<f64>, Option<f64>)> {
    if dataset.y.iter().all(|&l| l < 0) {
        return Ok((None, None));
    }
    let pred: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    Ok((
        Some(metrics::acc(&dataset.y, &pred)?),
        Some(metrics::nmi(&dataset.y, &pred)?),
    ))
}

/// Run one trial of the configured mode. Gradient blow-ups fail the trial;
/// anything structural propagates as an error.
pub fn run_trial(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
    trial_seed: u64,
) -> Result<(TrialReport, Option<TrainedModel>)> {
    let started = std::time::Instant::now();
    match run_trial_inner(config, dataset, trial_seed) {
        Ok((mut report, model)) => {
            report.wall_ms = started.elapsed().as_millis() as u64;
            Ok((report, Some(model)))
        }
        Err(e @ (Error::NonFiniteGradient { .. } | Error::Domain { .. })) => Ok((
            TrialReport {
                seed: trial_seed,
                failed: true,
                error: Some(e.to_string()),
                acc: None,
                nmi: None,
                final_loss_c: None,
                final_loss_r: None,
                checkpoints: None,
                wall_ms: started.elapsed().as_millis() as u64,
            },
            None,
        )),
        Err(e) => Err(e),
    }
}

fn run_trial_inner(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
    trial_seed: u64,
) -> Result<(TrialReport, TrainedModel)> {
    let mut master = ChaCha8Rng::seed_from_u64(trial_seed);
    let kmeans_seed: u64 = master.gen();
    let mut net_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let x = dataset.x.view();
    let m = dataset.dim();

    let (model, final_loss_c, final_loss_r) = match config.mode {
        Mode::Dmm => {
            let kind = config.model.build_kind(m)?;
            let (params, loss_c) = train_shallow_dmm(
                x,
                kind,
                config.model.alpha,
                config.model.k,
                &config.train,
                config.model.stop_gradient,
                kmeans_seed,
                &mut shuffle_rng,
            )?;
            (
                TrainedModel {
                    encoder: None,
                    decoder: None,
                    dmm: params,
                },
                loss_c,
                None,
            )
        }
        Mode::AeDmm => {
            let net = config.net.as_ref().expect("validated");
            check_net_dims(net, m)?;
            let mut encoder = MlpParams::new_seeded(&net.encoder_dims, &mut net_rng)?;
            let mut decoder = MlpParams::new_seeded(&net.decoder_dims, &mut net_rng)?;
            pretrain_autoencoder(&mut encoder, &mut decoder, x, &config.train, &mut shuffle_rng)?;
            // representations are frozen from here on
            let latent = encoder.forward(x)?;
            let kind = config.model.build_kind(latent.ncols())?;
            let (params, loss_c) = train_shallow_dmm(
                latent.view(),
                kind,
                config.model.alpha,
                config.model.k,
                &config.train,
                config.model.stop_gradient,
                kmeans_seed,
                &mut shuffle_rng,
            )?;
            let xtilde = decoder.forward(latent.view())?;
            let loss_r = deepnet::reconstruction_loss(x, xtilde.view())?;
            (
                TrainedModel {
                    encoder: Some(encoder),
                    decoder: Some(decoder),
                    dmm: params,
                },
                loss_c,
                Some(loss_r),
            )
        }
        Mode::Dmae => {
            let net = config.net.as_ref().expect("validated");
            check_net_dims(net, m)?;
            let weights = CompositeLossWeights::new(config.train.lambda_r, config.train.lambda_c)
                .map_err(|e| Error::Config(e.to_string()))?;
            let mut encoder = MlpParams::new_seeded(&net.encoder_dims, &mut net_rng)?;
            let mut decoder = MlpParams::new_seeded(&net.decoder_dims, &mut net_rng)?;
            pretrain_autoencoder(&mut encoder, &mut decoder, x, &config.train, &mut shuffle_rng)?;
            let latent = encoder.forward(x)?;
            let kind = config.model.build_kind(latent.ncols())?;
            let km = baseline::kmeans(
                latent.view(),
                config.model.k,
                &KmeansOpts {
                    n_init: config.train.kmeans_n_init,
                    seed: kmeans_seed,
                    ..Default::default()
                },
            )?;
            let mut params = baseline::init_dmm_from_kmeans(kind, config.model.alpha, km.centroids)?;
            train_dmae_joint(
                &mut encoder,
                &mut decoder,
                &mut params,
                x,
                weights,
                &config.train,
                config.model.stop_gradient,
                &mut shuffle_rng,
            )?;
            let state = deepnet::composed_loss(&encoder, &params, &decoder, x, weights)?;
            let (loss_c, loss_r) = (state.loss_c, state.loss_r);
            (
                TrainedModel {
                    encoder: Some(encoder),
                    decoder: Some(decoder),
                    dmm: params,
                },
                loss_c,
                Some(loss_r),
            )
        }
    };

    let labels = model.predict(x)?;
    let (acc, nmi) = evaluate(dataset, &labels)?;
    Ok((
        TrialReport {
            seed: trial_seed,
            failed: false,
            error: None,
            acc,
            nmi,
            final_loss_c: Some(final_loss_c),
            final_loss_r,
            checkpoints: None,
            wall_ms: 0,
        },
        model,
    ))
}

fn check_net_dims(net: &NetConfig, data_dim: usize) -> Result<()> {
    if net.encoder_dims[0] != data_dim {
        return Err(Error::Config(format!(
            "net.encoder_dims starts at {}, data has {} dimensions",
            net.encoder_dims[0], data_dim
        )));
    }
    Ok(())
}

/// Run every trial sequentially.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(config, 1)
}

/// Run trials on a dedicated pool of `parallel_trials` threads (sequential
/// when 1). Trial seeding is independent of execution order, so the report
/// does not depend on the parallelism.
pub fn run_experiment_with(config: &ExperimentConfig, parallel_trials: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dataset = config.dataset.build()?;
    let seeds = config.eval.trial_seeds();

    let results: Vec<Result<(TrialReport, Option<TrainedModel>)>> = if parallel_trials > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel_trials)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            seeds
                .par_iter()
                .map(|&s| run_trial(config, &dataset, s))
                .collect()
        })
    } else {
        seeds
            .iter()
            .map(|&s| run_trial(config, &dataset, s))
            .collect()
    };

    let mut trials = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for r in results {
        let (report, model) = r?;
        trials.push(report);
        models.push(model);
    }

    let accs: Vec<f64> = trials.iter().filter_map(|t| t.acc).collect();
    let nmis: Vec<f64> = trials.iter().filter_map(|t| t.nmi).collect();
    let completed = trials.iter().filter(|t| !t.failed).count();
    let (mean_acc, std_acc) = if accs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&accs);
        (Some(m), Some(s))
    };
    let (mean_nmi, std_nmi) = if nmis.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&nmis);
        (Some(m), Some(s))
    };

    let report = ExperimentReport {
        schema: REPORT_SCHEMA,
        name: config.display_name(),
        mode: config.mode,
        dataset: dataset.name.clone(),
        dissimilarity: config.model.dissimilarity.clone(),
        k: config.model.k,
        n_trials: seeds.len(),
        completed_trials: completed,
        mean_acc,
        std_acc,
        mean_nmi,
        std_nmi,
        trials,
    };
    Ok(ExperimentOutcome { report, models })
}

/// Inclusive rectangular bounds of a 2-D decision grid.
#[derive(Debug, Clone, Copy)]
pub struct GridBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridBounds {
    /// Data bounding box with a relative margin on each side.
    pub fn from_data(x: ArrayView2<f64>, margin: f64) -> Result<Self> {
        if x.ncols() != 2 {
            return Err(Error::NotTwoDimensional(x.ncols()));
        }
        let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in x.outer_iter() {
            x_min = x_min.min(row[0]);
            x_max = x_max.max(row[0]);
            y_min = y_min.min(row[1]);
            y_max = y_max.max(row[1]);
        }
        let dx = (x_max - x_min) * margin;
        let dy = (y_max - y_min) * margin;
        Ok(Self {
            x_min: x_min - dx,
            x_max: x_max + dx,
            y_min: y_min - dy,
            y_max: y_max + dy,
        })
    }
}

/// One lattice point of a decision grid.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub responsibility: f64,
}

/// Predicted labels and max responsibilities over a regular
/// `resolution x resolution` lattice, row-major from `(x_min, y_min)`.
pub fn decision_grid(
    model: &TrainedModel,
    bounds: GridBounds,
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if model.input_dim() != 2 {
        return Err(Error::NotTwoDimensional(model.input_dim()));
    }
    if resolution < 2 {
        return Err(Error::InvalidParameter("grid resolution must be at least 2".into()));
    }
    let step_x = (bounds.x_max - bounds.x_min) / (resolution - 1) as f64;
    let step_y = (bounds.y_max - bounds.y_min) / (resolution - 1) as f64;
    let mut points = Array2::zeros((resolution * resolution, 2));
    let mut row = 0;
    for iy in 0..resolution {
        for ix in 0..resolution {
            points[[row, 0]] = bounds.x_min + ix as f64 * step_x;
            points[[row, 1]] = bounds.y_min + iy as f64 * step_y;
            row += 1;
        }
    }
    let labeled = model.predict_with_responsibility(points.view())?;
    Ok(labeled
        .into_iter()
        .enumerate()
        .map(|(i, (label, responsibility))| GridPoint {
            x: points[[i, 0]],
            y: points[[i, 1]],
            label,
            responsibility,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmm;

    fn toroidal_dmm_config(epochs: usize, n_trials: usize) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            mode = "dmm"
            [dataset]
            kind = "toroidal"
            n = 400
            seed = 3
            [model]
            dissimilarity = "periodic_euclidean"
            period = [1.0]
            k = 4
            alpha = 20.0
            [train]
            lr = 1e-3
            epochs = {epochs}
            [eval]
            n_trials = {n_trials}
            base_seed = 41
            "#
        ))
        .unwrap()
    }

    fn tiny_net_config(mode: &str, epochs: usize, pretrain: usize) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            mode = "{mode}"
            [dataset]
            kind = "moons"
            n = 120
            seed = 5
            [model]
            dissimilarity = "euclidean"
            k = 2
            alpha = 10.0
            [train]
            lr = 1e-3
            epochs = {epochs}
            pretrain_epochs = {pretrain}
            lambda_r = 1.0
            lambda_c = 0.1
            [eval]
            n_trials = 2
            base_seed = 7
            [net]
            encoder_dims = [2, 16, 4]
            decoder_dims = [4, 16, 2]
            "#
        ))
        .unwrap()
    }

    #[test]
    fn config_parses_with_defaults_and_validates() {
        let config = toroidal_dmm_config(50, 10);
        assert_eq!(config.train.batch_size, 32);
        assert_eq!(config.eval.trial_seeds().len(), 10);
        let warnings = config.validate().unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
    }

    #[test]
    fn out_of_band_values_warn_but_do_not_fail() {
        let mut config = toroidal_dmm_config(50, 10);
        config.train.lr = 0.5; // synthetic band tops out at 1e-3
        config.model.alpha = 0.01;
        config.train.epochs = 17;
        let warnings = config.validate().unwrap();
        assert_eq!(warnings.len(), 3, "{warnings:?}");
    }

    #[test]
    fn malformed_config_errors_name_the_key() {
        let err = ExperimentConfig::from_toml_str(
            r#"
            mode = "dmm"
            [dataset]
            kind = "moons"
            [model]
            dissimilarity = "euclidean"
            k = 2
            [train]
            lr = "fast"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        let err = ExperimentConfig::from_toml_str("mode = \"dmm\"").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn net_section_is_required_for_deep_modes() {
        let mut config = toroidal_dmm_config(10, 2);
        config.mode = Mode::Dmae;
        assert!(config.validate().is_err());
    }

    #[test]
    fn zero_epochs_reproduces_kmeans_init_metrics() {
        let config = toroidal_dmm_config(0, 1);
        let dataset = config.dataset.build().unwrap();
        let outcome = run_experiment(&config).unwrap();
        let trial = &outcome.report.trials[0];

        // re-derive the initialization by hand with the same sub-seed wiring
        let mut master = ChaCha8Rng::seed_from_u64(41);
        let kmeans_seed: u64 = master.gen();
        let km = baseline::kmeans(
            dataset.x.view(),
            4,
            &KmeansOpts {
                seed: kmeans_seed,
                ..Default::default()
            },
        )
        .unwrap();
        let kind = config.model.build_kind(2).unwrap();
        let params = baseline::init_dmm_from_kmeans(kind, 20.0, km.centroids).unwrap();
        let labels: Vec<i64> = dmm::predict(&params, dataset.x.view())
            .unwrap()
            .into_iter()
            .map(|l| l as i64)
            .collect();
        let expect_acc = crate::metrics::acc(&dataset.y, &labels).unwrap();
        assert_eq!(trial.acc.unwrap(), expect_acc);
    }

    #[test]
    fn reports_are_bit_identical_across_reruns_and_parallelism() {
        let config = toroidal_dmm_config(3, 4);
        let a = run_experiment(&config).unwrap();
        let b = run_experiment_with(&config, 2).unwrap();
        let ja = serde_json::to_string_pretty(&a.report).unwrap();
        let jb = serde_json::to_string_pretty(&b.report).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn frozen_encoder_is_untouched_by_the_mixture_phase() {
        let config = tiny_net_config("ae_dmm", 4, 4);
        let dataset = config.dataset.build().unwrap();
        // run the pretraining alone with the same seed wiring to capture the
        // frozen encoder weights
        let mut master = ChaCha8Rng::seed_from_u64(7);
        let _kmeans_seed: u64 = master.gen();
        let mut net_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let net = config.net.as_ref().unwrap();
        let mut encoder = MlpParams::new_seeded(&net.encoder_dims, &mut net_rng).unwrap();
        let mut decoder = MlpParams::new_seeded(&net.decoder_dims, &mut net_rng).unwrap();
        pretrain_autoencoder(&mut encoder, &mut decoder, dataset.x.view(), &config.train, &mut shuffle_rng)
            .unwrap();

        let (_, model) = run_trial(&config, &dataset, 7).unwrap();
        let trained = model.unwrap();
        let trained_encoder = trained.encoder.as_ref().unwrap();
        for (a, b) in trained_encoder.layers().iter().zip(encoder.layers().iter()) {
            assert_eq!(a.w, b.w, "encoder weights drifted during the mixture phase");
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn dmae_mode_trains_end_to_end_deterministically() {
        let config = tiny_net_config("dmae", 3, 3);
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert!(a.report.completed_trials == 2);
        let model = a.models[0].as_ref().unwrap();
        assert!(model.encoder.is_some() && model.decoder.is_some());
    }

    #[test]
    fn grid_has_resolution_squared_rows_and_agrees_with_predict() {
        let config = toroidal_dmm_config(2, 1);
        let dataset = config.dataset.build().unwrap();
        let outcome = run_experiment(&config).unwrap();
        let model = outcome.models[0].as_ref().unwrap();
        let bounds = GridBounds {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
        };
        let grid = decision_grid(model, bounds, 2).unwrap();
        assert_eq!(grid.len(), 4);

        let grid = decision_grid(model, bounds, 21).unwrap();
        assert_eq!(grid.len(), 441);
        // grid labels at training points equal predict on those points
        let labels = model.predict(dataset.x.view()).unwrap();
        for (i, row) in dataset.x.outer_iter().enumerate().take(20) {
            let nearest = grid
                .iter()
                .min_by(|a, b| {
                    let da = (a.x - row[0]).powi(2) + (a.y - row[1]).powi(2);
                    let db = (b.x - row[0]).powi(2) + (b.y - row[1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            // only assert when the nearest lattice point is unambiguous
            let point = ndarray::arr2(&[[nearest.x, nearest.y]]);
            let grid_label = model.predict(point.view()).unwrap()[0];
            assert_eq!(nearest.label, grid_label);
            let _ = labels[i];
        }
    }

    #[test]
    fn toroidal_grid_labels_wrap_across_opposite_edges() {
        let config = toroidal_dmm_config(30, 1);
        let outcome = run_experiment(&config).unwrap();
        let model = outcome.models[0].as_ref().unwrap();
        let bounds = GridBounds {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
        };
        let res = 17;
        let grid = decision_grid(model, bounds, res).unwrap();
        for i in 0..res {
            // left edge (x=0) vs right edge (x=1) on the same row
            assert_eq!(grid[i * res].label, grid[i * res + res - 1].label);
            // bottom edge vs top edge in the same column
            assert_eq!(grid[i].label, grid[(res - 1) * res + i].label);
        }
    }

    #[test]
    fn grid_rejects_non_planar_models() {
        let (params, _) = crate::gradcheck::sample_dmm_instance(
            &crate::dissim::DissimilarityKind::Euclidean,
            4,
            2,
            3,
            1.0,
            0,
        )
        .unwrap();
        let model = TrainedModel {
            encoder: None,
            decoder: None,
            dmm: params,
        };
        let bounds = GridBounds {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
        };
        let err = decision_grid(&model, bounds, 4).unwrap_err();
        assert!(matches!(err, Error::NotTwoDimensional(3)));
    }

    #[test]
    fn failed_trials_are_marked_and_skipped_in_aggregates() {
        // absurd learning rate on the positive-domain KL drives descriptors
        // negative, which surfaces as a domain error -> failed trial
        let config = ExperimentConfig::from_toml_str(
            r#"
            mode = "dmm"
            [dataset]
            kind = "toroidal"
            n = 200
            seed = 3
            [model]
            dissimilarity = "kl"
            k = 4
            alpha = 1000.0
            [train]
            lr = 10.0
            epochs = 50
            [eval]
            n_trials = 2
            base_seed = 1
            "#,
        )
        .unwrap();
        let outcome = run_experiment(&config).unwrap();
        if outcome.report.completed_trials < outcome.report.n_trials {
            let failed = outcome.report.trials.iter().find(|t| t.failed).unwrap();
            assert!(failed.error.is_some());
            assert!(failed.acc.is_none());
        }
    }
}
