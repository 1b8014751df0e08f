//! Fully-connected autoencoder with manual forward/backward passes.
//!
//! Hidden layers are ReLU; the latent and output layers are linear. The
//! composed loss couples the reconstruction error with the clustering loss
//! of the mixture sitting in the latent space: the deep decoder reconstructs
//! from the soft-assigned descriptors `theta_tilde` rather than from the
//! latent codes themselves. With `lambda_c == 0` the mixture stage is
//! bypassed entirely and the model degenerates to a plain autoencoder,
//! which is also the wiring used for pretraining.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dmm::{self, BackwardOpts, DmmGrads, DmmParams, LossState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }

    /// Derivative at the preactivation; the ReLU subgradient at zero is zero.
    fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `in x out` weight matrix; samples are rows, so `out = x . w + b`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

/// An ordered stack of dense layers.
#[derive(Debug, Clone)]
pub struct MlpParams {
    layers: Vec<Layer>,
    dims: Vec<usize>,
}

impl MlpParams {
    /// Build a stack for the given dimension chain. All layers are ReLU
    /// except the last, which is linear (the latent / output space).
    ///
    /// ReLU layers get uniform He fan-in initialization, linear layers
    /// Xavier; biases start at zero.
    pub fn new_seeded(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter(
                "an MLP needs at least an input and an output dimension".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter("layer dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let activation = if l == dims.len() - 2 {
                Activation::Linear
            } else {
                Activation::Relu
            };
            let limit = match activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Linear => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let mut w = Array2::zeros((fan_in, fan_out));
            for i in 0..fan_in {
                for j in 0..fan_out {
                    w[[i, j]] = rng.gen_range(-limit..limit);
                }
            }
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
                activation,
            });
        }
        Ok(Self {
            layers,
            dims: dims.to_vec(),
        })
    }

    /// Build a stack from explicit layers; dimensions must chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("an MLP needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].w.nrows()];
        for layer in &layers {
            if layer.w.nrows() != *dims.last().unwrap() {
                return Err(Error::DimensionMismatch {
                    context: "mlp layer chain",
                    expected: *dims.last().unwrap(),
                    actual: layer.w.nrows(),
                });
            }
            if layer.b.len() != layer.w.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "mlp bias",
                    expected: layer.w.ncols(),
                    actual: layer.b.len(),
                });
            }
            dims.push(layer.w.ncols());
        }
        Ok(Self { layers, dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Deterministic affine + activation chain.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let mut pre = cur.dot(&layer.w);
            pre += &layer.b;
            pre.mapv_inplace(|v| layer.activation.apply(v));
            cur = pre;
        }
        Ok(cur)
    }

    /// Forward pass that keeps per-layer inputs and preactivations for
    /// [`MlpParams::backward`].
    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            inputs.push(cur.clone());
            let mut pre = cur.dot(&layer.w);
            pre += &layer.b;
            preacts.push(pre.clone());
            pre.mapv_inplace(|v| layer.activation.apply(v));
            cur = pre;
        }
        Ok((cur, MlpCache { inputs, preacts }))
    }

    /// Smallest `|preactivation|` over all ReLU layers for the given batch,
    /// infinity when there are none. Kink-aware finite-difference checks use
    /// this to reject instances where a unit sits on the ReLU corner.
    pub fn relu_margin(&self, x: ArrayView2<f64>) -> Result<f64> {
        self.check_input(&x)?;
        let mut margin = f64::INFINITY;
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let mut pre = cur.dot(&layer.w);
            pre += &layer.b;
            if layer.activation == Activation::Relu {
                for &v in pre.iter() {
                    margin = margin.min(v.abs());
                }
            }
            pre.mapv_inplace(|v| layer.activation.apply(v));
            cur = pre;
        }
        Ok(margin)
    }

    /// Reverse-mode pass. `d_out` is the loss gradient at the stack output;
    /// returns per-layer gradients and the gradient at the stack input.
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<f64>) -> (MlpGrads, Array2<f64>) {
        let mut d_cur = d_out.to_owned();
        let mut weights = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut biases = vec![Array1::zeros(0); self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.preacts[l];
            let mut d_pre = d_cur;
            ndarray::Zip::from(&mut d_pre).and(pre).for_each(|d, &p| {
                *d *= layer.activation.derivative(p);
            });
            weights[l] = cache.inputs[l].t().dot(&d_pre);
            biases[l] = d_pre.sum_axis(Axis(0));
            d_cur = d_pre.dot(&layer.w.t());
        }
        (MlpGrads { weights, biases }, d_cur)
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            dims: self.dims.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    w: l.w.iter().copied().collect(),
                    b: l.b.to_vec(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: MlpCheckpoint) -> Result<Self> {
        if ck.layers.len() + 1 != ck.dims.len() {
            return Err(Error::InvalidParameter(
                "checkpoint dims do not chain with its layers".into(),
            ));
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for (l, lc) in ck.layers.into_iter().enumerate() {
            if lc.rows != ck.dims[l] || lc.cols != ck.dims[l + 1] {
                return Err(Error::InvalidParameter(format!(
                    "layer {l} shape {}x{} does not match dims",
                    lc.rows, lc.cols
                )));
            }
            if lc.b.len() != lc.cols {
                return Err(Error::InvalidParameter(format!("layer {l} bias length mismatch")));
            }
            let w = Array2::from_shape_vec((lc.rows, lc.cols), lc.w)
                .map_err(|e| Error::InvalidParameter(format!("layer {l} weights: {e}")))?;
            layers.push(Layer {
                w,
                b: Array1::from_vec(lc.b),
                activation: lc.activation,
            });
        }
        Ok(Self {
            layers,
            dims: ck.dims,
        })
    }
}

/// Row-major JSON checkpoint for one dense stack. Encoder and decoder are
/// stored as separate files so a frozen-encoder workflow can load just the
/// encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub dims: Vec<usize>,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub activation: Activation,
}

pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Loss weights of the composed objective; rejects the degenerate
/// both-zero case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeLossWeights {
    pub lambda_r: f64,
    pub lambda_c: f64,
}

impl CompositeLossWeights {
    pub fn new(lambda_r: f64, lambda_c: f64) -> Result<Self> {
        if lambda_r < 0.0 || lambda_c < 0.0 {
            return Err(Error::InvalidParameter("loss weights must be non-negative".into()));
        }
        if lambda_r == 0.0 && lambda_c == 0.0 {
            return Err(Error::InvalidParameter("loss weights cannot both be zero".into()));
        }
        Ok(Self { lambda_r, lambda_c })
    }
}

/// Sum of squared reconstruction errors over the batch.
pub fn reconstruction_loss(x: ArrayView2<f64>, xtilde: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != xtilde.dim() {
        return Err(Error::DimensionMismatch {
            context: "reconstruction loss",
            expected: x.len(),
            actual: xtilde.len(),
        });
    }
    let mut sum = 0.0;
    for (a, b) in x.iter().zip(xtilde.iter()) {
        let d = a - b;
        sum += d * d;
    }
    Ok(sum)
}

/// Forward state of the composed model.
pub struct ComposedState {
    pub loss: f64,
    pub loss_r: f64,
    pub loss_c: f64,
    x: Array2<f64>,
    enc_cache: MlpCache,
    latent: Array2<f64>,
    dmm_state: Option<LossState>,
    dec_cache: MlpCache,
    xtilde: Array2<f64>,
}

impl ComposedState {
    pub fn latent(&self) -> ArrayView2<'_, f64> {
        self.latent.view()
    }

    pub fn reconstruction(&self) -> ArrayView2<'_, f64> {
        self.xtilde.view()
    }
}

/// `L = lambda_r * L_r + lambda_c * L_c` through deep encoder, mixture
/// encoder/decoder and deep decoder.
///
/// With `lambda_c > 0` the deep decoder reconstructs from `theta_tilde`;
/// with `lambda_c == 0` the mixture stage is skipped and the decoder sees
/// the latent codes directly (plain autoencoder).
pub fn composed_loss(
    encoder: &MlpParams,
    dmm_params: &DmmParams,
    decoder: &MlpParams,
    x: ArrayView2<f64>,
    weights: CompositeLossWeights,
) -> Result<ComposedState> {
    let (latent, enc_cache) = encoder.forward_cached(x)?;
    let (dmm_state, dec_input) = if weights.lambda_c > 0.0 {
        let state = dmm::clustering_loss(dmm_params, latent.view())?;
        let dec_input = state.theta_tilde().to_owned();
        (Some(state), dec_input)
    } else {
        (None, latent.clone())
    };
    let (xtilde, dec_cache) = decoder.forward_cached(dec_input.view())?;
    let loss_r = reconstruction_loss(x, xtilde.view())?;
    let loss_c = dmm_state.as_ref().map_or(0.0, |s| s.loss);
    Ok(ComposedState {
        loss: weights.lambda_r * loss_r + weights.lambda_c * loss_c,
        loss_r,
        loss_c,
        x: x.to_owned(),
        enc_cache,
        latent,
        dmm_state,
        dec_cache,
        xtilde,
    })
}

#[derive(Debug, Clone)]
pub struct ComposedGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
    /// Absent when the mixture stage was bypassed (`lambda_c == 0`).
    pub dmm: Option<DmmGrads>,
}

/// Reverse-mode gradients of [`composed_loss`] for all weight stacks and
/// mixture parameters.
pub fn composed_backward(
    encoder: &MlpParams,
    dmm_params: &DmmParams,
    decoder: &MlpParams,
    state: &ComposedState,
    weights: CompositeLossWeights,
    stop_gradient_assignments: bool,
) -> Result<ComposedGrads> {
    // dL/dxtilde = lambda_r * 2 (xtilde - x)
    let mut d_xtilde = &state.xtilde - &state.x;
    d_xtilde.mapv_inplace(|v| 2.0 * weights.lambda_r * v);
    let (dec_grads, d_dec_input) = decoder.backward(&state.dec_cache, d_xtilde.view());
    let (dmm_grads, d_latent) = match &state.dmm_state {
        Some(dmm_state) => {
            let opts = BackwardOpts {
                scale: weights.lambda_c,
                upstream_theta_tilde: Some(d_dec_input.view()),
                stop_gradient_assignments,
            };
            let grads = dmm::clustering_loss_backward_opts(dmm_params, dmm_state, &opts)?;
            let d_latent = grads.h.clone();
            (Some(grads), d_latent)
        }
        None => (None, d_dec_input),
    };
    let (enc_grads, _) = encoder.backward(&state.enc_cache, d_latent.view());
    Ok(ComposedGrads {
        encoder: enc_grads,
        decoder: dec_grads,
        dmm: dmm_grads,
    })
}

/// Plain-autoencoder loss and gradients, used for pretraining.
pub fn ae_loss_and_grads(
    encoder: &MlpParams,
    decoder: &MlpParams,
    x: ArrayView2<f64>,
) -> Result<(f64, MlpGrads, MlpGrads)> {
    let (latent, enc_cache) = encoder.forward_cached(x)?;
    let (xtilde, dec_cache) = decoder.forward_cached(latent.view())?;
    let loss = reconstruction_loss(x, xtilde.view())?;
    let mut d_xtilde = &xtilde - &x;
    d_xtilde.mapv_inplace(|v| 2.0 * v);
    let (dec_grads, d_latent) = decoder.backward(&dec_cache, d_xtilde.view());
    let (enc_grads, _) = encoder.backward(&enc_cache, d_latent.view());
    Ok((loss, enc_grads, dec_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissim::DissimilarityKind;
    use crate::gradcheck;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(m: usize) -> Layer {
        Layer {
            w: Array2::eye(m),
            b: Array1::zeros(m),
            activation: Activation::Linear,
        }
    }

    #[test]
    fn zero_weights_give_zero_latent() {
        let mlp = MlpParams::from_layers(vec![
            Layer {
                w: Array2::zeros((3, 4)),
                b: Array1::zeros(4),
                activation: Activation::Relu,
            },
            Layer {
                w: Array2::zeros((4, 2)),
                b: Array1::zeros(2),
                activation: Activation::Linear,
            },
        ])
        .unwrap();
        let x = array![[1.0, -2.0, 3.0]];
        let out = mlp.forward(x.view()).unwrap();
        assert_eq!(out, array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = MlpParams::from_layers(vec![identity_layer(3)]).unwrap();
        let x = array![[1.5, -0.25, 0.0], [2.0, 2.0, -2.0]];
        assert_eq!(mlp.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn forward_matches_straight_line_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = MlpParams::new_seeded(&[3, 5, 2], &mut rng).unwrap();
        let mut x = Array2::zeros((6, 3));
        x.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        let out = mlp.forward(x.view()).unwrap();
        for i in 0..6 {
            // layer 1: relu(x W0 + b0)
            let mut hidden = vec![0.0; 5];
            for j in 0..5 {
                let mut acc = mlp.layers()[0].b[j];
                for p in 0..3 {
                    acc += x[[i, p]] * mlp.layers()[0].w[[p, j]];
                }
                hidden[j] = acc.max(0.0);
            }
            // layer 2: linear
            for j in 0..2 {
                let mut acc = mlp.layers()[1].b[j];
                for (p, h) in hidden.iter().enumerate() {
                    acc += h * mlp.layers()[1].w[[p, j]];
                }
                assert_abs_diff_eq!(out[[i, j]], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hidden_layers_are_relu_and_last_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = MlpParams::new_seeded(&[2, 4, 4, 3], &mut rng).unwrap();
        let acts: Vec<Activation> = mlp.layers().iter().map(|l| l.activation).collect();
        assert_eq!(acts, vec![Activation::Relu, Activation::Relu, Activation::Linear]);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let x = array![[0.0, 0.0]];
        assert_eq!(reconstruction_loss(x.view(), x.view()).unwrap(), 0.0);
        let xt = array![[3.0, 4.0]];
        assert_eq!(reconstruction_loss(x.view(), xt.view()).unwrap(), 25.0);
    }

    #[test]
    fn reconstruction_loss_is_additive_over_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Array2::zeros((10, 3));
        let mut xt = Array2::zeros((10, 3));
        x.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        xt.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let full = reconstruction_loss(x.view(), xt.view()).unwrap();
        let a = reconstruction_loss(x.slice(ndarray::s![..4, ..]), xt.slice(ndarray::s![..4, ..]))
            .unwrap();
        let b = reconstruction_loss(x.slice(ndarray::s![4.., ..]), xt.slice(ndarray::s![4.., ..]))
            .unwrap();
        assert_eq!(full, a + b);
    }

    fn small_instance(
        seed: u64,
    ) -> (MlpParams, MlpParams, crate::dmm::DmmParams, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = MlpParams::new_seeded(&[3, 5, 2], &mut rng).unwrap();
        let decoder = MlpParams::new_seeded(&[2, 5, 3], &mut rng).unwrap();
        let (dmm, _) =
            gradcheck::sample_dmm_instance(&DissimilarityKind::Euclidean, 4, 2, 2, 1.1, seed)
                .unwrap();
        let mut x = Array2::zeros((4, 3));
        x.mapv_inplace(|_| rng.gen_range(-1.5..1.5));
        (encoder, decoder, dmm, x)
    }

    #[test]
    fn lambda_c_zero_reduces_to_the_autoencoder_loss() {
        let (encoder, decoder, dmm, x) = small_instance(11);
        let weights = CompositeLossWeights::new(0.8, 0.0).unwrap();
        let state = composed_loss(&encoder, &dmm, &decoder, x.view(), weights).unwrap();
        let latent = encoder.forward(x.view()).unwrap();
        let xtilde = decoder.forward(latent.view()).unwrap();
        let ae = reconstruction_loss(x.view(), xtilde.view()).unwrap();
        assert_eq!(state.loss, 0.8 * ae);
        assert_eq!(state.loss_c, 0.0);
    }

    #[test]
    fn lambda_r_zero_with_identity_stacks_is_the_clustering_loss() {
        let (_, _, dmm, _) = small_instance(12);
        let m = dmm.dim();
        let encoder = MlpParams::from_layers(vec![identity_layer(m)]).unwrap();
        let decoder = MlpParams::from_layers(vec![identity_layer(m)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = Array2::zeros((6, m));
        x.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let weights = CompositeLossWeights::new(0.0, 1.0).unwrap();
        let state = composed_loss(&encoder, &dmm, &decoder, x.view(), weights).unwrap();
        let direct = crate::dmm::clustering_loss(&dmm, x.view()).unwrap();
        assert_eq!(state.loss, direct.loss);
    }

    #[test]
    fn composed_loss_matches_independent_re_implementation() {
        let (encoder, decoder, dmm, x) = small_instance(14);
        let weights = CompositeLossWeights::new(0.7, 0.4).unwrap();
        let state = composed_loss(&encoder, &dmm, &decoder, x.view(), weights).unwrap();

        // straight-line oracle: dense layers, naive softmax, loops only
        let n = x.nrows();
        let forward = |mlp: &MlpParams, input: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let mut cur = input.clone();
            for layer in mlp.layers() {
                let mut next = vec![vec![0.0; layer.w.ncols()]; cur.len()];
                for (i, row) in cur.iter().enumerate() {
                    for j in 0..layer.w.ncols() {
                        let mut acc = layer.b[j];
                        for (p, v) in row.iter().enumerate() {
                            acc += v * layer.w[[p, j]];
                        }
                        next[i][j] = match layer.activation {
                            Activation::Relu => acc.max(0.0),
                            Activation::Linear => acc,
                        };
                    }
                }
                cur = next;
            }
            cur
        };
        let x_rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        let h = forward(&encoder, &x_rows);
        let k = dmm.num_clusters();
        let m = dmm.dim();
        let mut loss_c = 0.0;
        let mut theta_tilde = vec![vec![0.0; m]; n];
        for i in 0..n {
            let mut weights_row = vec![0.0; k];
            let mut z = 0.0;
            for c in 0..k {
                let d: f64 = h[i]
                    .iter()
                    .zip(dmm.theta.row(c).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                weights_row[c] = (-dmm.alpha * d + dmm.phi[c]).exp();
                z += weights_row[c];
            }
            let mut phi_tilde = 0.0;
            for c in 0..k {
                let s = weights_row[c] / z;
                phi_tilde += s * dmm.phi[c];
                for j in 0..m {
                    theta_tilde[i][j] += s * dmm.theta[[c, j]];
                }
            }
            let d: f64 = h[i]
                .iter()
                .zip(theta_tilde[i].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            loss_c += dmm.alpha * d - phi_tilde;
        }
        let xtilde = forward(&decoder, &theta_tilde);
        let mut loss_r = 0.0;
        for i in 0..n {
            for j in 0..3 {
                let d = x[[i, j]] - xtilde[i][j];
                loss_r += d * d;
            }
        }
        let oracle = 0.7 * loss_r + 0.4 * loss_c;
        assert_abs_diff_eq!(state.loss, oracle, epsilon = 1e-10);
    }

    #[test]
    fn composed_backward_matches_finite_differences() {
        for kind in [
            DissimilarityKind::Euclidean,
            DissimilarityKind::SquaredEuclidean,
            DissimilarityKind::Mahalanobis,
        ] {
            for seed in [4u64, 5] {
                let report = gradcheck::deepnet_report(&kind, seed).unwrap();
                assert!(
                    report.rel_err <= 1e-4,
                    "{}: rel_err {}",
                    kind.tag(),
                    report.rel_err
                );
            }
        }
    }

    #[test]
    fn lambda_c_zero_produces_no_mixture_gradients() {
        let (encoder, decoder, dmm, x) = small_instance(15);
        let weights = CompositeLossWeights::new(1.0, 0.0).unwrap();
        let state = composed_loss(&encoder, &dmm, &decoder, x.view(), weights).unwrap();
        let grads = composed_backward(&encoder, &dmm, &decoder, &state, weights, false).unwrap();
        assert!(grads.dmm.is_none());
    }

    #[test]
    fn dead_relu_unit_gets_zero_weight_gradients() {
        // second hidden unit has a hugely negative bias: always off
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut first = Layer {
            w: Array2::zeros((2, 3)),
            b: Array1::zeros(3),
            activation: Activation::Relu,
        };
        first.w.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        first.b[1] = -100.0;
        let mut second = Layer {
            w: Array2::zeros((3, 2)),
            b: Array1::zeros(2),
            activation: Activation::Linear,
        };
        second.w.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let encoder = MlpParams::from_layers(vec![first, second]).unwrap();
        let decoder = MlpParams::from_layers(vec![identity_layer(2)]).unwrap();
        let mut x = Array2::zeros((5, 2));
        x.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let (_, enc_grads, _) = ae_loss_and_grads(&encoder, &decoder, x.view()).unwrap();
        for p in 0..2 {
            assert_eq!(enc_grads.weights[0][[p, 1]], 0.0);
        }
        assert_eq!(enc_grads.biases[0][1], 0.0);
    }

    #[test]
    fn all_parameters_receive_gradients_when_both_weights_are_positive() {
        let (encoder, decoder, dmm, x) = small_instance(17);
        let weights = CompositeLossWeights::new(0.5, 0.5).unwrap();
        let state = composed_loss(&encoder, &dmm, &decoder, x.view(), weights).unwrap();
        let grads = composed_backward(&encoder, &dmm, &decoder, &state, weights, false).unwrap();
        for w in &grads.encoder.weights {
            assert!(w.iter().any(|&v| v != 0.0), "encoder weight block is all zero");
        }
        for w in &grads.decoder.weights {
            assert!(w.iter().any(|&v| v != 0.0), "decoder weight block is all zero");
        }
        let dmm_grads = grads.dmm.unwrap();
        assert!(dmm_grads.theta.iter().any(|&v| v != 0.0));
        assert!(dmm_grads.phi.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let (encoder, decoder, dmm, x) = small_instance(18);
        let weights = CompositeLossWeights::new(0.6, 0.4).unwrap();
        let a = composed_loss(&encoder, &dmm, &decoder, x.view(), weights).unwrap();
        let b = composed_loss(&encoder, &dmm, &decoder, x.view(), weights).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        let ga = composed_backward(&encoder, &dmm, &decoder, &a, weights, false).unwrap();
        let gb = composed_backward(&encoder, &dmm, &decoder, &b, weights, false).unwrap();
        for (x, y) in ga.encoder.weights.iter().zip(gb.encoder.weights.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mlp = MlpParams::new_seeded(&[4, 8, 3], &mut rng).unwrap();
        let json = serde_json::to_string(&mlp.to_checkpoint()).unwrap();
        let back = MlpParams::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.dims(), mlp.dims());
        for (a, b) in back.layers().iter().zip(mlp.layers().iter()) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
            assert_eq!(a.activation, b.activation);
        }
    }

    #[test]
    fn weights_must_not_both_be_zero() {
        assert!(CompositeLossWeights::new(0.0, 0.0).is_err());
        assert!(CompositeLossWeights::new(-0.1, 1.0).is_err());
        assert!(CompositeLossWeights::new(1.0, 0.0).is_ok());
    }

    #[test]
    fn pretraining_reduces_reconstruction_loss_on_moons() {
        use crate::optim::{minibatches, OptimKind, Optimizer};
        let ds = crate::data::gen_moons(256, 0.1, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = [2usize, 256, 256, 100];
        let dec_dims = [100usize, 256, 256, 2];
        let mut encoder = MlpParams::new_seeded(&dims, &mut rng).unwrap();
        let mut decoder = MlpParams::new_seeded(&dec_dims, &mut rng).unwrap();
        let mut opt = Optimizer::new(OptimKind::Adam, 1e-3);
        let mut shuffle = ChaCha8Rng::seed_from_u64(1);
        let mut epoch_losses = Vec::new();
        for _ in 0..8 {
            let mut total = 0.0;
            for batch in minibatches(ds.len(), 32, &mut shuffle) {
                let xb = ds.x.select(ndarray::Axis(0), &batch);
                let (loss, enc_g, dec_g) = ae_loss_and_grads(&encoder, &decoder, xb.view()).unwrap();
                total += loss;
                let grads: Vec<&[f64]> = enc_g
                    .weights
                    .iter()
                    .zip(enc_g.biases.iter())
                    .chain(dec_g.weights.iter().zip(dec_g.biases.iter()))
                    .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
                    .collect();
                let mut tensors: Vec<&mut [f64]> = Vec::new();
                for layer in encoder.layers_mut() {
                    tensors.push(layer.w.as_slice_mut().unwrap());
                    tensors.push(layer.b.as_slice_mut().unwrap());
                }
                for layer in decoder.layers_mut() {
                    tensors.push(layer.w.as_slice_mut().unwrap());
                    tensors.push(layer.b.as_slice_mut().unwrap());
                }
                opt.step(&mut tensors, &grads).unwrap();
            }
            epoch_losses.push(total);
        }
        let head = (epoch_losses[0] + epoch_losses[1]) / 2.0;
        let tail = (epoch_losses[6] + epoch_losses[7]) / 2.0;
        assert!(
            tail < head,
            "reconstruction loss should trend down: {epoch_losses:?}"
        );
    }
}
