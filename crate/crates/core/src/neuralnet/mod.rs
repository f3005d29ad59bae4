//! Small fully-connected feature networks with exact backpropagation.
//!
//! Each layer is `dense -> activation -> optional batch norm`, the ordering
//! used by the architecture tables this crate mirrors.

mod adam;
mod gradcheck;

pub use adam::{AdamConfig, AdamState, ParamSlot};
pub use gradcheck::{grad_check, relative_error};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub batch_norm: Vec<bool>,
}

impl NetworkSpec {
    /// Hidden layers use `hidden_act` with batch norm, the output layer uses
    /// `out_act` without it.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, hidden_act: Activation, out_act: Activation) -> Self {
        let mut layer_dims = vec![input];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(output);
        let n = layer_dims.len() - 1;
        let mut activations = vec![hidden_act; n];
        activations[n - 1] = out_act;
        let mut batch_norm = vec![true; n];
        batch_norm[n - 1] = false;
        NetworkSpec {
            layer_dims,
            activations,
            batch_norm,
        }
    }

    /// A single bias-free-initialized linear map.
    pub fn linear(input: usize, output: usize) -> Self {
        NetworkSpec {
            layer_dims: vec![input, output],
            activations: vec![Activation::Linear],
            batch_norm: vec![false],
        }
    }

    pub fn without_batch_norm(mut self) -> Self {
        self.batch_norm.iter_mut().for_each(|b| *b = false);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::config("layer_dims", "need at least input and output dims"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::config("layer_dims", "dims must be positive"));
        }
        let n = self.layer_dims.len() - 1;
        if self.activations.len() != n || self.batch_norm.len() != n {
            return Err(Error::config(
                "activations/batch_norm",
                format!(
                    "expected {n} entries each, got {} and {}",
                    self.activations.len(),
                    self.batch_norm.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in x out`, so a batch maps as `X W + b`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

/// Fixed, non-trainable preprocessing of raw inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputTransform {
    /// `(x − shift) / scale` per column.
    Affine { shift: Vec<f64>, scale: Vec<f64> },
    /// A single raw column mapped to the indicator of its nearest level.
    OneHot { levels: Vec<f64> },
}

impl InputTransform {
    /// Standardizes each column by its mean and standard deviation (unit
    /// scale for constant columns).
    pub fn fit_affine(data: &Matrix) -> Self {
        let (n, d) = data.shape();
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        if n > 0 {
            for j in 0..d {
                let mean = (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (data.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
                shift[j] = mean;
                scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
            }
        }
        InputTransform::Affine { shift, scale }
    }

    fn raw_dim(&self, encoded: usize) -> usize {
        match self {
            InputTransform::Affine { .. } => encoded,
            InputTransform::OneHot { .. } => 1,
        }
    }

    fn check(&self, encoded: usize) -> Result<()> {
        let ok = match self {
            InputTransform::Affine { shift, scale } => {
                shift.len() == encoded && scale.len() == encoded && scale.iter().all(|s| *s != 0.0)
            }
            InputTransform::OneHot { levels } => levels.len() == encoded,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "InputTransform",
                format!("transform does not produce {encoded} inputs"),
            ))
        }
    }

    fn apply(&self, batch: &Matrix) -> Matrix {
        match self {
            InputTransform::Affine { shift, scale } => {
                let mut x = batch.clone();
                for i in 0..x.rows() {
                    for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                        *v = (*v - shift[j]) / scale[j];
                    }
                }
                x
            }
            InputTransform::OneHot { levels } => {
                let mut x = Matrix::zeros(batch.rows(), levels.len());
                for i in 0..batch.rows() {
                    let v = batch.get(i, 0);
                    let k = levels
                        .iter()
                        .enumerate()
                        .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
                        .map(|(k, _)| k)
                        .unwrap_or(0);
                    x.set(i, k, 1.0);
                }
                x
            }
        }
    }

    /// Chains an encoded-input gradient back to the raw inputs. The one-hot
    /// encoding is piecewise constant, so its gradient is zero.
    fn backward(&self, grad: Matrix) -> Matrix {
        match self {
            InputTransform::Affine { scale, .. } => {
                let mut g = grad;
                for i in 0..g.rows() {
                    for (v, sc) in g.row_mut(i).iter_mut().zip(scale) {
                        *v /= sc;
                    }
                }
                g
            }
            InputTransform::OneHot { .. } => Matrix::zeros(grad.rows(), 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<DenseLayer>,
}

impl NetworkParams {
    pub fn init(spec: &NetworkSpec, rng: &mut SeededRng) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let fan_in = spec.layer_dims[l];
                let fan_out = spec.layer_dims[l + 1];
                let bound = match spec.activations[l] {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    Activation::Tanh | Activation::Linear => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                DenseLayer {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("shape"),
                    bias: vec![0.0; fan_out],
                    bn: spec.batch_norm[l].then(|| BatchNorm {
                        gamma: vec![1.0; fan_out],
                        beta: vec![0.0; fan_out],
                        running_mean: vec![0.0; fan_out],
                        running_var: vec![1.0; fan_out],
                    }),
                }
            })
            .collect();
        NetworkParams { layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    /// Flattened views in the same order as [`FeatureNetwork::param_slots`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias[..]);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(&g[..]);
                out.push(&b[..]);
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    pre: Matrix,
    post: Matrix,
    bn_norm: Option<Matrix>,
    bn_inv_std: Option<Vec<f64>>,
}

/// Intermediate values of one forward pass, consumed by [`FeatureNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    version: u64,
    out_shape: (usize, usize),
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetwork {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub input: Option<InputTransform>,
    version: u64,
}

impl FeatureNetwork {
    pub fn new(spec: NetworkSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let params = NetworkParams::init(&spec, rng);
        Ok(FeatureNetwork {
            spec,
            params,
            input: None,
            version: 0,
        })
    }

    pub fn from_parts(spec: NetworkSpec, params: NetworkParams, input: Option<InputTransform>) -> Result<Self> {
        spec.validate()?;
        if params.layers.len() != spec.num_layers() {
            return Err(Error::dim(
                "FeatureNetwork::from_parts",
                format!("{} layers for a {}-layer spec", params.layers.len(), spec.num_layers()),
            ));
        }
        for (l, layer) in params.layers.iter().enumerate() {
            let (i, o) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            if layer.weight.shape() != (i, o) || layer.bias.len() != o || layer.bn.is_some() != spec.batch_norm[l] {
                return Err(Error::dim("FeatureNetwork::from_parts", format!("layer {l} shape")));
            }
            if let Some(bn) = &layer.bn {
                if bn.running_var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l} running variance must be > 0"
                    )));
                }
            }
        }
        if let Some(t) = &input {
            t.check(spec.input_dim())?;
        }
        Ok(FeatureNetwork {
            spec,
            params,
            input,
            version: 0,
        })
    }

    /// Single bias-free linear layer `x ↦ Wᵀx` with `W` of shape `in x out`.
    pub fn linear_map(weight: Matrix) -> Result<Self> {
        let spec = NetworkSpec::linear(weight.rows(), weight.cols());
        let bias = vec![0.0; weight.cols()];
        Self::from_parts(
            spec,
            NetworkParams {
                layers: vec![DenseLayer { weight, bias, bn: None }],
            },
            None,
        )
    }

    /// `φ(x) = x`.
    pub fn identity(dim: usize) -> Self {
        Self::linear_map(Matrix::identity(dim)).expect("identity layer is well formed")
    }

    pub fn with_input(mut self, input: InputTransform) -> Result<Self> {
        input.check(self.spec.input_dim())?;
        self.input = Some(input);
        Ok(self)
    }

    /// Width of the raw batches accepted by `forward`.
    pub fn input_dim(&self) -> usize {
        match &self.input {
            Some(t) => t.raw_dim(self.spec.input_dim()),
            None => self.spec.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Train mode: batch statistics, running statistics updated.
    pub fn forward_train(&mut self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let (out, cache, stats) = self.run(batch, Mode::Train)?;
        for (layer, (mean, var)) in self.params.layers.iter_mut().zip(stats) {
            if let (Some(bn), Some(mean), Some(var)) = (layer.bn.as_mut(), mean, var) {
                for k in 0..bn.running_mean.len() {
                    bn.running_mean[k] = BN_MOMENTUM * bn.running_mean[k] + (1.0 - BN_MOMENTUM) * mean[k];
                    bn.running_var[k] = BN_MOMENTUM * bn.running_var[k] + (1.0 - BN_MOMENTUM) * var[k];
                }
            }
        }
        Ok((out, cache))
    }

    /// Eval mode: running statistics, no state change.
    pub fn forward_eval(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let (out, cache, _) = self.run(batch, Mode::Eval)?;
        Ok((out, cache))
    }

    pub fn forward(&mut self, batch: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
        match mode {
            Mode::Train => self.forward_train(batch),
            Mode::Eval => self.forward_eval(batch),
        }
    }

    /// Eval-mode outputs only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_eval(batch)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        batch: &Matrix,
        mode: Mode,
    ) -> Result<(Matrix, ForwardCache, Vec<(Option<Vec<f64>>, Option<Vec<f64>>)>)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::dim(
                "FeatureNetwork::forward",
                format!(
                    "batch has {} columns, network expects {}",
                    batch.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut x = match &self.input {
            Some(t) => t.apply(batch),
            None => batch.clone(),
        };
        let n = x.rows();
        let mut layers = Vec::with_capacity(self.params.layers.len());
        let mut stats = Vec::with_capacity(self.params.layers.len());
        for (l, layer) in self.params.layers.iter().enumerate() {
            let act = self.spec.activations[l];
            let mut pre = x.matmul(&layer.weight)?;
            for i in 0..n {
                for (v, b) in pre.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut post = pre.clone();
            post.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            let (out, bn_norm, bn_inv_std, stat) = match &layer.bn {
                None => (post.clone(), None, None, (None, None)),
                Some(bn) => {
                    let width = post.cols();
                    let (mean, var) = match mode {
                        Mode::Train => column_moments(&post),
                        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut norm = post.clone();
                    let mut out = post.clone();
                    for i in 0..n {
                        for k in 0..width {
                            let xn = (post.get(i, k) - mean[k]) * inv_std[k];
                            norm.set(i, k, xn);
                            out.set(i, k, bn.gamma[k] * xn + bn.beta[k]);
                        }
                    }
                    let stat = match mode {
                        Mode::Train => (Some(mean), Some(var)),
                        Mode::Eval => (None, None),
                    };
                    (out, Some(norm), Some(inv_std), stat)
                }
            };
            layers.push(LayerCache {
                input: x,
                pre,
                post,
                bn_norm,
                bn_inv_std,
            });
            stats.push(stat);
            x = out;
        }
        let cache = ForwardCache {
            mode,
            version: self.version,
            out_shape: x.shape(),
            layers,
        };
        Ok((x, cache, stats))
    }

    /// Gradients of `Σ upstream ⊙ output` with respect to all parameters and
    /// to the (unscaled) input batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(NetworkGrads, Matrix)> {
        if cache.version != self.version || cache.layers.len() != self.params.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, network at {}",
                cache.version, self.version
            )));
        }
        if upstream.shape() != cache.out_shape {
            return Err(Error::dim(
                "FeatureNetwork::backward",
                format!("upstream {:?} vs output {:?}", upstream.shape(), cache.out_shape),
            ));
        }
        let mut grad = upstream.clone();
        let mut layer_grads = Vec::with_capacity(self.params.layers.len());
        for (l, layer) in self.params.layers.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let act = self.spec.activations[l];
            let n = grad.rows();
            let width = grad.cols();
            let (dpost, gamma_g, beta_g) = match (&layer.bn, &lc.bn_norm, &lc.bn_inv_std) {
                (Some(bn), Some(norm), Some(inv_std)) => {
                    let mut dgamma = vec![0.0; width];
                    let mut dbeta = vec![0.0; width];
                    for i in 0..n {
                        for k in 0..width {
                            dgamma[k] += grad.get(i, k) * norm.get(i, k);
                            dbeta[k] += grad.get(i, k);
                        }
                    }
                    let mut dpost = Matrix::zeros(n, width);
                    match cache.mode {
                        Mode::Train => {
                            let nf = n as f64;
                            for k in 0..width {
                                let mut sum_dxn = 0.0;
                                let mut sum_dxn_xn = 0.0;
                                for i in 0..n {
                                    let dxn = grad.get(i, k) * bn.gamma[k];
                                    sum_dxn += dxn;
                                    sum_dxn_xn += dxn * norm.get(i, k);
                                }
                                for i in 0..n {
                                    let dxn = grad.get(i, k) * bn.gamma[k];
                                    let v = inv_std[k] / nf * (nf * dxn - sum_dxn - norm.get(i, k) * sum_dxn_xn);
                                    dpost.set(i, k, v);
                                }
                            }
                        }
                        Mode::Eval => {
                            for i in 0..n {
                                for k in 0..width {
                                    dpost.set(i, k, grad.get(i, k) * bn.gamma[k] * inv_std[k]);
                                }
                            }
                        }
                    }
                    (dpost, Some(dgamma), Some(dbeta))
                }
                _ => (grad, None, None),
            };
            let mut dpre = dpost;
            for ((d, z), h) in dpre
                .as_mut_slice()
                .iter_mut()
                .zip(lc.pre.as_slice())
                .zip(lc.post.as_slice())
            {
                *d *= act.derivative(*z, *h);
            }
            let dweight = lc.input.matmul_tn(&dpre)?;
            let mut dbias = vec![0.0; width];
            for i in 0..n {
                for (b, d) in dbias.iter_mut().zip(dpre.row(i)) {
                    *b += d;
                }
            }
            grad = dpre.matmul_nt(&layer.weight)?;
            layer_grads.push(LayerGrads {
                weight: dweight,
                bias: dbias,
                gamma: gamma_g,
                beta: beta_g,
            });
        }
        layer_grads.reverse();
        if let Some(t) = &self.input {
            grad = t.backward(grad);
        }
        Ok((NetworkGrads { layers: layer_grads }, grad))
    }

    /// Trainable parameters in declaration order, paired with names.
    pub fn param_slots<'a>(&'a mut self, prefix: &str) -> Vec<ParamSlot<'a>> {
        self.version += 1;
        let mut out = Vec::new();
        for (l, layer) in self.params.layers.iter_mut().enumerate() {
            out.push(ParamSlot::new(
                format!("{prefix}layer{l}.weight"),
                layer.weight.as_mut_slice(),
            ));
            out.push(ParamSlot::new(format!("{prefix}layer{l}.bias"), &mut layer.bias[..]));
            if let Some(bn) = layer.bn.as_mut() {
                out.push(ParamSlot::new(format!("{prefix}layer{l}.bn_gamma"), &mut bn.gamma[..]));
                out.push(ParamSlot::new(format!("{prefix}layer{l}.bn_beta"), &mut bn.beta[..]));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params
            .layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len() + l.bn.as_ref().map_or(0, |b| 2 * b.gamma.len()))
            .sum()
    }

    pub fn zero_grads(&self) -> NetworkGrads {
        NetworkGrads {
            layers: self
                .params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    gamma: l.bn.as_ref().map(|b| vec![0.0; b.gamma.len()]),
                    beta: l.bn.as_ref().map(|b| vec![0.0; b.beta.len()]),
                })
                .collect(),
        }
    }
}

fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = m.shape();
    let nf = n.max(1) as f64;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (a, v) in mean.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= nf);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            var[k] += (m.get(i, k) - mean[k]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(act: Activation, w: Matrix) -> FeatureNetwork {
        let spec = NetworkSpec {
            layer_dims: vec![w.rows(), w.cols()],
            activations: vec![act],
            batch_norm: vec![false],
        };
        let bias = vec![0.0; w.cols()];
        FeatureNetwork::from_parts(
            spec,
            NetworkParams {
                layers: vec![DenseLayer {
                    weight: w,
                    bias,
                    bn: None,
                }],
            },
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_relu_tanh_examples() {
        let net = single_layer(Activation::Linear, Matrix::identity(2));
        let out = net.predict(&Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
        let net = single_layer(Activation::Relu, Matrix::identity(2));
        let out = net.predict(&Matrix::row_vector(&[-1.0, 3.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 3.0]);
        let net = single_layer(Activation::Tanh, Matrix::zeros(1, 1));
        let out = net.predict(&Matrix::row_vector(&[5.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = single_layer(Activation::Linear, Matrix::identity(2));
        assert!(matches!(
            net.predict(&Matrix::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn linear_backward_outer_product() {
        let mut net = single_layer(Activation::Linear, Matrix::identity(2));
        let x = Matrix::row_vector(&[3.0, -2.0]);
        let (_, cache) = net.forward_train(&x).unwrap();
        let up = Matrix::row_vector(&[1.0, 0.0]);
        let (g, dx) = net.backward(&cache, &up).unwrap();
        // dW[i][j] = x_i * up_j
        assert_eq!(g.layers[0].weight.as_slice(), &[3.0, 0.0, -2.0, 0.0]);
        assert_eq!(dx.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = SeededRng::new(4);
        let spec = NetworkSpec::mlp(3, &[5], 2, Activation::Relu, Activation::Tanh);
        let mut net = FeatureNetwork::new(spec, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let (out, cache) = net.forward_train(&x).unwrap();
        let (g, dx) = net.backward(&cache, &Matrix::zeros(out.rows(), out.cols())).unwrap();
        assert!(g.is_zero());
        assert!(dx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = SeededRng::new(4);
        let mut net = FeatureNetwork::new(NetworkSpec::linear(2, 2), &mut rng).unwrap();
        let x = Matrix::zeros(2, 2);
        let (out, cache) = net.forward_train(&x).unwrap();
        let _ = net.param_slots("");
        let err = net
            .backward(&cache, &Matrix::zeros(out.rows(), out.cols()))
            .unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = SeededRng::new(9);
        let spec = NetworkSpec::mlp(2, &[4], 3, Activation::Relu, Activation::Linear);
        let mut net = FeatureNetwork::new(spec, &mut rng).unwrap();
        let x = Matrix::from_vec(5, 2, (0..10).map(|i| (i as f64).sin()).collect()).unwrap();
        net.forward_train(&x).unwrap();
        let before = net.clone();
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(before, net);
    }

    #[test]
    fn batch_norm_running_stats_converge_to_batch_stats() {
        let mut rng = SeededRng::new(21);
        let spec = NetworkSpec {
            layer_dims: vec![3, 6, 2],
            activations: vec![Activation::Relu, Activation::Linear],
            batch_norm: vec![true, true],
        };
        let mut net = FeatureNetwork::new(spec, &mut rng).unwrap();
        let x = Matrix::from_vec(16, 3, (0..48).map(|_| rng.normal()).collect()).unwrap();
        let mut train_out = Matrix::zeros(0, 0);
        for _ in 0..400 {
            train_out = net.forward_train(&x).unwrap().0;
        }
        let eval_out = net.predict(&x).unwrap();
        let diff = train_out.sub(&eval_out).unwrap().max_abs();
        assert!(diff < 1e-3, "train/eval gap {diff}");
    }

    #[test]
    fn input_scaling_applies_and_backprops() {
        let mut net = single_layer(Activation::Linear, Matrix::identity(1))
            .with_input(InputTransform::Affine {
                shift: vec![2.0],
                scale: vec![4.0],
            })
            .unwrap();
        let (out, cache) = net.forward_train(&Matrix::row_vector(&[10.0])).unwrap();
        assert_eq!(out.as_slice(), &[2.0]);
        let (_, dx) = net.backward(&cache, &Matrix::row_vector(&[1.0])).unwrap();
        assert_eq!(dx.as_slice(), &[0.25]);
    }
}

#[cfg(test)]
mod one_hot_tests {
    use super::*;

    #[test]
    fn one_hot_lookup() {
        let spec = NetworkSpec::linear(3, 1);
        let w = Matrix::column(&[10.0, 20.0, 30.0]);
        let net = FeatureNetwork::from_parts(
            spec,
            NetworkParams {
                layers: vec![DenseLayer {
                    weight: w,
                    bias: vec![0.0],
                    bn: None,
                }],
            },
            Some(InputTransform::OneHot {
                levels: vec![0.0, 1.0, 2.5],
            }),
        )
        .unwrap();
        assert_eq!(net.input_dim(), 1);
        let out = net.predict(&Matrix::column(&[2.5, 0.0, 1.0])).unwrap();
        assert_eq!(out.as_slice(), &[30.0, 10.0, 20.0]);
    }
}
