use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, CtrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Row-wise softmax; only valid on the final layer.
    Softmax,
}

/// Forward-pass mode. Training mode needs a random stream for dropout masks.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight on the previous running value when absorbing a batch.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub batch_norm: Option<BatchNorm>,
    /// Dropout rate applied to this layer's activations in training mode.
    pub dropout: f64,
}

impl Dense {
    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.ncols()
    }
}

/// Shape and regularization of a dense network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by every layer's output width.
    pub widths: Vec<usize>,
    pub output: Activation,
    pub batch_norm: bool,
    pub dropout: f64,
}

impl MlpSpec {
    /// Hidden layers are ReLU; batch norm and dropout go on hidden layers only.
    pub fn new(widths: Vec<usize>, output: Activation) -> Self {
        Self { widths, output, batch_norm: false, dropout: 0.0 }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Intermediates of one layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Array2<f64>,
    /// Normalized pre-activations and the per-feature inverse std used.
    normalized: Option<(Array2<f64>, Array1<f64>)>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
    /// Input to the activation function.
    activation_input: Array2<f64>,
    /// Activation output before dropout.
    activation_output: Array2<f64>,
    dropout_mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    train: bool,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.nrows())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub scale: Option<Array1<f64>>,
    pub shift: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrads {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    scale: l.batch_norm.as_ref().map(|bn| Array1::zeros(bn.scale.len())),
                    shift: l.batch_norm.as_ref().map(|bn| Array1::zeros(bn.shift.len())),
                })
                .collect(),
        }
    }

    /// Flat views in the same order as [`Mlp::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            match (&l.scale, &l.shift) {
                (Some(s), Some(t)) => {
                    out.push(s.as_slice().expect("standard layout"));
                    out.push(t.as_slice().expect("standard layout"));
                }
                _ => out.push(l.bias.as_slice().expect("standard layout")),
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

fn uniform_matrix(rows: usize, cols: usize, limit: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

impl Mlp {
    /// Fan-in scaled uniform init: He bound for layers feeding a ReLU,
    /// LeCun bound for the output layer. Biases start at zero.
    pub fn new(spec: &MlpSpec, rng: &mut dyn RngCore) -> Result<Self> {
        if spec.widths.len() < 2 {
            return Err(config("an MLP needs an input width and at least one layer"));
        }
        if spec.widths.contains(&0) {
            return Err(config("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(config(format!("dropout rate {} not in [0, 1)", spec.dropout)));
        }
        let n_layers = spec.widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
            let last = i + 1 == n_layers;
            let bound = if last { (3.0 / fan_in as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
            layers.push(Dense {
                weight: uniform_matrix(fan_in, fan_out, bound, rng),
                bias: Array1::zeros(fan_out),
                activation: if last { spec.output } else { Activation::Relu },
                batch_norm: (!last && spec.batch_norm).then(|| BatchNorm::new(fan_out)),
                dropout: if last { 0.0 } else { spec.dropout },
            });
        }
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(config("an MLP needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_width() {
                return Err(config(format!("layer {i}: bias length does not match output width")));
            }
            if let Some(bn) = &l.batch_norm {
                let w = l.output_width();
                if [bn.scale.len(), bn.shift.len(), bn.running_mean.len(), bn.running_var.len()].iter().any(|&n| n != w)
                {
                    return Err(config(format!("layer {i}: batch-norm width mismatch")));
                }
                if bn.running_var.iter().any(|v| !v.is_finite() || *v < 0.0)
                    || bn.running_mean.iter().any(|v| !v.is_finite())
                {
                    return Err(config(format!("layer {i}: invalid running statistics")));
                }
            }
            if l.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(config("softmax is only allowed on the final layer"));
            }
            if i > 0 && self.layers[i - 1].output_width() != l.input_width() {
                return Err(config(format!("layer {i}: input width does not match previous output")));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{i}.weight"));
            if l.batch_norm.is_some() {
                out.push(format!("layer{i}.bn_scale"));
                out.push(format!("layer{i}.bn_shift"));
            } else {
                out.push(format!("layer{i}.bias"));
            }
        }
        out
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            match &l.batch_norm {
                Some(bn) => {
                    out.push(bn.scale.as_slice().expect("standard layout"));
                    out.push(bn.shift.as_slice().expect("standard layout"));
                }
                None => out.push(l.bias.as_slice().expect("standard layout")),
            }
        }
        out
    }

    /// Trainable parameters as flat mutable slices: per layer the weight, then either the
    /// bias or, for batch-normalized layers, the bn scale and shift. A bias feeding batch
    /// normalization is cancelled by the mean subtraction, so it is not trained.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            match &mut l.batch_norm {
                Some(bn) => {
                    out.push(bn.scale.as_slice_mut().expect("standard layout"));
                    out.push(bn.shift.as_slice_mut().expect("standard layout"));
                }
                None => out.push(l.bias.as_slice_mut().expect("standard layout")),
            }
        }
        out
    }

    /// Evaluation-mode forward without keeping a cache.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(input, Pass::Eval)?.0)
    }

    pub fn forward(&self, input: &Array2<f64>, mut pass: Pass<'_>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_width() {
            return Err(config(format!(
                "input width {} does not match network input width {}",
                input.ncols(),
                self.input_width()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(validation("non-finite network input"));
        }
        let train = pass.is_train();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut a = x.dot(&layer.weight) + &layer.bias;
            let mut normalized = None;
            let mut batch_mean = None;
            let mut batch_var = None;
            if let Some(bn) = &layer.batch_norm {
                let (mean, var) = if train {
                    let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = a.var_axis(Axis(0), 0.0);
                    batch_mean = Some(mean.clone());
                    batch_var = Some(var.clone());
                    (mean, var)
                } else {
                    (bn.running_mean.clone(), bn.running_var.clone())
                };
                let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                let xhat = (&a - &mean) * &inv_std;
                a = &xhat * &bn.scale + &bn.shift;
                normalized = Some((xhat, inv_std));
            }
            let activation_output = match layer.activation {
                Activation::Relu => a.mapv(|v| v.max(0.0)),
                Activation::Identity => a.clone(),
                Activation::Softmax => softmax_rows(&a),
            };
            let mut out = activation_output.clone();
            let mut dropout_mask = None;
            if let Pass::Train(rng) = &mut pass {
                if layer.dropout > 0.0 {
                    let keep = 1.0 - layer.dropout;
                    let mask = Array2::from_shape_simple_fn(out.raw_dim(), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    out *= &mask;
                    dropout_mask = Some(mask);
                }
            }
            caches.push(LayerCache {
                input: x,
                normalized,
                batch_mean,
                batch_var,
                activation_input: a,
                activation_output,
                dropout_mask,
            });
            x = out;
        }
        Ok((x, ForwardCache { train, layers: caches }))
    }

    /// Gradients of the parameters and the input given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.layers.len() != self.layers.len() {
            return Err(CtrError::Contract("cache was produced by a different network".into()));
        }
        let batch = cache.batch_size();
        if grad_output.nrows() != batch || grad_output.ncols() != self.output_width() {
            return Err(CtrError::Contract(format!(
                "output gradient shape {:?} does not match cached batch ({batch}, {})",
                grad_output.dim(),
                self.output_width()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.to_owned();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if lc.input.ncols() != layer.input_width() || lc.activation_input.ncols() != layer.output_width() {
                return Err(CtrError::Contract("stale cache: layer shapes changed".into()));
            }
            if let Some(mask) = &lc.dropout_mask {
                g *= mask;
            }
            match layer.activation {
                Activation::Relu => {
                    g.zip_mut_with(&lc.activation_input, |gv, &a| {
                        if a <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                }
                Activation::Identity => {}
                Activation::Softmax => {
                    let y = &lc.activation_output;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    g = y * &(&g - &dot);
                }
            }
            let (mut scale_grad, mut shift_grad) = (None, None);
            if let Some(bn) = &layer.batch_norm {
                let (xhat, inv_std) = lc
                    .normalized
                    .as_ref()
                    .ok_or_else(|| CtrError::Contract("cache lacks batch-norm intermediates".into()))?;
                scale_grad = Some((&g * xhat).sum_axis(Axis(0)));
                shift_grad = Some(g.sum_axis(Axis(0)));
                let dxhat = &g * &bn.scale;
                if cache.train {
                    let n = g.nrows() as f64;
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                    g = (&(&dxhat * n - &sum_dxhat) - &(xhat * &sum_dxhat_xhat)) * &(inv_std / n);
                } else {
                    g = dxhat * inv_std;
                }
            }
            let weight_grad = lc.input.t().dot(&g).as_standard_layout().into_owned();
            let bias_grad = g.sum_axis(Axis(0));
            let input_grad = g.dot(&layer.weight.t());
            grads.push(DenseGrads { weight: weight_grad, bias: bias_grad, scale: scale_grad, shift: shift_grad });
            g = input_grad;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }

    /// Fold a training batch's statistics into the running batch-norm estimates.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        if !cache.train {
            return Ok(());
        }
        if cache.layers.len() != self.layers.len() {
            return Err(CtrError::Contract("cache was produced by a different network".into()));
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(mean), Some(var)) = (&mut layer.batch_norm, &lc.batch_mean, &lc.batch_var) {
                let n = lc.input.nrows() as f64;
                // unbiased variance for the running estimate
                let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = bn.momentum;
                bn.running_mean = &bn.running_mean * m + &(mean * (1.0 - m));
                bn.running_var = &bn.running_var * m + &(var * (correction * (1.0 - m)));
            }
        }
        Ok(())
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize) -> Dense {
        Dense {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
            activation: Activation::Identity,
            batch_norm: None,
            dropout: 0.0,
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::from_layers(vec![identity_layer(3)]).unwrap();
        let x = array![[1.0, -2.0, 0.5], [3.0, 4.0, -5.0]];
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn relu_on_negative_preactivations_is_zero() {
        let mut layer = identity_layer(2);
        layer.activation = Activation::Relu;
        let net = Mlp::from_layers(vec![layer, identity_layer(2)]).unwrap();
        let out = net.predict(&array![[-1.0, -0.1], [-3.0, -7.0]]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let net = Mlp::from_layers(vec![identity_layer(3)]).unwrap();
        let err = net.predict(&Array2::zeros((2, 4))).unwrap_err();
        assert!(matches!(err, CtrError::Config(_)));
        let err = net.predict(&array![[f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, CtrError::Validation(_)));
    }

    #[test]
    fn softmax_only_on_last_layer() {
        let mut first = identity_layer(2);
        first.activation = Activation::Softmax;
        assert!(Mlp::from_layers(vec![first, identity_layer(2)]).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(vec![4, 6, 1], Activation::Identity).with_batch_norm(true).with_dropout(0.5);
        let net = Mlp::new(&spec, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let (_, cache) = net.forward(&x, Pass::Train(&mut rng)).unwrap();
        let (grads, dx) = net.backward(&cache, &Array2::zeros((5, 1))).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_squared_loss_gradient() {
        let layer = Dense {
            weight: array![[0.5], [-1.0]],
            bias: array![0.25],
            activation: Activation::Identity,
            batch_norm: None,
            dropout: 0.0,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let x = array![[2.0, 3.0]];
        let y = 1.0;
        let (pred, cache) = net.forward(&x, Pass::Eval).unwrap();
        let residual = pred[[0, 0]] - y;
        let (grads, _) = net.backward(&cache, &array![[2.0 * residual]]).unwrap();
        assert_eq!(grads.layers[0].weight, array![[2.0 * residual * 2.0], [2.0 * residual * 3.0]]);
        assert_eq!(grads.layers[0].bias, array![2.0 * residual]);
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Mlp::new(&MlpSpec::new(vec![2, 3, 1], Activation::Identity), &mut rng).unwrap();
        let b = Mlp::new(&MlpSpec::new(vec![2, 1], Activation::Identity), &mut rng).unwrap();
        let (_, cache) = a.forward(&Array2::zeros((1, 2)), Pass::Eval).unwrap();
        assert!(matches!(b.backward(&cache, &Array2::zeros((1, 1))), Err(CtrError::Contract(_))));
        assert!(matches!(a.backward(&cache, &Array2::zeros((2, 1))), Err(CtrError::Contract(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let a = array![[1.0, 2.0, 3.0], [-1000.0, 0.0, 1000.0]];
        let s = softmax_rows(&a);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let shifted = softmax_rows(&(&a + 17.5));
        for (x, y) in s.iter().zip(shifted.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MlpSpec::new(vec![3, 8, 8, 4], Activation::Softmax).with_batch_norm(true).with_dropout(0.5);
        let net = Mlp::new(&spec, &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }
}
