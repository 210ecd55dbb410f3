use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HiddenActivation {
    ReLU,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Result<Self, NnError> {
        let spec = Self {
            layer_sizes,
            hidden_activation: HiddenActivation::ReLU,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(NnError::ShapeMismatch(format!(
                "invalid layer sizes {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }
}

/// One affine layer. `weight` is stored `fan_in x fan_out` so a batch
/// `X (rows x fan_in)` maps to `X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of an MLP. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Dense>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation for weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.dim()).collect()
    }

    pub fn check_same_shape(&self, other: &ParamSet) -> Result<(), NnError> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len());
        if same {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch(format!(
                "parameter shapes {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )))
        }
    }

    pub fn matches_spec(&self, spec: &MlpSpec) -> Result<(), NnError> {
        let expected: Vec<(usize, usize)> = spec.layer_sizes.windows(2).map(|w| (w[0], w[1])).collect();
        let biases_ok = self.layers.iter().all(|l| l.bias.len() == l.weight.ncols());
        if self.shapes() != expected || !biases_ok {
            return Err(NnError::ShapeMismatch(format!(
                "parameters {:?} do not fit layer sizes {:?}",
                self.shapes(),
                spec.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// Intermediate values recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: ParamSet) -> Result<Self, NnError> {
        spec.validate()?;
        params.matches_spec(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn random<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self, NnError> {
        spec.validate()?;
        let params = ParamSet::init(&spec, rng);
        Ok(Self { spec, params })
    }

    /// Batched forward pass over the rows of `input`.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache), NnError> {
        if input.ncols() != self.spec.input_size() {
            return Err(NnError::ShapeMismatch(format!(
                "input width {} but network expects {}",
                input.ncols(),
                self.spec.input_size()
            )));
        }
        let depth = self.params.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre_activations = Vec::with_capacity(depth);
        let mut h = input.to_owned();
        for (k, layer) in self.params.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            let next = if k + 1 < depth {
                z.mapv(|v| v.max(0.0))
            } else {
                match self.spec.output_activation {
                    OutputActivation::Linear => z.clone(),
                    OutputActivation::Softmax => softmax_rows(z.view()),
                }
            };
            inputs.push(h);
            pre_activations.push(z);
            h = next;
        }
        let cache = ForwardCache {
            inputs,
            pre_activations,
            output: h.clone(),
        };
        Ok((h, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if input.ncols() != self.spec.input_size() {
            return Err(NnError::ShapeMismatch(format!(
                "input width {} but network expects {}",
                input.ncols(),
                self.spec.input_size()
            )));
        }
        let depth = self.params.layers.len();
        let mut h = input.to_owned();
        for (k, layer) in self.params.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight) + &layer.bias;
            if k + 1 < depth {
                z.mapv_inplace(|v| v.max(0.0));
            } else if self.spec.output_activation == OutputActivation::Softmax {
                z = softmax_rows(z.view());
            }
            h = z;
        }
        Ok(h)
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
        let (out, cache) = self.forward(view)?;
        Ok((out.row(0).to_vec(), cache))
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
        Ok(self.predict(view)?.row(0).to_vec())
    }

    /// Reverse-mode gradients of `sum(output * output_grad)` with respect to
    /// the parameters and the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(ParamSet, Array2<f64>), NnError> {
        let (grads, input_grad) = self.backprop(cache, output_grad, true)?;
        Ok((grads.expect("parameter gradients requested"), input_grad))
    }

    /// Like [`Mlp::backward`] but skips the parameter gradients.
    pub fn input_gradient(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<Array2<f64>, NnError> {
        Ok(self.backprop(cache, output_grad, false)?.1)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
        want_params: bool,
    ) -> Result<(Option<ParamSet>, Array2<f64>), NnError> {
        if output_grad.dim() != cache.output.dim() || cache.inputs.len() != self.params.layers.len() {
            return Err(NnError::ShapeMismatch(format!(
                "output gradient {:?} vs cached output {:?}",
                output_grad.dim(),
                cache.output.dim()
            )));
        }
        let mut grad = match self.spec.output_activation {
            OutputActivation::Linear => output_grad.to_owned(),
            OutputActivation::Softmax => softmax_rows_backward(cache.output.view(), output_grad),
        };
        let depth = self.params.layers.len();
        let mut grads = want_params.then(|| self.params.zeros_like());
        for k in (0..depth).rev() {
            if k + 1 < depth {
                grad.zip_mut_with(&cache.pre_activations[k], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            if let Some(grads) = grads.as_mut() {
                grads.layers[k].weight = cache.inputs[k].t().dot(&grad);
                grads.layers[k].bias = grad.sum_axis(Axis(0));
            }
            grad = grad.dot(&self.params.layers[k].weight.t());
        }
        Ok((grads, grad))
    }
}

/// Numerically stable softmax of a single vector.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = z.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let s = softmax(row.view());
        row.assign(&s);
    }
    out
}

/// Vector-Jacobian product of a row-wise softmax: `s * (g - <g, s>)`.
pub fn softmax_rows_backward(soft: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(soft.raw_dim());
    for ((s, g), mut o) in soft.rows().into_iter().zip(grad.rows()).zip(out.rows_mut()) {
        let dot = s.dot(&g);
        o.assign(&(&s * &(&g - dot)));
    }
    out
}
