use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Elementwise nonlinearity applied after a hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    pub const fn leaky_default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One affine layer, `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Multilayer perceptron: hidden layers use their activation, the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp")]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    activations: Vec<Activation>,
}

#[derive(Deserialize)]
struct RawMlp {
    layers: Vec<DenseLayer>,
    activations: Vec<Activation>,
}

impl TryFrom<RawMlp> for Mlp {
    type Error = Error;

    fn try_from(raw: RawMlp) -> Result<Self> {
        Mlp::new(raw.layers, raw.activations)
    }
}

/// Intermediate values of a batched forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<DenseMatrix>,
    pre_activations: Vec<DenseMatrix>,
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(DenseMatrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }
}

impl Mlp {
    /// `activations` has one entry per hidden layer (`layers.len() - 1`).
    pub fn new(layers: Vec<DenseLayer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::dim(
                "hidden activations",
                layers.len() - 1,
                activations.len(),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::dim(
                    format!("bias of layer {i}"),
                    layer.weight.rows(),
                    layer.bias.len(),
                ));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow(format!("parameters of layer {i}")));
            }
            if i > 0 && layers[i - 1].weight.rows() != layer.weight.cols() {
                return Err(Error::dim(
                    format!("input of layer {i}"),
                    layers[i - 1].weight.rows(),
                    layer.weight.cols(),
                ));
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    /// He-style random initialization for `dims = [in, hidden.., out]`.
    ///
    /// With `zero_output` the last layer starts at exactly zero, so the network
    /// outputs zero for every input.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("need at least input and output dims".into()));
        }
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = i + 1 == n_layers;
            let weight = if last && zero_output {
                DenseMatrix::zeros(fan_out, fan_in)
            } else {
                let gain = if last { 1.0 } else { 2.0 };
                let std = (gain / fan_in.max(1) as f64).sqrt();
                DenseMatrix::from_fn(fan_out, fan_in, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    std * z
                })
            };
            layers.push(DenseLayer {
                weight,
                bias: vec![0.0; fan_out],
            });
        }
        Mlp::new(layers, vec![hidden; n_layers - 1])
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Single-vector evaluation.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), input.len()));
        }
        let mut h = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weight.mul_vec(&h)?;
            for (v, b) in next.iter_mut().zip(&layer.bias) {
                *v += b;
            }
            if let Some(act) = self.activations.get(i) {
                next.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = next;
        }
        Ok(h)
    }

    fn affine(layer: &DenseLayer, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = x.matmul_nt(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn check_batch(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Batched evaluation, one sample per row.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &h)?;
            if let Some(&act) = self.activations.get(i) {
                z.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Batched evaluation that keeps what [`Mlp::backward`] needs.
    pub fn forward_traced(&self, x: &DenseMatrix) -> Result<(DenseMatrix, MlpTrace)> {
        self.check_batch(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.activations.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &h)?;
            inputs.push(h);
            h = match self.activations.get(i) {
                Some(&act) => {
                    let mut a = z.clone();
                    a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
                    pre_activations.push(z);
                    a
                }
                None => z,
            };
        }
        Ok((
            h,
            MlpTrace {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Back-propagates `grad_out` (dL/d output, one row per sample), adds the
    /// parameter gradients into `grads` and returns dL/d input.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        grad_out: &DenseMatrix,
        grads: &mut MlpGrads,
    ) -> Result<DenseMatrix> {
        if grad_out.cols() != self.output_dim() {
            return Err(Error::dim(
                "output gradient",
                self.output_dim(),
                grad_out.cols(),
            ));
        }
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some(&act) = self.activations.get(i) {
                let pre = &trace.pre_activations[i];
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    *gv *= act.derivative(p);
                }
            }
            let (dw, db) = &mut grads.layers[i];
            g.matmul_tn_acc(&trace.inputs[i], dw)?;
            for r in 0..g.rows() {
                for (acc, v) in db.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            g = g.matmul(&self.layers[i].weight)?;
        }
        Ok(g)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    /// Appends parameters in layer order: weight (row-major), then bias.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`Mlp::flatten_into`]; returns the number of values consumed.
    pub fn load_from(&mut self, params: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if params.len() < need {
            return Err(Error::dim("flat parameter vector", need, params.len()));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let wlen = l.weight.data().len();
            l.weight
                .data_mut()
                .copy_from_slice(&params[pos..pos + wlen]);
            pos += wlen;
            let blen = l.bias.len();
            l.bias.copy_from_slice(&params[pos..pos + blen]);
            pos += blen;
        }
        Ok(pos)
    }
}

/// Evaluates `params` on one input vector.
pub fn mlp_apply(params: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    params.apply(input)
}
