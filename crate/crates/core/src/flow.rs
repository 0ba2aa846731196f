//! Conditional affine-coupling flow.
//!
//! The flow maps a style code `w` of layer `i` to its latent pair `(c, s)`
//! (`to_latent`) and back (`to_style`). Each coupling layer leaves one parity
//! class of coordinates untouched and transforms the other:
//!
//! ```text
//! y_t = x_t ⊙ exp(s̃) + t,   s̃ = clamp · tanh(s / clamp),   (s, t) = nets(x_p ++ onehot(i))
//! ```
//!
//! so the log-determinant of the Jacobian is `Σ s̃` and the inverse is exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, DenseMatrix, Mlp, MlpGrads, MlpTrace};
use crate::prior::{LatentPair, PriorConfig};

/// One layer's style code together with its layer index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub w: Vec<f64>,
    pub layer_index: usize,
}

/// All per-layer codes of one frame, plus its labels and identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleStack {
    pub codes: Vec<StyleCode>,
    pub labels: Vec<f64>,
    pub identity_id: u64,
    pub frame_id: u64,
}

impl StyleStack {
    /// Builds a stack from raw per-layer vectors; layer indices are assigned in order.
    pub fn from_layers(
        layers: Vec<Vec<f64>>,
        labels: Vec<f64>,
        identity_id: u64,
        frame_id: u64,
    ) -> Self {
        let codes = layers
            .into_iter()
            .enumerate()
            .map(|(layer_index, w)| StyleCode { w, layer_index })
            .collect();
        Self {
            codes,
            labels,
            identity_id,
            frame_id,
        }
    }

    pub fn layers(&self) -> usize {
        self.codes.len()
    }

    pub fn code_dim(&self) -> usize {
        self.codes.first().map_or(0, |c| c.w.len())
    }

    /// Checks layer count, ordering, code length, label length and finiteness.
    pub fn validate(&self, layers: usize, dim: usize, attributes: usize) -> Result<()> {
        if self.codes.len() != layers {
            return Err(Error::dim(
                "style codes per stack",
                layers,
                self.codes.len(),
            ));
        }
        for (i, code) in self.codes.iter().enumerate() {
            if code.layer_index != i {
                return Err(Error::InvalidInput(format!(
                    "code {i} has layer index {}",
                    code.layer_index
                )));
            }
            if code.w.len() != dim {
                return Err(Error::dim(format!("style code {i}"), dim, code.w.len()));
            }
            if code.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow(format!("style code {i}")));
            }
        }
        if self.labels.len() != attributes {
            return Err(Error::dim("labels", attributes, self.labels.len()));
        }
        if self.labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("labels".into()));
        }
        Ok(())
    }

    /// Element-wise mean of the per-layer codes.
    pub fn mean_code(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.code_dim()];
        for code in &self.codes {
            for (m, v) in mean.iter_mut().zip(&code.w) {
                *m += v;
            }
        }
        let k = self.codes.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        mean
    }
}

/// Which parity class of coordinates passes through a coupling layer unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskParity {
    Even,
    Odd,
}

impl MaskParity {
    pub fn flipped(self) -> Self {
        match self {
            MaskParity::Even => MaskParity::Odd,
            MaskParity::Odd => MaskParity::Even,
        }
    }

    fn passes(self, i: usize) -> bool {
        i.is_multiple_of(2) == (self == MaskParity::Even)
    }

    /// `(pass-through indices, transformed indices)` for a `dim`-vector.
    pub fn split(self, dim: usize) -> (Vec<usize>, Vec<usize>) {
        (0..dim).partition(|&i| self.passes(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub mask_parity: MaskParity,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    pub scale_clamp: f64,
}

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub couplings: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub scale_clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            couplings: 8,
            hidden_width: 128,
            hidden_layers: 2,
            scale_clamp: 2.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.couplings < 2 {
            return Err(Error::InvalidConfig(
                "a flow needs at least two coupling layers".into(),
            ));
        }
        if self.hidden_width == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if !(self.scale_clamp > 0.0 && self.scale_clamp.is_finite()) {
            return Err(Error::InvalidConfig("scale clamp must be positive".into()));
        }
        Ok(())
    }
}

/// The conditional flow: coupling layers plus the dimensions it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFlowModel")]
pub struct FlowModel {
    layers: Vec<CouplingLayer>,
    dim: usize,
    conditions: usize,
    prior: PriorConfig,
}

#[derive(Deserialize)]
struct RawFlowModel {
    layers: Vec<CouplingLayer>,
    dim: usize,
    conditions: usize,
    prior: PriorConfig,
}

impl TryFrom<RawFlowModel> for FlowModel {
    type Error = Error;

    fn try_from(raw: RawFlowModel) -> Result<Self> {
        if raw.dim != raw.prior.latent_dim {
            return Err(Error::Shape(format!(
                "flow dimension {} differs from the prior's {}",
                raw.dim, raw.prior.latent_dim
            )));
        }
        FlowModel::from_layers(raw.layers, raw.conditions, raw.prior)
    }
}

/// Gradients for every coupling layer: `(scale net, shift net)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub layers: Vec<(MlpGrads, MlpGrads)>,
}

impl FlowGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (s, t) in &self.layers {
            s.flatten_into(&mut out);
            t.flatten_into(&mut out);
        }
        out
    }
}

struct CouplingTrace {
    input: DenseMatrix,
    /// `tanh(s / clamp)` per transformed coordinate.
    tanh: DenseMatrix,
    scale: MlpTrace,
    shift: MlpTrace,
}

/// Intermediate values of [`FlowModel::forward_traced`].
pub struct FlowTrace {
    layers: Vec<CouplingTrace>,
}

fn one_hot_rows(conds: &[usize], k: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(conds.len(), k);
    for (r, &c) in conds.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidInput(format!(
                "layer index {c} out of range for {k} conditions"
            )));
        }
        m.set(r, c, 1.0);
    }
    Ok(m)
}

impl CouplingLayer {
    fn split(&self, dim: usize) -> (Vec<usize>, Vec<usize>) {
        self.mask_parity.split(dim)
    }

    fn check(&self, dim: usize, conditions: usize) -> Result<()> {
        let (pass, trans) = self.split(dim);
        for (name, net) in [("scale", &self.scale_net), ("shift", &self.shift_net)] {
            if net.input_dim() != pass.len() + conditions {
                return Err(Error::dim(
                    format!("{name} net input"),
                    pass.len() + conditions,
                    net.input_dim(),
                ));
            }
            if net.output_dim() != trans.len() {
                return Err(Error::dim(
                    format!("{name} net output"),
                    trans.len(),
                    net.output_dim(),
                ));
            }
        }
        if !(self.scale_clamp > 0.0 && self.scale_clamp.is_finite()) {
            return Err(Error::InvalidInput("scale clamp must be positive".into()));
        }
        Ok(())
    }

    fn net_input(&self, x: &DenseMatrix, cond: &DenseMatrix, pass: &[usize]) -> DenseMatrix {
        let p = pass.len();
        DenseMatrix::from_fn(x.rows(), p + cond.cols(), |r, c| {
            if c < p {
                x.get(r, pass[c])
            } else {
                cond.get(r, c - p)
            }
        })
    }

    fn forward_batch(
        &self,
        x: &DenseMatrix,
        cond: &DenseMatrix,
        logdet: &mut [f64],
        traced: bool,
    ) -> Result<(DenseMatrix, Option<CouplingTrace>)> {
        let (pass, trans) = self.split(x.cols());
        let h = self.net_input(x, cond, &pass);
        let ((s, s_trace), (t, t_trace)) = if traced {
            let (s, st) = self.scale_net.forward_traced(&h)?;
            let (t, tt) = self.shift_net.forward_traced(&h)?;
            ((s, Some(st)), (t, Some(tt)))
        } else {
            (
                (self.scale_net.forward(&h)?, None),
                (self.shift_net.forward(&h)?, None),
            )
        };
        let clamp = self.scale_clamp;
        let mut y = x.clone();
        let mut tanh = DenseMatrix::zeros(x.rows(), trans.len());
        for r in 0..x.rows() {
            for (j, &col) in trans.iter().enumerate() {
                let th = (s.get(r, j) / clamp).tanh();
                let st = clamp * th;
                tanh.set(r, j, th);
                y.set(r, col, x.get(r, col) * st.exp() + t.get(r, j));
                logdet[r] += st;
            }
        }
        if !y.is_finite() {
            return Err(Error::NumericOverflow("coupling forward output".into()));
        }
        let trace = match (s_trace, t_trace) {
            (Some(scale), Some(shift)) => Some(CouplingTrace {
                input: x.clone(),
                tanh,
                scale,
                shift,
            }),
            _ => None,
        };
        Ok((y, trace))
    }

    fn inverse_batch(
        &self,
        y: &DenseMatrix,
        cond: &DenseMatrix,
        logdet: &mut [f64],
    ) -> Result<DenseMatrix> {
        let (pass, trans) = self.split(y.cols());
        // The pass-through half is identical in x and y.
        let h = self.net_input(y, cond, &pass);
        let s = self.scale_net.forward(&h)?;
        let t = self.shift_net.forward(&h)?;
        let clamp = self.scale_clamp;
        let mut x = y.clone();
        for r in 0..y.rows() {
            for (j, &col) in trans.iter().enumerate() {
                let st = clamp * (s.get(r, j) / clamp).tanh();
                x.set(r, col, (y.get(r, col) - t.get(r, j)) * (-st).exp());
                logdet[r] -= st;
            }
        }
        if !x.is_finite() {
            return Err(Error::NumericOverflow("coupling inverse output".into()));
        }
        Ok(x)
    }

    fn backward_batch(
        &self,
        trace: &CouplingTrace,
        grad_y: &DenseMatrix,
        grad_logdet: &[f64],
        grads: &mut (MlpGrads, MlpGrads),
    ) -> Result<DenseMatrix> {
        let x = &trace.input;
        let (pass, trans) = self.split(x.cols());
        let clamp = self.scale_clamp;
        let mut grad_x = grad_y.clone();
        let mut grad_s = DenseMatrix::zeros(x.rows(), trans.len());
        let mut grad_t = DenseMatrix::zeros(x.rows(), trans.len());
        for r in 0..x.rows() {
            for (j, &col) in trans.iter().enumerate() {
                let th = trace.tanh.get(r, j);
                let e = (clamp * th).exp();
                let gy = grad_y.get(r, col);
                grad_x.set(r, col, gy * e);
                let g_st = gy * x.get(r, col) * e + grad_logdet[r];
                grad_s.set(r, j, g_st * (1.0 - th * th));
                grad_t.set(r, j, gy);
            }
        }
        let gh_s = self
            .scale_net
            .backward(&trace.scale, &grad_s, &mut grads.0)?;
        let gh_t = self
            .shift_net
            .backward(&trace.shift, &grad_t, &mut grads.1)?;
        for r in 0..x.rows() {
            for (i, &col) in pass.iter().enumerate() {
                let v = grad_x.get(r, col) + gh_s.get(r, i) + gh_t.get(r, i);
                grad_x.set(r, col, v);
            }
        }
        Ok(grad_x)
    }
}

/// Applies one coupling layer to a single vector with condition vector `cond`.
pub fn coupling_forward(layer: &CouplingLayer, x: &[f64], cond: &[f64]) -> Result<(Vec<f64>, f64)> {
    layer.check(x.len(), cond.len())?;
    let xm = DenseMatrix::from_rows(&[x], x.len())?;
    let cm = DenseMatrix::from_rows(&[cond], cond.len())?;
    let mut logdet = [0.0];
    let (y, _) = layer.forward_batch(&xm, &cm, &mut logdet, false)?;
    Ok((y.into_data(), logdet[0]))
}

/// Exact inverse of [`coupling_forward`].
pub fn coupling_inverse(layer: &CouplingLayer, y: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
    layer.check(y.len(), cond.len())?;
    let ym = DenseMatrix::from_rows(&[y], y.len())?;
    let cm = DenseMatrix::from_rows(&[cond], cond.len())?;
    let mut logdet = [0.0];
    Ok(layer.inverse_batch(&ym, &cm, &mut logdet)?.into_data())
}

impl FlowModel {
    /// A flow that starts as the identity map: every net's output layer is zero.
    pub fn new<R: Rng + ?Sized>(
        prior: PriorConfig,
        conditions: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(prior, conditions, cfg, None, rng)
    }

    /// A flow whose output layers are random with standard deviation scaled by
    /// `output_scale`, i.e. a generic non-identity map.
    pub fn random<R: Rng + ?Sized>(
        prior: PriorConfig,
        conditions: usize,
        cfg: &FlowConfig,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(prior, conditions, cfg, Some(output_scale), rng)
    }

    fn build<R: Rng + ?Sized>(
        prior: PriorConfig,
        conditions: usize,
        cfg: &FlowConfig,
        output_scale: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        prior.validate()?;
        cfg.validate()?;
        if conditions == 0 {
            return Err(Error::InvalidConfig("need at least one condition".into()));
        }
        let dim = prior.latent_dim;
        let mut parity = MaskParity::Even;
        let mut layers = Vec::with_capacity(cfg.couplings);
        for _ in 0..cfg.couplings {
            let (pass, trans) = parity.split(dim);
            let mut dims = vec![pass.len() + conditions];
            dims.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
            dims.push(trans.len());
            let make = |rng: &mut R| -> Result<Mlp> {
                let mut net = Mlp::init(
                    &dims,
                    Activation::leaky_default(),
                    output_scale.is_none(),
                    rng,
                )?;
                if let Some(scale) = output_scale {
                    let last = net.layers_mut().last_mut().expect("nonempty");
                    last.weight.data_mut().iter_mut().for_each(|w| *w *= scale);
                }
                Ok(net)
            };
            let scale_net = make(rng)?;
            let shift_net = make(rng)?;
            layers.push(CouplingLayer {
                mask_parity: parity,
                scale_net,
                shift_net,
                scale_clamp: cfg.scale_clamp,
            });
            parity = parity.flipped();
        }
        Self::from_layers(layers, conditions, prior)
    }

    /// Assembles a model from explicit layers, validating every invariant.
    pub fn from_layers(
        layers: Vec<CouplingLayer>,
        conditions: usize,
        prior: PriorConfig,
    ) -> Result<Self> {
        prior.validate()?;
        let dim = prior.latent_dim;
        if layers.len() < 2 {
            return Err(Error::Shape(
                "a flow needs at least two coupling layers".into(),
            ));
        }
        if conditions == 0 {
            return Err(Error::Shape("a flow needs at least one condition".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].mask_parity == pair[1].mask_parity {
                return Err(Error::Shape(format!(
                    "coupling layers {i} and {} share a mask parity",
                    i + 1
                )));
            }
        }
        for layer in &layers {
            layer.check(dim, conditions)?;
        }
        Ok(Self {
            layers,
            dim,
            conditions,
            prior,
        })
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn conditions(&self) -> usize {
        self.conditions
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn attributes(&self) -> usize {
        self.prior.attributes
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale_net.param_count() + l.shift_net.param_count())
            .sum()
    }

    /// All parameters in layer order (scale net, then shift net).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.scale_net.flatten_into(&mut out);
            l.shift_net.flatten_into(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(
                "flow parameters",
                self.param_count(),
                params.len(),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericOverflow("flow parameters".into()));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            pos += l.scale_net.load_from(&params[pos..])?;
            pos += l.shift_net.load_from(&params[pos..])?;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> FlowGrads {
        FlowGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (l.scale_net.zero_grads(), l.shift_net.zero_grads()))
                .collect(),
        }
    }

    fn check_batch(&self, x: &DenseMatrix, conds: &[usize]) -> Result<DenseMatrix> {
        if x.cols() != self.dim {
            return Err(Error::dim("flow input", self.dim, x.cols()));
        }
        if x.rows() != conds.len() {
            return Err(Error::dim("condition count", x.rows(), conds.len()));
        }
        one_hot_rows(conds, self.conditions)
    }

    /// Codes → latents for a batch (one code per row, `conds[r]` its layer
    /// index). Returns the latents and the per-row log-determinant.
    pub fn forward_batch(
        &self,
        x: &DenseMatrix,
        conds: &[usize],
    ) -> Result<(DenseMatrix, Vec<f64>)> {
        let cond = self.check_batch(x, conds)?;
        let mut logdet = vec![0.0; x.rows()];
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_batch(&h, &cond, &mut logdet, false)?.0;
        }
        Ok((h, logdet))
    }

    /// [`FlowModel::forward_batch`] that also records what backprop needs.
    pub fn forward_traced(
        &self,
        x: &DenseMatrix,
        conds: &[usize],
    ) -> Result<(DenseMatrix, Vec<f64>, FlowTrace)> {
        let cond = self.check_batch(x, conds)?;
        let mut logdet = vec![0.0; x.rows()];
        let mut h = x.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, trace) = layer.forward_batch(&h, &cond, &mut logdet, true)?;
            traces.push(trace.expect("traced forward"));
            h = next;
        }
        Ok((h, logdet, FlowTrace { layers: traces }))
    }

    /// Accumulates parameter gradients given dL/d latents and dL/d logdet per
    /// row; returns dL/d inputs.
    pub fn backward(
        &self,
        trace: &FlowTrace,
        grad_z: &DenseMatrix,
        grad_logdet: &[f64],
        grads: &mut FlowGrads,
    ) -> Result<DenseMatrix> {
        if trace.layers.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::Shape(
                "trace or gradients do not match the model".into(),
            ));
        }
        let mut g = grad_z.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward_batch(
                &trace.layers[i],
                &g,
                grad_logdet,
                &mut grads.layers[i],
            )?;
        }
        Ok(g)
    }

    /// Latents → codes for a batch. The returned log-determinant is that of
    /// the inverse map, i.e. the negation of the forward one at the image.
    pub fn inverse_batch(
        &self,
        z: &DenseMatrix,
        conds: &[usize],
    ) -> Result<(DenseMatrix, Vec<f64>)> {
        let cond = self.check_batch(z, conds)?;
        let mut logdet = vec![0.0; z.rows()];
        let mut h = z.clone();
        for layer in self.layers.iter().rev() {
            h = layer.inverse_batch(&h, &cond, &mut logdet)?;
        }
        Ok((h, logdet))
    }

    /// Maps whole stacks to latents; rows are stack-major, layer-minor.
    pub fn stacks_to_latents(&self, stacks: &[&StyleStack]) -> Result<(DenseMatrix, Vec<f64>)> {
        let (x, conds) = self.stack_rows(stacks)?;
        self.forward_batch(&x, &conds)
    }

    /// Codes of `stacks` as matrix rows plus the matching layer indices.
    pub fn stack_rows(&self, stacks: &[&StyleStack]) -> Result<(DenseMatrix, Vec<usize>)> {
        let mut data = Vec::with_capacity(stacks.len() * self.conditions * self.dim);
        let mut conds = Vec::with_capacity(stacks.len() * self.conditions);
        for st in stacks {
            if st.codes.len() != self.conditions {
                return Err(Error::dim(
                    "codes per stack",
                    self.conditions,
                    st.codes.len(),
                ));
            }
            for (i, code) in st.codes.iter().enumerate() {
                if code.layer_index != i {
                    return Err(Error::InvalidInput(format!(
                        "code {i} has layer index {}",
                        code.layer_index
                    )));
                }
                if code.w.len() != self.dim {
                    return Err(Error::dim("style code", self.dim, code.w.len()));
                }
                data.extend_from_slice(&code.w);
                conds.push(i);
            }
        }
        Ok((DenseMatrix::new(conds.len(), self.dim, data)?, conds))
    }

    /// Rebuilds stacks from latent rows produced by [`FlowModel::stacks_to_latents`]
    /// (possibly edited), copying labels and ids from `templates`.
    pub fn latents_to_stacks(
        &self,
        z: &DenseMatrix,
        templates: &[&StyleStack],
    ) -> Result<Vec<StyleStack>> {
        let k = self.conditions;
        if z.rows() != templates.len() * k {
            return Err(Error::dim("latent rows", templates.len() * k, z.rows()));
        }
        let conds: Vec<usize> = (0..z.rows()).map(|r| r % k).collect();
        let (x, _) = self.inverse_batch(z, &conds)?;
        Ok(templates
            .iter()
            .enumerate()
            .map(|(s, t)| {
                let layers = (0..k).map(|i| x.row(s * k + i).to_vec()).collect();
                StyleStack::from_layers(layers, t.labels.clone(), t.identity_id, t.frame_id)
            })
            .collect())
    }
}

/// `(c, s) = F(w | layer)` together with `log |det ∂F/∂w|`.
pub fn to_latent(model: &FlowModel, code: &StyleCode) -> Result<(LatentPair, f64)> {
    let x = DenseMatrix::from_rows(&[&code.w], model.dim)?;
    let (z, logdet) = model.forward_batch(&x, &[code.layer_index])?;
    Ok((LatentPair::split(z.row(0), model.attributes()), logdet[0]))
}

/// Exact inverse of [`to_latent`] at the same condition.
pub fn to_style(model: &FlowModel, pair: &LatentPair, layer_index: usize) -> Result<StyleCode> {
    Ok(to_style_with_logdet(model, pair, layer_index)?.0)
}

/// [`to_style`] plus the log-determinant of the inverse map at `pair`.
pub fn to_style_with_logdet(
    model: &FlowModel,
    pair: &LatentPair,
    layer_index: usize,
) -> Result<(StyleCode, f64)> {
    pair.check(model.prior())?;
    let z = DenseMatrix::from_rows(&[pair.concat()], model.dim)?;
    let (x, logdet) = model.inverse_batch(&z, &[layer_index])?;
    Ok((
        StyleCode {
            w: x.into_data(),
            layer_index,
        },
        logdet[0],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check::{jacobian, log_abs_det};
    use crate::numerics::DenseLayer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FlowConfig {
        FlowConfig {
            couplings: 4,
            hidden_width: 16,
            hidden_layers: 2,
            scale_clamp: 2.0,
        }
    }

    fn random_model(dim: usize, k: usize, seed: u64) -> FlowModel {
        let prior = PriorConfig::new(2, dim, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlowModel::random(prior, k, &small_cfg(), 0.5, &mut rng).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// Single-layer net with zero weights and the given constant bias.
    fn constant_net(input: usize, bias: Vec<f64>) -> Mlp {
        Mlp::new(
            vec![DenseLayer {
                weight: DenseMatrix::zeros(bias.len(), input),
                bias,
            }],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn zero_nets_are_identity() {
        let layer = CouplingLayer {
            mask_parity: MaskParity::Even,
            scale_net: constant_net(5, vec![0.0; 3]),
            shift_net: constant_net(5, vec![0.0; 3]),
            scale_clamp: 2.0,
        };
        let x = [0.5, -1.0, 2.0, 3.0, -0.25, 1.5];
        let cond = [0.0, 1.0];
        let (y, ld) = coupling_forward(&layer, &x, &cond).unwrap();
        assert_eq!(y, x.to_vec());
        assert_eq!(ld, 0.0);
        assert_eq!(coupling_inverse(&layer, &x, &cond).unwrap(), x.to_vec());
    }

    #[test]
    fn constant_log_two_scale_doubles() {
        // Clamp large enough that clamp·tanh(s/clamp) is log 2 to ~1e-16.
        let clamp = 1e6;
        let ln2 = std::f64::consts::LN_2;
        let layer = CouplingLayer {
            mask_parity: MaskParity::Odd,
            scale_net: constant_net(4, vec![ln2; 3]),
            shift_net: constant_net(4, vec![0.0; 3]),
            scale_clamp: clamp,
        };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let cond = [1.0];
        let (y, ld) = coupling_forward(&layer, &x, &cond).unwrap();
        // Odd parity: indices 1, 3, 5 pass through; 0, 2, 4 are doubled.
        let expect = [2.0, 2.0, 6.0, 4.0, 10.0, 6.0];
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((ld - 3.0 * ln2).abs() < 1e-9);
        assert!((ld - 2.0794).abs() < 1e-4);
        let back = coupling_inverse(&layer, &y, &cond).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
        let halved = coupling_inverse(&layer, &x, &cond).unwrap();
        assert!((halved[0] - 0.5).abs() < 1e-9 && (halved[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn coupling_round_trip_random() {
        let model = random_model(7, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = random_vec(&mut rng, 7, 3.0);
            let mut cond = vec![0.0; 3];
            cond[rng.random_range(0..3)] = 1.0;
            for layer in model.layers() {
                let (y, _) = coupling_forward(layer, &x, &cond).unwrap();
                let back = coupling_inverse(layer, &y, &cond).unwrap();
                for (a, b) in back.iter().zip(&x) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identity_initialized_model() {
        let prior = PriorConfig::new(2, 6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = FlowModel::new(prior, 3, &small_cfg(), &mut rng).unwrap();
        let w = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let code = StyleCode {
            w: w.clone(),
            layer_index: 2,
        };
        let (pair, ld) = to_latent(&model, &code).unwrap();
        assert_eq!(pair.c, w[..2].to_vec());
        assert_eq!(pair.s, w[2..].to_vec());
        assert_eq!(ld, 0.0);
        let back = to_style(&model, &pair, 2).unwrap();
        assert_eq!(back.w, w);
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let model = random_model(6, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..10 {
            let w = random_vec(&mut rng, 6, 2.0);
            let layer_index = trial % 2;
            let (_, ld) = to_latent(
                &model,
                &StyleCode {
                    w: w.clone(),
                    layer_index,
                },
            )
            .unwrap();
            let jac = jacobian(
                |p| {
                    let (pair, _) = to_latent(
                        &model,
                        &StyleCode {
                            w: p.to_vec(),
                            layer_index,
                        },
                    )
                    .unwrap();
                    pair.concat()
                },
                &w,
                1e-5,
            );
            let fd = log_abs_det(&jac);
            assert!((ld - fd).abs() < 1e-4, "{ld} vs {fd}");
            assert!(ld.abs() > 1e-3, "model should not be volume preserving");
        }
    }

    #[test]
    fn inverse_logdet_cancels_forward() {
        let model = random_model(8, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..50 {
            let code = StyleCode {
                w: random_vec(&mut rng, 8, 2.0),
                layer_index: i % 3,
            };
            let (pair, ld) = to_latent(&model, &code).unwrap();
            let (_, inv_ld) = to_style_with_logdet(&model, &pair, code.layer_index).unwrap();
            assert!((ld + inv_ld).abs() < 1e-8);
        }
    }

    #[test]
    fn conditions_give_distinct_maps() {
        let model = random_model(6, 3, 12);
        let w = vec![0.3; 6];
        let a = to_latent(
            &model,
            &StyleCode {
                w: w.clone(),
                layer_index: 0,
            },
        )
        .unwrap();
        let b = to_latent(&model, &StyleCode { w, layer_index: 1 }).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn logdet_respects_clamp_bound() {
        let mut model = random_model(6, 2, 13);
        // Blow up the scale nets so tanh saturates.
        for l in model.layers_mut() {
            for layer in l.scale_net.layers_mut() {
                layer.weight.data_mut().iter_mut().for_each(|w| *w *= 50.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let bound = 6.0 * 2.0 * model.layers().len() as f64;
        for _ in 0..100 {
            let w = random_vec(&mut rng, 6, 1.0);
            if let Ok((_, ld)) = to_latent(&model, &StyleCode { w, layer_index: 1 }) {
                assert!(ld.abs() <= bound);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = random_model(6, 2, 15);
        let bad_layer = StyleCode {
            w: vec![0.0; 6],
            layer_index: 2,
        };
        assert!(matches!(
            to_latent(&model, &bad_layer),
            Err(Error::InvalidInput(_))
        ));
        let bad_dim = StyleCode {
            w: vec![0.0; 5],
            layer_index: 0,
        };
        assert!(matches!(
            to_latent(&model, &bad_dim),
            Err(Error::Dimension { .. })
        ));
        let mut layers = model.layers().to_vec();
        layers[1].mask_parity = layers[0].mask_parity;
        assert!(FlowModel::from_layers(layers, 2, *model.prior()).is_err());
    }

    #[test]
    fn params_round_trip() {
        let model = random_model(6, 2, 16);
        let p = model.params();
        assert_eq!(p.len(), model.param_count());
        let mut other = FlowModel::new(
            *model.prior(),
            2,
            &small_cfg(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        other.set_params(&p).unwrap();
        assert_eq!(other, model);
        let json = serde_json::to_string(&model).unwrap();
        let back: FlowModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}
