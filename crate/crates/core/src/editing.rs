//! Attribute editing in the flow's latent space.
//!
//! A stack is mapped to per-layer latents, the chosen attribute coordinate is
//! changed identically at every layer, and the result is mapped back through
//! the exact inverse. [`minimal_edit`] walks that coordinate until an external
//! probe accepts the requested class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, StyleStack};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Set the coordinate to `target`.
    Absolute,
    /// Walk toward the sign of `target` until the probe accepts it.
    StepSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub attr_index: usize,
    pub target: f64,
    pub mode: EditMode,
}

impl EditRequest {
    pub fn absolute(attr_index: usize, target: f64) -> Self {
        Self {
            attr_index,
            target,
            mode: EditMode::Absolute,
        }
    }

    pub fn validate(&self, attributes: usize) -> Result<()> {
        if self.attr_index >= attributes {
            return Err(Error::InvalidInput(format!(
                "attribute index {} out of range for {attributes} attributes",
                self.attr_index
            )));
        }
        if !self.target.is_finite() {
            return Err(Error::InvalidInput("edit target must be finite".into()));
        }
        if self.mode == EditMode::StepSearch && self.target == 0.0 {
            return Err(Error::InvalidInput(
                "step-search target needs a sign".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that scores stacks per attribute, positive meaning the `+1` class.
pub trait AttributeProbe {
    fn attributes(&self) -> usize;

    /// One row of `attributes()` scores per stack.
    fn scores(&self, stacks: &[StyleStack]) -> Result<Vec<Vec<f64>>>;
}

/// Confidence that `score` belongs to the class `direction` (±1).
pub fn confidence(score: f64, direction: f64) -> f64 {
    ((1.0 + direction * score) / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimalEditParams {
    /// Required confidence for the target class.
    pub tau: f64,
    /// Latent step size.
    pub delta: f64,
    pub max_steps: usize,
}

impl Default for MinimalEditParams {
    fn default() -> Self {
        Self {
            tau: 0.8,
            delta: 0.25,
            max_steps: 40,
        }
    }
}

impl MinimalEditParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MinimalEditOutcome {
    /// The probe accepted the target class after `steps` steps.
    Converged { stack: StyleStack, steps: usize },
    /// `max_steps` were exhausted; `stack` is the last one tried.
    NotConverged { stack: StyleStack, steps: usize },
}

impl MinimalEditOutcome {
    pub fn stack(&self) -> &StyleStack {
        match self {
            Self::Converged { stack, .. } | Self::NotConverged { stack, .. } => stack,
        }
    }

    pub fn into_stack(self) -> StyleStack {
        match self {
            Self::Converged { stack, .. } | Self::NotConverged { stack, .. } => stack,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Self::Converged { steps, .. } | Self::NotConverged { steps, .. } => *steps,
        }
    }

    pub fn is_converged(&self) -> bool {
        matches!(self, Self::Converged { .. })
    }
}

fn check_attr(model: &FlowModel, attr_index: usize) -> Result<()> {
    if attr_index >= model.attributes() {
        return Err(Error::InvalidInput(format!(
            "attribute index {attr_index} out of range for {} attributes",
            model.attributes()
        )));
    }
    Ok(())
}

/// Latents of `stacks`, one row per (stack, layer).
fn latents(model: &FlowModel, stacks: &[&StyleStack]) -> Result<DenseMatrix> {
    Ok(model.stacks_to_latents(stacks)?.0)
}

/// Sets column `attr` of the rows belonging to stack `s` via `f(s, old)`.
fn rewrite_attr(z: &mut DenseMatrix, k: usize, attr: usize, mut f: impl FnMut(usize, f64) -> f64) {
    for r in 0..z.rows() {
        let v = z.get(r, attr);
        z.set(r, attr, f(r / k, v));
    }
}

/// Sets attribute `attr` of every layer latent to `targets[s]` for stack `s`.
pub fn edit_attribute_batch(
    model: &FlowModel,
    stacks: &[&StyleStack],
    attr_index: usize,
    targets: &[f64],
) -> Result<Vec<StyleStack>> {
    check_attr(model, attr_index)?;
    if targets.len() != stacks.len() {
        return Err(Error::dim("edit targets", stacks.len(), targets.len()));
    }
    let mut z = latents(model, stacks)?;
    rewrite_attr(&mut z, model.conditions(), attr_index, |s, _| targets[s]);
    model.latents_to_stacks(&z, stacks)
}

/// Absolute edit of one attribute at every layer.
pub fn edit_attribute(
    model: &FlowModel,
    stack: &StyleStack,
    req: &EditRequest,
) -> Result<StyleStack> {
    req.validate(model.attributes())?;
    if req.mode != EditMode::Absolute {
        return Err(Error::InvalidInput(
            "step-search edits need a probe; use minimal_edit".into(),
        ));
    }
    let mut out = edit_attribute_batch(model, &[stack], req.attr_index, &[req.target])?;
    Ok(out.remove(0))
}

/// Round trip through the flow without any change.
pub fn reconstruct(model: &FlowModel, stacks: &[&StyleStack]) -> Result<Vec<StyleStack>> {
    let z = latents(model, stacks)?;
    model.latents_to_stacks(&z, stacks)
}

/// [`minimal_edit`] for many stacks at once; `directions[s]` is ±1.
pub fn minimal_edit_batch<P: AttributeProbe + ?Sized>(
    model: &FlowModel,
    stacks: &[&StyleStack],
    attr_index: usize,
    directions: &[f64],
    probe: &P,
    params: &MinimalEditParams,
) -> Result<Vec<MinimalEditOutcome>> {
    check_attr(model, attr_index)?;
    params.validate()?;
    if probe.attributes() != model.attributes() {
        return Err(Error::InvalidInput(format!(
            "probe scores {} attributes, model has {}",
            probe.attributes(),
            model.attributes()
        )));
    }
    if directions.len() != stacks.len() {
        return Err(Error::dim(
            "edit directions",
            stacks.len(),
            directions.len(),
        ));
    }
    if let Some(d) = directions.iter().find(|d| d.abs() != 1.0) {
        return Err(Error::InvalidInput(format!(
            "direction must be +1 or -1, got {d}"
        )));
    }
    let k = model.conditions();
    let dim = model.dim();
    let z0 = latents(model, stacks)?;
    let mut result: Vec<Option<MinimalEditOutcome>> = vec![None; stacks.len()];
    let mut pending: Vec<usize> = (0..stacks.len()).collect();

    for step in 0..=params.max_steps {
        if pending.is_empty() {
            break;
        }
        let mut data = Vec::with_capacity(pending.len() * k * dim);
        for &s in &pending {
            data.extend_from_slice(&z0.data()[s * k * dim..(s + 1) * k * dim]);
        }
        let mut z = DenseMatrix::new(pending.len() * k, dim, data)?;
        let offset = params.delta * step as f64;
        rewrite_attr(&mut z, k, attr_index, |p, v| {
            v + directions[pending[p]] * offset
        });
        let templates: Vec<&StyleStack> = pending.iter().map(|&s| stacks[s]).collect();
        let candidates = model.latents_to_stacks(&z, &templates)?;
        let scores = probe.scores(&candidates)?;
        let last = step == params.max_steps;
        let mut still = Vec::with_capacity(pending.len());
        for ((&s, stack), score) in pending.iter().zip(candidates).zip(scores) {
            let accepted = confidence(score[attr_index], directions[s]) >= params.tau;
            if accepted {
                result[s] = Some(MinimalEditOutcome::Converged { stack, steps: step });
            } else if last {
                result[s] = Some(MinimalEditOutcome::NotConverged { stack, steps: step });
            } else {
                still.push(s);
            }
        }
        pending = still;
    }
    Ok(result
        .into_iter()
        .map(|r| r.expect("every stack resolved"))
        .collect())
}

/// Smallest number of `delta` steps along `direction` after which the probe
/// assigns the target class confidence at least `tau`.
pub fn minimal_edit<P: AttributeProbe + ?Sized>(
    model: &FlowModel,
    stack: &StyleStack,
    attr_index: usize,
    direction: f64,
    probe: &P,
    params: &MinimalEditParams,
) -> Result<MinimalEditOutcome> {
    let mut out = minimal_edit_batch(model, &[stack], attr_index, &[direction], probe, params)?;
    Ok(out.remove(0))
}

/// `num_points` stacks with the attribute set to evenly spaced values from `from` to `to`.
pub fn interpolate_attribute(
    model: &FlowModel,
    stack: &StyleStack,
    attr_index: usize,
    from: f64,
    to: f64,
    num_points: usize,
) -> Result<Vec<StyleStack>> {
    if num_points < 2 {
        return Err(Error::InvalidInput(
            "interpolation needs at least two points".into(),
        ));
    }
    if !(from.is_finite() && to.is_finite()) {
        return Err(Error::InvalidInput(
            "interpolation endpoints must be finite".into(),
        ));
    }
    let targets: Vec<f64> = (0..num_points)
        .map(|i| {
            let t = i as f64 / (num_points - 1) as f64;
            from * (1.0 - t) + to * t
        })
        .collect();
    let copies = vec![stack; num_points];
    edit_attribute_batch(model, &copies, attr_index, &targets)
}

pub const EDIT_SPEC_FORMAT: &str = "flowplug-edit-v1";

/// Identifies one stack of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackRef {
    pub identity_id: u64,
    pub frame_id: u64,
}

/// Edits to apply, in order, to the selected stacks (all stacks when `select` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub format: String,
    pub edits: Vec<EditRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select: Option<Vec<StackRef>>,
}

impl EditSpec {
    pub fn new(edits: Vec<EditRequest>) -> Self {
        Self {
            format: EDIT_SPEC_FORMAT.into(),
            edits,
            select: None,
        }
    }

    pub fn validate(&self, attributes: usize) -> Result<()> {
        if self.edits.is_empty() {
            return Err(Error::InvalidInput("edit spec lists no edits".into()));
        }
        self.edits.iter().try_for_each(|e| e.validate(attributes))
    }
}

/// Parses an edit spec, checking its format tag before anything else.
pub fn parse_edit_spec(text: &str) -> Result<EditSpec> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("edit spec: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(EDIT_SPEC_FORMAT) => {}
        Some(other) => {
            return Err(Error::Version {
                found: other.into(),
                expected: EDIT_SPEC_FORMAT.into(),
            })
        }
        None => return Err(Error::Corrupt("edit spec has no format field".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::InvalidInput(format!("edit spec: {e}")))
}
