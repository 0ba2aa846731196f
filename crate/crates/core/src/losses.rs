//! Training objective: conditional NLL over all layer codes plus the
//! contrastive identity term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowGrads, FlowModel, StyleStack};
use crate::numerics::DenseMatrix;
use crate::prior::{log_prior_flat, PriorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the contrastive term; 0 disables it.
    pub lambda_contrastive: f64,
    pub prior: PriorConfig,
    /// Divide each group's contrastive sum by `n (n - 1)`.
    pub normalize_groups: bool,
}

impl LossConfig {
    pub fn new(prior: PriorConfig) -> Self {
        Self {
            lambda_contrastive: 1.0,
            prior,
            normalize_groups: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if !(self.lambda_contrastive >= 0.0 && self.lambda_contrastive.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_contrastive must be >= 0, got {}",
                self.lambda_contrastive
            )));
        }
        Ok(())
    }
}

/// The three reported components of [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean NLL per stack (each stack sums its k layer terms).
    pub nll: f64,
    /// Mean contrastive loss per (group, layer).
    pub contrastive: f64,
    /// `nll + λ · contrastive`.
    pub total: f64,
}

/// `Σ_{i≠j} ‖sᵢ − sⱼ‖²` for one identity group, evaluated as
/// `2n Σᵢ ‖sᵢ − m‖²` with `m` the group mean. With `normalize` the sum is
/// divided by the number of ordered pairs `n (n − 1)`.
pub fn contrastive_loss<S: AsRef<[f64]>>(s_vectors: &[S], normalize: bool) -> Result<f64> {
    let n = s_vectors.len();
    if n == 0 {
        return Err(Error::InvalidInput(
            "contrastive loss of an empty group".into(),
        ));
    }
    let dim = s_vectors[0].as_ref().len();
    if let Some(bad) = s_vectors.iter().find(|s| s.as_ref().len() != dim) {
        return Err(Error::dim("non-attribute vector", dim, bad.as_ref().len()));
    }
    // Sum in lexicographic order so the result is bit-identical under any
    // reordering of the group.
    let mut ordered: Vec<&[f64]> = s_vectors.iter().map(|s| s.as_ref()).collect();
    ordered.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; dim];
    for s in &ordered {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let spread: f64 = ordered
        .iter()
        .map(|s| {
            s.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    Ok(2.0 * n as f64 * spread * group_scale(n, normalize))
}

fn group_scale(n: usize, normalize: bool) -> f64 {
    match (normalize, n) {
        (false, _) => 1.0,
        (true, 0 | 1) => 0.0,
        (true, n) => 1.0 / (n * (n - 1)) as f64,
    }
}

/// `−Σᵢ [log p(cᵢ, sᵢ | y) + log |det ∂F/∂wᵢ|]` over the k codes of one stack.
pub fn nll_loss(model: &FlowModel, stack: &StyleStack, cfg: &LossConfig) -> Result<f64> {
    let group = [stack];
    Ok(evaluate(model, &[&group[..]], cfg, false)?.0.nll)
}

/// Mean NLL over all stacks in `batch` plus λ times the mean contrastive loss
/// over every (identity group, layer) pair.
pub fn total_loss<'s, G: AsRef<[&'s StyleStack]>>(
    model: &FlowModel,
    batch: &[G],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let groups: Vec<&[&StyleStack]> = batch.iter().map(|g| g.as_ref()).collect();
    Ok(evaluate(model, &groups, cfg, false)?.0)
}

/// [`total_loss`] together with its gradient with respect to every flow parameter.
pub fn total_loss_with_grad<'s, G: AsRef<[&'s StyleStack]>>(
    model: &FlowModel,
    batch: &[G],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, FlowGrads)> {
    let groups: Vec<&[&StyleStack]> = batch.iter().map(|g| g.as_ref()).collect();
    let (loss, grads) = evaluate(model, &groups, cfg, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

fn check_batch(model: &FlowModel, batch: &[&[&StyleStack]], cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.prior.attributes != model.attributes() || cfg.prior.latent_dim != model.dim() {
        return Err(Error::InvalidConfig(format!(
            "loss prior ({} attributes, dim {}) does not match the model ({}, {})",
            cfg.prior.attributes,
            cfg.prior.latent_dim,
            model.attributes(),
            model.dim()
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for group in batch {
        let first = group
            .first()
            .ok_or_else(|| Error::InvalidInput("empty identity group".into()))?;
        for st in group.iter() {
            if st.identity_id != first.identity_id {
                return Err(Error::InvalidInput(format!(
                    "identity group mixes ids {} and {}",
                    first.identity_id, st.identity_id
                )));
            }
            if st.labels.len() != cfg.prior.attributes {
                return Err(Error::dim("labels", cfg.prior.attributes, st.labels.len()));
            }
        }
    }
    Ok(())
}

fn evaluate(
    model: &FlowModel,
    batch: &[&[&StyleStack]],
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<FlowGrads>)> {
    check_batch(model, batch, cfg)?;
    let stacks: Vec<&StyleStack> = batch.iter().flat_map(|g| g.iter().copied()).collect();
    let (x, conds) = model.stack_rows(&stacks)?;
    let (z, logdet, trace) = if want_grad {
        let (z, ld, tr) = model.forward_traced(&x, &conds)?;
        (z, ld, Some(tr))
    } else {
        let (z, ld) = model.forward_batch(&x, &conds)?;
        (z, ld, None)
    };

    let k = model.conditions();
    let m = cfg.prior.attributes;
    let n_stacks = stacks.len() as f64;
    let inv_var = 1.0 / (cfg.prior.sigma * cfg.prior.sigma);

    let mut grad_z = DenseMatrix::zeros(z.rows(), z.cols());
    let grad_logdet = vec![-1.0 / n_stacks; z.rows()];

    let mut nll_sum = 0.0;
    for (si, st) in stacks.iter().enumerate() {
        for layer in 0..k {
            let r = si * k + layer;
            let row = z.row(r);
            nll_sum -= log_prior_flat(row, &st.labels, &cfg.prior) + logdet[r];
            if want_grad {
                let g = grad_z.row_mut(r);
                for j in 0..m {
                    g[j] = (row[j] - st.labels[j]) * inv_var / n_stacks;
                }
                for j in m..row.len() {
                    g[j] = row[j] / n_stacks;
                }
            }
        }
    }
    let nll = nll_sum / n_stacks;

    // Contrastive term over every (group, layer) pair.
    let pairs = (batch.len() * k) as f64;
    let lambda = cfg.lambda_contrastive;
    let mut contrastive_sum = 0.0;
    let mut offset = 0;
    let s_dim = z.cols() - m;
    let mut mean = vec![0.0; s_dim];
    for group in batch {
        let n = group.len();
        let scale = group_scale(n, cfg.normalize_groups);
        for layer in 0..k {
            let rows = (0..n).map(|i| (offset + i) * k + layer);
            mean.iter_mut().for_each(|v| *v = 0.0);
            for r in rows.clone() {
                for (mv, v) in mean.iter_mut().zip(&z.row(r)[m..]) {
                    *mv += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n as f64);
            let mut spread = 0.0;
            for r in rows.clone() {
                spread += z.row(r)[m..]
                    .iter()
                    .zip(&mean)
                    .map(|(v, mu)| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            contrastive_sum += 2.0 * n as f64 * spread * scale;
            if want_grad && lambda != 0.0 && scale != 0.0 {
                // d/dsᵢ of 2n Σ‖sⱼ − m‖² is 4n (sᵢ − m); the mean's own
                // dependence cancels because Σ (sⱼ − m) = 0.
                let coef = lambda * 4.0 * n as f64 * scale / pairs;
                for r in rows {
                    let (zr, gr) = (z.row(r)[m..].to_vec(), grad_z.row_mut(r));
                    for ((g, v), mu) in gr[m..].iter_mut().zip(&zr).zip(&mean) {
                        *g += coef * (v - mu);
                    }
                }
            }
        }
        offset += n;
    }
    let contrastive = contrastive_sum / pairs;
    let loss = LossBreakdown {
        nll,
        contrastive,
        total: nll + lambda * contrastive,
    };
    if !(loss.total.is_finite() && loss.contrastive.is_finite()) {
        return Err(Error::NumericOverflow("loss value".into()));
    }

    let grads = match trace {
        Some(trace) => {
            let mut grads = model.zero_grads();
            model.backward(&trace, &grad_z, &grad_logdet, &mut grads)?;
            Some(grads)
        }
        None => None,
    };
    Ok((loss, grads))
}
