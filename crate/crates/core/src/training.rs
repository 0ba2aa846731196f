//! Identity-grouped Adam training of the flow, loss traces and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, StyleStack};
use crate::losses::{total_loss, total_loss_with_grad, LossBreakdown, LossConfig};
use crate::numerics::{adam_step, AdamHyper, AdamState};
use crate::prior::PriorConfig;
use crate::synthetic::Dataset;

pub const CHECKPOINT_FORMAT: &str = "flowplug-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identity groups per batch.
    pub batch_groups: usize,
    /// Cap on frames per identity group.
    pub frames_per_group: usize,
    pub adam: AdamHyper,
    pub seed: u64,
    pub lambda_contrastive: f64,
    /// Standard deviation of the attribute Gaussians.
    pub sigma: f64,
    pub normalize_groups: bool,
    /// Log progress every this many epochs; 0 disables it.
    pub eval_every: usize,
    pub flow: FlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_groups: 5,
            frames_per_group: 20,
            adam: AdamHyper::default(),
            seed: 0,
            lambda_contrastive: 1.0,
            sigma: 0.5,
            normalize_groups: true,
            eval_every: 10,
            flow: FlowConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_groups == 0 || self.frames_per_group == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_groups and frames_per_group must be positive".into(),
            ));
        }
        self.adam.validate()?;
        self.flow.validate()?;
        Ok(())
    }

    /// Loss configuration for a dataset with `attributes` attributes and code length `dim`.
    pub fn loss_config(&self, attributes: usize, dim: usize) -> Result<LossConfig> {
        let cfg = LossConfig {
            lambda_contrastive: self.lambda_contrastive,
            prior: PriorConfig::new(attributes, dim, self.sigma)?,
            normalize_groups: self.normalize_groups,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A batch is a list of identity groups; a group is a list of stack indices.
pub type Batch = Vec<Vec<usize>>;

/// Groups frames by identity, shuffles, caps group size and packs groups into batches.
pub fn make_batches<R: Rng + ?Sized>(
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if ds.stacks.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if cfg.frames_per_group == 0 || cfg.batch_groups == 0 {
        return Err(Error::InvalidConfig(
            "group and batch sizes must be positive".into(),
        ));
    }
    let by_identity: BTreeMap<u64, Vec<usize>> = ds.identity_groups();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for mut frames in by_identity.into_values() {
        frames.shuffle(rng);
        groups.extend(frames.chunks(cfg.frames_per_group).map(<[usize]>::to_vec));
    }
    groups.shuffle(rng);
    Ok(groups
        .chunks(cfg.batch_groups)
        .map(<[Vec<usize>]>::to_vec)
        .collect())
}

/// One row of the loss trace. Epoch 0 is measured before any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_nll: f64,
    pub mean_contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_nll,mean_contrastive,total\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch, r.mean_nll, r.mean_contrastive, r.total
            );
        }
        out
    }

    pub fn initial(&self) -> Option<&EpochLoss> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: FlowModel,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub final_loss: LossBreakdown,
    pub dataset_fingerprint: String,
}

impl Checkpoint {
    pub fn prior(&self) -> &PriorConfig {
        self.model.prior()
    }

    fn validate(&self) -> Result<()> {
        let flow = &self.train_config.flow;
        let layers = self.model.layers();
        if layers.len() != flow.couplings {
            return Err(Error::Shape(format!(
                "{} coupling layers, config says {}",
                layers.len(),
                flow.couplings
            )));
        }
        for layer in layers {
            for net in [&layer.scale_net, &layer.shift_net] {
                if net.layers().len() != flow.hidden_layers + 1 {
                    return Err(Error::Shape(
                        "coupling net depth differs from the config".into(),
                    ));
                }
                if net.layers()[..flow.hidden_layers]
                    .iter()
                    .any(|l| l.bias.len() != flow.hidden_width)
                {
                    return Err(Error::Shape(
                        "coupling net width differs from the config".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn batch_refs<'d>(ds: &'d Dataset, batch: &Batch) -> Vec<Vec<&'d StyleStack>> {
    batch
        .iter()
        .map(|g| g.iter().map(|&i| &ds.stacks[i]).collect())
        .collect()
}

/// Running sums weighted by stacks (NLL) and by (group, layer) pairs (contrastive).
#[derive(Default)]
struct Accumulator {
    nll: f64,
    stacks: usize,
    contrastive: f64,
    pairs: usize,
}

impl Accumulator {
    fn add(&mut self, loss: &LossBreakdown, groups: &[Vec<&StyleStack>], layers: usize) {
        let stacks: usize = groups.iter().map(Vec::len).sum();
        let pairs = groups.len() * layers;
        self.nll += loss.nll * stacks as f64;
        self.stacks += stacks;
        self.contrastive += loss.contrastive * pairs as f64;
        self.pairs += pairs;
    }

    fn row(&self, epoch: usize, lambda: f64) -> EpochLoss {
        let mean_nll = self.nll / self.stacks.max(1) as f64;
        let mean_contrastive = self.contrastive / self.pairs.max(1) as f64;
        EpochLoss {
            epoch,
            mean_nll,
            mean_contrastive,
            total: mean_nll + lambda * mean_contrastive,
        }
    }
}

fn diverged(epoch: usize, batch: usize, detail: impl ToString) -> Error {
    Error::Diverged {
        epoch,
        batch,
        detail: detail.to_string(),
    }
}

/// Trains an identity-initialized flow on `ds`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dcfg = ds.config();
    let loss_cfg = cfg.loss_config(dcfg.attributes, dcfg.latent_dim)?;
    for st in &ds.stacks {
        st.validate(dcfg.layers, dcfg.latent_dim, dcfg.attributes)?;
    }
    let mut model = FlowModel::new(
        loss_cfg.prior,
        dcfg.layers,
        &cfg.flow,
        &mut epoch_rng(cfg.seed, 0),
    )?;
    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let k = dcfg.layers;
    let lambda = cfg.lambda_contrastive;

    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let batches = make_batches(ds, cfg, &mut epoch_rng(cfg.seed, 1))?;
    let mut acc = Accumulator::default();
    for (b, batch) in batches.iter().enumerate() {
        let groups = batch_refs(ds, batch);
        let loss = total_loss(&model, &groups, &loss_cfg).map_err(|e| diverged(0, b, e))?;
        if !loss.total.is_finite() {
            return Err(diverged(0, b, "non-finite loss"));
        }
        acc.add(&loss, &groups, k);
    }
    rows.push(acc.row(0, lambda));
    let mut last = rows[0];

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(ds, cfg, &mut epoch_rng(cfg.seed, epoch as u64))?;
        let mut acc = Accumulator::default();
        for (b, batch) in batches.iter().enumerate() {
            let groups = batch_refs(ds, batch);
            let (loss, grads) = total_loss_with_grad(&model, &groups, &loss_cfg)
                .map_err(|e| diverged(epoch, b, e))?;
            if !loss.total.is_finite() {
                return Err(diverged(epoch, b, "non-finite loss"));
            }
            acc.add(&loss, &groups, k);
            adam_step(&mut params, &grads.flatten(), &mut adam, &cfg.adam)
                .map_err(|e| diverged(epoch, b, e))?;
            model
                .set_params(&params)
                .map_err(|e| diverged(epoch, b, e))?;
        }
        last = acc.row(epoch, lambda);
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 {
            log::info!(
                "epoch {epoch}: nll {:.4} contrastive {:.4} total {:.4}",
                last.mean_nll,
                last.mean_contrastive,
                last.total
            );
        }
        rows.push(last);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model,
            train_config: cfg.clone(),
            epoch: cfg.epochs,
            final_loss: LossBreakdown {
                nll: last.mean_nll,
                contrastive: last.mean_contrastive,
                total: last.total,
            },
            dataset_fingerprint: ds.fingerprint(),
        },
        trace: LossTrace { rows },
    })
}

pub fn checkpoint_to_json(ckpt: &Checkpoint) -> String {
    serde_json::to_string(ckpt).expect("checkpoint serializes")
}

/// Parses a checkpoint. Malformed JSON is `Corrupt`, an unknown format is
/// `Version`, inconsistent shapes are `Shape`.
pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("checkpoint: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(CHECKPOINT_FORMAT) => {}
        Some(other) => {
            return Err(Error::Version {
                found: other.into(),
                expected: CHECKPOINT_FORMAT.into(),
            })
        }
        None => return Err(Error::Corrupt("checkpoint has no format field".into())),
    }
    let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("shape mismatch") || msg.contains("dimension mismatch") {
            Error::Shape(msg)
        } else {
            Error::Corrupt(format!("checkpoint: {msg}"))
        }
    })?;
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
