//! The gen-data → train → evaluate stages, in memory and on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::editing::{edit_attribute_batch, minimal_edit_batch, EditMode, EditSpec, StackRef};
use crate::error::{Error, Result};
use crate::evaluation::{decision, evaluate, train_probe, EvalReport, ProbeModel};
use crate::flow::StyleStack;
use crate::synthetic::{
    generate_dataset, generate_dataset_with_stats, make_backbone, read_dataset, read_ground_truth,
    write_dataset, write_ground_truth, Dataset, SyntheticDataset,
};
use crate::training::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainOutcome};

pub const TRAIN_DATA: &str = "train.jsonl";
pub const TRAIN_TRUTH: &str = "train_truth.jsonl";
pub const EVAL_DATA: &str = "eval.jsonl";
pub const EVAL_TRUTH: &str = "eval_truth.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const CHECKPOINT: &str = "model.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const REPORT_JSON: &str = "report.json";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const SPEARMAN_CSV: &str = "spearman.csv";
pub const DRIFT_CSV: &str = "identity_drift.csv";
pub const PROBE_JSON: &str = "probe.json";
pub const EDITED_DATA: &str = "edited.jsonl";
pub const EDIT_LOG: &str = "edit_log.csv";

/// Largest tolerated gap between stored ground truth and the rebuilt backbone's inversion.
const TRUTH_TOLERANCE: f64 = 1e-6;

pub struct Datasets {
    pub train: SyntheticDataset,
    pub eval: SyntheticDataset,
}

/// Training and evaluation sets drawn from one backbone.
pub fn generate_data(cfg: &RunConfig) -> Result<Datasets> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let seeds = cfg.seeds();
    let train = generate_dataset(&cfg.synthetic, seeds.train_data)?;
    let eval = generate_dataset_with_stats(
        &cfg.eval_synthetic(),
        seeds.eval_data,
        &train.dataset.header.label_stats,
    )?;
    Ok(Datasets { train, eval })
}

/// Result of a complete in-memory run.
pub struct Experiment {
    pub datasets: Datasets,
    pub training: TrainOutcome,
    pub probe: ProbeModel,
    pub report: EvalReport,
}

/// Checks stored ground truth against the backbone named in the dataset header.
fn verify_truth(data: &SyntheticDataset) -> Result<crate::synthetic::MockBackbone> {
    let cfg = data.dataset.config();
    let backbone = make_backbone(cfg, cfg.backbone_seed)?;
    for (st, truth) in data.dataset.stacks.iter().zip(&data.factors) {
        let got = backbone.invert(st)?.factors.to_vec();
        let err = got
            .iter()
            .zip(truth.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if err.is_nan() || err > TRUTH_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "ground truth of stack ({}, {}) disagrees with the backbone by {err:e}",
                st.identity_id, st.frame_id
            )));
        }
    }
    Ok(backbone)
}

/// Probe training and all protocols for a trained checkpoint.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    train_data: &Dataset,
    eval: &SyntheticDataset,
) -> Result<(ProbeModel, EvalReport)> {
    let cfg = cfg.resolved();
    if ckpt.dataset_fingerprint != train_data.fingerprint() {
        return Err(Error::InvalidInput(
            "checkpoint was trained on a different dataset".into(),
        ));
    }
    if train_data.config().backbone_seed != eval.dataset.config().backbone_seed {
        return Err(Error::InvalidInput(
            "training and evaluation data come from different backbones".into(),
        ));
    }
    if train_data.header.label_stats != eval.dataset.header.label_stats {
        return Err(Error::InvalidInput(
            "evaluation labels are not standardized with the training statistics".into(),
        ));
    }
    let backbone = verify_truth(eval)?;
    let probe = train_probe(train_data, &cfg.probe)?;
    let report = evaluate(
        &ckpt.model,
        &probe,
        &backbone,
        &eval.dataset.stacks,
        &cfg.edit,
        cfg.provenance(),
    )?;
    Ok((probe, report))
}

/// Generates data, trains, and evaluates without touching the file system.
pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    let cfg = cfg.resolved();
    let datasets = generate_data(&cfg)?;
    let training = train(&datasets.train.dataset, &cfg.train)?;
    let (probe, report) = evaluate_checkpoint(
        &cfg,
        &training.checkpoint,
        &datasets.train.dataset,
        &datasets.eval,
    )?;
    Ok(Experiment {
        datasets,
        training,
        probe,
        report,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut cfg = cfg.resolved();
    cfg.out_dir = out.display().to_string();
    write(out.join(CONFIG_SNAPSHOT), &cfg.to_json())
}

/// Writes both datasets, their ground truth and the config snapshot.
pub fn gen_data_to(cfg: &RunConfig, out: &Path) -> Result<Datasets> {
    let data = generate_data(cfg)?;
    ensure_dir(out)?;
    write_dataset(&out.join(TRAIN_DATA), &data.train.dataset)?;
    write_ground_truth(&out.join(TRAIN_TRUTH), &data.train)?;
    write_dataset(&out.join(EVAL_DATA), &data.eval.dataset)?;
    write_ground_truth(&out.join(EVAL_TRUTH), &data.eval)?;
    snapshot(cfg, out)?;
    Ok(data)
}

/// Trains on `data` and writes the checkpoint, loss trace and config snapshot.
pub fn train_to(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let outcome = train(&ds, &cfg.train)?;
    ensure_dir(out)?;
    save_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT))?;
    write(out.join(LOSS_CSV), &outcome.trace.to_csv())?;
    snapshot(&cfg, out)?;
    Ok(outcome)
}

/// Input files of [`evaluate_to`].
pub struct EvalInputs<'a> {
    pub checkpoint: &'a Path,
    pub train_data: &'a Path,
    pub eval_data: &'a Path,
    pub eval_truth: &'a Path,
}

/// Evaluates a checkpoint and writes the report as JSON and three CSV tables.
pub fn evaluate_to(cfg: &RunConfig, inputs: &EvalInputs<'_>, out: &Path) -> Result<EvalReport> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let ckpt = load_checkpoint(inputs.checkpoint)?;
    let train_data = read_dataset(inputs.train_data)?;
    let eval = read_ground_truth(inputs.eval_data, inputs.eval_truth)?;
    let (probe, report) = evaluate_checkpoint(&cfg, &ckpt, &train_data, &eval)?;
    ensure_dir(out)?;
    write(out.join(REPORT_JSON), &report.to_json())?;
    write(out.join(ACCURACY_CSV), &report.accuracy_csv())?;
    write(out.join(SPEARMAN_CSV), &report.spearman_csv())?;
    write(out.join(DRIFT_CSV), &report.drift_csv())?;
    write(
        out.join(PROBE_JSON),
        &serde_json::to_string(&probe).expect("probe serializes"),
    )?;
    snapshot(&cfg, out)?;
    Ok(report)
}

/// One line of the edit log.
#[derive(Debug, Clone, PartialEq)]
pub struct EditLogEntry {
    pub stack: StackRef,
    pub edit: usize,
    pub steps: usize,
    pub converged: bool,
}

/// Applies an edit spec to a dataset. Step-search edits use a probe trained on `ds`.
pub fn apply_edit_spec(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    ds: &Dataset,
    spec: &EditSpec,
) -> Result<(Vec<StyleStack>, Vec<EditLogEntry>)> {
    let cfg = cfg.resolved();
    let model = &ckpt.model;
    spec.validate(model.attributes())?;
    let data_cfg = ds.config();
    if data_cfg.attributes != model.attributes() || data_cfg.latent_dim != model.dim() {
        return Err(Error::Shape(format!(
            "dataset has {} attributes and dimension {}, the checkpoint {} and {}",
            data_cfg.attributes,
            data_cfg.latent_dim,
            model.attributes(),
            model.dim()
        )));
    }
    let mut stacks: Vec<StyleStack> = match &spec.select {
        None => ds.stacks.clone(),
        Some(refs) => refs
            .iter()
            .map(|r| {
                ds.stacks
                    .iter()
                    .find(|s| s.identity_id == r.identity_id && s.frame_id == r.frame_id)
                    .cloned()
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "no stack ({}, {}) in the dataset",
                            r.identity_id, r.frame_id
                        ))
                    })
            })
            .collect::<Result<_>>()?,
    };
    let probe = if spec.edits.iter().any(|e| e.mode == EditMode::StepSearch) {
        Some(train_probe(ds, &cfg.probe)?)
    } else {
        None
    };
    let mut log = Vec::new();
    for (i, req) in spec.edits.iter().enumerate() {
        let refs: Vec<&StyleStack> = stacks.iter().collect();
        let next = match (req.mode, &probe) {
            (EditMode::Absolute, _) => {
                let targets = vec![req.target; refs.len()];
                let out = edit_attribute_batch(model, &refs, req.attr_index, &targets)?;
                log.extend(refs.iter().map(|s| EditLogEntry {
                    stack: StackRef {
                        identity_id: s.identity_id,
                        frame_id: s.frame_id,
                    },
                    edit: i,
                    steps: 0,
                    converged: true,
                }));
                out
            }
            (EditMode::StepSearch, Some(probe)) => {
                let dirs = vec![decision(req.target); refs.len()];
                let outcomes =
                    minimal_edit_batch(model, &refs, req.attr_index, &dirs, probe, &cfg.edit)?;
                log.extend(refs.iter().zip(&outcomes).map(|(s, o)| EditLogEntry {
                    stack: StackRef {
                        identity_id: s.identity_id,
                        frame_id: s.frame_id,
                    },
                    edit: i,
                    steps: o.steps(),
                    converged: o.is_converged(),
                }));
                outcomes.into_iter().map(|o| o.into_stack()).collect()
            }
            (EditMode::StepSearch, None) => unreachable!("probe trained for step-search edits"),
        };
        stacks = next;
    }
    Ok((stacks, log))
}

/// Runs [`apply_edit_spec`] on files and writes the edited stacks and a log.
pub fn edit_to(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    spec_path: &Path,
    out: &Path,
) -> Result<Vec<EditLogEntry>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = read_dataset(data)?;
    let spec_text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec = crate::editing::parse_edit_spec(&spec_text)?;
    let (stacks, log) = apply_edit_spec(cfg, &ckpt, &ds, &spec)?;
    ensure_dir(out)?;
    let edited = Dataset {
        header: ds.header.clone(),
        stacks,
    };
    write_dataset(&out.join(EDITED_DATA), &edited)?;
    let mut csv = String::from("identity_id,frame_id,edit,steps,converged\n");
    for e in &log {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            e.stack.identity_id, e.stack.frame_id, e.edit, e.steps, e.converged
        );
    }
    write(out.join(EDIT_LOG), &csv)?;
    snapshot(cfg, out)?;
    Ok(log)
}
