//! JSON-lines dataset and ground-truth files.
//!
//! Dataset: one header line, then one record per stack.
//! Ground truth: one header line bound to a dataset fingerprint, then one
//! factor record per stack. Both parsers return errors on any malformed input.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, FactorLayout, GroundTruthFactors, SyntheticConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::flow::StyleStack;
use crate::prior::{AttributeKind, LabelStats};

pub const DATASET_FORMAT: &str = "flowplug-ds-v1";
pub const GROUND_TRUTH_FORMAT: &str = "flowplug-gt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub seed: u64,
    pub config: SyntheticConfig,
    /// Standardization statistics per attribute; `None` for binary attributes.
    pub label_stats: Vec<Option<LabelStats>>,
}

impl DatasetHeader {
    pub fn new(config: SyntheticConfig, seed: u64, label_stats: Vec<Option<LabelStats>>) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            seed,
            config,
            label_stats,
        }
    }

    fn line(&self) -> String {
        serde_json::to_string(self).expect("header serializes")
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.line().as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        self.config
            .validate()
            .map_err(|e| Error::Corrupt(format!("dataset header: {e}")))?;
        if self.label_stats.len() != self.config.attributes {
            return Err(Error::Shape(format!(
                "{} label statistics for {} attributes",
                self.label_stats.len(),
                self.config.attributes
            )));
        }
        for (j, (kind, stats)) in self
            .config
            .attribute_kinds
            .iter()
            .zip(&self.label_stats)
            .enumerate()
        {
            match (kind, stats) {
                (AttributeKind::Binary, None) => {}
                (AttributeKind::Continuous, Some(s))
                    if s.mean.is_finite() && s.std > 0.0 && s.std.is_finite() => {}
                _ => {
                    return Err(Error::Corrupt(format!(
                        "label statistics of attribute {j} do not match its kind"
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    identity_id: u64,
    frame_id: u64,
    labels: Vec<f64>,
    codes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthHeader {
    format: String,
    dataset_fingerprint: String,
    layout: FactorLayout,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    identity_id: u64,
    frame_id: u64,
    attrs: Vec<f64>,
    identity_emb: Vec<f64>,
    nuisance: Vec<f64>,
}

/// Parsed ground-truth file.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFile {
    pub dataset_fingerprint: String,
    pub layout: FactorLayout,
    /// `(identity_id, frame_id, factors)` in file order.
    pub entries: Vec<(u64, u64, GroundTruthFactors)>,
}

/// Reads the `format` field first so version mismatches are reported as such.
fn check_format(line: &str, expected: &str) -> Result<()> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == expected => Ok(()),
        Some(f) => Err(Error::Version {
            found: f.to_string(),
            expected: expected.to_string(),
        }),
        None => Err(Error::Corrupt("header has no format field".into())),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl Dataset {
    pub fn to_jsonl(&self) -> String {
        let mut out = self.header.line();
        out.push('\n');
        for st in &self.stacks {
            let rec = DatasetRecord {
                identity_id: st.identity_id,
                frame_id: st.frame_id,
                labels: st.labels.clone(),
                codes: st.codes.iter().map(|c| c.w.clone()).collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses a dataset file. Records must match the header's dimensions.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = content_lines(text);
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Corrupt("empty dataset file".into()))?;
    check_format(first, DATASET_FORMAT)?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    header.validate()?;
    let cfg = &header.config;
    let mut stacks = Vec::new();
    for (no, line) in lines {
        let rec: DatasetRecord =
            serde_json::from_str(line).map_err(|e| Error::Corrupt(format!("line {no}: {e}")))?;
        let stack = StyleStack::from_layers(rec.codes, rec.labels, rec.identity_id, rec.frame_id);
        stack
            .validate(cfg.layers, cfg.latent_dim, cfg.attributes)
            .map_err(|e| Error::Shape(format!("line {no}: {e}")))?;
        stacks.push(stack);
    }
    Ok(Dataset { header, stacks })
}

impl SyntheticDataset {
    /// Ground-truth file bound to this dataset's fingerprint.
    pub fn ground_truth_jsonl(&self) -> String {
        let header = GroundTruthHeader {
            format: GROUND_TRUTH_FORMAT.into(),
            dataset_fingerprint: self.dataset.fingerprint(),
            layout: self.dataset.config().layout(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (st, f) in self.dataset.stacks.iter().zip(&self.factors) {
            let rec = GroundTruthRecord {
                identity_id: st.identity_id,
                frame_id: st.frame_id,
                attrs: f.attrs.clone(),
                identity_emb: f.identity_emb.clone(),
                nuisance: f.nuisance.clone(),
            };
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(&rec).expect("record serializes")
            );
        }
        out
    }
}

/// Parses a ground-truth file.
pub fn parse_ground_truth(text: &str) -> Result<GroundTruthFile> {
    let mut lines = content_lines(text);
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Corrupt("empty ground-truth file".into()))?;
    check_format(first, GROUND_TRUTH_FORMAT)?;
    let header: GroundTruthHeader =
        serde_json::from_str(first).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let layout = header.layout;
    if layout.attributes.saturating_add(layout.identity_dim) > layout.dim {
        return Err(Error::Corrupt("factor layout exceeds its dimension".into()));
    }
    let mut entries = Vec::new();
    for (no, line) in lines {
        let rec: GroundTruthRecord =
            serde_json::from_str(line).map_err(|e| Error::Corrupt(format!("line {no}: {e}")))?;
        if rec.attrs.len() != layout.attributes
            || rec.identity_emb.len() != layout.identity_dim
            || rec.nuisance.len() != layout.nuisance_dim()
        {
            return Err(Error::Shape(format!(
                "line {no}: factor blocks do not match the layout"
            )));
        }
        if !(all_finite(&rec.attrs) && all_finite(&rec.identity_emb) && all_finite(&rec.nuisance)) {
            return Err(Error::Corrupt(format!("line {no}: non-finite factor")));
        }
        entries.push((
            rec.identity_id,
            rec.frame_id,
            GroundTruthFactors {
                attrs: rec.attrs,
                identity_emb: rec.identity_emb,
                nuisance: rec.nuisance,
            },
        ));
    }
    Ok(GroundTruthFile {
        dataset_fingerprint: header.dataset_fingerprint,
        layout,
        entries,
    })
}

impl GroundTruthFile {
    /// Re-attaches factors to `dataset`, checking fingerprint and record order.
    pub fn attach(self, dataset: Dataset) -> Result<SyntheticDataset> {
        if self.dataset_fingerprint != dataset.fingerprint() {
            return Err(Error::InvalidInput(
                "ground truth belongs to a different dataset".into(),
            ));
        }
        if self.entries.len() != dataset.stacks.len() {
            return Err(Error::dim(
                "ground-truth records",
                dataset.stacks.len(),
                self.entries.len(),
            ));
        }
        let mut factors = Vec::with_capacity(self.entries.len());
        for ((id, frame, f), st) in self.entries.into_iter().zip(&dataset.stacks) {
            if id != st.identity_id || frame != st.frame_id {
                return Err(Error::InvalidInput(format!(
                    "ground truth record ({id}, {frame}) does not match stack ({}, {})",
                    st.identity_id, st.frame_id
                )));
            }
            factors.push(f);
        }
        Ok(SyntheticDataset { dataset, factors })
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&read_text(path)?)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_text(path, &dataset.to_jsonl())
}

/// Reads a dataset and its ground-truth file and joins them.
pub fn read_ground_truth(dataset: &Path, truth: &Path) -> Result<SyntheticDataset> {
    let ds = read_dataset(dataset)?;
    parse_ground_truth(&read_text(truth)?)?.attach(ds)
}

pub fn write_ground_truth(path: &Path, data: &SyntheticDataset) -> Result<()> {
    write_text(path, &data.ground_truth_jsonl())
}
