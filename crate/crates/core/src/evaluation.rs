//! Probe classifier and the quantitative protocols: edit/retention accuracy,
//! rank correlation of probe scores, and identity drift measured through the
//! backbone oracle.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editing::{minimal_edit_batch, AttributeProbe, MinimalEditOutcome, MinimalEditParams};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, StyleStack};
use crate::numerics::{adam_step, Activation, AdamHyper, AdamState, DenseMatrix, Mlp};
use crate::synthetic::{Dataset, MockBackbone};

pub const REPORT_FORMAT: &str = "flowplug-eval-v1";

/// What the probe reads from a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInput {
    /// Mean of the k layer codes.
    MeanCode,
    /// All k codes concatenated.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub input: ProbeInput,
    /// Hidden layer widths; empty gives a linear probe.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of identities held out for the accuracy estimate.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            input: ProbeInput::Flatten,
            hidden: vec![64],
            epochs: 100,
            batch_size: 64,
            lr: 3e-3,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("probe sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("probe lr must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "holdout_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Multi-output regressor from raw codes to standardized labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub input: ProbeInput,
    pub net: Mlp,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Held-out accuracy per attribute, in percent.
    pub holdout_accuracy: Vec<f64>,
}

/// `+1` for positive scores, `-1` otherwise.
pub fn decision(score: f64) -> f64 {
    if score > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn features(input: ProbeInput, stack: &StyleStack) -> Vec<f64> {
    match input {
        ProbeInput::MeanCode => stack.mean_code(),
        ProbeInput::Flatten => stack
            .codes
            .iter()
            .flat_map(|c| c.w.iter().copied())
            .collect(),
    }
}

impl ProbeModel {
    fn design(&self, stacks: &[StyleStack]) -> Result<DenseMatrix> {
        let dim = self.feature_mean.len();
        let mut data = Vec::with_capacity(stacks.len() * dim);
        for st in stacks {
            let f = features(self.input, st);
            if f.len() != dim {
                return Err(Error::dim("probe features", dim, f.len()));
            }
            data.extend(
                f.iter()
                    .zip(&self.feature_mean)
                    .zip(&self.feature_std)
                    .map(|((v, m), s)| (v - m) / s),
            );
        }
        DenseMatrix::new(stacks.len(), dim, data)
    }

    pub fn mean_holdout_accuracy(&self) -> f64 {
        self.holdout_accuracy.iter().sum::<f64>() / self.holdout_accuracy.len().max(1) as f64
    }
}

impl AttributeProbe for ProbeModel {
    fn attributes(&self) -> usize {
        self.net.output_dim()
    }

    fn scores(&self, stacks: &[StyleStack]) -> Result<Vec<Vec<f64>>> {
        if stacks.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.net.forward(&self.design(stacks)?)?;
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }
}

/// Percentage of stacks whose score sign matches the label sign, per attribute.
pub fn probe_accuracy<P: AttributeProbe + ?Sized>(
    probe: &P,
    stacks: &[StyleStack],
) -> Result<Vec<f64>> {
    let scores = probe.scores(stacks)?;
    let m = probe.attributes();
    let mut hits = vec![0usize; m];
    for (st, sc) in stacks.iter().zip(&scores) {
        for j in 0..m {
            if decision(sc[j]) == decision(st.labels[j]) {
                hits[j] += 1;
            }
        }
    }
    Ok(hits
        .iter()
        .map(|&h| 100.0 * h as f64 / stacks.len().max(1) as f64)
        .collect())
}

/// Trains the probe on raw codes and labels, holding out a fraction of identities.
pub fn train_probe(ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeModel> {
    cfg.validate()?;
    let m = ds.config().attributes;
    for j in 0..m {
        let classes: BTreeSet<bool> = ds.stacks.iter().map(|s| s.labels[j] > 0.0).collect();
        if classes.len() < 2 {
            return Err(Error::Degenerate(format!(
                "attribute {j} has a single class"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids: Vec<u64> = ds.identity_groups().into_keys().collect();
    if ids.len() < 2 {
        return Err(Error::Degenerate(
            "probe holdout needs at least two identities".into(),
        ));
    }
    ids.shuffle(&mut rng);
    let n_hold =
        ((ids.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, ids.len() - 1);
    let held: BTreeSet<u64> = ids[..n_hold].iter().copied().collect();
    let (hold, fit): (Vec<StyleStack>, Vec<StyleStack>) = ds
        .stacks
        .iter()
        .cloned()
        .partition(|s| held.contains(&s.identity_id));

    let raw: Vec<Vec<f64>> = fit.iter().map(|s| features(cfg.input, s)).collect();
    let dim = raw[0].len();
    let n = raw.len() as f64;
    let mut feature_mean = vec![0.0; dim];
    for f in &raw {
        for (a, v) in feature_mean.iter_mut().zip(f) {
            *a += v / n;
        }
    }
    let mut feature_std = vec![0.0; dim];
    for f in &raw {
        for ((a, v), mu) in feature_std.iter_mut().zip(f).zip(&feature_mean) {
            *a += (v - mu) * (v - mu) / n;
        }
    }
    feature_std
        .iter_mut()
        .for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });

    let mut dims = vec![dim];
    dims.extend(&cfg.hidden);
    dims.push(m);
    let net = Mlp::init(&dims, Activation::leaky_default(), false, &mut rng)?;
    let mut probe = ProbeModel {
        input: cfg.input,
        net,
        feature_mean,
        feature_std,
        holdout_accuracy: Vec::new(),
    };
    let x = probe.design(&fit)?;
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let mut params = Vec::new();
    probe.net.flatten_into(&mut params);
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb =
                DenseMatrix::from_rows(&chunk.iter().map(|&i| x.row(i)).collect::<Vec<_>>(), dim)?;
            let (out, trace) = probe.net.forward_traced(&xb)?;
            let scale = 2.0 / (chunk.len() * m) as f64;
            let grad_out = DenseMatrix::from_fn(chunk.len(), m, |r, j| {
                scale * (out.get(r, j) - fit[chunk[r]].labels[j])
            });
            let mut grads = probe.net.zero_grads();
            probe.net.backward(&trace, &grad_out, &mut grads)?;
            let mut flat = Vec::with_capacity(params.len());
            grads.flatten_into(&mut flat);
            adam_step(&mut params, &flat, &mut adam, &hyper)?;
            probe.net.load_from(&params)?;
        }
    }
    probe.holdout_accuracy = probe_accuracy(&probe, &hold)?;
    Ok(probe)
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("ranking non-finite values".into()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    Ok(ranks)
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("spearman inputs", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::Undefined(
            "rank correlation needs at least two points".into(),
        ));
    }
    let (ra, rb) = (average_ranks(a)?, average_ranks(b)?);
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("a ranking has zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Minimal edits of one attribute over an eval set, each flipping the probe's
/// current decision.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRun {
    pub attr_index: usize,
    /// ±1 per stack.
    pub directions: Vec<f64>,
    pub outcomes: Vec<MinimalEditOutcome>,
}

/// One [`EditRun`] per attribute.
pub fn run_flip_edits<P: AttributeProbe + ?Sized>(
    model: &FlowModel,
    probe: &P,
    stacks: &[StyleStack],
    params: &MinimalEditParams,
) -> Result<Vec<EditRun>> {
    let before = probe.scores(stacks)?;
    let refs: Vec<&StyleStack> = stacks.iter().collect();
    (0..model.attributes())
        .map(|attr| {
            let directions: Vec<f64> = before.iter().map(|s| -decision(s[attr])).collect();
            let outcomes = minimal_edit_batch(model, &refs, attr, &directions, probe, params)?;
            Ok(EditRun {
                attr_index: attr,
                directions,
                outcomes,
            })
        })
        .collect()
}

/// Retention matrix (edited row × observed column, percent) and
/// modification accuracy per edited attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    /// Off-diagonal retention; `None` on the diagonal or without eligible stacks.
    pub retention: Vec<Vec<Option<f64>>>,
    /// Percentage of edits that flipped the target decision.
    pub modification: Vec<f64>,
    pub attempted: Vec<usize>,
    pub not_converged: Vec<usize>,
}

impl AccuracyTable {
    /// `None` when no cell has eligible stacks.
    pub fn mean_retention(&self) -> Option<f64> {
        mean_cells(&self.retention)
    }

    pub fn mean_modification(&self) -> f64 {
        self.modification.iter().sum::<f64>() / self.modification.len().max(1) as f64
    }
}

fn mean_cells(rows: &[Vec<Option<f64>>]) -> Option<f64> {
    let cells: Vec<f64> = rows.iter().flatten().flatten().copied().collect();
    if cells.is_empty() {
        None
    } else {
        Some(cells.iter().sum::<f64>() / cells.len() as f64)
    }
}

fn check_runs(stacks: &[StyleStack], runs: &[EditRun]) -> Result<()> {
    for run in runs {
        if run.outcomes.len() != stacks.len() || run.directions.len() != stacks.len() {
            return Err(Error::dim(
                "edit outcomes",
                stacks.len(),
                run.outcomes.len(),
            ));
        }
    }
    Ok(())
}

/// Modification success and retention of the other attributes' decisions.
///
/// Retention only counts converged edits whose pre-edit decision on the
/// observed attribute agreed with the label. Non-converged edits count as
/// modification failures.
pub fn accuracy_protocol<P: AttributeProbe + ?Sized>(
    probe: &P,
    stacks: &[StyleStack],
    runs: &[EditRun],
) -> Result<AccuracyTable> {
    check_runs(stacks, runs)?;
    let m = probe.attributes();
    let before = probe.scores(stacks)?;
    let mut table = AccuracyTable {
        retention: vec![vec![None; m]; runs.len()],
        modification: Vec::with_capacity(runs.len()),
        attempted: Vec::with_capacity(runs.len()),
        not_converged: Vec::with_capacity(runs.len()),
    };
    for (row, run) in runs.iter().enumerate() {
        let edited: Vec<StyleStack> = run.outcomes.iter().map(|o| o.stack().clone()).collect();
        let after = probe.scores(&edited)?;
        let t = run.attr_index;
        let mut flipped = 0usize;
        let mut kept = vec![0usize; m];
        let mut eligible = vec![0usize; m];
        for (s, outcome) in run.outcomes.iter().enumerate() {
            if !outcome.is_converged() {
                continue;
            }
            if decision(after[s][t]) == run.directions[s] {
                flipped += 1;
            }
            for a in (0..m).filter(|&a| a != t) {
                let pre = decision(before[s][a]);
                if pre != decision(stacks[s].labels[a]) {
                    continue;
                }
                eligible[a] += 1;
                if decision(after[s][a]) == pre {
                    kept[a] += 1;
                }
            }
        }
        for a in (0..m).filter(|&a| a != t) {
            if eligible[a] > 0 {
                table.retention[row][a] = Some(100.0 * kept[a] as f64 / eligible[a] as f64);
            }
        }
        table
            .modification
            .push(100.0 * flipped as f64 / stacks.len().max(1) as f64);
        table.attempted.push(stacks.len());
        table
            .not_converged
            .push(run.outcomes.iter().filter(|o| !o.is_converged()).count());
    }
    Ok(table)
}

/// Spearman ρ between probe scores before and after each run's edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanTable {
    /// Edited row × observed column; `None` on the diagonal.
    pub rho: Vec<Vec<Option<f64>>>,
}

impl SpearmanTable {
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        mean_cells(&self.rho)
    }
}

pub fn rank_protocol<P: AttributeProbe + ?Sized>(
    probe: &P,
    stacks: &[StyleStack],
    runs: &[EditRun],
) -> Result<SpearmanTable> {
    check_runs(stacks, runs)?;
    let m = probe.attributes();
    let before = probe.scores(stacks)?;
    let mut rho = vec![vec![None; m]; runs.len()];
    for (row, run) in runs.iter().enumerate() {
        let edited: Vec<StyleStack> = run.outcomes.iter().map(|o| o.stack().clone()).collect();
        let after = probe.scores(&edited)?;
        for a in (0..m).filter(|&a| a != run.attr_index) {
            let x: Vec<f64> = before.iter().map(|s| s[a]).collect();
            let y: Vec<f64> = after.iter().map(|s| s[a]).collect();
            rho[row][a] = Some(spearman_rho(&x, &y)?);
        }
    }
    Ok(SpearmanTable { rho })
}

/// Mean squared change of the recovered identity embedding and nuisance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub identity_mse: f64,
    pub nuisance_mse: f64,
    pub pairs: usize,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn identity_drift(
    backbone: &MockBackbone,
    before: &[StyleStack],
    after: &[StyleStack],
) -> Result<DriftStats> {
    if before.len() != after.len() {
        return Err(Error::dim("drift pairs", before.len(), after.len()));
    }
    let (mut id, mut nu) = (0.0, 0.0);
    for (b, a) in before.iter().zip(after) {
        let fb = backbone.invert(b)?.factors;
        let fa = backbone.invert(a)?.factors;
        id += mse(&fb.identity_emb, &fa.identity_emb);
        nu += mse(&fb.nuisance, &fa.nuisance);
    }
    let n = before.len().max(1) as f64;
    Ok(DriftStats {
        identity_mse: id / n,
        nuisance_mse: nu / n,
        pairs: before.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub probe_holdout_accuracy: f64,
    pub mean_retention: Option<f64>,
    pub mean_modification: f64,
    pub mean_spearman: Option<f64>,
    pub mean_identity_drift: f64,
    pub mean_nuisance_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub attributes: usize,
    pub accuracy: AccuracyTable,
    pub spearman: SpearmanTable,
    /// One entry per edited attribute.
    pub drift: Vec<DriftStats>,
    pub summary: ReportSummary,
    pub edit_params: MinimalEditParams,
    /// Configuration and seeds of the run that produced the report.
    pub run: serde_json::Value,
}

/// Runs all three protocols on `stacks`.
pub fn evaluate(
    model: &FlowModel,
    probe: &ProbeModel,
    backbone: &MockBackbone,
    stacks: &[StyleStack],
    params: &MinimalEditParams,
    run: serde_json::Value,
) -> Result<EvalReport> {
    let runs = run_flip_edits(model, probe, stacks, params)?;
    let accuracy = accuracy_protocol(probe, stacks, &runs)?;
    let spearman = rank_protocol(probe, stacks, &runs)?;
    let drift = runs
        .iter()
        .map(|r| {
            let after: Vec<StyleStack> = r.outcomes.iter().map(|o| o.stack().clone()).collect();
            identity_drift(backbone, stacks, &after)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = drift.len().max(1) as f64;
    let summary = ReportSummary {
        probe_holdout_accuracy: probe.mean_holdout_accuracy(),
        mean_retention: accuracy.mean_retention(),
        mean_modification: accuracy.mean_modification(),
        mean_spearman: spearman.mean_off_diagonal(),
        mean_identity_drift: drift.iter().map(|d| d.identity_mse).sum::<f64>() / k,
        mean_nuisance_drift: drift.iter().map(|d| d.nuisance_mse).sum::<f64>() / k,
    };
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        attributes: model.attributes(),
        accuracy,
        spearman,
        drift,
        summary,
        edit_params: *params,
        run,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn attr_header(&self) -> String {
        (0..self.attributes).map(|a| format!(",attr_{a}")).collect()
    }

    /// Retention matrix plus modification accuracy and non-converged counts.
    pub fn accuracy_csv(&self) -> String {
        let mut out = format!("edited{},acc_of_modif,not_converged\n", self.attr_header());
        for (row, cells) in self.accuracy.retention.iter().enumerate() {
            let _ = write!(out, "attr_{row}");
            for c in cells {
                let _ = write!(out, ",{}", cell(*c));
            }
            let _ = writeln!(
                out,
                ",{},{}",
                self.accuracy.modification[row], self.accuracy.not_converged[row]
            );
        }
        out
    }

    pub fn spearman_csv(&self) -> String {
        let mut out = format!("edited{}\n", self.attr_header());
        for (row, cells) in self.spearman.rho.iter().enumerate() {
            let _ = write!(out, "attr_{row}");
            for c in cells {
                let _ = write!(out, ",{}", cell(*c));
            }
            out.push('\n');
        }
        out
    }

    pub fn drift_csv(&self) -> String {
        let mut out = String::from("edited,identity_mse,nuisance_mse\n");
        for (row, d) in self.drift.iter().enumerate() {
            let _ = writeln!(out, "attr_{row},{},{}", d.identity_mse, d.nuisance_mse);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editing::reconstruct;
    use crate::flow::FlowConfig;
    use crate::prior::{AttributeKind, PriorConfig};
    use crate::synthetic::{generate_with_backbone, FactorLayout, SyntheticConfig};

    /// Pearson correlation of ranks obtained by pairwise counting.
    fn oracle_rho(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|x| {
                    let less = v.iter().filter(|y| *y < x).count() as f64;
                    let ties = v.iter().filter(|y| *y == x).count() as f64;
                    less + (ties + 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn spearman_examples() {
        let a = [3.1, 0.2, 7.7];
        assert_eq!(spearman_rho(&a, &a).unwrap(), 1.0);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman_rho(&x, &y).unwrap(), -1.0);
        let r = spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert!((oracle_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman_rho(&[1.0], &[1.0]),
            Err(Error::Undefined(_))
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::Undefined(_))
        ));
        assert!(spearman_rho(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(
            average_ranks(&[2.0, 1.0, 2.0, 5.0]).unwrap(),
            vec![2.5, 1.0, 2.5, 4.0]
        );
        let a = [1.0, 2.0, 2.0, 3.0, 0.5];
        let b = [0.1, 0.3, 0.2, 0.2, 0.9];
        assert!((spearman_rho(&a, &b).unwrap() - oracle_rho(&a, &b)).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symmetric_bounded_and_rank_invariant(
                a in proptest::collection::vec(-50i32..50, 3..20),
                seed in any::<u64>(),
            ) {
                let a: Vec<f64> = a.into_iter().map(f64::from).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut b = a.clone();
                b.shuffle(&mut rng);
                let (Ok(r1), Ok(r2)) = (spearman_rho(&a, &b), spearman_rho(&b, &a)) else {
                    return Ok(());
                };
                prop_assert_eq!(r1, r2);
                prop_assert!((-1.0..=1.0).contains(&r1));
                let t: Vec<f64> = a.iter().map(|x| (x / 10.0).exp() + 3.0).collect();
                prop_assert!((spearman_rho(&t, &b).unwrap() - r1).abs() < 1e-12);
                prop_assert!((oracle_rho(&a, &b) - r1).abs() < 1e-12);
            }
        }
    }

    /// Scores attribute j by coordinate j of the mean code, shifted to centre the classes.
    struct CoordinateProbe;

    impl AttributeProbe for CoordinateProbe {
        fn attributes(&self) -> usize {
            2
        }
        fn scores(&self, stacks: &[StyleStack]) -> Result<Vec<Vec<f64>>> {
            Ok(stacks
                .iter()
                .map(|s| s.mean_code()[..2].iter().map(|v| 2.0 * v - 0.5).collect())
                .collect())
        }
    }

    fn identity_setup() -> (MockBackbone, Dataset, FlowModel) {
        let cfg = SyntheticConfig {
            num_identities: 20,
            frames_per_identity: 10,
            attributes: 2,
            latent_dim: 6,
            layers: 2,
            identity_dim: 2,
            attribute_kinds: vec![AttributeKind::Binary; 2],
            ..SyntheticConfig::default()
        };
        let layout = FactorLayout {
            attributes: 2,
            identity_dim: 2,
            dim: 6,
        };
        let backbone = MockBackbone::identity(layout, 2);
        let ds = generate_with_backbone(&cfg, &backbone, 3).unwrap().dataset;
        let flow = FlowConfig {
            couplings: 2,
            hidden_width: 4,
            hidden_layers: 1,
            scale_clamp: 2.0,
        };
        let prior = PriorConfig::new(2, 6, 0.5).unwrap();
        let model = FlowModel::new(prior, 2, &flow, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (backbone, ds, model)
    }

    fn linear_probe_cfg() -> ProbeConfig {
        ProbeConfig {
            hidden: vec![],
            epochs: 400,
            lr: 1e-2,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn linear_probe_on_identity_backbone() {
        let (_, ds, _) = identity_setup();
        let probe = train_probe(&ds, &linear_probe_cfg()).unwrap();
        for acc in &probe.holdout_accuracy {
            assert!(*acc >= 99.0, "{acc}");
        }
        assert_eq!(train_probe(&ds, &linear_probe_cfg()).unwrap(), probe);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let cfg = SyntheticConfig {
            num_identities: 100,
            ..SyntheticConfig::default()
        };
        let mut ds = crate::synthetic::generate_dataset(&cfg, 5).unwrap().dataset;
        let mut labels: Vec<Vec<f64>> = ds.stacks.iter().map(|s| s.labels.clone()).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        for (s, l) in ds.stacks.iter_mut().zip(labels) {
            s.labels = l;
        }
        let probe = train_probe(
            &ds,
            &ProbeConfig {
                epochs: 30,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        for acc in &probe.holdout_accuracy {
            assert!((45.0..=55.0).contains(acc), "{acc}");
        }
    }

    #[test]
    fn degenerate_attribute_is_rejected() {
        let (_, mut ds, _) = identity_setup();
        ds.stacks.iter_mut().for_each(|s| s.labels[1] = 1.0);
        assert!(matches!(
            train_probe(&ds, &linear_probe_cfg()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn identity_flow_on_identity_backbone_is_disentangled() {
        let (backbone, ds, model) = identity_setup();
        let probe = train_probe(&ds, &linear_probe_cfg()).unwrap();
        let params = MinimalEditParams::default();
        let report = evaluate(
            &model,
            &probe,
            &backbone,
            &ds.stacks,
            &params,
            serde_json::Value::Null,
        )
        .unwrap();
        for row in &report.accuracy.retention {
            for c in row.iter().flatten() {
                assert_eq!(*c, 100.0);
            }
        }
        assert!(report.accuracy.modification.iter().all(|&m| m == 100.0));
        for d in &report.drift {
            assert_eq!(d.identity_mse, 0.0);
        }
        // A readout that sees only its own coordinate keeps every other ranking intact.
        let oracle = CoordinateProbe;
        let runs = run_flip_edits(&model, &oracle, &ds.stacks, &params).unwrap();
        let table = rank_protocol(&oracle, &ds.stacks, &runs).unwrap();
        for c in table.rho.iter().flatten().flatten() {
            assert_eq!(*c, 1.0);
        }
        assert!(report
            .accuracy_csv()
            .starts_with("edited,attr_0,attr_1,acc_of_modif"));
        assert_eq!(report.spearman_csv().lines().count(), 3);
        assert_eq!(report.drift_csv().lines().count(), 3);
    }

    #[test]
    fn no_op_edits_keep_rankings() {
        // A mixing backbone keeps probe scores free of near-ties.
        let cfg = SyntheticConfig {
            num_identities: 20,
            frames_per_identity: 10,
            attributes: 2,
            latent_dim: 6,
            layers: 2,
            identity_dim: 2,
            attribute_kinds: vec![AttributeKind::Binary; 2],
            ..SyntheticConfig::default()
        };
        let ds = crate::synthetic::generate_dataset(&cfg, 3).unwrap().dataset;
        let prior = PriorConfig::new(2, 6, 0.5).unwrap();
        let flow = FlowConfig {
            couplings: 4,
            hidden_width: 8,
            hidden_layers: 1,
            scale_clamp: 2.0,
        };
        let model =
            FlowModel::random(prior, 2, &flow, 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let probe = train_probe(&ds, &linear_probe_cfg()).unwrap();
        let refs: Vec<&StyleStack> = ds.stacks.iter().collect();
        let round = reconstruct(&model, &refs).unwrap();
        let runs: Vec<EditRun> = (0..2)
            .map(|a| EditRun {
                attr_index: a,
                directions: vec![1.0; round.len()],
                outcomes: round
                    .iter()
                    .map(|s| MinimalEditOutcome::Converged {
                        stack: s.clone(),
                        steps: 0,
                    })
                    .collect(),
            })
            .collect();
        let table = rank_protocol(&probe, &ds.stacks, &runs).unwrap();
        for c in table.rho.iter().flatten().flatten() {
            assert!(*c >= 0.999, "{:?}", table.rho);
        }
    }

    #[test]
    fn drift_is_zero_for_untouched_stacks() {
        let (backbone, ds, _) = identity_setup();
        let d = identity_drift(&backbone, &ds.stacks, &ds.stacks).unwrap();
        assert_eq!((d.identity_mse, d.nuisance_mse), (0.0, 0.0));
    }

    #[test]
    fn accuracy_is_order_free() {
        let (backbone, ds, model) = identity_setup();
        let probe = train_probe(&ds, &linear_probe_cfg()).unwrap();
        let params = MinimalEditParams::default();
        let a = evaluate(
            &model,
            &probe,
            &backbone,
            &ds.stacks,
            &params,
            serde_json::Value::Null,
        )
        .unwrap();
        let mut shuffled = ds.stacks.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        let b = evaluate(
            &model,
            &probe,
            &backbone,
            &shuffled,
            &params,
            serde_json::Value::Null,
        )
        .unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }
}
