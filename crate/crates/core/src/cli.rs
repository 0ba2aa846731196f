//! Command-line surface: `gen-data`, `train`, `edit`, `evaluate`, `selftest`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_run_config, RunConfig};
use crate::error::Error;
use crate::pipeline::{
    edit_to, evaluate_to, gen_data_to, train_to, EvalInputs, CHECKPOINT, EVAL_DATA, EVAL_TRUTH,
    TRAIN_DATA,
};
use crate::selftest::run_selftest;

/// Exit status of a failed run, by error kind.
pub mod exit {
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const DATA: i32 = 5;
    pub const NUMERIC: i32 = 6;
    pub const SELFTEST: i32 = 7;
}

#[derive(Debug, Parser)]
#[command(
    name = "flowplug",
    version,
    about = "Identity-aware latent disentanglement with a conditional flow"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (JSON). Absent keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate training and evaluation datasets with ground-truth sidecars.
    GenData,
    /// Train the flow; writes a checkpoint and the loss trace.
    Train {
        /// Training dataset [default: <out>/train.jsonl].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Apply an edit spec to a dataset.
    Edit {
        /// Checkpoint [default: <out>/model.json].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to edit [default: <out>/eval.jsonl].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Edit spec (JSON).
        #[arg(long)]
        spec: PathBuf,
    },
    /// Run the accuracy, rank and identity-drift protocols.
    Evaluate {
        /// Checkpoint [default: <out>/model.json].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset the checkpoint was trained on [default: <out>/train.jsonl].
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Evaluation dataset [default: <out>/eval.jsonl].
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Ground truth of the evaluation dataset [default: <out>/eval_truth.jsonl].
        #[arg(long)]
        eval_truth: Option<PathBuf>,
    },
    /// Check the numerical invariants of this build.
    Selftest,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => exit::CONFIG,
        Error::Io { .. } => exit::IO,
        Error::NumericOverflow(_) | Error::Diverged { .. } | Error::Undefined(_) => exit::NUMERIC,
        Error::Dimension { .. }
        | Error::InvalidInput(_)
        | Error::Degenerate(_)
        | Error::Corrupt(_)
        | Error::Version { .. }
        | Error::Shape(_) => exit::DATA,
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(path: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: &Cli) -> Result<i32, Error> {
    if let Command::Selftest = cli.command {
        let results = run_selftest();
        let mut ok = true;
        for r in &results {
            println!(
                "{} {}: {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            );
            ok &= r.passed;
        }
        return Ok(if ok { 0 } else { exit::SELFTEST });
    }
    let cfg = resolve_config(&cli.common)?;
    let out = PathBuf::from(&cfg.out_dir);
    match &cli.command {
        Command::GenData => {
            let data = gen_data_to(&cfg, &out)?;
            println!(
                "wrote {} training and {} evaluation stacks to {}",
                data.train.dataset.stacks.len(),
                data.eval.dataset.stacks.len(),
                out.display()
            );
        }
        Command::Train { data } => {
            let outcome = train_to(&cfg, &or_default(data, &out, TRAIN_DATA), &out)?;
            let (first, last) = (
                outcome.trace.rows[0],
                outcome.trace.rows[outcome.trace.rows.len() - 1],
            );
            println!(
                "trained {} epochs: total loss {:.4} -> {:.4}; checkpoint in {}",
                last.epoch,
                first.total,
                last.total,
                out.display()
            );
        }
        Command::Edit {
            checkpoint,
            data,
            spec,
        } => {
            let log = edit_to(
                &cfg,
                &or_default(checkpoint, &out, CHECKPOINT),
                &or_default(data, &out, EVAL_DATA),
                spec,
                &out,
            )?;
            let failed = log.iter().filter(|e| !e.converged).count();
            println!("applied {} edits ({failed} not converged)", log.len());
        }
        Command::Evaluate {
            checkpoint,
            train_data,
            eval_data,
            eval_truth,
        } => {
            let inputs = EvalInputs {
                checkpoint: &or_default(checkpoint, &out, CHECKPOINT),
                train_data: &or_default(train_data, &out, TRAIN_DATA),
                eval_data: &or_default(eval_data, &out, EVAL_DATA),
                eval_truth: &or_default(eval_truth, &out, EVAL_TRUTH),
            };
            let report = evaluate_to(&cfg, &inputs, &out)?;
            let s = &report.summary;
            let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
            println!("probe held-out accuracy {:.2}%", s.probe_holdout_accuracy);
            println!("modification accuracy   {:.2}%", s.mean_modification);
            println!("retention accuracy      {}%", show(s.mean_retention));
            println!("mean off-diagonal rho   {}", show(s.mean_spearman));
            println!("identity drift (MSE)    {:.6}", s.mean_identity_drift);
        }
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_fails() {
        use clap::error::ErrorKind;
        let kind = |args: &[&str]| Cli::try_parse_from(args).unwrap_err().kind();
        assert_eq!(
            kind(&["flowplug", "frobnicate"]),
            ErrorKind::InvalidSubcommand
        );
        assert_eq!(
            kind(&["flowplug"]),
            ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
        );
        assert_eq!(kind(&["flowplug", "--help"]), ErrorKind::DisplayHelp);
        let err = Cli::try_parse_from(["flowplug", "frobnicate"]).unwrap_err();
        assert_ne!(err.exit_code(), 0);
        assert!(err.render().to_string().contains("Usage"));
    }

    #[test]
    fn missing_and_invalid_inputs_have_distinct_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(dispatch(["flowplug", "train", "--out", out]), exit::IO);
        let cfg = dir.path().join("bad.json");
        std::fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
        assert_eq!(
            dispatch([
                "flowplug",
                "gen-data",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out
            ]),
            exit::CONFIG
        );
        std::fs::write(&cfg, "{").unwrap();
        assert_eq!(
            dispatch(["flowplug", "gen-data", "--config", cfg.to_str().unwrap()]),
            exit::DATA
        );
    }

    #[test]
    fn end_to_end_small_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = dir.path().join("cfg.json");
        std::fs::write(
            &cfg,
            r#"{"synthetic": {"num_identities": 6, "frames_per_identity": 4, "latent_dim": 8,
                "attributes": 2, "identity_dim": 3, "layers": 2, "attribute_kinds": ["binary", "continuous"]},
                "eval_data": {"num_identities": 3, "frames_per_identity": 3},
                "train": {"epochs": 2, "flow": {"couplings": 2, "hidden_width": 8, "hidden_layers": 1}},
                "probe": {"epochs": 5}, "edit": {"max_steps": 3}}"#,
        )
        .unwrap();
        let common = [
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "4",
        ];
        for cmd in ["gen-data", "train", "evaluate"] {
            let mut args = vec!["flowplug", cmd];
            args.extend(common);
            assert_eq!(dispatch(args), 0, "{cmd}");
        }
        let spec = dir.path().join("spec.json");
        std::fs::write(
            &spec,
            r#"{"format": "flowplug-edit-v1", "edits": [{"attr_index": 1, "target": 0.5, "mode": "absolute"}]}"#,
        )
        .unwrap();
        let mut args = vec!["flowplug", "edit", "--spec", spec.to_str().unwrap()];
        args.extend(common);
        assert_eq!(dispatch(args), 0);
        let edited =
            crate::synthetic::read_dataset(&out.join(crate::pipeline::EDITED_DATA)).unwrap();
        assert_eq!(edited.stacks.len(), 9);
        let snapshot = load_run_config(&out.join(crate::pipeline::CONFIG_SNAPSHOT)).unwrap();
        assert_eq!(snapshot.seed, 4);
    }
}
