//! Run configuration: every knob of a gen-data → train → evaluate run in one
//! JSON document, with sub-seeds derived from a single global seed.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editing::MinimalEditParams;
use crate::error::{Error, Result};
use crate::evaluation::ProbeConfig;
use crate::synthetic::SyntheticConfig;
use crate::training::TrainConfig;

pub const RUN_CONFIG_FORMAT: &str = "flowplug-run-v1";

/// Size of the held-out evaluation set; it shares the training backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalDataConfig {
    pub num_identities: usize,
    pub frames_per_identity: usize,
}

impl Default for EvalDataConfig {
    fn default() -> Self {
        Self {
            num_identities: 25,
            frames_per_identity: 8,
        }
    }
}

/// Seeds of every random stage, all derived from [`RunConfig::seed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub backbone: u64,
    pub train_data: u64,
    pub eval_data: u64,
    pub train: u64,
    pub probe: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let draw = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng.next_u64()
        };
        Self {
            backbone: draw(1),
            train_data: draw(2),
            eval_data: draw(3),
            train: draw(4),
            probe: draw(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format: String,
    pub seed: u64,
    /// Where results are written; `--out` overrides it.
    pub out_dir: String,
    pub synthetic: SyntheticConfig,
    pub eval_data: EvalDataConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub edit: MinimalEditParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format: RUN_CONFIG_FORMAT.into(),
            seed: 0,
            out_dir: "runs/latest".into(),
            synthetic: SyntheticConfig::default(),
            eval_data: EvalDataConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            edit: MinimalEditParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format != RUN_CONFIG_FORMAT {
            return Err(Error::Version {
                found: self.format.clone(),
                expected: RUN_CONFIG_FORMAT.into(),
            });
        }
        if self.out_dir.is_empty() {
            return Err(Error::InvalidConfig("out_dir is empty".into()));
        }
        self.synthetic.validate()?;
        self.eval_synthetic().validate()?;
        self.train.validate()?;
        self.train
            .loss_config(self.synthetic.attributes, self.synthetic.latent_dim)?;
        self.probe.validate()?;
        self.edit.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    /// Copy with every sub-seed replaced by its derived value.
    pub fn resolved(&self) -> Self {
        let seeds = self.seeds();
        let mut cfg = self.clone();
        cfg.synthetic.backbone_seed = seeds.backbone;
        cfg.train.seed = seeds.train;
        cfg.probe.seed = seeds.probe;
        cfg
    }

    /// Generation config of the evaluation set.
    pub fn eval_synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_identities: self.eval_data.num_identities,
            frames_per_identity: self.eval_data.frames_per_identity,
            ..self.synthetic.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Resolved config plus seeds, without the output location.
    pub fn provenance(&self) -> serde_json::Value {
        let resolved = self.resolved();
        let mut value = serde_json::to_value(&resolved).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out_dir");
            obj.insert(
                "seeds".into(),
                serde_json::to_value(resolved.seeds()).expect("seeds serialize"),
            );
        }
        value
    }
}

/// Parses a run config; absent keys take defaults, unknown keys are rejected.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("run config: {e}")))?;
    if let Some(found) = value.get("format") {
        match found.as_str() {
            Some(RUN_CONFIG_FORMAT) => {}
            other => {
                return Err(Error::Version {
                    found: other.map_or_else(|| found.to_string(), str::to_string),
                    expected: RUN_CONFIG_FORMAT.into(),
                })
            }
        }
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("run config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(parse_run_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_override() {
        let cfg = parse_run_config(r#"{"seed": 7, "train": {"epochs": 3, "adam": {"lr": 0.01}}}"#)
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.train.adam.beta1, 0.9);
        assert_eq!(cfg.train.batch_groups, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            parse_run_config(r#"{"sede": 1}"#),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            parse_run_config(r#"{"train": {"epoch": 1}}"#),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn invalid_values_and_versions() {
        assert!(parse_run_config(r#"{"train": {"epochs": 0}}"#).is_err());
        assert!(parse_run_config(r#"{"synthetic": {"attributes": 40}}"#).is_err());
        assert!(matches!(
            parse_run_config(r#"{"format": "x"}"#),
            Err(Error::Version { .. })
        ));
        assert!(matches!(
            parse_run_config(r#"{"format": 3}"#),
            Err(Error::Version { .. })
        ));
        assert!(matches!(parse_run_config("{"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn seeds_are_derived_and_distinct() {
        let a = Seeds::derive(1);
        assert_eq!(a, Seeds::derive(1));
        assert_ne!(a, Seeds::derive(2));
        let all = [a.backbone, a.train_data, a.eval_data, a.train, a.probe];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = RunConfig {
            seed: 3,
            ..RunConfig::default()
        }
        .resolved();
        assert_eq!(parse_run_config(&cfg.to_json()).unwrap(), cfg);
        let prov = cfg.provenance();
        assert!(prov.get("out_dir").is_none());
        assert!(prov.get("seeds").is_some());
    }
}
