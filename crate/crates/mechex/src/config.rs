//! Declarative experiment configuration, presets, and config hashing.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{parse_mechanism_ids, Mechanism};
use crate::models::EXPERT_FILTER_CHOICES;

pub const CONFIG_SCHEMA: u32 = 1;
pub const DATA_DIR_ENV: &str = "MECHEX_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceMode {
    /// Run exactly `iterations` iterations.
    FixedIterations,
    /// Stop early once probe assignments are stable across the window.
    Stability,
}

/// Where the training images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Root directory holding the IDX files (defaults to $MECHEX_DATA_DIR).
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Directory of Omniglot-style PNGs for generalization runs.
    #[serde(default)]
    pub omniglot_dir: Option<PathBuf>,
    /// Use the procedural glyph corpus of this many training examples
    /// instead of IDX files (test images are one quarter of it). For smoke
    /// tests and machines without the real data.
    #[serde(default)]
    pub synthetic: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            omniglot_dir: None,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out examples per mechanism for assignment matrices.
    pub held_out_per_mechanism: usize,
    /// Test examples for the per-iteration accuracy curve (the final triple
    /// always uses the full test set).
    pub accuracy_curve_subset: usize,
    /// Iterations between accuracy-curve points (0 = no curve).
    pub accuracy_interval: u64,
    /// Omniglot images per generalization batch.
    pub generalization_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            held_out_per_mechanism: 1000,
            accuracy_curve_subset: 512,
            accuracy_interval: 100,
            generalization_batch: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub preset: String,
    pub seed: u64,
    pub expert_count: usize,
    pub expert_filters: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub identity_init: bool,
    /// Subsample the canonical half to this many examples.
    #[serde(default)]
    pub canonical_subset_size: Option<usize>,
    pub mechanisms: Vec<String>,
    /// Multiplier on the discriminator's Adam learning rate.
    pub d_lr_scale: f64,
    /// Two discriminator Adam steps (fakes, then real) instead of one.
    pub split_d_steps: bool,
    /// Mark this run as the single-network baseline (expert_count must be 1).
    pub single_net_baseline: bool,
    /// Receptive-field variant with pooling/upsampling inside the experts.
    pub pooled_experts: bool,
    pub convergence: ConvergenceMode,
    pub probe_size: usize,
    pub probe_interval: u64,
    pub stability_window: usize,
    pub checkpoint_every: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, detail: String| {
            Err(Error::Config(format!("field `{field}`: {detail}")))
        };
        if self.schema != CONFIG_SCHEMA {
            return fail("schema", format!("expected {CONFIG_SCHEMA}, got {}", self.schema));
        }
        if self.expert_count == 0 {
            return fail("expert_count", "must be at least 1".into());
        }
        if !EXPERT_FILTER_CHOICES.contains(&self.expert_filters) {
            return fail(
                "expert_filters",
                format!("must be one of {EXPERT_FILTER_CHOICES:?}, got {}", self.expert_filters),
            );
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if self.mechanisms.is_empty() {
            return fail("mechanisms", "at least one mechanism".into());
        }
        parse_mechanism_ids(&self.mechanisms)?;
        if self.single_net_baseline && self.expert_count != 1 {
            return fail(
                "single_net_baseline",
                format!("requires expert_count 1, got {}", self.expert_count),
            );
        }
        if self.d_lr_scale <= 0.0 {
            return fail("d_lr_scale", "must be positive".into());
        }
        if self.probe_interval == 0 {
            return fail("probe_interval", "must be positive".into());
        }
        if self.stability_window == 0 {
            return fail("stability_window", "must be positive".into());
        }
        if let Some(0) = self.canonical_subset_size {
            return fail("canonical_subset_size", "must be positive when set".into());
        }
        Ok(())
    }

    pub fn mechanism_list(&self) -> Result<Vec<Mechanism>> {
        parse_mechanism_ids(&self.mechanisms)
    }

    /// Resolve the data root: explicit config, else $MECHEX_DATA_DIR.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var(DATA_DIR_ENV).ok().map(PathBuf::from))
    }

    /// Canonical JSON serialization (serde field order).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the canonical JSON; stamped into every artifact.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_json()?.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const PRESET_NAMES: [&str; 12] = [
    "paper-main",
    "reduced",
    "too-many",
    "too-few",
    "tiny-canonical",
    "no-identity-init",
    "single-net-32",
    "single-net-64",
    "single-net-128",
    "wide-64",
    "wide-128",
    "d-lr-tenth",
    // "toy" and "toy-split-d" also exist; they are smoke-scale, see below.
];

/// Named experiment presets. `toy` presets use the synthetic corpus and are
/// sized for tests; all others expect real data under the data root.
pub fn preset(name: &str, seed: u64, out_dir: PathBuf) -> Result<ExperimentConfig> {
    let all_ids = || Mechanism::ALL.iter().map(|m| m.id().to_string()).collect::<Vec<_>>();
    let base = ExperimentConfig {
        schema: CONFIG_SCHEMA,
        preset: name.to_string(),
        seed,
        expert_count: 10,
        expert_filters: 32,
        iterations: 2000,
        batch_size: 32,
        identity_init: true,
        canonical_subset_size: None,
        mechanisms: all_ids(),
        d_lr_scale: 1.0,
        split_d_steps: false,
        single_net_baseline: false,
        pooled_experts: false,
        convergence: ConvergenceMode::FixedIterations,
        probe_size: 512,
        probe_interval: 20,
        stability_window: 10,
        checkpoint_every: 500,
        data: DataConfig::default(),
        eval: EvalConfig::default(),
        out_dir,
    };
    let reduced_mechanisms = vec![
        "tr_l".to_string(),
        "tr_r".to_string(),
        "inv".to_string(),
        "noise".to_string(),
    ];
    let cfg = match name {
        "paper-main" => base,
        "reduced" => ExperimentConfig {
            expert_count: 4,
            iterations: 1000,
            mechanisms: reduced_mechanisms,
            ..base
        },
        "too-many" => ExperimentConfig {
            expert_count: 16,
            ..base
        },
        "too-few" => ExperimentConfig {
            expert_count: 6,
            ..base
        },
        "tiny-canonical" => ExperimentConfig {
            canonical_subset_size: Some(64),
            ..base
        },
        "no-identity-init" => ExperimentConfig {
            identity_init: false,
            ..base
        },
        "single-net-32" | "single-net-64" | "single-net-128" => ExperimentConfig {
            expert_count: 1,
            expert_filters: name.rsplit('-').next().unwrap().parse().unwrap(),
            single_net_baseline: true,
            ..base
        },
        "wide-64" => ExperimentConfig {
            expert_filters: 64,
            ..base
        },
        "wide-128" => ExperimentConfig {
            expert_filters: 128,
            ..base
        },
        "d-lr-tenth" => ExperimentConfig {
            d_lr_scale: 0.1,
            ..base
        },
        "toy" => ExperimentConfig {
            expert_count: 2,
            iterations: 50,
            batch_size: 8,
            mechanisms: vec!["inv".to_string(), "tr_r".to_string()],
            probe_size: 64,
            probe_interval: 10,
            stability_window: 3,
            checkpoint_every: 0,
            data: DataConfig {
                synthetic: Some(256),
                ..Default::default()
            },
            eval: EvalConfig {
                held_out_per_mechanism: 64,
                accuracy_curve_subset: 64,
                accuracy_interval: 0,
                generalization_batch: 8,
            },
            ..base
        },
        "toy-split-d" => {
            let mut cfg = preset("toy", seed, base.out_dir)?;
            cfg.preset = name.to_string();
            cfg.split_d_steps = true;
            cfg
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}`; known: {PRESET_NAMES:?} plus toy, toy-split-d"
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES.iter().chain(&["toy", "toy-split-d"]) {
            let cfg = preset(name, 1, PathBuf::from("/tmp/out")).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.preset, *name);
        }
        assert!(preset("nope", 1, PathBuf::from("/tmp")).is_err());
    }

    #[test]
    fn config_round_trips_exactly() {
        let cfg = preset("reduced", 9, PathBuf::from("runs/reduced")).unwrap();
        let text = cfg.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn unknown_fields_name_the_field() {
        let cfg = preset("toy", 1, PathBuf::from("/tmp")).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        value["unknown_knob"] = serde_json::json!(3);
        let err = ExperimentConfig::from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("unknown_knob"), "{err}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut cfg = preset("toy", 1, PathBuf::from("/tmp")).unwrap();
        cfg.expert_filters = 48;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("expert_filters"));

        let mut cfg2 = preset("toy", 1, PathBuf::from("/tmp")).unwrap();
        cfg2.single_net_baseline = true;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = preset("toy", 1, PathBuf::from("/tmp")).unwrap();
        let b = preset("toy", 1, PathBuf::from("/tmp")).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = preset("toy", 2, PathBuf::from("/tmp")).unwrap();
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }
}
