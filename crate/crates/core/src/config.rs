//! Run configuration: a sectioned TOML file, overridable key by key.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. Module seeds left unset are derived from
//! `run.seed`:
//!
//! | key                       | label           |
//! |---------------------------|-----------------|
//! | `rain.seed`               | `"synth"`       |
//! | `derain.seed`             | `"derain"`      |
//! | `attack.seed`             | `"attack"`      |
//! | `attack.canonical_z_seed` | `"canonical-z"` |
//! | `eval.random_seed`        | `"random-flow"` |
//!
//! with value `derive_seed(run.seed, label) >> 1`; TOML integers are signed,
//! so every seed in a config lies in `[0, 2^63)`. The test split is synthesized from `derive_seed(rain.seed, "test")`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::metrics::{BiasMode, SsimParams};
use crate::nets::{DerainConfig, GeneratorConfig};
use crate::rain::{SynthMode, SynthParams};
use crate::seeds::derive_seed;
use crate::trainer::{AttackHyper, DerainHyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Dataset root holding `train/` and `test/` splits.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Use every available core. Results do not depend on it.
    pub parallel: bool,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "out".into(),
            parallel: false,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub mode: SynthMode,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            train_count: 200,
            test_count: 50,
            height: 64,
            width: 64,
            mode: SynthMode::Combined,
        }
    }
}

/// Generator layout; the flow size comes from `[synth]` and the noise size
/// follows from the strides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub noise_channels: usize,
    pub down_channels: [usize; 3],
    pub down_strides: [usize; 3],
    pub residual_blocks: usize,
    pub up_channels: [usize; 2],
    pub up_strides: [usize; 3],
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::for_size(64, 64);
        GeneratorSection {
            noise_channels: g.noise_channels,
            down_channels: g.down_channels,
            down_strides: g.down_strides,
            residual_blocks: g.residual_blocks,
            up_channels: g.up_channels,
            up_strides: g.up_strides,
        }
    }
}

impl GeneratorSection {
    pub fn to_config(&self, height: usize, width: usize) -> GeneratorConfig {
        let down: usize = self.down_strides.iter().product();
        let up: usize = self.up_strides.iter().product::<usize>().max(1);
        GeneratorConfig {
            height,
            width,
            noise_channels: self.noise_channels,
            noise_height: height * down / up,
            noise_width: width * down / up,
            down_channels: self.down_channels,
            down_strides: self.down_strides,
            residual_blocks: self.residual_blocks,
            up_channels: self.up_channels,
            up_strides: self.up_strides,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Seed of the equal-budget random flow.
    pub random_seed: u64,
    /// Run the histogram mock detector for the perception columns.
    pub detector: bool,
    pub detector_bins: usize,
    pub bias_mode: BiasMode,
    /// Number of test samples dumped as qualitative panels.
    pub qualitative: usize,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            random_seed: 0,
            detector: true,
            detector_bins: 8,
            bias_mode: BiasMode::Ratio,
            qualitative: 4,
            histogram_bins: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub synth: SynthSection,
    pub rain: SynthParams,
    pub derain: DerainHyper,
    pub derain_net: DerainConfig,
    pub attack: AttackHyper,
    pub generator: GeneratorSection,
    pub ssim: SsimParams,
    pub eval: EvalSection,
}

const DERIVED_SEEDS: [(&str, &str, &str); 5] = [
    ("rain", "seed", "synth"),
    ("derain", "seed", "derain"),
    ("attack", "seed", "attack"),
    ("attack", "canonical_z_seed", "canonical-z"),
    ("eval", "random_seed", "random-flow"),
];

/// Seeds in a config are TOML integers, so derived ones are kept below 2^63.
pub fn config_seed(global: u64, label: &str) -> u64 {
    derive_seed(global, label) >> 1
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn section<'a>(table: &'a mut Table, name: &str) -> Result<&'a mut Table> {
    table
        .entry(name)
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{name}` must be a table")))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{key}`")))?;
    let mut t = table;
    for p in parts {
        t = section(t, p)?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(text.to_string()),
    }
}

fn to_value<S: Serialize>(v: &S) -> Value {
    Value::try_from(v).expect("config values serialize")
}

impl RunConfig {
    /// Reads an optional config file, applies the reference hyperparameters
    /// when `paper_defaults` is set, then `key=value` overrides, then fills
    /// unset seeds.
    pub fn load(path: Option<&Path>, paper_defaults: bool, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        if paper_defaults {
            for (key, value) in Self::paper_entries() {
                set_path(&mut table, key, value)?;
            }
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<Table>().map_err(config_err)?)
    }

    fn from_table(mut table: Table) -> Result<Self> {
        let global = match section(&mut table, "run")?.get("seed") {
            None => 0,
            Some(v) => v
                .as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| Error::Config("run.seed must be a non-negative integer".into()))?,
        };
        for (sec, key, label) in DERIVED_SEEDS {
            let t = section(&mut table, sec)?;
            if !t.contains_key(key) {
                t.insert(key.into(), Value::Integer(config_seed(global, label) as i64));
            }
        }
        let cfg: RunConfig = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The reference hyperparameter values as `(key, value)` overrides.
    pub fn paper_entries() -> Vec<(&'static str, Value)> {
        let d = DerainHyper::paper();
        let a = AttackHyper::paper();
        let s = SsimParams::default();
        vec![
            ("derain.learning_rate", to_value(&d.learning_rate)),
            ("derain.min_learning_rate", to_value(&d.min_learning_rate)),
            ("derain.epochs", to_value(&d.epochs)),
            ("derain.batch_size", to_value(&d.batch_size)),
            ("attack.learning_rate", to_value(&a.learning_rate)),
            ("attack.batch_size", to_value(&a.batch_size)),
            ("attack.epochs", to_value(&a.epochs)),
            ("attack.l2_weight", to_value(&a.l2_weight)),
            ("attack.adam_beta1", to_value(&a.adam_beta1)),
            ("attack.adam_beta2", to_value(&a.adam_beta2)),
            ("ssim.c1", to_value(&s.c1)),
            ("ssim.c2", to_value(&s.c2)),
            ("ssim.c3", to_value(&s.c3)),
        ]
    }

    /// `(algorithm, item, value)` rows of the hyperparameter table, in table
    /// order.
    pub fn hyperparameter_rows(&self) -> Vec<(&'static str, &'static str, String)> {
        let (d, a, s) = (&self.derain, &self.attack, &self.ssim);
        vec![
            ("derain", "lr", d.learning_rate.to_string()),
            ("derain", "min lr", d.min_learning_rate.to_string()),
            ("derain", "epoch", d.epochs.to_string()),
            ("derain", "batch size", d.batch_size.to_string()),
            ("URA", "lr", a.learning_rate.to_string()),
            ("URA", "batch size", a.batch_size.to_string()),
            ("URA", "epoch", a.epochs.to_string()),
            ("URA", "l2reg", a.l2_weight.to_string()),
            ("URA", "beta1", a.adam_beta1.to_string()),
            ("URA", "beta2", a.adam_beta2.to_string()),
            ("SSIM", "c1", s.c1.to_string()),
            ("SSIM", "c2", s.c2.to_string()),
            ("SSIM", "c3", s.c3.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let seeds = [
            ("run.seed", self.run.seed),
            ("rain.seed", self.rain.seed),
            ("derain.seed", self.derain.seed),
            ("attack.seed", self.attack.seed),
            ("attack.canonical_z_seed", self.attack.canonical_z_seed),
            ("eval.random_seed", self.eval.random_seed),
        ];
        if let Some((k, v)) = seeds.iter().find(|(_, v)| *v > i64::MAX as u64) {
            return Err(Error::Config(format!("{k} = {v} exceeds 2^63 - 1")));
        }
        self.rain.validate()?;
        self.derain.validate()?;
        self.attack.validate()?;
        self.ssim.validate()?;
        let s = &self.synth;
        if s.height < self.ssim.window_size || s.width < self.ssim.window_size {
            return Err(Error::Config(format!(
                "synth size {}x{} is smaller than the SSIM window {}",
                s.height, s.width, self.ssim.window_size
            )));
        }
        if self.eval.detector_bins < 2 || self.eval.histogram_bins < 2 {
            return Err(Error::Config("detector and histogram bins must be >= 2".into()));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator.to_config(self.synth.height, self.synth.width)
    }

    pub fn train_dir(&self) -> PathBuf {
        self.run.data_dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.run.data_dir.join("test")
    }

    pub fn test_seed(&self) -> u64 {
        derive_seed(self.rain.seed, "test")
    }
}
