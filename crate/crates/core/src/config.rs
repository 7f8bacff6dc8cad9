// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, stored as TOML.
//!
//! Every field has a default, so a config file only needs the keys it changes.
//! Any field can also be overridden with a `section.key=value` assignment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{CarlaError, Result};
use crate::infer::Projection;
use crate::inject::{AnomalyType, Injector};
use crate::pretext::PretextConfig;
use crate::selfsup::SelfSupConfig;

/// Derives an independent seed for a named component from the root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Architecture settings; input width and window length come from the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kernel_sizes: Vec<usize>,
    pub channels: Vec<usize>,
    pub rep_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            kernel_sizes: e.kernel_sizes,
            channels: e.channels,
            rep_dim: e.rep_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSection {
    pub types: Vec<AnomalyType>,
}

impl Default for InjectionSection {
    fn default() -> Self {
        Self {
            types: AnomalyType::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub window_size: usize,
    /// Step between training windows; test windows always use step 1.
    pub stride: usize,
    /// Z-score both splits with training statistics.
    pub normalize: bool,
    /// Benchmark or entity directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Windows per forward pass at inference and neighbour mining.
    pub eval_batch: usize,
    pub projection: Projection,
    pub encoder: EncoderSection,
    pub injection: InjectionSection,
    pub pretext: PretextConfig,
    pub selfsup: SelfSupConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window_size: 200,
            stride: 1,
            normalize: true,
            data: None,
            out: None,
            eval_batch: 256,
            projection: Projection::Causal,
            encoder: EncoderSection::default(),
            injection: InjectionSection::default(),
            pretext: PretextConfig::default(),
            selfsup: SelfSupConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| CarlaError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CarlaError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CarlaError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| CarlaError::io(path, e))
    }

    /// Applies `section.key=value`; the value is read as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CarlaError::Config(format!("expected key=value, got {assignment:?}")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut root = toml::Value::try_from(&*self)
            .map_err(|e| CarlaError::Config(format!("config: {e}")))?;
        let mut node = &mut root;
        for (i, part) in path.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| CarlaError::Config(format!("{key}: not a section")))?;
            if i + 1 == path.len() {
                table.insert(part.to_string(), parse_value(raw.trim()));
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: Self = root
            .try_into()
            .map_err(|e| CarlaError::Config(format!("override {key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(CarlaError::Config("window size must be at least 2".into()));
        }
        if self.stride == 0 || self.eval_batch == 0 {
            return Err(CarlaError::Config("stride and eval_batch must be positive".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CarlaError::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.encoder_config(1).validate()?;
        self.injector()?;
        self.pretext.validate()?;
        self.selfsup.validate()?;
        Ok(())
    }

    pub fn encoder_config(&self, input_dims: usize) -> EncoderConfig {
        EncoderConfig {
            kernel_sizes: self.encoder.kernel_sizes.clone(),
            channels: self.encoder.channels.clone(),
            rep_dim: self.encoder.rep_dim,
            input_dims,
            window_size: self.window_size,
        }
    }

    pub fn injector(&self) -> Result<Injector> {
        Injector::new(self.injection.types.clone())
    }
}
