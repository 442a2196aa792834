//! TOML run configuration: the full model config plus an optional
//! synthetic-dataset section.

use serde::{Deserialize, Serialize};

use geotok_core::dataset::ToyKind;
use geotok_core::error::{Error, Result};
use geotok_core::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: ToyKind,
    pub n_items: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: Option<DatasetConfig>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parse a mask radius flag; `inf`/`none`/`off` disable masking.
pub fn parse_mask_radius(s: &str) -> Result<Option<f64>> {
    let lower = s.trim().to_ascii_lowercase();
    if lower == "inf" || lower == "none" || lower == "off" {
        return Ok(None);
    }
    let v: f64 = lower
        .parse()
        .map_err(|_| Error::Config(format!("bad --mask-radius value '{s}'")))?;
    if v.is_infinite() {
        return Ok(None);
    }
    if v < 0.0 || v.is_nan() {
        return Err(Error::Config(format!("mask radius must be >= 0, got {s}")));
    }
    Ok(Some(v))
}
