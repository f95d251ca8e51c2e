//! Config files layered under command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;

/// A parsed config file, or an empty object when none was given.
pub struct Layer(Value);

impl Layer {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(Value::Object(Default::default())));
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if !value.is_object() {
            bail!("config {} must be a JSON object", path.display());
        }
        Ok(Self(value))
    }

    /// The whole file as `T`, with `T`'s defaults for absent fields.
    pub fn parse<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.0.clone()).context("invalid config")
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .with_context(|| format!("invalid config field `{key}`")),
        }
    }

    /// Seed from the flag, else the file; one of them is required.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        match flag {
            Some(s) => Ok(s),
            None => self
                .get("seed")?
                .context("a seed is required: pass --seed or set `seed` in the config file"),
        }
    }
}
