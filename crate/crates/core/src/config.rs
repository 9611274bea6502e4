//! Run configuration: one JSON document covering data, trunk and training,
//! with dotted-path overrides (`train.penalty.b=2.5`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::TrunkConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub trunk: TrunkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.trunk.validate()?;
        self.train.validate()?;
        let expect = [1, self.data.extent, self.data.extent];
        if self.trunk.input != expect {
            return Err(Error::InvalidConfig(format!(
                "trunk input {:?} does not match generated images {expect:?}",
                self.trunk.input
            )));
        }
        if self.trunk.pool_depth() != self.data.pool_depth {
            return Err(Error::InvalidConfig(format!(
                "data.pool_depth {} but the trunk pools {} times",
                self.data.pool_depth,
                self.trunk.pool_depth()
            )));
        }
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    /// Applies `key=value` overrides and re-validates.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg = Self::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets a dotted path in a JSON document. The right-hand side is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for key in path.split('.') {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{path}: {key:?} is not inside an object")))?;
        if !obj.contains_key(key) {
            return Err(Error::InvalidConfig(format!("{path}: unknown key {key:?}")));
        }
        slot = obj.get_mut(key).expect("key present");
    }
    *slot = new;
    Ok(())
}
