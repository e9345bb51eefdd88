use serde::{Deserialize, Serialize};

use super::{ModelSpec, ParamVector};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ltsv-checkpoint/1";

/// Model spec plus flat parameters, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        if params.len() != spec.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a model with {}",
                params.len(),
                spec.n_params()
            )));
        }
        Ok(Self { format: CHECKPOINT_FORMAT.to_string(), spec, params })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint format {:?}", ckpt.format)));
        }
        ckpt.spec.validate()?;
        if ckpt.params.len() != ckpt.spec.n_params() || !ckpt.params.is_finite() {
            return Err(Error::InvalidConfig("checkpoint parameters do not match the spec".into()));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let spec = ModelSpec::mlp(5, 2, 2, 7, 3);
        let params = spec.init().unwrap();
        let ckpt = Checkpoint::new(spec, params).unwrap();
        assert_eq!(Checkpoint::from_json(&ckpt.to_json()).unwrap(), ckpt);
    }

    #[test]
    fn rejects_wrong_format_tag() {
        let spec = ModelSpec::linear_ar(2, 1, 1);
        let mut ckpt = Checkpoint::new(spec.clone(), spec.init().unwrap()).unwrap();
        ckpt.format = "other/9".into();
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
        assert!(Checkpoint::new(spec, ParamVector(vec![0.0])).is_err());
    }
}
