//! JSON checkpoint format: `{"version": 1, "tensors": {...}, "opt": {...}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::optim::OptState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    tensors: BTreeMap<String, TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    opt: Option<OptState>,
}

pub fn to_json(params: &ParamStore, opt: Option<&OptState>) -> Result<String> {
    let tensors = params
        .iter()
        .map(|(name, t)| {
            (
                name.to_string(),
                TensorRecord {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    let doc = CheckpointDoc {
        version: CHECKPOINT_VERSION,
        tensors,
        opt: opt.cloned(),
    };
    serde_json::to_string(&doc).map_err(|e| KernelError::Checkpoint(e.to_string()))
}

pub fn from_json(text: &str) -> Result<(ParamStore, Option<OptState>)> {
    let doc: CheckpointDoc =
        serde_json::from_str(text).map_err(|e| KernelError::Checkpoint(e.to_string()))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(KernelError::Checkpoint(format!(
            "unsupported version {}",
            doc.version
        )));
    }
    let mut store = ParamStore::new();
    for (name, rec) in doc.tensors {
        store.insert(&name, Tensor::new(rec.shape, rec.data)?)?;
    }
    Ok((store, doc.opt))
}

pub fn save(path: &Path, params: &ParamStore, opt: Option<&OptState>) -> Result<()> {
    let text = to_json(params, opt)?;
    std::fs::write(path, text)
        .map_err(|e| KernelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(ParamStore, Option<OptState>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| KernelError::Checkpoint(format!("{}: {e}", path.display())))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store
            .insert(
                "a",
                Tensor::matrix(1, 3, vec![0.1, 1.0 / 3.0, -2.5e-300]).unwrap(),
            )
            .unwrap();
        store
            .insert(
                "b.w",
                Tensor::matrix(2, 1, vec![std::f64::consts::PI, -0.0]).unwrap(),
            )
            .unwrap();
        let mut opt = OptState::new(AdamConfig::new(1e-5).with_weight_decay(1e-7));
        opt.step = 7;
        opt.m.insert("a".into(), vec![1e-17, 2.0, 3.0]);
        let text = to_json(&store, Some(&opt)).unwrap();
        let (back, back_opt) = from_json(&text).unwrap();
        for (name, t) in store.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back_opt.unwrap(), opt);
        assert!(text.starts_with("{\"version\":1,\"tensors\""));
    }

    #[test]
    fn rejects_unknown_version() {
        let text = r#"{"version": 2, "tensors": {}}"#;
        assert!(matches!(from_json(text), Err(KernelError::Checkpoint(_))));
    }
}
