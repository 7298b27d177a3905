use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "metavim-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document {
    format: String,
    #[serde(default)]
    meta: serde_json::Value,
    params: BTreeMap<String, Entry>,
}

/// Parameter name → tensor map plus free-form metadata, stored as JSON.
///
/// Values are written with shortest round-trip formatting and parsed with
/// exact float parsing, so save → load → save is byte-identical.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            params: BTreeMap::new(),
        }
    }

    pub fn add_store(&mut self, store: &ParamStore) -> Result<()> {
        for p in store.params() {
            if !p.value.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}`", p.name)));
            }
            if self.params.insert(p.name.clone(), p.value.clone()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Build a store from every parameter whose name starts with one of `prefixes`.
    pub fn to_store(&self, prefixes: &[&str]) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, value) in &self.params {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                store.insert(name, value.clone())?;
            }
        }
        Ok(store)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: CHECKPOINT_FORMAT.to_string(),
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        Entry {
                            shape: [t.rows(), t.cols()],
                            values: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| Error::Parse {
            field: "checkpoint".into(),
            message: e.to_string(),
        })?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}`, expected `{CHECKPOINT_FORMAT}`",
                doc.format
            )));
        }
        let mut params = BTreeMap::new();
        for (name, entry) in doc.params {
            let [r, c] = entry.shape;
            let t = Tensor::from_vec(r, c, entry.values)
                .map_err(|_| Error::Checkpoint(format!("shape of `{name}` does not match its values")))?;
            params.insert(name, t);
        }
        Ok(Checkpoint {
            meta: doc.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let mut ck = Checkpoint::new(serde_json::json!({"kind": "test"}));
            let n = values.len();
            ck.params.insert("a.weight".into(), Tensor::from_vec(1, n, values.clone()).unwrap());
            ck.params.insert("a.tiny".into(), Tensor::row(values.iter().map(|v| v * 1e-300).collect()));
            let text = ck.to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap();
            for (a, b) in ck.params.values().zip(back.params.values()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn rejects_wrong_format_and_bad_shape() {
        let bad = r#"{"format":"other","params":{}}"#;
        assert!(matches!(Checkpoint::from_json(bad), Err(Error::Checkpoint(_))));
        let bad_shape = r#"{"format":"metavim-ckpt-v1","params":{"w":{"shape":[2,2],"values":[1.0]}}}"#;
        assert!(Checkpoint::from_json(bad_shape).is_err());
        assert!(matches!(Checkpoint::from_json("{"), Err(Error::Parse { .. })));
    }
}
