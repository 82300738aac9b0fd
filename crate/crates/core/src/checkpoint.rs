//! Versioned JSON checkpoint container.
//!
//! ```json
//! {"format": "frest-kit/checkpoint", "version": 1, "seed": 0,
//!  "config": {...ModelConfig...},
//!  "groups": {"encoder": [{"name": "...", "shape": [r, c], "data": [...]}], ...}}
//! ```
//!
//! Floats are written with round-trip precision, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamGroup;

pub const FORMAT: &str = "frest-kit/checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub groups: BTreeMap<String, Vec<Tensor>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut groups: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
        for (_, p) in model.params.iter() {
            groups.entry(p.group.name().to_string()).or_default().push(Tensor {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                data: p.value.iter().copied().collect(),
            });
        }
        Checkpoint { format: FORMAT.into(), version: VERSION, seed: model.seed(), config: model.config().clone(), groups }
    }

    /// Drops every group not used at inference (strainer, projection,
    /// discriminator).
    pub fn strip_to_inference(&mut self) {
        self.groups.retain(|name, _| name.parse::<ParamGroup>().map(|g| g.is_inference()).unwrap_or(false));
    }

    /// Rebuilds the model. Groups absent from the file keep their seeded
    /// initialization; inference groups are required.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = Model::new(self.config.clone(), self.seed)?;
        for g in ParamGroup::ALL {
            if g.is_inference() && !self.groups.contains_key(g.name()) {
                return Err(Error::Checkpoint(format!("missing required group {}", g.name())));
            }
        }
        for (group, tensors) in &self.groups {
            let group: ParamGroup = group.parse()?;
            if tensors.len() != model.params.count_tensors(group) {
                return Err(Error::Checkpoint(format!("group {group} has {} tensors, expected {}", tensors.len(), model.params.count_tensors(group))));
            }
            for t in tensors {
                let id = model.params.find(&t.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
                let p = model.params.get_mut(id);
                if p.group != group {
                    return Err(Error::Checkpoint(format!("tensor {} filed under {group}", t.name)));
                }
                let shape = (p.value.nrows(), p.value.ncols());
                if shape != (t.shape[0], t.shape[1]) || t.data.len() != shape.0 * shape.1 {
                    return Err(Error::Shape { expected: format!("{} {shape:?}", t.name), actual: format!("{:?}", t.shape) });
                }
                p.value = Array2::from_shape_vec(shape, t.data.clone()).expect("length checked");
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
