//! Named parameter collections with group tags, tape binding, and the
//! checkpoint directory format (named BYAT tensors + a JSON manifest).

use std::collections::HashMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Ownership group of a parameter, the unit at which training stages freeze
/// and unfreeze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    DitBase,
    TextEmbed,
    FaceEncoder,
    AudioEncoder,
    FaceCrossAttn,
    AudioCrossAttn,
    Lora,
    Router,
}

pub const ALL_GROUPS: [ParamGroup; 8] = [
    ParamGroup::DitBase,
    ParamGroup::TextEmbed,
    ParamGroup::FaceEncoder,
    ParamGroup::AudioEncoder,
    ParamGroup::FaceCrossAttn,
    ParamGroup::AudioCrossAttn,
    ParamGroup::Lora,
    ParamGroup::Router,
];

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Insertion-ordered parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: Vec<f64>) -> usize {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            value,
        });
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.idx(name)]
    }

    pub fn by_idx(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.params[idx].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Indices of all parameters in one group, in insertion order.
    pub fn group_indices(&self, group: ParamGroup) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// Bind every parameter into a tape. Trainable parameters become
    /// gradient-carrying leaves; the rest become constants, which prunes
    /// their gradient paths entirely.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&Param) -> bool) -> TapeBinding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p) {
                    g.param(&p.shape, &p.value)
                } else {
                    g.constant(&p.shape, &p.value)
                }
            })
            .collect();
        TapeBinding { vars }
    }

    /// Save all parameters as `tensors/<name>.byat` (f32) plus
    /// `params.json` manifest rows `{name, shape, group, frozen}`.
    pub fn save(&self, dir: &Path, stage: u32, frozen: &dyn Fn(&Param) -> bool) -> Result<()> {
        let tensors = dir.join("tensors");
        std::fs::create_dir_all(&tensors)?;
        let mut rows = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let data: Vec<f32> = p.value.iter().map(|&v| v as f32).collect();
            let t = Tensor::from_f32(p.shape.clone(), data)?;
            write_tensor(&t, &tensors.join(format!("{}.byat", p.name)))?;
            rows.push(ManifestRow {
                name: p.name.clone(),
                shape: p.shape.clone(),
                group: p.group,
                frozen: frozen(p),
            });
        }
        let manifest = CheckpointManifest {
            version: 1,
            stage,
            params: rows,
        };
        std::fs::write(
            dir.join("params.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Load a checkpoint saved by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<(Self, u32)> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("params.json"))?)?;
        let mut store = ParamStore::new();
        for row in &manifest.params {
            let t = read_tensor(&dir.join("tensors").join(format!("{}.byat", row.name)))?;
            if t.shape() != row.shape.as_slice() {
                return Err(Error::format(format!(
                    "checkpoint tensor {} has shape {:?}, manifest says {:?}",
                    row.name,
                    t.shape(),
                    row.shape
                )));
            }
            let value: Vec<f64> = t.as_f32()?.iter().map(|&v| f64::from(v)).collect();
            store.add(&row.name, row.group, &row.shape, value);
        }
        Ok((store, manifest.stage))
    }
}

/// Handle set produced by [`ParamStore::bind`].
pub struct TapeBinding {
    vars: Vec<Var>,
}

impl TapeBinding {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    stage: u32,
    params: Vec<ManifestRow>,
}

/// Xavier-uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, count: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-limit..limit)).collect()
}

pub fn zeros(count: usize) -> Vec<f64> {
    vec![0.0; count]
}

pub fn ones(count: usize) -> Vec<f64> {
    vec![1.0; count]
}

/// Small-scale normal initialization for embeddings.
pub fn normal_init(rng: &mut ChaCha8Rng, std: f64, count: usize) -> Vec<f64> {
    // Box-Muller on the ChaCha stream keeps the draw order stable.
    (0..count)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_preserves_values_and_order() {
        let mut store = ParamStore::new();
        store.add("a.w", ParamGroup::DitBase, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        store.add("b.w", ParamGroup::Router, &[2], vec![-0.5, 0.25]);
        let dir = tempfile::tempdir().unwrap();
        store
            .save(dir.path(), 2, &|p| p.group == ParamGroup::DitBase)
            .unwrap();
        let (loaded, stage) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(stage, 2);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("a.w").value, store.get("a.w").value);
        assert_eq!(loaded.by_idx(1).name, "b.w");

        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("params.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["params"][0]["frozen"], true);
        assert_eq!(manifest["params"][1]["frozen"], false);
    }

    #[test]
    fn binding_marks_only_trainable_params() {
        let mut store = ParamStore::new();
        store.add("x", ParamGroup::Router, &[2], vec![1.0, 2.0]);
        store.add("y", ParamGroup::DitBase, &[2], vec![3.0, 4.0]);
        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|p| p.group == ParamGroup::Router);
        let x = binding.var(store.idx("x"));
        let y = binding.var(store.idx("y"));
        let s = g.add(x, y);
        let sq = g.mul(s, s);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_some());
        assert!(grads.get(y).is_none());
    }
}
