//! Named parameter storage and its on-disk layout.
//!
//! Weights persist as a directory holding one `.aspt` file per tensor plus a
//! `manifest.json` that lists names, files and shapes in registration order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    format: String,
    version: u32,
    tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    pub fn save(&self, dir: impl AsRef<Path>, config: Option<serde_json::Value>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::with_capacity(self.len());
        for (k, (name, value)) in self.iter().enumerate() {
            let file = format!("{k:04}_{}.aspt", name.replace(['/', '.'], "_"));
            value.save(dir.join(&file))?;
            tensors.push(ManifestEntry { name: name.to_string(), file, shape: value.shape().to_vec() });
        }
        let manifest =
            WeightsManifest { format: "aspan-weights".into(), version: 1, tensors, config };
        fs::write(dir.join(WEIGHTS_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a weights directory; also returns the embedded config, if any.
    pub fn load(dir: impl AsRef<Path>) -> Result<(ParamStore, Option<serde_json::Value>)> {
        let dir = dir.as_ref();
        let manifest: WeightsManifest =
            serde_json::from_slice(&fs::read(dir.join(WEIGHTS_MANIFEST))?)?;
        if manifest.format != "aspan-weights" || manifest.version != 1 {
            return Err(Error::Format(format!(
                "unsupported weights manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut store = ParamStore::new();
        for entry in manifest.tensors {
            let t = Tensor::load(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "{} has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            store.insert(&entry.name, t)?;
        }
        Ok((store, manifest.config))
    }
}

/// Parameters placed on a tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// How a [`ParamBuilder`] obtains tensors.
enum Source<'a, R: Rng> {
    Init(&'a mut R),
    Existing,
}

/// Declares parameters by name, either drawing fresh values or validating
/// against an existing store.
pub struct ParamBuilder<'a, R: Rng> {
    store: ParamStore,
    source: Source<'a, R>,
    prefix: Vec<String>,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn fresh(rng: &'a mut R) -> Self {
        ParamBuilder { store: ParamStore::new(), source: Source::Init(rng), prefix: Vec::new() }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    fn declare(&mut self, name: &str, shape: &[usize], init: impl FnOnce(&mut R) -> Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        match &mut self.source {
            Source::Init(rng) => {
                let t = init(rng);
                self.store.insert(&full, t)
            }
            Source::Existing => {
                let id = self
                    .store
                    .id(&full)
                    .ok_or_else(|| Error::Config(format!("weights lack parameter {full}")))?;
                if self.store.get(id).shape() != shape {
                    return Err(Error::Config(format!(
                        "parameter {full} has shape {:?}, model expects {shape:?}",
                        self.store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        self.declare(name, shape, |rng| {
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        })
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.declare(name, shape, |_| Tensor::full(shape, value))
    }
}

impl ParamBuilder<'static, rand_chacha::ChaCha8Rng> {
    /// Resolves declarations against `store` instead of drawing values.
    pub fn existing(store: ParamStore) -> Self {
        ParamBuilder { store, source: Source::Existing, prefix: Vec::new() }
    }
}
