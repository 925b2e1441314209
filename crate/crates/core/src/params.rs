//! Named parameter storage and checkpoints.
//!
//! Modules hold [`ParamId`]s; a forward pass binds the whole store onto a
//! [`Tape`] and looks parameters up through the returned [`Binding`].
//!
//! A checkpoint directory holds one `TNS1` file per parameter and a
//! `manifest.txt` whose lines read `name file B,C,H,W` in registration order.

use std::fmt::Write as _;
use std::fs;
use std::ops::Index;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tns, write_tns};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

pub const MANIFEST: &str = "manifest.txt";

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Pushes every parameter as a differentiable leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.param(t.cast())).collect(),
        }
    }

    /// Pushes every parameter as a constant leaf (no gradients).
    pub fn bind_constants<T: Scalar>(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.constant(t.cast())).collect(),
        }
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            let file = format!("p{i:04}.tns");
            write_tns(dir.join(&file), t)?;
            let [b, c, h, w] = t.shape().0;
            writeln!(manifest, "{name} {file} {b},{c},{h},{w}").unwrap();
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Reads a checkpoint written by [`ParamStore::save_checkpoint`].
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: usize, msg: &str| Error::Format {
            path: path.clone(),
            msg: format!("line {line}: {msg}"),
        };
        let mut store = ParamStore::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, file, dims] = parts[..] else {
                return Err(bad(i + 1, "expected `name file B,C,H,W`"));
            };
            let dims: Vec<usize> = dims
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i + 1, "bad shape"))?;
            let [b, c, h, w] = dims[..] else {
                return Err(bad(i + 1, "shape needs four extents"));
            };
            let t = read_tns(dir.join(file))?;
            if t.shape() != Shape::new(b, c, h, w) {
                return Err(bad(i + 1, "tensor file shape disagrees with manifest"));
            }
            store.add(name, t.cast());
        }
        Ok(store)
    }

    /// Copies values from `other` by name; shapes must agree and every name must exist.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Usage(format!(
                "checkpoint holds {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        for (name, t) in other.names.iter().zip(&other.tensors) {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Usage(format!("unknown parameter {name} in checkpoint")))?;
            self.set(id, t.clone())?;
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, in store order.
    pub fn collect<S: Scalar>(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join(format!("fmamba-ckpt-{}", std::process::id()));
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::from_fn(Shape::new(2, 3, 1, 1), |b, c, _, _| (b * 3 + c) as f32));
        store.add("a.b", Tensor::channel_vector(&[0.5, -0.25]));
        store.save_checkpoint(&dir).unwrap();
        let manifest = fs::read_to_string(dir.join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().next().unwrap(), "a.w p0000.tns 2,3,1,1");
        let back = ParamStore::<f32>::load_checkpoint(&dir).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.name(ParamId(1)), "a.b");
        assert_eq!(back.get(ParamId(0)), store.get(ParamId(0)));
        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a.w", Tensor::zeros(Shape::new(2, 3, 1, 1)));
        fresh.add("a.b", Tensor::zeros(Shape::new(1, 2, 1, 1)));
        fresh.load_from(&back).unwrap();
        assert_eq!(fresh.get(ParamId(1)).data(), &[0.5, -0.25]);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(store.set(id, Tensor::zeros(Shape::new(1, 3, 1, 1))).is_err());
    }
}
