//! Named learnable arrays and their binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";

/// All learnable arrays of a model, keyed by dotted path. Iteration order is
/// the sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::invalid(format!("duplicate parameter path {path}")));
        }
        self.entries.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// First path (in sorted order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Plain-text ledger: one `path shape count` line per entry, then the
    /// total.
    pub fn ledger(&self) -> String {
        let mut s = String::new();
        for (path, t) in &self.entries {
            let shape = t
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            writeln!(s, "{path}\t{shape}\t{}", t.numel()).unwrap();
        }
        writeln!(s, "total\t\t{}", self.count()).unwrap();
        s
    }

    /// Binary checkpoint: `EVCK`, entry count, then per entry the path, the
    /// extents and the little-endian `f64` data.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (path, t) in &self.entries {
            w.write_u32::<LittleEndian>(path.len() as u32)?;
            w.write_all(path.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let n = r.read_u32::<LittleEndian>()?;
        let mut params = ModelParams::new();
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::invalid(e.to_string()))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        Ok(params)
    }

    /// Checks that `other` has exactly the same paths and shapes.
    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        for (path, t) in &self.entries {
            match other.get(path) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::shape(format!(
                        "{path}: expected {:?}, checkpoint has {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("checkpoint lacks {path}"))),
            }
        }
        if other.len() != self.len() {
            return Err(Error::invalid("checkpoint has extra parameters".to_string()));
        }
        Ok(())
    }
}

/// Registers parameters with deterministic initial values.
pub struct ParamInit<'a> {
    params: &'a mut ModelParams,
    rng: ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(params: &'a mut ModelParams, seed: u64) -> Self {
        Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `uniform(±1/√fan_in)`.
    pub fn uniform(&mut self, path: &str, shape: &[usize], fan_in: usize) -> String {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, bound, &mut self.rng);
        self.set(path, t)
    }

    pub fn uniform_range(&mut self, path: &str, shape: &[usize], lo: f64, hi: f64) -> String {
        use rand::Rng;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
        self.set(path, t)
    }

    /// `ln(U(lo, hi))`, for parameters used through `exp`.
    pub fn log_uniform(&mut self, path: &str, shape: &[usize], lo: f64, hi: f64) -> String {
        use rand::Rng;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(lo..hi).ln());
        self.set(path, t)
    }

    pub fn zeros(&mut self, path: &str, shape: &[usize]) -> String {
        self.set(path, Tensor::zeros(shape))
    }

    pub fn full(&mut self, path: &str, shape: &[usize], v: f64) -> String {
        self.set(path, Tensor::full(shape, v))
    }

    pub fn set(&mut self, path: &str, value: Tensor) -> String {
        self.params
            .insert(path, value)
            .unwrap_or_else(|e| panic!("model construction: {e}"));
        path.to_string()
    }
}

/// Joins path segments with dots, skipping empty ones.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A tape with model parameters bound lazily as leaves.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ModelParams,
    bound: RefCell<BTreeMap<String, usize>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    /// Parameters become differentiable leaves.
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    /// Parameters become constants; nothing is differentiable.
    pub fn inference(params: &'p ModelParams) -> Self {
        Self {
            trainable: false,
            ..Self::new(params)
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    /// The bound variable for `path`. Panics on an unknown path, which is a
    /// model-construction bug.
    pub fn param(&self, path: &str) -> Var<'_> {
        if let Some(&id) = self.bound.borrow().get(path) {
            return Var {
                tape: &self.tape,
                id,
            };
        }
        let value = self
            .params
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter {path}"))
            .clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(path.to_string(), v.id);
        v
    }

    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.tape.constant(value)
    }

    /// Gradients for every parameter the graph touched. Untouched
    /// parameters are absent.
    pub fn backward(&self, root: Var<'_>) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(root)?;
        Ok(self
            .bound
            .borrow()
            .iter()
            .map(|(path, &id)| {
                let v = Var {
                    tape: &self.tape,
                    id,
                };
                (path.clone(), grads.get_or_zeros(v))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut p = ModelParams::new();
        p.insert("a.b", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a.b", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn iteration_is_sorted() {
        let mut p = ModelParams::new();
        for n in ["z", "a.c", "a.b", "m"] {
            p.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, ["a.b", "a.c", "m", "z"]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModelParams::new();
        let mut init = ParamInit::new(&mut p, 1);
        init.uniform("x.w", &[3, 4], 4);
        init.zeros("x.b", &[3]);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ModelParams::read_from(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::read_from(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn graph_binds_once() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::scalar(3.0)).unwrap();
        let g = Graph::new(&p);
        let a = g.param("w");
        let b = g.param("w");
        let grads = g.backward(a.mul(b)).unwrap();
        assert_eq!(grads["w"].item(), 6.0);
    }
}
