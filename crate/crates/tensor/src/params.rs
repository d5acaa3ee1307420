//! Named parameter storage and per-step graph sessions.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    decay: bool,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`, with `fan_in` the first axis.
    FanIn,
}

/// 64-bit FNV-1a followed by a splitmix64 finaliser.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Rank-≥2 tensors receive weight decay.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let decay = tensor.shape().len() >= 2;
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor: tensor.with_requires_grad(true),
            decay,
        });
        Ok(ParamId(id))
    }

    /// Registers a freshly initialised tensor. The random stream depends only
    /// on `(seed, name)`, so adding or removing other parameters never changes
    /// this one's initial value.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::FanIn => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1) as f64;
                let bound = 1.0 / fan_in.sqrt();
                let dist = rand_distr::Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Copies values for every name present in both stores. Returns the
    /// number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(&j) = other.by_name.get(&e.name) {
                let src = &other.entries[j].tensor;
                if src.shape() != e.tensor.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "load_matching",
                        lhs: e.tensor.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                e.tensor.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Overwrites the value of `name`, checking the shape.
    pub fn set_value(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let t = &mut self.entries[id.0].tensor;
        if t.shape() != shape || data.len() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn apply_grads(&mut self, grads: ParamGrads) -> Result<()> {
        for (e, g) in self.entries.iter_mut().zip(grads.0) {
            match g {
                Some(g) => e.tensor.set_grad(g)?,
                None => e.tensor.clear_grad(),
            }
        }
        Ok(())
    }
}

/// Gradients for the parameters of one store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are bound lazily, so only those the forward pass touches
/// appear on the tape. A frozen session binds them as constants.
pub struct Session<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    frozen: Vec<bool>,
    track: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            frozen: vec![false; store.len()],
            track: true,
        }
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    /// Tracking session in which every parameter matching `frozen` is bound
    /// as a constant and therefore never receives a gradient.
    pub fn with_frozen(store: &'s ParamStore, frozen: impl Fn(&str) -> bool) -> Self {
        let mut s = Self::new(store);
        for id in store.ids() {
            s.frozen[id.0] = frozen(store.name(id));
        }
        s
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.track && !self.frozen[id.0] {
            self.tape
                .variable(t.shape(), t.data().to_vec())
                .expect("stored tensor is consistent")
        } else {
            self.tape
                .constant(t.shape(), t.data().to_vec())
                .expect("stored tensor is consistent")
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn backward(self, loss: Var) -> Result<ParamGrads> {
        let bound = self.bound;
        let mut grads = self.tape.backward(loss)?;
        Ok(ParamGrads(
            bound
                .into_iter()
                .map(|b| b.and_then(|v| grads.take(v)))
                .collect(),
        ))
    }
}

impl Deref for Session<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::new();
        a.init("x", &[3, 2], Init::Normal(1.0), 7).unwrap();
        let ya = a.init("y", &[4], Init::Normal(1.0), 7).unwrap();
        let mut b = ParamStore::new();
        let yb = b.init("y", &[4], Init::Normal(1.0), 7).unwrap();
        assert_eq!(a.get(ya).data(), b.get(yb).data());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.init("w", &[2], Init::Zeros, 0).unwrap();
        assert!(matches!(
            s.init("w", &[2], Init::Zeros, 0),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn partially_frozen_session() {
        let mut s = ParamStore::new();
        let a = s.init("teacher.w", &[2], Init::Ones, 0).unwrap();
        let b = s.init("student.w", &[2], Init::Ones, 0).unwrap();
        let mut sess = Session::with_frozen(&s, |n| n.starts_with("teacher."));
        let va = sess.param(a);
        let vb = sess.param(b);
        let p = sess.mul(va, vb).unwrap();
        let l = sess.sum(p);
        let g = sess.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_session_produces_no_grads() {
        let mut s = ParamStore::new();
        let w = s.init("w", &[2], Init::Ones, 0).unwrap();
        let mut sess = Session::frozen(&s);
        let v = sess.param(w);
        let l = sess.sum(v);
        let g = sess.backward(l).unwrap();
        assert!(g.get(w).is_none());
    }
}
