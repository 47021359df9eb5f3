use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::tensor::{s, Scalar, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter tensors with gradient buffers and Adam moments.
///
/// Values are shared (`Arc`) with any tape that reads them; updates copy on
/// write if a tape still holds a reference.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    values: Vec<Arc<Tensor2<T>>>,
    grads: Vec<Option<Tensor2<T>>>,
    first_moment: Vec<Tensor2<T>>,
    second_moment: Vec<Tensor2<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.names.len());
        let (r, c) = value.shape();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.grads.push(None);
        self.first_moment.push(Tensor2::zeros(r, c));
        self.second_moment.push(Tensor2::zeros(r, c));
        Ok(id)
    }

    /// Weight matrix drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| s(rng.gen_range(-bound..bound))).collect();
        self.insert(name, Tensor2::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2<T> {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor2<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor2<T>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor2<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn has_grads(&self) -> bool {
        self.grads.iter().any(Option::is_some)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are cleared afterwards. Parameters without a gradient are left as is.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.has_grads() {
            return Err(Error::GradientUnavailable("adam step without any populated gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2): (T, T) = (s(cfg.beta1), s(cfg.beta2));
        let lr: T = s(cfg.lr);
        let eps: T = s(cfg.eps);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for i in 0..self.values.len() {
            let Some(g) = self.grads[i].take() else { continue };
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = Arc::make_mut(&mut self.values[i]).data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *pj -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Same names and values in another precision; gradients and moments
    /// are not carried over.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            out.insert(name.clone(), v.cast::<U>()).expect("names are unique");
        }
        out.step = self.step;
        out
    }

    /// Copies values (not moments) from `other` by name.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!("parameter {name}: {:?} vs {:?}", src.shape(), self.values[i].shape())));
            }
            self.values[i] = Arc::new(src.clone());
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }
}
