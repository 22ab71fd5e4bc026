use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Aspp,
    Decoder,
    Refiner,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Backbone, Group::Aspp, Group::Decoder, Group::Refiner];

    pub fn index(self) -> usize {
        match self {
            Group::Backbone => 0,
            Group::Aspp => 1,
            Group::Decoder => 2,
            Group::Refiner => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Group> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Aspp => "aspp",
            Group::Decoder => "decoder",
            Group::Refiner => "refiner",
        }
    }
}

/// Trainable weights receive gradients and Adam updates; running statistics
/// are written only by batch-norm bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    RunningStat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub kind: ParamKind,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

/// Per-group learning rates indexed by [`Group::index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates(pub [f64; 4]);

impl GroupRates {
    pub fn get(&self, g: Group) -> f64 {
        self.0[g.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named learnable arrays with gradients and Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Param>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: Group,
        kind: ParamKind,
        value: Vec<f64>,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "parameter value does not match its shape");
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            shape: shape.to_vec(),
            group,
            kind,
            value,
            grad: vec![0.0; len],
            adam_m: vec![0.0; len],
            adam_v: vec![0.0; len],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adam step counter.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    #[inline]
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&[f64], &mut [f64]) {
        let p = &mut self.entries[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn set_value(&mut self, id: ParamId, value: &[f64]) {
        self.entries[id.0].value.copy_from_slice(value);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// One bias-corrected Adam update of every trainable parameter, each with
    /// its group's learning rate. Gradients are zeroed afterwards.
    ///
    /// If any gradient is non-finite, nothing is modified and the offending
    /// parameter is named in the error.
    pub fn adam_step(&mut self, rates: &GroupRates, cfg: &AdamConfig) -> Result<()> {
        if let Some(bad) = self
            .entries
            .iter()
            .find(|p| p.kind == ParamKind::Trainable && p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(bad.name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        for p in &mut self.entries {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let lr = rates.get(p.group);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
                p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.adam_m[i] / bc1;
                let v_hat = p.adam_v[i] / bc2;
                if lr != 0.0 {
                    p.value[i] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
                }
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}
