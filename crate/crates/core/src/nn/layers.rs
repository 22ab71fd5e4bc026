//! Parameterized layers bound to a [`ParameterStore`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::act::{relu, relu_backward};
use super::conv::{conv2d, conv2d_backward, ConvCache, ConvSpec};
use super::norm::{batchnorm2d, batchnorm2d_backward, BatchStats, BnCache, Mode, BN_EPS, BN_MOMENTUM};
use super::params::{Group, ParamId, ParamKind, ParameterStore};
use crate::error::Result;
use crate::tensor::Tensor4;

/// Forward-pass context: mode plus running-stat updates collected in train
/// mode. The store is only read during forward; call [`Ctx::commit`] to apply
/// the collected statistics.
#[derive(Debug)]
pub struct Ctx {
    pub mode: Mode,
    stats: Vec<(ParamId, ParamId, BatchStats)>,
}

impl Ctx {
    pub fn train() -> Self {
        Self { mode: Mode::Train, stats: Vec::new() }
    }

    pub fn eval() -> Self {
        Self { mode: Mode::Eval, stats: Vec::new() }
    }

    pub fn new(mode: Mode) -> Self {
        Self { mode, stats: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn commit(self, store: &mut ParameterStore) {
        for (mean, var, s) in self.stats {
            let mut m = store.value(mean).to_vec();
            let mut v = store.value(var).to_vec();
            s.apply(&mut m, &mut v, BN_MOMENTUM);
            store.set_value(mean, &m);
            store.set_value(var, &v);
        }
    }
}

fn kaiming(spec: &ConvSpec, rng: &mut impl Rng) -> Vec<f64> {
    let fan_in = (spec.in_ch * spec.kernel * spec.kernel) as f64;
    let std = libm::sqrt(2.0 / fan_in);
    (0..spec.weight_len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new(store: &mut ParameterStore, name: &str, spec: ConvSpec, group: Group, rng: &mut impl Rng) -> Self {
        let k = spec.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[spec.out_ch, spec.in_ch, k, k],
            group,
            ParamKind::Trainable,
            kaiming(&spec, rng),
        );
        let bias = spec.bias.then(|| {
            store.add(format!("{name}.bias"), &[spec.out_ch], group, ParamKind::Trainable, vec![0.0; spec.out_ch])
        });
        Self { spec, weight, bias }
    }

    /// Re-initializes an output layer: weights scaled by `gain` relative to
    /// the ReLU-gain init, and the given bias.
    pub fn init_output(&self, store: &mut ParameterStore, gain: f64, bias: &[f64]) {
        let w: Vec<f64> = store.value(self.weight).iter().map(|v| v * gain).collect();
        store.set_value(self.weight, &w);
        if let Some(b) = self.bias {
            store.set_value(b, bias);
        }
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor4, ctx: &Ctx) -> Result<(Tensor4, Option<ConvCache>)> {
        conv2d(
            x,
            &self.spec,
            store.value(self.weight),
            self.bias.map(|b| store.value(b)),
            ctx.is_train(),
        )
    }

    pub fn backward(
        &self,
        store: &mut ParameterStore,
        dy: &Tensor4,
        cache: &ConvCache,
        need_input_grad: bool,
    ) -> Result<Option<Tensor4>> {
        if let Some(b) = self.bias {
            let gb = store.grad_mut(b);
            for (co, g) in gb.iter_mut().enumerate() {
                *g += (0..dy.n()).map(|n| dy.plane(n, co).iter().sum::<f64>()).sum::<f64>();
            }
        }
        let (w, gw) = store.value_and_grad_mut(self.weight);
        conv2d_backward(dy, cache, &self.spec, w, gw, None, need_input_grad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParameterStore, name: &str, channels: usize, group: Group) -> Self {
        let c = channels;
        Self {
            gamma: store.add(format!("{name}.gamma"), &[c], group, ParamKind::Trainable, vec![1.0; c]),
            beta: store.add(format!("{name}.beta"), &[c], group, ParamKind::Trainable, vec![0.0; c]),
            running_mean: store.add(format!("{name}.running_mean"), &[c], group, ParamKind::RunningStat, vec![0.0; c]),
            running_var: store.add(format!("{name}.running_var"), &[c], group, ParamKind::RunningStat, vec![1.0; c]),
        }
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor4, ctx: &mut Ctx) -> Result<(Tensor4, BnCache)> {
        let (y, cache, stats) = batchnorm2d(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            store.value(self.running_mean),
            store.value(self.running_var),
            ctx.mode,
            BN_EPS,
        )?;
        if let Some(s) = stats {
            ctx.stats.push((self.running_mean, self.running_var, s));
        }
        Ok((y, cache))
    }

    pub fn backward(&self, store: &mut ParameterStore, dy: &Tensor4, cache: &BnCache) -> Result<Tensor4> {
        let mut gbeta = vec![0.0; dy.c()];
        let dx = {
            let (gamma, ggamma) = store.value_and_grad_mut(self.gamma);
            batchnorm2d_backward(dy, cache, gamma, ggamma, &mut gbeta)?
        };
        for (g, d) in store.grad_mut(self.beta).iter_mut().zip(&gbeta) {
            *g += d;
        }
        Ok(dx)
    }
}

/// Convolution without bias, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct Cbr {
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct CbrCache {
    conv: ConvCache,
    bn: BnCache,
    out: Tensor4,
}

impl Cbr {
    pub fn new(store: &mut ParameterStore, name: &str, spec: ConvSpec, group: Group, rng: &mut impl Rng) -> Self {
        let spec = ConvSpec { bias: false, ..spec };
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), spec, group, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), spec.out_ch, group),
        }
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor4, ctx: &mut Ctx) -> Result<(Tensor4, Option<CbrCache>)> {
        let (c, conv_cache) = self.conv.forward(store, x, ctx)?;
        let (b, bn_cache) = self.bn.forward(store, &c, ctx)?;
        let out = relu(&b);
        let cache = conv_cache.map(|conv| CbrCache {
            conv,
            bn: bn_cache,
            out: out.clone(),
        });
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        store: &mut ParameterStore,
        dy: &Tensor4,
        cache: &CbrCache,
        need_input_grad: bool,
    ) -> Result<Option<Tensor4>> {
        let d = relu_backward(dy, &cache.out);
        let d = self.bn.backward(store, &d, &cache.bn)?;
        self.conv.backward(store, &d, &cache.conv, need_input_grad)
    }
}
