//! Named parameters, forward sessions, basic layers and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered map from dotted parameter names to tensors.
///
/// Non-trainable entries hold buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Overwrites values by name; every incoming name must exist with the same shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in named {
            let id = self
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            let slot = self.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: stored {:?}, incoming {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Training-mode batch statistics observed by one batch-norm layer.
pub struct BatchStats<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// One forward pass: an autodiff tape plus lazily bound parameters.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn_nodes: Vec<(ParamId, ParamId, Var, usize)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Session { graph: Graph::new(), store, bound: vec![None; store.len()], mode, bn_nodes: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph node for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.mode == Mode::Train && self.store.is_trainable(id) {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Gradients of `loss` for every parameter that took part in the pass.
    pub fn gradients(&self, loss: Var) -> Vec<(ParamId, Tensor<T>)> {
        let mut grads = self.graph.backward(loss);
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect()
    }

    fn record_bn(&mut self, rm: ParamId, rv: ParamId, node: Var, count: usize) {
        self.bn_nodes.push((rm, rv, node, count));
    }

    pub fn batch_stats(&self) -> Vec<BatchStats<T>> {
        self.bn_nodes
            .iter()
            .filter_map(|&(rm, rv, node, count)| {
                self.graph.batch_stats(node).map(|(m, v)| BatchStats {
                    running_mean: rm,
                    running_var: rv,
                    mean: m.to_vec(),
                    var: v.to_vec(),
                    count,
                })
            })
            .collect()
    }
}

/// Folds observed batch statistics into the running estimates (unbiased variance).
pub fn update_running_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[BatchStats<T>], momentum: T) {
    for s in stats {
        let unbias = if s.count > 1 {
            T::from_usize_lossy(s.count) / T::from_usize_lossy(s.count - 1)
        } else {
            T::one()
        };
        for (r, &m) in store.get_mut(s.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = (T::one() - momentum) * *r + momentum * m;
        }
        for (r, &v) in store.get_mut(s.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = (T::one() - momentum) * *r + momentum * v * unbias;
        }
    }
}

/// He-normal initialization for a layer with `fan_in` inputs followed by ReLU.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Stride-1 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding for the given dilation, He-initialized.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let w = he_normal(&[out_channels, in_channels, k, k], in_channels * k * k, rng);
        Self::with_weight(store, name, w, k / 2, 1)
    }

    pub fn with_weight<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: Tensor<T>,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let (out_channels, in_channels, _, _) = weight.dims4();
        let w = store.add(format!("{name}.weight"), weight);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d { weight: w, bias: Some(b), geom: ConvGeom { pad, dilation }, in_channels, out_channels }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = self.bias.map(|b| s.p(b));
        s.graph.conv2d(x, w, b, self.geom)
    }
}

/// Batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            eps: 1e-5,
        }
    }

    /// Uses batch statistics in training mode when more than one value per channel is
    /// available; otherwise the running statistics.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (n, _, h, w) = s.value(x).dims4();
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        let count = n * h * w;
        if s.mode() == Mode::Train && count > 1 {
            let node = s.graph.batch_norm(x, gamma, beta, None, T::of(self.eps));
            s.record_bn(self.running_mean, self.running_var, node, count);
            node
        } else {
            let store = s.store();
            let rm = store.get(self.running_mean).data().to_vec();
            let rv = store.get(self.running_var).data().to_vec();
            s.graph.batch_norm(x, gamma, beta, Some((&rm, &rv)), T::of(self.eps))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam optimizer state (first and second moments per trainable parameter).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adam { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] + wd * p[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let g = store.get(id).map(|v| 2.0 * (v - 1.0));
            adam.update(&mut store, &[(id, g)], 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn session_binds_each_parameter_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 1, &mut rng);
        let mut s = Session::new(&store, Mode::Train);
        let a = s.p(conv.weight);
        let b = s.p(conv.weight);
        assert_eq!(a, b);
        assert_eq!(store.num_trainable(), 2);
    }

    #[test]
    fn batchnorm_running_stats_track_batches() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let stats = {
            let mut s = Session::new(&store, Mode::Train);
            let x = s.input(Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            bn.forward(&mut s, x);
            s.batch_stats()
        };
        update_running_stats(&mut store, &stats, 1.0);
        assert!((store.get(bn.running_mean).data()[0] - 2.5).abs() < 1e-12);
        // Unbiased variance of 1..4.
        assert!((store.get(bn.running_var).data()[0] - 5.0 / 3.0).abs() < 1e-12);
    }
}
