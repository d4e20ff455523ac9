//! Named parameter storage and the per-forward session that binds
//! parameters onto a tape.

use std::collections::HashMap;

use pn_tensor::{BatchNormConfig, Element, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Optimizer group. Convolution and linear weights decay; everything else
/// (norm affine, biases, gates, position tables, statistic weights) does not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Decay,
    NoDecay,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
    /// Sorted gate logits: the trailing `ones` entries start in (0.1, 0.5),
    /// the rest in (-0.5, -0.1).
    Gates { ones: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], group: ParamGroup, init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), group, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
struct Slot<T> {
    spec: ParamSpec,
    value: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct BufferSlot<T> {
    name: String,
    channels: usize,
    stats: Option<RunningStats<T>>,
}

/// One tensor in a checkpoint manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Parameters and batchnorm running statistics, addressed by id and by
/// unique hierarchical name. Declaration is separate from materialization so
/// large configurations can be inspected without allocating weights.
#[derive(Clone, Debug)]
pub struct ParameterStore<T> {
    slots: Vec<Option<Slot<T>>>,
    buffers: Vec<Option<BufferSlot<T>>>,
    names: HashMap<String, ()>,
}

impl<T: Element> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn init_tensor<T: Element>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match spec.init {
        Init::TruncNormal(std) => Tensor::trunc_normal(&spec.shape, std, rng),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::ones(&spec.shape),
        Init::Gates { ones } => {
            let k = spec.numel();
            Tensor::from_fn(&spec.shape, |i| {
                let v = if i + ones >= k { rng.random_range(0.1..0.5) } else { rng.random_range(-0.5..-0.1) };
                T::from_f64_lossy(v)
            })
        }
    }
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { slots: Vec::new(), buffers: Vec::new(), names: HashMap::new() }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.insert(name.to_string(), ()).is_some() {
            return config(format!("duplicate parameter name `{name}`"));
        }
        Ok(())
    }

    pub fn declare(&mut self, spec: ParamSpec) -> Result<ParamId> {
        self.claim(&spec.name)?;
        self.slots.push(Some(Slot { spec, value: None }));
        Ok(ParamId(self.slots.len() - 1))
    }

    /// Declares and immediately sets a parameter.
    pub fn insert(&mut self, spec: ParamSpec, value: Tensor<T>) -> Result<ParamId> {
        if value.shape() != spec.shape.as_slice() {
            return config(format!("`{}` declared {:?}, value {:?}", spec.name, spec.shape, value.shape()));
        }
        self.claim(&spec.name)?;
        self.slots.push(Some(Slot { spec, value: Some(value) }));
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn declare_buffer(&mut self, name: impl Into<String>, channels: usize) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name)?;
        self.buffers.push(Some(BufferSlot { name, channels, stats: None }));
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn remove(&mut self, id: ParamId) {
        if let Some(slot) = self.slots[id.0].take() {
            self.names.remove(&slot.spec.name);
        }
    }

    pub fn remove_buffer(&mut self, id: BufferId) {
        if let Some(slot) = self.buffers[id.0].take() {
            self.names.remove(&slot.name);
        }
    }

    /// Initializes every declared parameter in declaration order.
    pub fn materialize(&mut self, rng: &mut ChaCha8Rng) {
        for slot in self.slots.iter_mut().flatten() {
            if slot.value.is_none() {
                slot.value = Some(init_tensor(&slot.spec, rng));
            }
        }
        for b in self.buffers.iter_mut().flatten() {
            if b.stats.is_none() {
                b.stats = Some(RunningStats { mean: Tensor::zeros(&[b.channels]), var: Tensor::ones(&[b.channels]) });
            }
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.slots.iter().flatten().all(|s| s.value.is_some()) && self.buffers.iter().flatten().all(|b| b.stats.is_some())
    }

    fn slot(&self, id: ParamId) -> &Slot<T> {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    fn slot_mut(&mut self, id: ParamId) -> &mut Slot<T> {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(|s| s.is_some())
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.slot(id).spec
    }

    pub fn numel(&self, id: ParamId) -> usize {
        self.slot(id).spec.numel()
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.slot(id).spec.group
    }

    pub fn try_value(&self, id: ParamId) -> Result<&Tensor<T>> {
        self.slot(id)
            .value
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("parameter `{}` is declared but not materialized", self.spec(id).name)))
    }

    /// Panics if the store was never materialized.
    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.try_value(id).expect("parameter store not materialized")
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.slot_mut(id).value.as_mut().expect("parameter store not materialized")
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = self.slot_mut(id);
        if value.shape() != slot.spec.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name: slot.spec.name.clone(),
                expected: slot.spec.shape.clone(),
                found: value.shape().to_vec(),
            });
        }
        slot.value = Some(value);
        Ok(())
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].as_ref().expect("buffer was removed").name
    }

    pub fn stats(&self, id: BufferId) -> &RunningStats<T> {
        self.buffers[id.0].as_ref().and_then(|b| b.stats.as_ref()).expect("buffer not materialized")
    }

    pub fn stats_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        self.buffers[id.0].as_mut().and_then(|b| b.stats.as_mut()).expect("buffer not materialized")
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| ParamId(i))
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> + '_ {
        self.buffers.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| BufferId(i))
    }

    /// Upper bound (exclusive) on raw parameter ids, tombstones included.
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.ids().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Learnable scalar count; running statistics excluded.
    pub fn num_params(&self) -> usize {
        self.slots.iter().flatten().map(|s| s.spec.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.ids().find(|&id| self.spec(id).name == name)
    }

    /// Parameters then running statistics, in declaration order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out: Vec<ManifestEntry> =
            self.slots.iter().flatten().map(|s| ManifestEntry { name: s.spec.name.clone(), shape: s.spec.shape.clone() }).collect();
        for b in self.buffers.iter().flatten() {
            for suffix in ["running_mean", "running_var"] {
                out.push(ManifestEntry { name: format!("{}.{suffix}", b.name), shape: vec![b.channels] });
            }
        }
        out
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.ids().map(|id| self.value(id)).collect();
        for id in self.buffer_ids() {
            let s = self.stats(id);
            out.push(&s.mean);
            out.push(&s.var);
        }
        out
    }

    /// Replaces every tensor from `values`, given in manifest order.
    pub fn assign_all(&mut self, mut values: Vec<Tensor<T>>) -> Result<()> {
        let manifest = self.manifest();
        if values.len() != manifest.len() {
            return Err(Error::CorruptCheckpoint(format!("{} tensors for a manifest of {}", values.len(), manifest.len())));
        }
        for (e, v) in manifest.iter().zip(&values) {
            if v.shape() != e.shape.as_slice() {
                return Err(Error::ShapeMismatch { name: e.name.clone(), expected: e.shape.clone(), found: v.shape().to_vec() });
            }
        }
        let ids: Vec<ParamId> = self.ids().collect();
        let bufs: Vec<BufferId> = self.buffer_ids().collect();
        let mut it = values.drain(..);
        for id in ids {
            self.slot_mut(id).value = it.next();
        }
        for id in bufs {
            let mean = it.next().expect("length checked");
            let var = it.next().expect("length checked");
            self.buffers[id.0].as_mut().expect("live buffer").stats = Some(RunningStats { mean, var });
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore {
            slots: self
                .slots
                .iter()
                .map(|s| s.as_ref().map(|s| Slot { spec: s.spec.clone(), value: s.value.as_ref().map(|v| v.cast()) }))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| {
                    b.as_ref().map(|b| BufferSlot {
                        name: b.name.clone(),
                        channels: b.channels,
                        stats: b.stats.as_ref().map(|s| RunningStats { mean: s.mean.cast(), var: s.var.cast() }),
                    })
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
///
/// Parameters are bound as gradient-tracking leaves only when `track` is set.
pub struct Session<'s, T: Element> {
    pub tape: Tape<T>,
    store: &'s mut ParameterStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track: bool,
    rng: ChaCha8Rng,
}

impl<'s, T: Element> Session<'s, T> {
    pub fn new(store: &'s mut ParameterStore<T>, mode: Mode, track: bool, seed: u64) -> Self {
        let n = store.capacity();
        Session { tape: Tape::new(), store, bound: vec![None; n], mode, track, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let value = self.store.try_value(id)?.clone();
        let v = self.tape.leaf(value, self.track)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Batchnorm over all channels of `x`, updating running statistics in
    /// training mode.
    pub fn batchnorm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: BufferId) -> Result<Var> {
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        let cfg = BatchNormConfig { eps: BN_EPS, momentum: BN_MOMENTUM, training: self.training() };
        Ok(self.tape.batchnorm2d(x, g, b, self.store.stats_mut(stats), cfg)?)
    }

    /// Batchnorm using channels `[start, start + len)` of the layer's
    /// affine and statistics.
    pub fn batchnorm_slice(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        stats: BufferId,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let full = self.store.stats(stats).mean.numel();
        if start == 0 && len == full {
            return self.batchnorm(x, gamma, beta, stats);
        }
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        let g = self.tape.narrow(g, 0, start, len)?;
        let b = self.tape.narrow(b, 0, start, len)?;
        let rs = self.store.stats(stats);
        let mut sub = RunningStats { mean: slice1d(&rs.mean, start, len), var: slice1d(&rs.var, start, len) };
        let cfg = BatchNormConfig { eps: BN_EPS, momentum: BN_MOMENTUM, training: self.training() };
        let y = self.tape.batchnorm2d(x, g, b, &mut sub, cfg)?;
        let rs = self.store.stats_mut(stats);
        rs.mean.data_mut()[start..start + len].copy_from_slice(sub.mean.data());
        rs.var.data_mut()[start..start + len].copy_from_slice(sub.var.data());
        Ok(y)
    }

    /// `(id, var)` for every parameter touched by this pass, by id.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v))).collect()
    }
}

fn slice1d<T: Element>(t: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    Tensor::new(&[len], t.data()[start..start + len].to_vec()).expect("slice length matches")
}
