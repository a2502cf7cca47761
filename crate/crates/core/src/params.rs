//! Named parameter storage split into freezable component groups.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Encoder,
    ImageProj,
    TextProj,
    CrossProj,
    TextEmbed,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Encoder,
        Group::ImageProj,
        Group::TextProj,
        Group::CrossProj,
        Group::TextEmbed,
        Group::Decoder,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::ImageProj => "image_proj",
            Group::TextProj => "text_proj",
            Group::CrossProj => "cross_proj",
            Group::TextEmbed => "text_embed",
            Group::Decoder => "decoder",
        }
    }

    /// Group owning a parameter, read from the name's first dotted segment.
    pub fn of(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGroup {
    pub frozen: bool,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamGroup {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// All model parameters, keyed by dotted name. The first name segment picks
/// the group, so `decoder.block0.attn.wq` belongs to [`Group::Decoder`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerLMParams {
    groups: BTreeMap<Group, ParamGroup>,
}

impl VerLMParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        let group = Group::of(name).ok_or_else(|| Error::Input(format!("parameter {name} has no known group prefix")))?;
        self.groups
            .entry(group)
            .or_default()
            .tensors
            .insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.groups.get(&Group::of(name)?)?.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.groups.get_mut(&Group::of(name)?)?.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Input(format!("missing parameter {name}")))
    }

    pub fn group(&self, g: Group) -> Option<&ParamGroup> {
        self.groups.get(&g)
    }

    pub fn set_frozen(&mut self, g: Group, frozen: bool) {
        if let Some(p) = self.groups.get_mut(&g) {
            p.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.groups.get(&g).is_some_and(|p| p.frozen)
    }

    pub fn unfreeze_all(&mut self) {
        self.groups.values_mut().for_each(|g| g.frozen = false);
    }

    /// Adds N(0, std²) noise to every value. Gradient checks use this to move
    /// off the small-init point where many gradients sit near rounding noise.
    pub fn jitter(&mut self, std: f64, seed: u64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for g in self.groups.values_mut() {
            for t in g.tensors.values_mut() {
                let noise = Tensor::randn(t.shape(), std, &mut rng);
                t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
            }
        }
    }

    /// Every parameter in deterministic (group, name) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.groups.values().flat_map(|g| g.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.groups
            .values_mut()
            .flat_map(|g| g.tensors.iter_mut().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn names(&self) -> Vec<String> {
        self.iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn group_param_count(&self, g: Group) -> usize {
        self.group(g).map_or(0, |p| p.iter().map(|(_, t)| t.len()).sum())
    }

    pub fn zero_grad(&mut self) {
        self.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Adds gradients into `Tensor::grad`. Gradients for frozen groups are
    /// dropped.
    pub fn accumulate(&mut self, grads: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, g) in grads {
            let group = Group::of(name).ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
            if self.is_frozen(group) {
                continue;
            }
            self.get_mut(name)
                .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Bytes of every parameter in a group, for freeze checks.
    pub fn group_fingerprint(&self, g: Group) -> Vec<u64> {
        self.group(g)
            .into_iter()
            .flat_map(|p| p.iter())
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// A graph plus lazily bound parameter leaves.
///
/// Each parameter is recorded once per graph. Parameters in frozen groups,
/// or all parameters when `track_grads` is false, become constant leaves.
pub struct Ctx<'p> {
    pub g: Graph,
    params: &'p VerLMParams,
    bound: BTreeMap<String, Var>,
    track_grads: bool,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p VerLMParams, track_grads: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: BTreeMap::new(),
            track_grads,
        }
    }

    pub fn params(&self) -> &'p VerLMParams {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.require(name)?;
        let group = Group::of(name).expect("stored names carry a group");
        let v = self
            .g
            .leaf_with(t, self.track_grads && !self.params.is_frozen(group));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Backpropagates from `loss` and returns gradients of every bound,
    /// trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Vec<(String, Vec<f64>)>> {
        let grads = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.to_vec())))
            .collect())
    }
}
