//! Named parameter storage with a fixed partition into training groups.

use std::fmt;
use std::str::FromStr;

use frest_autograd::{Gradients, Graph, Mat, Var};
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Strainer,
    Projection,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::Strainer,
        ParamGroup::Projection,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Strainer => "strainer",
            ParamGroup::Projection => "projection",
            ParamGroup::Discriminator => "discriminator",
        }
    }

    /// Groups needed at inference time.
    pub fn is_inference(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::Decoder)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(move |(_, p)| p.group == group).map(|(id, _)| id)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar parameters in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Number of tensors in `group`.
    pub fn count_tensors(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).count()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Exact equality of every parameter in `group` against `other`.
    pub fn group_bits_eq(&self, other: &ParamStore, group: ParamGroup) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .filter(|(a, _)| a.group == group)
                .all(|(a, b)| {
                    a.value.len() == b.value.len()
                        && a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Which groups receive gradient when bound into a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask(0);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupMask(groups.iter().fold(0, |m, g| m | (1 << *g as u8)))
    }

    pub fn all() -> Self {
        Self::of(&ParamGroup::ALL)
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & (1 << group as u8) != 0
    }
}

/// A graph plus lazy bindings from parameters to graph leaves.
///
/// Parameters are bound on first use, so a parameter that the forward pass
/// never touches has no leaf on the tape at all.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: GroupMask,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: GroupMask) -> Self {
        Session { graph: Graph::new(), store, bound: vec![None; store.len()], trainable }
    }

    /// Session where nothing receives gradient.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, GroupMask::NONE)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.trainable.contains(p.group) {
            self.graph.variable(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Groups with at least one parameter on the tape.
    pub fn bound_groups(&self) -> Vec<ParamGroup> {
        let mut groups: Vec<ParamGroup> = self
            .bound
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| self.store.params[i].group)
            .collect();
        groups.sort();
        groups.dedup();
        groups
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient for every parameter. Unbound or frozen parameters get `None`.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Mat>> {
        self.bound.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}
