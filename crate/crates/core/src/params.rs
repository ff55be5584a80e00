//! Named parameter storage shared by the model, optimiser and checkpoints.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NamedTensor, Tensor, Var};

/// Coarse parameter groups. Freezing is decided per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Patch embedding and 2×2 merger of the visual stream.
    Visual,
    /// Projector that maps the terminal geometric layer onto the visual tokens.
    Anchor,
    /// Per-layer merge projectors for the sampled geometric layers.
    Projectors,
    /// Semantic-gate MLPs and global-gate scalars.
    Gates,
    /// Embeddings, blocks and the answer head.
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Visual,
        ParamGroup::Anchor,
        ParamGroup::Projectors,
        ParamGroup::Gates,
        ParamGroup::Decoder,
    ];

    /// Groups that are computed inside the training graph and can be trained.
    pub const TRAINABLE: [ParamGroup; 3] = [ParamGroup::Projectors, ParamGroup::Gates, ParamGroup::Decoder];
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            group,
            trainable: false,
        });
    }

    /// Mark exactly the parameters in `groups` as trainable.
    pub fn set_trainable(&mut self, groups: &BTreeSet<ParamGroup>) {
        for e in &mut self.entries {
            e.trainable = groups.contains(&e.group);
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::InvalidArgument(format!("unknown parameter {name}"))),
        }
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable || !trainable_only)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Add every parameter to `graph`: trainable ones as differentiable leaves,
    /// the rest as constants.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, true)
    }

    /// Like [`ParamStore::bind`], but with every parameter constant.
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph, grads: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if grads && e.trainable {
                    graph.param(&e.tensor)
                } else {
                    graph.constant(&e.tensor)
                }
            })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Bind frozen parameters as constants and take the trainable ones, in
    /// store order, from `trainable`.
    pub fn bind_substituted(&self, graph: &mut Graph, trainable: &[Var]) -> Result<BoundParams> {
        let want = self.entries.iter().filter(|e| e.trainable).count();
        if trainable.len() != want {
            return Err(Error::InvalidArgument(format!(
                "{} handles for {want} trainable parameters",
                trainable.len()
            )));
        }
        let mut next = trainable.iter();
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    *next.next().expect("counted above")
                } else {
                    graph.constant(&e.tensor)
                }
            })
            .collect();
        Ok(BoundParams {
            vars,
            index: self.index.clone(),
        })
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect()
    }

    /// Overwrite values from a checkpoint. Names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: Vec<NamedTensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, t) in tensors {
            let slot = self.get_mut(&name).map_err(|e| Error::Format(e.to_string()))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a [`ParamStore`], looked up by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Handles in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
