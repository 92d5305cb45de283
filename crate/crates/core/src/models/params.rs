use crate::numerics::{Gradients, Rng, Tape, Tensor, Var};
use crate::{ensure, Error, Result};

/// Which part of a model a parameter belongs to. Update actions and the
/// optimizer select parameters by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Never trained (embeddings copied from the target into the drafter).
    Frozen,
    Trunk,
    LmHead,
    RankHead,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Frozen => "frozen",
            ParamGroup::Trunk => "trunk",
            ParamGroup::LmHead => "lm_head",
            ParamGroup::RankHead => "rank_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "frozen" => ParamGroup::Frozen,
            "trunk" => ParamGroup::Trunk,
            "lm_head" => ParamGroup::LmHead,
            "rank_head" => ParamGroup::RankHead,
            other => return Err(Error::Checkpoint(format!("unknown parameter group {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian initialization scaled by `std`, rounded to `f32` so that the
    /// initial state survives a checkpoint round trip unchanged.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (rng.normal() * std) as f32 as f64).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn snap_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.snap_to_f32();
        }
    }

    /// Copies every tensor from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        ensure!(self.names == other.names, "parameter layouts differ");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            ensure!(dst.shape() == src.shape(), "parameter shapes differ");
            *dst = src.clone();
        }
        Ok(())
    }

    /// Replaces the tensor of an existing parameter by name, checking shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        ensure!(
            self.tensors[id.0].shape() == tensor.shape(),
            "parameter {name:?} has shape {:?}, got {:?}",
            self.tensors[id.0].shape(),
            tensor.shape()
        );
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Places every parameter on the tape. Parameters whose group passes
    /// `trainable` become gradient leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.groups)
            .map(|(t, &g)| tape.leaf(t.clone(), trainable(g)))
            .collect();
        Bound { vars }
    }

    /// Binds everything as constants (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamGroup, &Tensor)> {
        self.ids().map(move |id| (id, self.name(id), self.group(id), self.get(id)))
    }
}

/// Tape handles for a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zero for those that were bound as
    /// constants.
    pub fn collect_grads(&self, params: &ParamSet, grads: &Gradients) -> Vec<Tensor> {
        params
            .ids()
            .map(|id| {
                grads
                    .get(self.var(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
            })
            .collect()
    }
}
