use super::{Gradients, Graph, Tensor, TensorError, Var};
use rand::Rng;

/// One named, optionally frozen parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    /// Backbone block the parameter belongs to; `None` for heads.
    pub block: Option<usize>,
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Ordered registry of a model's parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a Kaiming-uniform weight (`bound = sqrt(6 / fan_in)`).
    pub fn kaiming(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        block: Option<usize>,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.push(name, t, block)
    }

    pub fn zeros(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        block: Option<usize>,
    ) -> usize {
        self.push(name, Tensor::zeros(shape), block)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, block: Option<usize>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            block,
            tensor: tensor.with_requires_grad(true),
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter on `g`. With `track` unset (inference), no
    /// parameter requires a gradient.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let rg = track && p.trainable();
                g.leaf(p.tensor.clone().with_requires_grad(rg), rg)
            })
            .collect()
    }

    /// Adds the gradients produced by `backward` onto the bound parameters.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &[Var]) -> Result<(), TensorError> {
        for (p, v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = grads.get(*v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Freezes exactly the parameters whose block is in `frozen`; everything
    /// else becomes trainable.
    pub fn freeze_blocks(&mut self, frozen: &[usize]) {
        for p in &mut self.params {
            let freeze = p.block.is_some_and(|b| frozen.contains(&b));
            p.tensor.set_requires_grad(!freeze);
        }
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        self.params
            .iter_mut()
            .for_each(|p| p.tensor.set_requires_grad(flag));
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Restores values from a snapshot, keeping the current trainable flags.
    pub fn restore(&mut self, snap: &[Tensor]) {
        for (p, s) in self.params.iter_mut().zip(snap) {
            let rg = p.tensor.requires_grad();
            p.tensor = s.clone().with_requires_grad(rg);
            p.tensor.zero_grad();
        }
    }

    /// Per-parameter checksums, in registry order.
    pub fn checksums(&self) -> Vec<(String, u64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.checksum()))
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
            (h ^ p.tensor.checksum()).wrapping_mul(0x0100_0000_01b3)
        })
    }
}
