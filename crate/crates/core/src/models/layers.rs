use rand::Rng;

use crate::tensor::{Graph, ParamStore, TensorError, Var};

/// Convolution whose weights live in a shared [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        block: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let cpg = cin / groups;
        let w = store.kaiming(
            format!("{name}.weight"),
            &[cout, cpg, k, k],
            cpg * k * k,
            block,
            rng,
        );
        let b = store.zeros(format!("{name}.bias"), &[cout], block);
        Self {
            w,
            b,
            padding: k / 2,
            groups,
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, TensorError> {
        g.conv2d(x, p[self.w], p[self.b], 1, self.padding, self.groups)
    }

    pub fn apply_relu(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let y = self.apply(g, p, x)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        block: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.kaiming(format!("{name}.weight"), &[dout, din], din, block, rng);
        let b = store.zeros(format!("{name}.bias"), &[dout], block);
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, TensorError> {
        g.dense(x, p[self.w], p[self.b])
    }
}
