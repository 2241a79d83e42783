use serde::{Deserialize, Serialize};

use super::{ParamStore, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam,
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimizer over a [`ParamStore`]. Frozen parameters are skipped
/// and never touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    slots: Vec<Option<Slot>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum: 0.0 }, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and clears the consumed gradients. Every trainable
    /// parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        if let Some(p) = store
            .iter()
            .find(|p| p.trainable() && p.tensor.grad().is_none())
        {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let g = p.tensor.grad().expect("checked above").to_vec();
            let n = g.len();
            let slot = self.slots[i].get_or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } if momentum == 0.0 => {
                    for (w, g) in data.iter_mut().zip(&g) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    for ((w, g), buf) in data.iter_mut().zip(&g).zip(&mut slot.m) {
                        *buf = momentum * *buf + g;
                        *w -= self.lr * *buf;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, g), m), v) in
                        data.iter_mut().zip(&g).zip(&mut slot.m).zip(&mut slot.v)
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }
}
