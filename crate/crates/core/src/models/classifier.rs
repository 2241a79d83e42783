//! Multi-label fundus classifier: a convolutional backbone, global average
//! pooling, and a dense head with eight sigmoid outputs.
//!
//! Three backbone variants stand in for the usual ImageNet families:
//!
//! | variant     | block (cin -> cout)                                    | weights per block                              |
//! |-------------|--------------------------------------------------------|------------------------------------------------|
//! | `plain`     | conv3x3, relu, conv3x3, relu, maxpool                  | `9 cin cout + cout + 9 cout^2 + cout`          |
//! | `residual`  | h = relu(conv3x3 x); h + conv3x3(relu(conv3x3 h)); pool| `9 cin cout + cout + 2 (9 cout^2 + cout)`      |
//! | `separable` | 2 x (depthwise3x3, pointwise1x1, relu), maxpool        | `10 cin + cin cout + cout + 10 cout + cout^2 + cout` |
//!
//! The head adds `8 D + 8` weights where `D` is the last block's width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Dense};
use super::{ModelError, ModelKind, ModelSpec, Network};
use crate::datasets::NUM_CLASSES;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Residual,
    Separable,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" | "vgg" => Some(Variant::Plain),
            "residual" | "resnet" => Some(Variant::Residual),
            "separable" | "xception" => Some(Variant::Separable),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Residual => "residual",
            Variant::Separable => "separable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub channels: Vec<usize>,
    pub input_size: usize,
    pub input_channels: usize,
    /// Blocks excluded from optimizer updates.
    #[serde(default)]
    pub frozen: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Separable,
            channels: vec![16, 32, 64, 128],
            input_size: 64,
            input_channels: 3,
            frozen: Vec::new(),
        }
    }
}

impl BackboneConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.len() < 2 {
            return Err(ModelError::Config(format!(
                "backbone needs at least 2 blocks, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.input_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        let min = 1usize << self.channels.len();
        if self.input_size < min {
            return Err(ModelError::Config(format!(
                "input size {} too small for {} pooling stages (need >= {min})",
                self.input_size,
                self.channels.len()
            )));
        }
        if let Some(&b) = self.frozen.iter().find(|&&b| b >= self.channels.len()) {
            return Err(ModelError::BlockIndex {
                index: b,
                blocks: self.channels.len(),
            });
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Closed-form weight count; see the module docs.
    pub fn param_count(&self) -> usize {
        let mut cin = self.input_channels;
        let mut total = 0;
        for &co in &self.channels {
            total += match self.variant {
                Variant::Plain => 9 * cin * co + co + 9 * co * co + co,
                Variant::Residual => 9 * cin * co + co + 2 * (9 * co * co + co),
                Variant::Separable => 10 * cin + cin * co + co + 10 * co + co * co + co,
            };
            cin = co;
        }
        total + NUM_CLASSES * cin + NUM_CLASSES
    }
}

#[derive(Debug, Clone)]
enum Block {
    Plain(Conv, Conv),
    Residual { proj: Conv, r1: Conv, r2: Conv },
    Separable([Conv; 4]),
}

impl Block {
    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, ModelError> {
        let y = match self {
            Block::Plain(c1, c2) => {
                let h = c1.apply_relu(g, p, x)?;
                c2.apply_relu(g, p, h)?
            }
            Block::Residual { proj, r1, r2 } => {
                let h = proj.apply_relu(g, p, x)?;
                let r = r1.apply_relu(g, p, h)?;
                let r = r2.apply(g, p, r)?;
                g.add(h, r)?
            }
            Block::Separable([dw1, pw1, dw2, pw2]) => {
                let h = dw1.apply(g, p, x)?;
                let h = pw1.apply_relu(g, p, h)?;
                let h = dw2.apply(g, p, h)?;
                pw2.apply_relu(g, p, h)?
            }
        };
        Ok(g.maxpool2(y)?)
    }
}

/// Backbone + GAP + dense(8) + sigmoid.
#[derive(Debug, Clone)]
pub struct Classifier {
    cfg: BackboneConfig,
    seed: u64,
    store: ParamStore,
    blocks: Vec<Block>,
    head: Dense,
}

/// Graph handles produced by one classifier forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierOutputs {
    pub embedding: Var,
    pub logits: Var,
    pub probs: Var,
}

impl Classifier {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut cin = cfg.input_channels;
        for (i, &co) in cfg.channels.iter().enumerate() {
            let n = |s: &str| format!("block{i}.{s}");
            let b = Some(i);
            let block = match cfg.variant {
                Variant::Plain => Block::Plain(
                    Conv::new(&mut store, &n("conv1"), cin, co, 3, 1, b, &mut rng),
                    Conv::new(&mut store, &n("conv2"), co, co, 3, 1, b, &mut rng),
                ),
                Variant::Residual => Block::Residual {
                    proj: Conv::new(&mut store, &n("proj"), cin, co, 3, 1, b, &mut rng),
                    r1: Conv::new(&mut store, &n("res1"), co, co, 3, 1, b, &mut rng),
                    r2: Conv::new(&mut store, &n("res2"), co, co, 3, 1, b, &mut rng),
                },
                Variant::Separable => Block::Separable([
                    Conv::new(&mut store, &n("dw1"), cin, cin, 3, cin, b, &mut rng),
                    Conv::new(&mut store, &n("pw1"), cin, co, 1, 1, b, &mut rng),
                    Conv::new(&mut store, &n("dw2"), co, co, 3, co, b, &mut rng),
                    Conv::new(&mut store, &n("pw2"), co, co, 1, 1, b, &mut rng),
                ]),
            };
            blocks.push(block);
            cin = co;
        }
        let head = Dense::new(&mut store, "head", cin, NUM_CLASSES, None, &mut rng);
        let mut model = Self {
            cfg,
            seed,
            store,
            blocks,
            head,
        };
        let frozen = model.cfg.frozen.clone();
        model.store.freeze_blocks(&frozen);
        Ok(model)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let s = self.cfg.input_size;
        match x.shape() {
            [_, c, h, w] if *c == self.cfg.input_channels && *h == s && *w == s => Ok(()),
            other => Err(ModelError::InputShape {
                expected: format!("N x {} x {s} x {s}", self.cfg.input_channels),
                found: other.to_vec(),
            }),
        }
    }

    /// Backbone followed by global average pooling.
    pub fn embedding_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, ModelError> {
        self.check_input(g.value(x))?;
        let mut h = x;
        for b in &self.blocks {
            h = b.apply(g, p, h)?;
        }
        Ok(g.global_avg_pool(h)?)
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
    ) -> Result<ClassifierOutputs, ModelError> {
        let embedding = self.embedding_graph(g, p, x)?;
        let logits = self.head.apply(g, p, embedding)?;
        let probs = g.sigmoid(logits);
        Ok(ClassifierOutputs {
            embedding,
            logits,
            probs,
        })
    }

    fn infer(&self, batch: &Tensor) -> Result<(Graph, ClassifierOutputs), ModelError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.input(batch.clone());
        let out = self.forward_graph(&mut g, &p, x)?;
        Ok((g, out))
    }

    /// N x 8 probabilities.
    pub fn forward_classify(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let (g, out) = self.infer(batch)?;
        Ok(g.value(out.probs).clone())
    }

    /// N x D penultimate (post-pooling) features.
    pub fn extract_embedding(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(batch)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.input(batch.clone());
        let e = self.embedding_graph(&mut g, &p, x)?;
        Ok(g.value(e).clone())
    }

    /// Applies the dense head and sigmoid to precomputed embeddings.
    pub fn head_probs(&self, embedding: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let e = g.input(embedding.clone());
        let z = self.head.apply(&mut g, &p, e)?;
        let s = g.sigmoid(z);
        Ok(g.value(s).clone())
    }

    /// Zeroes the dense head so every output is exactly `sigmoid(0) = 0.5`.
    pub fn zero_head(&mut self) {
        for i in [self.head.w, self.head.b] {
            self.store.get_mut(i).tensor.data_mut().fill(0.0);
        }
    }

    /// Head weight and bias indices in the parameter store.
    pub fn head_params(&self) -> (usize, usize) {
        (self.head.w, self.head.b)
    }
}

impl Network for Classifier {
    fn kind(&self) -> ModelKind {
        ModelKind::Classifier
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::Classifier {
            config: self.cfg.clone(),
            seed: self.seed,
        }
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.forward_classify(batch)
    }

    fn on_freeze(&mut self, frozen: &[usize]) {
        self.cfg.frozen = frozen.to_vec();
    }
}
