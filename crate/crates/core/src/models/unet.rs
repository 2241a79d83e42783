//! U-Net and the two-stage W-Net cascade.
//!
//! Level `i` has `base * 2^i` channels. Encoder levels and the bottleneck are
//! two 3x3 convs each; a decoder level is nearest-upsample, 3x3 conv,
//! concatenation with the skip, 3x3 conv. A final 1x1 conv produces logits.
//!
//! Weights for `c_i = base * 2^i`, `cin_0 = in_channels`, `cin_i = c_{i-1}`:
//!
//! ```text
//! encoder i      9 cin_i c_i + c_i + 9 c_i^2 + c_i          (i < depth)
//! bottleneck     same formula with i = depth
//! decoder i      9 c_{i+1} c_i + c_i + 18 c_i^2 + c_i        (i < depth)
//! output         c_0 out + out
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv;
use super::{ModelError, ModelKind, ModelSpec, Network};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Nominal training resolution; must be divisible by `2^depth`.
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            out_channels: 1,
            input_size: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth == 0 || self.depth > 8 {
            return Err(ModelError::Config(format!(
                "depth must be in 1..=8, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        let m = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % m != 0 {
            return Err(ModelError::Config(format!(
                "input size {} not divisible by 2^{} = {m}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn param_count(&self) -> usize {
        let two = |cin: usize, c: usize| 9 * cin * c + c + 9 * c * c + c;
        let mut total = 0;
        let mut cin = self.in_channels;
        for i in 0..=self.depth {
            total += two(cin, self.width(i));
            cin = self.width(i);
        }
        for i in 0..self.depth {
            let c = self.width(i);
            total += 9 * self.width(i + 1) * c + c + 18 * c * c + c;
        }
        total + self.width(0) * self.out_channels + self.out_channels
    }

    /// Freezable blocks: encoder levels, bottleneck, decoder levels.
    pub fn num_blocks(&self) -> usize {
        2 * self.depth + 1
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    up: Conv,
    merge: Conv,
}

/// Layer table for one U-Net inside a (possibly shared) parameter store.
#[derive(Debug, Clone)]
pub(crate) struct UNetLayers {
    cfg: UNetConfig,
    enc: Vec<(Conv, Conv)>,
    bottleneck: (Conv, Conv),
    dec: Vec<Decoder>,
    out: Conv,
}

impl UNetLayers {
    pub fn build(
        cfg: &UNetConfig,
        prefix: &str,
        block_offset: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.depth;
        let mut conv = |name: String, cin, cout, k, block| {
            Conv::new(
                store,
                &format!("{prefix}{name}"),
                cin,
                cout,
                k,
                1,
                Some(block_offset + block),
                rng,
            )
        };
        let mut enc = Vec::with_capacity(d);
        let mut cin = cfg.in_channels;
        for i in 0..d {
            let c = cfg.width(i);
            enc.push((
                conv(format!("enc{i}.conv1"), cin, c, 3, i),
                conv(format!("enc{i}.conv2"), c, c, 3, i),
            ));
            cin = c;
        }
        let cb = cfg.width(d);
        let bottleneck = (
            conv("mid.conv1".into(), cin, cb, 3, d),
            conv("mid.conv2".into(), cb, cb, 3, d),
        );
        // decoders run deepest first; block ids continue in execution order
        let mut dec = Vec::with_capacity(d);
        for (j, i) in (0..d).rev().enumerate() {
            let c = cfg.width(i);
            let block = d + 1 + j;
            dec.push(Decoder {
                up: conv(format!("dec{i}.up"), cfg.width(i + 1), c, 3, block),
                merge: conv(format!("dec{i}.merge"), 2 * c, c, 3, block),
            });
        }
        let out = conv("out".into(), cfg.width(0), cfg.out_channels, 1, 2 * d);
        Self {
            cfg: cfg.clone(),
            enc,
            bottleneck,
            dec,
            out,
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let m = 1usize << self.cfg.depth;
        match x.shape() {
            [_, c, h, w]
                if *c == self.cfg.in_channels && *h > 0 && h % m == 0 && *w > 0 && w % m == 0 =>
            {
                Ok(())
            }
            other => Err(ModelError::InputShape {
                expected: format!(
                    "N x {} x H x W with H, W divisible by {m}",
                    self.cfg.in_channels
                ),
                found: other.to_vec(),
            }),
        }
    }

    /// Returns logits, N x out x H x W.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, ModelError> {
        self.check_input(g.value(x))?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for (c1, c2) in &self.enc {
            h = c1.apply_relu(g, p, h)?;
            h = c2.apply_relu(g, p, h)?;
            skips.push(h);
            h = g.maxpool2(h)?;
        }
        h = self.bottleneck.0.apply_relu(g, p, h)?;
        h = self.bottleneck.1.apply_relu(g, p, h)?;
        for dec in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            h = g.upsample2(h)?;
            h = dec.up.apply_relu(g, p, h)?;
            h = g.concat_channels(h, skip)?;
            h = dec.merge.apply_relu(g, p, h)?;
        }
        Ok(self.out.apply(g, p, h)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    seed: u64,
    store: ParamStore,
    layers: UNetLayers,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = UNetLayers::build(&cfg, "", 0, &mut store, &mut rng);
        Ok(Self {
            cfg,
            seed,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn logits_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, ModelError> {
        self.layers.forward(g, p, x)
    }

    /// Probability map, N x out x H x W.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.input(batch.clone());
        let z = self.layers.forward(&mut g, &p, x)?;
        let s = g.sigmoid(z);
        Ok(g.value(s).clone())
    }
}

impl Network for UNet {
    fn kind(&self) -> ModelKind {
        ModelKind::UNet
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::UNet {
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
        self.cfg.num_blocks()
    }

    fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.predict(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WNetConfig {
    /// Shape of the first U-Net; the second takes one extra input channel.
    pub unet: UNetConfig,
    pub weight_a: f64,
    pub weight_b: f64,
}

impl Default for WNetConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            weight_a: 1.0,
            weight_b: 1.0,
        }
    }
}

impl WNetConfig {
    pub fn stage_b(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.unet.in_channels + self.unet.out_channels,
            ..self.unet.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.unet.validate()?;
        if !(self.weight_a >= 0.0 && self.weight_b >= 0.0 && self.weight_a + self.weight_b > 0.0) {
            return Err(ModelError::Config(format!(
                "supervision weights must be non-negative and not both zero, got ({}, {})",
                self.weight_a, self.weight_b
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.unet.param_count() + self.stage_b().param_count()
    }
}

/// Graph handles for a W-Net pass: logits and probability maps of both stages.
#[derive(Debug, Clone, Copy)]
pub struct WNetOutputs {
    pub logits_a: Var,
    pub logits_b: Var,
    pub map_a: Var,
    pub map_b: Var,
}

/// Two U-Nets in series; the second sees the image and the first's map.
#[derive(Debug, Clone)]
pub struct WNet {
    cfg: WNetConfig,
    seed: u64,
    store: ParamStore,
    a: UNetLayers,
    b: UNetLayers,
}

impl WNet {
    pub fn new(cfg: WNetConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = UNetLayers::build(&cfg.unet, "a.", 0, &mut store, &mut rng);
        let b = UNetLayers::build(
            &cfg.stage_b(),
            "b.",
            cfg.unet.num_blocks(),
            &mut store,
            &mut rng,
        );
        Ok(Self {
            cfg,
            seed,
            store,
            a,
            b,
        })
    }

    pub fn config(&self) -> &WNetConfig {
        &self.cfg
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
    ) -> Result<WNetOutputs, ModelError> {
        let logits_a = self.a.forward(g, p, x)?;
        let map_a = g.sigmoid(logits_a);
        let xb = g.concat_channels(x, map_a)?;
        let logits_b = self.b.forward(g, p, xb)?;
        let map_b = g.sigmoid(logits_b);
        Ok(WNetOutputs {
            logits_a,
            logits_b,
            map_a,
            map_b,
        })
    }

    /// Deep supervision: `w_a * bce(map_a) + w_b * bce(map_b)`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        out: &WNetOutputs,
        mask: &[f64],
    ) -> Result<Var, ModelError> {
        let la = g.bce_with_logits(out.logits_a, mask)?;
        let lb = g.bce_with_logits(out.logits_b, mask)?;
        let la = g.scale(la, self.cfg.weight_a);
        let lb = g.scale(lb, self.cfg.weight_b);
        Ok(g.add(la, lb)?)
    }

    /// `(map_a, map_b)`, each N x 1 x H x W.
    pub fn wnet_forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.input(batch.clone());
        let out = self.forward_graph(&mut g, &p, x)?;
        Ok((g.value(out.map_a).clone(), g.value(out.map_b).clone()))
    }
}

impl Network for WNet {
    fn kind(&self) -> ModelKind {
        ModelKind::WNet
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::WNet {
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
        2 * self.cfg.unet.num_blocks()
    }

    fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.wnet_forward(batch)?.1)
    }
}
