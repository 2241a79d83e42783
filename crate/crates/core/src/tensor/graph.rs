use super::conv::{conv2d_backward, conv2d_raw, gemm, ConvGeom};
use super::{shape_err, Tensor, TensorError};

/// Lower clamp applied to probabilities inside `bce_loss`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Bce {
        p: Var,
        target: Vec<f64>,
    },
    BceLogits {
        z: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Parents always precede their children on the tape, which makes the tape
/// order a valid topological order and rules out cycles by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the leaves of a graph with respect to one scalar loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_targets(op: &'static str, value: &Tensor, target: &[f64]) -> Result<(), TensorError> {
    if target.len() != value.numel() {
        return Err(shape_err(
            op,
            format!("{} targets for {} predictions", target.len(), value.numel()),
        ));
    }
    if let Some(&bad) = target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(TensorError::TargetRange { op, value: bad });
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize), TensorError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err(op, format!("expected NCHW input, got {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a copy of `t`, tracking gradients if the tensor asks for them.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = t.clone();
        v.zero_grad();
        let rg = t.requires_grad();
        self.leaf(v, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(k).shape(),
            stride,
            padding,
            groups,
        )?;
        if self.value(b).numel() != geom.o {
            return Err(shape_err(
                "conv2d",
                format!(
                    "bias has {} values for {} output channels",
                    self.value(b).numel(),
                    geom.o
                ),
            ));
        }
        let out = conv2d_raw(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &geom,
        );
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(
            Tensor::new(geom.output_shape(), out)?,
            Op::Conv { x, k, b, geom },
            rg,
        ))
    }

    /// `x` (N x D) times `w`^T (`w` is O x D) plus `b` (O).
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, d, o) = match (xs, ws) {
            ([n, d], [o, d2]) if d == d2 => (*n, *d, *o),
            _ => {
                return Err(shape_err(
                    "dense",
                    format!("input {xs:?} incompatible with weight {ws:?}"),
                ))
            }
        };
        if self.value(b).numel() != o {
            return Err(shape_err(
                "dense",
                format!("bias has {} values for {o} outputs", self.value(b).numel()),
            ));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            n,
            d,
            o,
            self.value(x).data(),
            (d, 1),
            self.value(w).data(),
            (1, d),
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::Dense { x, w, b }, rg))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Logistic function, kept strictly inside (0, 1): beyond |z| ~ 37 the
    /// f64 result would otherwise round to exactly 0 or 1.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        const HI: f64 = 1.0 - f64::EPSILON / 2.0;
        self.map_unary(x, |z| sigmoid(z).clamp(f64::MIN_POSITIVE, HI), Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map_unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = dims4("maxpool2", self.value(x))?;
        if h < 2 || w < 2 {
            return Err(shape_err(
                "maxpool2",
                format!("spatial size {h}x{w} below 2x2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = dims4("upsample2", self.value(x))?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::Upsample2(x), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, ca, ha, wa) = dims4("concat_channels", self.value(a))?;
        let (nb, cb, hb, wb) = dims4("concat_channels", self.value(b))?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err(
                "concat_channels",
                format!("N,H,W differ: {:?} vs {:?}", (na, ha, wa), (nb, hb, wb)),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![na, ca + cb, ha, wa], out)?,
            Op::Concat(a, b),
            rg,
        ))
    }

    /// Spatial mean per channel: NCHW -> NC.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(x))?;
        let plane = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, target: &[f64]) -> Result<Var, TensorError> {
        check_targets("bce_loss", self.value(p), target)?;
        let n = target.len() as f64;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `target`, evaluated
    /// in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, z: Var, target: &[f64]) -> Result<Var, TensorError> {
        check_targets("bce_with_logits", self.value(z), target)?;
        let n = target.len() as f64;
        let loss = self
            .value(z)
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Intermediate gradients are dropped
    /// as soon as they have been propagated; leaf gradients are returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, geom } => {
                let need_x = self.rg(*x);
                let cg = conv2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    geom,
                    need_x,
                );
                if let Some(gi) = cg.input {
                    acc(*x, gi);
                }
                acc(*k, cg.kernel);
                acc(*b, cg.bias);
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (n, d, o) = (xs.shape()[0], xs.shape()[1], ws.shape()[0]);
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * d];
                    gemm(n, o, d, g, (o, 1), ws.data(), (d, 1), &mut gx, 0.0);
                    acc(*x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; o * d];
                    gemm(o, n, d, g, (1, o), xs.data(), (d, 1), &mut gw, 0.0);
                    acc(*w, gw);
                }
                let mut gb = vec![0.0; o];
                for row in g.chunks_exact(o) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(*b, gb);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(
                    *x,
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                );
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|g| g * f).collect()),
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    gx[idx] += gv;
                }
                acc(*x, gx);
            }
            Op::Upsample2(x) => {
                let xs = self.value(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![0.0; self.value(*x).numel()];
                for p in 0..xs[0] * xs[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1], sb[1]);
                let mut ga = Vec::with_capacity(self.value(*a).numel());
                let mut gb = Vec::with_capacity(self.value(*b).numel());
                for chunk in g.chunks_exact((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as f64;
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                acc(*x, gx);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(g, v)| g * v).collect());
                acc(*b, g.iter().zip(va).map(|(g, v)| g * v).collect());
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Bce { p, target } => {
                let n = target.len() as f64;
                let gp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            -g[0] * (y / p - (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                acc(*p, gp);
            }
            Op::BceLogits { z, target } => {
                let n = target.len() as f64;
                let gz = self
                    .value(*z)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                acc(*z, gz);
            }
        }
    }
}
