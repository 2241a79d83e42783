//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code under test except to build inputs.
#![allow(dead_code)]

use ocuscreen::tensor::{conv2d_forward, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor on the denominator so that gradients which
/// are analytically zero compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite differences of `build` against the tape gradients.
/// `build` receives the leaf vars in the order of `inputs` and returns a
/// scalar loss. Returns the worst relative error over every input element.
pub fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    const EPS: f64 = 1e-5;
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = build(&mut g, &vs);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vs);
    let grads = g.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[i]).expect("leaf gradient").to_vec();
        for j in 0..t.numel() {
            let mut ts = inputs.to_vec();
            ts[i].data_mut()[j] = t.data()[j] + EPS;
            let up = eval(&ts);
            ts[i].data_mut()[j] = t.data()[j] - EPS;
            let down = eval(&ts);
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Random tensor with entries in `[lo, hi)` kept at least `gap` away from 0
/// (keeps ReLU kinks out of the finite-difference stencil).
pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(lo..hi);
        if v.abs() >= gap {
            return v;
        }
    })
}

/// Entries are a shuffled arithmetic progression with spacing 0.01, so
/// max-pool winners are unique by a wide margin.
pub fn distinct_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Direct convolution: input NCHW, kernel O x (C/groups) x kH x kW.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    b: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cg = c / groups;
    let og = o / groups;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let g = oi / og;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[oi];
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let cin = g * cg + ci;
                                s += x[((ni * c + cin) * h + iy as usize) * w + ix as usize]
                                    * k[((oi * cg + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (out, oh, ow)
}

/// One random convolution config; returns the max abs diff against
/// [`naive_conv`].
pub fn conv_case(rng: &mut ChaCha8Rng) -> f64 {
    let groups = [1, 1, 2, 3][rng.random_range(0..4)];
    let c = groups * rng.random_range(1..=2);
    let o = groups * rng.random_range(1..=3);
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let h = rng.random_range(kh..=9);
    let w = rng.random_range(kw..=9);
    let n = rng.random_range(1..=3);
    let x = rand_tensor(rng, &[n, c, h, w], -1.0, 1.0, 0.0);
    let k = rand_tensor(rng, &[o, c / groups, kh, kw], -1.0, 1.0, 0.0);
    let b = rand_tensor(rng, &[o], -1.0, 1.0, 0.0);
    let got = conv2d_forward(&x, &k, &b, stride, pad, groups).unwrap();
    let (want, oh, ow) = naive_conv(x.data(), (n, c, h, w), k.data(), (o, kh, kw), b.data(), stride, pad, groups);
    assert_eq!(got.shape(), &[n, o, oh, ow]);
    got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// P(score_pos > score_neg) + 0.5 P(tie) by enumerating every pair.
pub fn brute_auc(probs: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0usize);
    for (i, &yi) in labels.iter().enumerate() {
        if yi < 0.5 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj > 0.5 {
                continue;
            }
            pairs += 1;
            if probs[i] > probs[j] {
                num += 1.0;
            } else if probs[i] == probs[j] {
                num += 0.5;
            }
        }
    }
    num / pairs as f64
}

/// (tp, fp, fn, tn) at `thr`, predicted positive when `p > thr`.
pub fn confusion(probs: &[f64], labels: &[f64], thr: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p > thr, y > 0.5) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

/// Patience semantics written out longhand: an epoch improves when its loss
/// is strictly below every earlier one; training stops once `patience`
/// consecutive epochs fail to improve, or at the cap.
/// Returns `(epochs run, best epoch (1-based), stopped before the cap)`.
pub fn reference_early_stop(losses: &[f64], patience: usize, max_epochs: usize) -> (usize, usize, bool) {
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad = 0;
    let cap = max_epochs.min(losses.len());
    for (i, &l) in losses.iter().take(cap).enumerate() {
        if l < best {
            best = l;
            best_epoch = i + 1;
            bad = 0;
        } else {
            bad += 1;
            if bad == patience {
                return (i + 1, best_epoch, i + 1 < max_epochs);
            }
        }
    }
    (cap, best_epoch, false)
}

/// Full sort of every candidate by `(distance, insertion index)`.
pub fn linear_scan(
    data: &[Vec<f64>],
    ids: &[String],
    query: &[f64],
    k: usize,
    exclude: Option<&str>,
) -> Vec<(String, f64)> {
    let mut all: Vec<(f64, usize)> = data
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(ids[*i].as_str()) != exclude)
        .map(|(i, e)| {
            let d: f64 = e.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d.sqrt(), i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, i)| (ids[i].clone(), d)).collect()
}

/// Whether any lesion circle intersects the axis-aligned rectangle.
pub fn circle_hits_rect(cx: f64, cy: f64, r: f64, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> bool {
    let dx = cx.clamp(x0, x1) - cx;
    let dy = cy.clamp(y0, y1) - cy;
    dx * dx + dy * dy <= r * r
}

pub mod gradcheck;
