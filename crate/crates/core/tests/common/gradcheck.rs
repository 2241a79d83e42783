//! Finite-difference cases for every differentiable op on the tape.

use super::{distinct_tensor, fd_check, rand_tensor};
use ocuscreen::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const SHAPES_PER_KIND: usize = 20;

/// `sum(out * r)` with fixed random `r`, so every output element carries a
/// distinct weight into the loss.
fn weighted_sum(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let rv = g.input(r.clone());
    let m = g.mul(out, rv).unwrap();
    g.sum(m)
}

fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -1.0, 1.0, 0.0)
}

/// Worst relative error for one layer kind over [`SHAPES_PER_KIND`] random shapes.
pub fn check_kind(kind: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_KIND {
        let e = match kind {
            "conv2d" => {
                let groups = [1, 1, 2][rng.random_range(0..3)];
                let c = groups * rng.random_range(1..=2);
                let o = groups * rng.random_range(1..=2);
                let kh = rng.random_range(1..=3);
                let kw = rng.random_range(1..=3);
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let h = rng.random_range(kh.max(2)..=5);
                let w = rng.random_range(kw.max(2)..=5);
                let n = rng.random_range(1..=2);
                let x = rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0, 0.0);
                let k = rand_tensor(&mut rng, &[o, c / groups, kh, kw], -1.0, 1.0, 0.0);
                let b = rand_tensor(&mut rng, &[o], -1.0, 1.0, 0.0);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let r = weights(&mut rng, &[n, o, oh, ow]);
                fd_check(&[x, k, b], &move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad, groups).unwrap();
                    weighted_sum(g, y, &r)
                })
            }
            "dense" => {
                let (n, d, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
                let x = rand_tensor(&mut rng, &[n, d], -1.0, 1.0, 0.0);
                let w = rand_tensor(&mut rng, &[o, d], -1.0, 1.0, 0.0);
                let b = rand_tensor(&mut rng, &[o], -1.0, 1.0, 0.0);
                let r = weights(&mut rng, &[n, o]);
                fd_check(&[x, w, b], &move |g, v| {
                    let y = g.dense(v[0], v[1], v[2]).unwrap();
                    weighted_sum(g, y, &r)
                })
            }
            "relu" | "sigmoid" | "scale" => {
                let shape = rand_shape(&mut rng);
                let x = rand_tensor(&mut rng, &shape, -2.0, 2.0, 1e-3);
                let r = weights(&mut rng, &shape);
                let f: f64 = rng.random_range(-2.0..2.0);
                let kind = kind.to_string();
                fd_check(&[x], &move |g, v| {
                    let y = match kind.as_str() {
                        "relu" => g.relu(v[0]),
                        "sigmoid" => g.sigmoid(v[0]),
                        _ => g.scale(v[0], f),
                    };
                    weighted_sum(g, y, &r)
                })
            }
            "maxpool2" => {
                let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
                let (h, w) = (2 * rng.random_range(1..=3), 2 * rng.random_range(1..=3));
                let x = distinct_tensor(&mut rng, &[n, c, h, w]);
                let r = weights(&mut rng, &[n, c, h / 2, w / 2]);
                fd_check(&[x], &move |g, v| {
                    let y = g.maxpool2(v[0]).unwrap();
                    weighted_sum(g, y, &r)
                })
            }
            "upsample2" => {
                let shape = rand_shape(&mut rng);
                let x = rand_tensor(&mut rng, &shape, -1.0, 1.0, 0.0);
                let r = weights(&mut rng, &[shape[0], shape[1], 2 * shape[2], 2 * shape[3]]);
                fd_check(&[x], &move |g, v| {
                    let y = g.upsample2(v[0]).unwrap();
                    weighted_sum(g, y, &r)
                })
            }
            "concat_channels" => {
                let a_shape = rand_shape(&mut rng);
                let cb = rng.random_range(1..=3);
                let b_shape = [a_shape[0], cb, a_shape[2], a_shape[3]];
                let a = rand_tensor(&mut rng, &a_shape, -1.0, 1.0, 0.0);
                let b = rand_tensor(&mut rng, &b_shape, -1.0, 1.0, 0.0);
                let r = weights(&mut rng, &[a_shape[0], a_shape[1] + cb, a_shape[2], a_shape[3]]);
                fd_check(&[a, b], &move |g, v| {
                    let y = g.concat_channels(v[0], v[1]).unwrap();
                    weighted_sum(g, y, &r)
                })
            }
            "global_avg_pool" => {
                let shape = rand_shape(&mut rng);
                let x = rand_tensor(&mut rng, &shape, -1.0, 1.0, 0.0);
                let r = weights(&mut rng, &[shape[0], shape[1]]);
                fd_check(&[x], &move |g, v| {
                    let y = g.global_avg_pool(v[0]).unwrap();
                    weighted_sum(g, y, &r)
                })
            }
            "add" | "mul" => {
                let shape = rand_shape(&mut rng);
                let a = rand_tensor(&mut rng, &shape, -1.0, 1.0, 0.0);
                let b = rand_tensor(&mut rng, &shape, -1.0, 1.0, 0.0);
                let r = weights(&mut rng, &shape);
                let add = kind == "add";
                fd_check(&[a, b], &move |g, v| {
                    let y = if add { g.add(v[0], v[1]) } else { g.mul(v[0], v[1]) }.unwrap();
                    weighted_sum(g, y, &r)
                })
            }
            "bce_loss" => {
                let shape = rand_shape(&mut rng);
                let p = rand_tensor(&mut rng, &shape, 0.05, 0.95, 0.0);
                let t = soft_targets(&mut rng, p.numel());
                fd_check(&[p], &move |g, v| g.bce_loss(v[0], &t).unwrap())
            }
            "bce_with_logits" => {
                let shape = rand_shape(&mut rng);
                let z = rand_tensor(&mut rng, &shape, -4.0, 4.0, 0.0);
                let t = soft_targets(&mut rng, z.numel());
                fd_check(&[z], &move |g, v| g.bce_with_logits(v[0], &t).unwrap())
            }
            "composite" => {
                // conv -> relu -> maxpool -> upsample -> concat skip -> gap -> dense -> bce
                let n = rng.random_range(1..=2);
                let c = rng.random_range(1..=2);
                let s = 2 * rng.random_range(2..=3);
                let o = rng.random_range(1..=3);
                let x = rand_tensor(&mut rng, &[n, c, s, s], -1.0, 1.0, 0.0);
                let k = rand_tensor(&mut rng, &[o, c, 3, 3], -1.0, 1.0, 0.0);
                let b = rand_tensor(&mut rng, &[o], -1.0, 1.0, 0.0);
                let w = rand_tensor(&mut rng, &[3, o + c], -1.0, 1.0, 0.0);
                let wb = rand_tensor(&mut rng, &[3], -1.0, 1.0, 0.0);
                let t = soft_targets(&mut rng, n * 3);
                fd_check(&[x, k, b, w, wb], &move |g, v| {
                    let h = g.conv2d(v[0], v[1], v[2], 1, 1, 1).unwrap();
                    let h = g.relu(h);
                    let h = g.maxpool2(h).unwrap();
                    let h = g.upsample2(h).unwrap();
                    let h = g.concat_channels(h, v[0]).unwrap();
                    let e = g.global_avg_pool(h).unwrap();
                    let z = g.dense(e, v[3], v[4]).unwrap();
                    g.bce_with_logits(z, &t).unwrap()
                })
            }
            other => panic!("unknown kind {other}"),
        };
        worst = worst.max(e);
    }
    worst
}

pub const KINDS: [&str; 14] = [
    "conv2d",
    "dense",
    "relu",
    "sigmoid",
    "scale",
    "maxpool2",
    "upsample2",
    "concat_channels",
    "global_avg_pool",
    "add",
    "mul",
    "bce_loss",
    "bce_with_logits",
    "composite",
];

fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    ]
}

fn soft_targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        })
        .collect()
}
