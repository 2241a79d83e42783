mod common;

use common::{naive_conv, rand_tensor};
use ocuscreen::models::{
    build_model, card_path, load_model, save_with_card, BackboneConfig, Classifier, ModelError, ModelSpec, Network,
    UNet, UNetConfig, Variant, WNet, WNetConfig,
};
use ocuscreen::tensor::{Graph, Optimizer, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_w(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k + cout
}

/// Weight count from the layer list, independent of the library's formula.
fn expected_classifier_params(cfg: &BackboneConfig) -> usize {
    let mut cin = cfg.input_channels;
    let mut n = 0;
    for &c in &cfg.channels {
        n += match cfg.variant {
            Variant::Plain => conv_w(cin, c, 3, 1) + conv_w(c, c, 3, 1),
            Variant::Residual => conv_w(cin, c, 3, 1) + 2 * conv_w(c, c, 3, 1),
            Variant::Separable => conv_w(cin, cin, 3, cin) + conv_w(cin, c, 1, 1) + conv_w(c, c, 3, c) + conv_w(c, c, 1, 1),
        };
        cin = c;
    }
    n + 8 * cin + 8
}

fn expected_unet_params(cfg: &UNetConfig) -> usize {
    let w = |i: usize| cfg.base_channels << i;
    let mut n = 0;
    let mut cin = cfg.in_channels;
    for i in 0..=cfg.depth {
        n += conv_w(cin, w(i), 3, 1) + conv_w(w(i), w(i), 3, 1);
        cin = w(i);
    }
    for i in 0..cfg.depth {
        n += conv_w(w(i + 1), w(i), 3, 1) + conv_w(2 * w(i), w(i), 3, 1);
    }
    n + conv_w(w(0), cfg.out_channels, 1, 1)
}

fn batch(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> Tensor {
    rand_tensor(rng, &[n, c, s, s], 0.0, 1.0, 0.0)
}

fn small(variant: Variant) -> BackboneConfig {
    BackboneConfig { channels: vec![4, 6, 8], input_size: 16, ..BackboneConfig::with_variant(variant) }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn config_arithmetic() {
    let m = Classifier::new(BackboneConfig::default(), 0).unwrap();
    assert_eq!(m.embedding_dim(), 128);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = m.forward_classify(&batch(&mut rng, 2, 3, 64)).unwrap();
    assert_eq!(p.shape(), &[2, 8]);
    let u = UNet::new(UNetConfig::default(), 0).unwrap();
    assert_eq!(u.predict(&batch(&mut rng, 1, 1, 64)).unwrap().shape(), &[1, 1, 64, 64]);
    assert!(matches!(UNet::new(UNetConfig { input_size: 60, ..Default::default() }, 0), Err(ModelError::Config(_))));
    assert!(Classifier::new(BackboneConfig { channels: vec![8], ..Default::default() }, 0).is_err());
}

#[test]
fn parameter_counts_match_layer_lists() {
    for v in [Variant::Plain, Variant::Residual, Variant::Separable] {
        for cfg in [BackboneConfig::with_variant(v), small(v)] {
            let m = Classifier::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.param_count(), expected_classifier_params(&cfg), "{v:?}");
            assert_eq!(cfg.param_count(), m.param_count());
        }
    }
    for cfg in [UNetConfig::default(), UNetConfig { depth: 2, base_channels: 4, in_channels: 2, out_channels: 1, input_size: 32 }] {
        assert_eq!(UNet::new(cfg.clone(), 0).unwrap().param_count(), expected_unet_params(&cfg));
    }
    let w = WNet::new(WNetConfig::default(), 0).unwrap();
    let a = UNetConfig::default();
    let b = UNetConfig { in_channels: a.in_channels + a.out_channels, ..a.clone() };
    assert_eq!(w.param_count(), expected_unet_params(&a) + expected_unet_params(&b));
    assert_eq!(WNetConfig::default().stage_b().in_channels, WNetConfig::default().unet.in_channels + 1);
}

#[test]
fn same_seed_same_checksums() {
    for v in [Variant::Plain, Variant::Residual, Variant::Separable] {
        let a = Classifier::new(small(v), 9).unwrap();
        let b = Classifier::new(small(v), 9).unwrap();
        let c = Classifier::new(small(v), 10).unwrap();
        assert_eq!(a.params().checksums(), b.params().checksums());
        assert_ne!(a.params().checksum(), c.params().checksum());
    }
}

#[test]
fn residual_with_zero_branch_is_projection_then_pool() {
    let mut m = Classifier::new(small(Variant::Residual), 4).unwrap();
    for p in m.params_mut().iter_mut() {
        if p.name.contains(".res") {
            p.tensor.data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = batch(&mut rng, 3, 3, 16);
    let got = m.extract_embedding(&x).unwrap();
    // hand-built skip path: relu(conv(x, proj)) -> maxpool per block, then GAP
    let mut g = Graph::new();
    let mut h = g.input(x);
    for i in 0..3 {
        let w = g.input(m.params().get(m.params().index_of(&format!("block{i}.proj.weight")).unwrap()).tensor.clone());
        let b = g.input(m.params().get(m.params().index_of(&format!("block{i}.proj.bias")).unwrap()).tensor.clone());
        let c = g.conv2d(h, w, b, 1, 1, 1).unwrap();
        let r = g.relu(c);
        h = g.maxpool2(r).unwrap();
    }
    let e = g.global_avg_pool(h).unwrap();
    assert_eq!(bits(&got), bits(g.value(e)));
}

#[test]
fn separable_layer_shapes() {
    let m = Classifier::new(small(Variant::Separable), 0).unwrap();
    let shape = |n: &str| m.params().get(m.params().index_of(n).unwrap()).tensor.shape().to_vec();
    assert_eq!(shape("block0.dw1.weight"), vec![3, 1, 3, 3]);
    assert_eq!(shape("block0.pw1.weight"), vec![4, 3, 1, 1]);
    assert_eq!(shape("block1.dw2.weight"), vec![6, 1, 3, 3]);
}

#[test]
fn freezing_blocks_zero_and_one_changes_only_the_rest() {
    let mut m = Classifier::new(BackboneConfig { input_size: 16, ..Default::default() }, 2).unwrap();
    m.set_trainable(&[0, 1]).unwrap();
    let before = m.params().checksums();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut opt = Optimizer::adam(1e-2);
    for _ in 0..3 {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, true);
        let x = g.input(batch(&mut rng, 2, 3, 16));
        let out = m.forward_graph(&mut g, &p, x).unwrap();
        let loss = g.bce_with_logits(out.logits, &[1.0; 16]).unwrap();
        let grads = g.backward(loss).unwrap();
        m.params_mut().zero_grad();
        m.params_mut().accumulate(&grads, &p).unwrap();
        opt.step(m.params_mut()).unwrap();
    }
    for ((name, a), (_, b)) in before.iter().zip(m.params().checksums()) {
        let frozen = name.starts_with("block0.") || name.starts_with("block1.");
        // biases of a ReLU layer that never activates can stay put, so only
        // weights are required to move
        if frozen {
            assert_eq!(*a, b, "{name} changed");
        } else if name.ends_with("weight") {
            assert_ne!(*a, b, "{name} did not change");
        }
    }
    assert!(m.set_trainable(&[4]).is_err());
}

#[test]
fn zero_head_outputs_one_half() {
    let mut m = Classifier::new(small(Variant::Plain), 0).unwrap();
    m.zero_head();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = m.forward_classify(&batch(&mut rng, 3, 3, 16)).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn zero_input_gives_zero_embedding() {
    for v in [Variant::Plain, Variant::Residual, Variant::Separable] {
        let m = Classifier::new(small(v), 0).unwrap();
        let e = m.extract_embedding(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0), "{v:?}");
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let m = Classifier::new(small(Variant::Plain), 0).unwrap();
    assert!(matches!(m.forward_classify(&Tensor::zeros(&[1, 3, 17, 17])), Err(ModelError::InputShape { .. })));
    assert!(m.forward_classify(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
    let w = WNet::new(WNetConfig::default(), 0).unwrap();
    assert!(w.wnet_forward(&Tensor::zeros(&[1, 1, 20, 20])).is_err());
}

#[test]
fn wnet_maps_match_input_and_threshold_to_binary() {
    let w = WNet::new(WNetConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = w.wnet_forward(&batch(&mut rng, 2, 1, 32)).unwrap();
    for m in [&a, &b] {
        assert_eq!(m.shape(), &[2, 1, 32, 32]);
        assert!(m.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let mask = ocuscreen::training::threshold_mask(b.data(), 0.5);
    assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn save_load_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = batch(&mut rng, 2, 3, 16);
    let m = Classifier::new(small(Variant::Separable), 6).unwrap();
    let path = dir.path().join("clf.ckpt");
    save_with_card(&m, &path).unwrap();
    let card = std::fs::read_to_string(card_path(&path)).unwrap();
    assert!(card.contains("separable") && card.contains(&m.param_count().to_string()) && card.contains('6'));
    let back = load_model(&path).unwrap().into_classifier().unwrap();
    assert_eq!(bits(&back.forward_classify(&x).unwrap()), bits(&m.forward_classify(&x).unwrap()));

    let w = WNet::new(WNetConfig { unet: UNetConfig { depth: 2, base_channels: 4, ..Default::default() }, ..Default::default() }, 1).unwrap();
    let wp = dir.path().join("w.ckpt");
    w.save(&wp).unwrap();
    let wx = batch(&mut rng, 1, 1, 16);
    let wb = load_model(&wp).unwrap().into_wnet().unwrap();
    assert_eq!(bits(&wb.wnet_forward(&wx).unwrap().1), bits(&w.wnet_forward(&wx).unwrap().1));
    assert!(load_model(&wp).unwrap().into_classifier().is_err());

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_model(&cut).is_err());

    let built = build_model(&ModelSpec::UNet { config: UNetConfig::default(), seed: 0 });
    assert!(built.is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn separable_equals_grouped_conv(c in 1usize..4, mult in 1usize..3, s in 3usize..7, seed in any::<u64>()) {
        // depthwise (groups = c) followed by a 1x1 "identity expansion" that
        // copies each channel `mult` times equals one grouped conv with the
        // depthwise kernel replicated per output channel
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, c, s, s], -1.0, 1.0, 0.0);
        let dw = rand_tensor(&mut rng, &[c, 1, 3, 3], -1.0, 1.0, 0.0);
        let db = rand_tensor(&mut rng, &[c], -1.0, 1.0, 0.0);
        let o = c * mult;
        let e = Tensor::from_fn(&[o, c, 1, 1], |i| ((i / c) / mult == i % c) as u8 as f64);
        let mut g = Graph::new();
        let (xv, dv, dbv, ev, zb) = (g.input(x.clone()), g.input(dw.clone()), g.input(db.clone()), g.input(e), g.input(Tensor::zeros(&[o])));
        let h = g.conv2d(xv, dv, dbv, 1, 1, c).unwrap();
        let y = g.conv2d(h, ev, zb, 1, 0, 1).unwrap();
        let k: Vec<f64> = (0..o).flat_map(|oi| dw.data()[(oi / mult) * 9..(oi / mult + 1) * 9].to_vec()).collect();
        let b: Vec<f64> = (0..o).map(|oi| db.data()[oi / mult]).collect();
        let (want, _, _) = naive_conv(x.data(), (2, c, s, s), &k, (o, 3, 3), &b, 1, 1, c);
        for (a, w) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn frozen_checksums_survive_optimizer_steps(mask in 0u8..16, steps in 1usize..6, adam in any::<bool>(), seed in any::<u64>()) {
        let mut m = Classifier::new(BackboneConfig { channels: vec![4, 4, 4, 4], ..small(Variant::Plain) }, seed).unwrap();
        let frozen: Vec<usize> = (0..4).filter(|b| mask & (1 << b) != 0).collect();
        m.set_trainable(&frozen).unwrap();
        let before = m.params().checksums();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = if adam { Optimizer::adam(0.05) } else { Optimizer::sgd(0.05) };
        for _ in 0..steps {
            m.params_mut().zero_grad();
            for p in m.params_mut().iter_mut().filter(|p| p.trainable()) {
                let g: Vec<f64> = (0..p.tensor.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
                p.tensor.accumulate_grad(&g).unwrap();
            }
            opt.step(m.params_mut()).unwrap();
        }
        for (p, (name, sum)) in m.params().iter().zip(&before) {
            let is_frozen = p.block.is_some_and(|b| frozen.contains(&b));
            prop_assert_eq!(is_frozen, p.tensor.checksum() == *sum, "{}", name);
        }
    }

    #[test]
    fn batch_rows_are_independent(seed in any::<u64>(), variant in 0usize..3) {
        let v = [Variant::Plain, Variant::Residual, Variant::Separable][variant];
        let m = Classifier::new(small(v), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = batch(&mut rng, 4, 3, 16);
        let p = m.forward_classify(&x).unwrap();
        let mut order = vec![0usize, 1, 2, 3];
        order.shuffle(&mut rng);
        let plane = 3 * 16 * 16;
        let xp: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * plane..(i + 1) * plane].to_vec()).collect();
        let pp = m.forward_classify(&Tensor::new(vec![4, 3, 16, 16], xp).unwrap()).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(&pp.data()[k * 8..(k + 1) * 8], &p.data()[i * 8..(i + 1) * 8]);
        }
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // a duplicated image gives identical rows
        let dup: Vec<f64> = x.data()[..plane].repeat(2);
        let d = m.forward_classify(&Tensor::new(vec![2, 3, 16, 16], dup).unwrap()).unwrap();
        prop_assert_eq!(&d.data()[..8], &d.data()[8..]);
    }

    #[test]
    fn embedding_composes_with_head(seed in any::<u64>(), variant in 0usize..3) {
        let v = [Variant::Plain, Variant::Residual, Variant::Separable][variant];
        let m = Classifier::new(small(v), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = batch(&mut rng, 3, 3, 16);
        let direct = m.forward_classify(&x).unwrap();
        let e = m.extract_embedding(&x).unwrap();
        prop_assert_eq!(e.shape(), &[3, 8]);
        let composed = m.head_probs(&e).unwrap();
        for (a, b) in direct.data().iter().zip(composed.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
