//! Encoder, lateral interactors and decoder: shapes, sharing and
//! closed-form behavior at zero initialization.

use ciisod::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use ciisod::decoder::{Decoder, DecoderConfig};
use ciisod::interactors::{self, Cii, Interactor, InteractorConfig, InteractorKind, RgcBlock, PPM_BINS};
use ciisod::nn::{self, BnConfig, Mode, Module};
use ciisod::{no_grad, ops, rng, Float, ModelConfig, Shape, SodModel, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const KINDS: [InteractorKind; 5] = [
    InteractorKind::PlainConv,
    InteractorKind::Rgc,
    InteractorKind::RgcDagger,
    InteractorKind::Ppm,
    InteractorKind::PpmDagger,
];

fn random(shape: Shape, r: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::new(shape, (0..shape.numel()).map(|_| r.random_range(0.0..1.0)).collect())
}

fn zero_convs<T: Float>(m: &dyn Module<T>) {
    for p in nn::parameters(m) {
        if p.name().ends_with(".weight") || p.name().ends_with(".bias") {
            p.fill(T::zero());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn lateral_maps_keep_stage_shapes(
        kind in prop::sample::select(KINDS.to_vec()),
        shared in any::<bool>(),
        paper in any::<bool>(),
        h32 in 1usize..=3,
        w32 in 1usize..=3,
        seed in 0u64..1000,
    ) {
        let (h, w) = (32 * h32, 32 * w32);
        let mut cfg = if paper { ModelConfig::paper(h) } else { ModelConfig::desk(h) };
        cfg.backbone.input_size = (h, w);
        cfg.interactor.kind = kind;
        cfg.interactor.shared = shared;
        let model = SodModel::<f32>::new(&cfg, seed).unwrap();
        let mut r = rng::stream(seed, "shape");
        // Batch statistics over two images keep even a 1x1 coarsest stage
        // normalizable.
        let x = random(Shape::new(2, 3, h, w), &mut r);
        let f = no_grad(|| model.forward_features(&x, Mode::Train)).unwrap();
        prop_assert_eq!(f.pyramid.len(), 5);
        prop_assert_eq!(f.lateral.len(), 5);
        for (i, (b, c)) in f.pyramid.stages.iter().zip(&f.lateral).enumerate() {
            let (bs, cs) = (b.shape(), c.shape());
            prop_assert_eq!((cs.h, cs.w), (bs.h, bs.w), "stage {}", i + 1);
            prop_assert_eq!(cs.c, cfg.interactor.channels);
            prop_assert_eq!((bs.h, bs.w), (h / f.pyramid.strides[i], w / f.pyramid.strides[i]));
        }
        let s = f.saliency.shape();
        prop_assert_eq!(s, Shape::new(2, 1, h, w));
        prop_assert!(f.saliency.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn pyramid_sizes_and_channels() {
    let mut r = rng::stream(1, "sizes");
    let cfg = BackboneConfig::resnet18(352);
    assert_eq!(cfg.pyramid_channels(), [64, 64, 128, 256, 512]);
    assert_eq!(cfg.strides(), [2, 4, 8, 16, 32]);
    let sizes: Vec<usize> = cfg.stage_sizes().iter().map(|s| s.0).collect();
    assert_eq!(sizes, [176, 88, 44, 22, 11]);
    let tiny = BackboneConfig::tiny(64);
    let b = Backbone::<f32>::new(&tiny, BnConfig::default(), &mut r).unwrap();
    let p = no_grad(|| b.forward(&random(Shape::new(2, 3, 64, 64), &mut r), Mode::Train)).unwrap();
    let got: Vec<(usize, usize)> = p.stages.iter().map(|t| (t.shape().c, t.shape().h)).collect();
    assert_eq!(got, [(16, 32), (16, 16), (32, 8), (64, 4), (128, 2)]);
}

#[test]
fn indivisible_input_is_rejected() {
    let mut cfg = BackboneConfig::tiny(64);
    cfg.input_size = (64, 80);
    assert!(matches!(cfg.validate(), Err(ciisod::Error::Config(_))));
    let mut r = rng::stream(1, "reject");
    assert!(Backbone::<f32>::new(&cfg, BnConfig::default(), &mut r).is_err());
}

#[test]
fn wrong_input_channels_are_a_dimension_error() {
    let mut r = rng::stream(2, "channels");
    let b = Backbone::<f32>::new(&BackboneConfig::tiny(32), BnConfig::default(), &mut r).unwrap();
    let x = random(Shape::new(1, 4, 32, 32), &mut r);
    assert!(matches!(b.forward(&x, Mode::Eval), Err(ciisod::Error::Dimension { .. })));
}

#[test]
fn zero_input_gives_zero_pyramid() {
    let mut r = rng::stream(3, "zeros");
    let b = Backbone::<f32>::new(&BackboneConfig::tiny(64), BnConfig::default(), &mut r).unwrap();
    let p = no_grad(|| b.forward(&Tensor::zeros(Shape::new(2, 3, 64, 64)), Mode::Train)).unwrap();
    for t in &p.stages {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn same_seed_same_weights() {
    let cfg = ModelConfig::desk(64);
    let a = nn::parameters(&SodModel::<f32>::new(&cfg, 11).unwrap());
    let b = nn::parameters(&SodModel::<f32>::new(&cfg, 11).unwrap());
    let c = nn::parameters(&SodModel::<f32>::new(&cfg, 12).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| x.name() == y.name() && x.values() == y.values()));
    assert!(a.iter().zip(&c).any(|(x, y)| x.values() != y.values()));
}

fn pyramid(channels: &[usize], top: usize, n: usize, r: &mut ChaCha8Rng) -> FeaturePyramid<f64> {
    let m = channels.len();
    let stages = channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let side = top << (m - 1 - i);
            let s = Shape::new(n, c, side, side);
            Tensor::new(s, (0..s.numel()).map(|_| r.random_range(-1.0..1.0)).collect())
        })
        .collect();
    FeaturePyramid {
        stages,
        strides: (0..m).map(|i| 2 << i).collect(),
    }
}

const CHANNELS: [usize; 5] = [4, 4, 8, 8, 16];

#[test]
fn shared_body_change_reaches_every_stage() {
    let mut r = rng::stream(4, "sharing");
    let p = pyramid(&CHANNELS, 2, 2, &mut r);
    for kind in [InteractorKind::PlainConv, InteractorKind::RgcDagger] {
        for shared in [true, false] {
            let cfg = InteractorConfig {
                shared,
                ..InteractorConfig::of_kind(kind, 4)
            };
            let cii = Cii::<f64>::new(&cfg, &CHANNELS, BnConfig::default(), &mut r).unwrap();
            let before = cii.forward(&p, Mode::Train).unwrap();
            let target = if shared { 0 } else { 2 };
            let w = nn::parameters(&cii.bodies[target])[0].clone();
            w.update(|v| v.iter_mut().for_each(|x| *x += 0.5));
            let after = cii.forward(&p, Mode::Train).unwrap();
            let changed: Vec<bool> = before.iter().zip(&after).map(|(a, b)| a.data() != b.data()).collect();
            if shared {
                assert_eq!(changed, [true; 5], "{kind:?}");
            } else {
                assert_eq!(changed, [false, false, true, false, false], "{kind:?}");
            }
        }
    }
}

#[test]
fn shared_body_size_is_independent_of_stage_count() {
    let mut r = rng::stream(5, "count");
    for kind in KINDS {
        let cfg = InteractorConfig::of_kind(kind, 16);
        let one = Cii::<f32>::new(&cfg, &[64], BnConfig::default(), &mut r).unwrap();
        let five = Cii::<f32>::new(&cfg, &[64, 64, 128, 256, 512], BnConfig::default(), &mut r).unwrap();
        let count = |c: &Cii<f32>| c.body_parameters().iter().map(|p| p.numel()).sum::<usize>();
        assert_eq!(count(&one), count(&five), "{kind:?}");
        let single = Interactor::<f32>::new(&cfg, "x", None, BnConfig::default(), &mut r);
        assert_eq!(five.body_parameters().len(), nn::parameters(&single).len());
    }
    let plain = |shared| InteractorConfig::plain(3, 2, shared, 16);
    let chans = [16, 16, 32, 64, 128];
    let s = Cii::<f32>::new(&plain(true), &chans, BnConfig::default(), &mut r).unwrap();
    let u = Cii::<f32>::new(&plain(false), &chans, BnConfig::default(), &mut r).unwrap();
    let n = |c: &Cii<f32>| c.body_parameters().iter().map(|p| p.numel()).sum::<usize>();
    assert_eq!(n(&u), 5 * n(&s));
}

#[test]
fn zero_plain_stack_outputs_zero() {
    let mut r = rng::stream(6, "plain0");
    for (kernel, depth) in [(1, 1), (3, 2), (3, 4), (1, 3)] {
        let body = Interactor::<f64>::new(&InteractorConfig::plain(kernel, depth, true, 4), "p", None, BnConfig::default(), &mut r);
        zero_convs(&body);
        let x = pyramid(&[4], 5, 2, &mut r).stages.remove(0);
        let y = body.forward(&x, &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_rgc_on_constant_input() {
    let mut r = rng::stream(7, "rgc0");
    let block = RgcBlock::<f64>::new("rgc", None, 4, BnConfig::default(), &mut r);
    zero_convs(&block);
    let c = 0.8;
    let x = Tensor::full(Shape::new(2, 4, 6, 6), c);
    let parts = block.forward_parts(&x, &x, Mode::Train, None).unwrap();
    let want = ops::sigmoid_scalar(c) * c;
    assert!(parts.out.data().iter().all(|&v| (v - want).abs() < 1e-12));
    assert_eq!(parts.gate.shape(), Shape::new(2, 4, 1, 1));
}

#[test]
fn rgc_gate_is_open_interval_and_saturates() {
    let mut r = rng::stream(8, "gate");
    let block = RgcBlock::<f64>::new("rgc", None, 4, BnConfig::default(), &mut r);
    let p = pyramid(&[4, 4], 3, 2, &mut r);
    let (b, succ) = (&p.stages[0], &p.stages[1]);
    let parts = block.forward_parts(b, succ, Mode::Eval, None).unwrap();
    assert!(parts.gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    let open = block.forward_parts(b, succ, Mode::Eval, Some(1e6)).unwrap();
    assert!(open.gate.data().iter().all(|&g| g == 1.0));
    let run = |layers: &[nn::ConvBnRelu<f64>], x: &Tensor<f64>| {
        layers.iter().fold(x.clone(), |h, l| l.forward(&h, Mode::Eval).unwrap())
    };
    let l = ops::add(b, &run(&block.left, b)).unwrap();
    let want = ops::add(&l, &run(&block.fuse, &l)).unwrap();
    assert_eq!(open.out.data(), want.data());
}

#[test]
fn rgc_variants_differ_only_in_global_input() {
    let mut r = rng::stream(9, "dagger");
    let p = pyramid(&CHANNELS, 2, 2, &mut r);
    let rgc = InteractorConfig::of_kind(InteractorKind::Rgc, 4);
    let dagger = InteractorConfig::of_kind(InteractorKind::RgcDagger, 4);
    let a = Cii::<f64>::new(&rgc, &CHANNELS, BnConfig::default(), &mut rng::stream(1, "same")).unwrap();
    let b = Cii::<f64>::new(&dagger, &CHANNELS, BnConfig::default(), &mut rng::stream(1, "same")).unwrap();
    assert_eq!(nn::param_count(&a), nn::param_count(&b));
    let (ya, yb) = (a.forward(&p, Mode::Eval).unwrap(), b.forward(&p, Mode::Eval).unwrap());
    // The coarsest stage has no successor, so both variants read it alone.
    assert_eq!(ya[4].data(), yb[4].data());
    assert_ne!(ya[0].data(), yb[0].data());
}

#[test]
fn zero_ppm_outputs_zero_and_has_four_branches() {
    let mut r = rng::stream(10, "ppm0");
    for kind in [InteractorKind::Ppm, InteractorKind::PpmDagger] {
        let body = Interactor::<f64>::new(&InteractorConfig::of_kind(kind, 8), "ppm", None, BnConfig::default(), &mut r);
        let Interactor::Ppm(block) = &body else {
            panic!("not a pyramid pooling body")
        };
        assert_eq!(block.branches.len(), PPM_BINS.len());
        assert_eq!(PPM_BINS.len(), 4);
        zero_convs(&body);
        let x = Tensor::full(Shape::new(2, 8, 6, 6), 0.4);
        let succ = Tensor::full(Shape::new(2, 8, 3, 3), 0.9);
        let y = body.forward(&x, &succ, Mode::Train).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_head_gives_half_everywhere() {
    let mut r = rng::stream(11, "head0");
    let dec = Decoder::<f64>::new(&DecoderConfig::default(), 5, 4, BnConfig::default(), &mut r);
    zero_convs(&dec.head);
    let c: Vec<Tensor<f64>> = pyramid(&[4; 5], 2, 1, &mut r).stages;
    let y = dec.forward(&c, 64, 64, Mode::Eval).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 64, 64));
    assert!(y.data().iter().all(|&v| v == 0.5));
}

#[test]
fn feature_dump_files() {
    let mut r = rng::stream(12, "dump");
    let mut maps = pyramid(&[3; 5], 2, 1, &mut r).stages;
    maps[0] = Tensor::full(maps[0].shape(), 2.5);
    let dir = tempfile::tempdir().unwrap();
    let files = interactors::dump_features(&maps, dir.path(), "after").unwrap();
    assert_eq!(files.len(), 5);
    for (i, (f, t)) in files.iter().zip(&maps).enumerate() {
        assert!(f.ends_with(format!("stage{}_after.pgm", i + 1)));
        let (w, h, px) = ciisod::data::netpbm::read_map(f).unwrap();
        assert_eq!((h, w), (t.shape().h, t.shape().w));
        if i == 0 {
            assert!(px.iter().all(|&v| v == 128.0 / 255.0));
        }
    }
}
