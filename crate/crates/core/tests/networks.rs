mod common;

use common::oracles::Lcg;
use paca_autograd::{Tape, Tensor};
use paca_core::data::ImageTensor;
use paca_core::losses::{gan_loss_on, GanMode, GanSide};
use paca_core::networks::{CycleGanArch, DiscriminatorArch, DiscriminatorNet, GeneratorArch, GeneratorNet};
use proptest::prelude::*;

fn random_image(rng: &mut Lcg, side: usize) -> ImageTensor {
    ImageTensor::new(side, (0..3 * side * side).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

/// Parameter count from layer shapes: conv weights, biases, and affine norm pairs.
fn generator_elements(a: &GeneratorArch) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let norm = |c: usize| 2 * c;
    let w = a.base_width;
    let mut total = conv(3, w, 7) + norm(w);
    let mut c = w;
    for _ in 0..a.n_down {
        total += conv(c, 2 * c, 3) + norm(2 * c);
        c *= 2;
    }
    total += a.n_res * 2 * (conv(c, c, 3) + norm(c));
    for _ in 0..a.n_up {
        total += conv(c, c / 2, 3) + norm(c / 2);
        c /= 2;
    }
    total + conv(c, 3, 7)
}

fn discriminator_elements(a: &DiscriminatorArch) -> usize {
    let conv = |cin: usize, cout: usize| cin * cout * 16 + cout;
    let mut c = a.base_width;
    let mut total = conv(3, c);
    for k in 1..=a.n_layers {
        let next = a.base_width * (1 << k.min(3));
        total += conv(c, next) + 2 * next;
        c = next;
    }
    total + conv(c, 1)
}

#[test]
fn parameter_counts_match_layer_shapes() {
    for arch in [CycleGanArch::desk(), CycleGanArch::full(), CycleGanArch::tiny()] {
        let g = GeneratorNet::new(arch.generator, 0).unwrap();
        assert_eq!(g.params.count().elements, generator_elements(&arch.generator), "{arch:?}");
        let d = DiscriminatorNet::new(arch.discriminator, 0).unwrap();
        assert_eq!(d.params.count().elements, discriminator_elements(&arch.discriminator), "{arch:?}");
    }
}

#[test]
fn one_residual_block_share() {
    // full preset: two 3x3 convs at width 256 plus two affine norms
    let g = GeneratorNet::new(GeneratorArch::full(), 0).unwrap();
    let block = g.params.count_prefix(&GeneratorNet::block_prefix(1)).elements;
    assert_eq!(block, 2 * (256 * 256 * 9 + 256) + 4 * 256);
    let share = block as f64 / g.params.count().elements as f64;
    assert!((share - 0.1037).abs() < 1e-3, "share {share}");
    for i in 1..=9 {
        assert_eq!(g.params.count_prefix(&GeneratorNet::block_prefix(i)).elements, block);
    }
    assert_eq!(g.params.count_prefix(&GeneratorNet::block_prefix(10)).elements, 0);
}

#[test]
fn score_maps_have_patch_geometry() {
    let mut rng = Lcg(1);
    let arch = CycleGanArch::desk();
    let d = DiscriminatorNet::new(arch.discriminator, 1).unwrap();
    let s = d.forward(&random_image(&mut rng, 64)).unwrap();
    assert_eq!(s.shape(), [1, 1, 6, 6]);
    assert_eq!(DiscriminatorArch::full().score_side(256).unwrap(), 30);
}

#[test]
fn initialization_is_seed_deterministic() {
    let arch = CycleGanArch::desk();
    let a = GeneratorNet::new(arch.generator, 7).unwrap();
    let b = GeneratorNet::new(arch.generator, 7).unwrap();
    let c = GeneratorNet::new(arch.generator, 8).unwrap();
    let bits = |g: &GeneratorNet| {
        g.params.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    let da = DiscriminatorNet::new(arch.discriminator, 7).unwrap();
    let db = DiscriminatorNet::new(arch.discriminator, 7).unwrap();
    assert!(da.params.iter().zip(db.params.iter()).all(|(p, q)| p.tensor == q.tensor));
}

#[test]
fn initial_weights_follow_the_stated_distribution() {
    let g = GeneratorNet::new(GeneratorArch::desk(), 3).unwrap();
    let mut w = Vec::new();
    for p in g.params.iter() {
        if p.name.ends_with("conv.weight") || p.name.ends_with("conv1.weight") || p.name.ends_with("conv2.weight") {
            w.extend(p.tensor.data().iter().map(|&v| f64::from(v)));
        } else if p.name.ends_with(".bias") {
            assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-3);
    assert!((sd - 0.02).abs() < 5e-4, "sd {sd}");
}

#[test]
fn inference_is_pure() {
    let mut rng = Lcg(2);
    let g = GeneratorNet::new(CycleGanArch::tiny().generator, 1).unwrap();
    let x = random_image(&mut rng, 16);
    let before = g.params.clone();
    let y1 = g.forward(&x).unwrap();
    let y2 = g.forward(&x).unwrap();
    assert_eq!(y1, y2);
    assert!(before.iter().zip(g.params.iter()).all(|(p, q)| p.tensor == q.tensor));
    assert!(y1.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn wrong_side_is_a_contract_error() {
    let g = GeneratorNet::new(CycleGanArch::tiny().generator, 1).unwrap();
    assert_eq!(g.forward(&ImageTensor::filled(32, 0.0)).unwrap_err().exit_code(), 2);
}

#[test]
fn frozen_tensors_receive_no_gradient() {
    let mut rng = Lcg(3);
    let arch = CycleGanArch::tiny();
    let mut g = GeneratorNet::new(arch.generator, 1).unwrap();
    let d = DiscriminatorNet::new(arch.discriminator, 2).unwrap();
    g.params.set_all_trainable(false);
    let x = random_image(&mut rng, 16);
    let mut tape = Tape::<f32>::new();
    let pg = g.params.bind(&mut tape, true);
    let pd = d.params.bind(&mut tape, true);
    let xv = tape.constant(x.to_tensor());
    let fake = g.forward_on(&mut tape, &pg, xv);
    let s = d.forward_on(&mut tape, &pd, fake);
    let loss = gan_loss_on(&mut tape, s, s, GanSide::Generator, GanMode::LeastSquares);
    let grads = tape.backward(loss);
    for v in &pg {
        assert!(grads.get(*v).is_none_or(|t| t.data().iter().all(|&e| e == 0.0)));
    }
    assert!(pd.iter().any(|v| grads.get(*v).is_some_and(|t| t.data().iter().any(|&e| e != 0.0))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn generator_preserves_shape(mult in 2usize..=8, seed in 0u64..1000) {
        let side = 4 * mult;
        let g = GeneratorNet::new(GeneratorArch { side, base_width: 2, n_down: 2, n_res: 1, n_up: 2 }, seed).unwrap();
        let mut rng = Lcg(seed);
        let x = Tensor::from_vec(&[2, 3, side, side], (0..6 * side * side).map(|_| rng.uniform(-1.0, 1.0) as f32).collect());
        let mut tape = Tape::<f32>::new();
        let p = g.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let y = g.forward_on(&mut tape, &p, xv);
        prop_assert_eq!(tape.value(y).shape(), &[2, 3, side, side]);
    }
}
