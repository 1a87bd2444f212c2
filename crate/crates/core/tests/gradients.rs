mod common;

use common::audited::{min_cycle_residual, random_image, ssim_arch, Cycle, DiscGan, GenGan, Projection, Ssim};
use common::gradaudit::{audit, Probe};
use common::oracles::Lcg;
use paca_autograd::Tensor;
use paca_core::losses::{GanMode, SsimConfig};
use paca_core::networks::{CycleGanArch, DiscriminatorNet, GeneratorNet};

fn check(name: &str, probes: &[Probe]) {
    assert_eq!(probes.len(), 5, "{name}: not enough probe parameters");
    for p in probes {
        assert!(p.rel_err_f32() < 1e-3, "{name}: f32 {p:?}");
        assert!(p.rel_err_f64() < 1e-5, "{name}: f64 {p:?}");
    }
}

#[test]
fn generator_side_gan_gradients() {
    let arch = CycleGanArch::tiny();
    let mut rng = Lcg(1);
    for mode in [GanMode::LeastSquares, GanMode::CrossEntropy] {
        let loss = GenGan {
            g: GeneratorNet::new(arch.generator, 1).unwrap(),
            d: DiscriminatorNet::new(arch.discriminator, 2).unwrap(),
            x: random_image(&mut rng, 16),
            mode,
        };
        check("gan generator", &audit(&loss, 5));
    }
}

#[test]
fn discriminator_side_gan_gradients() {
    let arch = CycleGanArch::tiny();
    let mut rng = Lcg(2);
    for mode in [GanMode::LeastSquares, GanMode::CrossEntropy] {
        let loss = DiscGan {
            d: DiscriminatorNet::new(arch.discriminator, 3).unwrap(),
            real: random_image(&mut rng, 16),
            fake: random_image(&mut rng, 16),
            mode,
        };
        check("gan discriminator", &audit(&loss, 5));
    }
}

#[test]
fn cycle_gradients() {
    let arch = CycleGanArch::tiny();
    let mut rng = Lcg(3);
    // L1 is not differentiable at a zero residual; draw images until no pixel
    // sits within single-precision reach of that kink.
    let loss = (0..20)
        .map(|_| Cycle {
            g_a: GeneratorNet::new(arch.generator, 4).unwrap(),
            g_b: GeneratorNet::new(arch.generator, 5).unwrap(),
            a: random_image(&mut rng, 16),
            b: random_image(&mut rng, 16),
        })
        .find(|c| min_cycle_residual(c) > 1e-5)
        .expect("fixture away from the L1 kink");
    check("cycle", &audit(&loss, 5));
}

#[test]
fn ms_ssim_and_reg_gradients() {
    let mut rng = Lcg(4);
    let g = GeneratorNet::new(ssim_arch(), 6).unwrap();
    let a = random_image(&mut rng, 64);
    let target = random_image(&mut rng, 64);
    for reg in [None, Some(1.0)] {
        let loss = Ssim { g: g.clone(), a: a.clone(), target: target.clone(), cfg: SsimConfig::desk(), reg };
        check(if reg.is_some() { "reg" } else { "ms_ssim" }, &audit(&loss, 5));
    }
}

#[test]
fn network_forward_gradients() {
    let arch = CycleGanArch::tiny();
    let mut rng = Lcg(5);
    let x = random_image(&mut rng, 16);
    let g = GeneratorNet::new(arch.generator, 7).unwrap();
    let w = Tensor::from_vec(&[1, 3, 16, 16], (0..768).map(|_| rng.uniform(-1.0, 1.0) as f32).collect());
    check("generator", &audit(&Projection { net: g, x: x.clone(), weights: w }, 5));
    let d = DiscriminatorNet::new(arch.discriminator, 8).unwrap();
    let s = arch.discriminator.score_side(16).unwrap();
    let w = Tensor::from_vec(&[1, 1, s, s], (0..s * s).map(|_| rng.uniform(-1.0, 1.0) as f32).collect());
    check("discriminator", &audit(&Projection { net: d, x, weights: w }, 5));
}
