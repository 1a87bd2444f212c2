//! Losses under gradient audit, shared by the gradient tests and the
//! acceptance run.

#![allow(dead_code)]

use paca_autograd::{Element, Tape, Tensor, Var};
use paca_core::data::ImageTensor;
use paca_core::losses::{cycle_loss_on, gan_loss_on, ms_ssim_on, reg_loss_on, GanMode, GanSide, SsimConfig};
use paca_core::networks::{DiscriminatorNet, GeneratorArch, GeneratorNet, NetworkParams};

use super::gradaudit::AuditedLoss;
use super::oracles::Lcg;

pub fn random_image(rng: &mut Lcg, side: usize) -> ImageTensor {
    ImageTensor::new(side, (0..3 * side * side).map(|_| rng.uniform(-0.9, 0.9) as f32).collect()).unwrap()
}

fn constant<T: Element>(tape: &mut Tape<T>, img: &ImageTensor) -> Var {
    tape.constant(ImageTensor::batch(&[img]).unwrap().cast())
}

pub struct GenGan {
    pub g: GeneratorNet,
    pub d: DiscriminatorNet,
    pub x: ImageTensor,
    pub mode: GanMode,
}

impl AuditedLoss for GenGan {
    fn groups(&self) -> Vec<&NetworkParams<f32>> {
        vec![&self.g.params, &self.d.params]
    }

    fn build<T: Element>(&self, tape: &mut Tape<T>, p: &[Vec<Var>]) -> Var {
        let x = constant(tape, &self.x);
        let fake = self.g.forward_on(tape, &p[0], x);
        let s = self.d.forward_on(tape, &p[1], fake);
        gan_loss_on(tape, s, s, GanSide::Generator, self.mode)
    }
}

pub struct DiscGan {
    pub d: DiscriminatorNet,
    pub real: ImageTensor,
    pub fake: ImageTensor,
    pub mode: GanMode,
}

impl AuditedLoss for DiscGan {
    fn groups(&self) -> Vec<&NetworkParams<f32>> {
        vec![&self.d.params]
    }

    fn build<T: Element>(&self, tape: &mut Tape<T>, p: &[Vec<Var>]) -> Var {
        let r = constant(tape, &self.real);
        let f = constant(tape, &self.fake);
        let sr = self.d.forward_on(tape, &p[0], r);
        let sf = self.d.forward_on(tape, &p[0], f);
        gan_loss_on(tape, sr, sf, GanSide::Discriminator, self.mode)
    }
}

pub struct Cycle {
    pub g_a: GeneratorNet,
    pub g_b: GeneratorNet,
    pub a: ImageTensor,
    pub b: ImageTensor,
}

impl AuditedLoss for Cycle {
    fn groups(&self) -> Vec<&NetworkParams<f32>> {
        vec![&self.g_a.params, &self.g_b.params]
    }

    fn build<T: Element>(&self, tape: &mut Tape<T>, p: &[Vec<Var>]) -> Var {
        let a = constant(tape, &self.a);
        let b = constant(tape, &self.b);
        let fb = self.g_a.forward_on(tape, &p[0], a);
        let aba = self.g_b.forward_on(tape, &p[1], fb);
        let fa = self.g_b.forward_on(tape, &p[1], b);
        let bab = self.g_a.forward_on(tape, &p[0], fa);
        cycle_loss_on(tape, a, aba, b, bab)
    }
}

pub struct Ssim {
    pub g: GeneratorNet,
    pub a: ImageTensor,
    pub target: ImageTensor,
    pub cfg: SsimConfig,
    pub reg: Option<f64>,
}

impl AuditedLoss for Ssim {
    fn groups(&self) -> Vec<&NetworkParams<f32>> {
        vec![&self.g.params]
    }

    fn build<T: Element>(&self, tape: &mut Tape<T>, p: &[Vec<Var>]) -> Var {
        let a = constant(tape, &self.a);
        let t = constant(tape, &self.target);
        let fused = self.g.forward_on(tape, &p[0], a);
        match self.reg {
            Some(c) => reg_loss_on(tape, fused, t, &self.cfg, c),
            None => ms_ssim_on(tape, fused, t, &self.cfg),
        }
    }
}

pub struct Projection<N> {
    pub net: N,
    pub x: ImageTensor,
    pub weights: Tensor<f32>,
}

impl AuditedLoss for Projection<GeneratorNet> {
    fn groups(&self) -> Vec<&NetworkParams<f32>> {
        vec![&self.net.params]
    }

    fn build<T: Element>(&self, tape: &mut Tape<T>, p: &[Vec<Var>]) -> Var {
        let x = constant(tape, &self.x);
        let y = self.net.forward_on(tape, &p[0], x);
        let w = tape.constant(self.weights.cast());
        let m = tape.mul(y, w);
        tape.mean(m)
    }
}

impl AuditedLoss for Projection<DiscriminatorNet> {
    fn groups(&self) -> Vec<&NetworkParams<f32>> {
        vec![&self.net.params]
    }

    fn build<T: Element>(&self, tape: &mut Tape<T>, p: &[Vec<Var>]) -> Var {
        let x = constant(tape, &self.x);
        let y = self.net.forward_on(tape, &p[0], x);
        let w = tape.constant(self.weights.cast());
        let m = tape.mul(y, w);
        tape.mean(m)
    }
}

/// Smallest |x - G_B(G_A(x))| over both reconstructions.
pub fn min_cycle_residual(c: &Cycle) -> f64 {
    let aba = c.g_b.forward(&c.g_a.forward(&c.a).unwrap()).unwrap();
    let bab = c.g_a.forward(&c.g_b.forward(&c.b).unwrap()).unwrap();
    [(&c.a, &aba), (&c.b, &bab)]
        .iter()
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| f64::from(p - q).abs()))
        .fold(f64::MAX, f64::min)
}

pub fn ssim_arch() -> GeneratorArch {
    GeneratorArch { side: 64, base_width: 4, n_down: 2, n_res: 1, n_up: 2 }
}
