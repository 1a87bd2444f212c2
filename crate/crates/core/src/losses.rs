//! Adversarial, cycle, MS-SSIM and regularization terms, on the tape and as
//! plain values, plus the composed stage objectives.

use paca_autograd::{gaussian_kernel, Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{PacaError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    #[default]
    LeastSquares,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanSide {
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_reg: f64,
    pub c_const: f64,
    pub gan_mode: GanMode,
    /// Weight of the optional identity term; 0 disables it.
    pub identity_weight: f64,
    /// Also report the regularization term in D_B's logged loss (no gradient effect).
    pub reg_in_disc_step: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_reg: 1.0,
            c_const: 1.0,
            gan_mode: GanMode::LeastSquares,
            identity_weight: 0.0,
            reg_in_disc_step: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_reg", self.lambda_reg),
            ("identity_weight", self.identity_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PacaError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.c_const.is_finite() {
            return Err(PacaError::Config("c_const must be finite".into()));
        }
        Ok(())
    }
}

/// Five-scale weights of the standard MS-SSIM definition.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub scales: usize,
    pub scale_weights: Vec<f64>,
}

impl SsimConfig {
    /// The first `scales` standard weights, renormalized to sum to 1.
    pub fn with_scales(scales: usize) -> Result<Self> {
        if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
            return Err(PacaError::Config(format!("scales must be in 1..=5, got {scales}")));
        }
        let w = &MS_SSIM_WEIGHTS[..scales];
        let total: f64 = w.iter().sum();
        Ok(Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            scales,
            scale_weights: w.iter().map(|x| x / total).collect(),
        })
    }

    pub fn full() -> Self {
        Self::with_scales(5).expect("five scales")
    }

    pub fn desk() -> Self {
        Self::with_scales(3).expect("three scales")
    }

    /// Smallest side that admits `scales - 1` halvings with the window still fitting.
    pub fn min_side(&self) -> usize {
        self.window << (self.scales - 1)
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(PacaError::Config(format!("SSIM window must be odd, got {}", self.window)));
        }
        if self.scales == 0 || self.scale_weights.len() != self.scales {
            return Err(PacaError::Config("SSIM needs one weight per scale".into()));
        }
        let total: f64 = self.scale_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.scale_weights.iter().any(|w| *w < 0.0) {
            return Err(PacaError::Config(format!(
                "SSIM scale weights must be non-negative and sum to 1, sum {total}"
            )));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(PacaError::Config("SSIM sigma must be positive".into()));
        }
        let mut s = side;
        for _ in 1..self.scales {
            s /= 2;
        }
        if s < self.window {
            return Err(PacaError::Config(format!(
                "side {side} too small for {} SSIM scales with window {}",
                self.scales, self.window
            )));
        }
        Ok(())
    }
}

/// Adversarial term toward `target` (real=1, fake=0) on one score map.
pub fn gan_term<T: Element>(tape: &mut Tape<T>, scores: Var, target_real: bool, mode: GanMode) -> Var {
    match mode {
        GanMode::LeastSquares => {
            let d = tape.add_scalar(scores, if target_real { -1.0 } else { 0.0 });
            let sq = tape.mul(d, d);
            tape.mean(sq)
        }
        GanMode::CrossEntropy => {
            let z = if target_real { tape.scale(scores, -1.0) } else { scores };
            let sp = tape.softplus(z);
            tape.mean(sp)
        }
    }
}

/// Discriminator side: real toward 1 plus fake toward 0. Generator side:
/// fake toward 1 (`real` is ignored).
pub fn gan_loss_on<T: Element>(tape: &mut Tape<T>, real: Var, fake: Var, side: GanSide, mode: GanMode) -> Var {
    match side {
        GanSide::Generator => gan_term(tape, fake, true, mode),
        GanSide::Discriminator => {
            let r = gan_term(tape, real, true, mode);
            let f = gan_term(tape, fake, false, mode);
            tape.add(r, f)
        }
    }
}

pub fn l1_on<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean(d)
}

pub fn cycle_loss_on<T: Element>(tape: &mut Tape<T>, a: Var, aba: Var, b: Var, bab: Var) -> Var {
    let la = l1_on(tape, a, aba);
    let lb = l1_on(tape, b, bab);
    tape.add(la, lb)
}

/// MS-SSIM of two `[N, C, H, W]` batches in `[-1, 1]`, averaged over `N x C`.
pub fn ms_ssim_on<T: Element>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &SsimConfig) -> Var {
    let kernel: Vec<T> = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = cfg.k1 * cfg.k1;
    let c2 = cfg.k2 * cfg.k2;
    let remap = |tape: &mut Tape<T>, v: Var| {
        let h = tape.scale(v, 0.5);
        tape.add_scalar(h, 0.5)
    };
    let mut x = remap(tape, x);
    let mut y = remap(tape, y);
    let mut product: Option<Var> = None;
    for (s, &weight) in cfg.scale_weights.iter().enumerate() {
        let mu_x = tape.blur_valid(x, &kernel);
        let mu_y = tape.blur_valid(y, &kernel);
        let xx = tape.mul(x, x);
        let yy = tape.mul(y, y);
        let xy = tape.mul(x, y);
        let e_xx = tape.blur_valid(xx, &kernel);
        let e_yy = tape.blur_valid(yy, &kernel);
        let e_xy = tape.blur_valid(xy, &kernel);
        let mu_xx = tape.mul(mu_x, mu_x);
        let mu_yy = tape.mul(mu_y, mu_y);
        let mu_xy = tape.mul(mu_x, mu_y);
        let var_x = tape.sub(e_xx, mu_xx);
        let var_y = tape.sub(e_yy, mu_yy);
        let cov = tape.sub(e_xy, mu_xy);
        let num = tape.scale(cov, 2.0);
        let num = tape.add_scalar(num, c2);
        let den = tape.add(var_x, var_y);
        let den = tape.add_scalar(den, c2);
        let mut map = tape.div(num, den);
        if s + 1 == cfg.scales {
            let ln = tape.scale(mu_xy, 2.0);
            let ln = tape.add_scalar(ln, c1);
            let ld = tape.add(mu_xx, mu_yy);
            let ld = tape.add_scalar(ld, c1);
            let l = tape.div(ln, ld);
            map = tape.mul(l, map);
        }
        let term = tape.mean_spatial(map);
        let term = tape.relu(term);
        let term = tape.pow_scalar(term, weight);
        product = Some(match product {
            None => term,
            Some(p) => tape.mul(p, term),
        });
        if s + 1 < cfg.scales {
            x = tape.avg_pool2(x);
            y = tape.avg_pool2(y);
        }
    }
    tape.mean(product.expect("at least one scale"))
}

/// `-(ms_ssim + c)`.
pub fn reg_loss_on<T: Element>(tape: &mut Tape<T>, fused: Var, b_prime: Var, cfg: &SsimConfig, c_const: f64) -> Var {
    let m = ms_ssim_on(tape, fused, b_prime, cfg);
    let m = tape.add_scalar(m, c_const);
    tape.scale(m, -1.0)
}

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.side() != b.side() {
        return Err(PacaError::Contract(format!("image sides differ: {} vs {}", a.side(), b.side())));
    }
    Ok(())
}

fn image_var(tape: &mut Tape<f64>, img: &ImageTensor) -> Var {
    tape.constant(img.to_tensor().cast())
}

/// Computes `gan_loss_on` over plain score maps, in double precision.
pub fn gan_loss(real: &Tensor<f32>, fake: &Tensor<f32>, side: GanSide, mode: GanMode) -> Result<f64> {
    if !real.all_finite() || !fake.all_finite() {
        return Err(PacaError::Numerical("non-finite discriminator scores".into()));
    }
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(real.cast());
    let f = tape.constant(fake.cast());
    let l = gan_loss_on(&mut tape, r, f, side, mode);
    Ok(tape.item(l))
}

pub fn cycle_loss(a: &ImageTensor, aba: &ImageTensor, b: &ImageTensor, bab: &ImageTensor) -> Result<f64> {
    check_same(a, aba)?;
    check_same(b, bab)?;
    let mut tape = Tape::<f64>::new();
    let vs: Vec<Var> = [a, aba, b, bab].into_iter().map(|i| image_var(&mut tape, i)).collect();
    let l = cycle_loss_on(&mut tape, vs[0], vs[1], vs[2], vs[3]);
    Ok(tape.item(l))
}

pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor, cfg: &SsimConfig) -> Result<f64> {
    check_same(x, y)?;
    cfg.validate(x.side())?;
    let mut tape = Tape::<f64>::new();
    let xv = image_var(&mut tape, x);
    let yv = image_var(&mut tape, y);
    let m = ms_ssim_on(&mut tape, xv, yv, cfg);
    Ok(tape.item(m))
}

pub fn reg_loss(fused: &ImageTensor, b_prime: &ImageTensor, cfg: &SsimConfig, c_const: f64) -> Result<f64> {
    Ok(-(ms_ssim(fused, b_prime, cfg)? + c_const))
}

pub fn rmse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same(x, y)?;
    let n = x.data().len() as f64;
    let ss: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
    Ok((ss / n).sqrt())
}

/// Scalar components of one optimization step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// G_A fooling D_B.
    pub gan_g_a: f64,
    /// G_B fooling D_A.
    pub gan_g_b: f64,
    pub cycle: f64,
    pub identity: f64,
    pub disc_a: f64,
    pub disc_b: f64,
    /// Regularization value; only present in the transfer stage.
    pub reg: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub gen: f64,
    pub disc_a: f64,
    pub disc_b: f64,
}

pub fn pretrain_objective(t: &LossTerms, w: &LossWeights) -> Objective {
    Objective {
        gen: t.gan_g_a + t.gan_g_b + w.lambda_cyc * t.cycle + w.identity_weight * t.identity,
        disc_a: t.disc_a,
        disc_b: t.disc_b,
    }
}

pub fn transfer_objective(t: &LossTerms, w: &LossWeights) -> Objective {
    let mut o = pretrain_objective(t, w);
    let reg = w.lambda_reg * t.reg.unwrap_or(0.0);
    o.gen += reg;
    if w.reg_in_disc_step {
        o.disc_b += reg;
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f32) -> Tensor<f32> {
        Tensor::full(&[1, 1, 6, 6], v)
    }

    #[test]
    fn least_squares_values() {
        let ls = GanMode::LeastSquares;
        assert_eq!(gan_loss(&map(1.0), &map(0.0), GanSide::Discriminator, ls).unwrap(), 0.0);
        assert_eq!(gan_loss(&map(0.3), &map(1.0), GanSide::Generator, ls).unwrap(), 0.0);
        assert!((gan_loss(&map(0.5), &map(0.5), GanSide::Discriminator, ls).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_logistic() {
        let v = gan_loss(&map(0.0), &map(0.0), GanSide::Discriminator, GanMode::CrossEntropy).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cycle_constant_offset() {
        let a = ImageTensor::filled(8, -0.2);
        let aba = ImageTensor::filled(8, 0.3);
        let b = ImageTensor::filled(8, 0.1);
        assert!((cycle_loss(&a, &aba, &b, &b).unwrap() - 0.5).abs() < 1e-7);
        assert!(cycle_loss(&a, &ImageTensor::filled(4, 0.0), &b, &b).is_err());
    }

    #[test]
    fn rmse_constant_difference() {
        let x = ImageTensor::filled(8, 0.1);
        let y = ImageTensor::filled(8, 0.3);
        assert!((rmse(&x, &y).unwrap() - 0.2).abs() < 1e-7);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn ssim_side_check() {
        let cfg = SsimConfig::desk();
        assert_eq!(cfg.min_side(), 44);
        assert!(cfg.validate(64).is_ok());
        assert!(cfg.validate(40).is_err());
        assert!(SsimConfig::full().validate(64).is_err());
        assert!(SsimConfig::full().validate(256).is_ok());
        let x = ImageTensor::filled(32, 0.0);
        assert!(matches!(ms_ssim(&x, &x, &cfg), Err(PacaError::Config(_))));
    }

    #[test]
    fn weights_renormalized() {
        for s in 1..=5 {
            let c = SsimConfig::with_scales(s).unwrap();
            assert!((c.scale_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn objectives_degenerate() {
        let t = LossTerms {
            gan_g_a: 0.3,
            gan_g_b: 0.2,
            cycle: 0.1,
            identity: 0.0,
            disc_a: 0.4,
            disc_b: 0.5,
            reg: Some(-2.0),
        };
        let w = LossWeights { lambda_reg: 0.0, ..Default::default() };
        assert_eq!(transfer_objective(&t, &w), pretrain_objective(&t, &w));
        let w1 = LossWeights::default();
        assert!((transfer_objective(&t, &w1).gen - (pretrain_objective(&t, &w1).gen - 2.0)).abs() < 1e-12);
    }
}
