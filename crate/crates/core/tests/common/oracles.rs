//! Reference implementations that share no code with the library.

#![allow(dead_code)]

use nalgebra::DMatrix;

/// Deterministic uniform generator for fixtures.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Direct-summation MS-SSIM over `channels x side x side` planes in [-1, 1].
pub fn ms_ssim_direct(x: &[f32], y: &[f32], side: usize, window: usize, sigma: f64, weights: &[f64]) -> f64 {
    let channels = x.len() / (side * side);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let half = (window / 2) as f64;
    let taps: Vec<f64> = (0..window).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum::<f64>().powi(2);
    let mut total = 0.0;
    for c in 0..channels {
        let plane = |v: &[f32]| -> Vec<f64> {
            v[c * side * side..(c + 1) * side * side].iter().map(|&p| (f64::from(p) + 1.0) / 2.0).collect()
        };
        let mut a = plane(x);
        let mut b = plane(y);
        let mut s = side;
        let mut product = 1.0;
        for (scale, &w) in weights.iter().enumerate() {
            let out = s - window + 1;
            let mut cs_sum = 0.0;
            let mut full_sum = 0.0;
            for oy in 0..out {
                for ox in 0..out {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..window {
                        for j in 0..window {
                            let g = taps[i] * taps[j] / norm;
                            let p = a[(oy + i) * s + ox + j];
                            let q = b[(oy + i) * s + ox + j];
                            mx += g * p;
                            my += g * q;
                            sxx += g * p * p;
                            syy += g * q * q;
                            sxy += g * p * q;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    let cs = (2.0 * cov + c2) / (vx + vy + c2);
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    cs_sum += cs;
                    full_sum += l * cs;
                }
            }
            let n = (out * out) as f64;
            let term = if scale + 1 == weights.len() { full_sum / n } else { cs_sum / n };
            product *= term.max(0.0).powf(w);
            if scale + 1 < weights.len() {
                let h = s / 2;
                let pool = |v: &[f64]| -> Vec<f64> {
                    let mut o = vec![0.0; h * h];
                    for yy in 0..h {
                        for xx in 0..h {
                            o[yy * h + xx] = (v[2 * yy * s + 2 * xx]
                                + v[2 * yy * s + 2 * xx + 1]
                                + v[(2 * yy + 1) * s + 2 * xx]
                                + v[(2 * yy + 1) * s + 2 * xx + 1])
                                / 4.0;
                        }
                    }
                    o
                };
                a = pool(&a);
                b = pool(&b);
                s = h;
            }
        }
        total += product;
    }
    total / channels as f64
}

/// Fréchet distance through the eigenvalues of the non-symmetric product
/// `S_p S_q`, whose square roots sum to `tr((S_p S_q)^(1/2))`.
pub fn frechet_via_product_eigenvalues(mp: &[f64], cp: &[f64], mq: &[f64], cq: &[f64], eps: f64) -> f64 {
    let d = mp.len();
    let sp = DMatrix::from_row_slice(d, d, cp) + DMatrix::<f64>::identity(d, d) * eps;
    let sq = DMatrix::from_row_slice(d, d, cq) + DMatrix::<f64>::identity(d, d) * eps;
    let prod = &sp * &sq;
    let tr_root: f64 = prod.complex_eigenvalues().iter().map(|l| l.sqrt().re).sum();
    let mean: f64 = mp.iter().zip(mq).map(|(a, b)| (a - b).powi(2)).sum();
    mean + sp.trace() + sq.trace() - 2.0 * tr_root
}

/// Mean of each `factor x factor` block of a single-channel plane.
pub fn area_average(plane: &[f64], side: usize, factor: usize) -> Vec<f64> {
    let out = side / factor;
    let mut o = vec![0.0; out * out];
    for y in 0..side {
        for x in 0..side {
            o[(y / factor) * out + x / factor] += plane[y * side + x];
        }
    }
    let k = (factor * factor) as f64;
    o.iter().map(|v| v / k).collect()
}

/// Random symmetric positive definite matrix, row-major.
pub fn random_spd(rng: &mut Lcg, d: usize) -> Vec<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.uniform(-1.0, 1.0));
    let m = &a * a.transpose() + DMatrix::<f64>::identity(d, d) * 0.1;
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(m[(i, j)]);
        }
    }
    out
}
