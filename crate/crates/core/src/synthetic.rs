//! Procedural two-domain fixture: binary glyphs (A), smooth layered
//! "landscapes" (B) and striped/spotted "animal" textures (B′).

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageTensor, TransferPair, CHANNELS};
use crate::error::{PacaError, Result};

fn image_from_fn(side: usize, f: impl Fn(usize, f64, f64) -> f64) -> ImageTensor {
    let mut data = vec![0f32; CHANNELS * side * side];
    for c in 0..CHANNELS {
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 + 0.5) / side as f64;
                let v = (y as f64 + 0.5) / side as f64;
                data[(c * side + y) * side + x] = f(c, u, v).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::new(side, data).expect("values clamped to range")
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Black strokes (-1) on white (+1).
/// Segment endpoints and pen width.
type Stroke = ((f64, f64), (f64, f64), f64);

pub fn glyph(rng: &mut impl Rng, side: usize) -> ImageTensor {
    let n = rng.random_range(2..=4);
    let strokes: Vec<Stroke> = (0..n)
        .map(|_| {
            let a = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            let b = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            (a, b, rng.random_range(0.04..0.08))
        })
        .collect();
    image_from_fn(side, |_, u, v| {
        let ink = strokes.iter().any(|&(a, b, w)| segment_distance((u, v), a, b) < w);
        if ink {
            -1.0
        } else {
            1.0
        }
    })
}

/// Sky gradient over two wavy ridges with soft green/brown fill.
pub fn landscape(rng: &mut impl Rng, side: usize) -> ImageTensor {
    let ridge1 = (
        rng.random_range(0.35..0.5),
        rng.random_range(2.0..5.0),
        rng.random_range(0.0..TAU),
        rng.random_range(0.03..0.08),
    );
    let ridge2 = (
        rng.random_range(0.6..0.75),
        rng.random_range(3.0..7.0),
        rng.random_range(0.0..TAU),
        rng.random_range(0.02..0.06),
    );
    let sky: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.4..0.8), rng.random_range(0.6..0.95)];
    let hill: [f64; 3] = [rng.random_range(-0.5..0.0), rng.random_range(-0.1..0.4), rng.random_range(-0.6..-0.2)];
    let ground: [f64; 3] = [rng.random_range(-0.2..0.2), rng.random_range(-0.4..0.0), rng.random_range(-0.8..-0.5)];
    let grain = rng.random_range(10.0..20.0);
    image_from_fn(side, |c, u, v| {
        let h1 = ridge1.0 + ridge1.3 * (ridge1.1 * std::f64::consts::TAU * u + ridge1.2).sin();
        let h2 = ridge2.0 + ridge2.3 * (ridge2.1 * std::f64::consts::TAU * u + ridge2.2).sin();
        let tex = 0.08 * (grain * u + 3.0 * v).sin() * (grain * v).cos();
        if v < h1 {
            sky[c] - 0.3 * v + tex * 0.3
        } else if v < h2 {
            hill[c] + tex
        } else {
            ground[c] + tex
        }
    })
}

/// Warm base with oriented dark stripes and a few spots.
pub fn animal(rng: &mut impl Rng, side: usize) -> ImageTensor {
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(6.0..12.0);
    let base: [f64; 3] = [rng.random_range(0.5..0.9), rng.random_range(0.0..0.4), rng.random_range(-0.7..-0.3)];
    let spots: Vec<(f64, f64, f64)> = (0..rng.random_range(2..5))
        .map(|_| (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.05..0.12)))
        .collect();
    image_from_fn(side, |c, u, v| {
        let t = u * angle.cos() + v * angle.sin();
        let stripe = (freq * std::f64::consts::TAU * t).sin();
        let dark = if stripe > 0.4 { -0.9 } else { base[c] };
        let spot = spots.iter().any(|&(x, y, r)| ((u - x).powi(2) + (v - y).powi(2)).sqrt() < r);
        if spot {
            -0.6
        } else {
            dark
        }
    })
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub domain_a: Vec<ImageTensor>,
    pub domain_b: Vec<ImageTensor>,
    pub domain_b_prime: Vec<ImageTensor>,
    pub pair: TransferPair,
}

impl Fixture {
    pub fn generate(side: usize, per_domain: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain_a = (0..per_domain).map(|_| glyph(&mut rng, side)).collect();
        let domain_b = (0..per_domain).map(|_| landscape(&mut rng, side)).collect();
        let domain_b_prime = (0..per_domain).map(|_| animal(&mut rng, side)).collect();
        let pair = TransferPair { a: glyph(&mut rng, side), b_prime: animal(&mut rng, side) };
        Self { domain_a, domain_b, domain_b_prime, pair }
    }

    /// Writes PNGs under `dir/{domain_a, domain_b, domain_b_prime}` and the
    /// pair as `dir/pair_a.png`, `dir/pair_b_prime.png`.
    pub fn write(&self, dir: &Path) -> Result<FixturePaths> {
        let paths = FixturePaths::under(dir);
        for (sub, imgs) in [
            (&paths.domain_a, &self.domain_a),
            (&paths.domain_b, &self.domain_b),
            (&paths.domain_b_prime, &self.domain_b_prime),
        ] {
            std::fs::create_dir_all(sub).map_err(|e| PacaError::io(sub, e))?;
            for (i, img) in imgs.iter().enumerate() {
                img.save_png(&sub.join(format!("{i:04}.png")))?;
            }
        }
        self.pair.a.save_png(&paths.pair_a)?;
        self.pair.b_prime.save_png(&paths.pair_b_prime)?;
        Ok(paths)
    }
}

#[derive(Clone, Debug)]
pub struct FixturePaths {
    pub domain_a: PathBuf,
    pub domain_b: PathBuf,
    pub domain_b_prime: PathBuf,
    pub pair_a: PathBuf,
    pub pair_b_prime: PathBuf,
}

impl FixturePaths {
    pub fn under(dir: &Path) -> Self {
        Self {
            domain_a: dir.join("domain_a"),
            domain_b: dir.join("domain_b"),
            domain_b_prime: dir.join("domain_b_prime"),
            pair_a: dir.join("pair_a.png"),
            pair_b_prime: dir.join("pair_b_prime.png"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_binary_with_ink() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let g = glyph(&mut rng, 32);
            assert!(g.data().iter().all(|&v| v == 1.0 || v == -1.0));
            assert!(g.data().contains(&-1.0));
        }
    }

    #[test]
    fn fixture_is_deterministic() {
        let a = Fixture::generate(16, 3, 5);
        let b = Fixture::generate(16, 3, 5);
        assert_eq!(a.domain_b, b.domain_b);
        assert_eq!(a.pair.b_prime, b.pair.b_prime);
    }
}
