//! Two-moons latent pushed through a different smooth warp per domain.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::router::DomainId;

const LATENT_NOISE: f64 = 0.05;
const OBS_NOISE: f64 = 0.05;

/// Latent point: (x, y) on one of the two moons.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, shift: f64) -> Vec<f64> {
    let u: f64 = rng.random_range(0.0..PI);
    let upper = rng.random_bool(0.5);
    let (x, y) = if upper {
        (u.cos(), u.sin())
    } else {
        (1.0 - u.cos(), 0.5 - u.sin())
    };
    vec![
        x - 0.5 + shift + LATENT_NOISE * rng.sample::<f64, _>(StandardNormal),
        y - 0.25 + LATENT_NOISE * rng.sample::<f64, _>(StandardNormal),
    ]
}

/// Domain 0 sees the latent directly; every other domain applies a rotation
/// followed by a sinusoidal shear.
pub fn render<R: Rng + ?Sized>(k: DomainId, z: &[f64], rng: &mut R) -> Vec<f64> {
    let (mut x, mut y) = (z[0], z[1]);
    if k.0 > 0 {
        let f = k.0 as f64;
        let (s, c) = (0.8 * f).sin_cos();
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        x = rx + 0.4 * (1.5 * ry + f).sin();
        y = ry + 0.3 * (1.2 * x - f).cos();
    }
    vec![
        x + OBS_NOISE * rng.sample::<f64, _>(StandardNormal),
        y + OBS_NOISE * rng.sample::<f64, _>(StandardNormal),
    ]
}
