#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatlight::cloud::{rgb_to_dc, Gaussian, GaussianCloud, SH_COEFFS};
use splatlight::geom::quat_normalize;
use splatlight::render::Camera;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera on the -z axis looking at the origin with `+y` up.
pub fn axis_camera(size: usize, focal: f64) -> Camera<f64> {
    Camera::look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, 1.0, 0.0], focal, size, size)
}

/// `n` anisotropic Gaussians near the origin whose colours stay well inside
/// the clamp range for any view direction.
pub fn random_cloud(r: &mut impl Rng, n: usize, degree: usize) -> GaussianCloud<f64> {
    let gs = (0..n)
        .map(|_| {
            let mut sh = [[0.0; 3]; SH_COEFFS];
            for c in 0..3 {
                sh[0][c] = rgb_to_dc(r.random_range(0.3..0.7));
                for k in 1..SH_COEFFS {
                    sh[k][c] = r.random_range(-0.05..0.05);
                }
            }
            Gaussian {
                mean: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                scale: [r.random_range(0.1..0.5), r.random_range(0.1..0.5), r.random_range(0.1..0.5)],
                rotation: quat_normalize([
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ]),
                opacity: r.random_range(0.2..0.95),
                sh,
            }
        })
        .collect();
    GaussianCloud::from_gaussians(gs).unwrap().with_active_sh_degree(degree).unwrap()
}
