use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng;

/// Local pattern that identifies one texture class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureClass {
    pub checker: bool,
    pub orientation: f64,
    pub period: f64,
}

const PERIODS: [f64; 3] = [3.0, 5.0, 8.0];

/// Class `c` cycles through four grating orientations and three periods;
/// classes past the first twelve are checkerboards.
pub fn texture_class(c: usize) -> TextureClass {
    if c < 12 {
        TextureClass {
            checker: false,
            orientation: (c % 4) as f64 * std::f64::consts::FRAC_PI_4,
            period: PERIODS[(c / 4) % 3],
        }
    } else {
        let j = c - 12;
        TextureClass {
            checker: true,
            orientation: (j % 2) as f64 * std::f64::consts::FRAC_PI_4,
            period: 4.0 + 2.0 * (j / 2) as f64,
        }
    }
}

/// Renders one grayscale texture sample in `[0, 1]`: the class pattern
/// inside a randomly placed soft ellipse over a noisy mid-gray background.
pub fn render_texture(class: usize, size: usize, seed: u64) -> Vec<f32> {
    let tc = texture_class(class);
    let mut r = rng::substream(seed, "texture");
    let s = size as f64 / 64.0;
    let cy = r.random_range(0.3..0.7) * size as f64;
    let cx = r.random_range(0.3..0.7) * size as f64;
    let ra = r.random_range(14.0..24.0) * s;
    let rb = r.random_range(14.0..24.0) * s;
    let tilt = r.random_range(0.0..std::f64::consts::PI);
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let phase2 = r.random_range(0.0..std::f64::consts::TAU);
    let contrast = r.random_range(0.6..1.0);
    let period = tc.period * r.random_range(0.95..1.05);
    let theta = tc.orientation + r.random_range(-0.08..0.08);
    let noise = Normal::new(0.0, 0.04).expect("valid");
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = tilt.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = (dx * ca + dy * sa) / ra;
            let v = (-dx * sa + dy * ca) / rb;
            let rad = (u * u + v * v).sqrt();
            let edge = (ra.min(rb) * (1.0 - rad) / 1.5).clamp(0.0, 1.0);
            let along = x as f64 * ct + y as f64 * st;
            let across = -(x as f64) * st + y as f64 * ct;
            let tau = std::f64::consts::TAU;
            let pattern = if tc.checker {
                let a = (tau * along / period + phase).sin();
                let b = (tau * across / period + phase2).sin();
                (a * b).signum()
            } else {
                (tau * along / period + phase).sin()
            };
            let v = 0.5 + edge * 0.4 * contrast * pattern + noise.sample(&mut r);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}
