use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EscError, Result};
use crate::rng;

/// The shared stroke-part library. Every part is mirror-symmetric about its
/// vertical axis, so horizontal flips only move parts between slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    HBar,
    VBar,
    Ring,
    Cross,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::HBar, Part::VBar, Part::Ring, Part::Cross];
}

pub const GRID: usize = 3;
const SLOT_CENTRES: [f64; GRID] = [0.22, 0.5, 0.78];
const PART_RADIUS: f64 = 0.09;
const STROKE_PX: f64 = 2.0;

/// Slot (`0..9`, row-major on a 3x3 grid) of every library part, in
/// `Part::ALL` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout(pub [usize; 4]);

impl Layout {
    pub fn mirrored(&self) -> Layout {
        Layout(self.0.map(|s| (s / GRID) * GRID + (GRID - 1 - s % GRID)))
    }

    fn differences(&self, other: &Layout) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    pub fn parts(&self) -> Vec<(Part, usize)> {
        Part::ALL.iter().copied().zip(self.0).collect()
    }
}

/// Draws one layout per class. Layouts differ from each other, and from each
/// other's mirror images, in at least two part positions.
pub fn class_layouts(classes: usize, seed: u64) -> Result<Vec<Layout>> {
    let mut r = rng::substream(seed, "layouts");
    let mut out: Vec<Layout> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while out.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(EscError::Config(format!("cannot draw {classes} distinct layouts")));
        }
        let mut slots: Vec<usize> = (0..GRID * GRID).collect();
        slots.shuffle(&mut r);
        let cand = Layout([slots[0], slots[1], slots[2], slots[3]]);
        let ok = out
            .iter()
            .all(|l| l.differences(&cand) >= 2 && l.mirrored().differences(&cand) >= 2);
        if ok {
            out.push(cand);
        }
    }
    Ok(out)
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * vx + (py - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (dx, dy) = (px - a.0 - t * vx, py - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn part_distance(part: Part, px: f64, py: f64, cx: f64, cy: f64) -> f64 {
    let r = PART_RADIUS;
    match part {
        Part::HBar => segment_distance(px, py, (cx - r, cy), (cx + r, cy)),
        Part::VBar => segment_distance(px, py, (cx, cy - r), (cx, cy + r)),
        Part::Ring => (((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - 0.8 * r).abs(),
        Part::Cross => {
            let d = 0.75 * r;
            segment_distance(px, py, (cx - d, cy - d), (cx + d, cy + d))
                .min(segment_distance(px, py, (cx - d, cy + d), (cx + d, cy - d)))
        }
    }
}

/// Renders one grayscale glyph in `[0, 1]` (black strokes on white) with a
/// random similarity jitter: rotation up to 10 degrees, translation up to
/// 5% and scale within 10%.
pub fn render_shape(layout: &Layout, size: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::substream(seed, "shape");
    let rot = r.random_range(-10.0f64..10.0).to_radians();
    let tx = r.random_range(-0.05..0.05);
    let ty = r.random_range(-0.05..0.05);
    let scale = r.random_range(0.9..1.1);
    let (sr, cr) = rot.sin_cos();
    let n = size as f64;
    let half_width = 0.5 * STROKE_PX;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            // pixel centre back to glyph coordinates
            let u = (x as f64 + 0.5) / n - 0.5 - tx;
            let v = (y as f64 + 0.5) / n - 0.5 - ty;
            let gx = (cr * u + sr * v) / scale + 0.5;
            let gy = (-sr * u + cr * v) / scale + 0.5;
            let d = layout
                .parts()
                .into_iter()
                .map(|(p, s)| part_distance(p, gx, gy, SLOT_CENTRES[s % GRID], SLOT_CENTRES[s / GRID]))
                .fold(f64::INFINITY, f64::min);
            let d_px = d * scale * n;
            let ink = (half_width + 0.5 - d_px).clamp(0.0, 1.0);
            out.push((1.0 - ink) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_are_injective_and_separated() {
        let ls = class_layouts(10, 3).unwrap();
        for (i, l) in ls.iter().enumerate() {
            let mut s = l.0.to_vec();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 4);
            for m in &ls[..i] {
                assert!(l.differences(m) >= 2);
                assert!(l.differences(&m.mirrored()) >= 2);
            }
        }
    }

    #[test]
    fn mirror_is_involution() {
        let l = Layout([0, 4, 5, 7]);
        assert_eq!(l.mirrored(), Layout([2, 4, 3, 7]));
        assert_eq!(l.mirrored().mirrored(), l);
    }

    #[test]
    fn glyph_has_ink_and_background() {
        let img = render_shape(&Layout([0, 2, 4, 8]), 64, 1);
        let ink = img.iter().filter(|v| **v < 0.5).count();
        assert!(ink > 50 && ink < 1200, "ink {ink}");
        assert_eq!(img[0], 1.0);
    }
}
