//! Gradient-support measurement of receptive fields.

use super::erf::{receptive_field, ReceptiveFieldState};
use super::network::{ForwardOptions, Network};
use super::spec::ArchitectureSpec;
use crate::error::{EscError, Result};
use crate::tensor::{Graph, NormMode, Tensor};

/// Input pixels whose gradient magnitude from one selected unit exceeds
/// `1e-12`, summed over input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl ErfMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Inclusive `(y0, x0, y1, x1)` bounding box of the support.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.mask.iter().enumerate().filter(|(_, m)| **m) {
            let (y, x) = (i / self.width, i % self.width);
            bb = Some(match bb {
                None => (y, x, y, x),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
            });
        }
        bb
    }

    /// True when every supported pixel lies inside the theoretical square
    /// of unit `(uy, ux)`.
    pub fn within(&self, rf: &ReceptiveFieldState, uy: usize, ux: usize) -> bool {
        let (y0, y1) = rf.bounds(uy);
        let (x0, x1) = rf.bounds(ux);
        self.mask.iter().enumerate().filter(|(_, m)| **m).all(|(i, _)| {
            let (y, x) = ((i / self.width) as i64, (i % self.width) as i64);
            y >= y0 && y <= y1 && x >= x0 && x <= x1
        })
    }
}

/// A single scalar unit of the last convolutional feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitIndex {
    pub channel: usize,
    pub y: usize,
    pub x: usize,
}

/// Backpropagates a one-hot seed from `unit` of the final feature map to
/// the input and returns the gradient support. With `linear` set, every
/// ReLU is bypassed.
pub fn measure_empirical_erf(
    net: &mut Network,
    input: &Tensor<f32>,
    unit: UnitIndex,
    linear: bool,
) -> Result<ErfMask> {
    let (n, cin, h, w) = input.dims4()?;
    if n != 1 {
        return Err(EscError::Shape("empirical ERF probes take a single image".into()));
    }
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let x = g.leaf(input.clone(), true);
    let opts = ForwardOptions {
        mode: NormMode::Eval,
        linear,
    };
    let outs = net.trunk(&mut g, x, &vars, opts)?;
    let last = *outs.last().unwrap_or(&x);
    let (_, c, fh, fw) = g.value(last).dims4()?;
    if unit.channel >= c || unit.y >= fh || unit.x >= fw {
        return Err(EscError::Shape(format!(
            "unit {unit:?} outside feature map {c}x{fh}x{fw}"
        )));
    }
    let mut seed = vec![0.0f32; c * fh * fw];
    seed[(unit.channel * fh + unit.y) * fw + unit.x] = 1.0;
    g.backward_with(last, seed)?;
    let grad = g.grad(x).ok_or_else(|| EscError::Shape("input received no gradient".into()))?;
    let mut mask = vec![false; h * w];
    for (i, m) in mask.iter_mut().enumerate() {
        let mag: f64 = (0..cin).map(|ch| (grad[ch * h * w + i] as f64).abs()).sum();
        *m = mag > 1e-12;
    }
    Ok(ErfMask {
        height: h,
        width: w,
        mask,
    })
}

/// Theoretical receptive-field state for a base network of `spec`.
pub fn theoretical_state(spec: &ArchitectureSpec) -> ReceptiveFieldState {
    receptive_field(spec, None)
}

/// Replaces every convolution and head weight by its absolute value plus a
/// small offset so no path can cancel.
pub fn make_weights_positive(net: &mut Network) {
    for idx in net.conv_weight_indices() {
        for v in net.params.values_mut()[idx].data_mut() {
            *v = v.abs() + 1e-3;
        }
    }
}
