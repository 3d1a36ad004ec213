use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{EscError, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScrambleKind {
    Global,
    /// Independent shuffles inside non-overlapping `window x window` tiles.
    /// Tiles on the bottom/right edge are truncated when the window does not
    /// divide the grid.
    Local { window: usize },
}

/// Fixed bijection over the `h * w` locations of a feature grid. The vector
/// at location `l` moves to `mapping[l]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationMap {
    pub grid: (usize, usize),
    pub mapping: Vec<usize>,
    pub kind: ScrambleKind,
    pub seed: u64,
}

impl PermutationMap {
    pub fn new(grid: (usize, usize), mapping: Vec<usize>, kind: ScrambleKind, seed: u64) -> Result<Self> {
        let n = grid.0 * grid.1;
        if mapping.len() != n {
            return Err(EscError::Permutation(format!(
                "{} entries for a {}x{} grid",
                mapping.len(),
                grid.0,
                grid.1
            )));
        }
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(EscError::Permutation(format!("index {m} repeated or out of range")));
            }
        }
        Ok(Self {
            grid,
            mapping,
            kind,
            seed,
        })
    }

    pub fn identity(grid: (usize, usize)) -> Self {
        Self {
            grid,
            mapping: (0..grid.0 * grid.1).collect(),
            kind: ScrambleKind::Global,
            seed: 0,
        }
    }

    pub fn random(grid: (usize, usize), kind: ScrambleKind, seed: u64) -> Result<Self> {
        let (h, w) = grid;
        let mut rng = rng::substream(seed, "permutation");
        let mapping = match kind {
            ScrambleKind::Global => {
                let mut m: Vec<usize> = (0..h * w).collect();
                m.shuffle(&mut rng);
                m
            }
            ScrambleKind::Local { window } => {
                if window == 0 {
                    return Err(EscError::Permutation("local window must be positive".into()));
                }
                let mut m: Vec<usize> = (0..h * w).collect();
                for ty in (0..h).step_by(window) {
                    for tx in (0..w).step_by(window) {
                        let cells: Vec<usize> = (ty..(ty + window).min(h))
                            .flat_map(|y| (tx..(tx + window).min(w)).map(move |x| y * w + x))
                            .collect();
                        let mut targets = cells.clone();
                        targets.shuffle(&mut rng);
                        for (src, dst) in cells.into_iter().zip(targets) {
                            m[src] = dst;
                        }
                    }
                }
                m
            }
        };
        Self::new(grid, mapping, kind, seed)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (l, &d) in self.mapping.iter().enumerate() {
            inv[d] = l;
        }
        Self {
            grid: self.grid,
            mapping: inv,
            kind: self.kind,
            seed: self.seed,
        }
    }

    /// Largest Chebyshev distance any location is moved.
    pub fn max_displacement(&self) -> usize {
        let w = self.grid.1;
        self.mapping
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                let dy = (l / w).abs_diff(d / w);
                let dx = (l % w).abs_diff(d % w);
                dy.max(dx)
            })
            .max()
            .unwrap_or(0)
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(l, &d)| l == d)
    }
}

/// Permutes the spatial locations of an NCHW tensor; channel vectors move
/// intact.
pub fn apply_scramble<T: Scalar>(features: &Tensor<T>, map: &PermutationMap) -> Result<Tensor<T>> {
    let (n, c, h, w) = features.dims4()?;
    if (h, w) != map.grid {
        return Err(EscError::Shape(format!(
            "permutation grid {:?} does not match feature map {h}x{w}",
            map.grid
        )));
    }
    Ok(crate::tensor::graph_permute(features, &map.mapping, n, c, h * w))
}
