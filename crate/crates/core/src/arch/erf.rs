use serde::{Deserialize, Serialize};

use super::spec::{ArchitectureSpec, FollowupKind};
use crate::tensor::same_padding;

/// Receptive-field bookkeeping for a forward sweep over convolutions.
///
/// `rf` is the side of the square of input pixels that can influence one
/// unit, `jump` the input-space distance between adjacent units, and `start`
/// the input coordinate of the centre of unit 0 (negative when the padded
/// border shifts it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveFieldState {
    pub rf: usize,
    pub jump: usize,
    pub start: i64,
    pub size: usize,
}

impl ReceptiveFieldState {
    pub fn input(size: usize) -> Self {
        Self {
            rf: 1,
            jump: 1,
            start: 0,
            size,
        }
    }

    pub fn conv(self, kernel: usize, stride: usize) -> Self {
        let (out, pad) = same_padding(self.size, kernel, stride);
        Self {
            rf: self.rf + (kernel - 1) * self.jump,
            jump: self.jump * stride,
            start: self.start + (((kernel - 1) / 2) as i64 - pad as i64) * self.jump as i64,
            size: out,
        }
    }

    /// Input-space centre of unit `index` along one axis.
    pub fn centre(&self, index: usize) -> i64 {
        self.start + (index * self.jump) as i64
    }

    /// Inclusive input-space bounds of the theoretical receptive square.
    pub fn bounds(&self, index: usize) -> (i64, i64) {
        let half = ((self.rf - 1) / 2) as i64;
        let c = self.centre(index);
        (c - half, c + half)
    }
}

/// Sweeps the stem and every residual unit of `spec` (and optionally a
/// follow-up stack) and returns the state at the last convolutional layer.
pub fn receptive_field(spec: &ArchitectureSpec, followup: Option<FollowupKind>) -> ReceptiveFieldState {
    let mut state = ReceptiveFieldState::input(spec.input_size).conv(spec.stem.kernel, spec.stem.stride);
    let mut units = spec.units();
    if let Some(kind) = followup {
        units.extend(kind.units(spec.output_channels()));
    }
    for unit in units {
        for (k, s) in unit.convs() {
            state = state.conv(k, s);
        }
    }
    state
}

/// Theoretical ERF side, in pixels, of the last convolutional layer.
pub fn compute_theoretical_erf(spec: &ArchitectureSpec, followup: Option<FollowupKind>) -> usize {
    receptive_field(spec, followup).rf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::{BlockSpec, DESK_ERFS, FULL_ERFS};

    #[test]
    fn reference_table_erfs() {
        for erf in FULL_ERFS {
            let spec = ArchitectureSpec::full(erf, 10).unwrap();
            assert_eq!(compute_theoretical_erf(&spec, None), erf);
        }
    }

    #[test]
    fn composed_erf11_reaches_235() {
        let spec = ArchitectureSpec::full(11, 10).unwrap();
        assert_eq!(compute_theoretical_erf(&spec, Some(FollowupKind::Aggregating)), 235);
        assert_eq!(compute_theoretical_erf(&spec, Some(FollowupKind::OneByOne)), 11);
    }

    #[test]
    fn desk_family_erfs() {
        for erf in DESK_ERFS {
            let spec = ArchitectureSpec::desk(erf, 10, 1).unwrap();
            assert_eq!(compute_theoretical_erf(&spec, None), erf);
        }
    }

    #[test]
    fn pointwise_network_has_unit_erf() {
        let mut spec = ArchitectureSpec::desk(7, 10, 1).unwrap();
        spec.stem.kernel = 1;
        for b in &mut spec.blocks {
            b.middle_filters.iter_mut().for_each(|k| *k = 1);
        }
        assert_eq!(compute_theoretical_erf(&spec, None), 1);
    }

    #[test]
    fn centres_follow_jump() {
        let spec = ArchitectureSpec::desk(63, 10, 1).unwrap();
        let rf = receptive_field(&spec, None);
        assert_eq!(rf.jump, 8);
        assert_eq!(rf.start, 0);
        assert_eq!(rf.bounds(4), (1, 63));
    }

    #[test]
    fn strided_wide_kernel_shifts_start() {
        let mut spec = ArchitectureSpec::desk(7, 10, 1).unwrap();
        spec.blocks = vec![BlockSpec {
            units: 1,
            width: 4,
            block_stride: 1,
            middle_filters: vec![3],
        }];
        spec.stem.stride = 2;
        spec.input_size = 8;
        // 3x3 stride 2 on 8 -> out 4, total pad 1, pad before 0
        let st = receptive_field(&spec, None);
        assert_eq!(st.start, 1);
        assert_eq!(st.size, 4);
    }
}
