//! Architecture generation: ERF-controlled base networks, follow-up stacks,
//! feature scrambling, receptive-field arithmetic and parameter matching.

mod erf;
mod model;
mod network;
mod params;
mod permutation;
mod probe;
mod spec;

pub use erf::{compute_theoretical_erf, receptive_field, ReceptiveFieldState};
pub use model::{ComposedModel, LayerOutputs, ModelDescriptor, Variant};
pub use network::{ForwardOptions, Network, ParamStore, Trace};
pub use params::{conv_params, count_followup_params, count_params, match_width, WidthMatch};
pub use permutation::{apply_scramble, PermutationMap, ScrambleKind};
pub use probe::{make_weights_positive, measure_empirical_erf, theoretical_state, ErfMask, UnitIndex};
pub use spec::{
    ArchitectureSpec, BlockSpec, FollowupKind, HeadSpec, StemSpec, UnitSpec, DESK_ERFS, SPEC_SCHEMA_VERSION,
    FULL_ERFS,
};
