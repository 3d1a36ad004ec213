use serde::{Deserialize, Serialize};

use super::network::{ForwardOptions, Network};
use super::permutation::PermutationMap;
use super::spec::{ArchitectureSpec, FollowupKind};
use crate::error::{EscError, Result};
use crate::tensor::{softmax_rows, Graph, Tensor};

/// The four trained model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    BaseFollowup,
    BaseOneByOne,
    BaseFollowupScrambled,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::BaseFollowup,
        Variant::BaseOneByOne,
        Variant::BaseFollowupScrambled,
    ];

    pub fn followup(self) -> Option<FollowupKind> {
        match self {
            Variant::Base => None,
            Variant::BaseFollowup | Variant::BaseFollowupScrambled => Some(FollowupKind::Aggregating),
            Variant::BaseOneByOne => Some(FollowupKind::OneByOne),
        }
    }

    pub fn scrambled_training(self) -> bool {
        self == Variant::BaseFollowupScrambled
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseFollowup => "base+followup",
            Variant::BaseOneByOne => "base+1x1",
            Variant::BaseFollowupScrambled => "base+followup+scrambled",
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub variant: Variant,
    pub base: ArchitectureSpec,
    pub scrambler: Option<PermutationMap>,
    pub seed: u64,
}

/// A base network, optionally frozen and followed by a (possibly
/// scrambled) follow-up stack with its own head.
#[derive(Clone, Debug)]
pub struct ComposedModel {
    pub descriptor: ModelDescriptor,
    pub base: Network,
    pub followup: Option<Network>,
}

/// Activations of one forward pass, one entry per recorded layer.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    /// `(tag, [N, ...] activations)` for each residual unit output.
    pub units: Vec<(String, Tensor<f32>)>,
    pub gap: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub probs: Tensor<f32>,
}

impl ComposedModel {
    /// Untrained standalone base network.
    pub fn new_base(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            base: Network::base(spec, seed)?,
            followup: None,
            descriptor: ModelDescriptor {
                variant: Variant::Base,
                base: spec.clone(),
                scrambler: None,
                seed,
            },
        })
    }

    /// Attaches a fresh follow-up stack to a (trained) base. The base is
    /// treated as frozen from here on.
    pub fn compose(base: &ComposedModel, variant: Variant, scrambler: Option<PermutationMap>, seed: u64) -> Result<Self> {
        if base.descriptor.variant != Variant::Base {
            return Err(EscError::Config("compose expects a base-only model".into()));
        }
        let kind = variant
            .followup()
            .ok_or_else(|| EscError::Config("compose needs a follow-up variant".into()))?;
        let spec = &base.descriptor.base;
        let side = spec.output_size();
        if let Some(p) = &scrambler {
            if p.grid != (side, side) {
                return Err(EscError::Shape(format!(
                    "scrambler grid {:?} does not match base output {side}x{side}",
                    p.grid
                )));
            }
        }
        if variant.scrambled_training() != scrambler.is_some() {
            return Err(EscError::Config(format!(
                "variant {} {} a training scrambler",
                variant.tag(),
                if variant.scrambled_training() { "requires" } else { "forbids" }
            )));
        }
        Ok(Self {
            base: base.base.clone(),
            followup: Some(Network::followup(kind, spec.output_channels(), spec.head.classes, seed)),
            descriptor: ModelDescriptor {
                variant,
                base: spec.clone(),
                scrambler,
                seed,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.descriptor.variant
    }

    pub fn has_boundary(&self) -> bool {
        self.followup.is_some()
    }

    pub fn classes(&self) -> usize {
        self.descriptor.base.head.classes
    }

    /// Frozen base features (eval mode, no gradients).
    pub fn base_features(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.base.features(x)
    }

    /// Applies the training-time scrambler and then an optional extra
    /// test-time permutation to base features.
    pub fn boundary(&self, features: Tensor<f32>, test_map: Option<&PermutationMap>) -> Result<Tensor<f32>> {
        let mut f = features;
        if let Some(p) = &self.descriptor.scrambler {
            f = super::permutation::apply_scramble(&f, p)?;
        }
        if let Some(p) = test_map {
            if !self.has_boundary() {
                return Err(EscError::Config(
                    "test-time scrambling needs a base/follow-up boundary".into(),
                ));
            }
            f = super::permutation::apply_scramble(&f, p)?;
        }
        Ok(f)
    }

    /// Class probabilities `[N, K]`.
    pub fn predict(&mut self, x: &Tensor<f32>, test_map: Option<&PermutationMap>) -> Result<Tensor<f32>> {
        Ok(self.layer_outputs(x, test_map, false)?.probs)
    }

    /// Runs the model in eval mode, recording every residual-unit output
    /// (base units then follow-up units), the pooled vector, logits and
    /// softmax probabilities. Unit outputs are only materialized when
    /// `record_units` is set.
    pub fn layer_outputs(
        &mut self,
        x: &Tensor<f32>,
        test_map: Option<&PermutationMap>,
        record_units: bool,
    ) -> Result<LayerOutputs> {
        if test_map.is_some() && !self.has_boundary() {
            return Err(EscError::Config(
                "test-time scrambling needs a base/follow-up boundary".into(),
            ));
        }
        let mut units = Vec::new();
        let mut g = Graph::new();
        let base_vars = self.base.bind(&mut g, false);
        let input = g.leaf(x.clone(), false);
        let base_out = self.base.trunk(&mut g, input, &base_vars, ForwardOptions::EVAL)?;
        if record_units {
            for (i, v) in base_out.iter().enumerate() {
                units.push((format!("base.unit{i}"), g.value(*v).clone()));
            }
        }
        let features = *base_out.last().unwrap_or(&input);
        if self.followup.is_none() {
            let (pooled, logits) = self.base.head(&mut g, features, &base_vars)?;
            let logits = g.value(logits).clone();
            return Ok(LayerOutputs {
                units,
                gap: g.value(pooled).clone(),
                probs: softmax_rows(&logits),
                logits,
            });
        }
        let f = self.boundary(g.take_value(features), test_map)?;
        drop(g);
        let mut out = self.from_features(f, record_units)?;
        units.append(&mut out.units);
        out.units = units;
        Ok(out)
    }

    /// Runs the follow-up stack on base features that already went through
    /// [`ComposedModel::boundary`].
    pub fn from_features(&mut self, features: Tensor<f32>, record_units: bool) -> Result<LayerOutputs> {
        let fu = self
            .followup
            .as_mut()
            .ok_or_else(|| EscError::Config("model has no follow-up stack".into()))?;
        let mut g = Graph::new();
        let vars = fu.bind(&mut g, false);
        let fin = g.leaf(features, false);
        let trace = fu.forward(&mut g, fin, &vars, ForwardOptions::EVAL)?;
        let mut units = Vec::new();
        if record_units {
            for (i, v) in trace.unit_outputs.iter().enumerate() {
                units.push((format!("followup.unit{i}"), g.value(*v).clone()));
            }
        }
        let logits = g.value(trace.logits).clone();
        Ok(LayerOutputs {
            units,
            gap: g.value(trace.pooled).clone(),
            probs: softmax_rows(&logits),
            logits,
        })
    }
}
