use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::spec::{ArchitectureSpec, FollowupKind, UnitSpec};
use crate::error::{EscError, Result};
use crate::rng;
use crate::tensor::{BatchNormState, Graph, NormMode, Tensor, Var};

/// Named parameters in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Tensor<f32>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<f32>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: NormMode,
    /// Replace every ReLU by the identity.
    pub linear: bool,
}

impl ForwardOptions {
    pub const EVAL: Self = Self {
        mode: NormMode::Eval,
        linear: false,
    };
    pub const TRAIN: Self = Self {
        mode: NormMode::Train,
        linear: false,
    };
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    stride: usize,
    state: BatchNormState<f32>,
}

#[derive(Clone, Debug)]
struct ResidualUnit {
    spec: UnitSpec,
    reduce: ConvBn,
    middle: ConvBn,
    expand: ConvBn,
    projection: Option<ConvBn>,
}

/// Stem (optional) + residual units + global-average-pool + dense head.
#[derive(Clone, Debug)]
pub struct Network {
    pub params: ParamStore,
    stem: Option<ConvBn>,
    units: Vec<ResidualUnit>,
    head_weight: usize,
    head_bias: usize,
    in_channels: usize,
    classes: usize,
}

struct Builder {
    params: ParamStore,
    seed: u64,
}

impl Builder {
    fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor<f32> {
        let mut r = rng::substream(self.seed, name);
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut r) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(&format!("{name}.weight"), &[cout, cin, k, k], (2.0 / fan_in).sqrt());
        ConvBn {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            gamma: self.params.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0)),
            beta: self.params.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
            stride,
            state: BatchNormState::new(cout),
        }
    }

    fn unit(&mut self, name: &str, u: UnitSpec) -> ResidualUnit {
        ResidualUnit {
            spec: u,
            reduce: self.conv_bn(&format!("{name}.conv1"), u.in_channels, u.width, 1, u.stride),
            middle: self.conv_bn(&format!("{name}.conv2"), u.width, u.width, u.kernel, 1),
            expand: self.conv_bn(&format!("{name}.conv3"), u.width, u.width, 1, 1),
            projection: u
                .projection
                .then(|| self.conv_bn(&format!("{name}.proj"), u.in_channels, u.width, 1, u.stride)),
        }
    }
}

/// Outputs recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Output of every residual unit; the last entry is the final feature map.
    pub unit_outputs: Vec<Var>,
    pub pooled: Var,
    pub logits: Var,
}

impl Network {
    fn assemble(
        stem: Option<(usize, usize, usize, usize)>,
        units: Vec<UnitSpec>,
        classes: usize,
        in_channels: usize,
        seed: u64,
    ) -> Self {
        let mut b = Builder {
            params: ParamStore::default(),
            seed,
        };
        let stem = stem.map(|(cin, cout, k, s)| b.conv_bn("stem", cin, cout, k, s));
        let units: Vec<_> = units
            .into_iter()
            .enumerate()
            .map(|(i, u)| b.unit(&format!("unit{i}"), u))
            .collect();
        let channels = units.last().map_or(in_channels, |u| u.spec.width);
        let hw = b.normal("head.weight", &[classes, channels], (1.0 / channels as f64).sqrt());
        let head_weight = b.params.add("head.weight".into(), hw);
        let head_bias = b.params.add("head.bias".into(), Tensor::zeros(&[classes]));
        Self {
            params: b.params,
            stem,
            units,
            head_weight,
            head_bias,
            in_channels,
            classes,
        }
    }

    /// Standalone base network described by `spec`.
    pub fn base(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self::assemble(
            Some((spec.in_channels, spec.stem.out_channels, spec.stem.kernel, spec.stem.stride)),
            spec.units(),
            spec.head.classes,
            spec.in_channels,
            seed,
        ))
    }

    /// Follow-up stack (no stem) reading `channels`-wide base features.
    pub fn followup(kind: FollowupKind, channels: usize, classes: usize, seed: u64) -> Self {
        Self::assemble(None, kind.units(channels), classes, channels, seed)
    }

    /// Network built from arbitrary unit specs; used by tests and probes.
    pub fn from_units(
        in_channels: usize,
        stem: Option<(usize, usize, usize)>,
        units: Vec<UnitSpec>,
        classes: usize,
        seed: u64,
    ) -> Self {
        Self::assemble(
            stem.map(|(cout, k, s)| (in_channels, cout, k, s)),
            units,
            classes,
            in_channels,
            seed,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn out_channels(&self) -> usize {
        self.units.last().map_or(self.in_channels, |u| u.spec.width)
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// Conv weight/bias and head parameters (BN gamma/beta excluded).
    pub fn conv_weight_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut push = |c: &ConvBn| out.push(c.weight);
        if let Some(s) = &self.stem {
            push(s);
        }
        for u in &self.units {
            push(&u.reduce);
            push(&u.middle);
            push(&u.expand);
            if let Some(p) = &u.projection {
                push(p);
            }
        }
        out.push(self.head_weight);
        out
    }

    /// Running statistics of every normalization layer, in declaration order.
    pub fn norm_states(&self) -> Vec<(&str, &BatchNormState<f32>)> {
        let mut out = Vec::new();
        let prefix = |c: &ConvBn| self.params.names[c.weight].trim_end_matches(".weight");
        if let Some(s) = &self.stem {
            out.push((prefix(s), &s.state));
        }
        for u in &self.units {
            for c in [&u.reduce, &u.middle, &u.expand] {
                out.push((prefix(c), &c.state));
            }
            if let Some(p) = &u.projection {
                out.push((prefix(p), &p.state));
            }
        }
        out
    }

    pub fn norm_states_mut(&mut self) -> Vec<&mut BatchNormState<f32>> {
        let mut out = Vec::new();
        if let Some(s) = &mut self.stem {
            out.push(&mut s.state);
        }
        for u in &mut self.units {
            out.push(&mut u.reduce.state);
            out.push(&mut u.middle.state);
            out.push(&mut u.expand.state);
            if let Some(p) = &mut u.projection {
                out.push(&mut p.state);
            }
        }
        out
    }

    /// Places every parameter on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<Var> {
        self.params
            .values
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    fn conv_bn(
        g: &mut Graph<f32>,
        layer: &mut ConvBn,
        x: Var,
        vars: &[Var],
        opts: ForwardOptions,
    ) -> Result<Var> {
        let y = g.conv2d(x, vars[layer.weight], vars[layer.bias], layer.stride)?;
        g.batch_norm(y, vars[layer.gamma], vars[layer.beta], &mut layer.state, opts.mode)
    }

    fn act(g: &mut Graph<f32>, x: Var, opts: ForwardOptions) -> Var {
        if opts.linear {
            x
        } else {
            g.relu(x)
        }
    }

    /// Runs the stem and residual units; returns every unit output.
    pub fn trunk(
        &mut self,
        g: &mut Graph<f32>,
        input: Var,
        vars: &[Var],
        opts: ForwardOptions,
    ) -> Result<Vec<Var>> {
        let (_, c, _, _) = g.value(input).dims4()?;
        if c != self.in_channels {
            return Err(EscError::Shape(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut x = input;
        if let Some(stem) = &mut self.stem {
            let y = Self::conv_bn(g, stem, x, vars, opts)?;
            x = Self::act(g, y, opts);
        }
        let mut outputs = Vec::with_capacity(self.units.len());
        for unit in &mut self.units {
            let a = Self::conv_bn(g, &mut unit.reduce, x, vars, opts)?;
            let a = Self::act(g, a, opts);
            let b = Self::conv_bn(g, &mut unit.middle, a, vars, opts)?;
            let b = Self::act(g, b, opts);
            let c = Self::conv_bn(g, &mut unit.expand, b, vars, opts)?;
            let shortcut = match &mut unit.projection {
                Some(p) => Self::conv_bn(g, p, x, vars, opts)?,
                None => x,
            };
            let sum = g.add(c, shortcut)?;
            x = Self::act(g, sum, opts);
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Global average pool + dense layer on a feature map.
    pub fn head(&self, g: &mut Graph<f32>, features: Var, vars: &[Var]) -> Result<(Var, Var)> {
        let pooled = g.global_avg_pool(features)?;
        let logits = g.dense(pooled, vars[self.head_weight], vars[self.head_bias])?;
        Ok((pooled, logits))
    }

    /// Full forward pass on a fresh graph.
    pub fn forward(
        &mut self,
        g: &mut Graph<f32>,
        input: Var,
        vars: &[Var],
        opts: ForwardOptions,
    ) -> Result<Trace> {
        let unit_outputs = self.trunk(g, input, vars, opts)?;
        let features = *unit_outputs.last().unwrap_or(&input);
        let (pooled, logits) = self.head(g, features, vars)?;
        Ok(Trace {
            unit_outputs,
            pooled,
            logits,
        })
    }

    /// Inference-only forward returning the final feature map.
    pub fn features(&mut self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.leaf(input.clone(), false);
        let outs = self.trunk(&mut g, x, &vars, ForwardOptions::EVAL)?;
        Ok(g.take_value(*outs.last().unwrap_or(&x)))
    }

    /// Gradients of every parameter after a backward pass.
    pub fn collect_grads(&self, g: &Graph<f32>, vars: &[Var]) -> Vec<Option<Vec<f32>>> {
        vars.iter().map(|v| g.grad(*v).map(<[f32]>::to_vec)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::ArchitectureSpec;

    fn narrow(spec: &ArchitectureSpec) -> ArchitectureSpec {
        let mut s = spec.clone();
        s.stem.out_channels = 2;
        for b in &mut s.blocks {
            b.width = 2;
        }
        s
    }

    #[test]
    fn erf11_forward_reaches_28_by_28() {
        let spec = narrow(&ArchitectureSpec::full(11, 5).unwrap());
        let mut net = Network::base(&spec, 3).unwrap();
        let x = Tensor::full(&[1, 3, 224, 224], 0.1);
        let f = net.features(&x).unwrap();
        assert_eq!(f.shape(), &[1, 2, 28, 28]);
        assert_eq!(net.unit_count(), 10);
    }

    #[test]
    fn logits_shape_and_finite() {
        let spec = ArchitectureSpec::desk(15, 10, 1).unwrap();
        let mut net = Network::base(&spec, 9).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let data: Vec<f32> = (0..3 * 64 * 64).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
        let x = g.leaf(Tensor::new(vec![3, 1, 64, 64], data).unwrap(), false);
        let t = net.forward(&mut g, x, &vars, ForwardOptions::TRAIN).unwrap();
        assert_eq!(g.value(t.logits).shape(), &[3, 10]);
        assert!(g.value(t.logits).all_finite());
        assert_eq!(g.value(*t.unit_outputs.last().unwrap()).shape(), &[3, 128, 8, 8]);
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ArchitectureSpec::desk(7, 10, 1).unwrap();
        let a = Network::base(&spec, 5).unwrap();
        let b = Network::base(&spec, 5).unwrap();
        let c = Network::base(&spec, 6).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn followup_output_sizes() {
        let x = Tensor::full(&[1, 8, 28, 28], 0.3);
        let mut agg = Network::followup(FollowupKind::Aggregating, 8, 3, 1);
        assert_eq!(agg.features(&x).unwrap().shape(), &[1, 8, 7, 7]);
        let mut pw = Network::followup(FollowupKind::OneByOne, 8, 3, 1);
        assert_eq!(pw.features(&x).unwrap().shape(), &[1, 8, 28, 28]);
    }

    #[test]
    fn one_by_one_followup_is_location_wise() {
        use rand::Rng;
        let mut r = rng::substream(2, "x");
        let data: Vec<f32> = (0..4 * 6 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![1, 4, 6, 6], data).unwrap();
        let mut pw = Network::followup(FollowupKind::OneByOne, 4, 3, 1);
        let base = pw.features(&x).unwrap();
        let mut y = x.clone();
        // perturb location (2, 3) in every channel
        for c in 0..4 {
            y.data_mut()[c * 36 + 2 * 6 + 3] += 0.5;
        }
        let out = pw.features(&y).unwrap();
        for c in 0..4 {
            for l in 0..36 {
                let i = c * 36 + l;
                if l == 2 * 6 + 3 {
                    continue;
                }
                assert_eq!(base.data()[i], out.data()[i], "location {l} changed");
            }
        }
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let spec = ArchitectureSpec::desk(7, 10, 1).unwrap();
        let mut net = Network::base(&spec, 5).unwrap();
        assert!(net.features(&Tensor::zeros(&[1, 3, 64, 64])).is_err());
    }
}
