//! Representational similarity analysis: activation extraction, first- and
//! second-order RDMs, classical MDS and explained variance between RDMs.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::ComposedModel;
use crate::data::{PreprocessConfig, SplitData};
use crate::error::{EscError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub id: String,
    pub class: usize,
    /// Position in the split the stimulus was drawn from.
    pub index: usize,
}

/// Flattened activations of every recorded layer for an ordered stimulus
/// list: `activations[layer][stimulus]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub model: String,
    pub stimuli: Vec<Stimulus>,
    pub layers: Vec<String>,
    pub activations: Vec<Vec<Vec<f64>>>,
}

pub const GAP_LAYER: &str = "gap";
pub const SOFTMAX_LAYER: &str = "softmax";

impl ActivationSet {
    pub fn layer(&self, tag: &str) -> Result<&[Vec<f64>]> {
        self.layers
            .iter()
            .position(|l| l == tag)
            .map(|i| self.activations[i].as_slice())
            .ok_or_else(|| EscError::Config(format!("layer {tag:?} not recorded for {}", self.model)))
    }

    pub fn stimulus_ids(&self) -> Vec<String> {
        self.stimuli.iter().map(|s| s.id.clone()).collect()
    }

    /// Restriction to a subset of stimuli, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            model: self.model.clone(),
            stimuli: indices.iter().map(|&i| self.stimuli[i].clone()).collect(),
            layers: self.layers.clone(),
            activations: self
                .activations
                .iter()
                .map(|layer| indices.iter().map(|&i| layer[i].clone()).collect())
                .collect(),
        }
    }

    pub fn rdm(&self, tag: &str, guard: ZeroVariance) -> Result<Rdm> {
        let ids = self.stimulus_ids();
        let mut r = compute_rdm(self.layer(tag)?, &ids, guard)?;
        r.provenance.model = self.model.clone();
        r.provenance.layer = tag.to_string();
        Ok(r)
    }
}

/// `images_per_class` random test images from each of `classes`, in class
/// order.
pub fn sample_stimuli(split: &SplitData, classes: &[usize], images_per_class: usize, seed: u64) -> Result<Vec<Stimulus>> {
    let mut r = rng::substream(seed, "stimuli");
    let mut out = Vec::new();
    for &c in classes {
        let mut pool: Vec<usize> = (0..split.len()).filter(|&i| split.labels[i] == c).collect();
        if pool.len() < images_per_class {
            return Err(EscError::Data(format!(
                "class {c} has {} images, {images_per_class} requested",
                pool.len()
            )));
        }
        pool.shuffle(&mut r);
        pool.truncate(images_per_class);
        pool.sort_unstable();
        out.extend(pool.into_iter().map(|i| Stimulus {
            id: split.ids[i].clone(),
            class: c,
            index: i,
        }));
    }
    Ok(out)
}

/// Records every residual-unit output, the pooled vector and the softmax
/// (or logit) layer for the given stimuli; `only` restricts the layers kept.
pub fn extract_activations(
    model: &mut ComposedModel,
    name: &str,
    split: &SplitData,
    pre: &PreprocessConfig,
    stimuli: &[Stimulus],
    logits_instead_of_softmax: bool,
    only: Option<&[&str]>,
) -> Result<ActivationSet> {
    let mut layers: Vec<String> = Vec::new();
    let mut activations: Vec<Vec<Vec<f64>>> = Vec::new();
    for chunk in stimuli.chunks(32) {
        let idx: Vec<usize> = chunk.iter().map(|s| s.index).collect();
        let x = split.eval_batch(&idx, pre)?;
        let out = model.layer_outputs(&x, None, true)?;
        let last = if logits_instead_of_softmax { out.logits } else { out.probs };
        let mut tensors: Vec<(String, crate::tensor::Tensor<f32>)> = out.units;
        tensors.push((GAP_LAYER.into(), out.gap));
        tensors.push((SOFTMAX_LAYER.into(), last));
        if let Some(keep) = only {
            tensors.retain(|(t, _)| keep.contains(&t.as_str()));
        }
        if layers.is_empty() {
            layers = tensors.iter().map(|(t, _)| t.clone()).collect();
            activations = vec![Vec::with_capacity(stimuli.len()); layers.len()];
            if let Some(missing) = only.into_iter().flatten().find(|t| !layers.iter().any(|l| l == *t)) {
                return Err(EscError::Config(format!("layer {missing:?} not recorded for {name}")));
            }
        }
        for (li, (_, t)) in tensors.iter().enumerate() {
            let per = t.numel() / chunk.len();
            for s in 0..chunk.len() {
                activations[li].push(t.data()[s * per..(s + 1) * per].iter().map(|v| *v as f64).collect());
            }
        }
    }
    Ok(ActivationSet {
        model: name.to_string(),
        stimuli: stimuli.to_vec(),
        layers,
        activations,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdmProvenance {
    pub model: String,
    pub layer: String,
    pub stimuli: Vec<String>,
    pub repetitions: usize,
}

/// Symmetric, zero-diagonal matrix of correlation distances, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rdm {
    pub n: usize,
    pub values: Vec<f64>,
    pub provenance: RdmProvenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ZeroVariance {
    Strict,
    Jitter { seed: u64 },
}

fn centred(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

/// Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ca, na) = centred(a);
    let (cb, nb) = centred(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

impl Rdm {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Strict upper triangle, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    fn from_fn(n: usize, provenance: RdmProvenance, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j)?;
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Ok(Self { n, values, provenance })
    }

    /// Same matrix with rows and columns reordered: `out[i][j] = self[order[i]][order[j]]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = self.get(order[i], order[j]);
            }
        }
        let mut provenance = self.provenance.clone();
        if provenance.stimuli.len() == n {
            provenance.stimuli = order.iter().map(|&i| self.provenance.stimuli[i].clone()).collect();
        }
        Self { n, values, provenance }
    }

    /// JSON header line followed by `n * n` little-endian f64 values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::json!({ "format": "esc-rdm", "version": 1, "n": self.n, "provenance": self.provenance });
        writeln!(w, "{header}")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: serde_json::Value = serde_json::from_str(&line)?;
        if header["format"] != "esc-rdm" {
            return Err(EscError::Format("not an RDM file".into()));
        }
        let n = header["n"]
            .as_u64()
            .ok_or_else(|| EscError::Format("RDM header lacks n".into()))? as usize;
        let provenance: RdmProvenance = serde_json::from_value(header["provenance"].clone())?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * n * 8 {
            return Err(EscError::Format(format!("RDM payload has {} bytes for n = {n}", bytes.len())));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        Ok(Self { n, values, provenance })
    }
}

/// First-order RDM: `1 - pearson(v_i, v_j)`.
pub fn compute_rdm(vectors: &[Vec<f64>], ids: &[String], guard: ZeroVariance) -> Result<Rdm> {
    let n = vectors.len();
    if n < 3 {
        return Err(EscError::Config(format!("an RDM needs at least 3 stimuli, got {n}")));
    }
    let mut owned;
    let mut vs: &[Vec<f64>] = vectors;
    for (i, v) in vectors.iter().enumerate() {
        if centred(v).1 == 0.0 {
            match guard {
                ZeroVariance::Strict => {
                    return Err(EscError::Degenerate(format!(
                        "activation of stimulus {} has zero variance",
                        ids.get(i).map_or_else(|| i.to_string(), Clone::clone)
                    )))
                }
                ZeroVariance::Jitter { seed } => {
                    log::warn!("jittering zero-variance activations of stimulus {i}");
                    owned = vs.to_vec();
                    let noise = Normal::new(0.0, 1e-8).expect("valid");
                    let mut r = rng::substream(seed, &format!("jitter/{i}"));
                    for x in owned[i].iter_mut() {
                        *x += noise.sample(&mut r);
                    }
                    vs = &owned;
                }
            }
        }
    }
    let normed: Vec<(Vec<f64>, f64)> = vs.iter().map(|v| centred(v)).collect();
    let provenance = RdmProvenance {
        stimuli: ids.to_vec(),
        repetitions: 1,
        ..Default::default()
    };
    Rdm::from_fn(n, provenance, |i, j| {
        let (a, na) = &normed[i];
        let (b, nb) = &normed[j];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        Ok(1.0 - (dot / (na * nb)).clamp(-1.0, 1.0))
    })
}

/// Elementwise mean of RDMs over identical stimulus lists.
pub fn average_rdms(rdms: &[Rdm]) -> Result<Rdm> {
    let first = rdms.first().ok_or_else(|| EscError::Config("no RDMs to average".into()))?;
    for r in rdms {
        if r.n != first.n || r.provenance.stimuli != first.provenance.stimuli {
            return Err(EscError::Config("averaged RDMs must share their stimuli".into()));
        }
    }
    let k = rdms.len() as f64;
    let values = (0..first.values.len())
        .map(|i| rdms.iter().map(|r| r.values[i]).sum::<f64>() / k)
        .collect();
    let mut provenance = first.provenance.clone();
    provenance.repetitions = rdms.iter().map(|r| r.provenance.repetitions).sum();
    Ok(Rdm {
        n: first.n,
        values,
        provenance,
    })
}

/// RDM over RDMs: `1 - pearson` of strict upper triangles.
pub fn second_order_rdm(rdms: &[Rdm]) -> Result<Rdm> {
    let first = rdms.first().ok_or_else(|| EscError::Config("no RDMs given".into()))?;
    if rdms.iter().any(|r| r.n != first.n || r.provenance.stimuli != first.provenance.stimuli) {
        return Err(EscError::Config("first-order RDMs must share size and stimuli".into()));
    }
    let tris: Vec<Vec<f64>> = rdms.iter().map(Rdm::upper_triangle).collect();
    for (t, r) in tris.iter().zip(rdms) {
        if centred(t).1 == 0.0 {
            return Err(EscError::Degenerate(format!(
                "RDM {}/{} has a constant upper triangle",
                r.provenance.model, r.provenance.layer
            )));
        }
    }
    let labels: Vec<String> = rdms
        .iter()
        .map(|r| format!("{}/{}", r.provenance.model, r.provenance.layer))
        .collect();
    let provenance = RdmProvenance {
        model: "second-order".into(),
        layer: String::new(),
        stimuli: labels,
        repetitions: 1,
    };
    Rdm::from_fn(rdms.len(), provenance, |i, j| {
        Ok(1.0 - pearson(&tris[i], &tris[j]).expect("variance checked"))
    })
}

/// Classical (Torgerson) MDS; returns `n` points of `dims` coordinates.
pub fn classical_mds(rdm: &Rdm, dims: usize) -> Result<Vec<Vec<f64>>> {
    let n = rdm.n;
    if dims == 0 || dims + 1 > n {
        return Err(EscError::Config(format!("cannot embed {n} points in {dims} dimensions")));
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| rdm.get(i, j).powi(2));
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let mut coords = vec![vec![0.0; dims]; n];
    for (d, &k) in order.iter().take(dims).enumerate() {
        let mut lambda = eig.eigenvalues[k];
        if lambda < 0.0 {
            log::warn!("clamping negative MDS eigenvalue {lambda:e} to zero");
            lambda = 0.0;
        }
        let v = eig.eigenvectors.column(k);
        // fix the sign so the result is deterministic
        let pivot = (0..n).max_by(|&a, &c| v[a].abs().total_cmp(&v[c].abs())).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][d] = sign * v[i] * lambda.sqrt();
        }
    }
    for d in 0..dims {
        let mean = coords.iter().map(|c| c[d]).sum::<f64>() / n as f64;
        for c in coords.iter_mut() {
            c[d] -= mean;
        }
    }
    Ok(coords)
}

/// Squared Pearson correlation of the strict upper triangles.
pub fn rdm_r2(a: &Rdm, b: &Rdm) -> Result<f64> {
    if a.n != b.n {
        return Err(EscError::Shape(format!("RDM sizes differ: {} vs {}", a.n, b.n)));
    }
    pearson(&a.upper_triangle(), &b.upper_triangle())
        .map(|r| r * r)
        .ok_or_else(|| EscError::Degenerate("RDM with constant upper triangle".into()))
}

/// Per repetition, R² between the two models' RDMs on freshly sampled
/// stimuli of the `sensitive` classes minus the same on the `insensitive`
/// classes. Both activation sets must cover the same stimuli.
#[allow(clippy::too_many_arguments)]
pub fn class_conditioned_r2_gap(
    a: &ActivationSet,
    b: &ActivationSet,
    layer: &str,
    sensitive: &[usize],
    insensitive: &[usize],
    n_images: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if a.stimuli != b.stimuli {
        return Err(EscError::Config("activation sets cover different stimuli".into()));
    }
    if sensitive.iter().any(|c| insensitive.contains(c)) {
        return Err(EscError::Config("sensitive and insensitive classes overlap".into()));
    }
    let pool = |c: usize| -> Result<Vec<usize>> {
        let p: Vec<usize> = (0..a.stimuli.len()).filter(|&i| a.stimuli[i].class == c).collect();
        if p.len() < n_images {
            return Err(EscError::Data(format!("class {c} has {} stimuli, {n_images} needed", p.len())));
        }
        Ok(p)
    };
    let pools_s = sensitive.iter().map(|&c| pool(c)).collect::<Result<Vec<_>>>()?;
    let pools_i = insensitive.iter().map(|&c| pool(c)).collect::<Result<Vec<_>>>()?;
    let mut r = rng::substream(seed, "class-conditioned");
    let mut draw = |pools: &[Vec<usize>]| -> Vec<usize> {
        let mut out = Vec::new();
        for p in pools {
            let mut p = p.clone();
            p.shuffle(&mut r);
            out.extend_from_slice(&p[..n_images]);
        }
        out
    };
    let r2_on = |idx: &[usize]| -> Result<f64> {
        let ra = a.select(idx).rdm(layer, ZeroVariance::Strict)?;
        let rb = b.select(idx).rdm(layer, ZeroVariance::Strict)?;
        rdm_r2(&ra, &rb)
    };
    let mut out = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let s = draw(&pools_s);
        let i = draw(&pools_i);
        out.push(r2_on(&s)? - r2_on(&i)?);
    }
    Ok(out)
}
