//! Minimal recognizable configuration (MIRC) search over recursive 75%
//! corner crops, max-level histograms and k-means clustering of MIRC
//! latents.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::arch::ComposedModel;
use crate::error::{EscError, Result};
use crate::experiment::argmax_rows;
use crate::rng;
use crate::tensor::{bilinear_resize, Tensor};

pub const DEFAULT_CAP: usize = 10;
pub const SHRINK: f64 = 0.75;
const BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub level: usize,
}

impl PatchRect {
    pub fn root(w: usize, h: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w,
            h,
            level: 0,
        }
    }

    pub fn key(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.w, self.h)
    }

    /// Side lengths of the next level under the floor rule.
    pub fn child_size(&self) -> (usize, usize) {
        (shrink(self.w), shrink(self.h))
    }

    /// The four corner-anchored children: top-left, top-right, bottom-left,
    /// bottom-right.
    pub fn children(&self) -> [PatchRect; 4] {
        let (cw, ch) = self.child_size();
        let (dx, dy) = (self.w - cw, self.h - ch);
        let at = |x: usize, y: usize| PatchRect {
            x0: self.x0 + x,
            y0: self.y0 + y,
            w: cw,
            h: ch,
            level: self.level + 1,
        };
        [at(0, 0), at(dx, 0), at(0, dy), at(dx, dy)]
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }
}

pub fn shrink(side: usize) -> usize {
    (side as f64 * SHRINK).floor() as usize
}

/// `[start, floor(0.75 start), ...]` with `levels + 1` entries.
pub fn side_sequence(start: usize, levels: usize) -> Vec<usize> {
    std::iter::successors(Some(start), |s| Some(shrink(*s))).take(levels + 1).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    /// Probability of the predicted class.
    pub probability: f32,
}

/// Anything that can label image patches given their rectangles.
pub trait PatchClassifier {
    fn classify(&mut self, rects: &[PatchRect]) -> Result<Vec<Prediction>>;
}

impl<F: FnMut(&PatchRect) -> Prediction> PatchClassifier for F {
    fn classify(&mut self, rects: &[PatchRect]) -> Result<Vec<Prediction>> {
        Ok(rects.iter().map(|r| self(r)).collect())
    }
}

/// One distinct patch of the search. Corner-crop paths that reach the same
/// rectangle share a node, so the tree is stored as a DAG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MircNode {
    pub rect: PatchRect,
    pub predicted: usize,
    pub probability: f32,
    pub correct: bool,
    pub is_mirc: bool,
    /// Indices into [`MircTree::nodes`], in corner order; empty for
    /// unexpanded nodes.
    pub children: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MircTree {
    pub image_id: String,
    pub true_class: usize,
    pub model_id: String,
    pub cap: usize,
    /// Distinct patches in breadth-first order; `nodes[0]` is the full image.
    pub nodes: Vec<MircNode>,
    /// Distinct rectangles sent to the classifier.
    pub evaluated: usize,
}

impl MircTree {
    pub fn root(&self) -> &MircNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[MircNode] {
        &self.nodes
    }

    pub fn mircs(&self) -> Vec<&MircNode> {
        self.nodes.iter().filter(|n| n.is_mirc).collect()
    }

    pub fn max_level(&self) -> usize {
        self.mircs().iter().map(|n| n.rect.level).max().unwrap_or(0)
    }

    /// Highest-probability MIRC; ties go to the shallower level, then the
    /// lexicographically smaller rectangle.
    pub fn best_mirc(&self) -> Option<&MircNode> {
        self.mircs().into_iter().min_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then(a.rect.level.cmp(&b.rect.level))
                .then(a.rect.key().cmp(&b.rect.key()))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum MircOutcome {
    Tree(MircTree),
    /// The full image was misclassified; excluded from histograms.
    NotApplicable { image_id: String, predicted: usize },
}

impl MircOutcome {
    pub fn tree(&self) -> Option<&MircTree> {
        match self {
            MircOutcome::Tree(t) => Some(t),
            MircOutcome::NotApplicable { .. } => None,
        }
    }
}

fn expandable(r: &PatchRect, cap: usize) -> bool {
    let (cw, ch) = r.child_size();
    r.level < cap && cw >= 2 && ch >= 2
}

fn node(rect: PatchRect, p: Prediction, true_class: usize) -> MircNode {
    MircNode {
        rect,
        predicted: p.class,
        probability: p.probability,
        correct: p.class == true_class,
        is_mirc: false,
        children: Vec::new(),
    }
}

/// Recursive corner-crop search. Children are evaluated level by level in
/// batches and every distinct rectangle is classified exactly once.
pub fn mirc_search(
    classifier: &mut impl PatchClassifier,
    width: usize,
    height: usize,
    true_class: usize,
    cap: usize,
    image_id: &str,
    model_id: &str,
) -> Result<MircOutcome> {
    let root = PatchRect::root(width, height);
    let p = classifier.classify(&[root])?[0];
    if p.class != true_class {
        return Ok(MircOutcome::NotApplicable {
            image_id: image_id.to_string(),
            predicted: p.class,
        });
    }
    let mut nodes = vec![node(root, p, true_class)];
    let mut frontier = vec![0usize];
    while !frontier.is_empty() {
        frontier.retain(|&i| expandable(&nodes[i].rect, cap));
        let mut index: HashMap<(usize, usize, usize, usize), usize> = HashMap::new();
        let mut pending: Vec<PatchRect> = Vec::new();
        for &i in &frontier {
            for c in nodes[i].rect.children() {
                index.entry(c.key()).or_insert_with(|| {
                    pending.push(c);
                    pending.len() - 1
                });
            }
        }
        let preds = classifier.classify(&pending)?;
        if preds.len() != pending.len() {
            return Err(EscError::Shape("classifier returned the wrong number of predictions".into()));
        }
        let offset = nodes.len();
        nodes.extend(pending.iter().zip(preds).map(|(r, p)| node(*r, p, true_class)));
        for &i in &frontier {
            nodes[i].children = nodes[i].rect.children().iter().map(|c| offset + index[&c.key()]).collect();
        }
        frontier = (offset..nodes.len()).filter(|&i| nodes[i].correct).collect();
    }
    for i in 0..nodes.len() {
        let n = &nodes[i];
        let mirc = n.correct && n.children.iter().all(|&c| !nodes[c].correct);
        nodes[i].is_mirc = mirc;
    }
    let evaluated = nodes.len();
    Ok(MircOutcome::Tree(MircTree {
        image_id: image_id.to_string(),
        true_class,
        model_id: model_id.to_string(),
        cap,
        nodes,
        evaluated,
    }))
}

/// Re-predicts every node and checks the tree invariants: rectangles are
/// distinct and reachable from the root, internal nodes are correct with
/// their four corner crops as children, every MIRC is correct and either
/// sits at the depth limit or has four incorrect children.
pub fn validate_tree(tree: &MircTree, classifier: &mut impl PatchClassifier) -> Result<()> {
    let nodes = tree.nodes();
    let fail = |m: String| Err(EscError::Degenerate(format!("invalid MIRC tree {}: {m}", tree.image_id)));
    if nodes.is_empty() || nodes[0].rect.level != 0 || !nodes[0].correct {
        return fail("root must be correct at level 0".into());
    }
    let mut keys = HashSet::new();
    if !nodes.iter().all(|n| keys.insert(n.rect.key())) {
        return fail("a rectangle appears twice".into());
    }
    let mut reached = vec![false; nodes.len()];
    reached[0] = true;
    let rects: Vec<PatchRect> = nodes.iter().map(|n| n.rect).collect();
    let preds = classifier.classify(&rects)?;
    for (n, p) in nodes.iter().zip(&preds) {
        if p.class != n.predicted {
            return fail(format!("prediction changed for {:?}", n.rect));
        }
        if n.correct != (n.predicted == tree.true_class) {
            return fail(format!("correct flag wrong for {:?}", n.rect));
        }
        if !n.children.is_empty() {
            if n.children.len() != 4 || !n.correct {
                return fail(format!("bad expansion at {:?}", n.rect));
            }
            if n.children.iter().any(|&c| c >= nodes.len()) {
                return fail(format!("dangling child of {:?}", n.rect));
            }
            if n.children.iter().map(|&c| nodes[c].rect).ne(n.rect.children()) {
                return fail(format!("children of {:?} are not its corner crops", n.rect));
            }
            for &c in &n.children {
                reached[c] = true;
            }
        }
        let at_limit = !expandable(&n.rect, tree.cap);
        let expected_mirc = n.correct && (at_limit || n.children.iter().all(|&c| !nodes[c].correct));
        if n.is_mirc != expected_mirc {
            return fail(format!("MIRC flag wrong at {:?}", n.rect));
        }
        if n.correct && !at_limit && n.children.is_empty() {
            return fail(format!("correct node {:?} was not expanded", n.rect));
        }
    }
    if let Some(i) = reached.iter().position(|r| !r) {
        return fail(format!("{:?} is unreachable", nodes[i].rect));
    }
    Ok(())
}

/// Plain breadth-first enumeration over every corner-crop path, without
/// memoization or batching; returns the distinct MIRC rectangles, sorted.
/// Used to cross-check [`mirc_search`].
pub fn bfs_mircs(
    classify: &mut impl FnMut(&PatchRect) -> usize,
    width: usize,
    height: usize,
    true_class: usize,
    cap: usize,
) -> Vec<PatchRect> {
    let mut out = Vec::new();
    let root = PatchRect::root(width, height);
    if classify(&root) != true_class {
        return out;
    }
    let mut queue = VecDeque::from([root]);
    while let Some(r) = queue.pop_front() {
        let (cw, ch) = r.child_size();
        if r.level == cap || cw < 2 || ch < 2 {
            out.push(r);
            continue;
        }
        let good: Vec<PatchRect> = r.children().into_iter().filter(|c| classify(c) == true_class).collect();
        if good.is_empty() {
            out.push(r);
        }
        queue.extend(good);
    }
    out.sort();
    out.dedup();
    out
}

/// One count per tree at its deepest MIRC level; index = level.
pub fn max_mirc_level_histogram(trees: &[&MircTree], cap: usize) -> Result<Vec<usize>> {
    if trees.is_empty() {
        return Err(EscError::Config("no MIRC trees to summarize".into()));
    }
    let mut h = vec![0usize; cap + 1];
    for t in trees {
        h[t.max_level().min(cap)] += 1;
    }
    Ok(h)
}

/// Mean and standard deviation of normalized histograms across repetitions.
pub fn average_histograms(hists: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
    let bins = hists.first().map_or(0, Vec::len);
    let norm: Vec<Vec<f64>> = hists
        .iter()
        .map(|h| {
            let total = h.iter().sum::<usize>().max(1) as f64;
            h.iter().map(|c| *c as f64 / total).collect()
        })
        .collect();
    let k = norm.len().max(1) as f64;
    let mean: Vec<f64> = (0..bins).map(|b| norm.iter().map(|h| h[b]).sum::<f64>() / k).collect();
    let std = (0..bins)
        .map(|b| (norm.iter().map(|h| (h[b] - mean[b]).powi(2)).sum::<f64>() / k).sqrt())
        .collect();
    (mean, std)
}

/// Classifies patches of one eval-preprocessed `[C, S, S]` image by
/// cropping, bilinear upsampling back to `S x S` and running the model.
pub struct ModelPatchClassifier<'a> {
    pub model: &'a mut ComposedModel,
    pub image: Tensor<f32>,
}

impl ModelPatchClassifier<'_> {
    pub fn patch(&self, r: &PatchRect) -> Result<Tensor<f32>> {
        let s = self.image.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(c * r.w * r.h);
        for ch in 0..c {
            for y in r.y0..r.y0 + r.h {
                let row = (ch * h + y) * w;
                data.extend_from_slice(&self.image.data()[row + r.x0..row + r.x0 + r.w]);
            }
        }
        bilinear_resize(&Tensor::new(vec![c, r.h, r.w], data)?, h, w)
    }

    fn batch(&self, rects: &[PatchRect]) -> Result<Tensor<f32>> {
        Tensor::stack(&rects.iter().map(|r| self.patch(r)).collect::<Result<Vec<_>>>()?)
    }

    /// GAP-layer vectors of the upsampled patches.
    pub fn latents(&mut self, rects: &[PatchRect]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(rects.len());
        for chunk in rects.chunks(BATCH) {
            let x = self.batch(chunk)?;
            let gap = self.model.layer_outputs(&x, None, false)?.gap;
            let c = gap.shape()[1];
            out.extend(gap.data().chunks(c).map(|r| r.iter().map(|v| *v as f64).collect::<Vec<_>>()));
        }
        Ok(out)
    }
}

impl PatchClassifier for ModelPatchClassifier<'_> {
    fn classify(&mut self, rects: &[PatchRect]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(rects.len());
        for chunk in rects.chunks(BATCH) {
            let x = self.batch(chunk)?;
            let probs = self.model.predict(&x, None)?;
            let k = probs.shape()[1];
            for (row, cls) in probs.data().chunks(k).zip(argmax_rows(&probs)) {
                out.push(Prediction {
                    class: cls,
                    probability: row[cls],
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, r: &mut impl rand::Rng) -> KMeansResult {
    let n = points.len();
    let mut centroids = vec![points[r.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            // every point coincides with a centroid: take the first unused one
            (0..n).find(|i| !centroids.contains(&points[*i])).unwrap_or(0)
        } else {
            let mut t = r.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if t < *di {
                    pick = i;
                    break;
                }
                t -= di;
            }
            pick
        };
        centroids.push(points[next].clone());
    }
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centroids[a]).total_cmp(&sq_dist(p, &centroids[b])))
                .expect("k > 0");
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assignments).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in centroid.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = points.iter().zip(&assignments).map(|(p, a)| sq_dist(p, &centroids[*a])).sum();
    KMeansResult {
        assignments,
        centroids,
        inertia,
    }
}

/// k-means with k-means++ seeding; the restart with the lowest inertia wins.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(EscError::Config(format!("k-means with k = {k} on {} points", points.len())));
    }
    let mut r = rng::substream(seed, "kmeans");
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(points, k, &mut r);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One MIRC with its latent vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MircRecord {
    pub image_id: String,
    pub rect: PatchRect,
    pub probability: f32,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MircCluster {
    pub members: Vec<usize>,
    /// Up to `per_cluster` members closest to the centroid, one per source image.
    pub representatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub inertia: f64,
    pub clusters: Vec<MircCluster>,
}

pub const KMEANS_RESTARTS: usize = 20;

pub fn cluster_mircs(records: &[MircRecord], k: usize, per_cluster: usize, seed: u64) -> Result<ClusterReport> {
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.latent.clone()).collect();
    let km = kmeans(&points, k, KMEANS_RESTARTS, seed)?;
    let clusters = (0..k)
        .map(|c| {
            let mut members: Vec<usize> = (0..records.len()).filter(|&i| km.assignments[i] == c).collect();
            members.sort_by(|&a, &b| {
                sq_dist(&points[a], &km.centroids[c])
                    .total_cmp(&sq_dist(&points[b], &km.centroids[c]))
                    .then(a.cmp(&b))
            });
            let mut seen: Vec<&str> = Vec::new();
            let mut representatives = Vec::new();
            for &m in &members {
                if representatives.len() == per_cluster {
                    break;
                }
                if !seen.contains(&records[m].image_id.as_str()) {
                    seen.push(&records[m].image_id);
                    representatives.push(m);
                }
            }
            if representatives.len() < per_cluster {
                log::warn!(
                    "cluster {c} has only {} distinct source images",
                    representatives.len()
                );
            }
            MircCluster {
                members,
                representatives,
            }
        })
        .collect();
    Ok(ClusterReport {
        k,
        inertia: km.inertia,
        clusters,
    })
}
