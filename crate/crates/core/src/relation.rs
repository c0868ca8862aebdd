//! High-order relation features: adaptive directed graph convolution over
//! the skeleton, with the global node as the reference for edge gating.

use std::collections::VecDeque;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{linear, Init, Mode, ParamStore, Tape, Tensor, Var};
use crate::semantic::{identity_loss, init_classifiers, NodeFeatureSet, NodeVars, Stage};

/// Keypoint order used throughout the crate.
pub const KEYPOINT_NAMES: [&str; 14] = [
    "head",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const RELATION_PREFIX: &str = "rel";

/// Undirected skeleton graph as a binary `K×K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonAdjacency {
    k: usize,
    a: Vec<f64>,
}

impl SkeletonAdjacency {
    /// Symmetric closure of `edges`. Self-loops, out-of-range endpoints and
    /// disconnected graphs are rejected.
    pub fn from_edges(k: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("skeleton needs at least one node".into()));
        }
        let mut a = vec![0.0; k * k];
        for &(i, j) in edges {
            if i >= k || j >= k {
                return Err(Error::Invalid(format!("edge ({i}, {j}) outside {k} nodes")));
            }
            if i == j {
                return Err(Error::Invalid(format!("self-loop at node {i}")));
            }
            a[i * k + j] = 1.0;
            a[j * k + i] = 1.0;
        }
        let s = SkeletonAdjacency { k, a };
        if !s.is_connected() {
            return Err(Error::Invalid("skeleton graph is not connected".into()));
        }
        Ok(s)
    }

    pub fn nodes(&self) -> usize {
        self.k
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.a[i * self.k + j] != 0.0
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.k).filter(move |&j| self.has_edge(i, j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Directed edges `(i, j)`, both orientations, in row-major order.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        (0..self.k)
            .flat_map(|i| self.neighbors(i).map(move |j| (i, j)))
            .collect()
    }

    pub fn matrix(&self) -> Tensor {
        Tensor::new(vec![self.k, self.k], self.a.clone()).expect("k×k matrix")
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.k];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// The graph with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.k)?;
        let edges: Vec<_> = self.directed_edges().into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
        Self::from_edges(self.k, &edges)
    }
}

pub(crate) fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!("{perm:?} is not a permutation of {k} nodes")));
    }
    Ok(())
}

/// The 14-keypoint human skeleton. The listed limb/torso edges are joined by
/// a neck node linked to the head and both shoulders.
pub fn build_skeleton(k: usize) -> Result<SkeletonAdjacency> {
    if k != KEYPOINT_NAMES.len() {
        return Err(Error::Invalid(format!(
            "the built-in skeleton has 14 keypoints, got K = {k}; supply a custom adjacency"
        )));
    }
    const EDGES: [(usize, usize); 17] = [
        (0, 2),
        (0, 3),
        (2, 4),
        (3, 5),
        (4, 6),
        (5, 7),
        (2, 8),
        (3, 9),
        (8, 9),
        (2, 3),
        (8, 10),
        (9, 11),
        (10, 12),
        (11, 13),
        (1, 0),
        (1, 2),
        (1, 3),
    ];
    SkeletonAdjacency::from_edges(k, &EDGES)
}

/// Per-layer switches of the relation cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationConfig {
    pub depth: usize,
    /// When false, messages use the row-normalized fixed skeleton instead
    /// of score-gated weights.
    pub adaptive: bool,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig {
            depth: 2,
            adaptive: true,
        }
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("{RELATION_PREFIX}.adgc{layer}")
}

/// Registers one ADGC layer: the node scorer (standardize + linear to one
/// logit) and the unshared message / self maps `f1`, `f2`.
pub fn init_adgc(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.init_standardize(&format!("{prefix}.score.bn"), width)?;
    store.init_linear(&format!("{prefix}.score.fc"), width, 1, Init::Xavier)?;
    store.init_linear(&format!("{prefix}.f1"), width, width, Init::Uniform(0.5 / (width as f64).sqrt()))?;
    store.init_linear(&format!("{prefix}.f2"), width, width, Init::Identity(0.01))?;
    Ok(())
}

/// All relation parameters: `depth` ADGC layers and `K+1` identity
/// classifiers over `classes` identities.
pub fn init_relation(store: &mut ParamStore, cfg: &RelationConfig, k: usize, width: usize, classes: usize) -> Result<()> {
    if cfg.depth == 0 {
        return Err(Error::Invalid("relation depth must be at least 1".into()));
    }
    for l in 0..cfg.depth {
        init_adgc(store, &layer_prefix(l), width)?;
    }
    init_classifiers(store, RELATION_PREFIX, k + 1, width, classes)
}

/// `sigmoid(linear(standardize(|diffs|)))`: one gate per row of `diffs`.
fn gate(tape: &mut Tape, store: &ParamStore, prefix: &str, diffs: Var) -> Result<Var> {
    let a = tape.abs(diffs)?;
    let z = tape.standardize(a, store, &format!("{prefix}.score.bn"))?;
    let logit = linear(tape, store, &format!("{prefix}.score.fc"), z)?;
    tape.sigmoid(logit)
}

/// Per-node gates from the difference between each local feature (`K×C`)
/// and the global feature (`1×C`); the standardization statistics are taken
/// over the K nodes.
pub fn node_scores(tape: &mut Tape, store: &ParamStore, prefix: &str, local: Var, global: Var) -> Result<Var> {
    let (ls, gs) = (tape.shape(local).to_vec(), tape.shape(global).to_vec());
    if ls.len() != 2 || gs != [1, ls[1]] {
        return Err(Error::shape("node_scores", &ls, &gs));
    }
    let d = disagreement(tape, local, global)?;
    gate(tape, store, prefix, d)
}

/// `V_l − 1·V_g`, the input of the node scorer.
fn disagreement(tape: &mut Tape, local: Var, global: Var) -> Result<Var> {
    let ones = tape.constant(Tensor::ones(&[tape.shape(local)[0], 1]));
    let g = tape.matmul(ones, global)?;
    tape.sub(local, g)
}

/// Source-gated, row-normalized adjacency: entry `(j, i)` is
/// `A[j,i]·score_i / Σ_i' A[j,i']·score_i'`.
pub fn adaptive_adjacency_var(tape: &mut Tape, adj: &SkeletonAdjacency, scores: Var) -> Result<Var> {
    let k = adj.nodes();
    if tape.shape(scores) != [k, 1] {
        return Err(Error::shape("adaptive_adjacency", tape.shape(scores), &[k, 1]));
    }
    if (0..k).any(|j| adj.degree(j) == 0) {
        return Err(Error::Invalid("every node needs at least one neighbor for message passing".into()));
    }
    let index: Rc<[Option<usize>]> = (0..k * k)
        .map(|idx| adj.has_edge(idx / k, idx % k).then_some(idx % k))
        .collect();
    let gated = tape.gather(scores, index, &[k, k])?;
    tape.normalize_axis(gated, 1)
}

/// Value-level [`adaptive_adjacency_var`]; `scores` must lie in `(0, 1)`.
pub fn adaptive_adjacency(adj: &SkeletonAdjacency, scores: &[f64]) -> Result<Tensor> {
    if scores.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::Invalid("node scores must lie in (0, 1)".into()));
    }
    let mut tape = Tape::new(Mode::Eval);
    let s = tape.constant(Tensor::new(vec![scores.len(), 1], scores.to_vec())?);
    let a = adaptive_adjacency_var(&mut tape, adj, s)?;
    Ok(tape.value(a).clone())
}

/// Row-normalized fixed skeleton, the non-adaptive baseline.
pub fn fixed_adjacency(adj: &SkeletonAdjacency) -> Result<Tensor> {
    adaptive_adjacency(adj, &vec![0.5; adj.nodes()])
}

/// One ADGC layer over a batch of images. Local rows become
/// `f1(A_adp · V_l) + f2(V_l)`; the global row and confidences pass through.
pub fn adgc_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    adj: &SkeletonAdjacency,
    batch: &[NodeVars],
    adaptive: bool,
) -> Result<Vec<NodeVars>> {
    let k = adj.nodes();
    let mut locals = Vec::with_capacity(batch.len());
    let mut globals = Vec::with_capacity(batch.len());
    let mut diffs = Vec::with_capacity(batch.len());
    for n in batch {
        if n.stage == Stage::Topology {
            return Err(Error::Invalid("ADGC expects semantic or relation features".into()));
        }
        let shape = tape.shape(n.features).to_vec();
        if shape.len() != 2 || shape[0] != k + 1 {
            return Err(Error::shape("adgc", &shape, &[k + 1]));
        }
        let l = tape.slice_rows(n.features, 0, k)?;
        let g = tape.slice_rows(n.features, k, k + 1)?;
        if adaptive {
            diffs.push(disagreement(tape, l, g)?);
        }
        locals.push(l);
        globals.push(g);
    }

    let messages: Vec<Var> = if adaptive {
        let stacked = tape.concat(&diffs, 0)?;
        let scores = gate(tape, store, prefix, stacked)?;
        (0..batch.len())
            .map(|b| {
                let s = tape.slice_rows(scores, b * k, (b + 1) * k)?;
                let a = adaptive_adjacency_var(tape, adj, s)?;
                tape.matmul(a, locals[b])
            })
            .collect::<Result<_>>()?
    } else {
        let fixed = fixed_adjacency(adj)?;
        let a = tape.constant(fixed);
        locals.iter().map(|&l| tape.matmul(a, l)).collect::<Result<_>>()?
    };

    let m = tape.concat(&messages, 0)?;
    let v = tape.concat(&locals, 0)?;
    let fm = linear(tape, store, &format!("{prefix}.f1"), m)?;
    let fv = linear(tape, store, &format!("{prefix}.f2"), v)?;
    let out = tape.add(fm, fv)?;
    batch
        .iter()
        .enumerate()
        .map(|(b, n)| {
            let l = tape.slice_rows(out, b * k, (b + 1) * k)?;
            let features = tape.concat(&[l, globals[b]], 0)?;
            Ok(NodeVars {
                features,
                beta: n.beta.clone(),
                stage: Stage::Relation,
            })
        })
        .collect()
}

/// The ADGC cascade `f_R`.
pub fn relation_module(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RelationConfig,
    adj: &SkeletonAdjacency,
    batch: &[NodeVars],
) -> Result<Vec<NodeVars>> {
    if cfg.depth == 0 {
        return Err(Error::Invalid("relation depth must be at least 1".into()));
    }
    let mut cur = batch.to_vec();
    for l in 0..cfg.depth {
        cur = adgc_layer(tape, store, &layer_prefix(l), adj, &cur, cfg.adaptive)?;
    }
    Ok(cur)
}

/// Single-image [`adgc_layer`] evaluated with running statistics.
pub fn adgc_forward(
    v: &NodeFeatureSet,
    adj: &SkeletonAdjacency,
    store: &ParamStore,
    layer: usize,
    adaptive: bool,
) -> Result<NodeFeatureSet> {
    let mut tape = Tape::new(Mode::Eval);
    let n = v.on_tape(&mut tape);
    let out = adgc_layer(&mut tape, store, &layer_prefix(layer), adj, &[n], adaptive)?;
    Ok(out[0].to_set(&tape))
}

/// Single-image [`relation_module`] evaluated with running statistics.
pub fn relation_forward(
    v: &NodeFeatureSet,
    adj: &SkeletonAdjacency,
    store: &ParamStore,
    cfg: &RelationConfig,
) -> Result<NodeFeatureSet> {
    let mut tape = Tape::new(Mode::Eval);
    let n = v.on_tape(&mut tape);
    let out = relation_module(&mut tape, store, cfg, adj, &[n])?;
    Ok(out[0].to_set(&tape))
}

/// Identity loss on relation features with the relation classifiers.
pub fn relation_loss(tape: &mut Tape, store: &ParamStore, batch: &[NodeVars], labels: &[usize], alpha: f64) -> Result<Var> {
    identity_loss(tape, store, RELATION_PREFIX, batch, labels, alpha)
}

/// `(1/(K+1)) Σ_k sqrt(β1_k β2_k) · cos(v1_k, v2_k)`, with cosine 0 for a
/// zero row.
pub fn relation_similarity(a: &NodeFeatureSet, b: &NodeFeatureSet) -> Result<f64> {
    if a.features.shape() != b.features.shape() {
        return Err(Error::shape("relation_similarity", a.features.shape(), b.features.shape()));
    }
    let rows = a.features.rows();
    let total: f64 = (0..rows)
        .map(|k| {
            let w = (a.beta.values()[k] * b.beta.values()[k]).sqrt();
            w * cosine(a.features.row(k), b.features.row(k))
        })
        .sum();
    Ok(total / rows as f64)
}

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    (dot(x, y) / (nx * ny)).clamp(-1.0, 1.0)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
