//! High-order topology features: differentiable cross-image graph matching,
//! cross-graph embedded alignment, and the pair verification head.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{linear, Init, Mode, ParamStore, SparsePattern, Tape, Tensor, Var};
use crate::relation::SkeletonAdjacency;
use crate::semantic::{NodeFeatureSet, NodeVars, Stage};

pub const TOPOLOGY_PREFIX: &str = "top";

/// Floor applied to the matching scores before the bi-stochastic projection.
pub const MATCH_FLOOR: f64 = 1e-12;

/// Dense `(K·K)×(K·K)` affinity; index `i·K + a` pairs node `i` of the first
/// graph with node `a` of the second.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    k: usize,
    m: Tensor,
}

impl AffinityMatrix {
    pub fn keypoints(&self) -> usize {
        self.k
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    /// Entry `(ia; jb)`.
    pub fn get(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let k = self.k;
        self.m.data()[(i * k + a) * k * k + j * k + b]
    }
}

/// Soft correspondence `U[i, a]` between node `i` of the first graph and
/// node `a` of the second.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingMatrix {
    u: Tensor,
}

impl MatchingMatrix {
    pub fn new(u: Tensor) -> Result<Self> {
        if u.rank() != 2 || u.rows() != u.cols() {
            return Err(Error::Invalid(format!("matching matrix must be square, got {:?}", u.shape())));
        }
        Ok(MatchingMatrix { u })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.u
    }

    pub fn get(&self, i: usize, a: usize) -> f64 {
        self.u.at(&[i, a])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.u.rows()).map(|i| self.u.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let k = self.u.cols();
        (0..k).map(|a| (0..k).map(|i| self.get(i, a)).sum()).collect()
    }

    /// Column of the largest entry in each row (first on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.u.rows())
            .map(|i| {
                self.u
                    .row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (a, &v)| if v > best.1 { (a, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Node and edge temperatures of the affinity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    pub tau_node: f64,
    pub tau_edge: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            tau_node: DEFAULT_TAU,
            tau_edge: DEFAULT_TAU,
        }
    }
}

const DEFAULT_TAU: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopologyConfig {
    pub depth: usize,
    pub power_iters_train: usize,
    pub sinkhorn_iters_train: usize,
    pub power_iters_eval: usize,
    pub sinkhorn_iters_eval: usize,
    /// When false, every node is routed to every counterpart node with
    /// weight `1/K` instead of the learned matching.
    pub matching: bool,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            depth: 2,
            power_iters_train: 20,
            sinkhorn_iters_train: 10,
            power_iters_eval: 200,
            sinkhorn_iters_eval: 100,
            matching: true,
        }
    }
}

impl TopologyConfig {
    /// `(power, sinkhorn)` iteration counts for `mode`.
    pub fn iters(&self, mode: Mode) -> (usize, usize) {
        match mode {
            Mode::Train => (self.power_iters_train, self.sinkhorn_iters_train),
            Mode::Eval => (self.power_iters_eval, self.sinkhorn_iters_eval),
        }
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("{TOPOLOGY_PREFIX}.cgea{layer}")
}

pub const HEAD_PREFIX: &str = "top.head";

/// Registers one CGEA layer: the shared hidden map, the fusion map `f`
/// (`2C → C`) and the log-temperatures of the affinity.
pub fn init_cgea(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.init_linear(&format!("{prefix}.hidden"), width, width, Init::Identity(0.01))?;
    store.init_linear(&format!("{prefix}.f"), 2 * width, width, Init::Uniform(0.1 / (width as f64).sqrt()))?;
    store.init(&format!("{prefix}.log_tau_node"), &[1, 1], Init::Constant(DEFAULT_TAU.ln()))?;
    store.init(&format!("{prefix}.log_tau_edge"), &[1, 1], Init::Constant(DEFAULT_TAU.ln()))?;
    Ok(())
}

/// All topology parameters: `depth` CGEA layers and the similarity head
/// over `(K+1)·width` inputs.
pub fn init_topology(store: &mut ParamStore, cfg: &TopologyConfig, k: usize, width: usize) -> Result<()> {
    if cfg.depth == 0 {
        return Err(Error::Invalid("topology depth must be at least 1".into()));
    }
    for l in 0..cfg.depth {
        init_cgea(store, &layer_prefix(l), width)?;
    }
    store.init_linear(HEAD_PREFIX, (k + 1) * width, 1, Init::Zeros)
}

// ---- affinity ---------------------------------------------------------------

fn incidence(adj: &SkeletonAdjacency, edges: &[(usize, usize)]) -> Tensor {
    let k = adj.nodes();
    let mut b = vec![0.0; edges.len() * k];
    for (e, &(i, j)) in edges.iter().enumerate() {
        b[e * k + i] += 1.0;
        b[e * k + j] -= 1.0;
    }
    Tensor::new(vec![edges.len(), k], b).expect("incidence shape")
}

fn affinity_pattern(k: usize, edges1: &[(usize, usize)], edges2: &[(usize, usize)]) -> SparsePattern {
    let n = k * k;
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    for &(i, j) in edges1 {
        for &(a, b) in edges2 {
            rows.push(i * k + a);
            cols.push(j * k + b);
        }
    }
    SparsePattern::new(n, rows, cols).expect("indices below K·K")
}

fn cosines(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let xn = tape.l2_normalize_rows(x)?;
    let yn = tape.l2_normalize_rows(y)?;
    let yt = tape.transpose(yn)?;
    tape.matmul(xn, yt)
}

/// Nonzeros of the affinity on the tape: node scores `exp(τ_n cos(v1_i, v2_a))`
/// on the diagonal and edge scores `exp(τ_e cos(v1_i − v1_j, v2_a − v2_b))`
/// for directed skeleton edges `(i, j)`, `(a, b)`. `tau_*` are `1×1`.
pub fn affinity_values(
    tape: &mut Tape,
    v1h: Var,
    v2h: Var,
    adj: &SkeletonAdjacency,
    tau_node: Var,
    tau_edge: Var,
) -> Result<(Var, Rc<SparsePattern>)> {
    affinity_values_between(tape, v1h, adj, v2h, adj, tau_node, tau_edge)
}

/// [`affinity_values`] for two graphs with their own edge sets over the
/// same number of nodes; `(i, j)` ranges over the first graph's edges and
/// `(a, b)` over the second's.
pub fn affinity_values_between(
    tape: &mut Tape,
    v1h: Var,
    adj1: &SkeletonAdjacency,
    v2h: Var,
    adj2: &SkeletonAdjacency,
    tau_node: Var,
    tau_edge: Var,
) -> Result<(Var, Rc<SparsePattern>)> {
    let k = adj1.nodes();
    if adj2.nodes() != k {
        return Err(Error::Invalid(format!("graphs of {k} and {} nodes", adj2.nodes())));
    }
    for v in [v1h, v2h] {
        let s = tape.shape(v);
        if s.len() != 2 || s[0] != k {
            return Err(Error::shape("build_affinity", s, &[k]));
        }
    }
    if tape.shape(v1h) != tape.shape(v2h) {
        return Err(Error::shape("build_affinity", tape.shape(v1h), tape.shape(v2h)));
    }
    let (edges1, edges2) = (adj1.directed_edges(), adj2.directed_edges());
    let pattern = Rc::new(affinity_pattern(k, &edges1, &edges2));

    let node_cos = cosines(tape, v1h, v2h)?;
    let node_logits = tape.mul_scalar(node_cos, tau_node)?;
    let node = tape.exp(node_logits)?;
    let node = tape.reshape(node, &[k * k, 1])?;
    let values = if edges1.is_empty() || edges2.is_empty() {
        node
    } else {
        let b1 = tape.constant(incidence(adj1, &edges1));
        let b2 = tape.constant(incidence(adj2, &edges2));
        let e1 = tape.matmul(b1, v1h)?;
        let e2 = tape.matmul(b2, v2h)?;
        let edge_cos = cosines(tape, e1, e2)?;
        let edge_logits = tape.mul_scalar(edge_cos, tau_edge)?;
        let edge = tape.exp(edge_logits)?;
        let edge = tape.reshape(edge, &[edges1.len() * edges2.len(), 1])?;
        tape.concat(&[node, edge], 0)?
    };
    let nnz = pattern.nnz();
    Ok((tape.reshape(values, &[nnz])?, pattern))
}

/// Dense affinity for fixed temperatures.
pub fn build_affinity(v1h: &Tensor, v2h: &Tensor, adj: &SkeletonAdjacency, params: MatchParams) -> Result<AffinityMatrix> {
    build_affinity_between(v1h, adj, v2h, adj, params)
}

pub fn build_affinity_between(
    v1h: &Tensor,
    adj1: &SkeletonAdjacency,
    v2h: &Tensor,
    adj2: &SkeletonAdjacency,
    params: MatchParams,
) -> Result<AffinityMatrix> {
    let mut tape = Tape::new(Mode::Eval);
    let (values, pattern) = fixed_affinity(&mut tape, v1h, adj1, v2h, adj2, params)?;
    let n = pattern.n;
    let dense = pattern.to_dense(tape.data(values));
    Ok(AffinityMatrix {
        k: adj1.nodes(),
        m: Tensor::new(vec![n, n], dense)?,
    })
}

fn fixed_affinity(
    tape: &mut Tape,
    v1h: &Tensor,
    adj1: &SkeletonAdjacency,
    v2h: &Tensor,
    adj2: &SkeletonAdjacency,
    params: MatchParams,
) -> Result<(Var, Rc<SparsePattern>)> {
    if !(params.tau_node > 0.0 && params.tau_edge > 0.0) {
        return Err(Error::Invalid("temperatures must be positive".into()));
    }
    let (a, b) = (tape.constant(v1h.clone()), tape.constant(v2h.clone()));
    let tn = tape.constant(Tensor::scalar(params.tau_node));
    let te = tape.constant(Tensor::scalar(params.tau_edge));
    affinity_values_between(tape, a, adj1, b, adj2, tn, te)
}

// ---- power iteration and projection -------------------------------------------

/// `u ← M u / ‖M u‖` from the uniform unit vector; returns every iterate,
/// the start included.
pub fn power_iteration_steps(
    tape: &mut Tape,
    values: Var,
    pattern: &Rc<SparsePattern>,
    iters: usize,
) -> Result<Vec<Var>> {
    if iters == 0 {
        return Err(Error::Invalid("power iteration needs at least one step".into()));
    }
    if tape.data(values).iter().all(|&v| v == 0.0) {
        return Err(Error::Invalid("power iteration on a zero matrix".into()));
    }
    let n = pattern.n;
    let mut u = tape.constant(Tensor::full(&[n], 1.0 / (n as f64).sqrt()));
    let mut steps = vec![u];
    for _ in 0..iters {
        let mu = tape.spmv(values, pattern, u)?;
        let row = tape.reshape(mu, &[1, n])?;
        let unit = tape.l2_normalize_rows(row)?;
        u = tape.reshape(unit, &[n])?;
        steps.push(u);
    }
    Ok(steps)
}

fn check_square_nonneg_symmetric(m: &Tensor) -> Result<usize> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Invalid(format!("power iteration needs a square matrix, got {s:?}")));
    }
    let n = s[0];
    for i in 0..n {
        for j in 0..n {
            let v = m.at(&[i, j]);
            if v < 0.0 || v != m.at(&[j, i]) {
                return Err(Error::Invalid("power iteration needs a symmetric nonnegative matrix".into()));
            }
        }
    }
    Ok(n)
}

/// Every iterate of the power iteration on a dense symmetric nonnegative matrix.
pub fn power_iteration_trace(m: &Tensor, iters: usize) -> Result<Vec<Vec<f64>>> {
    let n = check_square_nonneg_symmetric(m)?;
    let pattern = Rc::new(SparsePattern::dense(n));
    let mut tape = Tape::new(Mode::Eval);
    let values = tape.constant(m.clone().reshape(&[n * n])?);
    let steps = power_iteration_steps(&mut tape, values, &pattern, iters)?;
    Ok(steps.into_iter().map(|u| tape.data(u).to_vec()).collect())
}

/// Final unit vector of [`power_iteration_trace`].
pub fn power_iteration(m: &Tensor, iters: usize) -> Result<Vec<f64>> {
    Ok(power_iteration_trace(m, iters)?.pop().expect("at least the start vector"))
}

/// Alternating row then column normalization, `iters` rounds.
pub fn sinkhorn_var(tape: &mut Tape, u: Var, iters: usize) -> Result<Var> {
    let mut x = u;
    for _ in 0..iters {
        x = tape.normalize_axis(x, 1)?;
        x = tape.normalize_axis(x, 0)?;
    }
    Ok(x)
}

/// Floors at [`MATCH_FLOOR`] and projects with [`sinkhorn_var`].
pub fn bistochastic_var(tape: &mut Tape, u: Var, iters: usize) -> Result<Var> {
    let s = tape.shape(u);
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Invalid(format!("bi-stochastic projection needs a square matrix, got {s:?}")));
    }
    let floored = tape.clamp_min(u, MATCH_FLOOR)?;
    sinkhorn_var(tape, floored, iters)
}

pub fn bistochastic(u: &Tensor, iters: usize) -> Result<MatchingMatrix> {
    if u.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("bi-stochastic projection needs nonnegative entries".into()));
    }
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.constant(u.clone());
    let p = bistochastic_var(&mut tape, x, iters)?;
    MatchingMatrix::new(tape.value(p).clone())
}

/// Power iteration, reshape to `K×K`, absolute value, then the bi-stochastic
/// projection. The projection is taken in both row-first and column-first
/// order and averaged, so that swapping the two graphs transposes `U`.
pub fn matching_from_affinity(
    tape: &mut Tape,
    values: Var,
    pattern: &Rc<SparsePattern>,
    k: usize,
    power_iters: usize,
    sinkhorn_iters: usize,
) -> Result<Var> {
    let u = power_iteration_steps(tape, values, pattern, power_iters)?
        .pop()
        .expect("at least the start vector");
    let u = tape.reshape(u, &[k, k])?;
    let u = tape.abs(u)?;
    let row_first = bistochastic_var(tape, u, sinkhorn_iters)?;
    let ut = tape.transpose(u)?;
    let col_first = bistochastic_var(tape, ut, sinkhorn_iters)?;
    let col_first = tape.transpose(col_first)?;
    let both = tape.add(row_first, col_first)?;
    tape.scale(both, 0.5)
}

/// Learned-temperature matching of two `K×C` hidden node sets.
#[allow(clippy::too_many_arguments)]
pub fn graph_matching_var(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    v1h: Var,
    v2h: Var,
    adj: &SkeletonAdjacency,
    power_iters: usize,
    sinkhorn_iters: usize,
) -> Result<Var> {
    let ln = tape.param(store, &format!("{prefix}.log_tau_node"))?;
    let le = tape.param(store, &format!("{prefix}.log_tau_edge"))?;
    let tn = tape.exp(ln)?;
    let te = tape.exp(le)?;
    let (values, pattern) = affinity_values(tape, v1h, v2h, adj, tn, te)?;
    matching_from_affinity(tape, values, &pattern, adj.nodes(), power_iters, sinkhorn_iters)
}

/// Value-level matching with fixed temperatures.
pub fn graph_matching(
    v1h: &Tensor,
    v2h: &Tensor,
    adj: &SkeletonAdjacency,
    params: MatchParams,
    power_iters: usize,
    sinkhorn_iters: usize,
) -> Result<MatchingMatrix> {
    graph_matching_between(v1h, adj, v2h, adj, params, power_iters, sinkhorn_iters)
}

/// [`graph_matching`] between two graphs with their own edge sets.
pub fn graph_matching_between(
    v1h: &Tensor,
    adj1: &SkeletonAdjacency,
    v2h: &Tensor,
    adj2: &SkeletonAdjacency,
    params: MatchParams,
    power_iters: usize,
    sinkhorn_iters: usize,
) -> Result<MatchingMatrix> {
    let mut tape = Tape::new(Mode::Eval);
    let (values, pattern) = fixed_affinity(&mut tape, v1h, adj1, v2h, adj2, params)?;
    let u = matching_from_affinity(&mut tape, values, &pattern, adj1.nodes(), power_iters, sinkhorn_iters)?;
    MatchingMatrix::new(tape.value(u).clone())
}

// ---- cross-graph embedded alignment -------------------------------------------

fn check_pair(tape: &Tape, a: &NodeVars, b: &NodeVars, k: usize) -> Result<()> {
    let (sa, sb) = (tape.shape(a.features), tape.shape(b.features));
    if sa != sb || sa.len() != 2 || sa[0] != k + 1 {
        return Err(Error::shape("cgea", sa, sb));
    }
    Ok(())
}

/// One CGEA layer over an image pair. Returns both outputs and the matching
/// matrix that routed them.
pub fn cgea_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    adj: &SkeletonAdjacency,
    a: &NodeVars,
    b: &NodeVars,
    cfg: &TopologyConfig,
) -> Result<(NodeVars, NodeVars, Var)> {
    let k = adj.nodes();
    check_pair(tape, a, b, k)?;
    let hidden = format!("{prefix}.hidden");
    let za = linear(tape, store, &hidden, a.features)?;
    let ha = tape.relu(za)?;
    let zb = linear(tape, store, &hidden, b.features)?;
    let hb = tape.relu(zb)?;
    let (la, ga) = (tape.slice_rows(ha, 0, k)?, tape.slice_rows(ha, k, k + 1)?);
    let (lb, gb) = (tape.slice_rows(hb, 0, k)?, tape.slice_rows(hb, k, k + 1)?);

    let u = if cfg.matching {
        let (p, s) = cfg.iters(tape.mode());
        graph_matching_var(tape, store, prefix, la, lb, adj, p, s)?
    } else {
        tape.constant(Tensor::full(&[k, k], 1.0 / k as f64))
    };
    let ut = tape.transpose(u)?;

    let fuse = |tape: &mut Tape, own: Var, routing: Var, other_local: Var, other_global: Var| -> Result<Var> {
        let routed = tape.matmul(routing, other_local)?;
        let counterpart = tape.concat(&[routed, other_global], 0)?;
        let joined = tape.concat(&[own, counterpart], 1)?;
        let f = linear(tape, store, &format!("{prefix}.f"), joined)?;
        tape.add(f, own)
    };
    let oa = fuse(tape, ha, u, lb, gb)?;
    let ob = fuse(tape, hb, ut, la, ga)?;
    let wrap = |features, src: &NodeVars| NodeVars {
        features,
        beta: src.beta.clone(),
        stage: Stage::Topology,
    };
    Ok((wrap(oa, a), wrap(ob, b), u))
}

/// The CGEA cascade `F_T` over one pair.
pub fn topology_module(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TopologyConfig,
    adj: &SkeletonAdjacency,
    a: &NodeVars,
    b: &NodeVars,
) -> Result<(NodeVars, NodeVars)> {
    if cfg.depth == 0 {
        return Err(Error::Invalid("topology depth must be at least 1".into()));
    }
    let (mut x, mut y) = (a.clone(), b.clone());
    for l in 0..cfg.depth {
        let (nx, ny, _) = cgea_layer(tape, store, &layer_prefix(l), adj, &x, &y, cfg)?;
        x = nx;
        y = ny;
    }
    Ok((x, y))
}

/// `f_s(−|V̂1 − V̂2|)` with both sets flattened; `1×1`. `V̂` has every row
/// scaled to unit length, so the global row, which pooling leaves about
/// `h·w` times larger than a local row, does not swamp the local ones.
pub fn similarity_logit(tape: &mut Tape, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("similarity_predict", tape.shape(a), tape.shape(b)));
    }
    let n = tape.value(a).numel();
    let a = tape.l2_normalize_rows(a)?;
    let b = tape.l2_normalize_rows(b)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    let d = tape.neg(d)?;
    let flat = tape.reshape(d, &[1, n])?;
    linear(tape, store, HEAD_PREFIX, flat)
}

/// Mean binary cross-entropy of pair logits `z` (`P×1`) against labels in
/// {0, 1}, computed as `softplus(z) − y·z`.
pub fn verification_loss_var(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    let n = tape.value(logits).numel();
    if labels.len() != n || labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Invalid("verification labels must be 0 or 1, one per pair".into()));
    }
    let shape = tape.shape(logits).to_vec();
    let sp = tape.softplus(logits)?;
    let y = tape.constant(Tensor::new(shape, labels.to_vec())?);
    let yz = tape.mul(y, logits)?;
    let l = tape.sub(sp, yz)?;
    tape.mean(l)
}

/// `−[y ln s + (1 − y) ln(1 − s)]`.
pub fn verification_loss(s: f64, y: u8) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Invalid(format!("similarity must lie in (0, 1), got {s}")));
    }
    match y {
        1 => Ok(-s.ln()),
        0 => Ok(-(1.0 - s).ln()),
        _ => Err(Error::Invalid(format!("label must be 0 or 1, got {y}"))),
    }
}

/// Value-level CGEA cascade on a pair, with evaluation-mode iteration counts.
pub fn topology_forward(
    a: &NodeFeatureSet,
    b: &NodeFeatureSet,
    adj: &SkeletonAdjacency,
    store: &ParamStore,
    cfg: &TopologyConfig,
) -> Result<(NodeFeatureSet, NodeFeatureSet)> {
    let mut tape = Tape::new(Mode::Eval);
    let (x, y) = (a.on_tape(&mut tape), b.on_tape(&mut tape));
    let (ox, oy) = topology_module(&mut tape, store, cfg, adj, &x, &y)?;
    Ok((ox.to_set(&tape), oy.to_set(&tape)))
}

/// Value-level single CGEA layer.
pub fn cgea_forward(
    a: &NodeFeatureSet,
    b: &NodeFeatureSet,
    adj: &SkeletonAdjacency,
    store: &ParamStore,
    layer: usize,
    cfg: &TopologyConfig,
) -> Result<(NodeFeatureSet, NodeFeatureSet, MatchingMatrix)> {
    let mut tape = Tape::new(Mode::Eval);
    let (x, y) = (a.on_tape(&mut tape), b.on_tape(&mut tape));
    let (ox, oy, u) = cgea_layer(&mut tape, store, &layer_prefix(layer), adj, &x, &y, cfg)?;
    Ok((ox.to_set(&tape), oy.to_set(&tape), MatchingMatrix::new(tape.value(u).clone())?))
}

/// `sigmoid(f_s(−|V1 − V2|))`, strictly inside `(0, 1)`.
pub fn similarity_predict(a: &NodeFeatureSet, b: &NodeFeatureSet, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new(Mode::Eval);
    let (x, y) = (a.on_tape(&mut tape), b.on_tape(&mut tape));
    let z = similarity_logit(&mut tape, store, x.features, y.features)?;
    Ok(open_unit(crate::numerics::sigmoid(tape.item(z))))
}

/// Keeps a probability strictly inside `(0, 1)` when the logit saturates.
pub(crate) fn open_unit(s: f64) -> f64 {
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Full pair path: topology cascade then similarity head.
pub fn pair_similarity(
    a: &NodeFeatureSet,
    b: &NodeFeatureSet,
    adj: &SkeletonAdjacency,
    store: &ParamStore,
    cfg: &TopologyConfig,
) -> Result<f64> {
    let (x, y) = topology_forward(a, b, adj, store, cfg)?;
    similarity_predict(&x, &y, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, gradient_check_params, sample_param_entries};
    use crate::semantic::ConfidenceVector;
    use approx::assert_relative_eq;

    fn path(k: usize) -> SkeletonAdjacency {
        let edges: Vec<_> = (1..k).map(|i| (i - 1, i)).collect();
        SkeletonAdjacency::from_edges(k, &edges).unwrap()
    }

    fn feats(k: usize, c: usize, phase: f64) -> Tensor {
        Tensor::new(vec![k, c], (0..k * c).map(|i| (i as f64 * 1.3 + phase).sin() + 0.2).collect()).unwrap()
    }

    fn nodes(t: Tensor) -> NodeFeatureSet {
        let k = t.rows() - 1;
        NodeFeatureSet::new(t, ConfidenceVector::uniform(k, 1.0).unwrap(), Stage::Relation).unwrap()
    }

    #[test]
    fn affinity_is_symmetric_nonnegative_and_sparse() {
        let adj = path(4);
        let m = build_affinity(&feats(4, 3, 0.0), &feats(4, 3, 0.7), &adj, MatchParams::default()).unwrap();
        let t = m.matrix();
        let n = 16;
        for r in 0..n {
            for c in 0..n {
                assert!(t.at(&[r, c]) >= 0.0);
                assert_relative_eq!(t.at(&[r, c]), t.at(&[c, r]), max_relative = 1e-12);
            }
        }
        // (0, 2) is not an edge of the path
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(m.get(0, a, 2, b), 0.0);
            }
        }
        // node scores on the diagonal, nothing else inside a diagonal block
        assert!(m.get(1, 2, 1, 2) > 0.0);
        assert_eq!(m.get(1, 2, 1, 3), 0.0);
    }

    #[test]
    fn self_affinity_peaks_on_matching_node() {
        let adj = path(4);
        let v = feats(4, 3, 0.0);
        let m = build_affinity(&v, &v, &adj, MatchParams::default()).unwrap();
        for i in 0..4 {
            for a in 0..4 {
                if a != i {
                    assert!(m.get(i, i, i, i) > m.get(i, a, i, a));
                }
            }
        }
    }

    #[test]
    fn power_iteration_examples() {
        let u = power_iteration(&Tensor::eye(4), 5).unwrap();
        assert!(u.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let mut d = Tensor::eye(4);
        d.data_mut()[0] = 3.0;
        let u = power_iteration(&d, 200).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12 && u[1..].iter().all(|x| x.abs() < 1e-12));
        assert!(power_iteration(&Tensor::zeros(&[3, 3]), 5).is_err());
        assert!(power_iteration(&Tensor::eye(3), 0).is_err());
    }

    #[test]
    fn sinkhorn_examples() {
        let ds = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.5, 0.2, 0.3], vec![0.3, 0.5, 0.2]]).unwrap();
        let same = bistochastic(&ds, 10).unwrap();
        for (a, b) in same.tensor().data().iter().zip(ds.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        // exact zeros are floored, so a permutation matrix survives up to the floor
        let id = bistochastic(&Tensor::eye(3), 10).unwrap();
        for (a, b) in id.tensor().data().iter().zip(Tensor::eye(3).data()) {
            assert!((a - b).abs() < 1e-11);
        }
        let u = bistochastic(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), 100).unwrap();
        // independent closed form: a doubly stochastic 2×2 is [[p, 1−p], [1−p, p]] and
        // Sinkhorn preserves the cross ratio u00·u11 / (u01·u10) = 4/6
        let r: f64 = 4.0 / 6.0;
        let p = r.sqrt() / (1.0 + r.sqrt());
        assert_relative_eq!(u.get(0, 0), p, epsilon = 1e-9);
        assert_relative_eq!(u.get(0, 0), 0.4495, epsilon = 1e-3);
        assert_relative_eq!(u.get(0, 1), 0.5505, epsilon = 1e-3);
        for s in u.row_sums().into_iter().chain(u.col_sums()) {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_node_matches_itself() {
        let adj = SkeletonAdjacency::from_edges(1, &[]).unwrap();
        let u = graph_matching(&feats(1, 2, 0.0), &feats(1, 2, 1.0), &adj, MatchParams::default(), 20, 10).unwrap();
        assert_relative_eq!(u.get(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn permuted_graph_is_recovered() {
        // on a complete graph every relabeling preserves the shared edge set
        let edges: Vec<_> = (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j))).collect();
        let adj = SkeletonAdjacency::from_edges(4, &edges).unwrap();
        let v = feats(4, 3, 0.3);
        let u = graph_matching(&v, &v, &adj, MatchParams::default(), 200, 100).unwrap();
        assert_eq!(u.row_argmax(), vec![0, 1, 2, 3]);
        let perm = [2, 0, 3, 1];
        let mut pv = v.clone();
        for i in 0..4 {
            pv.data_mut()[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(v.row(i));
        }
        let u = graph_matching(&v, &pv, &adj, MatchParams::default(), 200, 100).unwrap();
        assert_eq!(u.row_argmax(), perm.to_vec());
    }

    #[test]
    fn relabeled_path_is_recovered() {
        let adj = path(4);
        let v = feats(4, 3, 0.3);
        let perm = [3, 1, 0, 2];
        let mut pv = v.clone();
        for i in 0..4 {
            pv.data_mut()[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(v.row(i));
        }
        let adj2 = adj.permuted(&perm).unwrap();
        let u = graph_matching_between(&v, &adj, &pv, &adj2, MatchParams::default(), 200, 100).unwrap();
        assert_eq!(u.row_argmax(), perm.to_vec());
        assert!(graph_matching_between(&v, &adj, &pv, &path(3), MatchParams::default(), 20, 10).is_err());
    }

    #[test]
    fn swap_transposes_matching() {
        let adj = path(3);
        let (a, b) = (feats(3, 2, 0.0), feats(3, 2, 2.0));
        let u = graph_matching(&a, &b, &adj, MatchParams::default(), 20, 10).unwrap();
        let v = graph_matching(&b, &a, &adj, MatchParams::default(), 20, 10).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(u.get(i, j), v.get(j, i), epsilon = 1e-12);
            }
        }
    }

    fn store(k: usize, c: usize, cfg: &TopologyConfig) -> ParamStore {
        let mut s = ParamStore::new(11);
        init_topology(&mut s, cfg, k, c).unwrap();
        s
    }

    #[test]
    fn zero_fusion_is_residual() {
        let cfg = TopologyConfig::default();
        let mut s = store(3, 2, &cfg);
        s.set("top.cgea0.f.weight", &[0.0; 8]).unwrap();
        let (a, b) = (nodes(feats(4, 2, 0.0)), nodes(feats(4, 2, 1.0)));
        let (oa, ob, _) = cgea_forward(&a, &b, &path(3), &s, 0, &cfg).unwrap();
        let hidden = |x: &NodeFeatureSet| {
            let mut tape = Tape::new(Mode::Eval);
            let v = tape.constant(x.features.clone());
            let z = linear(&mut tape, &s, "top.cgea0.hidden", v).unwrap();
            let h = tape.relu(z).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(oa.features, hidden(&a));
        assert_eq!(ob.features, hidden(&b));
        assert_eq!(oa.stage, Stage::Topology);
    }

    #[test]
    fn swap_and_identity_symmetry() {
        let cfg = TopologyConfig::default();
        let s = store(3, 2, &cfg);
        let adj = path(3);
        let (a, b) = (nodes(feats(4, 2, 0.0)), nodes(feats(4, 2, 1.0)));
        let (x1, y1) = topology_forward(&a, &b, &adj, &s, &cfg).unwrap();
        let (y2, x2) = topology_forward(&b, &a, &adj, &s, &cfg).unwrap();
        for (p, q) in x1.features.data().iter().zip(x2.features.data()).chain(y1.features.data().iter().zip(y2.features.data())) {
            assert_relative_eq!(p, q, epsilon = 1e-12);
        }
        let (p, q) = topology_forward(&a, &a, &adj, &s, &cfg).unwrap();
        for (u, v) in p.features.data().iter().zip(q.features.data()) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
        assert_eq!(p.features.shape(), &[4, 2]);
    }

    #[test]
    fn similarity_head_examples() {
        let cfg = TopologyConfig::default();
        let mut s = store(3, 2, &cfg);
        let a = nodes(feats(4, 2, 0.0));
        let b = nodes(feats(4, 2, 1.0));
        s.set("top.head.weight", &(0..8).map(|i| i as f64 * 0.3).collect::<Vec<_>>()).unwrap();
        assert_eq!(similarity_predict(&a, &a, &s).unwrap(), 0.5);
        let ab = similarity_predict(&a, &b, &s).unwrap();
        assert_eq!(ab, similarity_predict(&b, &a, &s).unwrap());
        assert!(ab > 0.0 && ab < 1.0 && ab < 0.5);
        s.set("top.head.weight", &[1e6; 8]).unwrap();
        let far = similarity_predict(&a, &b, &s).unwrap();
        assert!(far > 0.0 && far < 1.0);
    }

    #[test]
    fn verification_loss_examples() {
        assert_relative_eq!(verification_loss(0.5, 0).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(verification_loss(0.5, 1).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(verification_loss(0.99, 1).unwrap(), 0.01005, epsilon = 1e-5);
        assert_relative_eq!(verification_loss(0.9, 0).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert!(verification_loss(0.0, 1).is_err());
        assert!(verification_loss(1.0, 0).is_err());
        // the tape form agrees with the closed form
        let mut tape = Tape::new(Mode::Train);
        let z = tape.constant(Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap());
        let l = verification_loss_var(&mut tape, z, &[1.0, 0.0]).unwrap();
        let s = crate::numerics::sigmoid;
        let want = (verification_loss(s(2.0), 1).unwrap() + verification_loss(s(-1.0), 0).unwrap()) / 2.0;
        assert_relative_eq!(tape.item(l), want, epsilon = 1e-12);
    }

    #[test]
    fn gradients_through_matching() {
        let adj = path(3);
        let a = feats(3, 2, 0.0);
        let b = feats(3, 2, 0.9);
        let err = gradient_check(
            |tape, v| {
                let tn = tape.constant(Tensor::scalar(2.0));
                let te = tape.constant(Tensor::scalar(1.5));
                let (values, pattern) = affinity_values(tape, v[0], v[1], &adj, tn, te)?;
                let u = matching_from_affinity(tape, values, &pattern, 3, 20, 10)?;
                let w = tape.constant(Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 - 4.0).collect())?);
                let p = tape.mul(u, w)?;
                tape.sum(p)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn parameter_gradients_through_cgea() {
        let cfg = TopologyConfig::default();
        let s = store(3, 2, &cfg);
        let adj = path(3);
        let (a, b) = (nodes(feats(4, 2, 0.0)), nodes(feats(4, 2, 1.0)));
        let entries = sample_param_entries(&s, 12, 3);
        let err = gradient_check_params(Mode::Train, &s, &entries, 1e-5, |tape, st| {
            let (x, y) = (a.on_tape(tape), b.on_tape(tape));
            let (ox, oy) = topology_module(tape, st, &cfg, &adj, &x, &y)?;
            let sq = tape.mul(ox.features, oy.features)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
