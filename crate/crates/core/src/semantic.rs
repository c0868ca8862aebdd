//! One-order semantic features: keypoint-weighted pooling of a feature map,
//! keypoint confidences, and the confidence-weighted identity loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{linear, ParamStore, Tape, Tensor, Var};

/// Per-image feature map, `c×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Invalid(format!("feature map must be c×h×w, got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::Invalid("feature map has non-finite values".into()));
        }
        Ok(FeatureMap { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// `(h, w)`
    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

/// Raw keypoint heatmaps, `K×h×w`, plus their per-slice softmax once computed.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    raw: Tensor,
    normalized: Option<Tensor>,
}

impl HeatmapSet {
    pub fn new(raw: Tensor) -> Result<Self> {
        if raw.rank() != 3 {
            return Err(Error::Invalid(format!("heatmaps must be K×h×w, got {:?}", raw.shape())));
        }
        if !raw.is_finite() {
            return Err(Error::Invalid("heatmaps have non-finite values".into()));
        }
        Ok(HeatmapSet { raw, normalized: None })
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn normalized(&self) -> Option<&Tensor> {
        self.normalized.as_ref()
    }

    pub fn keypoints(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.raw.shape()[1], self.raw.shape()[2])
    }
}

/// Keypoint confidences `β₁..β_K` followed by the global slot, which is always 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceVector {
    beta: Vec<f64>,
}

impl ConfidenceVector {
    /// Builds `[local..., 1]` from the K local confidences.
    pub fn from_local(local: Vec<f64>) -> Result<Self> {
        if local.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Invalid("confidences must lie in [0, 1]".into()));
        }
        let mut beta = local;
        beta.push(1.0);
        Ok(ConfidenceVector { beta })
    }

    /// Takes all K+1 values as given, including the global slot.
    pub fn from_values(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Invalid("confidences must be non-empty and lie in [0, 1]".into()));
        }
        Ok(ConfidenceVector { beta })
    }

    pub fn uniform(k: usize, value: f64) -> Result<Self> {
        Self::from_local(vec![value; k])
    }

    /// All K+1 values, global slot last.
    pub fn values(&self) -> &[f64] {
        &self.beta
    }

    pub fn local(&self) -> &[f64] {
        &self.beta[..self.beta.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Semantic,
    Relation,
    Topology,
}

/// `(K+1)×C` node features of one image; the last row is the global feature.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatureSet {
    pub features: Tensor,
    pub beta: ConfidenceVector,
    pub stage: Stage,
}

impl NodeFeatureSet {
    pub fn new(features: Tensor, beta: ConfidenceVector, stage: Stage) -> Result<Self> {
        if features.rank() != 2 || features.rows() != beta.len() {
            return Err(Error::Invalid(format!(
                "node features {:?} do not match {} confidences",
                features.shape(),
                beta.len()
            )));
        }
        Ok(NodeFeatureSet { features, beta, stage })
    }

    /// Number of local nodes K.
    pub fn keypoints(&self) -> usize {
        self.features.rows() - 1
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn local_row(&self, k: usize) -> &[f64] {
        self.features.row(k)
    }

    pub fn global_row(&self) -> &[f64] {
        self.features.row(self.keypoints())
    }

    /// Records the features as a constant on `tape`.
    pub fn on_tape(&self, tape: &mut Tape) -> NodeVars {
        NodeVars {
            features: tape.constant(self.features.clone()),
            beta: self.beta.clone(),
            stage: self.stage,
        }
    }
}

/// A [`NodeFeatureSet`] whose features live on a tape.
#[derive(Clone, Debug)]
pub struct NodeVars {
    pub features: Var,
    pub beta: ConfidenceVector,
    pub stage: Stage,
}

impl NodeVars {
    pub fn to_set(&self, tape: &Tape) -> NodeFeatureSet {
        NodeFeatureSet {
            features: tape.value(self.features).clone(),
            beta: self.beta.clone(),
            stage: self.stage,
        }
    }
}

/// Softmax of every heatmap slice over its `h·w` positions.
pub fn normalize_heatmaps(raw: &HeatmapSet) -> Result<HeatmapSet> {
    let (k, (h, w)) = (raw.keypoints(), raw.spatial());
    let mut tape = Tape::new(crate::numerics::Mode::Eval);
    let r = tape.constant(raw.raw.clone());
    let flat = tape.reshape(r, &[k, h * w])?;
    let soft = tape.softmax(flat, 1)?;
    let normalized = tape.value(soft).clone().reshape(&[k, h, w])?;
    Ok(HeatmapSet {
        raw: raw.raw.clone(),
        normalized: Some(normalized),
    })
}

/// `β_k` = spatial maximum of normalized slice k; the global slot is 1.
pub fn extract_confidences(hm: &HeatmapSet) -> Result<ConfidenceVector> {
    let n = hm
        .normalized()
        .ok_or_else(|| Error::Invalid("heatmaps must be normalized before extracting confidences".into()))?;
    ConfidenceVector::from_local(slice_maxima(n))
}

/// Confidences read straight off the raw scores, clamped into `[0, 1]`; used
/// when heatmap normalization is switched off.
pub fn raw_confidences(hm: &HeatmapSet) -> Result<ConfidenceVector> {
    ConfidenceVector::from_local(slice_maxima(hm.raw()).into_iter().map(|b| b.clamp(0.0, 1.0)).collect())
}

fn slice_maxima(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|k| t.row(k).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Keypoint-weighted pooling on the tape: `m_cnn` is `c×h×w`, `weights`
/// `K×h×w`. Local row k is the spatial mean of `m_cnn · weights[k]`; the last
/// row is the spatial mean of `m_cnn`.
pub fn pool_features(tape: &mut Tape, m_cnn: Var, weights: Var) -> Result<Var> {
    let (ms, ws) = (tape.shape(m_cnn).to_vec(), tape.shape(weights).to_vec());
    if ms.len() != 3 || ws.len() != 3 || ms[1..] != ws[1..] {
        return Err(Error::shape("pool_features", &ms, &ws));
    }
    let (c, hw, k) = (ms[0], ms[1] * ms[2], ws[0]);
    let m = tape.reshape(m_cnn, &[c, hw])?;
    let mt = tape.transpose(m)?;
    let wk = tape.reshape(weights, &[k, hw])?;
    let local = tape.matmul(wk, mt)?;
    let local = tape.scale(local, 1.0 / hw as f64)?;
    let ones = tape.constant(Tensor::ones(&[1, hw]));
    let global = tape.matmul(ones, mt)?;
    let global = tape.scale(global, 1.0 / hw as f64)?;
    tape.concat(&[local, global], 0)
}

/// Semantic node features from a feature map and normalized heatmaps.
pub fn extract_semantic_features(m_cnn: &FeatureMap, hm: &HeatmapSet) -> Result<NodeFeatureSet> {
    let weights = hm
        .normalized()
        .ok_or_else(|| Error::Invalid("heatmaps must be normalized before pooling".into()))?;
    let beta = extract_confidences(hm)?;
    pooled_set(m_cnn, weights, beta)
}

/// Like [`extract_semantic_features`] but optionally skipping the heatmap
/// softmax, in which case raw scores weight the pooling and clamped raw
/// maxima serve as confidences.
pub fn semantic_nodes(m_cnn: &FeatureMap, raw: &HeatmapSet, normalize: bool) -> Result<NodeFeatureSet> {
    if normalize {
        extract_semantic_features(m_cnn, &normalize_heatmaps(raw)?)
    } else {
        pooled_set(m_cnn, raw.raw(), raw_confidences(raw)?)
    }
}

fn pooled_set(m_cnn: &FeatureMap, weights: &Tensor, beta: ConfidenceVector) -> Result<NodeFeatureSet> {
    if m_cnn.spatial() != (weights.shape()[1], weights.shape()[2]) {
        return Err(Error::shape("extract_semantic_features", m_cnn.tensor().shape(), weights.shape()));
    }
    let mut tape = Tape::new(crate::numerics::Mode::Eval);
    let m = tape.constant(m_cnn.tensor().clone());
    let w = tape.constant(weights.clone());
    let pooled = pool_features(&mut tape, m, w)?;
    NodeFeatureSet::new(tape.value(pooled).clone(), beta, Stage::Semantic)
}

// ---- identity losses --------------------------------------------------------

/// Registers K+1 unshared classifiers (standardize + linear) under `prefix`.
pub fn init_classifiers(store: &mut ParamStore, prefix: &str, rows: usize, width: usize, classes: usize) -> Result<()> {
    for k in 0..rows {
        store.init_standardize(&format!("{prefix}.cls{k}.bn"), width)?;
        store.init_linear(&format!("{prefix}.cls{k}.fc"), width, classes, crate::numerics::Init::Xavier)?;
    }
    Ok(())
}

fn classifier_logits(tape: &mut Tape, store: &ParamStore, prefix: &str, k: usize, x: Var) -> Result<Var> {
    let z = tape.standardize(x, store, &format!("{prefix}.cls{k}.bn"))?;
    linear(tape, store, &format!("{prefix}.cls{k}.fc"), z)
}

/// Stacks row `k` of every image into a `B×C` matrix.
fn stack_row(tape: &mut Tape, stacked: Var, rows_per_image: usize, images: usize, k: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..images).map(|b| b * rows_per_image + k).collect();
    tape.select_rows(stacked, &idx)
}

/// Class probabilities for every node row of a batch: entry k of the result
/// is a `B×classes` matrix from the row-k classifier.
pub fn classify(tape: &mut Tape, store: &ParamStore, prefix: &str, batch: &[NodeVars]) -> Result<Vec<Var>> {
    let (stacked, rows) = stack_batch(tape, batch)?;
    (0..rows)
        .map(|k| {
            let x = stack_row(tape, stacked, rows, batch.len(), k)?;
            let logits = classifier_logits(tape, store, prefix, k, x)?;
            tape.softmax(logits, 1)
        })
        .collect()
}

fn stack_batch(tape: &mut Tape, batch: &[NodeVars]) -> Result<(Var, usize)> {
    let first = batch.first().ok_or_else(|| Error::Batch("empty batch".into()))?;
    let shape = tape.shape(first.features).to_vec();
    if batch.iter().any(|n| tape.shape(n.features) != shape.as_slice()) {
        return Err(Error::Batch("images in a batch must share node shapes".into()));
    }
    let parts: Vec<Var> = batch.iter().map(|n| n.features).collect();
    Ok((tape.concat(&parts, 0)?, shape[0]))
}

/// `max(0, α + d(a, p) − d(a, n))` row by row with Euclidean `d`; inputs are
/// `n×C`, output `n×1`.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Invalid(format!("triplet margin must be non-negative, got {alpha}")));
    }
    let ap = tape.sub(anchor, positive)?;
    let an = tape.sub(anchor, negative)?;
    let d_ap = tape.row_norms(ap)?;
    let d_an = tape.row_norms(an)?;
    let diff = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_const(diff, alpha)?;
    tape.relu(shifted)
}

/// Hardest positive (farthest, same label, not itself) and hardest negative
/// (closest, other label) for every anchor row.
pub fn mine_batch_hard(rows: &[&[f64]], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    (0..rows.len())
        .map(|a| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for b in 0..rows.len() {
                if b == a {
                    continue;
                }
                let d = dist(rows[a], rows[b]);
                if labels[b] == labels[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((b, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((b, d));
                }
            }
            match (pos, neg) {
                (Some((p, _)), Some((n, _))) => Ok((p, n)),
                _ => Err(Error::Batch(format!("anchor {a} has no positive or no negative"))),
            }
        })
        .collect()
}

/// Rejects batches where the triplet term is undefined.
pub fn check_batch_labels(labels: &[usize]) -> Result<()> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Batch("need at least 2 identities".into()));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Batch(format!("identity {id} has fewer than 2 images")));
    }
    Ok(())
}

/// `(1/(K+1)) Σ_k β_k [CE_k + Triplet_k]`, averaged over the batch, using the
/// classifiers registered under `prefix`. `labels` are class indices.
pub fn identity_loss(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    batch: &[NodeVars],
    labels: &[usize],
    alpha: f64,
) -> Result<Var> {
    if batch.len() != labels.len() {
        return Err(Error::Batch(format!("{} images but {} labels", batch.len(), labels.len())));
    }
    check_batch_labels(labels)?;
    let (stacked, rows) = stack_batch(tape, batch)?;
    let b = batch.len();
    let norm = 1.0 / (b as f64 * rows as f64);
    let mut total: Option<Var> = None;
    for k in 0..rows {
        let x = stack_row(tape, stacked, rows, b, k)?;
        let logits = classifier_logits(tape, store, prefix, k, x)?;
        let classes = tape.shape(logits)[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!(
                "label {bad} outside classifier width {classes} (row {k})"
            )));
        }
        let logp = tape.log_softmax(logits, 1)?;
        let picked = tape.gather(
            logp,
            labels.iter().enumerate().map(|(i, &l)| Some(i * classes + l)).collect(),
            &[b, 1],
        )?;
        let ce = tape.neg(picked)?;

        let xv = tape.value(x);
        let row_refs: Vec<&[f64]> = (0..b).map(|i| xv.row(i)).collect();
        let mined = mine_batch_hard(&row_refs, labels)?;
        let (pi, ni): (Vec<usize>, Vec<usize>) = mined.into_iter().unzip();
        let p = tape.select_rows(x, &pi)?;
        let n = tape.select_rows(x, &ni)?;
        let tri = triplet_loss(tape, x, p, n, alpha)?;

        let term = tape.add(ce, tri)?;
        let weights: Vec<f64> = batch.iter().map(|n| n.beta.values()[k] * norm).collect();
        let w = tape.constant(Tensor::new(vec![b, 1], weights)?);
        let weighted = tape.mul(term, w)?;
        let s = tape.sum(weighted)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one node row"))
}

/// Confidence-weighted classification + batch-hard triplet loss on semantic
/// features, with the `sem` classifiers.
pub fn semantic_loss(tape: &mut Tape, store: &ParamStore, batch: &[NodeVars], labels: &[usize], alpha: f64) -> Result<Var> {
    identity_loss(tape, store, SEMANTIC_CLASSIFIERS, batch, labels, alpha)
}

pub const SEMANTIC_CLASSIFIERS: &str = "sem";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, Mode};
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let raw = HeatmapSet::new(t(&[2, 2, 2], &[0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0])).unwrap();
        let n = normalize_heatmaps(&raw).unwrap();
        let d = n.normalized().unwrap().data();
        assert!(d[..4].iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let e = 10f64.exp();
        assert_relative_eq!(d[4], e / (e + 3.0), epsilon = 1e-12);
        assert_relative_eq!(d[4], 0.999864, epsilon = 1e-6);
        assert_relative_eq!(d[5], 4.54e-5, epsilon = 1e-7);
        for k in 0..2 {
            assert!((d[k * 4..k * 4 + 4].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn confidence_examples() {
        let raw = HeatmapSet::new(t(&[2, 2, 2], &[0.0, 0.0, 0.0, 0.0, 800.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(extract_confidences(&raw).is_err());
        let beta = extract_confidences(&normalize_heatmaps(&raw).unwrap()).unwrap();
        assert_eq!(beta.values(), &[0.25, 1.0, 1.0]);
        assert_eq!(*beta.values().last().unwrap(), 1.0);
    }

    #[test]
    fn pooling_examples() {
        // c = 2, all ones: local row = 1/(h·w) of the slice mass
        let m = FeatureMap::new(Tensor::ones(&[2, 2, 2])).unwrap();
        let raw = HeatmapSet::new(t(&[1, 2, 2], &[0.3, -1.0, 2.0, 0.0])).unwrap();
        let s = extract_semantic_features(&m, &normalize_heatmaps(&raw).unwrap()).unwrap();
        assert_relative_eq!(s.local_row(0)[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(s.local_row(0)[1], 0.25, epsilon = 1e-15);

        // one-hot at (0,0)
        let m = FeatureMap::new(t(&[2, 2, 2], &[4.0, 1.0, 1.0, 1.0, -8.0, 1.0, 1.0, 1.0])).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let mv = tape.constant(m.tensor().clone());
        let w = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let p = pool_features(&mut tape, mv, w).unwrap();
        assert_eq!(tape.value(p).row(0), &[1.0, -2.0]);

        // global row is the spatial mean
        let m = FeatureMap::new(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let raw = HeatmapSet::new(Tensor::zeros(&[3, 2, 2])).unwrap();
        let s = semantic_nodes(&m, &raw, true).unwrap();
        assert_eq!(s.global_row(), &[2.5]);
        // uniform heatmap pools to global / (h·w)
        assert_relative_eq!(s.local_row(1)[0], 2.5 / 4.0, epsilon = 1e-15);
        assert_eq!(s.keypoints(), 3);
    }

    #[test]
    fn pooling_rejects_spatial_mismatch() {
        let m = FeatureMap::new(Tensor::ones(&[2, 2, 3])).unwrap();
        let raw = HeatmapSet::new(Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(semantic_nodes(&m, &raw, true).is_err());
    }

    #[test]
    fn pooling_is_differentiable_in_the_map() {
        let w = t(&[2, 2, 3], &[0.1, 0.2, 0.3, 0.1, 0.2, 0.1, 0.5, 0.1, 0.1, 0.1, 0.1, 0.1]);
        let m = t(&[3, 2, 3], &(0..18).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let err = gradient_check(
            move |tape, v| {
                let wv = tape.constant(w.clone());
                let p = pool_features(tape, v[0], wv)?;
                let sq = tape.mul(p, p)?;
                tape.sum(sq)
            },
            &[m],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn triplet_examples() {
        // rows realise the requested distances along one axis
        let cases = [(0.2, 0.9, 0.0), (0.9, 0.2, 1.0), (0.0, 0.1, 0.2)];
        for (d_ap, d_an, want) in cases {
            let mut tape = Tape::new(Mode::Train);
            let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
            let p = tape.constant(t(&[1, 2], &[d_ap, 0.0]));
            let n = tape.constant(t(&[1, 2], &[0.0, d_an]));
            let l = triplet_loss(&mut tape, a, p, n, 0.3).unwrap();
            assert_relative_eq!(tape.item(l), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_hard_mining_and_feasibility() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![3.0], vec![0.5], vec![10.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let labels = [0, 0, 0, 1, 1];
        let mined = mine_batch_hard(&refs, &labels).unwrap();
        assert_eq!(mined[0], (2, 3));
        assert_eq!(mined[3], (4, 0));
        assert!(check_batch_labels(&[0, 0, 1]).is_err());
        assert!(check_batch_labels(&[0, 0, 0]).is_err());
        assert!(check_batch_labels(&[0, 1, 1, 0]).is_ok());
    }

    fn toy_batch(tape: &mut Tape, beta: f64) -> Vec<NodeVars> {
        // 2 identities × 2 images, K = 2, C = 2; negatives far away so the
        // margin is inactive.
        let feats = [
            [1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            [1.1, 0.0, 0.0, 1.1, 1.1, 1.1],
            [50.0, 0.0, 0.0, 50.0, 50.0, 50.0],
            [50.1, 0.0, 0.0, 50.1, 50.1, 50.1],
        ];
        feats
            .iter()
            .map(|f| {
                NodeFeatureSet::new(
                    t(&[3, 2], f),
                    ConfidenceVector::uniform(2, beta).unwrap(),
                    Stage::Semantic,
                )
                .unwrap()
                .on_tape(tape)
            })
            .collect()
    }

    fn zero_classifiers(rows: usize, width: usize, classes: usize) -> ParamStore {
        let mut s = ParamStore::new(0);
        init_classifiers(&mut s, SEMANTIC_CLASSIFIERS, rows, width, classes).unwrap();
        let names: Vec<String> = s.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with("weight")).collect();
        for n in names {
            let len = s.get(&n).unwrap().numel();
            s.set(&n, &vec![0.0; len]).unwrap();
        }
        s
    }

    #[test]
    fn uniform_classifiers_give_ln2() {
        let store = zero_classifiers(3, 2, 2);
        let mut tape = Tape::new(Mode::Train);
        let batch = toy_batch(&mut tape, 1.0);
        let l = semantic_loss(&mut tape, &store, &batch, &[0, 0, 1, 1], 0.3).unwrap();
        // global slot has β = 1 as well
        assert_relative_eq!(tape.item(l), std::f64::consts::LN_2, epsilon = 1e-12);
        let probs = classify(&mut tape, &store, SEMANTIC_CLASSIFIERS, &batch).unwrap();
        assert_eq!(probs.len(), 3);
        for p in probs {
            assert!(tape.data(p).iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn zero_confidence_removes_local_terms() {
        let store = zero_classifiers(3, 2, 2);
        let mut tape = Tape::new(Mode::Train);
        let batch = toy_batch(&mut tape, 0.0);
        let l = semantic_loss(&mut tape, &store, &batch, &[0, 0, 1, 1], 0.3).unwrap();
        // only the global row (β = 1) of 3 rows contributes
        assert_relative_eq!(tape.item(l), std::f64::consts::LN_2 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_confidence_gives_zero_loss() {
        let store = zero_classifiers(3, 2, 2);
        let mut tape = Tape::new(Mode::Train);
        let batch: Vec<NodeVars> = toy_batch(&mut tape, 0.0)
            .into_iter()
            .map(|mut n| {
                n.beta = ConfidenceVector::from_values(vec![0.0; 3]).unwrap();
                n
            })
            .collect();
        let l = semantic_loss(&mut tape, &store, &batch, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn unshared_classifiers_differ() {
        let mut store = zero_classifiers(2, 2, 2);
        store.set("sem.cls0.fc.weight", &[1.0, -1.0, 0.0, 0.0]).unwrap();
        store.set("sem.cls1.fc.weight", &[-1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let same_rows = NodeFeatureSet::new(
            t(&[2, 2], &[2.0, 0.0, 2.0, 0.0]),
            ConfidenceVector::uniform(1, 1.0).unwrap(),
            Stage::Semantic,
        )
        .unwrap()
        .on_tape(&mut tape);
        let probs = classify(&mut tape, &store, SEMANTIC_CLASSIFIERS, &[same_rows]).unwrap();
        let (p0, p1) = (tape.data(probs[0]).to_vec(), tape.data(probs[1]).to_vec());
        assert!((p0[0] - p1[0]).abs() > 0.5);
        assert_relative_eq!(p0.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let store = zero_classifiers(3, 2, 2);
        let mut tape = Tape::new(Mode::Train);
        let batch = toy_batch(&mut tape, 1.0);
        assert!(semantic_loss(&mut tape, &store, &batch, &[0, 0, 2, 2], 0.3).is_err());
        assert!(semantic_loss(&mut tape, &store, &batch[..3], &[0, 0, 1], 0.3).is_err());
    }
}
