//! Two-stage retrieval: rank by relation similarity, then re-rank the top
//! `n` by a mix with the topology verifier.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::relation::{cosine, relation_similarity};
use crate::semantic::NodeFeatureSet;
use crate::topology::pair_similarity;

use super::dataset::{Dataset, Split};
use super::metrics::{evaluate_rankings, Metrics};
use super::model::{Embedding, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Per query, gallery indices best first.
    pub rankings: Vec<Vec<usize>>,
    /// Stage-1 scores `s^R[q][g]`.
    pub relation_scores: Vec<Vec<f64>>,
    /// Final scores: `γ s^R + (1 − γ) s^T` for refined pairs, `s^R` elsewhere.
    pub final_scores: Vec<Vec<f64>>,
    /// Per query, the gallery indices that were refined.
    pub refined: Vec<Vec<usize>>,
}

/// Per query, `(gallery index, s^T)` for the refined candidates in stage-1 order.
pub type Candidates = Vec<Vec<(usize, f64)>>;

/// Indices sorted by descending score, lower index first on ties.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Relation-stage similarity of every query against every gallery item.
pub fn relation_grid(queries: &[NodeFeatureSet], gallery: &[NodeFeatureSet]) -> Result<Vec<Vec<f64>>> {
    queries
        .par_iter()
        .map(|q| gallery.iter().map(|g| relation_similarity(q, g)).collect())
        .collect()
}

/// Topology similarities for the stage-1 top `n` of every query, as
/// `(gallery index, s^T)` in stage-1 order.
pub fn topology_candidates(
    model: &Model,
    queries: &[NodeFeatureSet],
    gallery: &[NodeFeatureSet],
    relation_scores: &[Vec<f64>],
    n: usize,
) -> Result<Candidates> {
    let topo = model.config.topology();
    queries
        .par_iter()
        .zip(relation_scores)
        .map(|(q, s)| {
            rank_desc(s)
                .into_iter()
                .take(n)
                .map(|g| Ok((g, pair_similarity(q, &gallery[g], &model.adjacency, &model.store, &topo)?)))
                .collect()
        })
        .collect()
}

/// Combines stage-1 scores with precomputed topology candidates. Only the
/// first `n` candidates of each query are used.
pub fn rerank(
    relation_scores: &[Vec<f64>],
    candidates: &[Vec<(usize, f64)>],
    gamma: f64,
    n: usize,
) -> Result<RetrievalResult> {
    if !(0.0..=1.0).contains(&gamma) || n == 0 {
        return Err(Error::Invalid("gamma must lie in [0, 1] and n ≥ 1".into()));
    }
    let mut out = RetrievalResult {
        rankings: Vec::with_capacity(relation_scores.len()),
        relation_scores: relation_scores.to_vec(),
        final_scores: relation_scores.to_vec(),
        refined: Vec::with_capacity(relation_scores.len()),
    };
    for (q, s) in relation_scores.iter().enumerate() {
        let mut ranking = rank_desc(s);
        let top = n.min(ranking.len());
        let cands = &candidates[q];
        if cands.len() < top || cands.iter().zip(&ranking).any(|(c, &g)| c.0 != g) {
            return Err(Error::Invalid(format!("topology candidates of query {q} do not cover the top {top}")));
        }
        for &(g, st) in &cands[..top] {
            out.final_scores[q][g] = gamma * s[g] + (1.0 - gamma) * st;
        }
        let fin = &out.final_scores[q];
        // stable: equal mixed scores keep their stage-1 order
        ranking[..top].sort_by(|&a, &b| fin[b].total_cmp(&fin[a]));
        out.refined.push(cands[..top].iter().map(|c| c.0).collect());
        out.rankings.push(ranking);
    }
    Ok(out)
}

/// Full two-stage retrieval over relation-stage features.
pub fn retrieve(
    model: &Model,
    queries: &[NodeFeatureSet],
    gallery: &[NodeFeatureSet],
    gamma: f64,
    n: usize,
) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::Invalid("empty gallery".into()));
    }
    let s = relation_grid(queries, gallery)?;
    let cands = topology_candidates(model, queries, gallery, &s, n)?;
    rerank(&s, &cands, gamma, n)
}

/// Retrieval variants from the plain global feature up to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    GlobalOnly,
    Semantic,
    SemanticRelation,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::GlobalOnly, Variant::Semantic, Variant::SemanticRelation, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GlobalOnly => "global",
            Variant::Semantic => "semantic",
            Variant::SemanticRelation => "semantic+relation",
            Variant::Full => "full",
        }
    }
}

/// Embedded query and gallery sets of one split.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub queries: Vec<Embedding>,
    pub gallery: Vec<Embedding>,
    pub query_labels: Vec<u32>,
    pub gallery_labels: Vec<u32>,
}

impl Benchmark {
    pub fn new(model: &Model, dataset: &Dataset, split: &Split) -> Result<Self> {
        if split.gallery.is_empty() || split.query.is_empty() {
            return Err(Error::Invalid("split has no queries or an empty gallery".into()));
        }
        let embed = |idx: &[usize]| -> Result<Vec<Embedding>> {
            idx.par_iter().map(|&i| model.embed(&dataset.samples[i])).collect()
        };
        let labels = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].identity).collect();
        Ok(Benchmark {
            queries: embed(&split.query)?,
            gallery: embed(&split.gallery)?,
            query_labels: labels(&split.query),
            gallery_labels: labels(&split.gallery),
        })
    }

    fn stage(set: &[Embedding], relation: bool) -> Vec<NodeFeatureSet> {
        set.iter()
            .map(|e| if relation { e.relation.clone() } else { e.semantic.clone() })
            .collect()
    }

    pub fn relation_scores(&self) -> Result<Vec<Vec<f64>>> {
        relation_grid(&Self::stage(&self.queries, true), &Self::stage(&self.gallery, true))
    }

    /// Ranking metrics of a single-stage variant.
    pub fn evaluate_stage(&self, variant: Variant) -> Result<Metrics> {
        let scores = match variant {
            Variant::GlobalOnly => self
                .queries
                .iter()
                .map(|q| {
                    self.gallery
                        .iter()
                        .map(|g| cosine(q.semantic.global_row(), g.semantic.global_row()))
                        .collect()
                })
                .collect(),
            Variant::Semantic => relation_grid(&Self::stage(&self.queries, false), &Self::stage(&self.gallery, false))?,
            Variant::SemanticRelation => self.relation_scores()?,
            Variant::Full => return Err(Error::Invalid("the full variant needs a model; use evaluate_full".into())),
        };
        let rankings: Vec<Vec<usize>> = scores.iter().map(|s: &Vec<f64>| rank_desc(s)).collect();
        evaluate_rankings(&rankings, &self.query_labels, &self.gallery_labels)
    }

    /// Stage-1 scores and topology candidates for the top `n` of every query.
    pub fn candidates(&self, model: &Model, n: usize) -> Result<(Vec<Vec<f64>>, Candidates)> {
        let s = self.relation_scores()?;
        let c = topology_candidates(
            model,
            &Self::stage(&self.queries, true),
            &Self::stage(&self.gallery, true),
            &s,
            n,
        )?;
        Ok((s, c))
    }

    /// Metrics of the full two-stage model for each `(γ, n)` setting,
    /// computing the verifier once for the largest `n`.
    pub fn evaluate_full(&self, model: &Model, settings: &[(f64, usize)]) -> Result<Vec<Metrics>> {
        let max_n = settings.iter().map(|s| s.1).max().unwrap_or(1);
        let (s, c) = self.candidates(model, max_n)?;
        settings
            .iter()
            .map(|&(gamma, n)| {
                let r = rerank(&s, &c, gamma, n)?;
                evaluate_rankings(&r.rankings, &self.query_labels, &self.gallery_labels)
            })
            .collect()
    }

    pub fn evaluate(&self, model: &Model, variant: Variant) -> Result<Metrics> {
        match variant {
            Variant::Full => Ok(self
                .evaluate_full(model, &[(model.config.gamma, model.config.top_n)])?
                .remove(0)),
            v => self.evaluate_stage(v),
        }
    }
}

/// Embeds the split and scores the full model with its configured `γ`, `n`.
pub fn evaluate_model(model: &Model, dataset: &Dataset) -> Result<Metrics> {
    let split = dataset.split()?;
    Benchmark::new(model, dataset, &split)?.evaluate(model, Variant::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_desc(&[0.5, 0.9, 0.5, 0.1]), vec![1, 0, 2, 3]);
    }

    fn cands(s: &[Vec<f64>], st: &[Vec<f64>], n: usize) -> Vec<Vec<(usize, f64)>> {
        s.iter()
            .zip(st)
            .map(|(row, t)| rank_desc(row).into_iter().take(n).map(|g| (g, t[g])).collect())
            .collect()
    }

    #[test]
    fn rerank_examples() {
        let s = vec![vec![0.9, 0.8, 0.7, 0.1]];
        let st = vec![vec![0.0, 0.1, 1.0, 1.0]];
        // γ = 1 keeps stage-1 order
        let r = rerank(&s, &cands(&s, &st, 3), 1.0, 3).unwrap();
        assert_eq!(r.rankings[0], vec![0, 1, 2, 3]);
        // only the top 3 move; item 3 stays last despite its topology score
        let r = rerank(&s, &cands(&s, &st, 3), 0.5, 3).unwrap();
        assert_eq!(r.rankings[0], vec![2, 0, 1, 3]);
        assert_eq!(r.refined[0], vec![0, 1, 2]);
        assert_eq!(r.final_scores[0][3], 0.1);
        // n beyond the gallery refines everything
        let r = rerank(&s, &cands(&s, &st, 10), 0.5, 10).unwrap();
        assert_eq!(r.rankings[0], vec![2, 3, 0, 1]);
        assert!(rerank(&s, &cands(&s, &st, 2), 0.5, 3).is_err());
    }
}
