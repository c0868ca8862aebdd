//! The assembled model: parameters, per-image embeddings, and the joint loss.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};
use crate::relation::{build_skeleton, init_relation, relation_forward, relation_loss, relation_module, SkeletonAdjacency};
use crate::semantic::{init_classifiers, semantic_loss, semantic_nodes, NodeFeatureSet, NodeVars, SEMANTIC_CLASSIFIERS};
use crate::topology::{init_topology, similarity_logit, topology_module, verification_loss_var};

use super::config::Config;
use super::dataset::Sample;

/// The skeleton used for `k` keypoints: the human skeleton for 14, a chain
/// in keypoint order otherwise.
pub fn skeleton_for(k: usize) -> Result<SkeletonAdjacency> {
    if k == 14 {
        build_skeleton(k)
    } else {
        let edges: Vec<_> = (1..k).map(|i| (i - 1, i)).collect();
        SkeletonAdjacency::from_edges(k, &edges)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub adjacency: SkeletonAdjacency,
}

/// Per-image features at the semantic and relation stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub semantic: NodeFeatureSet,
    pub relation: NodeFeatureSet,
}

/// One verification pair within a batch: image indices and same-identity flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// The joint objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub semantic: Var,
    pub relation: Option<Var>,
    pub topology: Option<Var>,
}

impl Model {
    /// Fresh parameters for `classes` training identities, seeded by the config.
    pub fn new(config: Config, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::Invalid("need at least 2 training identities".into()));
        }
        let mut store = ParamStore::new(config.seed);
        let (k, c) = (config.k, config.c);
        init_classifiers(&mut store, SEMANTIC_CLASSIFIERS, k + 1, c, classes)?;
        init_relation(&mut store, &config.relation(), k, c, classes)?;
        init_topology(&mut store, &config.topology(), k, c)?;
        let adjacency = skeleton_for(k)?;
        Ok(Model {
            config,
            store,
            adjacency,
        })
    }

    /// Wraps loaded parameters.
    pub fn from_store(config: Config, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let adjacency = skeleton_for(config.k)?;
        Ok(Model {
            config,
            store,
            adjacency,
        })
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let (k, c) = (s.heatmaps.keypoints(), s.m_cnn.channels());
        if k != self.config.k || c != self.config.c {
            return Err(Error::Invalid(format!(
                "sample has K={k}, c={c}; model expects K={}, C={}",
                self.config.k, self.config.c
            )));
        }
        Ok(())
    }

    /// Parameter-free semantic features of one image.
    pub fn semantic(&self, s: &Sample) -> Result<NodeFeatureSet> {
        self.check_sample(s)?;
        semantic_nodes(&s.m_cnn, &s.heatmaps, self.config.normalize_heatmaps)
    }

    /// Semantic and relation features of one image, with running statistics.
    pub fn embed(&self, s: &Sample) -> Result<Embedding> {
        let semantic = self.semantic(s)?;
        let relation = relation_forward(&semantic, &self.adjacency, &self.store, &self.config.relation())?;
        Ok(Embedding { semantic, relation })
    }

    /// `L_S + λ_R L_R + λ_T L_T` over a batch of semantic features; `labels`
    /// are class indices and `pairs` feed the verification term. Terms whose
    /// weight is zero are not built.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[NodeFeatureSet],
        labels: &[usize],
        pairs: &[Pair],
    ) -> Result<LossParts> {
        let cfg = &self.config;
        let nodes: Vec<NodeVars> = batch.iter().map(|n| n.on_tape(tape)).collect();
        let semantic = semantic_loss(tape, store, &nodes, labels, cfg.alpha)?;
        let mut total = semantic;
        let (mut relation, mut topology) = (None, None);
        if cfg.lambda_r == 0.0 && cfg.lambda_t == 0.0 {
            return Ok(LossParts {
                total,
                semantic,
                relation,
                topology,
            });
        }
        let rel = relation_module(tape, store, &cfg.relation(), &self.adjacency, &nodes)?;
        if cfg.lambda_r != 0.0 {
            let l = relation_loss(tape, store, &rel, labels, cfg.alpha)?;
            let w = tape.scale(l, cfg.lambda_r)?;
            total = tape.add(total, w)?;
            relation = Some(l);
        }
        if cfg.lambda_t != 0.0 {
            if pairs.is_empty() {
                return Err(Error::Batch("verification term needs at least one pair".into()));
            }
            let topo = cfg.topology();
            let mut logits = Vec::with_capacity(pairs.len());
            for p in pairs {
                if p.a >= rel.len() || p.b >= rel.len() {
                    return Err(Error::Batch(format!("pair ({}, {}) outside the batch", p.a, p.b)));
                }
                let (x, y) = topology_module(tape, store, &topo, &self.adjacency, &rel[p.a], &rel[p.b])?;
                logits.push(similarity_logit(tape, store, x.features, y.features)?);
            }
            let z = tape.concat(&logits, 0)?;
            let ys: Vec<f64> = pairs.iter().map(|p| if p.same { 1.0 } else { 0.0 }).collect();
            let l = verification_loss_var(tape, z, &ys)?;
            let w = tape.scale(l, cfg.lambda_t)?;
            total = tape.add(total, w)?;
            topology = Some(l);
        }
        Ok(LossParts {
            total,
            semantic,
            relation,
            topology,
        })
    }
}
