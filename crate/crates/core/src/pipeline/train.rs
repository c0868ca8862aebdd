//! End-to-end training with momentum SGD over identity-balanced batches.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Mode, Tape};
use crate::semantic::NodeFeatureSet;

use super::config::Config;
use super::dataset::Dataset;
use super::model::{Model, Pair};

/// Trained model and the mean loss of every epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<f64>,
}

/// Maps identities to contiguous class indices, in identity order.
pub fn class_map(dataset: &Dataset, indices: &[usize]) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = indices.iter().map(|&i| dataset.samples[i].identity).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect()
}

/// Draws `P × K` batches covering every identity once per epoch; the last
/// batch is topped up with identities from the start of the shuffled order.
fn epoch_batches(
    by_class: &[Vec<usize>],
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.shuffle(rng);
    let p = cfg.batch_p.min(order.len());
    let batches = order.len().div_ceil(p);
    (0..batches)
        .map(|b| {
            let classes: Vec<usize> = (0..p).map(|j| order[(b * p + j) % order.len()]).collect();
            let mut batch = Vec::with_capacity(p * cfg.batch_k);
            for class in classes {
                let pool = &by_class[class];
                let mut picked: Vec<usize> = pool.choose_multiple(rng, cfg.batch_k.min(pool.len())).copied().collect();
                while picked.len() < cfg.batch_k {
                    picked.push(*pool.choose(rng).expect("non-empty pool"));
                }
                batch.extend(picked.into_iter().map(|s| (s, class)));
            }
            batch
        })
        .collect()
}

/// One positive and one negative partner for every anchor, drawn uniformly.
pub fn sample_pairs(labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let mut pairs = Vec::with_capacity(2 * labels.len());
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&b| b != a && labels[b] == la).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&b| labels[b] != la).collect();
        let (Some(&p), Some(&n)) = (pos.choose(rng), neg.choose(rng)) else {
            return Err(Error::Batch(format!("anchor {a} lacks a positive or a negative partner")));
        };
        pairs.push(Pair { a, b: p, same: true });
        pairs.push(Pair { a, b: n, same: false });
    }
    Ok(pairs)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

/// Trains a fresh model on the samples at `indices`.
pub fn train(dataset: &Dataset, indices: &[usize], config: &Config) -> Result<TrainOutcome> {
    let classes = class_map(dataset, indices);
    let model = Model::new(config.clone(), classes.len())?;
    train_model(model, dataset, indices)
}

/// Continues training `model` (whose classifiers must cover the identities
/// at `indices`).
pub fn train_model(mut model: Model, dataset: &Dataset, indices: &[usize]) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    let classes = class_map(dataset, indices);
    let mut by_class = vec![Vec::new(); classes.len()];
    for &i in indices {
        by_class[classes[&dataset.samples[i].identity]].push(i);
    }
    by_class.retain(|pool| pool.len() >= 2);
    if by_class.len() < 2 {
        return Err(Error::Batch("training needs at least 2 identities with 2 or more images".into()));
    }
    let features: HashMap<usize, NodeFeatureSet> = indices
        .iter()
        .map(|&i| Ok((i, model.semantic(&dataset.samples[i])?)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut sum = 0.0;
        let batches = epoch_batches(&by_class, &cfg, &mut rng);
        for batch in &batches {
            let nodes: Vec<NodeFeatureSet> = batch.iter().map(|(s, _)| features[s].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&(s, _)| classes[&dataset.samples[s].identity]).collect();
            let pairs = sample_pairs(&labels, &mut rng)?;
            let mut tape = Tape::new(Mode::Train);
            let parts = model
                .total_loss(&mut tape, &model.store, &nodes, &labels, &pairs)
                .map_err(diverged(epoch))?;
            let loss = tape.item(parts.total);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sum += loss;
            let grads = tape.backward(parts.total).map_err(diverged(epoch))?;
            grads.update_running_stats(&mut model.store)?;
            for (name, g) in grads.params() {
                let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                let p = model.store.get_mut(name)?;
                for ((vi, gi), pi) in v.iter_mut().zip(g).zip(p.data_mut()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
                if !p.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
            }
        }
        trace.push(sum / batches.len() as f64);
    }
    Ok(TrainOutcome { model, trace })
}

/// `epoch,loss` lines with a header.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l:.6}\n", e + 1));
    }
    out
}
