//! Finite-difference check of every differentiable tape op, the module
//! compositions built from them, and the joint training loss.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{
    gradient_check, gradient_check_params, Mode, ParamEntry, ParamStore, SparsePattern, Tape, Tensor, Var,
};
use crate::relation::relation_module;
use crate::semantic::{identity_loss, pool_features, triplet_loss, ConfidenceVector, NodeFeatureSet, NodeVars, Stage};
use crate::topology::{
    affinity_values, matching_from_affinity, power_iteration_steps, similarity_logit, sinkhorn_var, topology_module,
    verification_loss_var,
};

use super::config::Config;
use super::model::{skeleton_for, Model, Pair};

/// Worst relative error of one checked function.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
}

type Scalar<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    // sum of uniforms is close enough to Gaussian for test inputs
    let data = (0..n)
        .map(|_| scale * ((0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Entries of magnitude in `[0.2, 1]` with random sign, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// `Σ w ⊙ out` with fixed pseudo-random weights, so every output entry
/// contributes a distinct direction.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7072_6f6a);
    let w = tape.constant(normal(&mut rng, &shape, 1.0));
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

fn node_vars(features: Var, k: usize, beta: &[f64]) -> NodeVars {
    let mut b = beta[..k].to_vec();
    b.push(1.0);
    NodeVars {
        features,
        beta: ConfidenceVector::from_values(b).expect("confidences in range"),
        stage: Stage::Semantic,
    }
}

fn op_cases<'a>(rng: &mut ChaCha8Rng, bn: &'a ParamStore) -> Vec<(&'static str, Scalar<'a>, Vec<Tensor>)> {
    let m34 = |rng: &mut ChaCha8Rng| normal(rng, &[3, 4], 1.0);
    let pattern = Rc::new(
        SparsePattern::new(4, vec![0, 0, 1, 2, 2, 3, 3], vec![0, 2, 1, 0, 3, 1, 3]).expect("valid pattern"),
    );
    let gather_index: Rc<[Option<usize>]> = [Some(5), None, Some(0), Some(5), Some(11), Some(2)].into();

    macro_rules! unary {
        ($name:literal, $op:ident, $input:expr) => {
            ($name, Box::new(|t: &mut Tape, v: &[Var]| {
                let o = t.$op(v[0])?;
                project(t, o)
            }) as Scalar, vec![$input])
        };
    }
    macro_rules! binary {
        ($name:literal, $op:ident, $a:expr, $b:expr) => {
            ($name, Box::new(|t: &mut Tape, v: &[Var]| {
                let o = t.$op(v[0], v[1])?;
                project(t, o)
            }) as Scalar, vec![$a, $b])
        };
    }

    vec![
        binary!("matmul", matmul, m34(rng), normal(rng, &[4, 2], 1.0)),
        binary!("add", add, m34(rng), m34(rng)),
        binary!("sub", sub, m34(rng), m34(rng)),
        binary!("mul", mul, m34(rng), m34(rng)),
        binary!("div", div, m34(rng), positive(rng, &[3, 4])),
        binary!("mul_scalar", mul_scalar, m34(rng), normal(rng, &[1, 1], 1.0)),
        unary!("neg", neg, m34(rng)),
        unary!("abs", abs, away_from_zero(rng, &[3, 4])),
        unary!("relu", relu, away_from_zero(rng, &[3, 4])),
        unary!("sigmoid", sigmoid, m34(rng)),
        unary!("exp", exp, m34(rng)),
        unary!("ln", ln, positive(rng, &[3, 4])),
        unary!("sqrt", sqrt, positive(rng, &[3, 4])),
        unary!("softplus", softplus, normal(rng, &[3, 4], 3.0)),
        unary!("sum", sum, m34(rng)),
        unary!("mean", mean, m34(rng)),
        unary!("transpose", transpose, m34(rng)),
        unary!("row_norms", row_norms, m34(rng)),
        unary!("l2_normalize_rows", l2_normalize_rows, m34(rng)),
        ("spmv", Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.spmv(v[0], &pattern, v[1])?;
            project(t, o)
        }), vec![normal(rng, &[7], 1.0), normal(rng, &[4], 1.0)]),
        ("scale", Box::new(|t: &mut Tape, v: &[Var]| {
            let o = t.scale(v[0], -1.7)?;
            project(t, o)
        }), vec![m34(rng)]),
        ("add_const", Box::new(|t: &mut Tape, v: &[Var]| {
            let o = t.add_const(v[0], 0.4)?;
            project(t, o)
        }), vec![m34(rng)]),
        ("clamp_min", Box::new(|t: &mut Tape, v: &[Var]| {
            let o = t.clamp_min(v[0], 0.0)?;
            project(t, o)
        }), vec![away_from_zero(rng, &[3, 4])]),
        ("sum_axis", Box::new(|t: &mut Tape, v: &[Var]| {
            let a = t.sum_axis(v[0], 0)?;
            let b = t.sum_axis(v[0], 1)?;
            let (a, b) = (project(t, a)?, project(t, b)?);
            t.add(a, b)
        }), vec![m34(rng)]),
        ("softmax", Box::new(|t: &mut Tape, v: &[Var]| {
            let a = t.softmax(v[0], 0)?;
            let b = t.softmax(v[0], 1)?;
            let (a, b) = (project(t, a)?, project(t, b)?);
            t.add(a, b)
        }), vec![m34(rng)]),
        ("log_softmax", Box::new(|t: &mut Tape, v: &[Var]| {
            let a = t.log_softmax(v[0], 0)?;
            let b = t.log_softmax(v[0], 1)?;
            let (a, b) = (project(t, a)?, project(t, b)?);
            t.add(a, b)
        }), vec![m34(rng)]),
        ("normalize_axis", Box::new(|t: &mut Tape, v: &[Var]| {
            let a = t.normalize_axis(v[0], 0)?;
            let b = t.normalize_axis(v[0], 1)?;
            let (a, b) = (project(t, a)?, project(t, b)?);
            t.add(a, b)
        }), vec![positive(rng, &[3, 4])]),
        ("standardize", Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.standardize(v[0], bn, "bn")?;
            project(t, o)
        }), vec![normal(rng, &[5, 3], 1.0)]),
        ("gather", Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.gather(v[0], gather_index.clone(), &[2, 3])?;
            project(t, o)
        }), vec![m34(rng)]),
        ("reshape", Box::new(|t: &mut Tape, v: &[Var]| {
            let o = t.reshape(v[0], &[2, 6])?;
            project(t, o)
        }), vec![m34(rng)]),
        ("slice_rows", Box::new(|t: &mut Tape, v: &[Var]| {
            let o = t.slice_rows(v[0], 1, 3)?;
            project(t, o)
        }), vec![m34(rng)]),
        ("select_rows", Box::new(|t: &mut Tape, v: &[Var]| {
            let o = t.select_rows(v[0], &[2, 0, 2])?;
            project(t, o)
        }), vec![m34(rng)]),
        ("concat", Box::new(|t: &mut Tape, v: &[Var]| {
            let r = t.concat(&[v[0], v[1]], 0)?;
            let c = t.concat(&[v[0], v[2]], 1)?;
            let (r, c) = (project(t, r)?, project(t, c)?);
            t.add(r, c)
        }), vec![m34(rng), normal(rng, &[2, 4], 1.0), normal(rng, &[3, 2], 1.0)]),
    ]
}

/// One entry of every trainable tensor, at a random index.
fn entry_per_tensor(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<ParamEntry> {
    store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            index: rng.random_range(0..t.numel()),
        })
        .collect()
}

/// Runs every check once with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64, eps: f64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &str, err: f64| {
        out.push(GradCase {
            name: name.to_string(),
            max_rel_error: err,
        })
    };

    let mut bn = ParamStore::new(seed);
    bn.init_standardize("bn", 3)?;
    for (name, f, inputs) in op_cases(&mut rng, &bn) {
        record(name, gradient_check(f, &inputs, eps)?);
    }

    // module compositions on a small chain skeleton
    let (k, c) = (5, 3);
    let adj = skeleton_for(k)?;
    let cfg = Config {
        k,
        c,
        ..Config::default()
    };
    let model = Model::new(cfg.clone(), 2)?;
    let store = &model.store;
    let beta: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();

    record(
        "pool_features",
        gradient_check(
            |t, v| {
                let o = pool_features(t, v[0], v[1])?;
                project(t, o)
            },
            &[normal(&mut rng, &[c, 4, 2], 1.0), positive(&mut rng, &[k, 4, 2])],
            eps,
        )?,
    );
    record(
        "triplet_loss",
        gradient_check(
            |t, v| {
                let o = triplet_loss(t, v[0], v[1], v[2], 2.0)?;
                project(t, o)
            },
            &[normal(&mut rng, &[4, c], 1.0), normal(&mut rng, &[4, c], 1.0), normal(&mut rng, &[4, c], 1.0)],
            eps,
        )?,
    );
    record(
        "sinkhorn",
        gradient_check(
            |t, v| {
                let o = sinkhorn_var(t, v[0], 10)?;
                project(t, o)
            },
            &[positive(&mut rng, &[4, 4])],
            eps,
        )?,
    );
    let dense = Rc::new(SparsePattern::dense(4));
    record(
        "power_iteration",
        gradient_check(
            |t, v| {
                let steps = power_iteration_steps(t, v[0], &dense, 20)?;
                project(t, *steps.last().expect("iterates"))
            },
            &[positive(&mut rng, &[16])],
            eps,
        )?,
    );
    record(
        "graph_matching",
        gradient_check(
            |t, v| {
                let (values, pattern) = affinity_values(t, v[0], v[1], &adj, v[2], v[3])?;
                let u = matching_from_affinity(t, values, &pattern, k, 20, 10)?;
                project(t, u)
            },
            &[
                normal(&mut rng, &[k, c], 1.0),
                normal(&mut rng, &[k, c], 1.0),
                Tensor::scalar(rng.random_range(1.0..5.0)),
                Tensor::scalar(rng.random_range(1.0..5.0)),
            ],
            eps,
        )?,
    );
    let labels = [0, 0, 1, 1];
    let batch_inputs: Vec<Tensor> = (0..4).map(|_| normal(&mut rng, &[k + 1, c], 1.0)).collect();
    record(
        "identity_loss",
        gradient_check(
            |t, v| {
                let nodes: Vec<NodeVars> = v.iter().map(|&f| node_vars(f, k, &beta)).collect();
                identity_loss(t, store, "sem", &nodes, &labels, cfg.alpha)
            },
            &batch_inputs,
            eps,
        )?,
    );
    record(
        "relation_module",
        gradient_check(
            |t, v| {
                let nodes: Vec<NodeVars> = v.iter().map(|&f| node_vars(f, k, &beta)).collect();
                let out = relation_module(t, store, &cfg.relation(), &adj, &nodes)?;
                let feats: Vec<Var> = out.iter().map(|n| n.features).collect();
                let all = t.concat(&feats, 0)?;
                project(t, all)
            },
            &batch_inputs,
            eps,
        )?,
    );
    record(
        "topology_module",
        gradient_check(
            |t, v| {
                let (a, b) = (node_vars(v[0], k, &beta), node_vars(v[1], k, &beta));
                let (x, y) = topology_module(t, store, &cfg.topology(), &adj, &a, &b)?;
                let z = similarity_logit(t, store, x.features, y.features)?;
                verification_loss_var(t, z, &[1.0])
            },
            &batch_inputs[..2],
            eps,
        )?,
    );
    record(
        "verification_loss",
        gradient_check(
            |t, v| verification_loss_var(t, v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            &[normal(&mut rng, &[6, 1], 2.0)],
            eps,
        )?,
    );

    // the joint objective with respect to the parameters
    let cfg = Config {
        c: 8,
        seed,
        ..Config::default()
    };
    let model = Model::new(cfg.clone(), 2)?;
    let mut store = model.store.clone();
    // nudge the heads off their zero initialisation so no gradient is trivially zero
    for name in store.trainable().map(str::to_string).collect::<Vec<_>>() {
        let t = store.get_mut(&name)?;
        for v in t.data_mut() {
            *v += 0.05 * (rng.random::<f64>() - 0.5);
        }
    }
    let batch: Vec<NodeFeatureSet> = (0..4)
        .map(|_| {
            let beta: Vec<f64> = (0..cfg.k).map(|_| rng.random_range(0.05..1.0)).collect();
            NodeFeatureSet::new(
                normal(&mut rng, &[cfg.k + 1, cfg.c], 1.0),
                ConfidenceVector::from_local(beta)?,
                Stage::Semantic,
            )
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<Pair> = (0..4)
        .flat_map(|a| {
            let partner = a ^ 1;
            let other = (a + 2) % 4;
            [Pair { a, b: partner, same: true }, Pair { a, b: other, same: false }]
        })
        .collect();
    let entries = entry_per_tensor(&store, &mut rng);
    record(
        "total_loss",
        gradient_check_params(Mode::Train, &store, &entries, eps, |t, s| {
            Ok(model.total_loss(t, s, &batch, &labels, &pairs)?.total)
        })?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_ops_and_loss() {
        let cases = gradient_suite(3, 1e-4).unwrap();
        assert!(cases.len() > 40);
        for c in &cases {
            assert!(c.max_rel_error < 1e-4, "{}: {}", c.name, c.max_rel_error);
        }
    }
}
