//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Mode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")))
    }
}

fn eval_scalar<F>(f: &F, mode: Mode, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(mode);
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Invalid("gradient check needs a scalar function".into()));
    }
    Ok(tape.item(out))
}

/// Maximum over every input entry of `|analytic − central difference| /
/// max(1, |central difference|)`. Runs in [`Mode::Train`].
pub fn gradient_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_in(Mode::Train, f, inputs, eps)
}

pub fn gradient_check_in<F>(mode: Mode, f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new(mode);
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let orig = input.data()[k];
            probe[which].data_mut()[k] = orig + eps;
            let up = eval_scalar(&f, mode, &probe)?;
            probe[which].data_mut()[k] = orig - eps;
            let down = eval_scalar(&f, mode, &probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[which][k], numeric));
        }
    }
    Ok(worst)
}

/// One scalar entry of a named parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub index: usize,
}

/// Draws `count` distinct trainable entries, uniformly over all trainable values.
pub fn sample_param_entries(store: &ParamStore, count: usize, seed: u64) -> Vec<ParamEntry> {
    let all: Vec<ParamEntry> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(name, t)| {
            (0..t.numel()).map(move |index| ParamEntry {
                name: name.to_string(),
                index,
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = count.min(all.len());
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

/// Finite-difference check of a parameterized scalar function on selected
/// parameter entries.
pub fn gradient_check_params<F>(mode: Mode, store: &ParamStore, entries: &[ParamEntry], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new(mode);
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(mode);
        let out = f(&mut tape, s)?;
        Ok(tape.item(out))
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for e in entries {
        let analytic = grads.param(&e.name).map_or(0.0, |g| g[e.index]);
        let orig = store.get(&e.name)?.data()[e.index];
        probe.get_mut(&e.name)?.data_mut()[e.index] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(&e.name)?.data_mut()[e.index] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(&e.name)?.data_mut()[e.index] = orig;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}
