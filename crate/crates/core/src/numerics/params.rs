use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Suffixes of non-trainable buffers (running statistics of `standardize`).
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer_name(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over a `fan_in × fan_out` matrix.
    Xavier,
    /// Square identity plus uniform noise of the given amplitude.
    Identity(f64),
    Uniform(f64),
}

/// Named parameter tensors, ordered by name.
///
/// Each entry draws its initial values from a generator seeded by the store
/// seed and the entry name, so values do not depend on registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        tensor.set_requires_grad(!is_buffer_name(name));
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let mut rng = self.rng_for(name);
        let count: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; count],
            Init::Constant(v) => vec![v; count],
            Init::Uniform(a) => (0..count).map(|_| rng.random_range(-a..=a)).collect(),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    _ => (count, 1),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..count)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect()
            }
            Init::Identity(noise) => {
                let [n, m] = shape else {
                    return Err(Error::Invalid(format!("identity init needs a matrix, got {shape:?}")));
                };
                if n != m {
                    return Err(Error::Invalid(format!("identity init needs a square matrix, got {shape:?}")));
                }
                let mut d: Vec<f64> = (0..count)
                    .map(|_| if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 })
                    .collect();
                for i in 0..*n {
                    d[i * n + i] += 1.0;
                }
                d
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Registers the weight (`in×out`) and bias (`1×out`) of a fully connected map.
    pub fn init_linear(&mut self, prefix: &str, input: usize, output: usize, weight: Init) -> Result<()> {
        self.init(&format!("{prefix}.weight"), &[input, output], weight)?;
        self.init(&format!("{prefix}.bias"), &[1, output], Init::Zeros)
    }

    /// Registers the affine parameters and running statistics of `standardize`.
    pub fn init_standardize(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.init(&format!("{prefix}.gamma"), &[1, width], Init::Constant(1.0))?;
        self.init(&format!("{prefix}.beta"), &[1, width], Init::Zeros)?;
        self.init(&format!("{prefix}.running_mean"), &[1, width], Init::Zeros)?;
        self.init(&format!("{prefix}.running_var"), &[1, width], Init::Constant(1.0))
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name, mixed with the store seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.rotate_left(17))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.numel() != data.len() {
            return Err(Error::Invalid(format!(
                "`{name}` holds {} values, {} given",
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of trainable entries, in order.
    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.as_str())
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64, reverse: bool) -> ParamStore {
        let mut s = ParamStore::new(seed);
        let mut names = vec!["a.weight", "b.weight", "c.weight"];
        if reverse {
            names.reverse();
        }
        for n in names {
            s.init(n, &[3, 4], Init::Xavier).unwrap();
        }
        s
    }

    #[test]
    fn same_seed_is_bit_identical_regardless_of_order() {
        assert_eq!(build(5, false), build(5, true));
        assert_ne!(build(5, false), build(6, false));
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new(0);
        s.init("x", &[2], Init::Zeros).unwrap();
        assert!(matches!(s.init("x", &[2], Init::Zeros), Err(Error::DuplicateParam(_))));
    }

    #[test]
    fn running_stats_are_buffers() {
        let mut s = ParamStore::new(0);
        s.init_standardize("bn", 3).unwrap();
        let trainable: Vec<_> = s.trainable().collect();
        assert_eq!(trainable, vec!["bn.beta", "bn.gamma"]);
    }

    #[test]
    fn identity_init() {
        let mut s = ParamStore::new(0);
        s.init("w", &[2, 2], Init::Identity(0.0)).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(s.init("v", &[2, 3], Init::Identity(0.0)).is_err());
    }
}
