//! Flat `key=value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::relation::RelationConfig;
use crate::topology::TopologyConfig;

/// Every tunable of a training / retrieval run.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub lambda_r: f64,
    pub lambda_t: f64,
    pub gamma: f64,
    pub top_n: usize,
    pub alpha: f64,
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub adgc_depth: usize,
    pub cgea_depth: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub seed: u64,
    pub power_iters_train: usize,
    pub sinkhorn_iters_train: usize,
    pub power_iters_eval: usize,
    pub sinkhorn_iters_eval: usize,
    /// Softmax-normalize heatmaps before pooling and reading confidences.
    pub normalize_heatmaps: bool,
    /// Gate ADGC messages by node scores; otherwise use the fixed skeleton.
    pub adaptive_adjacency: bool,
    /// Route CGEA features through the learned matching; otherwise uniformly.
    pub matching: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lambda_r: 1.0,
            lambda_t: 0.3,
            gamma: 0.5,
            top_n: 8,
            alpha: 0.3,
            k: 14,
            c: 32,
            h: 16,
            w: 8,
            adgc_depth: 2,
            cgea_depth: 2,
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_p: 4,
            batch_k: 4,
            seed: 0,
            power_iters_train: 20,
            sinkhorn_iters_train: 10,
            power_iters_eval: 200,
            sinkhorn_iters_eval: 100,
            normalize_heatmaps: true,
            adaptive_adjacency: true,
            matching: true,
        }
    }
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl Config {
            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(key, value)?,)*
                    _ => return Err(Error::Invalid(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }
        }

        impl fmt::Display for Config {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(writeln!(f, "{}={}", stringify!($field), self.$field)?;)*
                Ok(())
            }
        }
    };
}

config_keys!(
    lambda_r,
    lambda_t,
    gamma,
    top_n,
    alpha,
    k,
    c,
    h,
    w,
    adgc_depth,
    cgea_depth,
    lr,
    momentum,
    epochs,
    batch_p,
    batch_k,
    seed,
    power_iters_train,
    sinkhorn_iters_train,
    power_iters_eval,
    sinkhorn_iters_eval,
    normalize_heatmaps,
    adaptive_adjacency,
    matching,
);

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value `{value}` for `{key}`")))
}

impl Config {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if self.top_n == 0 {
            return fail("top_n must be at least 1");
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return fail("batch_p and batch_k must be at least 2");
        }
        if self.k == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return fail("dimensions must be positive");
        }
        if self.adgc_depth == 0 || self.cgea_depth == 0 {
            return fail("layer depths must be at least 1");
        }
        if self.power_iters_train == 0 || self.power_iters_eval == 0 {
            return fail("power iteration counts must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return fail("lr must be finite and non-negative, momentum in [0, 1)");
        }
        if self.alpha < 0.0 || self.lambda_r < 0.0 || self.lambda_t < 0.0 {
            return fail("alpha and loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn relation(&self) -> RelationConfig {
        RelationConfig {
            depth: self.adgc_depth,
            adaptive: self.adaptive_adjacency,
        }
    }

    pub fn topology(&self) -> TopologyConfig {
        TopologyConfig {
            depth: self.cgea_depth,
            power_iters_train: self.power_iters_train,
            sinkhorn_iters_train: self.sinkhorn_iters_train,
            power_iters_eval: self.power_iters_eval,
            sinkhorn_iters_eval: self.sinkhorn_iters_eval,
            matching: self.matching,
        }
    }

    /// Learning rate for a 1-based epoch: ×0.1 after each of the milestones
    /// at 1/4 and 2/3 of the run.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let milestones = [self.epochs / 4, 2 * self.epochs / 3];
        let passed = milestones.iter().filter(|&&m| m > 0 && epoch > m).count();
        self.lr * 0.1f64.powi(passed as i32)
    }
}
