use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reltopo_core::numerics::{load_checkpoint, save_checkpoint};
use reltopo_core::pipeline::{
    generate_synthetic, gradient_suite, trace_csv, train, Benchmark, Config, Dataset, Model, SyntheticSpec, Variant,
};
use reltopo_core::relation::SkeletonAdjacency;
use reltopo_core::topology::{build_affinity_between, graph_matching_between, MatchParams};
use reltopo_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "reltopo", version, about = "Occlusion-robust re-identification on synthetic keypoint data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container
    GenData {
        #[arg(long, default_value_t = 20)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 0.5)]
        occlusion_rate: f64,
        #[arg(long, default_value_t = 0.3)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 10.0)]
        heat_sharpness: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training identities of a dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; defaults to the checkpoint path with a .csv extension
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query/gallery identities of a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Stage::Full)]
        variant: Stage,
    },
    /// Check every gradient against central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Print the error of every checked function
        #[arg(long)]
        verbose: bool,
    },
    /// Match a toy graph pair and compare with the brute-force optimum
    GmDemo {
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        k: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Global,
    Semantic,
    Relation,
    Full,
}

impl From<Stage> for Variant {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Global => Variant::GlobalOnly,
            Stage::Semantic => Variant::Semantic,
            Stage::Relation => Variant::SemanticRelation,
            Stage::Full => Variant::Full,
        }
    }
}

/// Marks a failed numerical check.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    // a config that does not parse is a malformed input file
    Config::load(path)
        .map_err(|e| match e {
            Error::Invalid(m) => Error::Format(m),
            e => e,
        })
        .with_context(|| format!("reading config {}", path.display()))
}

fn load_data(path: &Path, cfg: &Config) -> Result<Dataset> {
    let ds = Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if (ds.k, ds.c) != (cfg.k, cfg.c) {
        bail!(
            "dataset has K={}, C={} but the config expects K={}, C={}",
            ds.k,
            ds.c,
            cfg.k,
            cfg.c
        );
    }
    Ok(ds)
}

fn gen_data(spec: SyntheticSpec, out: &Path) -> Result<()> {
    let ds = generate_synthetic(&spec)?;
    ds.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} samples of {} identities to {}", ds.len(), spec.num_ids, out.display());
    Ok(())
}

fn run_train(data: &Path, config: Option<&Path>, out: &Path, trace: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_data(data, &cfg)?;
    let split = ds.split()?;
    let outcome = train(&ds, &split.train, &cfg)?;
    save_checkpoint(&outcome.model.store, out).with_context(|| format!("writing {}", out.display()))?;
    let trace_path = trace.map_or_else(|| out.with_extension("csv"), Path::to_path_buf);
    fs::write(&trace_path, trace_csv(&outcome.trace)).with_context(|| format!("writing {}", trace_path.display()))?;
    match outcome.trace.last() {
        Some(l) => println!("trained {} epochs, final loss {l:.6}", outcome.trace.len()),
        None => println!("no epochs run; wrote initial parameters"),
    }
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, config: Option<&Path>, variant: Variant) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_data(data, &cfg)?;
    let store = load_checkpoint(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let model = Model::from_store(cfg, store)?;
    let split = ds.split()?;
    let metrics = Benchmark::new(&model, &ds, &split)?.evaluate(&model, variant)?;
    print!("{metrics}");
    Ok(())
}

fn run_gradcheck(seeds: u64, eps: f64, tolerance: f64, verbose: bool) -> Result<()> {
    let mut worst = (0.0f64, String::new());
    for seed in 0..seeds {
        for case in gradient_suite(seed, eps)? {
            if verbose {
                println!("seed {seed}\t{}\t{:.3e}", case.name, case.max_rel_error);
            }
            if case.max_rel_error.is_nan() || case.max_rel_error > worst.0 {
                worst = (case.max_rel_error, case.name);
            }
        }
    }
    println!("max relative error {:.3e} ({})", worst.0, worst.1);
    if worst.0.is_nan() || worst.0 >= tolerance {
        return Err(NumericalFailure(format!("gradient error {:.3e} exceeds {tolerance:.1e}", worst.0)).into());
    }
    Ok(())
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn gm_demo(k: usize, seed: u64) -> Result<()> {
    let c = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<_> = (1..k).map(|i| (i - 1, i)).collect();
    let adj = SkeletonAdjacency::from_edges(k, &edges)?;
    let v1 = Tensor::new(vec![k, c], (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut v2 = v1.clone();
    for (i, &p) in perm.iter().enumerate() {
        v2.data_mut()[p * c..(p + 1) * c].copy_from_slice(v1.row(i));
    }
    let adj2 = adj.permuted(&perm)?;
    let params = MatchParams::default();
    let u = graph_matching_between(&v1, &adj, &v2, &adj2, params, 200, 100)?;
    let m = build_affinity_between(&v1, &adj, &v2, &adj2, params)?;
    let score = |p: &[usize]| -> f64 {
        (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, p[i], j, p[j]))
            .sum()
    };
    let oracle = permutations(k)
        .into_iter()
        .max_by(|a, b| score(a).total_cmp(&score(b)))
        .expect("at least one permutation");

    println!("planted permutation {perm:?}");
    println!("U =");
    for i in 0..k {
        let row: Vec<String> = (0..k).map(|a| format!("{:.4}", u.get(i, a))).collect();
        println!("  {}", row.join(" "));
    }
    let found = u.row_argmax();
    println!("row argmax  {found:?}");
    println!("brute force {oracle:?} (score {:.4})", score(&oracle));
    if found != oracle {
        return Err(NumericalFailure("matching disagrees with the brute-force optimum".into()).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            ids,
            per_id,
            occlusion_rate,
            noise_sigma,
            heat_sharpness,
            seed,
            out,
        } => gen_data(
            SyntheticSpec {
                num_ids: ids,
                samples_per_id: per_id,
                occlusion_rate,
                noise_sigma,
                heat_sharpness,
                seed,
                ..SyntheticSpec::default()
            },
            &out,
        ),
        Command::Train {
            data,
            config,
            out,
            trace,
        } => run_train(&data, config.as_deref(), &out, trace.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            config,
            variant,
        } => run_eval(&checkpoint, &data, config.as_deref(), variant.into()),
        Command::Gradcheck {
            seeds,
            eps,
            tolerance,
            verbose,
        } => run_gradcheck(seeds, eps, tolerance, verbose),
        Command::GmDemo { k, seed } => gm_demo(k as usize, seed),
    }
}

/// 2 for I/O and container problems, 3 for numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericalFailure>() {
            return 3;
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) | Error::Format(_) => 2,
                e if e.is_numerical() => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
