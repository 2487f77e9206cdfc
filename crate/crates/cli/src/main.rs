mod commands;
mod config;
mod inputs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use commands::*;
use config::{resolve, usage, write_snapshot, Overrides, UsageError};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CHEMFLOW_GIT_DESCRIBE"), ")");

/// Latent-space flows over a toy molecular VAE: corpus generation, training,
/// traversal, benchmarks and analyses.
///
/// Settings come from built-in defaults, then `--config FILE` (TOML, keys as
/// in the `resolved_config.toml` every run writes), then flags.
#[derive(Parser)]
#[command(name = "chemflow", version = VERSION)]
struct Cli {
    /// TOML file with settings for the chosen subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a token corpus and its property statistics.
    GenCorpus(GenCorpusArgs),
    /// Train the sequence VAE.
    TrainVae(TrainVaeArgs),
    /// Continue VAE training with wave-equation residuals.
    FinetunePde(FinetuneArgs),
    /// Fit a property surrogate on decoder probabilities.
    TrainSurrogate(TrainSurrogateArgs),
    /// Train supervised or unsupervised energy flows.
    TrainFlows(TrainFlowsArgs),
    /// Traverse latents with one method and export JSONL trajectories.
    Traverse(TraverseArgs),
    /// Unconstrained, constrained or multi-objective optimization benchmark.
    Optimize(OptimizeArgs),
    /// Strict and relaxed success rates of property manipulation.
    Manipulate(ManipulateArgs),
    /// Particle simulation of a Wasserstein gradient flow.
    WgfSim(WgfSimArgs),
    /// Latent norm concentration and norm/property correlations.
    AnalyzeLatent(AnalyzeLatentArgs),
    /// Pick the field of an unsupervised flow that best tracks a property.
    PearsonSelect(PearsonSelectArgs),
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn int(v: Option<usize>) -> Option<i64> {
    v.map(|v| v as i64)
}

fn seed(v: Option<u64>) -> Option<i64> {
    v.map(|v| v as i64)
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenCorpusArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus.n", int(self.n))
            .set("corpus.seed", seed(self.seed))
            .set("corpus.max_len", int(self.max_len));
        o
    }
}

#[derive(Args)]
struct TrainVaeArgs {
    /// Directory written by `gen-corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainVaeArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("train.seed", seed(self.seed))
            .set("train.epochs", int(self.epochs))
            .set("train.batch_size", int(self.batch_size))
            .set("train.lr", self.lr)
            .set("model.latent_dim", int(self.latent_dim));
        o
    }
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// VAE checkpoint to continue from.
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of wave energy fields.
    #[arg(long)]
    fields: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

impl FinetuneArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .set("finetune.vae.seed", seed(self.seed))
            .set("finetune.vae.epochs", int(self.epochs))
            .set("fields", int(self.fields))
            .set("finetune.horizon", int(self.horizon));
        o
    }
}

#[derive(Args)]
struct TrainSurrogateArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// logp_lite, sa_lite, ring_penalty, plogp or qed_lite.
    #[arg(long)]
    property: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
}

impl TrainSurrogateArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .variant("property", self.property.as_ref())
            .set("train.seed", seed(self.seed))
            .set("train.epochs", int(self.epochs))
            .set("train.n_train", int(self.n_train))
            .set("train.n_val", int(self.n_val));
        o
    }
}

#[derive(Args)]
struct TrainFlowsArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Surrogate checkpoint (supervised mode).
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// hj or wave.
    #[arg(long)]
    pde: Option<String>,
    /// supervised or unsupervised.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    property: Option<String>,
    /// maximize or minimize.
    #[arg(long)]
    direction: Option<String>,
    /// Number of fields (unsupervised).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlowsArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .set("surrogate", path(&self.surrogate))
            .variant("pde", self.pde.as_ref())
            .variant("mode", self.mode.as_ref())
            .variant("property", self.property.as_ref())
            .variant("direction", self.direction.as_ref())
            .set("k", int(self.k))
            .set("horizon", int(self.horizon))
            .set("pool_size", int(self.pool_size))
            .set("train.iterations", int(self.iterations))
            .set("train.seed", seed(self.seed));
        o
    }
}

/// Flags shared by commands that build traversal methods.
#[derive(Args)]
struct KnobArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// Constant Langevin noise scale.
    #[arg(long)]
    beta: Option<f64>,
}

impl KnobArgs {
    fn apply(&self, o: &mut Overrides) {
        o.set("knobs.alpha", self.alpha).set("knobs.beta", self.beta);
    }
}

#[derive(Args)]
struct TraverseArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Flow checkpoint for `--method learned`.
    #[arg(long)]
    flows: Option<PathBuf>,
    /// random, random_1d, chemspace, gradient_flow, langevin or learned.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    property: Option<String>,
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Number of start latents.
    #[arg(long)]
    n: Option<usize>,
    /// prior or corpus.
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    knobs: KnobArgs,
}

impl TraverseArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .set("surrogate", path(&self.surrogate))
            .set("flows", path(&self.flows))
            .set("method", self.method.clone())
            .variant("property", self.property.as_ref())
            .variant("direction", self.direction.as_ref())
            .set("steps", int(self.steps))
            .set("n", int(self.n))
            .variant("start", self.start.as_ref())
            .set("seed", seed(self.seed));
        self.knobs.apply(&mut o);
        o
    }
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, p) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
    if name.is_empty() || p.is_empty() {
        return Err(format!("expected NAME=PATH, got `{s}`"));
    }
    Ok((name.to_string(), PathBuf::from(p)))
}

fn flow_table(flows: &[(String, PathBuf)]) -> Table {
    flows.iter().map(|(n, p)| (n.clone(), Value::String(p.to_string_lossy().into_owned()))).collect()
}

fn paths(v: &[PathBuf]) -> Vec<String> {
    v.iter().map(|p| p.to_string_lossy().into_owned()).collect()
}

fn variants(v: &[String]) -> Vec<String> {
    v.iter().map(|s| s.replace('-', "_")).collect()
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Surrogate checkpoint; repeat for several properties.
    #[arg(long = "surrogate")]
    surrogates: Vec<PathBuf>,
    /// Named flow checkpoint usable as a method; repeatable.
    #[arg(long = "flow", value_parser = parse_named)]
    flows: Vec<(String, PathBuf)>,
    /// Method name; repeatable. Replaces the configured list.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// unconstrained, constrained or multiobjective.
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    property: Option<String>,
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    constrained_steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    knobs: KnobArgs,
}

impl OptimizeArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .list("surrogates", &paths(&self.surrogates))
            .list("methods", &self.methods)
            .variant("benchmark", self.benchmark.as_ref())
            .variant("property", self.property.as_ref())
            .variant("direction", self.direction.as_ref())
            .set("n_samples", int(self.n_samples))
            .set("seeds", int(self.seeds))
            .set("steps", int(self.steps))
            .set("constrained_steps", int(self.constrained_steps))
            .set("seed", seed(self.seed));
        if !self.flows.is_empty() {
            o.table("flows", flow_table(&self.flows));
        }
        self.knobs.apply(&mut o);
        o
    }
}

#[derive(Args)]
struct ManipulateArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long = "surrogate")]
    surrogates: Vec<PathBuf>,
    #[arg(long = "flow", value_parser = parse_named)]
    flows: Vec<(String, PathBuf)>,
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Property to manipulate; repeatable.
    #[arg(long = "property")]
    properties: Vec<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    knobs: KnobArgs,
}

impl ManipulateArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .list("surrogates", &paths(&self.surrogates))
            .list("methods", &self.methods)
            .list("properties", &variants(&self.properties))
            .set("n", int(self.n))
            .set("steps", int(self.steps))
            .set("seed", seed(self.seed));
        if !self.flows.is_empty() {
            o.table("flows", flow_table(&self.flows));
        }
        self.knobs.apply(&mut o);
        o
    }
}

#[derive(Args)]
struct WgfSimArgs {
    /// heat, fokker_planck or porous_medium.
    #[arg(long)]
    flow: Option<String>,
    /// Fokker-Planck drift stiffness (default 1).
    #[arg(long)]
    stiffness: Option<f64>,
    /// Porous-medium exponent (default 2).
    #[arg(long)]
    m: Option<f64>,
    /// Use a Gaussian KDE of the particles with this bandwidth.
    #[arg(long)]
    kde_bandwidth: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    sigma0: Option<f64>,
    /// Cells of the 1-D grid oracle; 0 skips it.
    #[arg(long)]
    grid_cells: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl WgfSimArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        if let Some(f) = &self.flow {
            let kind = f.replace('-', "_");
            let mut t = Table::new();
            t.insert("kind".into(), Value::String(kind.clone()));
            match kind.as_str() {
                "fokker_planck" => {
                    t.insert("stiffness".into(), Value::Float(self.stiffness.unwrap_or(1.0)));
                }
                "porous_medium" => {
                    t.insert("m".into(), Value::Float(self.m.unwrap_or(2.0)));
                }
                _ => {}
            }
            o.table("flow", t);
        } else {
            o.set("flow.stiffness", self.stiffness).set("flow.m", self.m);
        }
        if let Some(bw) = self.kde_bandwidth {
            let mut t = Table::new();
            t.insert("model".into(), Value::String("kde".into()));
            t.insert("bandwidth".into(), Value::Float(bw));
            o.table("density", t);
        }
        o.set("out", path(&self.out))
            .set("dim", int(self.dim))
            .set("n", int(self.n))
            .set("h", self.h)
            .set("t_end", self.t_end)
            .set("sigma0", self.sigma0)
            .set("grid_cells", int(self.grid_cells))
            .set("seed", seed(self.seed));
        o
    }
}

#[derive(Args)]
struct AnalyzeLatentArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Corpus molecules to encode; 0 uses all.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "property")]
    properties: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl AnalyzeLatentArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .set("n", int(self.n))
            .list("properties", &variants(&self.properties))
            .set("analysis.seed", seed(self.seed));
        o
    }
}

#[derive(Args)]
struct PearsonSelectArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Unsupervised flow checkpoint.
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    property: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl PearsonSelectArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("out", path(&self.out))
            .set("corpus", path(&self.corpus))
            .set("vae", path(&self.vae))
            .set("flows", path(&self.flows))
            .variant("property", self.property.as_ref())
            .set("n", int(self.n))
            .set("steps", int(self.steps))
            .set("alpha", self.alpha)
            .set("seed", seed(self.seed));
        o
    }
}

fn execute<C>(name: &str, file: Option<&Path>, o: Overrides, run: fn(&C) -> Result<()>) -> Result<()>
where
    C: Serialize + DeserializeOwned + Default + RunConfig,
{
    let cfg: C = resolve(file, o)?;
    write_snapshot(cfg.out(), name, &cfg)?;
    run(&cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    let f = cli.config.as_deref();
    match &cli.cmd {
        Cmd::GenCorpus(a) => execute("gen-corpus", f, a.overrides(), gen_corpus_cmd),
        Cmd::TrainVae(a) => execute("train-vae", f, a.overrides(), train_vae_cmd),
        Cmd::FinetunePde(a) => execute("finetune-pde", f, a.overrides(), finetune_cmd),
        Cmd::TrainSurrogate(a) => execute("train-surrogate", f, a.overrides(), train_surrogate_cmd),
        Cmd::TrainFlows(a) => execute("train-flows", f, a.overrides(), train_flows_cmd),
        Cmd::Traverse(a) => execute("traverse", f, a.overrides(), traverse_cmd),
        Cmd::Optimize(a) => execute("optimize", f, a.overrides(), optimize_cmd),
        Cmd::Manipulate(a) => execute("manipulate", f, a.overrides(), manipulate_cmd),
        Cmd::WgfSim(a) => execute("wgf-sim", f, a.overrides(), wgf_sim_cmd),
        Cmd::AnalyzeLatent(a) => execute("analyze-latent", f, a.overrides(), analyze_latent_cmd),
        Cmd::PearsonSelect(a) => execute("pearson-select", f, a.overrides(), pearson_select_cmd),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
