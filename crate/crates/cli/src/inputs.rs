use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chemflow::evalbench::pearson_select;
use chemflow::flows::{Direction, FlowModel};
use chemflow::genvae::VaeModel;
use chemflow::surrogate::Surrogate;
use chemflow::traversal::{fit_chemspace_boundary, median_labels, oracle_values, BetaSchedule, Source, SurrogatePotential, SvmConfig};
use diffnet::Checkpoint;
use molkit::{read_corpus, Corpus, PropertyKind, TokenSequence};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::usage;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STATS_FILE: &str = "stats.json";

fn require(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        bail!("no {what} path configured");
    }
    Ok(())
}

/// Reads `corpus.jsonl` and `stats.json` from a `gen-corpus` output directory.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    require(dir, "corpus")?;
    read_corpus(&dir.join(CORPUS_FILE), &dir.join(STATS_FILE)).with_context(|| format!("reading corpus from {}", dir.display()))
}

pub fn load_vae(path: &Path) -> Result<VaeModel> {
    require(path, "vae checkpoint")?;
    VaeModel::load(path).with_context(|| format!("loading VAE {}", path.display()))
}

pub fn load_surrogate(path: &Path) -> Result<Surrogate> {
    require(path, "surrogate checkpoint")?;
    let c = Checkpoint::load(path).with_context(|| format!("loading surrogate {}", path.display()))?;
    Ok(Surrogate::from_checkpoint(&c)?)
}

pub fn load_flows(path: &Path) -> Result<FlowModel> {
    require(path, "flow checkpoint")?;
    FlowModel::load(path).with_context(|| format!("loading flows {}", path.display()))
}

/// Surrogates keyed by the property they predict.
pub fn load_surrogates(paths: &[PathBuf]) -> Result<BTreeMap<PropertyKind, Surrogate>> {
    let mut out = BTreeMap::new();
    for p in paths {
        let s = load_surrogate(p)?;
        if out.insert(s.kind, s).is_some() {
            bail!("two surrogates predict the same property ({})", p.display());
        }
    }
    Ok(out)
}

pub fn prior_latents(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

/// `n` corpus indices drawn without replacement (all when `n` is 0 or too large).
pub fn corpus_subset(corpus: &Corpus, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    if n == 0 || n >= idx.len() {
        return idx;
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx
}

/// Posterior means of the chosen corpus molecules.
pub fn encode_subset(vae: &VaeModel, corpus: &Corpus, idx: &[usize]) -> Result<Array2<f64>> {
    let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &corpus.records[i].tokens).collect();
    Ok(vae.encode_seqs(&seqs)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    Prior,
    Corpus,
}

/// Starting latents: prior samples or encoded corpus molecules.
pub fn start_latents(kind: StartKind, n: usize, vae: &VaeModel, corpus: &Corpus, seed: u64) -> Result<Array2<f64>> {
    match kind {
        StartKind::Prior => Ok(prior_latents(n, vae.latent_dim(), seed)),
        StartKind::Corpus => encode_subset(vae, corpus, &corpus_subset(corpus, n, seed)),
    }
}

/// Everything a named traversal method may need.
pub struct MethodContext<'a> {
    pub vae: &'a VaeModel,
    pub corpus: &'a Corpus,
    pub potentials: &'a BTreeMap<PropertyKind, SurrogatePotential<'a>>,
    pub flows: &'a BTreeMap<String, FlowModel>,
    pub beta: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Molecules used to fit the ChemSpace boundary.
    pub boundary_size: usize,
    /// Latents and horizon used to pick a field of an unsupervised flow.
    pub selection: ArrayView2<'a, f64>,
    pub selection_steps: usize,
}

/// Field of `model` used for `kind`: the only one, or the Pearson-selected one.
pub fn pick_field(ctx: &MethodContext<'_>, model: &FlowModel, kind: PropertyKind, direction: Direction) -> Result<usize> {
    if model.fields.len() == 1 {
        return Ok(0);
    }
    let sources: Vec<Source<'_>> = model.fields.iter().map(|f| Source::Learned { field: f }).collect();
    let score = |z: ArrayView2<f64>| oracle_values(ctx.vae, &ctx.corpus.stats, kind, z);
    let sel = pearson_select(&sources, ctx.alpha, ctx.selection, ctx.selection_steps, &score, direction, ctx.seed)?;
    Ok(sel.index)
}

/// Builds the displacement source of a named method for one property.
/// Built-in names: `random`, `random_1d`, `chemspace`, `gradient_flow`
/// (`gf`), `langevin` (`ld`); any other name must be a configured flow.
pub fn method_source<'a>(ctx: &MethodContext<'a>, name: &str, kind: PropertyKind, direction: Direction) -> Result<Source<'a>> {
    let d = ctx.vae.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x5eed);
    let potential = || -> Result<&'a SurrogatePotential<'a>> {
        ctx.potentials.get(&kind).with_context(|| format!("method `{name}` needs a surrogate for {kind}"))
    };
    let builtin = name.replace('-', "_");
    Ok(match builtin.as_str() {
        "random" => Source::random(d, &mut rng)?,
        "random_1d" => Source::random_1d(d, &mut rng)?,
        "chemspace" => {
            let idx = corpus_subset(ctx.corpus, ctx.boundary_size, ctx.seed);
            let z = encode_subset(ctx.vae, ctx.corpus, &idx)?;
            let values: Vec<f64> = idx.iter().map(|&i| ctx.corpus.records[i].props.get(kind)).collect();
            let normal = fit_chemspace_boundary(z.view(), &median_labels(&values), &SvmConfig::default())?;
            Source::linear(normal * -direction.sign())?
        }
        "gradient_flow" | "gf" => Source::GradientFlow {
            potential: potential()?,
            direction,
        },
        "langevin" | "ld" => Source::Langevin {
            potential: potential()?,
            direction,
            beta: BetaSchedule::Constant { beta: ctx.beta },
        },
        _ => {
            let other = name;
            let model = ctx
                .flows
                .get(other)
                .ok_or_else(|| usage(format!("unknown method `{other}`: not built in and no flow of that name")))?;
            if model.fields.first().is_some_and(|f| f.dim != d) {
                bail!("flow `{other}` has latent dimension {} but the VAE has {d}", model.fields[0].dim);
            }
            let k = pick_field(ctx, model, kind, direction)?;
            Source::Learned { field: &model.fields[k] }
        }
    })
}

pub fn potentials<'a>(vae: &'a VaeModel, surrogates: &'a BTreeMap<PropertyKind, Surrogate>) -> BTreeMap<PropertyKind, SurrogatePotential<'a>> {
    surrogates.iter().map(|(k, s)| (*k, SurrogatePotential { vae, surrogate: s })).collect()
}

pub fn load_flow_map(paths: &BTreeMap<String, PathBuf>) -> Result<BTreeMap<String, FlowModel>> {
    paths.iter().map(|(name, p)| Ok((name.clone(), load_flows(p)?))).collect()
}
