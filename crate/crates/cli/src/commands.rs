use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chemflow::evalbench::{
    constrained_benchmark, latent_analysis, lowest_property_seeds, manipulation_benchmark, multiobjective_benchmark, norm_concentration,
    pearson_select, rank_methods, selection_direction, unconstrained_benchmark, write_constrained_csv, write_histograms_csv,
    write_latent_analysis, write_manipulation_csv, write_multiobjective_csv, write_unconstrained_csv, LatentAnalysisConfig,
    ManipulationEntry, SuccessCriteria,
};
use chemflow::flows::{train_flows, write_flow_log, Direction, FlowModel, FlowSpec, GuidanceMode, GuidanceModels, PdeKind, TrainFlowsConfig};
use chemflow::genvae::{
    finetune_pde, one_hot_batch, split_indices, token_accuracy, train_vae, write_curve_csv, write_finetune_csv, FinetuneConfig,
    TrainVaeConfig, VaeConfig, VaeModel,
};
use chemflow::surrogate::{train_surrogate, SurrogateManifest, TrainSurrogateConfig};
use chemflow::traversal::{oracle_values, traverse, write_trajectories, Source};
use diffnet::EnergyNet;
use molkit::{decode, gen_corpus, write_corpus, CorpusConfig, PropertyKind, TokenSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wgflab::{run_scenario, write_grid_csv, write_moments_csv, DensityChoice, FlowKind, Grid, Scenario};

use crate::inputs::{
    corpus_subset, encode_subset, load_corpus, load_flow_map, load_flows, load_surrogate, load_surrogates, load_vae, method_source,
    potentials, prior_latents, start_latents, MethodContext, StartKind, CORPUS_FILE, STATS_FILE,
};

/// Every resolved config names its artifact directory.
pub trait RunConfig {
    fn out(&self) -> &Path;
}

macro_rules! run_config {
    ($($t:ty),*) => {
        $(impl RunConfig for $t {
            fn out(&self) -> &Path {
                &self.out
            }
        })*
    };
}

run_config!(
    GenCorpusCfg,
    TrainVaeCfg,
    FinetuneCfg,
    TrainSurrogateCfg,
    TrainFlowsCfg,
    TraverseCfg,
    OptimizeCfg,
    ManipulateCfg,
    WgfSimCfg,
    AnalyzeLatentCfg,
    PearsonSelectCfg
);

fn out_dir(name: &str) -> PathBuf {
    PathBuf::from("runs").join(name)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenCorpusCfg {
    pub out: PathBuf,
    pub corpus: CorpusConfig,
}

impl Default for GenCorpusCfg {
    fn default() -> Self {
        Self {
            out: out_dir("gen-corpus"),
            corpus: CorpusConfig::new(10_000, 0),
        }
    }
}

pub fn gen_corpus_cmd(cfg: &GenCorpusCfg) -> Result<()> {
    let corpus = gen_corpus(&cfg.corpus)?;
    write_corpus(&corpus, &cfg.out.join(CORPUS_FILE), &cfg.out.join(STATS_FILE))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainVaeCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub model: VaeConfig,
    pub train: TrainVaeConfig,
    /// Prior samples decoded for the validity check.
    pub prior_samples: usize,
}

impl Default for TrainVaeCfg {
    fn default() -> Self {
        Self {
            out: out_dir("train-vae"),
            corpus: out_dir("gen-corpus"),
            model: VaeConfig::default(),
            train: TrainVaeConfig::default(),
            prior_samples: 1000,
        }
    }
}

#[derive(Serialize)]
struct VaeReport {
    val_token_accuracy: f64,
    prior_valid_fraction: f64,
    best_val_loss: f64,
    n_params: usize,
}

pub fn train_vae_cmd(cfg: &TrainVaeCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let seqs: Vec<&TokenSequence> = corpus.sequences().collect();
    let (vae, curve) = train_vae(VaeModel::new(cfg.model.clone(), cfg.train.seed), &seqs, &cfg.train)?;
    vae.save(&cfg.out.join("vae.ckpt"), cfg.train.seed)?;
    write_curve_csv(&cfg.out.join("curve.csv"), &curve)?;
    let (_, va) = split_indices(seqs.len(), cfg.train.val_fraction, cfg.train.seed);
    let val: Vec<&TokenSequence> = va.iter().map(|&i| seqs[i]).collect();
    let acc = token_accuracy(&vae, one_hot_batch(&val, vae.cfg.seq_len)?.view())?;
    let prior = prior_latents(cfg.prior_samples, vae.latent_dim(), cfg.train.seed.wrapping_add(17));
    let decoded = vae.decode_molecules(prior.view())?;
    let valid = decoded.iter().filter(|s| decode(s).is_valid()).count();
    write_json(
        &cfg.out.join("report.json"),
        &VaeReport {
            val_token_accuracy: acc,
            prior_valid_fraction: valid as f64 / decoded.len().max(1) as f64,
            best_val_loss: curve.iter().map(|c| c.val_total).fold(f64::INFINITY, f64::min),
            n_params: vae.n_params(),
        },
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    /// Number of wave energy fields trained alongside the VAE.
    pub fields: usize,
    pub e_dim: usize,
    pub hidden: Vec<usize>,
    pub finetune: FinetuneConfig,
}

impl Default for FinetuneCfg {
    fn default() -> Self {
        Self {
            out: out_dir("finetune-pde"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            fields: 1,
            e_dim: 16,
            hidden: vec![128, 128],
            finetune: FinetuneConfig::default(),
        }
    }
}

pub fn finetune_cmd(cfg: &FinetuneCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let seqs: Vec<&TokenSequence> = corpus.sequences().collect();
    let seed = cfg.finetune.vae.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = vae.latent_dim();
    let fields: Vec<EnergyNet> = (0..cfg.fields).map(|_| EnergyNet::new(d, cfg.e_dim, &cfg.hidden, &mut rng)).collect();
    let (vae, fields, rows) = finetune_pde(vae, fields, &seqs, &cfg.finetune)?;
    vae.save(&cfg.out.join("vae.ckpt"), seed)?;
    let mut spec = FlowSpec::unsupervised(PdeKind::Wave, cfg.fields.max(1));
    spec.horizon = cfg.finetune.horizon;
    spec.c = cfg.finetune.c;
    let model = FlowModel {
        spec,
        fields,
        classifier: None,
    };
    model.save(&cfg.out.join("fields.ckpt"), seed)?;
    model.manifest("fields.ckpt").save(&cfg.out.join("fields.json"))?;
    write_finetune_csv(&cfg.out.join("curve.csv"), &rows)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSurrogateCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    pub property: PropertyKind,
    pub train: TrainSurrogateConfig,
}

impl Default for TrainSurrogateCfg {
    fn default() -> Self {
        Self {
            out: out_dir("train-surrogate"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            property: PropertyKind::RingPenalty,
            train: TrainSurrogateConfig::default(),
        }
    }
}

pub fn train_surrogate_cmd(cfg: &TrainSurrogateCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let (model, report) = train_surrogate(&vae, cfg.property, &corpus.stats, &cfg.train)?;
    model.to_checkpoint(cfg.train.seed).save(&cfg.out.join("surrogate.ckpt"))?;
    SurrogateManifest {
        property: cfg.property,
        mean: model.norm.mean,
        std: model.norm.std,
        checkpoint: "surrogate.ckpt".into(),
        val_mse: report.val_mse,
        val_r2: report.val_r2,
    }
    .save(&cfg.out.join("surrogate.json"))?;
    write_csv(&cfg.out.join("curve.csv"), &report.curve)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainFlowsCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    /// Required in supervised mode; empty otherwise.
    pub surrogate: PathBuf,
    pub pde: PdeKind,
    pub mode: GuidanceMode,
    pub property: PropertyKind,
    pub direction: Direction,
    /// Number of fields in unsupervised mode.
    pub k: usize,
    pub horizon: usize,
    pub c: f64,
    /// Encoded corpus molecules used as start latents; 0 uses all.
    pub pool_size: usize,
    pub train: TrainFlowsConfig,
}

impl Default for TrainFlowsCfg {
    fn default() -> Self {
        Self {
            out: out_dir("train-flows"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            surrogate: PathBuf::new(),
            pde: PdeKind::Hj,
            mode: GuidanceMode::Supervised,
            property: PropertyKind::Plogp,
            direction: Direction::Maximize,
            k: 3,
            horizon: 10,
            c: 1.0,
            pool_size: 0,
            train: TrainFlowsConfig::default(),
        }
    }
}

pub fn train_flows_cmd(cfg: &TrainFlowsCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let mut spec = match cfg.mode {
        GuidanceMode::Supervised => FlowSpec::supervised(cfg.pde, cfg.property, cfg.direction),
        GuidanceMode::Unsupervised => FlowSpec::unsupervised(cfg.pde, cfg.k),
    };
    spec.horizon = cfg.horizon;
    spec.c = cfg.c;
    let surrogate = match cfg.mode {
        GuidanceMode::Supervised => {
            let s = load_surrogate(&cfg.surrogate)?;
            if s.kind != cfg.property {
                bail!("surrogate predicts {} but the flow targets {}", s.kind, cfg.property);
            }
            Some(s)
        }
        GuidanceMode::Unsupervised => None,
    };
    let pool = encode_subset(&vae, &corpus, &corpus_subset(&corpus, cfg.pool_size, cfg.train.seed))?;
    let models = GuidanceModels {
        vae: &vae,
        surrogate: surrogate.as_ref(),
    };
    let (model, log) = train_flows(spec, &cfg.train, models, pool.view())?;
    model.save(&cfg.out.join("flows.ckpt"), cfg.train.seed)?;
    model.manifest("flows.ckpt").save(&cfg.out.join("flows.json"))?;
    write_flow_log(&cfg.out.join("log.csv"), model.spec.mode, &log)?;
    Ok(())
}

/// Shared knobs of commands that build traversal methods.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodKnobs {
    pub alpha: f64,
    /// Constant Langevin noise scale.
    pub beta: f64,
    /// Corpus molecules labelled for the ChemSpace boundary.
    pub boundary_size: usize,
    /// Start latents used to pick a field of an unsupervised flow.
    pub selection_size: usize,
    pub selection_steps: usize,
}

impl Default for MethodKnobs {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            boundary_size: 2000,
            selection_size: 100,
            selection_steps: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraverseCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    pub surrogate: PathBuf,
    /// Flow checkpoint used by the `learned` method.
    pub flows: PathBuf,
    pub method: String,
    pub property: PropertyKind,
    pub direction: Direction,
    pub steps: usize,
    pub n: usize,
    pub start: StartKind,
    pub seed: u64,
    pub knobs: MethodKnobs,
}

impl Default for TraverseCfg {
    fn default() -> Self {
        Self {
            out: out_dir("traverse"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            surrogate: PathBuf::new(),
            flows: PathBuf::new(),
            method: "langevin".into(),
            property: PropertyKind::Plogp,
            direction: Direction::Maximize,
            steps: 10,
            n: 100,
            start: StartKind::Prior,
            seed: 0,
            knobs: MethodKnobs::default(),
        }
    }
}

pub fn traverse_cmd(cfg: &TraverseCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let surrogates = if cfg.surrogate.as_os_str().is_empty() { BTreeMap::new() } else { load_surrogates(std::slice::from_ref(&cfg.surrogate))? };
    let mut flows = BTreeMap::new();
    if !cfg.flows.as_os_str().is_empty() {
        flows.insert("learned".to_string(), load_flows(&cfg.flows)?);
    }
    let pots = potentials(&vae, &surrogates);
    let z0 = start_latents(cfg.start, cfg.n, &vae, &corpus, cfg.seed)?;
    let selection = start_latents(cfg.start, cfg.knobs.selection_size, &vae, &corpus, cfg.seed.wrapping_add(1))?;
    let ctx = context(&vae, &corpus, &pots, &flows, &cfg.knobs, cfg.seed, &selection);
    let source = method_source(&ctx, &cfg.method, cfg.property, cfg.direction)?;
    let trajs = traverse(&source, cfg.knobs.alpha, &vae, &corpus.stats, z0.view(), cfg.steps, cfg.seed)?;
    write_trajectories(&cfg.out.join("trajectories"), &trajs)?;
    Ok(())
}

fn context<'a>(
    vae: &'a VaeModel,
    corpus: &'a molkit::Corpus,
    pots: &'a BTreeMap<PropertyKind, chemflow::traversal::SurrogatePotential<'a>>,
    flows: &'a BTreeMap<String, FlowModel>,
    knobs: &MethodKnobs,
    seed: u64,
    selection: &'a ndarray::Array2<f64>,
) -> MethodContext<'a> {
    MethodContext {
        vae,
        corpus,
        potentials: pots,
        flows,
        beta: knobs.beta,
        alpha: knobs.alpha,
        seed,
        boundary_size: knobs.boundary_size,
        selection: selection.view(),
        selection_steps: knobs.selection_steps,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Unconstrained,
    Constrained,
    Multiobjective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub property: PropertyKind,
    pub direction: Direction,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizeCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    pub surrogates: Vec<PathBuf>,
    /// Named flow checkpoints usable as methods.
    pub flows: BTreeMap<String, PathBuf>,
    pub methods: Vec<String>,
    pub benchmark: Benchmark,
    pub property: PropertyKind,
    pub direction: Direction,
    /// Prior samples of the unconstrained benchmark.
    pub n_samples: usize,
    pub steps: usize,
    /// Lowest-property corpus molecules of the constrained and multi-objective benchmarks.
    pub seeds: usize,
    pub constrained_steps: usize,
    pub deltas: Vec<f64>,
    pub objectives: Vec<Objective>,
    pub histogram_every: usize,
    pub histogram_bins: usize,
    pub seed: u64,
    pub knobs: MethodKnobs,
}

impl Default for OptimizeCfg {
    fn default() -> Self {
        Self {
            out: out_dir("optimize"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            surrogates: Vec::new(),
            flows: BTreeMap::new(),
            methods: vec!["random".into(), "gradient_flow".into(), "langevin".into()],
            benchmark: Benchmark::Unconstrained,
            property: PropertyKind::Plogp,
            direction: Direction::Maximize,
            n_samples: 10_000,
            steps: 10,
            seeds: 200,
            constrained_steps: 1000,
            deltas: vec![0.0, 0.2, 0.4, 0.6],
            objectives: vec![
                Objective {
                    property: PropertyKind::QedLite,
                    direction: Direction::Maximize,
                },
                Objective {
                    property: PropertyKind::SaLite,
                    direction: Direction::Minimize,
                },
            ],
            histogram_every: 100,
            histogram_bins: 20,
            seed: 0,
            knobs: MethodKnobs::default(),
        }
    }
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

pub fn optimize_cmd(cfg: &OptimizeCfg) -> Result<()> {
    if cfg.methods.is_empty() {
        bail!("no methods configured");
    }
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let surrogates = load_surrogates(&cfg.surrogates)?;
    let flows = load_flow_map(&cfg.flows)?;
    let pots = potentials(&vae, &surrogates);
    let selection = start_latents(StartKind::Corpus, cfg.knobs.selection_size, &vae, &corpus, cfg.seed.wrapping_add(1))?;
    let ctx = context(&vae, &corpus, &pots, &flows, &cfg.knobs, cfg.seed, &selection);
    let seqs: Vec<&TokenSequence> = corpus.sequences().collect();
    let alpha = cfg.knobs.alpha;
    match cfg.benchmark {
        Benchmark::Unconstrained => {
            let z0 = prior_latents(cfg.n_samples, vae.latent_dim(), cfg.seed);
            let mut rows = Vec::new();
            for m in &cfg.methods {
                let src = method_source(&ctx, m, cfg.property, cfg.direction)?;
                let r = unconstrained_benchmark(&src, alpha, &vae, &corpus.stats, z0.view(), cfg.steps, cfg.property, cfg.direction, cfg.seed)?;
                rows.push((m.clone(), r));
            }
            write_unconstrained_csv(&cfg.out.join("unconstrained.csv"), &rows)?;
        }
        Benchmark::Constrained => {
            let values: Vec<f64> = corpus.records.iter().map(|r| r.props.get(cfg.property)).collect();
            let (z0, _) = lowest_property_seeds(&vae, &seqs, &values, cfg.seeds, cfg.direction)?;
            let mut rows = Vec::new();
            for m in &cfg.methods {
                let src = method_source(&ctx, m, cfg.property, cfg.direction)?;
                let (r, table) = constrained_benchmark(
                    &src,
                    alpha,
                    &vae,
                    &corpus.stats,
                    z0.view(),
                    cfg.constrained_steps,
                    cfg.property,
                    cfg.direction,
                    &cfg.deltas,
                    cfg.seed,
                )?;
                let hist = cfg.out.join(format!("histograms_{}.csv", file_safe(m)));
                write_histograms_csv(&hist, &table, 0, cfg.histogram_every.max(1), cfg.histogram_bins.max(1))?;
                rows.push((m.clone(), r));
            }
            write_constrained_csv(&cfg.out.join("constrained.csv"), &rows)?;
        }
        Benchmark::Multiobjective => {
            let first = cfg.objectives.first().context("no objectives configured")?;
            let values: Vec<f64> = corpus.records.iter().map(|r| r.props.get(first.property)).collect();
            let (z0, _) = lowest_property_seeds(&vae, &seqs, &values, cfg.seeds, first.direction)?;
            let objectives: Vec<(PropertyKind, Direction)> = cfg.objectives.iter().map(|o| (o.property, o.direction)).collect();
            for m in &cfg.methods {
                let parts = objectives
                    .iter()
                    .map(|(k, d)| method_source(&ctx, m, *k, *d))
                    .collect::<Result<Vec<Source<'_>>>>()?;
                let src = Source::mean(parts)?;
                let rows = multiobjective_benchmark(&src, alpha, &vae, &corpus.stats, z0.view(), cfg.constrained_steps, &objectives, &cfg.deltas, cfg.seed)?;
                write_multiobjective_csv(&cfg.out.join(format!("multiobjective_{}.csv", file_safe(m))), &rows)?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManipulateCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    pub surrogates: Vec<PathBuf>,
    pub flows: BTreeMap<String, PathBuf>,
    pub methods: Vec<String>,
    /// Properties to raise; `sa_lite` is lowered.
    pub properties: Vec<PropertyKind>,
    pub n: usize,
    pub steps: usize,
    pub start: StartKind,
    pub seed: u64,
    pub knobs: MethodKnobs,
}

impl Default for ManipulateCfg {
    fn default() -> Self {
        Self {
            out: out_dir("manipulate"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            surrogates: Vec::new(),
            flows: BTreeMap::new(),
            methods: vec!["random".into(), "random_1d".into(), "chemspace".into()],
            properties: vec![PropertyKind::Plogp, PropertyKind::QedLite, PropertyKind::SaLite],
            n: 1000,
            steps: 10,
            start: StartKind::Corpus,
            seed: 0,
            knobs: MethodKnobs::default(),
        }
    }
}

#[derive(Serialize)]
struct RankRow {
    method: String,
    rank: f64,
}

pub fn manipulate_cmd(cfg: &ManipulateCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let surrogates = load_surrogates(&cfg.surrogates)?;
    let flows = load_flow_map(&cfg.flows)?;
    let pots = potentials(&vae, &surrogates);
    let selection = start_latents(cfg.start, cfg.knobs.selection_size, &vae, &corpus, cfg.seed.wrapping_add(1))?;
    let ctx = context(&vae, &corpus, &pots, &flows, &cfg.knobs, cfg.seed, &selection);
    let z0 = start_latents(cfg.start, cfg.n, &vae, &corpus, cfg.seed)?;
    let mut entries = Vec::new();
    for &kind in &cfg.properties {
        let direction = selection_direction(kind);
        for m in &cfg.methods {
            entries.push(ManipulationEntry {
                method: m.clone(),
                property: kind,
                direction,
                source: method_source(&ctx, m, kind, direction)?,
                alpha: cfg.knobs.alpha,
            });
        }
    }
    let crit = |k: PropertyKind| SuccessCriteria::for_range(corpus.property_range(k));
    let rows = manipulation_benchmark(&entries, &vae, &corpus.stats, z0.view(), cfg.steps, cfg.seed, &crit)?;
    write_manipulation_csv(&cfg.out.join("manipulation.csv"), &rows)?;
    let ranks: Vec<RankRow> = rank_methods(&rows).into_iter().map(|(method, rank)| RankRow { method, rank }).collect();
    write_csv(&cfg.out.join("ranking.csv"), &ranks)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WgfSimCfg {
    pub out: PathBuf,
    pub flow: FlowKind,
    pub dim: usize,
    pub n: usize,
    pub h: f64,
    pub t_end: f64,
    pub sigma0: f64,
    pub seed: u64,
    pub density: DensityChoice,
    /// Cells of the 1-D grid oracle on `[-half_width, half_width]`; 0 skips it.
    pub grid_cells: usize,
    pub grid_half_width: f64,
}

impl Default for WgfSimCfg {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            out: out_dir("wgf-sim"),
            flow: s.flow,
            dim: s.dim,
            n: s.n,
            h: s.h,
            t_end: s.t_end,
            sigma0: s.sigma0,
            seed: s.seed,
            density: s.density,
            grid_cells: 0,
            grid_half_width: 8.0,
        }
    }
}

#[derive(Serialize)]
struct WgfSummary {
    t: f64,
    steps: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

pub fn wgf_sim_cmd(cfg: &WgfSimCfg) -> Result<()> {
    let grid = if cfg.grid_cells > 0 { Some(Grid::symmetric(cfg.grid_half_width, cfg.grid_cells)?) } else { None };
    let s = Scenario {
        flow: cfg.flow,
        dim: cfg.dim,
        n: cfg.n,
        h: cfg.h,
        t_end: cfg.t_end,
        sigma0: cfg.sigma0,
        seed: cfg.seed,
        density: cfg.density,
        grid,
    };
    let (res, oracle) = run_scenario(&s)?;
    write_moments_csv(&cfg.out.join("moments.csv"), &res.moments)?;
    if let (Some(g), Some(rho)) = (grid, oracle) {
        write_grid_csv(&cfg.out.join("oracle.csv"), &g, &rho)?;
    }
    let last = res.moments.last().context("simulation recorded no moments")?;
    write_json(
        &cfg.out.join("summary.json"),
        &WgfSummary {
            t: last.t,
            steps: last.step,
            mean: last.mean.clone(),
            var: last.var.clone(),
        },
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalyzeLatentCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    /// Corpus molecules encoded; 0 uses all.
    pub n: usize,
    pub properties: Vec<PropertyKind>,
    /// Relative half-width of the norm band around `sqrt(d)`.
    pub tolerance: f64,
    pub analysis: LatentAnalysisConfig,
}

impl Default for AnalyzeLatentCfg {
    fn default() -> Self {
        Self {
            out: out_dir("analyze-latent"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            n: 0,
            properties: PropertyKind::ALL.to_vec(),
            tolerance: 0.15,
            analysis: LatentAnalysisConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct LatentSummary {
    dim: usize,
    sqrt_dim: f64,
    tolerance: f64,
    fraction_within: f64,
    mean_norm: f64,
}

pub fn analyze_latent_cmd(cfg: &AnalyzeLatentCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let idx = corpus_subset(&corpus, cfg.n, cfg.analysis.seed);
    let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &corpus.records[i].tokens).collect();
    let a = latent_analysis(&vae, &seqs, &corpus.stats, &cfg.properties, &cfg.analysis)?;
    write_latent_analysis(&cfg.out, &a)?;
    let d = vae.latent_dim();
    write_json(
        &cfg.out.join("summary.json"),
        &LatentSummary {
            dim: d,
            sqrt_dim: (d as f64).sqrt(),
            tolerance: cfg.tolerance,
            fraction_within: norm_concentration(&a.norms, d, cfg.tolerance),
            mean_norm: a.norms.iter().sum::<f64>() / a.norms.len().max(1) as f64,
        },
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PearsonSelectCfg {
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub vae: PathBuf,
    pub flows: PathBuf,
    pub property: PropertyKind,
    pub n: usize,
    pub steps: usize,
    pub alpha: f64,
    pub start: StartKind,
    pub seed: u64,
}

impl Default for PearsonSelectCfg {
    fn default() -> Self {
        Self {
            out: out_dir("pearson-select"),
            corpus: out_dir("gen-corpus"),
            vae: out_dir("train-vae").join("vae.ckpt"),
            flows: out_dir("train-flows").join("flows.ckpt"),
            property: PropertyKind::Plogp,
            n: 100,
            steps: 10,
            alpha: 0.1,
            start: StartKind::Corpus,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct SelectionReport {
    property: PropertyKind,
    direction: Direction,
    index: usize,
    scores: Vec<Option<f64>>,
}

pub fn pearson_select_cmd(cfg: &PearsonSelectCfg) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus)?;
    let vae = load_vae(&cfg.vae)?;
    let model = load_flows(&cfg.flows)?;
    let z = start_latents(cfg.start, cfg.n, &vae, &corpus, cfg.seed)?;
    let sources: Vec<Source<'_>> = model.fields.iter().map(|f| Source::Learned { field: f }).collect();
    let direction = selection_direction(cfg.property);
    let score = |z: ndarray::ArrayView2<f64>| oracle_values(&vae, &corpus.stats, cfg.property, z);
    let sel = pearson_select(&sources, cfg.alpha, z.view(), cfg.steps, &score, direction, cfg.seed)?;
    write_json(
        &cfg.out.join("selection.json"),
        &SelectionReport {
            property: cfg.property,
            direction,
            index: sel.index,
            scores: sel.scores,
        },
    )
}
