//! Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
//! as arguments to run a subset.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use chemflow::evalbench::{
    constrained_benchmark, lowest_property_seeds, norm_concentration, pearson_select, relaxed_success, row_norms,
    scored_paths, strict_success, success_rates, unconstrained_benchmark, ScoredPath, SuccessCriteria,
};
use chemflow::flows::{
    classifier_accuracy, hj_residual, sample_batch, train_flows, wave_residual, Direction, DisentanglementClassifier,
    FlowModel, FlowSpec, GuidanceModels, PdeKind, TrainFlowsConfig,
};
use chemflow::genvae::{one_hot_batch, sample_z, split_indices, token_accuracy, train_vae, TrainVaeConfig, VaeConfig, VaeModel};
use chemflow::surrogate::{surrogate_arch, train_surrogate, Surrogate, TrainSurrogateConfig};
use chemflow::traversal::{traverse_latents, BetaSchedule, DoubleWell, Potential, Quadratic, Source, SurrogatePotential};
use diffnet::{Activation, DenseNet, EnergyNet, FieldGrads, Mlp, NetError, ScalarField, SecondDerivCfg};
use molkit::{decode, gen_corpus, ComponentStats, Corpus, CorpusConfig, PropertyKind, TokenSequence};
use ndarray::{array, s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wgflab::{gaussian_on_grid, grid_oracle_1d, histogram_l1, simulate, DensityModel, Ensemble, EvolvingGaussian, FlowKind, Grid, OracleConfig};

type Outcome = Result<(bool, String), String>;

fn normal(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Below this absolute difference a component counts as agreeing; it sits at
/// the round-off level of central differences with step `H`.
const ABS_FLOOR: f64 = 1e-9;

#[derive(Default)]
struct GradTally {
    checks: usize,
    worst: f64,
    failures: Vec<String>,
}

impl GradTally {
    fn compare(&mut self, what: &str, analytic: f64, fd: f64) {
        self.checks += 1;
        let diff = (analytic - fd).abs();
        if diff <= ABS_FLOOR {
            return;
        }
        let rel = diff / analytic.abs().max(fd.abs());
        self.worst = self.worst.max(rel);
        if rel > REL_TOL && self.failures.len() < 5 {
            self.failures.push(format!("{what}: {analytic:.6e} vs {fd:.6e}"));
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Input gradients on every entry and `n_params` random parameter gradients
/// of `<up, net(x)>`.
fn check_dense(tally: &mut GradTally, name: &str, net: &DenseNet, x: &Array2<f64>, n_params: usize, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let up = uniform(rng, x.nrows(), net.n_out());
    let loss = |n: &DenseNet, x: &Array2<f64>| (n.forward(x.view()).unwrap() * &up).sum();
    let gx = net.grad_input(x.view(), up.view()).map_err(err)?;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[[i, j]] += H;
            let mut xm = x.clone();
            xm[[i, j]] -= H;
            tally.compare(&format!("{name} input ({i},{j})"), gx[[i, j]], (loss(net, &xp) - loss(net, &xm)) / (2.0 * H));
        }
    }
    let gp = net.grad_params(x.view(), up.view()).map_err(err)?;
    let mut probe = net.clone();
    for _ in 0..n_params {
        let k = rng.random_range(0..net.params.len());
        probe.params[k] = net.params[k] + H;
        let a = loss(&probe, x);
        probe.params[k] = net.params[k] - H;
        let b = loss(&probe, x);
        probe.params[k] = net.params[k];
        tally.compare(&format!("{name} param {k}"), gp[k], (a - b) / (2.0 * H));
    }
    Ok(())
}

fn check_energy(tally: &mut GradTally, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let net = EnergyNet::new(4, 16, &[32, 32], rng);
    let z = uniform(rng, 3, 4);
    let t = [0.0, 3.0, 9.5];
    let g = net.grads(&t, z.view()).map_err(err)?;
    let phi1 = |zz: &Array2<f64>, i: usize, tt: f64| net.phi(&[tt], zz.slice(s![i..i + 1, ..])).unwrap()[0];
    for i in 0..3 {
        tally.compare("energy dt", g.dt[i], (phi1(&z, i, t[i] + H) - phi1(&z, i, t[i] - H)) / (2.0 * H));
        for j in 0..4 {
            let mut zp = z.clone();
            zp[[i, j]] += H;
            let mut zm = z.clone();
            zm[[i, j]] -= H;
            tally.compare("energy dz", g.grad[[i, j]], (phi1(&zp, i, t[i]) - phi1(&zm, i, t[i])) / (2.0 * H));
        }
    }
    let w = [1.0, -0.5, 2.0];
    let mut gp = vec![0.0; net.n_params()];
    net.accumulate_param_grads(&t, z.view(), &w, &mut gp).map_err(err)?;
    let total = |n: &EnergyNet| n.phi(&t, z.view()).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut probe = net.clone();
    for _ in 0..100 {
        let k = rng.random_range(0..net.n_params());
        probe.params[k] = net.params[k] + H;
        let a = total(&probe);
        probe.params[k] = net.params[k] - H;
        let b = total(&probe);
        probe.params[k] = net.params[k];
        tally.compare(&format!("energy param {k}"), gp[k], (a - b) / (2.0 * H));
    }
    Ok(())
}

fn check_vae_and_surrogate(tally: &mut GradTally, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let cfg = VaeConfig::default();
    let vae = VaeModel::new(cfg.clone(), 5);
    let corpus = gen_corpus(&CorpusConfig::new(50, 3)).map_err(err)?;
    let seqs: Vec<&TokenSequence> = corpus.sequences().collect();
    let x = one_hot_batch(&seqs[..2], cfg.seq_len).map_err(err)?;
    check_dense(tally, "encoder", &vae.enc, &x, 60, rng)?;
    let z = uniform(rng, 2, cfg.latent_dim);
    check_dense(tally, "decoder", &vae.dec, &z, 60, rng)?;

    // reparameterized loss over all parameters of both halves
    let eps = uniform(rng, 2, cfg.latent_dim);
    let ne = vae.enc.params.len();
    let mut ge = vec![0.0; ne];
    let mut gd = vec![0.0; vae.dec.params.len()];
    vae.loss_with_noise(x.view(), eps.view(), 0.7, Some((&mut ge, &mut gd))).map_err(err)?;
    let loss = |m: &VaeModel| m.loss_with_noise(x.view(), eps.view(), 0.7, None).unwrap().total;
    let mut flat = vae.flat_params();
    let mut probe = vae.clone();
    for _ in 0..60 {
        let k = rng.random_range(0..flat.len());
        let orig = flat[k];
        flat[k] = orig + H;
        probe.set_flat_params(&flat);
        let up = loss(&probe);
        flat[k] = orig - H;
        probe.set_flat_params(&flat);
        let down = loss(&probe);
        flat[k] = orig;
        let an = if k < ne { ge[k] } else { gd[k - ne] };
        tally.compare(&format!("vae loss param {k}"), an, (up - down) / (2.0 * H));
    }
    probe.set_flat_params(&flat);

    // decoder probabilities pulled back to the latent
    let g = uniform(rng, 2, cfg.input_dim());
    let vjp = vae.probs_vjp(z.view(), g.view()).map_err(err)?;
    let inner = |zz: &Array2<f64>| (vae.decode_probs(zz.view()).unwrap() * &g).sum();
    for i in 0..2 {
        for j in 0..cfg.latent_dim {
            let mut zp = z.clone();
            zp[[i, j]] += H;
            let mut zm = z.clone();
            zm[[i, j]] -= H;
            tally.compare("probs vjp", vjp[[i, j]], (inner(&zp) - inner(&zm)) / (2.0 * H));
        }
    }

    // surrogate network and its latent gradient through the decoder
    let norm = ComponentStats { mean: 0.3, std: 1.7 };
    let sur = Surrogate::new(PropertyKind::Plogp, cfg.input_dim(), 64, 2, norm, rng);
    let probs = vae.decode_probs(z.view()).map_err(err)?;
    check_dense(tally, "surrogate", &sur.net, &probs, 60, rng)?;
    let (_, gz) = sur.grad_wrt_latent(&vae, z.view()).map_err(err)?;
    let h = |zz: &Array2<f64>, i: usize| sur.value_at_latent(&vae, zz.view()).unwrap()[i];
    for i in 0..2 {
        for j in 0..cfg.latent_dim {
            let mut zp = z.clone();
            zp[[i, j]] += H;
            let mut zm = z.clone();
            zm[[i, j]] -= H;
            tally.compare("surrogate latent", gz[[i, j]], (h(&zp, i) - h(&zm, i)) / (2.0 * H));
        }
    }

    let cls = DisentanglementClassifier::new(cfg.input_dim(), &[64], 3, rng);
    let pair = uniform(rng, 2, 2 * cfg.input_dim());
    check_dense(tally, "classifier", &cls.net, &pair, 60, rng)
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = GradTally::default();
    let nets = [
        ("mish mlp", Mlp::feedforward(5, &[7, 7], Activation::Mish, 3, Activation::Identity), 5),
        ("relu mlp", Mlp::feedforward(3, &[6, 6], Activation::Relu, 2, Activation::Identity), 3),
        ("softmax head", Mlp::feedforward(4, &[8], Activation::Mish, 12, Activation::Softmax { group: 4 }), 4),
        ("residual blocks", surrogate_arch(6, 8, 2), 6),
    ];
    for (name, arch, n_in) in nets {
        let net = DenseNet::new(arch, &mut rng);
        let x = uniform(&mut rng, 4, n_in);
        check_dense(&mut t, name, &net, &x, 80, &mut rng)?;
    }
    check_energy(&mut t, &mut rng)?;
    check_vae_and_surrogate(&mut t, &mut rng)?;
    let detail = format!("worst rel err {:.2e} over {} checks (tol {REL_TOL:.0e}, abs floor {ABS_FLOOR:.0e})", t.worst, t.checks);
    if t.failures.is_empty() {
        Ok((true, detail))
    } else {
        Ok((false, format!("{detail}; {}", t.failures.join("; "))))
    }
}

// ---------------------------------------------------------------- 2

/// `phi = a . z + b t`.
struct Affine {
    a: Vec<f64>,
    b: f64,
}

impl ScalarField for Affine {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn grads(&self, t: &[f64], z: ArrayView2<f64>) -> Result<FieldGrads, NetError> {
        let a = Array1::from(self.a.clone());
        Ok(FieldGrads {
            phi: z.dot(&a) + &(Array1::from(t.to_vec()) * self.b),
            dt: Array1::from_elem(t.len(), self.b),
            grad: Array2::from_shape_fn(z.dim(), |(_, j)| self.a[j]),
        })
    }
}

/// `phi = sin(z - c t)` in one dimension.
struct Travelling {
    c: f64,
}

impl ScalarField for Travelling {
    fn dim(&self) -> usize {
        1
    }

    fn grads(&self, t: &[f64], z: ArrayView2<f64>) -> Result<FieldGrads, NetError> {
        let arg: Vec<f64> = t.iter().zip(z.column(0)).map(|(t, z)| z - self.c * t).collect();
        Ok(FieldGrads {
            phi: arg.iter().map(|a| a.sin()).collect(),
            dt: arg.iter().map(|a| -self.c * a.cos()).collect(),
            grad: Array2::from_shape_fn(z.dim(), |(i, _)| arg[i].cos()),
        })
    }
}

fn pde_residuals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 8;
    let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let half_sq = 0.5 * a.iter().map(|v| v * v).sum::<f64>();
    let z = uniform(&mut rng, 200, d) * 3.0;
    let t: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..10.0)).collect();
    let hj = hj_residual(&Affine { a, b: -half_sq }, &t, z.view()).map_err(err)?;
    let hj_max = hj.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut wave_max = 0.0f64;
    for c in [0.5, 1.0, 2.0] {
        let z1 = Array2::from_shape_fn((200, 1), |_| rng.random_range(-4.0..4.0));
        let r = wave_residual(&Travelling { c }, &t, z1.view(), c, &SecondDerivCfg::exact(), &mut rng).map_err(err)?;
        wave_max = r.iter().fold(wave_max, |m, v| m.max(v.abs()));
    }
    Ok((hj_max < 1e-6 && wave_max < 1e-3, format!("max |HJ residual| {hj_max:.2e} (< 1e-6), max |wave residual| {wave_max:.2e} (< 1e-3)")))
}

// ---------------------------------------------------------------- 3

fn ensemble(dim: usize, n: usize, sigma0: f64, seed: u64) -> Result<Ensemble, String> {
    Ensemble::gaussian(dim, n, sigma0, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)
}

fn oracle_l1(kind: FlowKind, sigma0: f64, t_end: f64) -> Result<f64, String> {
    let g = EvolvingGaussian::new(1, sigma0 * sigma0, kind).map_err(err)?;
    let r = simulate(&kind, ensemble(1, 100_000, sigma0, 6)?, &DensityModel::Fixed(&g), t_end, 1e-3).map_err(err)?;
    let grid = Grid::symmetric(8.0, 800).map_err(err)?;
    let rho0 = gaussian_on_grid(&grid, sigma0 * sigma0);
    let rho = grid_oracle_1d(&kind, &grid, &rho0, r.ensemble.t, &OracleConfig::default()).map_err(err)?;
    histogram_l1(&r.ensemble.positions, &grid, &rho, 10).map_err(err)
}

fn wasserstein_flows() -> Outcome {
    let heat = FlowKind::Heat;
    let g = EvolvingGaussian::new(2, 1.0, heat).map_err(err)?;
    let r = simulate(&heat, ensemble(2, 10_000, 1.0, 3)?, &DensityModel::Fixed(&g), 0.5, 1e-3).map_err(err)?;
    let target = 1.0 + 2.0 * 0.5;
    let heat_err = r.moments.last().unwrap().var.iter().map(|v| (v / target - 1.0).abs()).fold(0.0, f64::max);

    let fp = FlowKind::FokkerPlanck { stiffness: 1.0 };
    let g = EvolvingGaussian::new(2, 1.0, fp).map_err(err)?;
    let r = simulate(&fp, ensemble(2, 10_000, 1.0, 4)?, &DensityModel::Fixed(&g), 0.5, 1e-3).map_err(err)?;
    let fp_drift = r.moments.iter().flat_map(|m| m.var.iter()).map(|v| (v - 1.0).abs()).fold(0.0, f64::max);

    let l1_heat = oracle_l1(heat, 1.0, 0.5)?;
    let l1_fp = oracle_l1(fp, 0.5, 0.5)?;
    let pass = heat_err < 0.05 && fp_drift < 0.03 && l1_heat < 0.05 && l1_fp < 0.05;
    Ok((
        pass,
        format!(
            "heat variance rel err {heat_err:.4} (< 0.05), FP variance drift {fp_drift:.4} (< 0.03), histogram L1 heat {l1_heat:.4} / FP {l1_fp:.4} (< 0.05)"
        ),
    ))
}

// ---------------------------------------------------------------- 4, 5

fn double_well() -> Outcome {
    let w = DoubleWell::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = Array2::from_shape_simple_fn((1000, 2), || rng.random_range(-2.0..2.0));
    let steps = 5000;
    let gf = Source::GradientFlow {
        potential: &w,
        direction: Direction::Minimize,
    };
    let ld = Source::Langevin {
        potential: &w,
        direction: Direction::Minimize,
        beta: BetaSchedule::Cosine { beta0: 0.7, steps },
    };
    let frac = |src: &Source<'_>| -> Result<f64, String> {
        let end = traverse_latents(src, 0.05, z0.view(), steps, 7, 0).map_err(err)?.pop().unwrap();
        Ok(end.rows().into_iter().filter(|r| w.in_global_basin(*r)).count() as f64 / 1000.0)
    };
    let (g, l) = (frac(&gf)?, frac(&ld)?);
    Ok((l >= 0.9 && g <= 0.6, format!("annealed Langevin {:.1}% (>= 90%), gradient flow {:.1}% (<= 60%) of 1000 chains in the global basin", 100.0 * l, 100.0 * g)))
}

fn langevin_stationarity() -> Outcome {
    let pot = Quadratic::new(array![0.0, 0.0], 0.5);
    let src = Source::Langevin {
        potential: &pot,
        direction: Direction::Minimize,
        beta: BetaSchedule::Constant { beta: 1.0 },
    };
    let z0 = Array2::zeros((10_000, 2));
    let states = traverse_latents(&src, 0.01, z0.view(), 5000, 3, 0).map_err(err)?;
    let last = states.last().unwrap();
    let vars: Vec<f64> = (0..2).map(|j| last.column(j).var(0.0)).collect();
    let worst = vars.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let (v, _) = pot.value_grad(last.view()).map_err(err)?;
    Ok((worst < 0.1, format!("per-coordinate variance {:.4}, {:.4} after 5000 steps (within 10% of 1); mean potential {:.3}", vars[0], vars[1], v.mean().unwrap())))
}

// ---------------------------------------------------------------- shared models

struct Trained {
    corpus: Corpus,
    vae: VaeModel,
    val_x: Array2<f64>,
    pool: Array2<f64>,
}

fn trained() -> &'static Result<Trained, String> {
    static T: OnceLock<Result<Trained, String>> = OnceLock::new();
    T.get_or_init(|| {
        let corpus = gen_corpus(&CorpusConfig::new(10_000, 0)).map_err(err)?;
        let seqs: Vec<&TokenSequence> = corpus.sequences().collect();
        let cfg = TrainVaeConfig::default();
        let (vae, _) = train_vae(VaeModel::new(VaeConfig::default(), cfg.seed), &seqs, &cfg).map_err(err)?;
        let (_, va) = split_indices(seqs.len(), cfg.val_fraction, cfg.seed);
        let val: Vec<&TokenSequence> = va.iter().map(|&i| seqs[i]).collect();
        let val_x = one_hot_batch(&val, vae.cfg.seq_len).map_err(err)?;
        let (pool, _) = vae.encode_seqs(&seqs).map_err(err)?;
        Ok(Trained { corpus, vae, val_x, pool })
    })
}

fn shared() -> Result<&'static Trained, String> {
    trained().as_ref().map_err(|e| format!("training the VAE failed: {e}"))
}

/// Surrogate and supervised wave/HJ flows for one property.
struct Guided {
    kind: PropertyKind,
    direction: Direction,
    surrogate: Surrogate,
    wave: FlowModel,
    hj: FlowModel,
}

const GUIDED: [(PropertyKind, Direction); 2] = [(PropertyKind::Plogp, Direction::Maximize), (PropertyKind::RingPenalty, Direction::Minimize)];

fn guided() -> &'static Result<Vec<Guided>, String> {
    static G: OnceLock<Result<Vec<Guided>, String>> = OnceLock::new();
    G.get_or_init(|| {
        let t = shared()?;
        GUIDED
            .iter()
            .map(|&(kind, direction)| {
                let (surrogate, _) = train_surrogate(&t.vae, kind, &t.corpus.stats, &TrainSurrogateConfig::default()).map_err(err)?;
                let models = GuidanceModels {
                    vae: &t.vae,
                    surrogate: Some(&surrogate),
                };
                let flow = |pde| -> Result<FlowModel, String> {
                    let spec = FlowSpec::supervised(pde, kind, direction);
                    Ok(train_flows(spec, &TrainFlowsConfig::default(), models, t.pool.view()).map_err(err)?.0)
                };
                let (wave, hj) = (flow(PdeKind::Wave)?, flow(PdeKind::Hj)?);
                Ok(Guided {
                    kind,
                    direction,
                    surrogate,
                    wave,
                    hj,
                })
            })
            .collect()
    })
}

const ALPHA: f64 = 0.1;
const LD_BETA: f64 = 1.0;

/// Random baseline followed by GF, LD, Wave-spv and HJ-spv.
fn methods<'a>(g: &'a Guided, pot: &'a SurrogatePotential<'a>, d: usize) -> Result<Vec<(&'static str, Source<'a>)>, String> {
    Ok(vec![
        ("random", Source::random(d, &mut ChaCha8Rng::seed_from_u64(0x5eed)).map_err(err)?),
        (
            "gf",
            Source::GradientFlow {
                potential: pot,
                direction: g.direction,
            },
        ),
        (
            "ld",
            Source::Langevin {
                potential: pot,
                direction: g.direction,
                beta: BetaSchedule::Constant { beta: LD_BETA },
            },
        ),
        ("wave-spv", Source::Learned { field: &g.wave.fields[0] }),
        ("hj-spv", Source::Learned { field: &g.hj.fields[0] }),
    ])
}

// ---------------------------------------------------------------- 6

fn vae_gates() -> Outcome {
    let t = shared()?;
    let acc = token_accuracy(&t.vae, t.val_x.view()).map_err(err)?;
    let d = t.vae.latent_dim();
    let prior = normal(1000, d, 17);
    let decoded = t.vae.decode_molecules(prior.view()).map_err(err)?;
    let valid = decoded.iter().filter(|s| decode(s).is_valid()).count() as f64 / decoded.len() as f64;
    let (mu, lv) = t.vae.encode(t.val_x.view()).map_err(err)?;
    let (z, _) = sample_z(mu.view(), lv.view(), &mut ChaCha8Rng::seed_from_u64(18));
    let conc = norm_concentration(&row_norms(z.view()), d, 0.15);
    let prior_conc = norm_concentration(&row_norms(prior.view()), d, 0.15);
    let mean_conc = norm_concentration(&row_norms(mu.view()), d, 0.15);
    let pass = acc >= 0.9 && valid == 1.0 && conc >= 0.8;
    Ok((
        pass,
        format!(
            "held-out token accuracy {:.2}% (>= 90%), valid prior decodes {:.1}% (= 100%), encodings with |z| within 15% of sqrt({d}) {:.1}% (>= 80%; N(0, I) samples {:.1}%, posterior means {:.1}%)",
            100.0 * acc,
            100.0 * valid,
            100.0 * conc,
            100.0 * prior_conc,
            100.0 * mean_conc
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn supervised_efficacy() -> Outcome {
    let t = shared()?;
    let gs = guided().as_ref().map_err(|e| e.clone())?;
    let d = t.vae.latent_dim();
    let z0 = normal(10_000, d, 21);
    let mut pass = true;
    let mut parts = Vec::new();
    for g in gs {
        let pot = SurrogatePotential {
            vae: &t.vae,
            surrogate: &g.surrogate,
        };
        let mut means = Vec::new();
        for (name, src) in methods(g, &pot, d)? {
            let rep = unconstrained_benchmark(&src, ALPHA, &t.vae, &t.corpus.stats, z0.view(), 10, g.kind, g.direction, 0).map_err(err)?;
            means.push((name, rep.top100.mean));
        }
        let base = means[0].1;
        let better = |m: f64| match g.direction {
            Direction::Maximize => m > base,
            Direction::Minimize => m < base,
        };
        let beaten = means[1..].iter().all(|(_, m)| better(*m));
        pass &= beaten;
        let list: Vec<String> = means.iter().map(|(n, m)| format!("{n} {m:.4}")).collect();
        parts.push(format!("{} ({:?}) top-100 mean: {}", g.kind, g.direction, list.join(", ")));
    }
    Ok((pass, parts.join("; ")))
}

// ---------------------------------------------------------------- 8

const DELTAS: [f64; 4] = [0.0, 0.2, 0.4, 0.6];
const CONSTRAINED_SEEDS: usize = 200;
const CONSTRAINED_STEPS: usize = 100;

fn constrained_structure() -> Outcome {
    let t = shared()?;
    let gs = guided().as_ref().map_err(|e| e.clone())?;
    let g = &gs[0];
    let d = t.vae.latent_dim();
    let seqs: Vec<&TokenSequence> = t.corpus.sequences().collect();
    let values: Vec<f64> = t.corpus.records.iter().map(|r| r.props.get(g.kind)).collect();
    let (z0, _) = lowest_property_seeds(&t.vae, &seqs, &values, CONSTRAINED_SEEDS, g.direction).map_err(err)?;
    let crit = SuccessCriteria::for_range(t.corpus.property_range(g.kind)).map_err(err)?;
    let pot = SurrogatePotential {
        vae: &t.vae,
        surrogate: &g.surrogate,
    };
    let mut pass = true;
    let mut parts = Vec::new();
    let mut logged = 0usize;
    let mut strict_total = 0usize;
    for (name, src) in methods(g, &pot, d)? {
        let (rows, _) = constrained_benchmark(&src, ALPHA, &t.vae, &t.corpus.stats, z0.view(), CONSTRAINED_STEPS, g.kind, g.direction, &DELTAS, 0).map_err(err)?;
        let monotone = rows.windows(2).all(|w| w[1].success_pct <= w[0].success_pct);
        let paths = scored_paths(&src, ALPHA, &t.vae, &t.corpus.stats, z0.view(), CONSTRAINED_STEPS, g.kind, g.direction, 0).map_err(err)?;
        let mut implied = true;
        for p in &paths {
            let strict = strict_success(p).map_err(err)?;
            strict_total += strict as usize;
            implied &= !strict || relaxed_success(p, &crit).map_err(err)?;
        }
        logged += paths.len();
        pass &= monotone && implied;
        let pcts: Vec<String> = rows.iter().map(|r| format!("{:.1}", r.success_pct)).collect();
        parts.push(format!("{name} [{}]{}", pcts.join(" "), if implied { "" } else { " strict-not-relaxed" }));
    }
    Ok((
        pass,
        format!(
            "success % at delta {DELTAS:?}: {}; strict => relaxed on {logged} trajectories ({strict_total} strict successes)",
            parts.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn unsupervised_pipeline() -> Outcome {
    let t = shared()?;
    let d = t.vae.latent_dim();
    let spec = FlowSpec::unsupervised(PdeKind::Hj, 3);
    let models = GuidanceModels {
        vae: &t.vae,
        surrogate: None,
    };
    let (model, _) = train_flows(spec, &TrainFlowsConfig::default(), models, t.pool.view()).map_err(err)?;
    let probe = normal(256, d, 31);
    let mut min_norm = f64::INFINITY;
    for k in 0..model.fields.len() {
        for step in 0..model.spec.horizon {
            let v = model.velocity(k, step as f64, probe.view()).map_err(err)?;
            let mean = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / probe.nrows() as f64;
            min_norm = min_norm.min(mean);
        }
    }
    let held = sample_batch(normal(900, d, 32).view(), 900, model.spec.horizon, 3, &mut ChaCha8Rng::seed_from_u64(33));
    let acc = classifier_accuracy(&model, &t.vae, &held).map_err(err)?;

    // synthetic two-flow test: the planted flow raises the scored coordinate
    let z = normal(64, 4, 34);
    let score = |z: ArrayView2<f64>| -> chemflow::Result<Vec<f64>> { Ok(z.column(0).to_vec()) };
    let planted = Source::linear(array![1.0, 0.0, 0.0, 0.0]).map_err(err)?;
    let decoy = Source::linear(array![-0.6, 0.8, 0.0, 0.0]).map_err(err)?;
    let first = pearson_select(&[planted.clone(), decoy.clone()], 0.5, z.view(), 10, &score, Direction::Maximize, 0).map_err(err)?;
    let second = pearson_select(&[decoy.clone(), planted.clone()], 0.5, z.view(), 10, &score, Direction::Maximize, 0).map_err(err)?;
    let lowered = pearson_select(&[planted, decoy], 0.5, z.view(), 10, &score, Direction::Minimize, 0).map_err(err)?;
    let recovered = first.index == 0 && second.index == 1 && lowered.index == 1;

    let pass = min_norm > 1e-3 && acc > 1.0 / 3.0 && recovered;
    Ok((
        pass,
        format!(
            "smallest mean |grad phi| over fields and steps {min_norm:.3e} (> 1e-3), held-out classifier accuracy {:.1}% (> 33.3%), planted flow recovered: {recovered}",
            100.0 * acc
        ),
    ))
}

// ---------------------------------------------------------------- 10

struct Case {
    name: &'static str,
    props: &'static [f64],
    sims: &'static [f64],
    distinct: usize,
    strict: bool,
    relaxed: bool,
}

/// Relaxed thresholds are powers of two so that boundary cases are exact.
const EPS: f64 = 0.5;
const GAMMA: f64 = 0.125;

const CASES: &[Case] = &[
    Case { name: "improving, similarity falling", props: &[0.0, 1.0, 2.0, 3.0], sims: &[1.0, 0.75, 0.5, 0.25], distinct: 4, strict: true, relaxed: true },
    Case { name: "flat property counts as non-decreasing", props: &[1.0, 1.0, 1.0], sims: &[1.0, 0.5, 0.5], distinct: 3, strict: true, relaxed: true },
    Case { name: "property drop inside epsilon", props: &[0.0, 1.0, 0.75, 2.0], sims: &[1.0, 0.75, 0.5, 0.25], distinct: 4, strict: false, relaxed: true },
    Case { name: "property drop exactly epsilon", props: &[0.0, 1.0, 0.5, 2.0], sims: &[1.0, 0.75, 0.5, 0.25], distinct: 4, strict: false, relaxed: true },
    Case { name: "property drop just past epsilon", props: &[0.0, 1.0, 0.4999, 2.0], sims: &[1.0, 0.75, 0.5, 0.25], distinct: 4, strict: false, relaxed: false },
    Case { name: "similarity rise inside gamma", props: &[0.0, 1.0, 2.0], sims: &[1.0, 0.5, 0.5625], distinct: 3, strict: false, relaxed: true },
    Case { name: "similarity rise exactly gamma", props: &[0.0, 1.0, 2.0], sims: &[1.0, 0.5, 0.625], distinct: 3, strict: false, relaxed: true },
    Case { name: "similarity rise just past gamma", props: &[0.0, 1.0, 2.0], sims: &[1.0, 0.5, 0.6251], distinct: 3, strict: false, relaxed: false },
    Case { name: "two distinct molecules", props: &[0.0, 1.0, 2.0], sims: &[1.0, 0.5, 0.25], distinct: 2, strict: false, relaxed: false },
    Case { name: "exactly three distinct molecules", props: &[0.0, 1.0, 2.0], sims: &[1.0, 0.5, 0.25], distinct: 3, strict: true, relaxed: true },
    Case { name: "single move, two states", props: &[0.0, 1.0], sims: &[1.0, 0.5], distinct: 2, strict: false, relaxed: false },
    Case { name: "both tolerances used at once", props: &[0.0, 2.0, 1.5], sims: &[1.0, 0.5, 0.625], distinct: 3, strict: false, relaxed: true },
    Case { name: "tolerated drop but too few molecules", props: &[0.0, 2.0, 1.75], sims: &[1.0, 0.5, 0.25], distinct: 2, strict: false, relaxed: false },
    Case { name: "gamma breach with improving property", props: &[0.0, 1.0, 2.0, 3.0], sims: &[1.0, 0.25, 0.5, 0.25], distinct: 4, strict: false, relaxed: false },
    Case { name: "epsilon breach at the last step", props: &[0.0, 1.0, 2.0, 1.0], sims: &[1.0, 0.75, 0.5, 0.25], distinct: 4, strict: false, relaxed: false },
];

fn metric_suite() -> Outcome {
    let crit = SuccessCriteria::new(EPS, GAMMA).map_err(err)?;
    let mut wrong = Vec::new();
    let mut paths = Vec::new();
    let mut clauses = BTreeSet::new();
    for c in CASES {
        let p = ScoredPath {
            props: c.props.to_vec(),
            sims: c.sims.to_vec(),
            distinct: c.distinct,
        };
        let (s, r) = (strict_success(&p).map_err(err)?, relaxed_success(&p, &crit).map_err(err)?);
        if (s, r) != (c.strict, c.relaxed) {
            wrong.push(format!("{}: got ({s}, {r})", c.name));
        }
        if c.props.windows(2).any(|w| w[1] < w[0]) {
            clauses.insert("C_SP");
        }
        if c.sims.windows(2).any(|w| w[1] > w[0]) {
            clauses.insert("C_SS");
        }
        if c.distinct <= 2 {
            clauses.insert("C_SD");
        }
        if c.props.windows(2).any(|w| w[0] - w[1] == EPS) {
            clauses.insert("epsilon boundary");
        }
        if c.sims.windows(2).any(|w| w[1] - w[0] == GAMMA) {
            clauses.insert("gamma boundary");
        }
        paths.push(p);
    }
    let expect_strict = 100.0 * CASES.iter().filter(|c| c.strict).count() as f64 / CASES.len() as f64;
    let expect_relaxed = 100.0 * CASES.iter().filter(|c| c.relaxed).count() as f64 / CASES.len() as f64;
    let rates = success_rates(&paths, &crit).map_err(err)?;
    if rates != (expect_strict, expect_relaxed) {
        wrong.push(format!("rates {rates:?} vs ({expect_strict}, {expect_relaxed})"));
    }
    let short = ScoredPath {
        props: vec![1.0],
        sims: vec![1.0],
        distinct: 1,
    };
    if strict_success(&short).is_ok() || relaxed_success(&short, &crit).is_ok() {
        wrong.push("a one-state path was scored".into());
    }
    let pass = wrong.is_empty() && CASES.len() >= 12 && clauses.len() == 5;
    let covered: Vec<&str> = clauses.into_iter().collect();
    Ok((pass, format!("{} hand-made trajectories, clauses covered: {}{}", CASES.len(), covered.join(", "), if wrong.is_empty() { String::new() } else { format!("; mismatches: {}", wrong.join("; ")) })))
}

// ---------------------------------------------------------------- 11

const SUBCOMMANDS: [&str; 11] = [
    "gen-corpus",
    "train-vae",
    "finetune-pde",
    "train-surrogate",
    "train-flows",
    "traverse",
    "optimize",
    "manipulate",
    "wgf-sim",
    "analyze-latent",
    "pearson-select",
];

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    common::run_recipe(a.path())?;
    common::run_recipe(b.path())?;
    let (sa, sb) = (common::snapshot(a.path()), common::snapshot(b.path()));
    let differing: Vec<String> = sa
        .keys()
        .chain(sb.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| sa.get(*k) != sb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let used: BTreeSet<&str> = common::recipe().iter().map(|s| s.subcommand).collect();
    let missing: Vec<&str> = SUBCOMMANDS.iter().filter(|s| !used.contains(*s)).copied().collect();
    let pass = differing.is_empty() && missing.is_empty();
    let mut detail = format!("{} files from {} runs of {} subcommands compared byte for byte", sa.len(), common::recipe().len(), used.len());
    if !differing.is_empty() {
        detail += &format!("; differing: {}", differing.join(", "));
    }
    if !missing.is_empty() {
        detail += &format!("; not exercised: {}", missing.join(", "));
    }
    Ok((pass, detail))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "PDE residual identities", pde_residuals),
        (3, "Wasserstein gradient flows", wasserstein_flows),
        (4, "double-well global basin", double_well),
        (5, "Langevin stationarity", langevin_stationarity),
        (6, "VAE quality gates", vae_gates),
        (7, "supervised flow efficacy", supervised_efficacy),
        (8, "constrained benchmark structure", constrained_structure),
        (9, "unsupervised pipeline", unsupervised_pipeline),
        (10, "success metric suite", metric_suite),
        (11, "CLI determinism", determinism),
    ];
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        println!("{} criterion {id:>2} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
        failed += (!pass) as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
