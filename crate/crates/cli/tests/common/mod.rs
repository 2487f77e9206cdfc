#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_chemflow");

/// Runs the binary with `args` inside `cwd`.
pub fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().expect("spawn chemflow")
}

pub fn run_ok(cwd: &Path, args: &[&str]) {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "chemflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// One recipe step: subcommand, output directory and its TOML settings.
pub struct Step {
    pub subcommand: &'static str,
    pub out: &'static str,
    pub config: String,
}

const SMALL_TRAIN_FLOWS: &str = "
[train]
iterations = 3
batch_size = 8
hidden = [16]
cls_hidden = [8]
e_dim = 4
";

/// A tiny end-to-end run touching every subcommand, with relative paths only.
pub fn recipe() -> Vec<Step> {
    vec![
        Step {
            subcommand: "gen-corpus",
            out: "c",
            config: "[corpus]\nn = 600\nseed = 7\n".into(),
        },
        Step {
            subcommand: "train-vae",
            out: "v",
            config: "corpus = \"c\"\nprior_samples = 100\n[model]\nlatent_dim = 8\nenc_hidden = [64]\ndec_hidden = [64]\n[train]\nepochs = 2\n".into(),
        },
        Step {
            subcommand: "finetune-pde",
            out: "ft",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\ne_dim = 4\nhidden = [16]\n[finetune.vae]\nepochs = 1\n".into(),
        },
        Step {
            subcommand: "train-surrogate",
            out: "s",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nproperty = \"plogp\"\n[train]\nn_train = 300\nn_val = 50\nepochs = 1\nwidth = 32\nblocks = 1\n".into(),
        },
        Step {
            subcommand: "train-flows",
            out: "fs",
            config: format!("corpus = \"c\"\nvae = \"v/vae.ckpt\"\nsurrogate = \"s/surrogate.ckpt\"\npde = \"hj\"\npool_size = 100\n{SMALL_TRAIN_FLOWS}"),
        },
        Step {
            subcommand: "train-flows",
            out: "fu",
            config: format!("corpus = \"c\"\nvae = \"v/vae.ckpt\"\npde = \"wave\"\nmode = \"unsupervised\"\nk = 2\npool_size = 100\n{SMALL_TRAIN_FLOWS}"),
        },
        Step {
            subcommand: "traverse",
            out: "t",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nsurrogate = \"s/surrogate.ckpt\"\nmethod = \"langevin\"\nn = 3\n".into(),
        },
        Step {
            subcommand: "optimize",
            out: "o",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nsurrogates = [\"s/surrogate.ckpt\"]\nmethods = [\"random\", \"gf\", \"ld\", \"hj-spv\"]\nn_samples = 50\n[flows]\nhj-spv = \"fs/flows.ckpt\"\n".into(),
        },
        Step {
            subcommand: "optimize",
            out: "oc",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nsurrogates = [\"s/surrogate.ckpt\"]\nmethods = [\"random\", \"gf\"]\nbenchmark = \"constrained\"\nseeds = 10\nconstrained_steps = 10\nhistogram_every = 5\n".into(),
        },
        Step {
            subcommand: "optimize",
            out: "om",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nmethods = [\"random\"]\nbenchmark = \"multiobjective\"\nseeds = 10\nconstrained_steps = 5\n".into(),
        },
        Step {
            subcommand: "manipulate",
            out: "m",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nsurrogates = [\"s/surrogate.ckpt\"]\nmethods = [\"random\", \"chemspace\", \"gf\", \"unsup\"]\nproperties = [\"plogp\"]\nn = 20\n[flows]\nunsup = \"fu/flows.ckpt\"\n[knobs]\nboundary_size = 200\nselection_size = 10\n".into(),
        },
        Step {
            subcommand: "wgf-sim",
            out: "w",
            config: "dim = 1\nn = 300\nt_end = 0.05\ngrid_cells = 200\n[flow]\nkind = \"fokker_planck\"\nstiffness = 1.0\n".into(),
        },
        Step {
            subcommand: "analyze-latent",
            out: "a",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nn = 50\n[analysis]\ntrajectories = 3\nsteps = 5\n".into(),
        },
        Step {
            subcommand: "pearson-select",
            out: "p",
            config: "corpus = \"c\"\nvae = \"v/vae.ckpt\"\nflows = \"fu/flows.ckpt\"\nn = 10\n".into(),
        },
    ]
}

/// Writes each step's config under `cwd/configs` and runs the whole recipe.
pub fn run_recipe(cwd: &Path) -> Result<(), String> {
    let cfg_dir = cwd.join("configs");
    fs::create_dir_all(&cfg_dir).map_err(|e| e.to_string())?;
    for (i, s) in recipe().iter().enumerate() {
        let name = format!("configs/{i:02}_{}.toml", s.out);
        let body = format!("out = \"{}\"\n{}", s.out, s.config);
        fs::write(cwd.join(&name), body).map_err(|e| e.to_string())?;
        let out = run(cwd, &[s.subcommand, "--config", &name]);
        if !out.status.success() {
            return Err(format!("{} ({}): {}", s.subcommand, s.out, String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

/// Every file below `dir`, keyed by its relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
