//! Seeded synthetic corpora and their normalization statistics.
//!
//! A molecule is a concatenation of fragments drawn from [`FRAGMENTS`]: the
//! fragment count is uniform in `min_fragments..=max_fragments`, each fragment
//! is drawn independently with its listed weight, fragments that would push
//! the string past `max_len` are skipped, and the rest is `PAD`. Fragments are
//! short motifs (chains, hetero atoms, branches, 3- to 8-membered rings), so
//! token positions are strongly correlated, as in real molecular strings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::decode;
use crate::graph::MolGraph;
use crate::props::{compute_property, ComponentStats, NormStats, PropertyKind, PropertyValues};
use crate::token::{Token, TokenSequence, DEFAULT_SEQ_LEN};
use crate::MolError;

/// Fragment library: space-separated token symbols and a sampling weight.
pub const FRAGMENTS: &[(&str, u32)] = &[
    ("C", 10),
    ("C C", 8),
    ("C C C", 6),
    ("N", 4),
    ("O", 4),
    ("S", 2),
    ("C O", 4),
    ("C N", 4),
    ("C S", 2),
    ("C = C", 3),
    ("C Branch1 C", 5),
    ("C Branch1 F", 3),
    ("C Branch2 = O", 4),
    ("N Branch1 C", 3),
    ("C Branch2 # N", 1),
    ("C Branch3 O C C", 2),
    ("C C C Ring1", 1),
    ("C C C C Ring2", 1),
    ("C C C C C Ring3", 2),
    ("C C C C C C Ring4", 4),
    ("C = C C = C C = C Ring4", 3),
    ("C C N C C C Ring4", 2),
    ("C C C C C C C Ring5", 2),
    ("C C C C C C C C Ring6", 2),
];

fn parse_fragment(text: &str) -> Vec<Token> {
    text.split_whitespace()
        .map(|s| Token::from_symbol(s).expect("fragment symbols are in the alphabet"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    pub seed: u64,
    pub max_len: usize,
    pub min_fragments: usize,
    pub max_fragments: usize,
}

impl CorpusConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            max_len: DEFAULT_SEQ_LEN,
            min_fragments: 2,
            max_fragments: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: TokenSequence,
    pub props: PropertyValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub stats: NormStats,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sequences(&self) -> impl Iterator<Item = &TokenSequence> {
        self.records.iter().map(|r| &r.tokens)
    }

    /// Range (max - min) of a property over the corpus.
    pub fn property_range(&self, kind: PropertyKind) -> f64 {
        let (lo, hi) = self.records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            let v = r.props.get(kind);
            (lo.min(v), hi.max(v))
        });
        if self.records.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }
}

struct Sampler {
    frags: Vec<Vec<Token>>,
    pick: WeightedIndex<u32>,
}

impl Sampler {
    fn new() -> Self {
        Self {
            frags: FRAGMENTS.iter().map(|(t, _)| parse_fragment(t)).collect(),
            pick: WeightedIndex::new(FRAGMENTS.iter().map(|(_, w)| *w)).expect("fragment weights"),
        }
    }

    fn sample(&self, rng: &mut impl Rng, cfg: &CorpusConfig) -> TokenSequence {
        let k = rng.random_range(cfg.min_fragments..=cfg.max_fragments.max(cfg.min_fragments));
        let mut tokens = Vec::with_capacity(cfg.max_len);
        for _ in 0..k {
            let f = &self.frags[self.pick.sample(rng)];
            if tokens.len() + f.len() <= cfg.max_len {
                tokens.extend_from_slice(f);
            }
        }
        TokenSequence::padded(tokens, cfg.max_len)
    }
}

fn component_stats(kind: PropertyKind, values: &[f64]) -> Result<ComponentStats, MolError> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(MolError::DegenerateCorpus(kind.name().to_string()));
    }
    Ok(ComponentStats { mean, std })
}

/// Mean and population standard deviation of each penalized-logP component.
pub fn norm_stats(graphs: &[MolGraph]) -> Result<NormStats, MolError> {
    if graphs.is_empty() {
        return Err(MolError::EmptyCorpus);
    }
    let column = |kind| {
        let v: Vec<f64> = graphs
            .iter()
            .map(|g| compute_property(kind, g, None).expect("stats-free property"))
            .collect();
        component_stats(kind, &v)
    };
    Ok(NormStats {
        logp_lite: column(PropertyKind::LogpLite)?,
        sa_lite: column(PropertyKind::SaLite)?,
        ring_penalty: column(PropertyKind::RingPenalty)?,
    })
}

/// Builds a corpus from existing sequences, deriving stats from them.
pub fn corpus_from_sequences(seqs: Vec<TokenSequence>) -> Result<Corpus, MolError> {
    let graphs: Vec<MolGraph> = seqs.iter().map(decode).collect();
    let stats = norm_stats(&graphs)?;
    let records = seqs
        .into_iter()
        .zip(&graphs)
        .map(|(tokens, g)| CorpusRecord {
            tokens,
            props: PropertyValues::compute(g, &stats),
        })
        .collect();
    Ok(Corpus { records, stats })
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus, MolError> {
    if cfg.n == 0 {
        return Err(MolError::EmptyCorpus);
    }
    let sampler = Sampler::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seqs = (0..cfg.n).map(|_| sampler.sample(&mut rng, cfg)).collect();
    corpus_from_sequences(seqs)
}

/// Writes the JSONL records and the stats sidecar.
pub fn write_corpus(corpus: &Corpus, jsonl: &Path, stats: &Path) -> Result<(), MolError> {
    let mut w = BufWriter::new(File::create(jsonl)?);
    for r in &corpus.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut s = BufWriter::new(File::create(stats)?);
    serde_json::to_writer_pretty(&mut s, &corpus.stats)?;
    s.write_all(b"\n")?;
    s.flush()?;
    Ok(())
}

/// Reads a corpus back. Symbols outside the alphabet are reported with their line.
pub fn read_corpus(jsonl: &Path, stats: &Path) -> Result<Corpus, MolError> {
    let stats: NormStats = serde_json::from_reader(BufReader::new(File::open(stats)?))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(jsonl)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| MolError::CorpusFormat {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(MolError::EmptyCorpus);
    }
    Ok(Corpus { records, stats })
}
