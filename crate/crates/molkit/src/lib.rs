//! Molecule toolkit for latent-space experiments.
//!
//! Molecules are written in a reduced, SELFIES-style token grammar where every
//! sequence over the alphabet decodes to a valence-legal graph. On top of the
//! grammar sit a handful of cheap, deterministic property oracles, hashed
//! circular fingerprints with Tanimoto similarity, and a seeded corpus
//! generator that also produces the normalization statistics the penalized
//! logP oracle needs.

mod corpus;
mod decode;
mod error;
mod fingerprint;
mod graph;
mod props;
mod token;

pub use corpus::{
    corpus_from_sequences, gen_corpus, norm_stats, read_corpus, write_corpus, Corpus, CorpusConfig,
    CorpusRecord, FRAGMENTS,
};
pub use decode::{canonical_string, decode};
pub use error::MolError;
pub use fingerprint::{environment_strings, fingerprint, tanimoto, Fingerprint, DEFAULT_FP_BITS};
pub use graph::{Atom, Bond, Element, MolGraph};
pub use props::{compute_property, ComponentStats, NormStats, PropertyKind, PropertyValues};
pub use token::{Token, TokenSequence, ALPHABET_SIZE, DEFAULT_SEQ_LEN};
