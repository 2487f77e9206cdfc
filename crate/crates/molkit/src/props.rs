//! Desk-scale property oracles.
//!
//! These are fixed surrogate formulas over the reduced grammar, not chemistry:
//!
//! * `logp_lite`: per-atom contributions (C +0.2, N -0.3, O -0.4, S +0.1,
//!   F 0.0) plus 0.1 per double bond.
//! * `sa_lite`: `clamp(1 + 0.5 * branches + sum_rings max(0, size - 6)
//!   + 0.05 * atoms, 1, 10)` over the rings of a minimum cycle basis.
//! * `ring_penalty`: `max(0, longest_cycle - 6)`.
//! * `plogp`: `z(logp_lite) - z(sa_lite) - z(ring_penalty)` with corpus
//!   z-scores.
//! * `qed_lite`: `exp(-(atoms - 12)^2 / 50) * exp(-(logp_lite - 1)^2 / 2)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{Element, MolGraph};
use crate::MolError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    LogpLite,
    SaLite,
    RingPenalty,
    Plogp,
    QedLite,
}

impl PropertyKind {
    pub const ALL: [PropertyKind; 5] = [
        PropertyKind::LogpLite,
        PropertyKind::SaLite,
        PropertyKind::RingPenalty,
        PropertyKind::Plogp,
        PropertyKind::QedLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PropertyKind::LogpLite => "logp_lite",
            PropertyKind::SaLite => "sa_lite",
            PropertyKind::RingPenalty => "ring_penalty",
            PropertyKind::Plogp => "plogp",
            PropertyKind::QedLite => "qed_lite",
        }
    }
}

impl fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PropertyKind {
    type Err = MolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PropertyKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| MolError::UnknownSymbol(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub mean: f64,
    pub std: f64,
}

impl ComponentStats {
    pub fn z(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Corpus normalization for the penalized logP components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub logp_lite: ComponentStats,
    pub sa_lite: ComponentStats,
    pub ring_penalty: ComponentStats,
}

fn atom_logp(e: Element) -> f64 {
    match e {
        Element::C => 0.2,
        Element::N => -0.3,
        Element::O => -0.4,
        Element::S => 0.1,
        Element::F => 0.0,
    }
}

fn logp_lite(g: &MolGraph) -> f64 {
    g.atoms().iter().map(|a| atom_logp(a.element)).sum::<f64>() + 0.1 * g.double_bond_count() as f64
}

fn sa_lite(g: &MolGraph) -> f64 {
    let big_rings: f64 = g
        .ring_sizes()
        .iter()
        .map(|&s| s.saturating_sub(6) as f64)
        .sum();
    (1.0 + 0.5 * g.branch_count() as f64 + big_rings + 0.05 * g.atom_count() as f64).clamp(1.0, 10.0)
}

fn ring_penalty(g: &MolGraph) -> f64 {
    g.longest_cycle().saturating_sub(6) as f64
}

fn qed_lite(g: &MolGraph) -> f64 {
    let atoms = g.atom_count() as f64;
    let lp = logp_lite(g);
    (-(atoms - 12.0).powi(2) / 50.0).exp() * (-(lp - 1.0).powi(2) / 2.0).exp()
}

fn plogp(g: &MolGraph, s: &NormStats) -> f64 {
    s.logp_lite.z(logp_lite(g)) - s.sa_lite.z(sa_lite(g)) - s.ring_penalty.z(ring_penalty(g))
}

pub fn compute_property(
    kind: PropertyKind,
    graph: &MolGraph,
    stats: Option<&NormStats>,
) -> Result<f64, MolError> {
    Ok(match kind {
        PropertyKind::LogpLite => logp_lite(graph),
        PropertyKind::SaLite => sa_lite(graph),
        PropertyKind::RingPenalty => ring_penalty(graph),
        PropertyKind::QedLite => qed_lite(graph),
        PropertyKind::Plogp => plogp(graph, stats.ok_or(MolError::MissingStats)?),
    })
}

/// All oracle values of one molecule; the layout of a corpus `props` record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyValues {
    pub logp_lite: f64,
    pub sa_lite: f64,
    pub ring_penalty: f64,
    pub plogp: f64,
    pub qed_lite: f64,
}

impl PropertyValues {
    pub fn compute(graph: &MolGraph, stats: &NormStats) -> Self {
        Self {
            logp_lite: logp_lite(graph),
            sa_lite: sa_lite(graph),
            ring_penalty: ring_penalty(graph),
            plogp: plogp(graph, stats),
            qed_lite: qed_lite(graph),
        }
    }

    pub fn get(&self, kind: PropertyKind) -> f64 {
        match kind {
            PropertyKind::LogpLite => self.logp_lite,
            PropertyKind::SaLite => self.sa_lite,
            PropertyKind::RingPenalty => self.ring_penalty,
            PropertyKind::Plogp => self.plogp,
            PropertyKind::QedLite => self.qed_lite,
        }
    }
}
