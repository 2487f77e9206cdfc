//! Hashed circular fingerprints over atom environments of radius 0, 1 and 2.
//!
//! An environment string at radius 0 is the atom's element, degree and used
//! valence. At radius `r` it is the radius `r - 1` string of the atom followed
//! by the lexicographically sorted `bond order + neighbor string` descriptors
//! of its neighbors at radius `r - 1`. Each string is hashed with 64-bit
//! FNV-1a and xor-folded into the bit count.

use std::collections::BTreeSet;

use crate::graph::MolGraph;

pub const DEFAULT_FP_BITS: usize = 512;
const MAX_RADIUS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    bits: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn zeros(bits: usize) -> Self {
        Self {
            bits,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// XOR-folds all 64 hash bits into `log2(bits)` bits when `bits` is a power of
/// two, otherwise folds to 32 bits and reduces modulo `bits`.
fn fold(mut h: u64, bits: usize) -> usize {
    if bits.is_power_of_two() {
        let k = bits.trailing_zeros();
        if k == 0 {
            return 0;
        }
        let mask = (1u64 << k) - 1;
        let mut out = 0;
        while h != 0 {
            out ^= h & mask;
            h >>= k;
        }
        out as usize
    } else {
        ((h ^ (h >> 32)) & 0xffff_ffff) as usize % bits
    }
}

/// All distinct environment strings of radius 0..=2, tagged with their radius.
pub fn environment_strings(graph: &MolGraph) -> BTreeSet<String> {
    let n = graph.atom_count();
    let neighbors: Vec<Vec<(usize, u8)>> = (0..n).map(|i| graph.neighbors(i)).collect();
    let mut current: Vec<String> = (0..n)
        .map(|i| {
            format!(
                "{}{}v{}",
                graph.atoms()[i].element,
                neighbors[i].len(),
                graph.valence_used(i)
            )
        })
        .collect();
    let mut out = BTreeSet::new();
    for (r, _) in (0..=MAX_RADIUS).enumerate() {
        for s in &current {
            out.insert(format!("r{r}:{s}"));
        }
        if r == MAX_RADIUS {
            break;
        }
        current = (0..n)
            .map(|i| {
                let mut desc: Vec<String> = neighbors[i]
                    .iter()
                    .map(|&(j, order)| format!("{order}{}", current[j]))
                    .collect();
                desc.sort();
                format!("{}[{}]", current[i], desc.join(","))
            })
            .collect();
    }
    out
}

pub fn fingerprint(graph: &MolGraph, bits: usize) -> Fingerprint {
    let mut fp = Fingerprint::zeros(bits);
    for s in environment_strings(graph) {
        fp.set(fold(fnv1a(s.as_bytes()), bits));
    }
    fp
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets counting as identical.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> f64 {
    debug_assert_eq!(a.bits, b.bits);
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
