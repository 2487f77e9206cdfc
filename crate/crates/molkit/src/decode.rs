//! Total decoding of token strings into molecular graphs.
//!
//! Rules, applied left to right until the first `PAD`:
//!
//! * `=` / `#` set the order of the next bond (last prefix wins).
//! * An atom bonds to the current attachment atom. The order is clipped to the
//!   remaining valence of both ends; an atom whose bond clips to 0 is dropped.
//!   The very first atom starts the graph unbonded.
//! * `Branch{k}` decodes the next `k` tokens (cut at the end of the enclosing
//!   span) as a side chain of the current atom, then resumes from that atom.
//!   Before any atom exists it is a no-op.
//! * `Ring{k}` bonds the current atom to the atom created `k + 1` steps
//!   earlier. Missing targets, existing bonds and exhausted valences make it a
//!   no-op.

use crate::graph::{Atom, Bond, MolGraph};
use crate::token::{Token, TokenSequence};

pub fn decode(seq: &TokenSequence) -> MolGraph {
    let mut d = Decoder::default();
    d.run(active(seq));
    MolGraph::new(d.atoms, d.bonds, d.branch_count)
}

/// Deterministic rendering of the structure a token string decodes to.
///
/// Only tokens that took effect appear: atoms (with their applied bond order),
/// non-empty branches in parentheses, and applied ring closures as `R{k}`.
/// Strings that differ only in ignored tokens render identically.
pub fn canonical_string(seq: &TokenSequence) -> String {
    let mut d = Decoder {
        trace: Some(String::new()),
        ..Decoder::default()
    };
    d.run(active(seq));
    d.trace.unwrap_or_default()
}

fn active(seq: &TokenSequence) -> &[Token] {
    let tokens = seq.tokens();
    let end = tokens.iter().position(|t| *t == Token::Pad).unwrap_or(tokens.len());
    &tokens[..end]
}

#[derive(Default)]
struct Decoder {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    used: Vec<u8>,
    branch_count: usize,
    trace: Option<String>,
}

impl Decoder {
    fn remaining(&self, i: usize) -> u8 {
        self.atoms[i].max_valence() - self.used[i]
    }

    fn has_bond(&self, a: usize, b: usize) -> bool {
        self.bonds
            .iter()
            .any(|x| (x.i == a && x.j == b) || (x.i == b && x.j == a))
    }

    fn push_trace(&mut self, s: &str) {
        if let Some(t) = self.trace.as_mut() {
            t.push_str(s);
        }
    }

    fn bond_symbol(order: u8) -> &'static str {
        match order {
            2 => "=",
            3 => "#",
            _ => "",
        }
    }

    fn run(&mut self, tokens: &[Token]) {
        self.span(tokens, None, 1);
    }

    /// Decodes `tokens` hanging off `attach`; returns whether any atom was added.
    fn span(&mut self, tokens: &[Token], mut attach: Option<usize>, mut pending: u8) -> bool {
        let mut added = false;
        let mut i = 0;
        while i < tokens.len() {
            match tokens[i] {
                Token::Pad => break,
                Token::Bond(order) => {
                    pending = order;
                    i += 1;
                }
                Token::Atom(element) => {
                    let atom = Atom { element };
                    match attach {
                        None => {
                            self.atoms.push(atom);
                            self.used.push(0);
                            self.push_trace(element.symbol());
                            attach = Some(self.atoms.len() - 1);
                            added = true;
                        }
                        Some(p) => {
                            let order = pending.min(self.remaining(p)).min(atom.max_valence());
                            if order > 0 {
                                let new = self.atoms.len();
                                self.atoms.push(atom);
                                self.used.push(order);
                                self.used[p] += order;
                                self.bonds.push(Bond { i: p, j: new, order });
                                self.push_trace(Self::bond_symbol(order));
                                self.push_trace(element.symbol());
                                attach = Some(new);
                                added = true;
                            }
                        }
                    }
                    pending = 1;
                    i += 1;
                }
                Token::Branch(k) => {
                    let Some(root) = attach else {
                        i += 1;
                        continue;
                    };
                    let end = (i + 1 + k as usize).min(tokens.len());
                    let mark = self.trace.as_ref().map(|t| t.len());
                    self.push_trace("(");
                    if self.span(&tokens[i + 1..end], Some(root), pending) {
                        self.branch_count += 1;
                        added = true;
                        self.push_trace(")");
                    } else if let (Some(t), Some(m)) = (self.trace.as_mut(), mark) {
                        t.truncate(m);
                    }
                    pending = 1;
                    i = end;
                }
                Token::Ring(k) => {
                    if let Some(p) = attach {
                        if let Some(target) = p.checked_sub(k as usize + 1) {
                            let order = pending.min(self.remaining(p)).min(self.remaining(target));
                            if order > 0 && !self.has_bond(p, target) {
                                self.used[p] += order;
                                self.used[target] += order;
                                self.bonds.push(Bond { i: p, j: target, order });
                                self.push_trace(Self::bond_symbol(order));
                                self.push_trace(&format!("R{k}"));
                            }
                        }
                    }
                    pending = 1;
                    i += 1;
                }
            }
        }
        added
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Element::{self, *};
    use crate::token::ALPHABET_SIZE;
    use proptest::prelude::*;

    fn seq(tokens: &[Token]) -> TokenSequence {
        TokenSequence::padded(tokens.to_vec(), 24)
    }

    fn a(e: Element) -> Token {
        Token::Atom(e)
    }

    fn bond_list(g: &MolGraph) -> Vec<(usize, usize, u8)> {
        g.bonds().iter().map(|b| (b.i, b.j, b.order)).collect()
    }

    #[test]
    fn pad_only_is_empty() {
        let g = decode(&seq(&[]));
        assert_eq!(g.atom_count(), 0);
        assert!(g.bonds().is_empty());
        assert_eq!(canonical_string(&seq(&[])), "");
    }

    #[test]
    fn linear_chain() {
        let g = decode(&seq(&[a(C), a(C), a(C)]));
        assert_eq!(g.atom_count(), 3);
        assert_eq!(bond_list(&g), vec![(0, 1, 1), (1, 2, 1)]);
    }

    #[test]
    fn pad_terminates() {
        let g = decode(&seq(&[a(C), Token::Pad, a(C), a(C)]));
        assert_eq!(g.atom_count(), 1);
    }

    // Hand traces of the state machine on short strings.
    #[test]
    fn hand_trace_double_bond_then_saturated_ring() {
        // C, =O: O uses both valences. Ring1 from O targets atom -1: ignored.
        let g = decode(&seq(&[a(C), Token::Bond(2), a(O), Token::Ring(1)]));
        assert_eq!(bond_list(&g), vec![(0, 1, 2)]);
        assert_eq!(g.longest_cycle(), 0);
    }

    #[test]
    fn hand_trace_cyclohexane() {
        let toks = [a(C), a(C), a(C), a(C), a(C), a(C), Token::Ring(4)];
        let g = decode(&seq(&toks));
        assert_eq!(g.bonds().len(), 6);
        assert_eq!(*g.bonds().last().unwrap(), Bond { i: 5, j: 0, order: 1 });
        assert_eq!(g.longest_cycle(), 6);
        assert_eq!(canonical_string(&seq(&toks)), "CCCCCCR4");
    }

    #[test]
    fn hand_trace_clipping() {
        // F #C: F has one valence, so the triple bond clips to single.
        let g = decode(&seq(&[a(F), Token::Bond(3), a(C), a(O)]));
        assert_eq!(bond_list(&g), vec![(0, 1, 1), (1, 2, 1)]);
        // F F C: the second F saturates, so C is dropped.
        let g = decode(&seq(&[a(F), a(F), a(C)]));
        assert_eq!(bond_list(&g), vec![(0, 1, 1)]);
        assert_eq!(g.atoms()[1].element, F);
        assert_eq!(g.atom_count(), 2);
        // N#N then =O: second N has 0 left after the triple bond, O dropped.
        let g = decode(&seq(&[a(N), Token::Bond(3), a(N), Token::Bond(2), a(O)]));
        assert_eq!(bond_list(&g), vec![(0, 1, 3)]);
        assert_eq!(g.atom_count(), 2);
    }

    #[test]
    fn hand_trace_branch() {
        // C Branch2 [O C] N : O-C hang off atom 0, N bonds back to atom 0.
        let toks = [a(C), Token::Branch(2), a(O), a(C), a(N)];
        let g = decode(&seq(&toks));
        assert_eq!(bond_list(&g), vec![(0, 1, 1), (1, 2, 1), (0, 3, 1)]);
        assert_eq!(g.branch_count(), 1);
        assert_eq!(canonical_string(&seq(&toks)), "C(OC)N");
        // branch running past the end is truncated
        let g = decode(&seq(&[a(C), Token::Branch(4), a(O)]));
        assert_eq!(bond_list(&g), vec![(0, 1, 1)]);
        assert_eq!(g.branch_count(), 1);
        // branch before any atom is ignored
        let g = decode(&seq(&[Token::Branch(1), a(C), a(C)]));
        assert_eq!(g.atom_count(), 2);
        assert_eq!(g.branch_count(), 0);
        // empty branch is not counted and not rendered
        let toks = [a(C), Token::Branch(1), Token::Ring(1), a(C)];
        assert_eq!(decode(&seq(&toks)).branch_count(), 0);
        assert_eq!(canonical_string(&seq(&toks)), "CC");
    }

    #[test]
    fn hand_trace_ring_bounds() {
        // Ring1 on a 3-chain closes a triangle.
        let g = decode(&seq(&[a(C), a(C), a(C), Token::Ring(1)]));
        assert_eq!(g.longest_cycle(), 3);
        // Ring2 on a 3-chain references atom -1: ignored.
        let g = decode(&seq(&[a(C), a(C), a(C), Token::Ring(2)]));
        assert_eq!(g.longest_cycle(), 0);
        // repeated closure to an already bonded pair is ignored
        let g = decode(&seq(&[a(C), a(C), a(C), Token::Ring(1), Token::Ring(1)]));
        assert_eq!(g.bonds().len(), 3);
        // a =ring closure clipped by the target's valence
        let g = decode(&seq(&[a(O), a(C), a(C), Token::Bond(2), Token::Ring(1)]));
        assert_eq!(*g.bonds().last().unwrap(), Bond { i: 2, j: 0, order: 1 });
    }

    #[test]
    fn ignored_tokens_do_not_change_canonical_form() {
        let x = seq(&[a(C), a(C), Token::Ring(5), a(O)]);
        let y = seq(&[a(C), a(C), a(O)]);
        assert_eq!(canonical_string(&x), canonical_string(&y));
        assert_eq!(decode(&x), decode(&y));
    }

    fn any_sequence() -> impl Strategy<Value = TokenSequence> {
        prop::collection::vec(0..ALPHABET_SIZE, 24)
            .prop_map(|idx| TokenSequence::from_indices(&idx).unwrap())
    }

    proptest! {
        #[test]
        fn every_sequence_decodes_to_a_valid_graph(s in any_sequence()) {
            prop_assert!(decode(&s).is_valid());
        }
    }

    #[test]
    fn fuzz_decode_totality() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let idx: Vec<usize> = (0..24).map(|_| rng.random_range(0..ALPHABET_SIZE)).collect();
            let g = decode(&TokenSequence::from_indices(&idx).unwrap());
            assert!(g.is_valid(), "invalid graph from {idx:?}");
        }
    }
}
