use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::graph::Element;
use crate::MolError;

/// Number of distinct symbols: 5 atoms, 2 bond prefixes, 4 branch sizes,
/// 6 ring distances and the pad symbol.
pub const ALPHABET_SIZE: usize = 18;

/// Default padded sequence length.
pub const DEFAULT_SEQ_LEN: usize = 24;

/// One symbol of the reduced grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Atom(Element),
    /// Bond-order prefix, 2 (`=`) or 3 (`#`).
    Bond(u8),
    /// Opens a branch covering the next `k` tokens, `k` in 1..=4.
    Branch(u8),
    /// Closes a ring back to the atom `k + 1` creation steps earlier, `k` in 1..=6.
    Ring(u8),
    Pad,
}

impl Token {
    pub const ALL: [Token; ALPHABET_SIZE] = [
        Token::Atom(Element::C),
        Token::Atom(Element::N),
        Token::Atom(Element::O),
        Token::Atom(Element::S),
        Token::Atom(Element::F),
        Token::Bond(2),
        Token::Bond(3),
        Token::Branch(1),
        Token::Branch(2),
        Token::Branch(3),
        Token::Branch(4),
        Token::Ring(1),
        Token::Ring(2),
        Token::Ring(3),
        Token::Ring(4),
        Token::Ring(5),
        Token::Ring(6),
        Token::Pad,
    ];

    /// Position of the token in [`Token::ALL`]; used for one-hot encodings.
    pub fn index(self) -> usize {
        match self {
            Token::Atom(e) => e as usize,
            Token::Bond(o) => 5 + (o as usize - 2),
            Token::Branch(k) => 7 + (k as usize - 1),
            Token::Ring(k) => 11 + (k as usize - 1),
            Token::Pad => 17,
        }
    }

    pub fn from_index(i: usize) -> Result<Token, MolError> {
        Token::ALL.get(i).copied().ok_or(MolError::BadIndex(i))
    }

    pub fn symbol(self) -> &'static str {
        const SYMBOLS: [&str; ALPHABET_SIZE] = [
            "C", "N", "O", "S", "F", "=", "#", "Branch1", "Branch2", "Branch3", "Branch4", "Ring1",
            "Ring2", "Ring3", "Ring4", "Ring5", "Ring6", "PAD",
        ];
        SYMBOLS[self.index()]
    }

    pub fn from_symbol(s: &str) -> Result<Token, MolError> {
        Token::ALL
            .iter()
            .copied()
            .find(|t| t.symbol() == s)
            .ok_or_else(|| MolError::UnknownSymbol(s.to_string()))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Token::from_symbol(&s).map_err(serde::de::Error::custom)
    }
}

/// A fixed-length token string; positions past the molecule are [`Token::Pad`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    /// Pads (or truncates) `tokens` to exactly `len` symbols.
    pub fn padded(mut tokens: Vec<Token>, len: usize) -> Self {
        tokens.resize(len, Token::Pad);
        Self { tokens }
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self, MolError> {
        let tokens = indices
            .iter()
            .map(|&i| Token::from_index(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.index()).collect()
    }

    /// Row-major `len x ALPHABET_SIZE` one-hot matrix, flattened.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.tokens.len() * ALPHABET_SIZE];
        for (pos, t) in self.tokens.iter().enumerate() {
            out[pos * ALPHABET_SIZE + t.index()] = 1.0;
        }
        out
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in self.tokens.iter().take_while(|t| **t != Token::Pad) {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
            first = false;
        }
        Ok(())
    }
}
