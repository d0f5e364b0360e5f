use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: usize = 3;

/// Output units: blank, end-of-sentence, unknown, then one letter per symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Vocab {
    /// `count` letters starting at `a`.
    pub fn letters(count: usize) -> Result<Self> {
        if !(1..=26).contains(&count) {
            return Err(Error::Config(format!("symbol count must be in 1..=26, got {count}")));
        }
        Ok(Vocab {
            symbols: (0..count as u8).map(|i| (b'a' + i) as char).collect(),
        })
    }

    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        let mut sorted = symbols.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if symbols.is_empty() || sorted.len() != symbols.len() {
            return Err(Error::Invalid("vocabulary symbols must be unique and non-empty".into()));
        }
        Ok(Vocab { symbols })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    /// Total output units including reserved tokens.
    pub fn size(&self) -> usize {
        self.symbols.len() + RESERVED
    }

    /// Token index of the `i`-th symbol.
    pub fn symbol_token(&self, i: usize) -> usize {
        RESERVED + i
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.symbols.iter().position(|s| *s == c).map_or(UNK, |i| RESERVED + i))
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| match t {
                BLANK => '_',
                EOS => '$',
                UNK => '?',
                t => self.symbols.get(t - RESERVED).copied().unwrap_or('?'),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let v = Vocab::letters(3).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.encode("abcz"), vec![3, 4, 5, UNK]);
        assert_eq!(v.decode(&[3, 5, EOS]), "ac$");
        assert!(Vocab::letters(0).is_err());
        assert!(Vocab::from_symbols(vec!['a', 'a']).is_err());
    }
}
