use crate::error::{Error, Result};

/// The twenty canonical amino acids in one-letter code.
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W', 'Y',
];

pub const PAD: usize = 0;
pub const PAD_CHAR: char = '-';
pub const UNK_CHAR: char = 'X';

/// Token vocabulary: PAD at 0, the amino acids at 1..=20, UNK last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::protein()
    }
}

impl Alphabet {
    pub fn protein() -> Self {
        let mut symbols = vec![PAD_CHAR];
        symbols.extend(AMINO_ACIDS);
        symbols.push(UNK_CHAR);
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk(&self) -> usize {
        self.symbols.len() - 1
    }

    /// Token index of a residue; PAD and UNK are not valid residues.
    pub fn index(&self, c: char) -> Option<usize> {
        let c = c.to_ascii_uppercase();
        AMINO_ACIDS.iter().position(|&a| a == c).map(|i| i + 1)
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    /// Residue tokens, i.e. every index except PAD and UNK.
    pub fn residue_tokens(&self) -> std::ops::RangeInclusive<usize> {
        1..=AMINO_ACIDS.len()
    }

    /// Tokenizes and right-pads to `max_len`. `row` is used in error messages.
    pub fn encode(&self, s: &str, max_len: usize, row: usize) -> Result<EncodedSequence> {
        let mut tokens = Vec::with_capacity(max_len);
        for c in s.chars() {
            let t = self.index(c).ok_or(Error::UnknownSymbol { row, symbol: c })?;
            tokens.push(t);
        }
        if tokens.is_empty() {
            return Err(Error::Data(format!("empty sequence at row {row}")));
        }
        if tokens.len() > max_len {
            return Err(Error::Data(format!("sequence at row {row} longer than max_len {max_len}")));
        }
        let length = tokens.len();
        tokens.resize(max_len, PAD);
        Ok(EncodedSequence { tokens, length })
    }

    /// Inverse of [`Alphabet::encode`], stripping PAD.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| self.symbol(t).unwrap_or(UNK_CHAR))
            .collect()
    }
}

/// Token indices right-padded with PAD to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedSequence {
    pub tokens: Vec<usize>,
    pub length: usize,
}

impl EncodedSequence {
    pub fn max_len(&self) -> usize {
        self.tokens.len()
    }

    /// `true` at non-PAD positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| i < self.length).collect()
    }
}
