//! The set complement task: vocabularies, repetition-free sequences,
//! the perfect target distribution and uniform batch samplers.
//!
//! Tokens are stored 0-based (`0..v`). Every file format in the crate uses
//! the same 0-based ids.

use std::io::{BufRead, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocabulary(usize);

impl Vocabulary {
    pub const MAX: usize = Token::MAX as usize + 1;

    pub fn new(v: usize) -> Result<Self> {
        if v < 2 {
            return Err(Error::VocabularyTooSmall(v));
        }
        if v > Self::MAX {
            return Err(Error::Config(format!("vocabulary size {v} exceeds {}", Self::MAX)));
        }
        Ok(Vocabulary(v))
    }

    #[inline]
    pub fn size(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for Vocabulary {
    type Error = Error;

    fn try_from(v: usize) -> Result<Self> {
        Vocabulary::new(v)
    }
}

impl From<Vocabulary> for usize {
    fn from(v: Vocabulary) -> usize {
        v.0
    }
}

/// Checks that `tokens` is repetition-free and inside `0..v`.
pub fn validate_tokens(tokens: &[Token], v: usize) -> Result<()> {
    let mut seen = vec![false; v];
    for &t in tokens {
        let t = usize::from(t);
        if t >= v {
            return Err(Error::TokenOutOfRange { token: t, v });
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(Error::RepeatedToken(t));
        }
    }
    Ok(())
}

/// A repetition-free token sequence of length `1..=v`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    vocab: Vocabulary,
    tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, vocab: Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        validate_tokens(&tokens, vocab.size())?;
        Ok(TokenSequence { vocab, tokens })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
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

    /// A valid model input has at least one free token left.
    pub fn is_valid_input(&self) -> bool {
        self.tokens.len() < self.vocab.size()
    }

    pub fn prefix(&self, len: usize) -> Result<TokenSequence> {
        if len == 0 || len > self.len() {
            return Err(Error::Precondition(format!("prefix length {len} of a length {} sequence", self.len())));
        }
        Ok(TokenSequence { vocab: self.vocab, tokens: self.tokens[..len].to_vec() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
}

/// `mask[u]` is true iff `u` does not occur in `tokens`.
pub fn legal_mask_of(tokens: &[Token], v: usize) -> Vec<bool> {
    let mut mask = vec![true; v];
    for &t in tokens {
        mask[usize::from(t)] = false;
    }
    mask
}

pub fn legal_mask(t: &TokenSequence) -> Vec<bool> {
    legal_mask_of(&t.tokens, t.vocab.size())
}

/// Uniform distribution over the tokens absent from `t`.
pub fn perfect_distribution(t: &TokenSequence) -> Result<TargetDistribution> {
    let v = t.vocab.size();
    if !t.is_valid_input() {
        return Err(Error::DegenerateInput { len: t.len(), v });
    }
    let p = 1.0 / (v - t.len()) as f64;
    let probs = legal_mask(t).into_iter().map(|legal| if legal { p } else { 0.0 }).collect();
    Ok(TargetDistribution { probs })
}

/// Writes a uniformly random repetition-free sequence into `out`
/// (partial Fisher-Yates over `scratch`, which must hold `0..v` in any order).
fn fill_sequence<R: Rng + ?Sized>(scratch: &mut [Token], out: &mut [Token], rng: &mut R) {
    let v = scratch.len();
    for i in 0..out.len() {
        let j = rng.random_range(i..v);
        scratch.swap(i, j);
        out[i] = scratch[i];
    }
}

pub fn sample_sequence<R: Rng + ?Sized>(vocab: Vocabulary, s: usize, rng: &mut R) -> Result<TokenSequence> {
    let v = vocab.size();
    if s > v {
        return Err(Error::LengthExceedsVocabulary { len: s, v });
    }
    if s == 0 {
        return Err(Error::EmptySequence);
    }
    let mut scratch: Vec<Token> = (0..v as Token).collect();
    let mut tokens = vec![0; s];
    fill_sequence(&mut scratch, &mut tokens, rng);
    Ok(TokenSequence { vocab, tokens })
}

/// `n` sequences of equal length stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleBatch {
    vocab: Vocabulary,
    seq_len: usize,
    tokens: Vec<Token>,
}

impl SampleBatch {
    pub fn new(vocab: Vocabulary, seq_len: usize, tokens: Vec<Token>) -> Result<Self> {
        if seq_len == 0 || seq_len > vocab.size() {
            return Err(Error::LengthExceedsVocabulary { len: seq_len, v: vocab.size() });
        }
        if !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::Shape(format!("{} tokens do not split into rows of {seq_len}", tokens.len())));
        }
        for row in tokens.chunks_exact(seq_len) {
            validate_tokens(row, vocab.size())?;
        }
        Ok(SampleBatch { vocab, seq_len, tokens })
    }

    pub fn sample<R: Rng + ?Sized>(vocab: Vocabulary, seq_len: usize, n: usize, rng: &mut R) -> Result<Self> {
        let v = vocab.size();
        if seq_len > v {
            return Err(Error::LengthExceedsVocabulary { len: seq_len, v });
        }
        if seq_len == 0 {
            return Err(Error::EmptySequence);
        }
        let mut scratch: Vec<Token> = (0..v as Token).collect();
        let mut tokens = vec![0; n * seq_len];
        for row in tokens.chunks_exact_mut(seq_len) {
            fill_sequence(&mut scratch, row, rng);
        }
        Ok(SampleBatch { vocab, seq_len, tokens })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn row(&self, i: usize) -> &[Token] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[Token]> {
        self.tokens.chunks_exact(self.seq_len)
    }

    pub fn sequence(&self, i: usize) -> TokenSequence {
        TokenSequence { vocab: self.vocab, tokens: self.row(i).to_vec() }
    }

    /// Flat binary layout: `v`, `s`, `N` as little-endian u32, then `N*s`
    /// little-endian u16 token ids.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for x in [self.vocab.size(), self.seq_len, self.n()] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for &t in &self.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 4];
        let mut header = [0usize; 3];
        for h in &mut header {
            r.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word) as usize;
        }
        let [v, s, n] = header;
        let mut payload = vec![0u8; n * s * 2];
        r.read_exact(&mut payload)?;
        let tokens = payload.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        SampleBatch::new(Vocabulary::new(v)?, s, tokens)
    }

    /// One JSON array of token ids per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.rows() {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, vocab: Vocabulary) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut seq_len = None;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<Token> = serde_json::from_str(&line)?;
            match seq_len {
                None => seq_len = Some(row.len()),
                Some(s) if s != row.len() => {
                    return Err(Error::Shape(format!("row of length {} in a batch of length {s}", row.len())))
                }
                _ => {}
            }
            tokens.extend(row);
        }
        SampleBatch::new(vocab, seq_len.ok_or(Error::EmptySequence)?, tokens)
    }
}

/// Training rows have length `s + 1`; position `s'` (0-based) is the
/// target for the prefix of length `s'`.
pub fn make_training_batch<R: Rng + ?Sized>(vocab: Vocabulary, s: usize, n: usize, rng: &mut R) -> Result<SampleBatch> {
    if s == 0 {
        return Err(Error::EmptySequence);
    }
    if s + 1 > vocab.size() {
        return Err(Error::LengthExceedsVocabulary { len: s + 1, v: vocab.size() });
    }
    SampleBatch::sample(vocab, s + 1, n, rng)
}

pub fn make_validation_batch<R: Rng + ?Sized>(vocab: Vocabulary, n: usize, rng: &mut R) -> Result<SampleBatch> {
    SampleBatch::sample(vocab, vocab.size() - 1, n, rng)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use crate::rng::stream;

    use super::*;

    fn seq(tokens: &[Token], v: usize) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), Vocabulary::new(v).unwrap()).unwrap()
    }

    #[test]
    fn vocabulary_bounds() {
        assert!(Vocabulary::new(1).is_err());
        assert!(Vocabulary::new(2).is_ok());
    }

    #[test]
    fn sequence_validation() {
        let v = Vocabulary::new(4).unwrap();
        assert!(matches!(TokenSequence::new(vec![1, 1], v), Err(Error::RepeatedToken(1))));
        assert!(matches!(TokenSequence::new(vec![4], v), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(TokenSequence::new(vec![], v), Err(Error::EmptySequence)));
    }

    #[test]
    fn perfect_distribution_examples() {
        // 1-based (2,4) over v=5 is 0-based (1,3)
        let p = perfect_distribution(&seq(&[1, 3], 5)).unwrap().probs;
        let third = 1.0 / 3.0;
        assert_eq!(p, vec![third, 0.0, third, 0.0, third]);
        assert_eq!(perfect_distribution(&seq(&[0], 2)).unwrap().probs, vec![0.0, 1.0]);
        assert_eq!(perfect_distribution(&seq(&[2, 0], 3)).unwrap().probs, vec![0.0, 1.0, 0.0]);
        assert!(matches!(perfect_distribution(&seq(&[0, 1, 2], 3)), Err(Error::DegenerateInput { .. })));
    }

    #[test]
    fn legal_mask_examples() {
        assert_eq!(legal_mask(&seq(&[1], 4)), vec![true, false, true, true]);
        assert_eq!(legal_mask(&seq(&[0, 1, 2], 3)), vec![false; 3]);
    }

    #[test]
    fn full_length_sample_is_a_permutation() {
        let mut rng = stream(1, "test", &[]);
        let t = sample_sequence(Vocabulary::new(5).unwrap(), 5, &mut rng).unwrap();
        let mut sorted = t.tokens().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert!(sample_sequence(Vocabulary::new(5).unwrap(), 6, &mut rng).is_err());
    }

    // frequencies within 3 sigma of 1/3
    #[test]
    fn single_token_frequencies() {
        let mut rng = stream(2, "test", &[]);
        let v = Vocabulary::new(3).unwrap();
        let draws = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[usize::from(sample_sequence(v, 1, &mut rng).unwrap().tokens()[0])] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            assert!((c as f64 / draws as f64 - p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn ordered_pair_frequencies() {
        let mut rng = stream(3, "test", &[]);
        let v = Vocabulary::new(4).unwrap();
        let draws = 60_000;
        let mut counts: HashMap<Vec<Token>, usize> = HashMap::new();
        for _ in 0..draws {
            *counts.entry(sample_sequence(v, 2, &mut rng).unwrap().tokens().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 12);
        let p = 1.0 / 12.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts.values() {
            assert!((*c as f64 / draws as f64 - p).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn batch_shapes() {
        let mut rng = stream(4, "test", &[]);
        let b = make_training_batch(Vocabulary::new(3).unwrap(), 2, 4, &mut rng).unwrap();
        assert_eq!((b.n(), b.seq_len()), (4, 3));
        let b = make_training_batch(Vocabulary::new(8).unwrap(), 3, 128, &mut rng).unwrap();
        assert_eq!((b.n(), b.seq_len()), (128, 4));
        for row in b.rows() {
            validate_tokens(row, 8).unwrap();
        }
        assert!(make_training_batch(Vocabulary::new(3).unwrap(), 3, 1, &mut rng).is_err());

        let b = make_validation_batch(Vocabulary::new(33).unwrap(), 1024, &mut rng).unwrap();
        assert_eq!((b.n(), b.seq_len()), (1024, 32));
    }

    #[test]
    fn binary_and_jsonl_formats() {
        let mut rng = stream(5, "test", &[]);
        let b = make_training_batch(Vocabulary::new(6).unwrap(), 2, 5, &mut rng).unwrap();
        let mut bin = Vec::new();
        b.write_binary(&mut bin).unwrap();
        assert_eq!(&bin[..12], &[6, 0, 0, 0, 3, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(bin.len(), 12 + 5 * 3 * 2);
        assert_eq!(SampleBatch::read_binary(&bin[..]).unwrap(), b);

        let mut text = Vec::new();
        b.write_jsonl(&mut text).unwrap();
        assert_eq!(String::from_utf8_lossy(&text).lines().count(), 5);
        assert_eq!(SampleBatch::read_jsonl(&text[..], b.vocab()).unwrap(), b);
    }
}
