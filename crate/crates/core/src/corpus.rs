//! Byte-level tokenization, corpus splits and a small synthetic language.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB: usize = 258;

/// Smallest corpus `split` accepts: every split gets at least one token.
pub const MIN_CORPUS_TOKENS: usize = 100;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Lossy inverse of [`encode`]; special tokens are dropped.
pub fn decode(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Corpus {
    /// Contiguous 98/1/1 split.
    pub fn split(tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() < MIN_CORPUS_TOKENS {
            return Err(Error::CorpusTooSmall {
                have: tokens.len(),
                need: MIN_CORPUS_TOKENS,
            });
        }
        let n = tokens.len();
        let held = (n / 100).max(1);
        let train_end = n - 2 * held;
        Ok(Self {
            train: tokens[..train_end].to_vec(),
            val: tokens[train_end..train_end + held].to_vec(),
            test: tokens[train_end + held..].to_vec(),
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::split(encode(text))
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

const SUBJECTS: &[&str] = &[
    "the cat",
    "a dog",
    "my friend",
    "the old man",
    "a small bird",
    "the teacher",
    "our team",
];
const VERBS: &[&str] = &["sees", "likes", "finds", "follows", "builds", "paints", "carries"];
const OBJECTS: &[&str] = &[
    "the ball",
    "a red box",
    "the river",
    "a green tree",
    "the house",
    "a long road",
    "the moon",
];
const TAILS: &[&str] = &["", " today", " at night", " in the park", " again", " with care"];

/// Sentences from a tiny grammar, one per line, roughly `bytes` long.
pub fn synthetic_text(seed: u64, bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 64);
    while out.len() < bytes {
        let s = SUBJECTS.choose(&mut rng).expect("nonempty");
        let v = VERBS.choose(&mut rng).expect("nonempty");
        let o = OBJECTS.choose(&mut rng).expect("nonempty");
        let t = TAILS.choose(&mut rng).expect("nonempty");
        out.push_str(s);
        out.push(' ');
        out.push_str(v);
        out.push(' ');
        out.push_str(o);
        out.push_str(t);
        out.push_str(if rng.gen_bool(0.2) { "!\n" } else { ".\n" });
    }
    out
}

/// Perplexity of an add-one unigram model fit on `train`.
pub fn unigram_ppl(train: &[usize], eval: &[usize]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut counts = vec![1.0f64; VOCAB];
    for &t in train {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = eval.iter().map(|&t| -(counts[t] / total).ln()).sum::<f64>() / eval.len() as f64;
    Ok(nll.exp())
}

/// Random windows of `len` tokens.
pub fn sample_windows<'a>(tokens: &'a [usize], len: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<&'a [usize]>> {
    if tokens.len() < len {
        return Err(Error::CorpusTooSmall {
            have: tokens.len(),
            need: len,
        });
    }
    Ok((0..count)
        .map(|_| {
            let s = rng.gen_range(0..=tokens.len() - len);
            &tokens[s..s + len]
        })
        .collect())
}

/// Evenly spaced prompts of `len` tokens taken from `tokens`.
pub fn prompts_from(tokens: &[usize], len: usize, count: usize) -> Vec<Vec<usize>> {
    if tokens.len() < len || count == 0 || len == 0 {
        return Vec::new();
    }
    let span = tokens.len() - len;
    (0..count)
        .map(|i| {
            let s = if count == 1 { 0 } else { i * span / (count - 1) };
            tokens[s..s + len].to_vec()
        })
        .collect()
}
