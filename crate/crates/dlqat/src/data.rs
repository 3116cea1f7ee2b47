//! Byte-level corpora: loading, train/eval splitting, batch sampling, and a
//! deterministic synthetic text generator for self-contained runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A tokenized corpus. Tokenization is raw bytes, so every id is < 256 and
/// no text decoding ever happens.
#[derive(Debug, Clone)]
pub struct Corpus {
    ids: Vec<u8>,
    split_at: usize,
}

impl Corpus {
    /// Split raw bytes into train/eval at `floor(len * split_fraction)`.
    pub fn from_bytes(bytes: Vec<u8>, split_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        if !(0.0..=1.0).contains(&split_fraction) {
            return Err(Error::Data(format!(
                "split fraction must be in [0, 1], got {split_fraction}"
            )));
        }
        let split_at = (bytes.len() as f64 * split_fraction).floor() as usize;
        if split_at == 0 || split_at == bytes.len() {
            return Err(Error::Data(format!(
                "split {split_fraction} leaves an empty side for {} bytes",
                bytes.len()
            )));
        }
        Ok(Corpus { ids: bytes, split_at })
    }

    pub fn train(&self) -> &[u8] {
        &self.ids[..self.split_at]
    }

    pub fn eval(&self) -> &[u8] {
        &self.ids[self.split_at..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sample `batch_size` windows of `context + 1` token ids from the
    /// train split. Batch content is a pure function of the rng state.
    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
        context: usize,
    ) -> Result<Vec<Vec<u8>>> {
        let train = self.train();
        if train.len() < context + 1 {
            return Err(Error::Data(format!(
                "train split has {} tokens, need at least {}",
                train.len(),
                context + 1
            )));
        }
        let max_start = train.len() - (context + 1);
        Ok((0..batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=max_start);
                train[start..start + context + 1].to_vec()
            })
            .collect())
    }
}

/// Read a corpus from a raw bytes file.
pub fn load_corpus(path: &std::path::Path, split_fraction: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    Corpus::from_bytes(bytes, split_fraction)
}

const SYNTH_WORDS: [&str; 48] = [
    "the", "a", "of", "and", "to", "in", "is", "that", "it", "was", "for", "on", "with", "as",
    "are", "be", "at", "one", "have", "this", "from", "by", "hot", "word", "but", "what", "some",
    "we", "can", "out", "other", "were", "all", "there", "when", "up", "use", "your", "how",
    "said", "an", "each", "she", "which", "their", "time", "will", "way",
];

/// Deterministic English-like filler text: Zipf-weighted words, sentence
/// casing, punctuation, and line breaks. Good enough to give a byte-level
/// LM real statistics to learn without shipping a text file.
pub fn synth_corpus(seed: u64, min_len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f37_59df_4b8a_11c3);
    let mut out = Vec::with_capacity(min_len + 64);
    let mut sentence_start = true;
    let mut line_len = 0usize;
    while out.len() < min_len {
        // Zipf-ish: rank r picked with weight ~ 1/(r+1)
        let u: f64 = rng.gen();
        let rank = ((SYNTH_WORDS.len() as f64 + 1.0).powf(u) - 1.0) as usize;
        let word = SYNTH_WORDS[rank.min(SYNTH_WORDS.len() - 1)];
        let mut token = String::new();
        if sentence_start {
            let mut chars = word.chars();
            if let Some(c) = chars.next() {
                token.extend(c.to_uppercase());
                token.push_str(chars.as_str());
            }
            sentence_start = false;
        } else {
            token.push_str(word);
        }
        let punct: f64 = rng.gen();
        if punct < 0.08 {
            token.push('.');
            sentence_start = true;
        } else if punct < 0.12 {
            token.push(',');
        }
        out.extend_from_slice(token.as_bytes());
        line_len += token.len() + 1;
        if line_len > 72 {
            out.push(b'\n');
            line_len = 0;
        } else {
            out.push(b' ');
        }
    }
    out
}
