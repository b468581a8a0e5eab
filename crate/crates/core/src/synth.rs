//! Synthetic lexicon and corpus generation.
//!
//! Words get valences drawn uniformly on [1, 9]. Each sentence draws an
//! anchor valence uniformly on [1, 9] and samples words with probability
//! concentrated near that anchor, then carries the mean of its word
//! valences as its sentence valence. Sentence valences therefore stay
//! spread over the whole scale instead of piling up at the midpoint, while
//! remaining exactly the mean of the member words' ratings. Deterministic
//! per seed.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 10 sentences, got {0}")]
    TooFewSentences(usize),
    #[error("need at least {need} vocabulary words, got {got}")]
    TooFewWords { need: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub min_words: usize,
    pub max_words: usize,
    /// Width of the word-sampling kernel around each sentence's anchor
    /// valence; smaller values give purer-valence sentences.
    pub anchor_sigma: f64,
}

impl SynthConfig {
    pub fn new(n_sentences: usize, vocab_size: usize, seed: u64) -> Self {
        SynthConfig {
            n_sentences,
            vocab_size,
            seed,
            min_words: 4,
            max_words: 12,
            anchor_sigma: 0.6,
        }
    }
}

/// Generated data, both structured and in the on-disk formats.
#[derive(Debug, Clone)]
pub struct SynthData {
    /// `(word, valence)` in word-id order.
    pub lexicon: Vec<(String, f64)>,
    /// `(text, sentence_valence)` where the sentence valence is the mean of
    /// the member words' valences.
    pub sentences: Vec<(String, f64)>,
}

impl SynthData {
    pub fn lexicon_tsv(&self) -> String {
        let mut out = String::new();
        for (word, valence) in &self.lexicon {
            writeln!(out, "{word}\t{valence}").expect("string write");
        }
        out
    }

    pub fn corpus_jsonl(&self) -> String {
        let mut out = String::new();
        for (text, valence) in &self.sentences {
            let line = serde_json::json!({ "text": text, "valence": valence });
            writeln!(out, "{line}").expect("string write");
        }
        out
    }

    /// Write `lexicon.tsv` and `corpus.jsonl` under `dir`, returning their
    /// paths.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(String, String), SynthError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let lex_path = dir.join("lexicon.tsv");
        let corpus_path = dir.join("corpus.jsonl");
        fs::write(&lex_path, self.lexicon_tsv()).map_err(|source| SynthError::Io {
            path: lex_path.display().to_string(),
            source,
        })?;
        fs::write(&corpus_path, self.corpus_jsonl()).map_err(|source| SynthError::Io {
            path: corpus_path.display().to_string(),
            source,
        })?;
        Ok((
            lex_path.display().to_string(),
            corpus_path.display().to_string(),
        ))
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData, SynthError> {
    if cfg.n_sentences < 10 {
        return Err(SynthError::TooFewSentences(cfg.n_sentences));
    }
    if cfg.vocab_size < 2 {
        return Err(SynthError::TooFewWords {
            need: 2,
            got: cfg.vocab_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = (cfg.vocab_size as f64).log10().ceil().max(3.0) as usize;
    let lexicon: Vec<(String, f64)> = (0..cfg.vocab_size)
        .map(|i| {
            let word = format!("w{i:0width$}");
            let valence = rng.gen_range(1.0..=9.0);
            (word, valence)
        })
        .collect();
    let sentences: Vec<(String, f64)> = (0..cfg.n_sentences)
        .map(|_| {
            let len = rng.gen_range(cfg.min_words..=cfg.max_words);
            let anchor = rng.gen_range(1.0..=9.0);
            // Cumulative weights of a Gaussian kernel around the anchor.
            let mut cumulative = Vec::with_capacity(cfg.vocab_size);
            let mut total = 0.0;
            for (_, v) in &lexicon {
                let z = (v - anchor) / cfg.anchor_sigma;
                total += (-0.5 * z * z).exp();
                cumulative.push(total);
            }
            let mut words = Vec::with_capacity(len);
            let mut valence_sum = 0.0;
            for _ in 0..len {
                let u = rng.gen_range(0.0..total);
                let idx = cumulative.partition_point(|&c| c <= u).min(cfg.vocab_size - 1);
                let (word, valence) = &lexicon[idx];
                words.push(word.as_str());
                valence_sum += valence;
            }
            (words.join(" "), valence_sum / len as f64)
        })
        .collect();
    Ok(SynthData {
        lexicon,
        sentences,
    })
}
