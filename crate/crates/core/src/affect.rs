//! Valence lexicons, annotated corpora, vocabulary, and token/valence
//! alignment.
//!
//! Valence lives on a [1, 9] scale: 1 most negative, 5 neutral, 9 most
//! positive. The value 0 is reserved as the absent/masked sentinel for words
//! that do not appear in the lexicon (and for unlabeled sentences).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Lower bound of the valence scale.
pub const VALENCE_MIN: f64 = 1.0;
/// Upper bound of the valence scale.
pub const VALENCE_MAX: f64 = 9.0;

#[derive(Debug, Error)]
pub enum AffectError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: valence {value} outside [{VALENCE_MIN}, {VALENCE_MAX}]")]
    ValenceOutOfRange {
        path: String,
        line: usize,
        value: f64,
    },
    #[error("lexicon {path} contains no entries")]
    EmptyLexicon { path: String },
    #[error("valence {0} is neither the sentinel 0 nor inside [{VALENCE_MIN}, {VALENCE_MAX}]")]
    InvalidValence(f64),
    #[error("sentence text is empty")]
    EmptyText,
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary file {path} is malformed: {message}")]
    BadVocabulary { path: String, message: String },
}

/// Real-valued valence on [1, 9]; 0 is the absent/masked sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValenceRating(f64);

impl ValenceRating {
    /// The "not in lexicon / unlabeled" sentinel.
    pub const SENTINEL: ValenceRating = ValenceRating(0.0);

    /// Accepts the sentinel 0 or a value in [1, 9].
    pub fn new(value: f64) -> Result<Self, AffectError> {
        if value == 0.0 || (VALENCE_MIN..=VALENCE_MAX).contains(&value) {
            Ok(ValenceRating(value))
        } else {
            Err(AffectError::InvalidValence(value))
        }
    }

    /// Accepts only a genuine rating in [1, 9].
    pub fn rated(value: f64) -> Result<Self, AffectError> {
        if (VALENCE_MIN..=VALENCE_MAX).contains(&value) {
            Ok(ValenceRating(value))
        } else {
            Err(AffectError::InvalidValence(value))
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.0 == 0.0
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl fmt::Display for ValenceRating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Word → valence map ingested from an E-ANEW-style TSV file.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: HashMap<String, ValenceRating>,
    source_name: String,
}

impl Lexicon {
    pub fn empty(source_name: &str) -> Self {
        Lexicon {
            entries: HashMap::new(),
            source_name: source_name.to_string(),
        }
    }

    pub fn insert(&mut self, word: &str, rating: ValenceRating) -> Result<(), AffectError> {
        if rating.is_sentinel() {
            return Err(AffectError::InvalidValence(0.0));
        }
        self.entries.insert(word.to_lowercase(), rating);
        Ok(())
    }

    /// Valence of `word`, or the sentinel 0 when absent. Never an error.
    pub fn get(&self, word: &str) -> ValenceRating {
        self.entries
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(ValenceRating::SENTINEL)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }
}

/// Load a lexicon from `word<TAB>valence[<TAB>...]` lines. Lines starting
/// with `#` are comments; extra columns (arousal, dominance, ...) are parsed
/// positionally and discarded; duplicate words keep the last occurrence.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon, AffectError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| AffectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    let mut lexicon = Lexicon::empty(&path_str);
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let word = fields.next().unwrap_or("").trim();
        let valence_field = fields.next().unwrap_or("").trim();
        if word.is_empty() || valence_field.is_empty() {
            return Err(AffectError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: "expected `word<TAB>valence`".to_string(),
            });
        }
        let value: f64 = valence_field.parse().map_err(|_| AffectError::Parse {
            path: path_str.clone(),
            line: line_no,
            message: format!("non-numeric valence {valence_field:?}"),
        })?;
        let rating = ValenceRating::rated(value).map_err(|_| AffectError::ValenceOutOfRange {
            path: path_str.clone(),
            line: line_no,
            value,
        })?;
        let key = word.to_lowercase();
        if lexicon.entries.contains_key(&key) {
            eprintln!("warning: {path_str}:{line_no}: duplicate lexicon entry {key:?}, last occurrence wins");
        }
        lexicon.entries.insert(key, rating);
    }
    if lexicon.is_empty() {
        return Err(AffectError::EmptyLexicon { path: path_str });
    }
    Ok(lexicon)
}

/// A raw sentence plus its sentence-level valence (sentinel 0 if unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    text: String,
    sentence_valence: ValenceRating,
}

impl AnnotatedSentence {
    pub fn new(text: impl Into<String>, sentence_valence: ValenceRating) -> Result<Self, AffectError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(AffectError::EmptyText);
        }
        Ok(AnnotatedSentence {
            text,
            sentence_valence,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn sentence_valence(&self) -> ValenceRating {
        self.sentence_valence
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    text: String,
    valence: Option<f64>,
}

/// Load a JSONL corpus: one `{"text": ..., "valence": ...}` object per line.
/// A missing `valence` becomes the sentinel 0; order is preserved.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>, AffectError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| AffectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine =
            serde_json::from_str(line).map_err(|e| AffectError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: format!("invalid JSON: {e}"),
            })?;
        let valence = match parsed.valence {
            None => ValenceRating::SENTINEL,
            Some(v) => ValenceRating::rated(v).map_err(|_| AffectError::ValenceOutOfRange {
                path: path_str.clone(),
                line: line_no,
                value: v,
            })?,
        };
        let sentence =
            AnnotatedSentence::new(parsed.text, valence).map_err(|_| AffectError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: "empty text".to_string(),
            })?;
        out.push(sentence);
    }
    Ok(out)
}

/// Reserved vocabulary slots; these occupy ids 0..3 in every vocabulary.
pub const CLS_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[CLS]", "[MASK]", "[PAD]", "[UNK]"];

/// Token → dense id map with fixed reserved slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// FNV-1a hash of the canonical serialization; stored in checkpoints to
    /// detect vocabulary/corpus mismatches.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (id, token) in self.id_to_token.iter().enumerate() {
            for b in token.bytes().chain([b'\t']).chain(id.to_string().bytes()).chain([b'\n']) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Write `token<TAB>id` lines, reserved tokens first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AffectError> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| AffectError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AffectError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| AffectError::Io {
            path: path_str.clone(),
            source,
        })?;
        let mut id_to_token = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (token, id_str) = line.split_once('\t').ok_or_else(|| {
                AffectError::BadVocabulary {
                    path: path_str.clone(),
                    message: format!("line {}: expected `token<TAB>id`", idx + 1),
                }
            })?;
            let id: usize = id_str.parse().map_err(|_| AffectError::BadVocabulary {
                path: path_str.clone(),
                message: format!("line {}: non-numeric id {id_str:?}", idx + 1),
            })?;
            if id != id_to_token.len() {
                return Err(AffectError::BadVocabulary {
                    path: path_str.clone(),
                    message: format!("line {}: ids must be dense and ascending", idx + 1),
                });
            }
            id_to_token.push(token.to_string());
        }
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*reserved) {
                return Err(AffectError::BadVocabulary {
                    path: path_str.clone(),
                    message: format!("reserved token {reserved} missing from id {i}"),
                });
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

/// Lowercase word split on whitespace and punctuation. Returns each word with
/// its byte span in the original text.
pub fn split_words(text: &str) -> Vec<(String, (usize, usize))> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (pos, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = pos;
            }
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            words.push((std::mem::take(&mut current), (start, pos)));
        }
    }
    if !current.is_empty() {
        words.push((current, (start, text.len())));
    }
    words
}

/// Splits one word into subtokens. The identity splitter models word-level
/// tokenization; a subword splitter can be plugged in without changing the
/// valence-sharing rule.
pub trait WordSplitter {
    fn split(&self, word: &str) -> Vec<String>;
}

/// One word, one token.
pub struct IdentitySplitter;

impl WordSplitter for IdentitySplitter {
    fn split(&self, word: &str) -> Vec<String> {
        vec![word.to_string()]
    }
}

/// A sentence mapped to ids with 1:1 aligned valences.
///
/// Position 0 is always `[CLS]` and carries the sentence valence. Tokens of
/// words absent from the lexicon carry the sentinel 0; all subtokens of one
/// lexicon word share that word's valence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSentence {
    pub token_ids: Vec<u32>,
    pub token_valences: Vec<ValenceRating>,
    /// Byte offsets into the original text; (0, 0) for `[CLS]`.
    pub surface_spans: Vec<(usize, usize)>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the leading [CLS] is always present
    }
}

/// Tokenize with the default word-level splitter.
pub fn tokenize(
    sentence: &AnnotatedSentence,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    max_len: usize,
) -> TokenizedSentence {
    tokenize_with_splitter(sentence, vocab, lexicon, max_len, &IdentitySplitter)
}

/// Tokenize with an explicit subtoken splitter. All subtokens of a word share
/// the word's lexicon valence.
pub fn tokenize_with_splitter(
    sentence: &AnnotatedSentence,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    max_len: usize,
    splitter: &dyn WordSplitter,
) -> TokenizedSentence {
    assert!(max_len >= 2, "max_len must be at least 2 (CLS + one token)");
    let mut token_ids = vec![CLS_ID];
    let mut token_valences = vec![sentence.sentence_valence()];
    let mut surface_spans = vec![(0usize, 0usize)];
    'words: for (word, span) in split_words(sentence.text()) {
        let word_valence = lexicon.get(&word);
        for subtoken in splitter.split(&word) {
            if token_ids.len() >= max_len {
                break 'words;
            }
            token_ids.push(vocab.id_or_unk(&subtoken));
            token_valences.push(word_valence);
            surface_spans.push(span);
        }
    }
    TokenizedSentence {
        token_ids,
        token_valences,
        surface_spans,
    }
}

/// Build a vocabulary from a corpus: reserved ids first, then tokens sorted
/// by descending frequency and lexicographic order, dropping tokens seen
/// fewer than `min_count` times.
pub fn build_vocabulary(
    corpus: &[AnnotatedSentence],
    min_count: usize,
) -> Result<Vocabulary, AffectError> {
    build_vocabulary_with_splitter(corpus, min_count, &IdentitySplitter)
}

pub fn build_vocabulary_with_splitter(
    corpus: &[AnnotatedSentence],
    min_count: usize,
    splitter: &dyn WordSplitter,
) -> Result<Vocabulary, AffectError> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in corpus {
        for (word, _) in split_words(sentence.text()) {
            for subtoken in splitter.split(&word) {
                *counts.entry(subtoken).or_insert(0) += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(AffectError::EmptyCorpus);
    }
    let mut tokens: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    tokens.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocabulary::with_reserved();
    for (token, _) in tokens {
        let id = vocab.id_to_token.len() as u32;
        vocab.token_to_id.insert(token.clone(), id);
        vocab.id_to_token.push(token);
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn temp_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_lexicon_single_entry() {
        let f = temp_file("good\t7.89\n");
        let lex = load_lexicon(f.path()).unwrap();
        assert_eq!(lex.get("good").value(), 7.89);
        assert_eq!(lex.len(), 1);
    }

    #[test]
    fn load_lexicon_comments_only_is_empty_error() {
        let f = temp_file("# header\n# another comment\n");
        assert!(matches!(
            load_lexicon(f.path()),
            Err(AffectError::EmptyLexicon { .. })
        ));
    }

    #[test]
    fn load_lexicon_last_occurrence_wins() {
        let f = temp_file("bad\t3.24\nbad\t3.00\n");
        let lex = load_lexicon(f.path()).unwrap();
        assert_eq!(lex.get("bad").value(), 3.00);
        assert_eq!(lex.len(), 1);
    }

    #[test]
    fn load_lexicon_extra_columns_ignored() {
        let f = temp_file("calm\t6.89\t2.13\t5.0\n");
        let lex = load_lexicon(f.path()).unwrap();
        assert_eq!(lex.get("calm").value(), 6.89);
    }

    #[test]
    fn load_lexicon_reports_line_numbers() {
        let f = temp_file("good\t7.89\nbroken\tnot-a-number\n");
        match load_lexicon(f.path()) {
            Err(AffectError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = temp_file("good\t7.89\nhuge\t12.0\n");
        match load_lexicon(f.path()) {
            Err(AffectError::ValenceOutOfRange { line, value, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(value, 12.0);
            }
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn load_lexicon_crlf_and_case() {
        let f = temp_file("Good\t7.89\r\n");
        let lex = load_lexicon(f.path()).unwrap();
        assert_eq!(lex.get("GOOD").value(), 7.89);
    }

    #[test]
    fn load_corpus_basic() {
        let f = temp_file(
            "{\"text\":\"fine day\",\"valence\":7.0}\n{\"text\":\"plain line\"}\n",
        );
        let corpus = load_corpus(f.path()).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].text(), "fine day");
        assert_eq!(corpus[0].sentence_valence().value(), 7.0);
        assert!(corpus[1].sentence_valence().is_sentinel());
    }

    #[test]
    fn load_corpus_rejects_out_of_range_valence() {
        let f = temp_file("{\"text\":\"x\",\"valence\":12}\n");
        assert!(matches!(
            load_corpus(f.path()),
            Err(AffectError::ValenceOutOfRange { line: 1, .. })
        ));
    }

    #[test]
    fn load_corpus_reports_bad_json_line() {
        let f = temp_file("{\"text\":\"ok\"}\nnot json\n");
        match load_corpus(f.path()) {
            Err(AffectError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn lexicon_with(entries: &[(&str, f64)]) -> Lexicon {
        let mut lex = Lexicon::empty("test");
        for (w, v) in entries {
            lex.insert(w, ValenceRating::rated(*v).unwrap()).unwrap();
        }
        lex
    }

    fn sentence(text: &str, valence: f64) -> AnnotatedSentence {
        let v = if valence == 0.0 {
            ValenceRating::SENTINEL
        } else {
            ValenceRating::rated(valence).unwrap()
        };
        AnnotatedSentence::new(text, v).unwrap()
    }

    #[test]
    fn tokenize_aligns_lexicon_valences() {
        let corpus = vec![sentence("The battery life is long", 0.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let lex = lexicon_with(&[("long", 5.26)]);
        let toks = tokenize(&corpus[0], &vocab, &lex, 128);
        assert_eq!(toks.token_ids[0], CLS_ID);
        assert_eq!(toks.len(), 6);
        let rated: Vec<f64> = toks.token_valences.iter().map(|v| v.value()).collect();
        assert_eq!(rated, vec![0.0, 0.0, 0.0, 0.0, 0.0, 5.26]);
    }

    #[test]
    fn tokenize_empty_text_is_cls_only() {
        let corpus = vec![sentence("word", 0.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let lex = lexicon_with(&[]);
        // Whitespace-only text trims to empty; constructor rejects it, so the
        // degenerate case is a sentence whose words are all punctuation.
        let s = sentence("?!", 6.5);
        let toks = tokenize(&s, &vocab, &lex, 128);
        assert_eq!(toks.token_ids, vec![CLS_ID]);
        assert_eq!(toks.token_valences[0].value(), 6.5);
    }

    #[test]
    fn tokenize_shares_valence_across_case_variants() {
        let corpus = vec![sentence("Good good GOOD", 0.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let lex = lexicon_with(&[("good", 7.89)]);
        let toks = tokenize(&corpus[0], &vocab, &lex, 128);
        assert_eq!(toks.len(), 4);
        for v in &toks.token_valences[1..] {
            assert_eq!(v.value(), 7.89);
        }
        // Same surface word, same id.
        assert_eq!(toks.token_ids[1], toks.token_ids[2]);
        assert_eq!(toks.token_ids[2], toks.token_ids[3]);
    }

    #[test]
    fn tokenize_truncates_to_max_len() {
        let corpus = vec![sentence("a b c d e f", 0.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let lex = lexicon_with(&[]);
        let toks = tokenize(&corpus[0], &vocab, &lex, 4);
        assert_eq!(toks.len(), 4);
        assert_eq!(toks.token_ids[0], CLS_ID);
    }

    #[test]
    fn tokenize_oov_keeps_lexicon_valence() {
        let corpus = vec![sentence("known words only", 0.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let lex = lexicon_with(&[("mystery", 8.0)]);
        let s = sentence("mystery known", 0.0);
        let toks = tokenize(&s, &vocab, &lex, 128);
        assert_eq!(toks.token_ids[1], UNK_ID);
        assert_eq!(toks.token_valences[1].value(), 8.0);
    }

    struct HalvingSplitter;
    impl WordSplitter for HalvingSplitter {
        fn split(&self, word: &str) -> Vec<String> {
            if word.len() < 2 {
                return vec![word.to_string()];
            }
            let mid = word.len() / 2;
            vec![word[..mid].to_string(), word[mid..].to_string()]
        }
    }

    #[test]
    fn subtokens_share_word_valence() {
        let corpus = vec![sentence("wonderful day", 0.0)];
        let vocab = build_vocabulary_with_splitter(&corpus, 1, &HalvingSplitter).unwrap();
        let lex = lexicon_with(&[("wonderful", 8.17)]);
        let toks =
            tokenize_with_splitter(&corpus[0], &vocab, &lex, 128, &HalvingSplitter);
        // [CLS] wond erful d ay
        assert_eq!(toks.len(), 5);
        assert_eq!(toks.token_valences[1].value(), 8.17);
        assert_eq!(toks.token_valences[2].value(), 8.17);
        assert!(toks.token_valences[3].is_sentinel());
        assert_eq!(toks.surface_spans[1], toks.surface_spans[2]);
    }

    #[test]
    fn build_vocabulary_orders_by_frequency_then_lexicographic() {
        let corpus = vec![sentence("a b", 0.0), sentence("a", 0.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(vocab.get("a"), Some(4));
        assert_eq!(vocab.get("b"), Some(5));
        let vocab = build_vocabulary(&corpus, 2).unwrap();
        assert_eq!(vocab.get("a"), Some(4));
        assert_eq!(vocab.get("b"), None);
        assert!(matches!(
            build_vocabulary(&[], 1),
            Err(AffectError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocabulary_save_load_round_trip() {
        let corpus = vec![sentence("the quick brown fox the quick the", 0.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        assert_eq!(vocab.hash(), loaded.hash());
    }

    #[test]
    fn valence_count_matches_lexicon_membership() {
        let lex = lexicon_with(&[("fine", 7.0), ("gloomy", 2.8)]);
        let corpus = vec![sentence("a fine day and a gloomy night", 6.0)];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let toks = tokenize(&corpus[0], &vocab, &lex, 128);
        let rated = toks.token_valences[1..]
            .iter()
            .filter(|v| !v.is_sentinel())
            .count();
        let in_lexicon = split_words(corpus[0].text())
            .iter()
            .filter(|(w, _)| lex.contains(w))
            .count();
        assert_eq!(rated, in_lexicon);
    }
}
