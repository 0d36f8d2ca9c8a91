//! Handcrafted linguistic features and bag-of-n-gram vectorizers.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?://|\bwww\.)\S*").unwrap())
}

fn term_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+").unwrap())
}

fn collapse_punct_runs(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let mut j = i + 1;
        while j < chars.len() && chars[j] == c {
            j += 1;
        }
        if c.is_ascii_punctuation() && j - i >= 3 {
            out.push(c);
        } else {
            out.extend(&chars[i..j]);
        }
        i = j;
    }
    out
}

/// Lowercases, drops control characters, collapses runs of three or more of
/// the same ASCII punctuation mark to one, removes URLs, then collapses
/// whitespace runs to a single space and trims. Idempotent.
pub fn clean_text(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter_map(|c| match c {
            c if c.is_control() && c.is_whitespace() => Some(' '),
            c if c.is_control() => None,
            c => Some(c),
        })
        .collect();
    let collapsed = collapse_punct_runs(&lowered);
    let no_urls = url_re().replace_all(&collapsed, " ");
    no_urls.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized spelling form of a whitespace-delimited word: lowercased with
/// every non-alphanumeric character removed.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Word set for spelling checks. Entries are stored in [`normalize_word`] form.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    words: HashSet<String>,
}

impl Dictionary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Dictionary {
            words: words
                .into_iter()
                .map(|w| normalize_word(w.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// One word per line; blank lines ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_words(raw.lines().map(str::trim)))
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.words.contains(normalized)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Path of the word list shipped with this crate.
pub fn bundled_dictionary_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/words.txt")
}

/// Number of word-length bins: lengths 1 through 14, then 15 and longer.
pub const WORD_LENGTH_BINS: usize = 15;

/// Width of [`HandcraftedFeatures::to_vec`].
pub const HANDCRAFTED_WIDTH: usize = 8 + WORD_LENGTH_BINS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedFeatures {
    pub paragraph_count: usize,
    pub mean_paragraph_words: f64,
    pub max_paragraph_words: usize,
    pub spelling_error_count: usize,
    pub sentence_count: usize,
    pub mean_sentence_words: f64,
    pub max_sentence_words: usize,
    pub word_count: usize,
    /// Fraction of words whose length falls in each bin.
    pub word_length_distribution: [f64; WORD_LENGTH_BINS],
}

impl HandcraftedFeatures {
    pub fn names() -> Vec<String> {
        let mut names: Vec<String> = [
            "paragraph_count",
            "mean_paragraph_words",
            "max_paragraph_words",
            "spelling_error_count",
            "sentence_count",
            "mean_sentence_words",
            "max_sentence_words",
            "word_count",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for b in 1..WORD_LENGTH_BINS {
            names.push(format!("word_len_{b}"));
        }
        names.push(format!("word_len_{WORD_LENGTH_BINS}_plus"));
        names
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.paragraph_count as f64,
            self.mean_paragraph_words,
            self.max_paragraph_words as f64,
            self.spelling_error_count as f64,
            self.sentence_count as f64,
            self.mean_sentence_words,
            self.max_sentence_words as f64,
            self.word_count as f64,
        ];
        v.extend_from_slice(&self.word_length_distribution);
        v
    }
}

/// Paragraphs are separated by lines that are empty or whitespace only.
pub fn split_paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push(&text[s..end]);
            }
        } else {
            if start.is_none() {
                start = Some(offset);
            }
            end = offset + line.len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push(&text[s..end]);
    }
    out
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or end of text.
/// Segments without words are dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut it = text.char_indices().peekable();
    while let Some((i, c)) = it.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = match it.peek() {
                None => true,
                Some(&(_, n)) => n.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                out.push(&text[start..end]);
                start = end;
            }
        }
    }
    out.push(&text[start..]);
    out.retain(|s| s.split_whitespace().next().is_some());
    out.into_iter().map(str::trim).collect()
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

fn mean_max(lengths: &[usize]) -> (f64, usize) {
    if lengths.is_empty() {
        return (0.0, 0);
    }
    let sum: usize = lengths.iter().sum();
    (
        sum as f64 / lengths.len() as f64,
        *lengths.iter().max().unwrap(),
    )
}

pub fn extract_handcrafted(text: &str, dictionary: &Dictionary) -> HandcraftedFeatures {
    let paragraphs: Vec<usize> = split_paragraphs(text).into_iter().map(word_count).collect();
    let sentences: Vec<usize> = split_sentences(text).into_iter().map(word_count).collect();
    let (mean_p, max_p) = mean_max(&paragraphs);
    let (mean_s, max_s) = mean_max(&sentences);

    let mut words = 0usize;
    let mut misspelled = 0usize;
    let mut hist = [0usize; WORD_LENGTH_BINS];
    for raw in text.split_whitespace() {
        words += 1;
        let w = normalize_word(raw);
        if !w.is_empty() && w.chars().all(char::is_alphabetic) && !dictionary.contains(&w) {
            misspelled += 1;
        }
        let len = match w.chars().count() {
            0 => raw.chars().count(),
            n => n,
        };
        hist[len.clamp(1, WORD_LENGTH_BINS) - 1] += 1;
    }
    let mut dist = [0.0; WORD_LENGTH_BINS];
    if words > 0 {
        for (d, h) in dist.iter_mut().zip(hist) {
            *d = h as f64 / words as f64;
        }
    }

    HandcraftedFeatures {
        paragraph_count: paragraphs.len(),
        mean_paragraph_words: mean_p,
        max_paragraph_words: max_p,
        spelling_error_count: misspelled,
        sentence_count: sentences.len(),
        mean_sentence_words: mean_s,
        max_sentence_words: max_s,
        word_count: words,
        word_length_distribution: dist,
    }
}

pub fn handcrafted_matrix(texts: &[&str], dictionary: &Dictionary) -> Array2<f64> {
    let mut m = Array2::zeros((texts.len(), HANDCRAFTED_WIDTH));
    for (mut row, t) in m.rows_mut().into_iter().zip(texts) {
        row.assign(&Array1::from(extract_handcrafted(t, dictionary).to_vec()));
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorizerMode {
    Tfidf,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorizerConfig {
    pub ngram_range: (usize, usize),
    /// Minimum number of documents a term must occur in.
    pub min_df: usize,
    /// Keep only the most document-frequent terms (ties by term order).
    pub max_features: Option<usize>,
}

impl Default for VectorizerConfig {
    fn default() -> Self {
        VectorizerConfig {
            ngram_range: (1, 1),
            min_df: 1,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorizerModel {
    pub mode: VectorizerMode,
    pub config: VectorizerConfig,
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Option<Vec<f64>>,
}

/// Lowercased `\w+` runs joined into n-grams with single spaces.
pub fn analyze(text: &str, ngram_range: (usize, usize)) -> Vec<String> {
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = term_re().find_iter(&lowered).map(|m| m.as_str()).collect();
    let (lo, hi) = ngram_range;
    let mut out = Vec::new();
    for n in lo..=hi {
        if n == 0 || n > tokens.len() {
            continue;
        }
        out.extend(tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}

pub fn fit_vectorizer(
    corpus: &[&str],
    mode: VectorizerMode,
    config: &VectorizerConfig,
) -> Result<VectorizerModel> {
    if corpus.is_empty() {
        return Err(Error::Precondition("cannot fit a vectorizer on an empty corpus".into()));
    }
    let (lo, hi) = config.ngram_range;
    if lo == 0 || lo > hi {
        return Err(Error::Precondition(format!("invalid ngram_range ({lo}, {hi})")));
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        let terms: BTreeSet<String> = analyze(doc, config.ngram_range).into_iter().collect();
        for t in terms {
            *df.entry(t).or_default() += 1;
        }
    }
    df.retain(|_, d| *d >= config.min_df.max(1));
    if let Some(k) = config.max_features {
        if df.len() > k {
            let mut ranked: Vec<(&String, &usize)> = df.iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
            let keep: BTreeSet<String> = ranked.into_iter().take(k).map(|(t, _)| t.clone()).collect();
            df.retain(|t, _| keep.contains(t));
        }
    }
    if df.is_empty() {
        return Err(Error::Validation("vocabulary is empty after filtering".into()));
    }
    let n = corpus.len() as f64;
    let idf = match mode {
        VectorizerMode::Tfidf => Some(
            df.values()
                .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
                .collect(),
        ),
        VectorizerMode::Count => None,
    };
    let vocabulary = df.into_keys().enumerate().map(|(i, t)| (t, i)).collect();
    Ok(VectorizerModel {
        mode,
        config: config.clone(),
        vocabulary,
        idf,
    })
}

impl VectorizerModel {
    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    /// Sparse row as `(column, value)` pairs in ascending column order.
    pub fn transform(&self, text: &str) -> Vec<(usize, f64)> {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for term in analyze(text, self.config.ngram_range) {
            if let Some(&j) = self.vocabulary.get(&term) {
                *counts.entry(j).or_default() += 1.0;
            }
        }
        let mut row: Vec<(usize, f64)> = counts.into_iter().collect();
        if let Some(idf) = &self.idf {
            for (j, v) in row.iter_mut() {
                *v *= idf[*j];
            }
            let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (_, v) in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        row
    }

    pub fn transform_dense(&self, texts: &[&str]) -> Array2<f64> {
        let mut m = Array2::zeros((texts.len(), self.len()));
        for (i, t) in texts.iter().enumerate() {
            for (j, v) in self.transform(t) {
                m[[i, j]] = v;
            }
        }
        m
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: VectorizerModel = serde_json::from_slice(&raw)?;
        if m.idf.is_some() != (m.mode == VectorizerMode::Tfidf) {
            return Err(Error::Integrity(format!(
                "{}: idf must be present exactly in tfidf mode",
                path.display()
            )));
        }
        Ok(m)
    }
}

/// Column-wise z-scoring with statistics from the fitting matrix only.
/// Constant columns get unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut scale = Vec::with_capacity(x.ncols());
        for (j, col) in x.columns().into_iter().enumerate() {
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            scale.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
        }
        Standardizer {
            mean: mean.to_vec(),
            scale,
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: x.ncols(),
            });
        }
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        Ok(out)
    }
}
