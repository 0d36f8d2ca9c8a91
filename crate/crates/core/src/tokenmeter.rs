//! Token and word counting.
//!
//! Token counts come from byte-pair encoding under a ranked merge table in
//! the published `.tiktoken` layout (`<base64 bytes> <rank>` per line). Text
//! is first split with the encoding's pre-tokenization pattern, then each
//! piece is merged greedily, lowest rank first. Special tokens are never
//! recognized; they are counted as ordinary text.
//!
//! When no rank table is available, [`TokenMeter::Approximate`] estimates
//! `ceil(bytes / 4)` and every count it returns is flagged as approximate.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use base64::Engine;
use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-tokenization pattern of the `cl100k_base` encoding.
pub const CL100K_PATTERN: &str = r"'(?i:[sdmt]|ll|ve|re)|[^\r\n\p{L}\p{N}]?+\p{L}++|\p{N}{1,3}+| ?[^\s\p{L}\p{N}]++[\r\n]*+|\s++$|\s*[\r\n]|\s+(?!\S)|\s";

const CL100K_SPECIAL: [(&str, u32); 5] = [
    ("<|endoftext|>", 100257),
    ("<|fim_prefix|>", 100258),
    ("<|fim_middle|>", 100259),
    ("<|fim_suffix|>", 100260),
    ("<|endofprompt|>", 100276),
];

/// Path of the rank table shipped with this crate.
pub fn bundled_rank_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/cl100k_base.tiktoken")
}

/// A loaded merge-rank table.
#[derive(Debug, Clone)]
pub struct TokenizerSpec {
    pub name: String,
    pub ranks: HashMap<Vec<u8>, u32>,
    pub special_tokens: HashMap<String, u32>,
}

impl TokenizerSpec {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// Parses a rank table. Rejects duplicate ranks, malformed lines and tables
/// that lack any of the 256 single-byte base tokens.
pub fn load_tokenizer(path: impl AsRef<Path>) -> Result<TokenizerSpec> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_rank_table(&raw, name)
}

pub fn parse_rank_table(raw: &str, name: String) -> Result<TokenizerSpec> {
    let engine = base64::engine::general_purpose::STANDARD;
    let mut ranks = HashMap::with_capacity(raw.len() / 12);
    let mut seen_ranks = HashMap::with_capacity(raw.len() / 12);
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Line {
            line: lineno,
            message,
        };
        let (token, rank) = line
            .split_once(' ')
            .ok_or_else(|| bad("expected `<base64> <rank>`".into()))?;
        let bytes = engine
            .decode(token)
            .map_err(|e| bad(format!("bad base64: {e}")))?;
        let rank: u32 = rank
            .parse()
            .map_err(|e| bad(format!("bad rank {rank:?}: {e}")))?;
        if let Some(prev) = seen_ranks.insert(rank, lineno) {
            return Err(bad(format!("rank {rank} already used on line {prev}")));
        }
        if ranks.insert(bytes, rank).is_some() {
            return Err(bad(format!("token {token} listed twice")));
        }
    }
    if ranks.is_empty() {
        return Err(Error::Validation("rank table has no base bytes".into()));
    }
    if let Some(b) = (0..=255u8).find(|b| !ranks.contains_key([*b].as_slice())) {
        return Err(Error::Validation(format!(
            "rank table is missing base byte 0x{b:02x}"
        )));
    }
    let special_tokens = if name == "cl100k_base" {
        CL100K_SPECIAL
            .iter()
            .map(|&(s, id)| (s.to_string(), id))
            .collect()
    } else {
        HashMap::new()
    };
    Ok(TokenizerSpec {
        name,
        ranks,
        special_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub value: usize,
    /// Set when the count came from the byte-length estimate.
    pub approximate: bool,
}

/// A rank table plus its compiled pre-tokenizer.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    spec: TokenizerSpec,
    pattern: Regex,
}

impl Tokenizer {
    pub fn new(spec: TokenizerSpec) -> Result<Self> {
        Self::with_pattern(spec, CL100K_PATTERN)
    }

    pub fn with_pattern(spec: TokenizerSpec, pattern: &str) -> Result<Self> {
        let pattern = Regex::new(pattern)
            .map_err(|e| Error::Validation(format!("bad pre-tokenization pattern: {e}")))?;
        Ok(Tokenizer { spec, pattern })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_tokenizer(path)?)
    }

    pub fn spec(&self) -> &TokenizerSpec {
        &self.spec
    }

    pub fn count(&self, text: &str) -> usize {
        self.pieces(text)
            .map(|piece| {
                let bytes = piece.as_bytes();
                if self.spec.ranks.contains_key(bytes) {
                    1
                } else {
                    merge_boundaries(&self.spec.ranks, bytes).len() - 1
                }
            })
            .sum()
    }

    /// Byte ranges of every token in `text`, in order.
    pub fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        for m in self.pattern.find_iter(text) {
            let m = m.expect("pre-tokenization pattern hit backtrack limit");
            let bytes = m.as_str().as_bytes();
            if self.spec.ranks.contains_key(bytes) {
                spans.push(m.start()..m.end());
                continue;
            }
            let bounds = merge_boundaries(&self.spec.ranks, bytes);
            spans.extend(
                bounds
                    .windows(2)
                    .map(|w| m.start() + w[0]..m.start() + w[1]),
            );
        }
        spans
    }

    fn pieces<'t>(&'t self, text: &'t str) -> impl Iterator<Item = &'t str> + 't {
        self.pattern.find_iter(text).map(|m| {
            m.expect("pre-tokenization pattern hit backtrack limit")
                .as_str()
        })
    }
}

/// Greedy lowest-rank-first merging over one pre-tokenized piece. Returns
/// the token boundaries (byte offsets, including 0 and `piece.len()`).
fn merge_boundaries(ranks: &HashMap<Vec<u8>, u32>, piece: &[u8]) -> Vec<usize> {
    // parts[i] = (start offset, rank of merging parts i and i+1)
    let rank_of = |parts: &[(usize, u32)], i: usize| -> u32 {
        if i + 3 < parts.len() {
            ranks
                .get(&piece[parts[i].0..parts[i + 3].0])
                .copied()
                .unwrap_or(u32::MAX)
        } else {
            u32::MAX
        }
    };

    let mut parts: Vec<(usize, u32)> = Vec::with_capacity(piece.len() + 1);
    for i in 0..piece.len().saturating_sub(1) {
        let r = ranks.get(&piece[i..i + 2]).copied().unwrap_or(u32::MAX);
        parts.push((i, r));
    }
    parts.push((piece.len().saturating_sub(1), u32::MAX));
    parts.push((piece.len(), u32::MAX));

    loop {
        let mut best = (u32::MAX, 0usize);
        for (i, &(_, r)) in parts[..parts.len() - 1].iter().enumerate() {
            if r < best.0 {
                best = (r, i);
            }
        }
        if best.0 == u32::MAX {
            break;
        }
        let i = best.1;
        parts[i].1 = rank_of(&parts, i);
        if i > 0 {
            parts[i - 1].1 = rank_of(&parts, i - 1);
        }
        parts.remove(i + 1);
    }
    parts.into_iter().map(|(start, _)| start).collect()
}

/// Exact BPE counting when a rank table is loaded, a flagged estimate
/// otherwise.
#[derive(Debug, Clone)]
pub enum TokenMeter {
    Exact(Tokenizer),
    Approximate,
}

impl TokenMeter {
    /// Loads the rank table at `path`; falls back to the estimate (with a
    /// warning) if the file does not exist. Any other load failure is an error.
    pub fn from_rank_file(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) if p.exists() => Ok(TokenMeter::Exact(Tokenizer::load(p)?)),
            Some(p) => {
                log::warn!(
                    "rank table {} not found; token counts are approximate (ceil(bytes/4))",
                    p.display()
                );
                Ok(TokenMeter::Approximate)
            }
            None => {
                log::warn!("no rank table configured; token counts are approximate");
                Ok(TokenMeter::Approximate)
            }
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, TokenMeter::Exact(_))
    }

    pub fn count_tokens(&self, text: &str) -> TokenCount {
        match self {
            TokenMeter::Exact(t) => TokenCount {
                value: t.count(text),
                approximate: false,
            },
            TokenMeter::Approximate => TokenCount {
                value: text.len().div_ceil(4),
                approximate: true,
            },
        }
    }

    /// Longest prefix of `text`, ending on a token boundary and a char
    /// boundary, whose own token count is at most `budget`.
    pub fn truncate(&self, text: &str, budget: usize) -> String {
        if self.count_tokens(text).value <= budget {
            return text.to_string();
        }
        let ends: Vec<usize> = match self {
            TokenMeter::Exact(t) => t.token_spans(text).iter().map(|s| s.end).collect(),
            TokenMeter::Approximate => (1..=text.len().div_ceil(4))
                .map(|i| (i * 4).min(text.len()))
                .collect(),
        };
        let mut k = budget.min(ends.len());
        while k > 0 {
            let mut end = ends[k - 1];
            while !text.is_char_boundary(end) {
                end -= 1;
            }
            let candidate = &text[..end];
            if self.count_tokens(candidate).value <= budget {
                return candidate.to_string();
            }
            k -= 1;
        }
        String::new()
    }
}

/// Number of maximal runs of non-whitespace characters.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_table() -> String {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut s = String::new();
        for b in 0..=255u8 {
            s.push_str(&format!("{} {}\n", engine.encode([b]), b));
        }
        s.push_str(&format!("{} 256\n", engine.encode(b"ab")));
        s.push_str(&format!("{} 257\n", engine.encode(b"abc")));
        s
    }

    #[test]
    fn toy_merges() {
        let spec = parse_rank_table(&toy_table(), "toy".into()).unwrap();
        let t = Tokenizer::new(spec).unwrap();
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("a"), 1);
        assert_eq!(t.count("abc"), 1);
        assert_eq!(t.count("abd"), 2);
        assert_eq!(t.count("xyz"), 3);
        assert_eq!(t.token_spans("abd"), vec![0..2, 2..3]);
    }

    #[test]
    fn duplicate_rank_rejected() {
        let mut table = toy_table();
        table.push_str("eHl6 256\n");
        match parse_rank_table(&table, "toy".into()) {
            Err(Error::Line { line, .. }) => assert_eq!(line, 259),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_malformed_tables() {
        assert!(matches!(
            parse_rank_table("", "x".into()),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_rank_table("YQ== 0\nnot-a-line\n", "x".into()),
            Err(Error::Line { line: 2, .. })
        ));
        assert!(matches!(
            parse_rank_table("YQ== 0\n", "x".into()),
            Err(Error::Validation(_))
        ));
        assert!(load_tokenizer("/nonexistent/rank/file").is_err());
    }

    #[test]
    fn approximate_meter() {
        let m = TokenMeter::from_rank_file(Some(Path::new("/nonexistent"))).unwrap();
        assert!(!m.is_exact());
        let c = m.count_tokens("abcde");
        assert_eq!(c, TokenCount { value: 2, approximate: true });
        assert_eq!(m.count_tokens("").value, 0);
        assert_eq!(m.truncate("abcdefghij", 2), "abcdefgh");
    }

    #[test]
    fn words() {
        assert_eq!(count_words("hello world"), 2);
        assert_eq!(count_words("   "), 0);
        assert_eq!(count_words(""), 0);
        assert_eq!(count_words("  a\tb\n\nc  "), 3);
    }
}
