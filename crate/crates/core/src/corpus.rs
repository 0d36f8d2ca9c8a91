//! Essay corpus ingestion, stratified splitting and descriptive statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenmeter::{count_words, TokenMeter};
use crate::Score;

pub const MIN_SCORE: Score = 1;
pub const MAX_SCORE: Score = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub essay_id: String,
    #[serde(rename = "full_text")]
    pub text: String,
    pub score: Score,
}

impl EssayRecord {
    pub fn new(essay_id: impl Into<String>, text: impl Into<String>, score: Score) -> Self {
        EssayRecord {
            essay_id: essay_id.into(),
            text: text.into(),
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl CorpusFormat {
    /// Guesses the format from the file extension (`.jsonl`/`.json` vs anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Csv,
        }
    }
}

#[derive(Deserialize)]
struct RawRow {
    essay_id: String,
    full_text: String,
    score: serde_json::Value,
}

/// Loads essays in file order. Row numbers in errors count data rows from 1.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<EssayRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<(usize, Result<RawRow>)> = match format {
        CorpusFormat::Csv => {
            #[derive(Deserialize)]
            struct CsvRow {
                essay_id: String,
                full_text: String,
                score: String,
            }
            let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(file);
            rdr.deserialize::<CsvRow>()
                .enumerate()
                .map(|(i, r)| {
                    let row = r
                        .map(|r| RawRow {
                            essay_id: r.essay_id,
                            full_text: r.full_text,
                            score: serde_json::Value::String(r.score),
                        })
                        .map_err(|e| Error::Row {
                            row: i + 1,
                            message: e.to_string(),
                        });
                    (i + 1, row)
                })
                .collect()
        }
        CorpusFormat::Jsonl => {
            let mut out = Vec::new();
            let mut row = 0;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                row += 1;
                let parsed = serde_json::from_str::<RawRow>(&line).map_err(|e| Error::Row {
                    row,
                    message: e.to_string(),
                });
                out.push((row, parsed));
            }
            out
        }
    };

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(rows.len());
    for (row, raw) in rows {
        let raw = raw?;
        let score = parse_score(&raw.score).map_err(|message| Error::Row { row, message })?;
        if !(MIN_SCORE as i64..=MAX_SCORE as i64).contains(&score) {
            return Err(Error::Validation(format!(
                "row {row}: score {score} outside {MIN_SCORE}..={MAX_SCORE}"
            )));
        }
        if raw.full_text.trim().is_empty() {
            return Err(Error::Validation(format!("row {row}: empty essay text")));
        }
        if !seen.insert(raw.essay_id.clone()) {
            return Err(Error::Validation(format!(
                "row {row}: duplicate essay_id {:?}",
                raw.essay_id
            )));
        }
        records.push(EssayRecord {
            essay_id: raw.essay_id,
            text: raw.full_text,
            score: score as Score,
        });
    }
    Ok(records)
}

fn parse_score(v: &serde_json::Value) -> std::result::Result<i64, String> {
    match v {
        serde_json::Value::Number(n) => n
            .as_i64()
            .ok_or_else(|| format!("score {n} is not an integer")),
        serde_json::Value::String(s) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| format!("score {s:?} is not an integer")),
        other => Err(format!("score {other} is not an integer")),
    }
}

pub fn write_corpus_jsonl(path: impl AsRef<Path>, records: &[EssayRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    /// Rebuilds a split from `(essay_id, split)` pairs, keeping their order.
    pub fn from_assignments(assignments: &[(String, Split)], seed: u64) -> Self {
        let mut out = DatasetSplit {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            seed,
        };
        for (id, s) in assignments {
            match s {
                Split::Train => out.train.push(id.clone()),
                Split::Validation => out.validation.push(id.clone()),
                Split::Test => out.test.push(id.clone()),
            }
        }
        out
    }
}

/// Largest-remainder apportionment of `total` units by `weights` (which sum
/// to 1). Ties in the fractional part go to the earlier index.
pub(crate) fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Splits every class across the parts so that each class total and each
/// part total (the largest-remainder apportionment of the whole) are met,
/// and every cell is within one unit of `class_size * ratio`.
///
/// Cells start at the floor of their exact share; the leftover units are
/// placed by a depth-first search that tries cells with larger fractional
/// parts first.
pub(crate) fn allocate_by_class(class_sizes: &[usize], ratios: &[f64]) -> Vec<Vec<usize>> {
    let total: usize = class_sizes.iter().sum();
    let targets = largest_remainder(total, ratios);
    let parts = ratios.len();

    let mut alloc: Vec<Vec<usize>> = Vec::with_capacity(class_sizes.len());
    let mut cells = Vec::new();
    let mut row_left = Vec::with_capacity(class_sizes.len());
    for (c, &n) in class_sizes.iter().enumerate() {
        let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
        let row: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        row_left.push(n - row.iter().sum::<usize>());
        for (s, x) in exact.iter().enumerate() {
            cells.push((x - x.floor(), c, s));
        }
        alloc.push(row);
    }
    let mut col_left: Vec<usize> = (0..parts)
        .map(|s| targets[s] - alloc.iter().map(|r| r[s]).sum::<usize>())
        .collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let cells: Vec<(usize, usize)> = cells.into_iter().map(|(_, c, s)| (c, s)).collect();

    fn search(
        cells: &[(usize, usize)],
        at: usize,
        row_left: &mut [usize],
        col_left: &mut [usize],
        chosen: &mut Vec<(usize, usize)>,
    ) -> bool {
        if row_left.iter().all(|&r| r == 0) {
            return col_left.iter().all(|&c| c == 0);
        }
        if at == cells.len() {
            return false;
        }
        let (c, s) = cells[at];
        if row_left[c] > 0 && col_left[s] > 0 {
            row_left[c] -= 1;
            col_left[s] -= 1;
            chosen.push((c, s));
            if search(cells, at + 1, row_left, col_left, chosen) {
                return true;
            }
            chosen.pop();
            row_left[c] += 1;
            col_left[s] += 1;
        }
        search(cells, at + 1, row_left, col_left, chosen)
    }

    let mut chosen = Vec::new();
    let found = search(&cells, 0, &mut row_left, &mut col_left, &mut chosen);
    debug_assert!(found, "no feasible class allocation");
    for (c, s) in chosen {
        alloc[c][s] += 1;
    }
    alloc
}

/// Score-stratified train/validation/test split.
///
/// Overall sizes are the largest-remainder apportionment of the corpus;
/// each score class is shuffled with the seed and dealt so that its share in
/// every split is within one essay of exact proportionality. Id lists keep
/// corpus order.
pub fn stratified_split(records: &[EssayRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Precondition(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    if records.is_empty() {
        return Err(Error::Precondition("cannot split an empty corpus".into()));
    }

    let mut by_class: BTreeMap<Score, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.score).or_default().push(i);
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let alloc = allocate_by_class(&sizes, &ratios);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = vec![Split::Train; records.len()];
    for (members, counts) in by_class.values().zip(&alloc) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (split, &n) in Split::ALL.iter().zip(counts) {
            for idx in it.by_ref().take(n) {
                assigned[idx] = *split;
            }
        }
    }

    let pairs: Vec<(String, Split)> = records
        .iter()
        .zip(assigned)
        .map(|(r, s)| (r.essay_id.clone(), s))
        .collect();
    Ok(DatasetSplit::from_assignments(&pairs, seed))
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    essay_id: String,
    split: Split,
}

/// Writes one `{"essay_id": .., "split": ..}` line per essay: train, then
/// validation, then test.
pub fn write_split_manifest(path: impl AsRef<Path>, split: &DatasetSplit) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for s in Split::ALL {
        for id in split.ids(s) {
            serde_json::to_writer(
                &mut w,
                &ManifestLine {
                    essay_id: id.clone(),
                    split: s,
                },
            )?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, Split)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push((l.essay_id, l.split));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub counts: BTreeMap<Score, usize>,
    pub total: usize,
}

impl ScoreHistogram {
    pub fn fraction(&self, score: Score) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(&score).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

pub fn score_histogram(records: &[EssayRecord]) -> ScoreHistogram {
    let mut counts: BTreeMap<Score, usize> = (MIN_SCORE..=MAX_SCORE).map(|s| (s, 0)).collect();
    for r in records {
        *counts.entry(r.score).or_default() += 1;
    }
    ScoreHistogram {
        counts,
        total: records.len(),
    }
}

/// Max, min, mean and population standard deviation of a list of counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CountSummary {
    pub max: usize,
    pub min: usize,
    pub mean: f64,
    pub std: f64,
}

impl CountSummary {
    pub fn of(values: &[usize]) -> Self {
        if values.is_empty() {
            return CountSummary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        CountSummary {
            max: *values.iter().max().unwrap(),
            min: *values.iter().min().unwrap(),
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthStats {
    pub tokens: CountSummary,
    pub words: CountSummary,
    /// True when token counts are byte-length estimates.
    pub approximate_tokens: bool,
}

pub fn length_stats(records: &[EssayRecord], meter: &TokenMeter) -> LengthStats {
    let tokens: Vec<usize> = records
        .iter()
        .map(|r| meter.count_tokens(&r.text).value)
        .collect();
    let words: Vec<usize> = records.iter().map(|r| count_words(&r.text)).collect();
    LengthStats {
        tokens: CountSummary::of(&tokens),
        words: CountSummary::of(&words),
        approximate_tokens: !meter.is_exact(),
    }
}
