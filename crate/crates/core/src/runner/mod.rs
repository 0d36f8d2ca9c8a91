//! Config-driven experiment orchestration.
//!
//! A run is a fixed sequence of stages that communicate only through files
//! under the configured output directory, so any stage can be re-run alone:
//!
//! | stage | reads | writes |
//! |---|---|---|
//! | ingest | corpus file | `corpus.jsonl`, `split.jsonl`, `corpus_stats.json` |
//! | summarize | corpus | `summaries/<summarizer>.jsonl`, `cost_ledger.json` |
//! | embed | summaries | `embeddings/<summarizer>/<provider>.<view>.f32`, `features/<summarizer>.<view>.f32` |
//! | train | matrices | `predictions/`, `checkpoints/`, `oof/`, `votes/`, `training/` |
//! | evaluate | predictions | `manifest.json` |
//! | report | manifest | `reports/results.csv`, `reports/results.txt` |
//! | hist | corpus, summaries | `hist/*.csv` |

mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use config::{
    AssetConfig, ClientConfig, Condition, CorpusConfig, EmbeddingConfig, ExperimentConfig, HeadKind, HeadsConfig,
    HistogramConfig, SplitConfig, SummarizerConfig, VotingConfig,
};
pub use report::{
    emit_histograms, parse_report_csv, render_text_table, sort_rows, write_histogram, write_report,
    write_report_csv, Histogram, ReportRow,
};

use crate::corpus::{
    length_stats, load_corpus, read_split_manifest, score_histogram, stratified_split, write_corpus_jsonl,
    write_split_manifest, CorpusFormat, DatasetSplit, EssayRecord, LengthStats, ScoreHistogram, Split,
};
use crate::embedders::{concat_matrices, embed_matrix, pet_template, EncoderProvider};
use crate::ensembles::{
    apply_cutpoints, make_fold_plan, optimize_cutpoints, train_variant, vote_all, CutPointSearch, CutPoints,
    VariantKind,
};
use crate::error::{Error, Result};
use crate::features::{clean_text, handcrafted_matrix, Dictionary};
use crate::learners::{
    blend, predict_pair, select_pair_weight, train_booster, train_mlp, BoosterPair, FoldRecord,
};
use crate::matrix::{read_matrix, write_matrix};
use crate::metrics::{qwk, SCORE_CATEGORIES};
use crate::summarizer::{
    read_summaries, write_summaries, CostLedger, HttpChatClient, LlmClient, ReplayClient, ResponseCache,
    SummaryResult, SummaryStatus, Summarizer,
};
use crate::tokenmeter::{count_words, TokenMeter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Summarize,
    Embed,
    Train,
    Evaluate,
    Report,
    Hist,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Summarize,
        Stage::Embed,
        Stage::Train,
        Stage::Evaluate,
        Stage::Report,
        Stage::Hist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Summarize => "summarize",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Hist => "hist",
        }
    }
}

/// Text fed to the encoders: the summary as is, after `clean_text`, or
/// wrapped in the scoring template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Plain,
    Clean,
    Pet,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Plain => "plain",
            View::Clean => "clean",
            View::Pet => "pet",
        }
    }

    fn apply(self, text: &str) -> String {
        match self {
            View::Plain => text.to_string(),
            View::Clean => clean_text(text),
            View::Pet => pet_template(text),
        }
    }
}

/// Paths of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.jsonl")
    }
    pub fn corpus_stats(&self) -> PathBuf {
        self.root.join("corpus_stats.json")
    }
    pub fn summaries(&self, summarizer: &str) -> PathBuf {
        self.root.join("summaries").join(format!("{summarizer}.jsonl"))
    }
    pub fn summary_failures(&self, summarizer: &str) -> PathBuf {
        self.root.join("summaries").join(format!("{summarizer}.failures.jsonl"))
    }
    pub fn cost_ledger(&self) -> PathBuf {
        self.root.join("cost_ledger.json")
    }
    pub fn embedding(&self, summarizer: &str, provider: &str, view: View) -> PathBuf {
        self.root
            .join("embeddings")
            .join(summarizer)
            .join(format!("{provider}.{}.f32", view.name()))
    }
    pub fn handcrafted(&self, summarizer: &str, view: View) -> PathBuf {
        self.root.join("features").join(format!("{summarizer}.{}.f32", view.name()))
    }
    pub fn predictions_dir(&self, condition: &str) -> PathBuf {
        self.root.join("predictions").join(condition)
    }
    pub fn checkpoints_dir(&self, condition: &str) -> PathBuf {
        self.root.join("checkpoints").join(condition)
    }
    pub fn oof(&self, condition: &str) -> PathBuf {
        self.root.join("oof").join(format!("{condition}.csv"))
    }
    pub fn votes(&self, condition: &str) -> PathBuf {
        self.root.join("votes").join(format!("{condition}.csv"))
    }
    pub fn training(&self, condition: &str) -> PathBuf {
        self.root.join("training").join(format!("{condition}.json"))
    }
    pub fn execution(&self) -> PathBuf {
        self.root.join("execution.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn hist(&self) -> PathBuf {
        self.root.join("hist")
    }
    pub fn llm_cache(&self) -> PathBuf {
        self.root.join("cache").join("llm")
    }
    pub fn embedding_cache(&self, provider: &str) -> PathBuf {
        self.root.join("cache").join("embeddings").join(provider)
    }

    /// `path` relative to the root, with `/` separators.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

fn file_sha256(path: &Path) -> Result<String> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::sha256_hex(&[&raw]))
}

fn meter(cfg: &ExperimentConfig) -> Result<TokenMeter> {
    TokenMeter::from_rank_file(Some(&cfg.assets.tokenizer_path()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    /// Train, validation and test sizes.
    pub split_sizes: [usize; 3],
    pub histogram: ScoreHistogram,
    pub lengths: LengthStats,
}

/// Essays in corpus order with their split.
struct Inputs {
    records: Vec<EssayRecord>,
    split: DatasetSplit,
    row_of: HashMap<String, usize>,
}

impl Inputs {
    fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let layout = Layout::new(&cfg.output_dir);
        let records = load_corpus(layout.corpus(), CorpusFormat::Jsonl)?;
        let split = DatasetSplit::from_assignments(&read_split_manifest(layout.split())?, cfg.split.seed);
        let row_of: HashMap<String, usize> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.essay_id.clone(), i))
            .collect();
        for s in Split::ALL {
            if let Some(id) = split.ids(s).iter().find(|id| !row_of.contains_key(*id)) {
                return Err(Error::Integrity(format!("split lists unknown essay {id}")));
            }
        }
        Ok(Inputs { records, split, row_of })
    }

    fn rows(&self, s: Split) -> Vec<usize> {
        self.split.ids(s).iter().map(|id| self.row_of[id]).collect()
    }

    fn labels(&self, rows: &[usize]) -> Vec<u8> {
        rows.iter().map(|&i| self.records[i].score).collect()
    }

    fn ids(&self, rows: &[usize]) -> Vec<String> {
        rows.iter().map(|&i| self.records[i].essay_id.clone()).collect()
    }

    /// Final summary texts in corpus order.
    fn texts(&self, cfg: &ExperimentConfig, summarizer: &str) -> Result<Vec<String>> {
        let layout = Layout::new(&cfg.output_dir);
        let mut by_id: HashMap<String, String> = read_summaries(layout.summaries(summarizer))?
            .into_iter()
            .map(|s| (s.essay_id, s.final_text))
            .collect();
        self.records
            .iter()
            .map(|r| {
                by_id.remove(&r.essay_id).ok_or_else(|| {
                    Error::Integrity(format!("summaries of {summarizer} lack essay {}", r.essay_id))
                })
            })
            .collect()
    }
}

pub fn ingest(cfg: &ExperimentConfig) -> Result<CorpusStats> {
    let layout = Layout::new(&cfg.output_dir);
    let format = cfg
        .corpus
        .format
        .unwrap_or_else(|| CorpusFormat::from_path(&cfg.corpus.path));
    let records = load_corpus(&cfg.corpus.path, format)?;
    if records.is_empty() {
        return Err(Error::Precondition(format!("corpus {} is empty", cfg.corpus.path.display())));
    }
    let split = stratified_split(&records, cfg.split.ratios, cfg.split.seed)?;
    create_parent(&layout.corpus())?;
    write_corpus_jsonl(layout.corpus(), &records)?;
    write_split_manifest(layout.split(), &split)?;
    let stats = CorpusStats {
        records: records.len(),
        split_sizes: split.sizes(),
        histogram: score_histogram(&records),
        lengths: length_stats(&records, &meter(cfg)?),
    };
    write_json(&layout.corpus_stats(), &stats)?;
    Ok(stats)
}

fn build_client(s: &SummarizerConfig) -> Result<Option<Box<dyn LlmClient>>> {
    Ok(match &s.client {
        ClientConfig::Original => None,
        ClientConfig::Replay { path, model } => Some(Box::new(ReplayClient::load(
            path,
            model.clone().unwrap_or_else(|| s.name.clone()),
        )?)),
        ClientConfig::Http {
            endpoint,
            model,
            api_key_env,
            timeout_secs,
        } => {
            let mut c = HttpChatClient::new(endpoint.clone(), model.clone());
            c.api_key = api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
            c.timeout = Duration::from_secs(*timeout_secs);
            Some(Box::new(c))
        }
    })
}

#[derive(Serialize)]
struct FailureLine<'a> {
    essay_id: &'a str,
    error: String,
}

/// Summarizes the corpus with every configured summarizer. Successful
/// summaries are written even when some essays fail; failures go to a
/// side file and the stage returns an error.
pub fn summarize(cfg: &ExperimentConfig) -> Result<CostLedger> {
    let layout = Layout::new(&cfg.output_dir);
    let inputs = Inputs::load(cfg)?;
    let meter = meter(cfg)?;
    let cache = ResponseCache::on_disk(layout.llm_cache())?;
    let mut ledger = CostLedger::default();
    for s in &cfg.summarizers {
        let out = layout.summaries(&s.name);
        create_parent(&out)?;
        let Some(client) = build_client(s)? else {
            let results: Vec<SummaryResult> = inputs
                .records
                .iter()
                .map(|r| SummaryResult {
                    essay_id: r.essay_id.clone(),
                    final_text: r.text.clone(),
                    final_token_count: meter.count_tokens(&r.text).value,
                    iterations: Vec::new(),
                    status: SummaryStatus::Passthrough,
                })
                .collect();
            write_summaries(&out, &results)?;
            continue;
        };
        let batch = Summarizer::new(client.as_ref(), &meter, &cache, s.settings).summarize_corpus(&inputs.records)?;
        ledger.merge(&batch.ledger);
        let done: Vec<SummaryResult> = batch.successes().cloned().collect();
        write_summaries(&out, &done)?;
        let failures: Vec<FailureLine> = inputs
            .records
            .iter()
            .zip(&batch.results)
            .filter_map(|(r, res)| {
                res.as_ref().err().map(|e| FailureLine {
                    essay_id: &r.essay_id,
                    error: e.to_string(),
                })
            })
            .collect();
        if !failures.is_empty() {
            let path = layout.summary_failures(&s.name);
            let lines: Vec<String> = failures
                .iter()
                .map(serde_json::to_string)
                .collect::<std::result::Result<_, _>>()?;
            fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
            write_json(&layout.cost_ledger(), &ledger)?;
            return Err(Error::Integrity(format!(
                "summarizer {}: {} of {} essays failed (first: {}); see {}",
                s.name,
                failures.len(),
                inputs.records.len(),
                failures[0].error,
                path.display()
            )));
        }
    }
    write_json(&layout.cost_ledger(), &ledger)?;
    Ok(ledger)
}

fn views(cfg: &ExperimentConfig) -> Vec<View> {
    if cfg.head_selected(HeadKind::VotingEnsemble) {
        vec![View::Plain, View::Clean, View::Pet]
    } else {
        vec![View::Plain]
    }
}

/// Embeds every summary with every provider, once per view the selected
/// heads need, and extracts handcrafted features for the voting ensemble.
pub fn embed(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let inputs = Inputs::load(cfg)?;
    let providers: Vec<Box<dyn EncoderProvider>> = cfg
        .providers
        .iter()
        .map(|p| {
            if cfg.embedding.cache {
                p.build_cached(layout.embedding_cache(p.name()))
            } else {
                p.build()
            }
        })
        .collect::<Result<_>>()?;
    let dictionary = if cfg.head_selected(HeadKind::VotingEnsemble) {
        Some(Dictionary::load(cfg.assets.dictionary_path())?)
    } else {
        None
    };
    for s in &cfg.summarizers {
        let texts = inputs.texts(cfg, &s.name)?;
        for view in views(cfg) {
            let shown: Vec<String> = texts.iter().map(|t| view.apply(t)).collect();
            let refs: Vec<&str> = shown.iter().map(String::as_str).collect();
            for p in &providers {
                let m = embed_matrix(p.as_ref(), &refs, cfg.embedding.batch_size, cfg.embedding.parallelism)?;
                let path = layout.embedding(&s.name, p.name(), view);
                create_parent(&path)?;
                write_matrix(&path, &m)?;
            }
            if let (Some(d), View::Plain | View::Clean) = (&dictionary, view) {
                let path = layout.handcrafted(&s.name, view);
                create_parent(&path)?;
                write_matrix(&path, &handcrafted_matrix(&refs, d))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub essay_id: String,
    pub label: u8,
    pub prediction: u8,
    /// Continuous score before thresholding, when the head has one.
    pub raw: Option<f64>,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub provider: String,
    pub weight: f64,
    /// Validation QWK at every grid weight.
    pub grid: Vec<(f64, f64)>,
    pub cuts: CutPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    /// Value of the report's model column.
    pub model: String,
    /// Prediction file relative to the output directory.
    pub predictions: String,
}

/// Everything the train stage learned for one condition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub outputs: Vec<HeadOutput>,
    pub mlp_folds: Vec<FoldRecord>,
    pub booster_pairs: Vec<PairRecord>,
    /// Cut-point searches keyed by head or variant.
    pub cutpoints: BTreeMap<String, CutPointSearch>,
}

#[derive(Serialize)]
struct OofLine<'a> {
    essay_id: &'a str,
    fold: usize,
    variant: &'static str,
    prediction: f64,
}

/// Loaded feature matrices for one summarizer, all in corpus order.
struct Matrices<'a> {
    cfg: &'a ExperimentConfig,
    layout: Layout,
    cache: HashMap<(String, String, &'static str), Array2<f64>>,
}

impl<'a> Matrices<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Matrices {
            cfg,
            layout: Layout::new(&cfg.output_dir),
            cache: HashMap::new(),
        }
    }

    fn provider(&mut self, summarizer: &str, provider: &str, view: View) -> Result<&Array2<f64>> {
        let key = (summarizer.to_string(), provider.to_string(), view.name());
        if !self.cache.contains_key(&key) {
            let m = read_matrix(self.layout.embedding(summarizer, provider, view))?;
            self.cache.insert(key.clone(), m);
        }
        Ok(&self.cache[&key])
    }

    fn handcrafted(&mut self, summarizer: &str, view: View) -> Result<&Array2<f64>> {
        let key = (summarizer.to_string(), String::new(), view.name());
        if !self.cache.contains_key(&key) {
            let m = read_matrix(self.layout.handcrafted(summarizer, view))?;
            self.cache.insert(key.clone(), m);
        }
        Ok(&self.cache[&key])
    }

    /// All providers side by side, in config order.
    fn concat(&mut self, summarizer: &str, view: View) -> Result<Array2<f64>> {
        let names: Vec<String> = self.cfg.providers.iter().map(|p| p.name().to_string()).collect();
        let mut parts = Vec::new();
        for n in &names {
            parts.push(self.provider(summarizer, n, view)?.clone());
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concat_matrices(&views)
    }

    /// Embeddings plus handcrafted features as seen by one ensemble variant.
    fn variant_features(&mut self, summarizer: &str, kind: VariantKind) -> Result<Array2<f64>> {
        let (emb_view, hand_view) = match kind {
            VariantKind::OrdinalCleaned => (View::Clean, View::Clean),
            VariantKind::PetPrompted => (View::Pet, View::Plain),
            _ => (View::Plain, View::Plain),
        };
        let emb = self.concat(summarizer, emb_view)?;
        let hand = self.handcrafted(summarizer, hand_view)?.clone();
        concat_matrices(&[emb.view(), hand.view()])
    }
}

fn take(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Trains every selected head for every condition and writes test-split
/// predictions.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<TrainingSummary>> {
    let layout = Layout::new(&cfg.output_dir);
    let inputs = Inputs::load(cfg)?;
    let train_rows = inputs.rows(Split::Train);
    let val_rows = inputs.rows(Split::Validation);
    let test_rows = inputs.rows(Split::Test);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::Precondition("train and test splits must be non-empty".into()));
    }
    let y_train = inputs.labels(&train_rows);
    let y_val = inputs.labels(&val_rows);
    let y_test = inputs.labels(&test_rows);
    let test_ids = inputs.ids(&test_rows);
    let mut mats = Matrices::new(cfg);
    let voting = &cfg.heads.voting;
    let mut summaries = Vec::new();

    for cond in cfg.effective_conditions() {
        let label = cond.label();
        let (s, t) = (cond.train_summaries.as_str(), cond.test_summaries.as_str());
        let pred_dir = layout.predictions_dir(&label);
        let ckpt_dir = layout.checkpoints_dir(&label);
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let mut summary = TrainingSummary::default();
        let emit = |summary: &mut TrainingSummary, model: String, file: String, pred: &[u8], raw: Option<&[f64]>| -> Result<()> {
            let path = pred_dir.join(format!("{file}.csv"));
            let rows: Vec<PredictionRow> = (0..pred.len())
                .map(|i| PredictionRow {
                    essay_id: test_ids[i].clone(),
                    label: y_test[i],
                    prediction: pred[i],
                    raw: raw.map(|r| r[i]),
                })
                .collect();
            write_predictions(&path, &rows)?;
            summary.outputs.push(HeadOutput {
                model,
                predictions: layout.relative(&path),
            });
            Ok(())
        };

        let needs_plan = cfg.head_selected(HeadKind::PerProviderHead) || cfg.head_selected(HeadKind::VotingEnsemble);
        let plan = if needs_plan {
            Some(make_fold_plan(&y_train, voting.folds, voting.seed)?)
        } else {
            None
        };

        for head in &cfg.heads.selected {
            match head {
                HeadKind::PerProviderHead => {
                    let plan = plan.as_ref().unwrap();
                    for p in &cfg.providers {
                        let xtr = take(mats.provider(s, p.name(), View::Plain)?, &train_rows);
                        let xte = take(mats.provider(t, p.name(), View::Plain)?, &test_rows);
                        let out = train_variant(VariantKind::Ordinal, xtr.view(), &y_train, plan, &voting.variant)?;
                        let search = optimize_cutpoints(&out.oof, &y_train)?;
                        let raw = out.model.predict(xte.view())?;
                        let pred = apply_cutpoints(&raw, &search.cuts);
                        let file = format!("per_provider_head.{}", p.name());
                        write_json(&ckpt_dir.join(format!("{file}.json")), &(&out.model, &search.cuts))?;
                        summary.cutpoints.insert(file.clone(), search);
                        emit(&mut summary, p.name().to_string(), file, &pred, Some(&raw))?;
                    }
                }
                HeadKind::MlpConcat => {
                    let xtr = take(&mats.concat(s, View::Plain)?, &train_rows);
                    let xte = take(&mats.concat(t, View::Plain)?, &test_rows);
                    let (model, folds) = train_mlp(xtr.view(), &y_train, &cfg.heads.mlp)?;
                    model.save(ckpt_dir.join("mlp_concat.ckpt"))?;
                    let raw = model.predict_expected(xte.view())?;
                    let pred = model.predict_scores(xte.view())?;
                    summary.mlp_folds = folds;
                    emit(&mut summary, "mlp_concat".into(), "mlp_concat".into(), &pred, Some(&raw))?;
                }
                HeadKind::BoosterPair => {
                    if val_rows.is_empty() {
                        return Err(Error::Precondition("booster_pair needs a non-empty validation split".into()));
                    }
                    let ytr: Vec<f64> = y_train.iter().map(|&v| v as f64).collect();
                    for p in &cfg.providers {
                        let m = mats.provider(s, p.name(), View::Plain)?;
                        let (xtr, xva) = (take(m, &train_rows), take(m, &val_rows));
                        let xte = take(mats.provider(t, p.name(), View::Plain)?, &test_rows);
                        let a = train_booster(xtr.view(), &ytr, &cfg.heads.booster_a)?;
                        let b = train_booster(xtr.view(), &ytr, &cfg.heads.booster_b)?;
                        let (pa, pb) = (a.predict(xva.view())?, b.predict(xva.view())?);
                        let (weight, grid) = select_pair_weight(&pa, &pb, &y_val, &CutPoints::default())?;
                        let search = optimize_cutpoints(&blend(&pa, &pb, weight), &y_val)?;
                        let pair = BoosterPair {
                            booster_a: a,
                            booster_b: b,
                            weight,
                        };
                        let raw = predict_pair(&pair, xte.view())?;
                        let pred = apply_cutpoints(&raw, &search.cuts);
                        let file = format!("booster_pair.{}", p.name());
                        write_json(&ckpt_dir.join(format!("{file}.json")), &pair)?;
                        summary.booster_pairs.push(PairRecord {
                            provider: p.name().to_string(),
                            weight,
                            grid,
                            cuts: search.cuts,
                        });
                        summary.cutpoints.insert(file.clone(), search);
                        emit(&mut summary, format!("booster_pair:{}", p.name()), file, &pred, Some(&raw))?;
                    }
                }
                HeadKind::VotingEnsemble => {
                    let plan = plan.as_ref().unwrap();
                    let mut votes = Vec::new();
                    let mut oof_lines = Vec::new();
                    let train_ids = inputs.ids(&train_rows);
                    for kind in VariantKind::ALL {
                        let xtr = take(&mats.variant_features(s, kind)?, &train_rows);
                        let xte = take(&mats.variant_features(t, kind)?, &test_rows);
                        let out = train_variant(kind, xtr.view(), &y_train, plan, &voting.variant)?;
                        let search = optimize_cutpoints(&out.oof, &y_train)?;
                        votes.push(apply_cutpoints(&out.model.predict(xte.view())?, &search.cuts));
                        for (i, &p) in out.oof.iter().enumerate() {
                            oof_lines.push((train_ids[i].clone(), out.fold_of[i], kind.name(), p));
                        }
                        write_json(
                            &ckpt_dir.join(format!("voting_ensemble.{}.json", kind.name())),
                            &(&out.model, &search.cuts),
                        )?;
                        summary.cutpoints.insert(format!("voting_ensemble.{}", kind.name()), search);
                    }
                    let records = vote_all(&test_ids, &votes)?;
                    write_votes(&layout.votes(&label), &records)?;
                    let oof_path = layout.oof(&label);
                    create_parent(&oof_path)?;
                    let mut w = csv::Writer::from_path(&oof_path)?;
                    for (id, fold, variant, prediction) in &oof_lines {
                        w.serialize(OofLine {
                            essay_id: id,
                            fold: *fold,
                            variant,
                            prediction: *prediction,
                        })?;
                    }
                    w.flush().map_err(|e| Error::io(&oof_path, e))?;
                    let pred: Vec<u8> = records.iter().map(|r| r.final_score).collect();
                    emit(&mut summary, "voting_ensemble".into(), "voting_ensemble".into(), &pred, None)?;
                }
            }
        }
        write_json(&layout.training(&label), &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

fn write_votes(path: &Path, records: &[crate::ensembles::VoteRecord]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["essay_id".to_string()];
    header.extend(VariantKind::ALL.iter().map(|k| k.name().to_string()));
    header.push("final".into());
    w.write_record(&header)?;
    for r in records {
        let mut line = vec![r.essay_id.clone()];
        line.extend(r.votes.iter().map(|v| v.to_string()));
        line.push(r.final_score.to_string());
        w.write_record(&line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-stage wall time and outbound HTTP requests of the latest execution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExecutionStats {
    pub timings_secs: BTreeMap<String, f64>,
    pub network_calls: BTreeMap<String, usize>,
    /// Spend of this execution; cached completions cost nothing.
    pub cost_ledger: CostLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    #[serde(flatten)]
    pub row: ReportRow,
    pub predictions: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDetails {
    pub condition: Condition,
    pub training: TrainingSummary,
}

/// Everything needed to audit a run. Apart from `execution`, two runs of
/// the same config over warm caches produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config: ExperimentConfig,
    /// SHA-256 of corpus, tokenizer, dictionary and replay files.
    pub asset_hashes: BTreeMap<String, String>,
    pub corpus: CorpusStats,
    pub rows: Vec<ManifestRow>,
    pub conditions: Vec<ConditionDetails>,
    pub execution: ExecutionStats,
}

impl RunManifest {
    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.rows.iter().map(|r| r.row.clone()).collect()
    }
}

fn asset_hashes(cfg: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    out.insert("corpus".to_string(), file_sha256(&cfg.corpus.path)?);
    let tok = cfg.assets.tokenizer_path();
    if tok.exists() {
        out.insert("tokenizer".to_string(), file_sha256(&tok)?);
    }
    out.insert("dictionary".to_string(), file_sha256(&cfg.assets.dictionary_path())?);
    for s in &cfg.summarizers {
        if let ClientConfig::Replay { path, .. } = &s.client {
            out.insert(format!("replay:{}", s.name), file_sha256(path)?);
        }
    }
    for p in &cfg.providers {
        if let crate::embedders::ProviderConfig::FileReplay { name, path, .. } = p {
            out.insert(format!("vectors:{name}"), file_sha256(path)?);
        }
    }
    Ok(out)
}

/// Recomputes every QWK from the persisted prediction files and writes the
/// manifest.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let layout = Layout::new(&cfg.output_dir);
    let mut rows = Vec::new();
    let mut conditions = Vec::new();
    for cond in cfg.effective_conditions() {
        let training: TrainingSummary = read_json(&layout.training(&cond.label()))?;
        for out in &training.outputs {
            let preds = read_predictions(&layout.root.join(&out.predictions))?;
            let a: Vec<u8> = preds.iter().map(|p| p.prediction).collect();
            let b: Vec<u8> = preds.iter().map(|p| p.label).collect();
            rows.push(ManifestRow {
                row: ReportRow {
                    summarization_model: cond.train_summaries.clone(),
                    model: out.model.clone(),
                    qwk: qwk(&a, &b, SCORE_CATEGORIES)?,
                    test_condition: cond.test_summaries.clone(),
                },
                predictions: out.predictions.clone(),
                n: preds.len(),
            });
        }
        conditions.push(ConditionDetails {
            condition: cond,
            training,
        });
    }
    let mut execution: ExecutionStats = if layout.execution().exists() {
        read_json(&layout.execution())?
    } else {
        ExecutionStats::default()
    };
    if layout.cost_ledger().exists() {
        execution.cost_ledger = read_json(&layout.cost_ledger())?;
    }
    let manifest = RunManifest {
        name: cfg.name.clone(),
        config: cfg.clone(),
        asset_hashes: asset_hashes(cfg)?,
        corpus: read_json(&layout.corpus_stats())?,
        rows,
        conditions,
        execution,
    };
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    read_json(path.as_ref())
}

/// Writes the result tables of a manifest under `dir`.
pub fn emit_report(manifest: &RunManifest, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    write_report(dir, &manifest.report_rows())
}

pub fn report(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    let layout = Layout::new(&cfg.output_dir);
    emit_report(&read_manifest(layout.manifest())?, layout.reports())
}

/// Length histograms: token and word counts of the original essays and
/// token counts of every summarizer's output.
pub fn hist(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.output_dir);
    let inputs = Inputs::load(cfg)?;
    let meter = meter(cfg)?;
    let h = &cfg.histograms;
    let dir = layout.hist();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut jobs: Vec<(String, Vec<usize>, &[usize])> = vec![
        (
            "original_tokens".into(),
            inputs.records.iter().map(|r| meter.count_tokens(&r.text).value).collect(),
            &h.markers,
        ),
        (
            "original_words".into(),
            inputs.records.iter().map(|r| count_words(&r.text)).collect(),
            &[],
        ),
    ];
    for s in &cfg.summarizers {
        let path = layout.summaries(&s.name);
        if path.exists() {
            let lengths = read_summaries(&path)?.iter().map(|r| r.final_token_count).collect();
            jobs.push((format!("{}_tokens", s.name), lengths, &h.markers));
        }
    }
    let mut written = Vec::new();
    for (name, lengths, markers) in jobs {
        let path = dir.join(format!("{name}.csv"));
        write_histogram(&path, &emit_histograms(&lengths, h.bin_width, markers)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs one stage, recording its wall time and HTTP request count in
/// `execution.json`. Errors carry the stage name.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    let inner = || -> Result<()> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.output_dir);
        fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
        let calls_before = crate::http::network_calls();
        let start = Instant::now();
        match stage {
            Stage::Ingest => ingest(cfg).map(drop),
            Stage::Summarize => summarize(cfg).map(drop),
            Stage::Embed => embed(cfg),
            Stage::Train => train(cfg).map(drop),
            Stage::Evaluate => evaluate(cfg).map(drop),
            Stage::Report => report(cfg).map(drop),
            Stage::Hist => hist(cfg).map(drop),
        }?;
        if stage < Stage::Evaluate {
            let mut ex: ExecutionStats = if layout.execution().exists() {
                read_json(&layout.execution())?
            } else {
                ExecutionStats::default()
            };
            ex.timings_secs
                .insert(stage.name().to_string(), start.elapsed().as_secs_f64());
            ex.network_calls
                .insert(stage.name().to_string(), crate::http::network_calls() - calls_before);
            write_json(&layout.execution(), &ex)?;
        }
        Ok(())
    };
    inner().map_err(|e| e.in_stage(stage.name()))
}

/// Validates the config, snapshots it, runs every stage in order and
/// returns the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let layout = Layout::new(&cfg.output_dir);
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    fs::write(layout.config_snapshot(), cfg.to_toml()?).map_err(|e| Error::io(layout.config_snapshot(), e))?;
    if layout.execution().exists() {
        fs::remove_file(layout.execution()).map_err(|e| Error::io(layout.execution(), e))?;
    }
    for stage in Stage::ALL {
        log::info!("stage {}", stage.name());
        run_stage(cfg, stage)?;
    }
    read_manifest(layout.manifest())
}
