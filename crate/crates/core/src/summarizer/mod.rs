//! Length-controlled summarization.
//!
//! An essay whose token count exceeds the budget is sent to the LLM with the
//! compression prompt. While the returned text is still over budget it is
//! compressed again under a tighter target: iteration `k` uses
//! `floor(initial_target * shrink^(k-1))`, and the ceiling written into the
//! prompt is `min(target, budget)`. Iteration 1 compresses the essay;
//! later iterations compress the previous, still too long, output. After
//! `max_iters` misses the last output is cut at a token boundary.

mod cache;
mod client;
mod prompt;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{cache_key, ResponseCache};
pub use client::{
    complete_with_retry, parse_chat_response, replay_key, write_replay_file, ClientError,
    Completion, HttpChatClient, InstrumentedClient, LlmClient, ReplayClient, ReplayEntry,
    RetryPolicy, ScriptedClient, Usage,
};
pub use prompt::build_prompt;

use crate::corpus::EssayRecord;
use crate::error::{Error, Result};
use crate::tokenmeter::TokenMeter;

pub const DEFAULT_BUDGET: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryStatus {
    Passthrough,
    Summarized,
    TruncatedFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iteration {
    pub target_threshold: usize,
    pub output_token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryResult {
    pub essay_id: String,
    pub final_text: String,
    pub final_token_count: usize,
    pub iterations: Vec<Iteration>,
    pub status: SummaryStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Summarize every essay, short ones included.
    All,
    /// Summarize only essays over the budget; the rest pass through unchanged.
    #[default]
    OverBudgetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rates {
    pub input_per_1k: f64,
    pub output_per_1k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummarizeConfig {
    pub budget: usize,
    pub initial_target: usize,
    pub shrink: f64,
    pub max_iters: usize,
    pub gating: Gating,
    pub parallelism: usize,
    pub fail_fast: bool,
    pub retry: RetryPolicy,
    pub rates: Rates,
}

impl Default for SummarizeConfig {
    fn default() -> Self {
        SummarizeConfig {
            budget: DEFAULT_BUDGET,
            initial_target: 1000,
            shrink: 0.8,
            max_iters: 6,
            gating: Gating::OverBudgetOnly,
            parallelism: 4,
            fail_fast: false,
            retry: RetryPolicy::default(),
            rates: Rates::default(),
        }
    }
}

impl SummarizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Precondition("budget must be >= 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Precondition(format!(
                "shrink must lie in (0, 1), got {}",
                self.shrink
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Precondition("max_iters must be >= 1".into()));
        }
        if self.initial_target == 0 {
            return Err(Error::Precondition("initial_target must be >= 1".into()));
        }
        Ok(())
    }

    /// Targets for iterations `1..=max_iters`. Stops early if the next target
    /// would not be a strictly smaller positive integer.
    pub fn schedule(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(self.max_iters);
        for k in 0..self.max_iters {
            let t = (self.initial_target as f64 * self.shrink.powi(k as i32)).floor() as usize;
            let t = match out.last() {
                Some(&prev) => t.min(prev.saturating_sub(1)),
                None => t,
            };
            if t == 0 {
                break;
            }
            out.push(t);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelCost {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
}

/// Per-model token and currency totals over non-cached calls.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub models: BTreeMap<String, ModelCost>,
}

impl CostLedger {
    pub fn record(&mut self, model: &str, usage: Usage, rates: Rates) {
        let m = self.models.entry(model.to_string()).or_default();
        m.calls += 1;
        m.input_tokens += usage.input_tokens;
        m.output_tokens += usage.output_tokens;
        m.cost += usage.input_tokens as f64 / 1000.0 * rates.input_per_1k
            + usage.output_tokens as f64 / 1000.0 * rates.output_per_1k;
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for (model, c) in &other.models {
            let m = self.models.entry(model.clone()).or_default();
            m.calls += c.calls;
            m.input_tokens += c.input_tokens;
            m.output_tokens += c.output_tokens;
            m.cost += c.cost;
        }
    }

    pub fn total_calls(&self) -> u64 {
        self.models.values().map(|m| m.calls).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.models.values().map(|m| m.cost).sum()
    }
}

pub fn needs_summarization(text: &str, meter: &TokenMeter, budget: usize) -> bool {
    meter.count_tokens(text).value > budget
}

/// Client, token meter, cache and settings for summarization jobs.
pub struct Summarizer<'a> {
    pub client: &'a dyn LlmClient,
    pub meter: &'a TokenMeter,
    pub cache: &'a ResponseCache,
    pub config: SummarizeConfig,
}

/// Per-essay outcomes in input order plus the ledger of paid calls.
#[derive(Debug)]
pub struct BatchSummary {
    pub results: Vec<Result<SummaryResult>>,
    pub ledger: CostLedger,
}

impl BatchSummary {
    pub fn successes(&self) -> impl Iterator<Item = &SummaryResult> {
        self.results.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &Error> {
        self.results.iter().filter_map(|r| r.as_ref().err())
    }
}

impl<'a> Summarizer<'a> {
    pub fn new(
        client: &'a dyn LlmClient,
        meter: &'a TokenMeter,
        cache: &'a ResponseCache,
        config: SummarizeConfig,
    ) -> Self {
        Summarizer {
            client,
            meter,
            cache,
            config,
        }
    }

    /// Runs the adaptive loop for one essay.
    pub fn summarize(&self, essay: &EssayRecord) -> Result<(SummaryResult, CostLedger)> {
        self.config.validate()?;
        let cfg = &self.config;
        let mut ledger = CostLedger::default();
        let original = self.meter.count_tokens(&essay.text).value;
        if cfg.gating == Gating::OverBudgetOnly && original <= cfg.budget {
            return Ok((
                SummaryResult {
                    essay_id: essay.essay_id.clone(),
                    final_text: essay.text.clone(),
                    final_token_count: original,
                    iterations: Vec::new(),
                    status: SummaryStatus::Passthrough,
                },
                ledger,
            ));
        }

        let model = self.client.model_name();
        let mut iterations = Vec::new();
        let mut input = essay.text.clone();
        for (k, target) in cfg.schedule().into_iter().enumerate() {
            let prompt = build_prompt(target.min(cfg.budget))?;
            let key = cache_key(model, &prompt, &input);
            let text = match self.cache.get(&key) {
                Some(t) => t,
                None => {
                    let out = complete_with_retry(self.client, &prompt, &input, cfg.retry)
                        .map_err(|e| Error::Summarization {
                            essay_id: essay.essay_id.clone(),
                            iteration: k + 1,
                            message: e.to_string(),
                        })?;
                    ledger.record(model, out.usage, cfg.rates);
                    self.cache.put(&key, &out.text)?;
                    out.text
                }
            };
            let tokens = self.meter.count_tokens(&text).value;
            iterations.push(Iteration {
                target_threshold: target,
                output_token_count: tokens,
            });
            if tokens <= cfg.budget {
                return Ok((
                    SummaryResult {
                        essay_id: essay.essay_id.clone(),
                        final_text: text,
                        final_token_count: tokens,
                        iterations,
                        status: SummaryStatus::Summarized,
                    },
                    ledger,
                ));
            }
            input = text;
        }

        let final_text = self.meter.truncate(&input, cfg.budget);
        let final_token_count = self.meter.count_tokens(&final_text).value;
        log::warn!(
            "essay {}: still over {} tokens after {} iterations; truncated",
            essay.essay_id,
            cfg.budget,
            iterations.len()
        );
        Ok((
            SummaryResult {
                essay_id: essay.essay_id.clone(),
                final_text,
                final_token_count,
                iterations,
                status: SummaryStatus::TruncatedFallback,
            },
            ledger,
        ))
    }

    /// Summarizes a corpus with up to `parallelism` essays in flight.
    /// Results come back in input order. With `fail_fast` the first failure
    /// aborts the batch and is returned as the error.
    pub fn summarize_corpus(&self, records: &[EssayRecord]) -> Result<BatchSummary> {
        self.config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let outcomes: Vec<Result<(SummaryResult, CostLedger)>> = if self.config.fail_fast {
            pool.install(|| {
                records
                    .par_iter()
                    .map(|r| self.summarize(r))
                    .collect::<Result<Vec<_>>>()
            })?
            .into_iter()
            .map(Ok)
            .collect()
        } else {
            pool.install(|| records.par_iter().map(|r| self.summarize(r)).collect())
        };

        let mut ledger = CostLedger::default();
        let results = outcomes
            .into_iter()
            .map(|o| {
                o.map(|(res, l)| {
                    ledger.merge(&l);
                    res
                })
            })
            .collect();
        Ok(BatchSummary { results, ledger })
    }
}

/// One-off summarization without a cache.
pub fn adaptive_summarize(
    essay: &EssayRecord,
    client: &dyn LlmClient,
    meter: &TokenMeter,
    config: SummarizeConfig,
) -> Result<SummaryResult> {
    let cache = ResponseCache::disabled();
    Summarizer::new(client, meter, &cache, config)
        .summarize(essay)
        .map(|(r, _)| r)
}

pub fn write_summaries(path: impl AsRef<Path>, results: &[SummaryResult]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summaries(path: impl AsRef<Path>) -> Result<Vec<SummaryResult>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Row {
            row: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let s = SummarizeConfig::default().schedule();
        assert_eq!(s, vec![1000, 800, 640, 512, 409, 327]);
    }

    #[test]
    fn schedule_is_closed_form_and_strict() {
        let cfg = SummarizeConfig {
            max_iters: 12,
            ..Default::default()
        };
        for (k, t) in cfg.schedule().iter().enumerate() {
            assert_eq!(*t, (1000.0 * 0.8f64.powi(k as i32)).floor() as usize);
        }
        let tiny = SummarizeConfig {
            initial_target: 3,
            max_iters: 10,
            ..Default::default()
        };
        assert_eq!(tiny.schedule(), vec![3, 2, 1]);
    }

    #[test]
    fn config_validation() {
        let bad = [
            SummarizeConfig { budget: 0, ..Default::default() },
            SummarizeConfig { shrink: 1.0, ..Default::default() },
            SummarizeConfig { shrink: 0.0, ..Default::default() },
            SummarizeConfig { max_iters: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn ledger_rates() {
        let mut l = CostLedger::default();
        let rates = Rates {
            input_per_1k: 1.25,
            output_per_1k: 10.0,
        };
        l.record("m", Usage { input_tokens: 2000, output_tokens: 500 }, rates);
        l.record("m", Usage { input_tokens: 1000, output_tokens: 0 }, rates);
        let m = &l.models["m"];
        assert_eq!((m.calls, m.input_tokens, m.output_tokens), (2, 3000, 500));
        assert!((m.cost - (2.5 + 5.0 + 1.25)).abs() < 1e-12);
        let mut total = CostLedger::default();
        total.merge(&l);
        total.merge(&l);
        assert_eq!(total.total_calls(), 4);
    }
}
