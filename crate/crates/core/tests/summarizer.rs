mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use aes_core::corpus::EssayRecord;
use aes_core::summarizer::{
    adaptive_summarize, build_prompt, needs_summarization, ClientError, Completion, Gating, InstrumentedClient,
    LlmClient, ResponseCache, ScriptedClient, SummarizeConfig, Summarizer, SummaryStatus, Usage,
};
use aes_core::tokenmeter::{bundled_rank_path, TokenMeter};
use proptest::prelude::*;

fn meter() -> TokenMeter {
    TokenMeter::from_rank_file(Some(&bundled_rank_path())).unwrap()
}

/// Text of exactly `n` tokens: " cat" is a single token.
fn text_of(meter: &TokenMeter, n: usize) -> String {
    let t = " cat".repeat(n);
    assert_eq!(meter.count_tokens(&t).value, n);
    t
}

/// The loop by hand: target starts at 1000, shrinks by floor(0.8 x) after
/// each over-budget output, stops at the first output within budget.
fn hand_loop(outputs: &[usize], budget: usize) -> (Vec<usize>, bool) {
    let mut target = 1000usize;
    let mut seen = Vec::new();
    for &len in outputs {
        seen.push(target);
        if len <= budget {
            return (seen, true);
        }
        target = (target as f64 * 0.8).floor() as usize;
    }
    (seen, false)
}

#[test]
fn scripted_lengths_follow_the_schedule() {
    let m = meter();
    let lengths = [1100, 700, 480];
    let client = InstrumentedClient::new(ScriptedClient::new(
        "mock",
        lengths.iter().map(|&n| text_of(&m, n)).collect(),
    ));
    let essay = EssayRecord::new("e1", text_of(&m, 1500), 4);
    let r = adaptive_summarize(&essay, &client, &m, SummarizeConfig::default()).unwrap();

    let (oracle, done) = hand_loop(&lengths, 512);
    assert!(done);
    let thresholds: Vec<usize> = r.iterations.iter().map(|i| i.target_threshold).collect();
    assert_eq!(thresholds, oracle);
    assert_eq!(thresholds, vec![1000, 800, 640]);
    let outs: Vec<usize> = r.iterations.iter().map(|i| i.output_token_count).collect();
    assert_eq!(outs, lengths);
    assert_eq!(r.status, SummaryStatus::Summarized);
    assert_eq!(r.final_token_count, 480);
    assert_eq!(client.calls(), 3);
    // The prompt ceiling never exceeds the budget.
    assert_eq!(client.prompts(), vec![build_prompt(512).unwrap(); 3]);
}

#[test]
fn short_essays_pass_through_untouched() {
    let m = meter();
    let client = InstrumentedClient::new(ScriptedClient::new("mock", vec!["x".into()]));
    let padded = format!("\t{}\n\n", text_of(&m, 300));
    assert!(m.count_tokens(&padded).value <= 512);
    for text in [text_of(&m, 1), text_of(&m, 450), text_of(&m, 512), padded] {
        let essay = EssayRecord::new("e", text.clone(), 2);
        assert!(!needs_summarization(&text, &m, 512));
        let r = adaptive_summarize(&essay, &client, &m, SummarizeConfig::default()).unwrap();
        assert_eq!(r.status, SummaryStatus::Passthrough);
        assert!(r.iterations.is_empty());
        assert_eq!(r.final_text.as_bytes(), text.as_bytes());
    }
    assert!(needs_summarization(&text_of(&m, 513), &m, 512));
    assert_eq!(client.calls(), 0);
}

#[test]
fn immediate_success() {
    let m = meter();
    let client = ScriptedClient::new("mock", vec![text_of(&m, 400)]);
    let essay = EssayRecord::new("e", text_of(&m, 1200), 5);
    let r = adaptive_summarize(&essay, &client, &m, SummarizeConfig::default()).unwrap();
    assert_eq!(r.status, SummaryStatus::Summarized);
    assert_eq!(r.iterations.len(), 1);
    assert_eq!(client.calls(), 1);
}

#[test]
fn stubborn_client_ends_in_truncation() {
    let m = meter();
    let client = ScriptedClient::new("mock", vec![format!("Start.{}", " word and more".repeat(400))]);
    let essay = EssayRecord::new("e", text_of(&m, 900), 3);
    let cfg = SummarizeConfig::default();
    let r = adaptive_summarize(&essay, &client, &m, cfg.clone()).unwrap();
    assert_eq!(r.status, SummaryStatus::TruncatedFallback);
    assert_eq!(r.iterations.len(), cfg.max_iters);
    assert_eq!(client.calls(), cfg.max_iters);
    assert!(r.final_token_count <= 512);
    assert_eq!(m.count_tokens(&r.final_text).value, r.final_token_count);
    assert!(r.final_text.starts_with("Start."));
    let thresholds: Vec<usize> = r.iterations.iter().map(|i| i.target_threshold).collect();
    assert_eq!(thresholds, hand_loop(&[600; 6], 512).0);
}

/// Answers with the first half of the input's words; counts its calls.
struct Halver {
    calls: AtomicUsize,
    fail_on: Option<&'static str>,
}

impl LlmClient for Halver {
    fn model_name(&self) -> &str {
        "halver"
    }

    fn complete(&self, _prompt: &str, input: &str) -> Result<Completion, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on.is_some_and(|f| input.contains(f)) {
            return Err(ClientError::Response("refused".into()));
        }
        let words: Vec<&str> = input.split_whitespace().collect();
        let text = words[..words.len() / 2].join(" ");
        Ok(Completion {
            usage: Usage {
                input_tokens: words.len() as u64,
                output_tokens: (words.len() / 2) as u64,
            },
            text,
        })
    }
}

#[test]
fn warm_cache_replays_without_calls() {
    let m = meter();
    let recs = common::synthetic_corpus(30, 4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = SummarizeConfig {
        budget: 200,
        ..SummarizeConfig::default()
    };
    let client = InstrumentedClient::new(Halver {
        calls: AtomicUsize::new(0),
        fail_on: None,
    });

    let cache = ResponseCache::on_disk(dir.path()).unwrap();
    let first = Summarizer::new(&client, &m, &cache, cfg.clone()).summarize_corpus(&recs).unwrap();
    let paid = client.calls();
    assert!(paid > 0);
    // Ledger totals equal what the client itself counted.
    let l = &first.ledger.models["halver"];
    assert_eq!(l.calls as usize, paid);
    assert_eq!(l.input_tokens, client.usage().input_tokens);
    assert_eq!(l.output_tokens, client.usage().output_tokens);

    let cache = ResponseCache::on_disk(dir.path()).unwrap();
    let second = Summarizer::new(&client, &m, &cache, cfg).summarize_corpus(&recs).unwrap();
    assert_eq!(client.calls(), paid);
    assert_eq!(second.ledger.total_calls(), 0);
    let a: Vec<_> = first.successes().cloned().collect();
    let b: Vec<_> = second.successes().cloned().collect();
    assert_eq!(a, b);
    assert_eq!(a.len(), recs.len());
    for (r, rec) in a.iter().zip(&recs) {
        assert_eq!(r.essay_id, rec.essay_id);
        let over = m.count_tokens(&rec.text).value > 200;
        assert_eq!(r.status != SummaryStatus::Passthrough, over);
        assert!(r.final_token_count <= 200 || !over);
    }
}

#[test]
fn failures_are_collected_unless_fail_fast() {
    let m = meter();
    let mut recs: Vec<EssayRecord> = (0..6)
        .map(|i| EssayRecord::new(format!("e{i}"), text_of(&m, 600 + i), 3))
        .collect();
    recs[2].text = format!(" poison{}", recs[2].text);
    let client = Halver {
        calls: AtomicUsize::new(0),
        fail_on: Some("poison"),
    };
    let cache = ResponseCache::disabled();
    let cfg = SummarizeConfig::default();
    let batch = Summarizer::new(&client, &m, &cache, cfg.clone()).summarize_corpus(&recs).unwrap();
    assert_eq!(batch.successes().count(), 5);
    let errs: Vec<String> = batch.failures().map(|e| e.to_string()).collect();
    assert_eq!(errs.len(), 1);
    assert!(errs[0].contains("e2"), "{}", errs[0]);
    assert!(batch.results[2].is_err());

    let strict = SummarizeConfig {
        fail_fast: true,
        ..cfg
    };
    assert!(Summarizer::new(&client, &m, &cache, strict).summarize_corpus(&recs).is_err());
}

#[test]
fn gating_all_summarizes_short_essays_too() {
    let m = meter();
    let client = ScriptedClient::new("mock", vec![text_of(&m, 20)]);
    let essay = EssayRecord::new("e", text_of(&m, 100), 1);
    let cfg = SummarizeConfig {
        gating: Gating::All,
        ..SummarizeConfig::default()
    };
    let r = adaptive_summarize(&essay, &client, &m, cfg).unwrap();
    assert_eq!(r.status, SummaryStatus::Summarized);
    assert_eq!(client.calls(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loop_respects_budget_and_schedule(
        lengths in prop::collection::vec(1usize..1200, 1..8),
        budget in 50usize..600,
        essay_len in 1usize..1500,
    ) {
        let m = meter();
        let client = ScriptedClient::new("mock", lengths.iter().map(|&n| " cat".repeat(n)).collect());
        let essay = EssayRecord::new("e", " cat".repeat(essay_len), 3);
        let cfg = SummarizeConfig { budget, ..SummarizeConfig::default() };
        let r = adaptive_summarize(&essay, &client, &m, cfg.clone()).unwrap();
        prop_assert!(client.calls() <= cfg.max_iters);
        prop_assert_eq!(r.status == SummaryStatus::Passthrough, r.iterations.is_empty());
        if r.status == SummaryStatus::Passthrough {
            prop_assert!(essay_len <= budget);
            prop_assert_eq!(&r.final_text, &essay.text);
        } else {
            prop_assert!(essay_len > budget);
            prop_assert!(r.final_token_count <= budget);
            let t: Vec<usize> = r.iterations.iter().map(|i| i.target_threshold).collect();
            prop_assert_eq!(&t[..], &cfg.schedule()[..t.len()]);
            prop_assert!(t.windows(2).all(|w| w[1] < w[0]));
        }
    }
}
