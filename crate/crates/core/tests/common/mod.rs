//! Synthetic data shared by the integration and acceptance tests.
#![allow(dead_code)]

use aes_core::corpus::EssayRecord;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class counts of the 17,307-essay training corpus, scores 1 to 6.
pub const CLASS_MIX: [(u8, usize); 6] = [(1, 1252), (2, 4723), (3, 6280), (4, 3926), (5, 970), (6, 156)];

pub fn class_mix_records() -> Vec<EssayRecord> {
    let mut out = Vec::new();
    for (score, n) in CLASS_MIX {
        for i in 0..n {
            out.push(EssayRecord::new(format!("s{score}-{i:05}"), "x", score));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    out.shuffle(&mut rng);
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Six classes along a fixed unit direction `u`: the projection `u . x` of a
/// class-`c` row lies in `[c - 0.7, c - 0.3]` (shifted to center), so the
/// thresholds `u . x = k - 3` separate the classes with margin 0.3.
/// Orthogonal directions carry unit Gaussian noise.
pub fn separable_classes(per_class: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);
    let n = per_class * 6;
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % 6) as u8 + 1;
        let mut z: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let along: f64 = z.iter().zip(&u).map(|(a, b)| a * b).sum();
        let s = c as f64 - 3.5 + rng.gen_range(-0.2..0.2);
        for j in 0..dim {
            z[j] += (s - along) * u[j];
            x[[i, j]] = z[j];
        }
        y.push(c);
    }
    (x, y)
}

/// Six classes labelled by the linear rule `class = 1 + argmax(x[0..6])`:
/// a class-`c` row is `radius * e_c` plus unit Gaussian noise on every
/// coordinate, redrawn until the rule holds with margin at least 1.
pub fn argmax_classes(per_class: usize, dim: usize, radius: f64, seed: u64) -> (Array2<f64>, Vec<u8>) {
    assert!(dim >= 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * 6;
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 6;
        let row = loop {
            let mut z: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            z[c] += radius;
            let rival = (0..6).filter(|&k| k != c).map(|k| z[k]).fold(f64::NEG_INFINITY, f64::max);
            if z[c] - rival >= 1.0 {
                break z;
            }
        };
        for j in 0..dim {
            x[[i, j]] = row[j];
        }
        y.push(c as u8 + 1);
    }
    (x, y)
}

pub fn accuracy(pred: &[u8], y: &[u8]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

const WORDS_BY_SCORE: [&[&str]; 6] = [
    &["bad", "thing", "stuff", "like", "good", "very"],
    &["school", "people", "think", "because", "really", "many"],
    &["students", "important", "believe", "example", "reason", "change"],
    &["therefore", "evidence", "however", "community", "argument", "consider"],
    &["consequently", "perspective", "significant", "furthermore", "analysis", "demonstrate"],
    &["nevertheless", "comprehensive", "fundamentally", "substantiate", "nuanced", "implications"],
];

const FILLER: [&str; 12] = [
    "the", "and", "to", "of", "a", "in", "that", "is", "it", "for", "on", "with",
];

/// An essay whose vocabulary and length grow with its score.
pub fn synthetic_essay(score: u8, rng: &mut ChaCha8Rng) -> String {
    let words_per_para = 40 + 25 * score as usize + rng.gen_range(0..30);
    let paragraphs = 2 + (score as usize) / 2;
    let mut paras = Vec::new();
    for _ in 0..paragraphs {
        let mut sentence = Vec::new();
        let mut text = String::new();
        for w in 0..words_per_para {
            let word = if rng.gen_bool(0.45) {
                let lo = (score as usize).saturating_sub(2);
                let band = rng.gen_range(lo..score as usize);
                let pool = WORDS_BY_SCORE[band];
                pool[rng.gen_range(0..pool.len())]
            } else {
                FILLER[rng.gen_range(0..FILLER.len())]
            };
            sentence.push(word.to_string());
            if sentence.len() >= 8 + score as usize || w + 1 == words_per_para {
                let mut s = sentence.join(" ");
                if let Some(first) = s.get_mut(0..1) {
                    first.make_ascii_uppercase();
                }
                s.push('.');
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(&s);
                sentence.clear();
            }
        }
        paras.push(text);
    }
    paras.join("\n\n")
}

/// `n` essays with scores cycling through a skewed mix.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<EssayRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const CYCLE: [u8; 10] = [1, 2, 2, 3, 3, 3, 4, 4, 5, 6];
    (0..n)
        .map(|i| {
            let score = CYCLE[i % CYCLE.len()];
            EssayRecord::new(format!("essay-{i:04}"), synthetic_essay(score, &mut rng), score)
        })
        .collect()
}

/// Stand-in LLM that keeps the first 60% of the input's words, logging every
/// exchange so it can be written out as a replay file.
pub struct RecordingClient {
    pub log: std::sync::Mutex<Vec<aes_core::summarizer::ReplayEntry>>,
}

impl aes_core::summarizer::LlmClient for RecordingClient {
    fn model_name(&self) -> &str {
        "recorder"
    }

    fn complete(
        &self,
        prompt: &str,
        input: &str,
    ) -> Result<aes_core::summarizer::Completion, aes_core::summarizer::ClientError> {
        let words: Vec<&str> = input.split_whitespace().collect();
        let keep = (words.len() * 3).div_ceil(5);
        let text = words[..keep].join(" ");
        self.log.lock().unwrap().push(aes_core::summarizer::ReplayEntry {
            input_hash: aes_core::summarizer::replay_key(prompt, input),
            output: text.clone(),
            usage: None,
        });
        Ok(aes_core::summarizer::Completion {
            text,
            usage: aes_core::summarizer::Usage {
                input_tokens: (input.len() / 4) as u64,
                output_tokens: (keep * 2) as u64,
            },
        })
    }
}

/// Replay entries covering every request the default loop makes on `records`.
pub fn record_replay(records: &[EssayRecord]) -> Vec<aes_core::summarizer::ReplayEntry> {
    use aes_core::summarizer::{ResponseCache, SummarizeConfig, Summarizer};
    let meter = aes_core::tokenmeter::TokenMeter::from_rank_file(Some(&aes_core::tokenmeter::bundled_rank_path()))
        .unwrap();
    let client = RecordingClient {
        log: std::sync::Mutex::new(Vec::new()),
    };
    let cache = ResponseCache::disabled();
    let s = Summarizer::new(&client, &meter, &cache, SummarizeConfig::default());
    for r in records {
        s.summarize(r).unwrap();
    }
    let mut log = client.log.into_inner().unwrap();
    log.sort_by(|a, b| a.input_hash.cmp(&b.input_hash));
    log.dedup_by(|a, b| a.input_hash == b.input_hash);
    log
}

/// Writes a synthetic corpus, its replay file and a config using them into
/// `dir`. `heads` is a TOML array body such as `"mlp_concat", "voting_ensemble"`;
/// `extra` is appended verbatim.
pub fn write_experiment(dir: &std::path::Path, n: usize, heads: &str, extra: &str) -> std::path::PathBuf {
    write_experiment_with(dir, n, "", heads, extra)
}

/// Like [`write_experiment`] with `summarizers` appended after the replay
/// summarizer table.
pub fn write_experiment_with(
    dir: &std::path::Path,
    n: usize,
    summarizers: &str,
    heads: &str,
    extra: &str,
) -> std::path::PathBuf {
    let records = synthetic_corpus(n, 17);
    let mut w = csv::Writer::from_path(dir.join("essays.csv")).unwrap();
    w.write_record(["essay_id", "full_text", "score"]).unwrap();
    for r in &records {
        w.write_record([r.essay_id.as_str(), r.text.as_str(), &r.score.to_string()]).unwrap();
    }
    w.flush().unwrap();
    aes_core::summarizer::write_replay_file(dir.join("replay.jsonl"), &record_replay(&records)).unwrap();
    let config = format!(
        r#"name = "smoke"
output_dir = "out"

[corpus]
path = "essays.csv"

[[summarizers]]
name = "replay-llm"
client = {{ kind = "replay", path = "replay.jsonl" }}
{summarizers}

[[providers]]
kind = "fixture_hash"
name = "hash-a"
dim = 64
seed = 1

[[providers]]
kind = "fixture_hash"
name = "hash-b"
dim = 32
seed = 2

[heads]
selected = [{heads}]
{extra}
"#
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, config).unwrap();
    path
}

/// Plurality with ties to the class nearest the vote mean, then the lower
/// class; distances compared as integers `|5c - sum|`.
pub fn vote_oracle(votes: &[u8]) -> u8 {
    let sum: i32 = votes.iter().map(|&v| v as i32).sum();
    let n = votes.len() as i32;
    (1..=6u8)
        .min_by_key(|&c| {
            let count = votes.iter().filter(|&&v| v == c).count() as i32;
            (-count, (n * c as i32 - sum).abs(), c)
        })
        .unwrap()
}

pub const TRUE_CUTS: [f64; 5] = [1.5, 2.5, 3.5, 4.5, 5.5];

/// Latent scores uniform on `[0.5, 6.5]`, labelled by [`TRUE_CUTS`]; the
/// predictions are the latent scores plus uniform noise in `(-0.2, 0.2)`.
pub fn noisy_threshold_data(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = rng.gen_range(0.5..6.5);
        y.push(1 + TRUE_CUTS.iter().filter(|&&t| z > t).count() as u8);
        preds.push(z + rng.gen_range(-0.2..0.2));
    }
    (preds, y)
}

/// Round half away from zero, clamped to the score range.
pub fn round_to_nearest(preds: &[f64]) -> Vec<u8> {
    preds.iter().map(|p| p.round().clamp(1.0, 6.0) as u8).collect()
}

/// Uniform features in [-1, 1) with uniform labels.
pub fn random_batch(n: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0));
    let y = (0..n).map(|_| rng.gen_range(1..=6)).collect();
    (x, y)
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of a small model.
pub fn max_gradient_error(model: &aes_core::learners::MlpModel, x: &Array2<f64>, y: &[u8]) -> f64 {
    let g = model.gradients(x.view(), y, true).unwrap();
    let h = 1e-5;
    let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for l in 0..model.weights.len() {
        for idx in 0..model.weights[l].len() {
            let (r, c) = (idx / model.weights[l].ncols(), idx % model.weights[l].ncols());
            let mut p = model.clone();
            p.weights[l][[r, c]] += h;
            let mut q = model.clone();
            q.weights[l][[r, c]] -= h;
            let fd = (p.loss(x.view(), y).unwrap() - q.loss(x.view(), y).unwrap()) / (2.0 * h);
            worst = worst.max(rel(g.weights[l][[r, c]], fd));
        }
        for j in 0..model.biases[l].len() {
            let mut p = model.clone();
            p.biases[l][j] += h;
            let mut q = model.clone();
            q.biases[l][j] -= h;
            let fd = (p.loss(x.view(), y).unwrap() - q.loss(x.view(), y).unwrap()) / (2.0 * h);
            worst = worst.max(rel(g.biases[l][j], fd));
        }
    }
    let gi = g.input.unwrap();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let mut p = x.clone();
            p[[r, c]] += h;
            let mut q = x.clone();
            q[[r, c]] -= h;
            let fd = (model.loss(p.view(), y).unwrap() - model.loss(q.view(), y).unwrap()) / (2.0 * h);
            // The loss is a mean over rows, the input gradient is per row.
            worst = worst.max(rel(gi[[r, c]], fd));
        }
    }
    worst
}
