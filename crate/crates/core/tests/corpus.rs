mod common;

use std::collections::{BTreeMap, BTreeSet};

use aes_core::corpus::{
    length_stats, load_corpus, read_split_manifest, score_histogram, stratified_split, write_split_manifest,
    CorpusFormat, DatasetSplit, EssayRecord, Split,
};
use aes_core::tokenmeter::TokenMeter;
use proptest::prelude::*;

const RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Per-class, per-split counts by direct tally.
fn tally(records: &[EssayRecord], split: &DatasetSplit) -> BTreeMap<(u8, Split), usize> {
    let score: BTreeMap<&str, u8> = records.iter().map(|r| (r.essay_id.as_str(), r.score)).collect();
    let mut out = BTreeMap::new();
    for s in Split::ALL {
        for id in split.ids(s) {
            *out.entry((score[id.as_str()], s)).or_insert(0) += 1;
        }
    }
    out
}

fn assert_proportional(records: &[EssayRecord], split: &DatasetSplit) {
    let hist = score_histogram(records);
    let counts = tally(records, split);
    for (&score, &n) in &hist.counts {
        for (k, s) in Split::ALL.into_iter().enumerate() {
            let got = counts.get(&(score, s)).copied().unwrap_or(0) as f64;
            let exact = n as f64 * RATIOS[k];
            assert!((got - exact).abs() <= 1.0, "score {score} {s:?}: {got} vs {exact}");
        }
    }
}

fn assert_partition(records: &[EssayRecord], split: &DatasetSplit) {
    let all: BTreeSet<&str> = records.iter().map(|r| r.essay_id.as_str()).collect();
    let mut seen = BTreeSet::new();
    for s in Split::ALL {
        for id in split.ids(s) {
            assert!(seen.insert(id.as_str()), "{id} appears twice");
        }
    }
    assert_eq!(seen, all);
}

#[test]
fn full_corpus_sizes_and_class_mix() {
    let recs = common::class_mix_records();
    assert_eq!(recs.len(), 17_307);
    let split = stratified_split(&recs, RATIOS, 42).unwrap();
    assert_eq!(split.sizes(), [13_845, 1_731, 1_731]);
    assert_partition(&recs, &split);
    assert_proportional(&recs, &split);
    assert_eq!(stratified_split(&recs, RATIOS, 42).unwrap(), split);
    assert_ne!(stratified_split(&recs, RATIOS, 43).unwrap(), split);

    let h = score_histogram(&recs);
    assert_eq!(h.total, 17_307);
    assert!((h.fraction(6) - 0.009).abs() < 5e-4);
    assert!((h.fraction(5) - 0.056).abs() < 5e-4);
    assert_eq!(h.counts.iter().max_by_key(|(_, &c)| c).unwrap().0, &3);
}

#[test]
fn sixty_record_corpora_against_counting_oracle() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    for trial in 0..200u64 {
        let recs: Vec<EssayRecord> = (0..60)
            .map(|i| {
                let score = if i < 6 { i as u8 + 1 } else { rand::Rng::gen_range(&mut rng, 1..=6) };
                EssayRecord::new(format!("e{i}"), "text", score)
            })
            .collect();
        let split = stratified_split(&recs, RATIOS, trial).unwrap();
        assert_partition(&recs, &split);
        assert_proportional(&recs, &split);
    }
}

#[test]
fn manifest_round_trip_preserves_split() {
    let recs = common::synthetic_corpus(40, 3);
    let split = stratified_split(&recs, RATIOS, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.jsonl");
    write_split_manifest(&path, &split).unwrap();
    let back = DatasetSplit::from_assignments(&read_split_manifest(&path).unwrap(), 7);
    assert_eq!(back, split);
}

#[test]
fn seventeen_thousand_rows_load() {
    let recs = common::class_mix_records();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("essays.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["essay_id", "full_text", "score"]).unwrap();
    for r in &recs {
        w.write_record([r.essay_id.as_str(), "Some, quoted \"text\".", &r.score.to_string()])
            .unwrap();
    }
    w.flush().unwrap();
    let loaded = load_corpus(&path, CorpusFormat::Csv).unwrap();
    assert_eq!(loaded.len(), 17_307);
    assert_eq!(loaded[0].essay_id, recs[0].essay_id);
    assert_eq!(loaded[0].text, "Some, quoted \"text\".");
}

#[test]
fn length_stats_bracket_every_record() {
    let recs = common::synthetic_corpus(50, 11);
    let meter = TokenMeter::from_rank_file(Some(&aes_core::tokenmeter::bundled_rank_path())).unwrap();
    let st = length_stats(&recs, &meter);
    assert!(!st.approximate_tokens);
    for r in &recs {
        let t = meter.count_tokens(&r.text).value;
        let w = aes_core::tokenmeter::count_words(&r.text);
        assert!(st.tokens.min <= t && t <= st.tokens.max);
        assert!(st.words.min <= w && w <= st.words.max);
    }
    for s in [st.tokens, st.words] {
        assert!(s.min as f64 <= s.mean && s.mean <= s.max as f64 && s.std >= 0.0);
    }
}

fn records_strategy() -> impl Strategy<Value = Vec<EssayRecord>> {
    prop::collection::vec(1u8..=6, 1..120).prop_map(|scores| {
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| EssayRecord::new(format!("id{i}"), "t", s))
            .collect()
    })
}

proptest! {
    #[test]
    fn splits_partition_and_repeat(recs in records_strategy(), seed in any::<u64>()) {
        let split = stratified_split(&recs, RATIOS, seed).unwrap();
        assert_partition(&recs, &split);
        assert_proportional(&recs, &split);
        prop_assert_eq!(stratified_split(&recs, RATIOS, seed).unwrap(), split);
    }

    #[test]
    fn histogram_ignores_order(mut recs in records_strategy(), seed in any::<u64>()) {
        let before = score_histogram(&recs);
        prop_assert_eq!(before.counts.values().sum::<usize>(), recs.len());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(recs.as_mut_slice(), &mut rng);
        prop_assert_eq!(score_histogram(&recs), before);
    }
}
