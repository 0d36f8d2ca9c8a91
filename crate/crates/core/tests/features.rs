use std::collections::{BTreeMap, BTreeSet, HashSet};

use aes_core::features::{
    bundled_dictionary_path, clean_text, extract_handcrafted, fit_vectorizer, handcrafted_matrix, Dictionary,
    HandcraftedFeatures, VectorizerConfig, VectorizerMode, VectorizerModel, HANDCRAFTED_WIDTH,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundled_words() -> Vec<String> {
    std::fs::read_to_string(bundled_dictionary_path())
        .unwrap()
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|w| !w.is_empty() && w.chars().all(|c| c.is_ascii_lowercase()))
        .collect()
}

/// A letter string that cannot be an English word.
fn nonsense(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(5..10);
    (0..len).map(|_| *b"qxzjv".choose(rng).unwrap() as char).collect()
}

#[test]
fn planted_misspellings_match_lookup_oracle() {
    let words = bundled_words();
    let set: HashSet<&str> = words.iter().map(String::as_str).collect();
    let dict = Dictionary::load(bundled_dictionary_path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let mut tokens = Vec::new();
        let mut planted = 0;
        for i in 0..rng.gen_range(20..80) {
            let mut w = if rng.gen_bool(0.15) {
                planted += 1;
                nonsense(&mut rng)
            } else {
                words.choose(&mut rng).unwrap().clone()
            };
            if i == 0 || rng.gen_bool(0.1) {
                let mut c = w.chars();
                w = c.next().unwrap().to_uppercase().chain(c).collect();
            }
            if rng.gen_bool(0.1) {
                w.push(*[',', '.', '!', '?'].choose(&mut rng).unwrap());
            }
            tokens.push(w);
        }
        // Numbers are never spelling errors.
        tokens.push("1999".into());
        let text = tokens.join(" ");

        let oracle = text
            .split_whitespace()
            .map(|t| t.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
            .filter(|w| !w.is_empty() && w.chars().all(char::is_alphabetic) && !set.contains(w.as_str()))
            .count();
        let f = extract_handcrafted(&text, &dict);
        assert_eq!(f.spelling_error_count, oracle);
        assert_eq!(oracle, planted);
        assert_eq!(f.word_count, tokens.len());
    }
}

#[test]
fn hand_counted_structure() {
    let dict = Dictionary::from_words(["one", "two", "three"]);
    let f = extract_handcrafted("One two.\n\nThree.", &dict);
    assert_eq!((f.paragraph_count, f.sentence_count, f.word_count), (2, 2, 3));
    assert_eq!(f.spelling_error_count, 0);
    assert_eq!(f.max_paragraph_words, 2);
    assert_eq!(f.mean_sentence_words, 1.5);
    assert!((f.word_length_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let empty = extract_handcrafted("", &dict);
    assert_eq!(empty.to_vec(), vec![0.0; HANDCRAFTED_WIDTH]);
    assert_eq!(HandcraftedFeatures::names().len(), HANDCRAFTED_WIDTH);
    assert_eq!(handcrafted_matrix(&["a", "b c"], &dict).dim(), (2, HANDCRAFTED_WIDTH));
}

/// Random documents over a small alphabet-only vocabulary.
fn toy_docs(n: usize, seed: u64) -> Vec<String> {
    let vocab = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..15);
            (0..len).map(|_| *vocab.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// The stated formulas evaluated directly on whitespace tokens.
fn brute_vectors(docs: &[String], tfidf: bool) -> (Vec<String>, Vec<Vec<f64>>) {
    let vocab: Vec<String> = docs
        .iter()
        .flat_map(|d| d.split_whitespace().map(String::from))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> = vocab
        .iter()
        .map(|t| {
            let df = docs.iter().filter(|d| d.split_whitespace().any(|w| w == t)).count() as f64;
            ((1.0 + n) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let rows = docs
        .iter()
        .map(|d| {
            let mut row: Vec<f64> = vocab
                .iter()
                .map(|t| d.split_whitespace().filter(|w| w == t).count() as f64)
                .collect();
            if tfidf {
                for (v, i) in row.iter_mut().zip(&idf) {
                    *v *= i;
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
            }
            row
        })
        .collect();
    (vocab, rows)
}

#[test]
fn fifty_documents_match_brute_force() {
    let docs = toy_docs(50, 77);
    let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
    for (mode, tfidf) in [(VectorizerMode::Tfidf, true), (VectorizerMode::Count, false)] {
        let model = fit_vectorizer(&refs, mode, &VectorizerConfig::default()).unwrap();
        let (vocab, rows) = brute_vectors(&docs, tfidf);
        let got: Vec<&String> = model.vocabulary.keys().collect();
        assert_eq!(got, vocab.iter().collect::<Vec<_>>());
        let dense = model.transform_dense(&refs);
        for (i, row) in rows.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                assert!((dense[[i, j]] - want).abs() < 1e-12, "doc {i} term {j}");
            }
        }
    }
}

#[test]
fn two_document_idf_example() {
    let m = fit_vectorizer(&["a b", "a c"], VectorizerMode::Tfidf, &VectorizerConfig::default()).unwrap();
    let vocab: BTreeMap<&str, usize> = m.vocabulary.iter().map(|(k, &v)| (k.as_str(), v)).collect();
    assert_eq!(vocab, BTreeMap::from([("a", 0), ("b", 1), ("c", 2)]));
    let idf = m.idf.as_ref().unwrap();
    assert_eq!(idf[0], 1.0);
    assert!((idf[1] - (1.5f64.ln() + 1.0)).abs() < 1e-15);
    assert_eq!(idf[1], idf[2]);

    let single = fit_vectorizer(&["x y z"], VectorizerMode::Tfidf, &VectorizerConfig::default()).unwrap();
    assert!(single.idf.unwrap().iter().all(|&v| v == 1.0));

    let cfg = VectorizerConfig {
        min_df: 2,
        ..VectorizerConfig::default()
    };
    let filtered = fit_vectorizer(&["a b", "a c"], VectorizerMode::Count, &cfg).unwrap();
    assert_eq!(filtered.vocabulary.keys().collect::<Vec<_>>(), vec!["a"]);
    assert!(filtered.idf.is_none());

    let count = fit_vectorizer(&["a b"], VectorizerMode::Count, &VectorizerConfig::default()).unwrap();
    assert_eq!(count.transform("a a b"), vec![(0, 2.0), (1, 1.0)]);
    assert!(count.transform("zzz").is_empty());
    assert!(fit_vectorizer(&[], VectorizerMode::Count, &VectorizerConfig::default()).is_err());
    assert!(fit_vectorizer(&["a", "b"], VectorizerMode::Count, &cfg).is_err());
}

#[test]
fn fit_ignores_corpus_order_and_model_round_trips() {
    let docs = toy_docs(30, 5);
    let mut refs: Vec<&str> = docs.iter().map(String::as_str).collect();
    let a = fit_vectorizer(&refs, VectorizerMode::Tfidf, &VectorizerConfig::default()).unwrap();
    refs.reverse();
    let b = fit_vectorizer(&refs, VectorizerMode::Tfidf, &VectorizerConfig::default()).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vec.json");
    a.save(&path).unwrap();
    assert_eq!(VectorizerModel::load(&path).unwrap(), a);
}

#[test]
fn clean_text_rules() {
    assert_eq!(clean_text("Hello   WORLD!!!"), "hello world!");
    assert_eq!(clean_text(""), "");
    assert_eq!(clean_text("See https://example.com/x?y=1 now"), "see now");
    assert_eq!(clean_text("tab\there\u{7}bell"), "tab herebell");
}

fn messy_text() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        "[A-Za-z]{1,8}",
        "[ \t\n]{1,4}",
        "[!?.,;:-]{1,5}",
        Just("http://x.io/a".to_string()),
        Just("www.Site.com".to_string()),
        "[\u{0}-\u{1f}]",
        "[À-ÿ]{1,3}",
        "\\PC{1,3}",
    ];
    prop::collection::vec(piece, 0..20).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn clean_text_is_idempotent(t in messy_text()) {
        let once = clean_text(&t);
        prop_assert_eq!(clean_text(&once), once);
    }

    #[test]
    fn tfidf_rows_are_unit_or_empty(doc in "[a-e ]{0,30}") {
        let m = fit_vectorizer(&["a b c", "c d e", "a e"], VectorizerMode::Tfidf, &VectorizerConfig::default()).unwrap();
        let row = m.transform(&doc);
        let norm: f64 = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        prop_assert!(row.is_empty() || (norm - 1.0).abs() < 1e-12);
    }
}
