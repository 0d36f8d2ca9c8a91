//! Declarative experiment configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusFormat;
use crate::embedders::ProviderConfig;
use crate::ensembles::VariantConfig;
use crate::error::{Error, Result};
use crate::learners::{BoosterConfig, TrainConfig};
use crate::summarizer::SummarizeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub assets: AssetConfig,
    pub summarizers: Vec<SummarizerConfig>,
    pub providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
    /// Train/test summary pairings. Empty means one matched pair per summarizer.
    #[serde(default)]
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub histograms: HistogramConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// Guessed from the extension when absent.
    #[serde(default)]
    pub format: Option<CorpusFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.8, 0.1, 0.1],
            seed: 42,
        }
    }
}

/// Tokenizer rank table and spelling dictionary; the bundled copies when absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetConfig {
    pub tokenizer: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
}

impl AssetConfig {
    pub fn tokenizer_path(&self) -> PathBuf {
        self.tokenizer.clone().unwrap_or_else(crate::tokenmeter::bundled_rank_path)
    }

    pub fn dictionary_path(&self) -> PathBuf {
        self.dictionary.clone().unwrap_or_else(crate::features::bundled_dictionary_path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizerConfig {
    /// Label used in file names and in the report's summarization column.
    pub name: String,
    pub client: ClientConfig,
    #[serde(default)]
    pub settings: SummarizeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientConfig {
    /// No summarization: every essay keeps its original text.
    Original,
    /// Recorded completions from a JSONL replay file.
    Replay {
        path: PathBuf,
        #[serde(default)]
        model: Option<String>,
    },
    /// Chat-completions endpoint.
    Http {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_llm_timeout")]
        timeout_secs: u64,
    },
}

fn default_llm_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub batch_size: usize,
    pub parallelism: usize,
    /// Keep a disk cache of vectors under `<output_dir>/cache/embeddings`.
    pub cache: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            batch_size: 32,
            parallelism: 4,
            cache: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    PerProviderHead,
    MlpConcat,
    BoosterPair,
    VotingEnsemble,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::PerProviderHead => "per_provider_head",
            HeadKind::MlpConcat => "mlp_concat",
            HeadKind::BoosterPair => "booster_pair",
            HeadKind::VotingEnsemble => "voting_ensemble",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub selected: Vec<HeadKind>,
    pub mlp: TrainConfig,
    pub booster_a: BoosterConfig,
    /// Keys left out fall back to the leaf-wise defaults, not the level-wise ones.
    #[serde(deserialize_with = "leaf_wise_overrides")]
    pub booster_b: BoosterConfig,
    pub voting: VotingConfig,
}

fn leaf_wise_overrides<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BoosterConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
    let mut base = match serde_json::to_value(BoosterConfig::leaf_wise()).map_err(D::Error::custom)? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("config serializes to a map"),
    };
    base.extend(given);
    serde_json::from_value(serde_json::Value::Object(base)).map_err(D::Error::custom)
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            selected: vec![HeadKind::MlpConcat, HeadKind::VotingEnsemble],
            mlp: TrainConfig::default(),
            booster_a: BoosterConfig::level_wise(),
            booster_b: BoosterConfig::leaf_wise(),
            voting: VotingConfig::default(),
        }
    }
}

/// Fold count and variant hyperparameters shared by the voting ensemble and
/// the per-provider head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotingConfig {
    pub folds: usize,
    pub seed: u64,
    pub variant: VariantConfig,
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig {
            folds: 4,
            seed: 0,
            variant: VariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub train_summaries: String,
    pub test_summaries: String,
}

impl Condition {
    /// Directory and file stem for this pairing.
    pub fn label(&self) -> String {
        format!("{}__{}", self.train_summaries, self.test_summaries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub bin_width: usize,
    /// Vertical marker positions for token-length plots.
    pub markers: Vec<usize>,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig {
            bin_width: 50,
            markers: vec![512],
        }
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !s.contains("__")
        && !s.starts_with('.')
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.path);
        if let Some(p) = self.assets.tokenizer.as_mut() {
            fix(p);
        }
        if let Some(p) = self.assets.dictionary.as_mut() {
            fix(p);
        }
        for s in &mut self.summarizers {
            if let ClientConfig::Replay { path, .. } = &mut s.client {
                fix(path);
            }
        }
        for p in &mut self.providers {
            if let ProviderConfig::FileReplay { path, .. } = p {
                fix(path);
            }
        }
    }

    /// The configured conditions, or one matched pair per summarizer.
    pub fn effective_conditions(&self) -> Vec<Condition> {
        if !self.conditions.is_empty() {
            return self.conditions.clone();
        }
        self.summarizers
            .iter()
            .map(|s| Condition {
                train_summaries: s.name.clone(),
                test_summaries: s.name.clone(),
            })
            .collect()
    }

    pub fn head_selected(&self, head: HeadKind) -> bool {
        self.heads.selected.contains(&head)
    }

    pub fn summarizer(&self, name: &str) -> Option<&SummarizerConfig> {
        self.summarizers.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !valid_name(&self.name) {
            return bad(format!("experiment name {:?} must be [A-Za-z0-9._-]", self.name));
        }
        let sum: f64 = self.split.ratios.iter().sum();
        if self.split.ratios.iter().any(|r| *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {:?} must be positive and sum to 1", self.split.ratios));
        }
        if !self.corpus.path.exists() {
            return bad(format!("corpus {} does not exist", self.corpus.path.display()));
        }
        for (what, p) in [("tokenizer", &self.assets.tokenizer), ("dictionary", &self.assets.dictionary)] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("{what} {} does not exist", p.display()));
                }
            }
        }
        if self.summarizers.is_empty() {
            return bad("at least one summarizer is required".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.summarizers {
            if !valid_name(&s.name) || !names.insert(s.name.as_str()) {
                return bad(format!("summarizer name {:?} is invalid or repeated", s.name));
            }
            s.settings.validate().map_err(|e| Error::Config(format!("summarizer {}: {e}", s.name)))?;
            if let ClientConfig::Replay { path, .. } = &s.client {
                if !path.exists() {
                    return bad(format!("replay file {} does not exist", path.display()));
                }
            }
        }
        if self.providers.is_empty() {
            return bad("at least one embedding provider is required".into());
        }
        let mut names = BTreeSet::new();
        for p in &self.providers {
            if !valid_name(p.name()) || !names.insert(p.name()) {
                return bad(format!("provider name {:?} is invalid or repeated", p.name()));
            }
            if p.dim() == 0 {
                return bad(format!("provider {} has dim 0", p.name()));
            }
            if let ProviderConfig::FileReplay { path, .. } = p {
                if !path.exists() {
                    return bad(format!("replay vectors {} do not exist", path.display()));
                }
            }
        }
        if self.embedding.batch_size == 0 {
            return bad("embedding.batch_size must be >= 1".into());
        }
        if self.heads.selected.is_empty() {
            return bad("heads.selected is empty".into());
        }
        self.heads.mlp.validate().map_err(|e| Error::Config(format!("heads.mlp: {e}")))?;
        for (n, b) in [("booster_a", &self.heads.booster_a), ("booster_b", &self.heads.booster_b)] {
            b.validate().map_err(|e| Error::Config(format!("heads.{n}: {e}")))?;
        }
        if self.head_selected(HeadKind::BoosterPair) && self.heads.booster_a.growth == self.heads.booster_b.growth {
            return bad("booster_a and booster_b must use different growth policies".into());
        }
        if self.heads.voting.folds < 2 {
            return bad("heads.voting.folds must be >= 2".into());
        }
        for c in &self.conditions {
            for s in [&c.train_summaries, &c.test_summaries] {
                if self.summarizer(s).is_none() {
                    return bad(format!("condition refers to unknown summarizer {s:?}"));
                }
            }
        }
        if self.histograms.bin_width == 0 {
            return bad("histograms.bin_width must be >= 1".into());
        }
        Ok(())
    }
}
