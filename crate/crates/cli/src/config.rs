//! Runtime configuration: file, environment and flags merged into one view.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mondrian_core::experimental::{OracleSpec, TranslationTable};
use mondrian_core::lexicon::Abbreviations;
use mondrian_core::pricing::{PricingModel, PricingUnit};
use mondrian_core::{AbstractionConfig, Abstractor, EditKind, Lexicon, Vocabulary};
use mondrian_proxy::UpstreamSpec;
use serde::{Deserialize, Serialize};

/// Repository data directory, used when no path is configured.
pub fn bundled_data_dir() -> PathBuf {
    match std::env::var_os("MONDRIAN_DATA_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingPair {
    /// What the proxy charges its clients.
    pub user: PricingModel,
    /// What the upstream charges the proxy.
    pub upstream: PricingModel,
}

impl Default for PricingPair {
    fn default() -> Self {
        let rate = "0.002".parse().expect("literal rate");
        let model = PricingModel::new(PricingUnit::Per1kTokens, rate, rate);
        PricingPair {
            user: model.clone(),
            upstream: model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationSpec {
    /// Tab-separated `source<TAB>target` pairs.
    pub table: PathBuf,
    #[serde(default = "default_source")]
    pub source_lang: String,
    #[serde(default = "default_target")]
    pub target_lang: String,
    #[serde(default = "default_max_words")]
    pub max_words_per_sentence: usize,
}

fn default_source() -> String {
    "zh".into()
}

fn default_target() -> String {
    "en".into()
}

fn default_max_words() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Rank file the objective and the local provider count with.
    pub vocab: Option<PathBuf>,
    /// WordNet 3.0 `dict` directory.
    pub wordnet: Option<PathBuf>,
    /// Abbreviation table; the bundled one when absent.
    pub abbreviations: Option<PathBuf>,
    pub abstraction: AbstractionConfig,
    pub pricing: PricingPair,
    pub upstream: Option<UpstreamSpec>,
    pub oracle: Option<OracleSpec>,
    pub translation: Option<TranslationSpec>,
    /// JSON-lines cost ledger written by `serve` and read by `report`.
    pub ledger: Option<PathBuf>,
    pub listen: Option<String>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            vocab: None,
            wordnet: None,
            abbreviations: None,
            abstraction: AbstractionConfig::default(),
            pricing: PricingPair::default(),
            upstream: None,
            oracle: None,
            translation: None,
            ledger: None,
            listen: None,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RuntimeConfig {
    /// Read a `.toml` or `.json` file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: RuntimeConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => bail!("{}: config files must end in .toml or .json", path.display()),
        };
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.abstraction.validate()?;
        self.pricing.user.validate().context("user pricing")?;
        self.pricing.upstream.validate().context("upstream pricing")?;
        if let Some(upstream) = &self.upstream {
            upstream.validate()?;
        }
        if let Some(oracle) = &self.oracle {
            oracle.validate()?;
        }
        if self.translation.as_ref().is_some_and(|t| t.max_words_per_sentence == 0) {
            bail!("translation.max_words_per_sentence must be at least 1");
        }
        Ok(())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        match &self.vocab {
            Some(p) => self.resolve(p),
            None => bundled_data_dir().join("cl100k_base.tiktoken"),
        }
    }

    pub fn ledger_path(&self) -> Option<PathBuf> {
        self.ledger.as_deref().map(|p| self.resolve(p))
    }

    pub fn upstream(&self) -> UpstreamSpec {
        self.upstream.clone().unwrap_or_else(UpstreamSpec::echo)
    }

    pub fn load_vocab(&self) -> Result<Arc<Vocabulary>> {
        let path = self.vocab_path();
        let vocab = Vocabulary::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(Arc::new(vocab))
    }

    /// WordNet is only read when something will use it.
    pub fn load_lexicon(&self, with_synonyms: bool) -> Result<Arc<Lexicon>> {
        let abbreviations = match &self.abbreviations {
            Some(p) => Abbreviations::load(self.resolve(p))?,
            None => Abbreviations::bundled(),
        };
        let wants_wordnet = with_synonyms
            || self
                .oracle
                .as_ref()
                .is_some_and(|o| o.dictionary_ref.as_deref() == Some("wordnet"));
        let lexicon = if wants_wordnet {
            let dir = match &self.wordnet {
                Some(p) => self.resolve(p),
                None => bundled_data_dir().join("wordnet"),
            };
            Lexicon::load_wordnet(&dir).with_context(|| format!("loading WordNet from {}", dir.display()))?
        } else {
            Lexicon::empty()
        };
        Ok(Arc::new(lexicon.with_abbreviations(abbreviations)))
    }

    /// Engine with every configured resource attached. `sweep_transform`
    /// loads synonyms even when the base config does not enable Transform.
    pub fn abstractor(&self, vocab: Arc<Vocabulary>, sweep_transform: bool) -> Result<Abstractor> {
        let lexicon = self.load_lexicon(sweep_transform || self.abstraction.enables(EditKind::Transform))?;
        let mut engine = Abstractor::new(self.abstraction.clone(), vocab.clone(), lexicon.clone())?;
        if let Some(oracle) = &self.oracle {
            engine = engine.with_oracle(oracle.build(&lexicon, &self.base_dir)?);
        }
        if let Some(t) = &self.translation {
            let table = TranslationTable::load(
                self.resolve(&t.table),
                &vocab,
                &t.source_lang,
                &t.target_lang,
                t.max_words_per_sentence,
            )?;
            engine = engine.with_translation(Arc::new(table));
        }
        engine.check_resources()?;
        Ok(engine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mondrian_core::Objective;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "vocab = \"ranks.tiktoken\"\n[abstraction]\nalpha = 0.9\nobjective = \"char\"\nops = [\"delete\"]\n",
        )
        .unwrap();
        let json_path = dir.path().join("c.json");
        std::fs::write(
            &json_path,
            r#"{"vocab": "ranks.tiktoken", "abstraction": {"alpha": 0.9, "objective": "char", "ops": ["delete"]}}"#,
        )
        .unwrap();
        let a = RuntimeConfig::load(&toml_path).unwrap();
        let b = RuntimeConfig::load(&json_path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.abstraction.objective, Objective::Char);
        assert_eq!(a.vocab_path(), dir.path().join("ranks.tiktoken"));
        assert!(a.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "vocabulary = \"x\"\n").unwrap();
        assert!(RuntimeConfig::load(&path).is_err());
        std::fs::write(&path, "[abstraction]\nalfa = 0.5\n").unwrap();
        assert!(RuntimeConfig::load(&path).is_err());
        let yaml = dir.path().join("c.yaml");
        std::fs::write(&yaml, "").unwrap();
        assert!(RuntimeConfig::load(&yaml).is_err());
    }

    #[test]
    fn pricing_section() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[pricing.user]\nunit = \"per_1k_tokens\"\ninput_rate = \"0.002\"\noutput_rate = \"0.002\"\n\
             [pricing.upstream]\nunit = \"per_1k_chars\"\ninput_rate = \"0.001\"\noutput_rate = \"0.001\"\n",
        )
        .unwrap();
        let c = RuntimeConfig::load(&path).unwrap();
        assert_eq!(c.pricing.upstream.unit, PricingUnit::Per1kChars);
        assert_eq!(c.pricing.user.input_rate, "0.002".parse().unwrap());
    }
}
