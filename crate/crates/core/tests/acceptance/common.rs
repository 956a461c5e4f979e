use std::path::{Path, PathBuf};

use imn::data::{parse_aspect_file, parse_doc_file, AspectInstance, DocKind, DocumentInstance};
use imn::encoders::SharedEncoderConfig;
use imn::model::{Imn, ModelConfig};
use imn::params::uniform;
use imn::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/memorization")
}

pub struct Fixture {
    pub aspect: Vec<AspectInstance>,
    pub sentiment_docs: Vec<DocumentInstance>,
    pub domain_docs: Vec<DocumentInstance>,
}

impl Fixture {
    pub fn vocab(&self) -> Vocabulary {
        let streams = self
            .aspect
            .iter()
            .map(|i| i.tokens.as_slice())
            .chain(self.sentiment_docs.iter().map(|d| d.tokens.as_slice()))
            .chain(self.domain_docs.iter().map(|d| d.tokens.as_slice()));
        Vocabulary::build(streams, 1).unwrap()
    }
}

/// The 20-sentence memorization corpus and its document corpora.
pub fn memorization_fixture() -> Fixture {
    let dir = fixture_dir();
    let domains = ["restaurant".to_string(), "laptop".to_string()];
    Fixture {
        aspect: parse_aspect_file(dir.join("train.tsv")).unwrap(),
        sentiment_docs: parse_doc_file(dir.join("sentiment_docs.tsv"), DocKind::Sentiment, &domains).unwrap(),
        domain_docs: parse_doc_file(dir.join("domain_docs.tsv"), DocKind::Domain, &domains).unwrap(),
    }
}

/// Default architecture with narrow embeddings and filter banks.
pub fn narrow_config(general: usize, domain: usize, first_filters: usize) -> ModelConfig {
    ModelConfig {
        general_dim: general,
        domain_dim: domain,
        shared: SharedEncoderConfig {
            first_filters,
            filters: 2 * first_filters,
            ..SharedEncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// A model whose embeddings are uniform in `(-bound, bound)`.
pub fn build_model(config: ModelConfig, vocab: &Vocabulary, seed: u64, bound: f64) -> Imn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = uniform(&mut rng, &[vocab.len(), config.general_dim], bound);
    let d = uniform(&mut rng, &[vocab.len(), config.domain_dim], bound);
    Imn::new(config, g, d, &mut rng).unwrap()
}
