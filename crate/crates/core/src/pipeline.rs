//! End-to-end plumbing from a [`RunConfig`] to a trained model.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{parse_aspect_file, parse_doc_file, AspectInstance, DocKind, DocumentInstance};
use crate::error::{ImnError, Result};
use crate::model::Imn;
use crate::training::{train, TrainObserver, TrainOutcome, TrainingData};
use crate::vocab::{load_embeddings, random_embeddings, Vocabulary};

pub const CHECKPOINT_FILE: &str = "model.imn";

pub struct Corpora {
    pub aspect: Vec<AspectInstance>,
    pub sentiment_docs: Vec<DocumentInstance>,
    pub domain_docs: Vec<DocumentInstance>,
}

impl Corpora {
    pub fn data(&self) -> TrainingData<'_> {
        TrainingData {
            aspect: &self.aspect,
            sentiment_docs: &self.sentiment_docs,
            domain_docs: &self.domain_docs,
        }
    }

    /// Every token stream, aspect sentences first.
    pub fn token_streams(&self) -> impl Iterator<Item = &[String]> {
        self.aspect
            .iter()
            .map(|i| i.tokens.as_slice())
            .chain(self.sentiment_docs.iter().map(|d| d.tokens.as_slice()))
            .chain(self.domain_docs.iter().map(|d| d.tokens.as_slice()))
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| ImnError::Config(format!("missing required key {key}")))
}

pub fn load_corpora(cfg: &RunConfig) -> Result<Corpora> {
    Ok(Corpora {
        aspect: parse_aspect_file(required(&cfg.train, "train")?)?,
        sentiment_docs: parse_doc_file(
            required(&cfg.sentiment_docs, "sentiment_docs")?,
            DocKind::Sentiment,
            &cfg.domains,
        )?,
        domain_docs: parse_doc_file(
            required(&cfg.domain_docs, "domain_docs")?,
            DocKind::Domain,
            &cfg.domains,
        )?,
    })
}

/// Embedding matrices from the configured files, or uniform draws when a file is not set.
/// Parameters are initialized from their own stream of the run seed.
pub fn init_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Imn> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    rng.set_stream(1);
    let mc = &cfg.model;
    let general = match &cfg.general_embeddings {
        Some(p) => load_embeddings(p, vocab, mc.general_dim, &mut rng)?,
        None => random_embeddings(vocab, mc.general_dim, &mut rng),
    };
    let domain = match &cfg.domain_embeddings {
        Some(p) => load_embeddings(p, vocab, mc.domain_dim, &mut rng)?,
        None => random_embeddings(vocab, mc.domain_dim, &mut rng),
    };
    Imn::new(mc.clone(), general, domain, &mut rng)
}

pub struct TrainedRun {
    pub vocab: Vocabulary,
    pub model: Imn,
    pub outcome: TrainOutcome,
    pub corpora: Corpora,
}

/// Loads the configured corpora, builds the vocabulary over all of them, and trains.
pub fn run_training(cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<TrainedRun> {
    cfg.validate(true)?;
    let corpora = load_corpora(cfg)?;
    let vocab = Vocabulary::build(corpora.token_streams(), cfg.min_count)?;
    let mut model = init_model(cfg, &vocab)?;
    let outcome = train(&mut model, &vocab, &corpora.data(), &cfg.training, observer)?;
    Ok(TrainedRun {
        vocab,
        model,
        outcome,
        corpora,
    })
}
