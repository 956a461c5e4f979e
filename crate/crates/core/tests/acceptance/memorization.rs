//! The 20-sentence fixture trains to dev F1-I >= 0.95 within 300 epochs
//! under the default model and optimizer settings.

use imn::config::RunConfig;
use imn::model::ModelConfig;
use imn::pipeline::run_training;
use imn::training::TrainConfig;

use crate::common::{fixture_dir, Outcome};

pub fn run() -> Outcome {
    let cfg = RunConfig::from_file(fixture_dir().join("run.cfg")).unwrap();
    let defaults = TrainConfig {
        seed: cfg.training.seed,
        max_epochs: cfg.training.max_epochs,
        target_dev_f1_i: cfg.training.target_dev_f1_i,
        ..TrainConfig::default()
    };
    if cfg.model != ModelConfig::default() || cfg.training != defaults || cfg.training.max_epochs > 300 {
        return Outcome::fail("fixture config departs from the defaults");
    }
    let run = run_training(&cfg, &mut ()).unwrap();
    let Some(best) = run.outcome.best() else {
        return Outcome::fail("no epoch completed");
    };
    Outcome::new(
        best.dev.f1_i >= 0.95 && best.epoch < 300,
        format!(
            "{} aspect sentences, {}+{} documents, dev F1-I {:.2} at epoch {} ({} epochs run)",
            run.corpora.aspect.len(),
            run.corpora.sentiment_docs.len(),
            run.corpora.domain_docs.len(),
            best.dev.f1_i * 100.0,
            best.epoch,
            run.outcome.epochs.len()
        ),
    )
}
