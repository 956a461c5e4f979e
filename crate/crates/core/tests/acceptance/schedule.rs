//! Instrumented two-epoch training: aspect steps leave the document heads
//! untouched, and document steps fire exactly after every second aspect batch.

use std::collections::HashSet;

use imn::params::{ParamGroup, ParamStore};
use imn::training::{train, Phase, StepEvent, TrainConfig, TrainObserver, TrainingData, ASPECT_GROUPS, DOC_GROUPS};

use crate::common::{build_model, memorization_fixture, narrow_config, Outcome};

struct Audit {
    previous: ParamStore,
    aspect_batches: Vec<(usize, usize)>,
    doc_batches: Vec<(usize, usize)>,
    changed_by_aspect: HashSet<ParamGroup>,
    changed_by_docs: HashSet<ParamGroup>,
    violations: Vec<String>,
}

impl TrainObserver for Audit {
    fn on_step(&mut self, ev: &StepEvent, params: &ParamStore) {
        let changed: HashSet<ParamGroup> = params
            .iter()
            .filter(|(id, p)| p.value != *self.previous.value(*id))
            .map(|(_, p)| p.group)
            .collect();
        let (allowed, seen): (&[ParamGroup], _) = match ev.phase {
            Phase::Aspect => {
                self.aspect_batches.push((ev.epoch, ev.batch));
                (&ASPECT_GROUPS, &mut self.changed_by_aspect)
            }
            Phase::Document => {
                self.doc_batches.push((ev.epoch, ev.batch));
                (&DOC_GROUPS, &mut self.changed_by_docs)
            }
            Phase::Pretrain => (&DOC_GROUPS, &mut self.changed_by_docs),
        };
        for g in &changed {
            if !allowed.contains(g) {
                self.violations
                    .push(format!("{:?} step epoch {} batch {} changed {g}", ev.phase, ev.epoch, ev.batch));
            }
        }
        seen.extend(changed);
        self.previous = params.clone();
    }
}

pub fn run() -> Outcome {
    let fixture = memorization_fixture();
    let vocab = fixture.vocab();
    let mut model = build_model(narrow_config(8, 4, 4), &vocab, 5, 0.05);
    let config = TrainConfig {
        batch_size: 3,
        doc_interval: 2,
        max_pretrain_epochs: 1,
        max_epochs: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut audit = Audit {
        previous: model.params().clone(),
        aspect_batches: Vec::new(),
        doc_batches: Vec::new(),
        changed_by_aspect: HashSet::new(),
        changed_by_docs: HashSet::new(),
        violations: Vec::new(),
    };
    let data = TrainingData {
        aspect: &fixture.aspect,
        sentiment_docs: &fixture.sentiment_docs,
        domain_docs: &fixture.domain_docs,
    };
    let outcome = train(&mut model, &vocab, &data, &config, &mut audit).unwrap();

    let expected: Vec<(usize, usize)> = audit
        .aspect_batches
        .iter()
        .copied()
        .filter(|&(_, b)| b % config.doc_interval == 0)
        .collect();
    let per_epoch = audit.aspect_batches.iter().filter(|(e, _)| *e == 0).count();
    let mut problems = audit.violations.clone();
    if audit.doc_batches != expected {
        problems.push(format!("document steps at {:?}, expected {:?}", audit.doc_batches, expected));
    }
    if outcome.epochs.len() != 2 {
        problems.push(format!("{} epochs ran", outcome.epochs.len()));
    }
    for g in ASPECT_GROUPS {
        if !audit.changed_by_aspect.contains(&g) {
            problems.push(format!("aspect steps never updated {g}"));
        }
    }
    for g in DOC_GROUPS {
        if !audit.changed_by_docs.contains(&g) {
            problems.push(format!("document steps never updated {g}"));
        }
    }
    if problems.is_empty() {
        let batches: Vec<String> = expected.iter().map(|(e, b)| format!("{e}:{b}")).collect();
        Outcome::new(
            true,
            format!(
                "{} aspect steps ({per_epoch} per epoch) never touched theta_ds/theta_dd; document steps at epoch:batch {}",
                audit.aspect_batches.len(),
                batches.join(" ")
            ),
        )
    } else {
        Outcome::fail(problems.join("; "))
    }
}
