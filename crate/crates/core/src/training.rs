//! Losses, the pretrain-then-alternate training schedule, and dev-set model selection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CeTarget, Tape, Var};
use crate::data::{make_batches, sample_batch, AspectInstance, Batch, DocKind, DocumentInstance, PackedBatch};
use crate::error::{invalid, shape_err, Result};
use crate::labels::Sentiment;
use crate::metrics::{compute_metrics, EvalReport, Prediction};
use crate::model::{ForwardOptions, Imn, Mode, SentenceOutputs};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::vocab::Vocabulary;

/// Groups updated by the aspect-level loss. Document heads stay frozen.
pub const ASPECT_GROUPS: [ParamGroup; 4] = [
    ParamGroup::Shared,
    ParamGroup::AspectExtraction,
    ParamGroup::AspectSentiment,
    ParamGroup::ReEncoder,
];

/// Groups updated by the document-level loss.
pub const DOC_GROUPS: [ParamGroup; 3] = [
    ParamGroup::Shared,
    ParamGroup::DocSentiment,
    ParamGroup::DocDomain,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Message-passing iterations `T`.
    pub iterations: usize,
    /// A document-level update follows every `doc_interval`-th aspect batch.
    pub doc_interval: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_pretrain_epochs: usize,
    pub max_epochs: usize,
    pub dev_fraction: f64,
    pub seed: u64,
    pub scheduled_sampling: bool,
    /// Stop the main loop once dev F1-I reaches this value.
    pub target_dev_f1_i: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2,
            doc_interval: 2,
            batch_size: 32,
            learning_rate: 1e-4,
            max_pretrain_epochs: 5,
            max_epochs: 50,
            dev_fraction: 0.2,
            seed: 0,
            scheduled_sampling: true,
            target_dev_f1_i: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.doc_interval == 0 {
            return Err(invalid!("doc_interval must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(invalid!("max_epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(invalid!("dev_fraction must lie in (0, 1), got {}", self.dev_fraction));
        }
        Ok(())
    }
}

/// Inverse-sigmoid decay `5 / (5 + exp(epoch / 5))`: the probability of
/// feeding gold opinion indicators instead of predicted ones.
pub fn scheduled_sampling_prob(epoch: usize) -> f64 {
    5.0 / (5.0 + (epoch as f64 / 5.0).exp())
}

/// Token-level cross-entropy of the final-iteration outputs, averaged within
/// each sentence and then over the batch. Sentiment terms count only on gold
/// aspect tokens with a trainable (non-conflict) label.
pub fn aspect_loss(
    tape: &mut Tape,
    y_ae: Var,
    y_as: Var,
    segments: &[(usize, usize)],
    gold: &[&AspectInstance],
) -> Result<Var> {
    if segments.len() != gold.len() || gold.is_empty() {
        return Err(invalid!(
            "{} gold sentences for {} predicted",
            gold.len(),
            segments.len()
        ));
    }
    let batch = gold.len() as f64;
    let mut ae = Vec::new();
    let mut sentiment = Vec::new();
    for (&(start, n), inst) in segments.iter().zip(gold) {
        if inst.len() != n || inst.as_labels.len() != n {
            return Err(shape_err!("gold labels for {} tokens, sentence has {n}", inst.len()));
        }
        let weight = 1.0 / (n as f64 * batch);
        for (j, (label, gs)) in inst.ae_labels.iter().zip(&inst.as_labels).enumerate() {
            ae.push(CeTarget {
                row: start + j,
                class: label.index(),
                weight,
            });
            if let (true, Some(s)) = (label.is_aspect(), gs.trainable()) {
                sentiment.push(CeTarget {
                    row: start + j,
                    class: s.index(),
                    weight,
                });
            }
        }
    }
    let l_ae = tape.cross_entropy(y_ae, ae)?;
    let l_as = tape.cross_entropy(y_as, sentiment)?;
    tape.add(l_ae, l_as)
}

fn mean_ce(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(invalid!("document batch is empty"));
    }
    if tape.value(probs).rows() != labels.len() {
        return Err(shape_err!(
            "{} document labels for {} predictions",
            labels.len(),
            tape.value(probs).rows()
        ));
    }
    let w = 1.0 / labels.len() as f64;
    let targets = labels
        .iter()
        .enumerate()
        .map(|(row, &class)| CeTarget { row, class, weight: w })
        .collect();
    tape.cross_entropy(probs, targets)
}

/// Mean cross-entropy over the sentiment documents plus mean cross-entropy
/// over the domain documents.
pub fn doc_loss(
    tape: &mut Tape,
    ds_probs: Var,
    ds_labels: &[usize],
    dd_probs: Var,
    dd_labels: &[usize],
) -> Result<Var> {
    let ds = mean_ce(tape, ds_probs, ds_labels)?;
    let dd = mean_ce(tape, dd_probs, dd_labels)?;
    tape.add(ds, dd)
}

pub fn pack<S: AsRef<str>>(sentences: &[&[S]], vocab: &Vocabulary) -> Result<PackedBatch> {
    Ok(Batch::from_tokens(sentences, vocab)?.packed())
}

/// Eval-mode outputs of the final iteration for each sentence. Empty
/// sentences yield empty outputs.
pub fn predict<S: AsRef<str>>(
    model: &Imn,
    vocab: &Vocabulary,
    sentences: &[&[S]],
    iterations: usize,
    batch_size: usize,
) -> Result<Vec<SentenceOutputs>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out: Vec<Option<SentenceOutputs>> = vec![None; sentences.len()];
    let nonempty: Vec<usize> = (0..sentences.len()).filter(|&i| !sentences[i].is_empty()).collect();
    for chunk in nonempty.chunks(batch_size) {
        let refs: Vec<&[S]> = chunk.iter().map(|&i| sentences[i]).collect();
        let packed = pack(&refs, vocab)?;
        let mut tape = Tape::new(model.params());
        let state = model.forward(&mut tape, &packed, &ForwardOptions::eval(iterations), &mut rng)?;
        for (&i, s) in chunk.iter().zip(state.last().sentences(&tape, &state.segments)) {
            out[i] = Some(s);
        }
    }
    Ok(out
        .into_iter()
        .map(|o| {
            o.unwrap_or_else(|| SentenceOutputs {
                y_ae: Vec::new(),
                y_as: Vec::new(),
                p_op: Vec::new(),
                attention: crate::tensor::Tensor::zeros(&[0, 0]),
                y_ds: Vec::new(),
                y_dd: Vec::new(),
                a_ds: Vec::new(),
                a_dd: Vec::new(),
            })
        })
        .collect())
}

/// Decoded spans for each sentence.
pub fn predict_spans<S: AsRef<str>>(
    model: &Imn,
    vocab: &Vocabulary,
    sentences: &[&[S]],
    iterations: usize,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    predict(model, vocab, sentences, iterations, batch_size)?
        .iter()
        .map(|o| Prediction::from_outputs(&o.y_ae, &o.y_as))
        .collect()
}

pub fn evaluate(
    model: &Imn,
    vocab: &Vocabulary,
    instances: &[AspectInstance],
    iterations: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    let sentences: Vec<&[String]> = instances.iter().map(|i| i.tokens.as_slice()).collect();
    let preds = predict_spans(model, vocab, &sentences, iterations, batch_size)?;
    compute_metrics(&preds, instances)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Aspect,
    Document,
}

/// One optimizer step, reported to a [`TrainObserver`] after the update.
#[derive(Clone, Debug)]
pub struct StepEvent {
    pub phase: Phase,
    pub epoch: usize,
    /// 1-based index of the aspect batch within the epoch (pretraining: the step index).
    pub batch: usize,
    pub loss: f64,
    pub groups: &'static [ParamGroup],
    pub used_gold_opinions: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub sampling_prob: f64,
    pub aspect_loss: f64,
    pub doc_loss: Option<f64>,
    pub dev: EvalReport,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let doc = self.doc_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        format!(
            "epoch {} eps {:.4} aspect_loss {:.6} doc_loss {} dev_f1_i {:.2}",
            self.epoch,
            self.sampling_prob,
            self.aspect_loss,
            doc,
            self.dev.f1_i * 100.0
        )
    }
}

/// Hooks into the training loop; all methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent, _params: &ParamStore) {}
    fn on_pretrain_epoch(&mut self, _epoch: usize, _loss: f64) {}
    fn on_epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

pub struct TrainingData<'a> {
    pub aspect: &'a [AspectInstance],
    pub sentiment_docs: &'a [DocumentInstance],
    pub domain_docs: &'a [DocumentInstance],
}

impl TrainingData<'_> {
    fn validate(&self, num_domains: usize) -> Result<()> {
        if self.aspect.len() < 2 {
            return Err(invalid!("need at least 2 aspect-level sentences to hold out a dev set"));
        }
        if self.sentiment_docs.is_empty() || self.domain_docs.is_empty() {
            return Err(invalid!("document-level corpora must be non-empty"));
        }
        for inst in self.aspect {
            inst.validate()?;
        }
        for (docs, kind, classes) in [
            (self.sentiment_docs, DocKind::Sentiment, Sentiment::COUNT),
            (self.domain_docs, DocKind::Domain, num_domains),
        ] {
            for (k, d) in docs.iter().enumerate() {
                if d.kind != kind || d.label >= classes || d.tokens.is_empty() {
                    return Err(invalid!(
                        "{kind:?} document {k} has kind {:?}, label {} and {} tokens",
                        d.kind,
                        d.label,
                        d.tokens.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub pretrain_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept, by dev F1-I.
    pub best_epoch: Option<usize>,
    pub dev_indices: Vec<usize>,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochLog> {
        self.best_epoch.map(|e| &self.epochs[e])
    }
}

/// Held-out dev indices, drawn with `rng`; at least one sentence lands on each side.
pub fn split_dev<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let dev = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut dev_idx = order[..dev].to_vec();
    let mut train_idx = order[dev..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    (dev_idx, train_idx)
}

struct Trainer<'m, 'o> {
    model: &'m mut Imn,
    adam: Adam,
    rng: ChaCha8Rng,
    observer: &'o mut dyn TrainObserver,
}

impl Trainer<'_, '_> {
    fn doc_step(
        &mut self,
        vocab: &Vocabulary,
        ds: &[&DocumentInstance],
        dd: &[&DocumentInstance],
    ) -> Result<f64> {
        let model = &*self.model;
        let mut tape = Tape::new(model.params());
        let mut heads = Vec::with_capacity(2);
        for (docs, kind) in [(ds, DocKind::Sentiment), (dd, DocKind::Domain)] {
            let toks: Vec<&[String]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
            let packed = pack(&toks, vocab)?;
            let out = model.forward_documents(&mut tape, &packed, kind, Mode::Train, &mut self.rng)?;
            let labels: Vec<usize> = docs.iter().map(|d| d.label).collect();
            heads.push((out.probs, labels));
        }
        let loss = doc_loss(&mut tape, heads[0].0, &heads[0].1, heads[1].0, &heads[1].1)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        drop(tape);
        let frozen = self.model.clone_trainability();
        self.adam.step(self.model.params_mut(), &grads, &DOC_GROUPS, |n| frozen.allows(n))?;
        Ok(value)
    }
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the best dev F1-I.
///
/// Pretraining runs `max_pretrain_epochs` passes over the document corpora
/// (the shorter one cycles). Each main epoch then walks shuffled aspect
/// batches, and after every `doc_interval`-th one also takes a step on one
/// sampled sentiment batch and one sampled domain batch.
pub fn train(
    model: &mut Imn,
    vocab: &Vocabulary,
    data: &TrainingData,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate(model.config().num_domains)?;
    let adam = Adam::new(
        model.params(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut tr = Trainer {
        model,
        adam,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        observer,
    };

    let (dev_idx, train_idx) = split_dev(data.aspect.len(), config.dev_fraction, &mut tr.rng);
    let dev: Vec<AspectInstance> = dev_idx.iter().map(|&i| data.aspect[i].clone()).collect();
    let train_set: Vec<&AspectInstance> = train_idx.iter().map(|&i| &data.aspect[i]).collect();

    let mut pretrain_losses = Vec::new();
    for epoch in 0..config.max_pretrain_epochs {
        let ds = make_batches(data.sentiment_docs, config.batch_size, &mut tr.rng)?;
        let dd = make_batches(data.domain_docs, config.batch_size, &mut tr.rng)?;
        let steps = ds.len().max(dd.len());
        let mut total = 0.0;
        for s in 0..steps {
            let loss = tr.doc_step(vocab, &ds[s % ds.len()], &dd[s % dd.len()])?;
            total += loss;
            let ev = StepEvent {
                phase: Phase::Pretrain,
                epoch,
                batch: s + 1,
                loss,
                groups: &DOC_GROUPS,
                used_gold_opinions: false,
            };
            tr.observer.on_step(&ev, tr.model.params());
        }
        let mean = total / steps as f64;
        pretrain_losses.push(mean);
        tr.observer.on_pretrain_epoch(epoch, mean);
    }

    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 0..config.max_epochs {
        let eps = if config.scheduled_sampling {
            scheduled_sampling_prob(epoch)
        } else {
            0.0
        };
        let batches = make_batches(&train_set, config.batch_size, &mut tr.rng)?;
        let (mut a_total, mut d_total, mut d_steps) = (0.0, 0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let gold: Vec<&AspectInstance> = batch.iter().map(|i| **i).collect();
            let use_gold = config.scheduled_sampling && tr.rng.gen::<f64>() < eps;
            let loss = aspect_step(&mut tr, vocab, &gold, config.iterations, use_gold)?;
            a_total += loss;
            let ev = StepEvent {
                phase: Phase::Aspect,
                epoch,
                batch: b + 1,
                loss,
                groups: &ASPECT_GROUPS,
                used_gold_opinions: use_gold,
            };
            tr.observer.on_step(&ev, tr.model.params());

            if (b + 1) % config.doc_interval == 0 {
                let ds = sample_batch(data.sentiment_docs, config.batch_size, &mut tr.rng);
                let dd = sample_batch(data.domain_docs, config.batch_size, &mut tr.rng);
                let loss = tr.doc_step(vocab, &ds, &dd)?;
                d_total += loss;
                d_steps += 1;
                let ev = StepEvent {
                    phase: Phase::Document,
                    epoch,
                    batch: b + 1,
                    loss,
                    groups: &DOC_GROUPS,
                    used_gold_opinions: false,
                };
                tr.observer.on_step(&ev, tr.model.params());
            }
        }
        let report = evaluate(tr.model, vocab, &dev, config.iterations, config.batch_size)?;
        let log = EpochLog {
            epoch,
            sampling_prob: eps,
            aspect_loss: a_total / batches.len() as f64,
            doc_loss: (d_steps > 0).then(|| d_total / d_steps as f64),
            dev: report,
        };
        tr.observer.on_epoch(&log);
        let f1_i = log.dev.f1_i;
        // ties go to the later epoch, which has seen more training
        if best.as_ref().is_none_or(|(_, b, _)| f1_i >= *b) {
            best = Some((epoch, f1_i, tr.model.params().clone()));
        }
        epochs.push(log);
        if config.target_dev_f1_i.is_some_and(|t| f1_i >= t) {
            break;
        }
    }

    let best_epoch = match best {
        Some((e, _, params)) => {
            tr.model.params_mut().copy_values_from(&params)?;
            Some(e)
        }
        None => None,
    };
    Ok(TrainOutcome {
        pretrain_losses,
        epochs,
        best_epoch,
        dev_indices: dev_idx,
    })
}

fn aspect_step(
    tr: &mut Trainer,
    vocab: &Vocabulary,
    gold: &[&AspectInstance],
    iterations: usize,
    use_gold_opinions: bool,
) -> Result<f64> {
    let toks: Vec<&[String]> = gold.iter().map(|i| i.tokens.as_slice()).collect();
    let packed = pack(&toks, vocab)?;
    let gold_op: Vec<f64> = gold.iter().flat_map(|i| i.gold_opinion()).collect();
    let options = ForwardOptions {
        iterations,
        mode: Mode::Train,
        opinion_override: use_gold_opinions.then_some(gold_op.as_slice()),
    };
    let model = &*tr.model;
    let mut tape = Tape::new(model.params());
    let state = model.forward(&mut tape, &packed, &options, &mut tr.rng)?;
    let last = state.last();
    let loss = aspect_loss(&mut tape, last.y_ae, last.y_as, &state.segments, gold)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    drop(tape);
    let frozen = tr.model.clone_trainability();
    tr.adam.step(tr.model.params_mut(), &grads, &ASPECT_GROUPS, |n| frozen.allows(n))?;
    Ok(value)
}
