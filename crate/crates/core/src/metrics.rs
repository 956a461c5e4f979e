//! Span decoding and the five evaluation metrics: F1-a, F1-o, acc-s, F1-s, F1-I.

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;
use serde_json::json;

use crate::data::AspectInstance;
use crate::error::{invalid, Result};
use crate::labels::{AeLabel, GoldSentiment, Sentiment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Aspect,
    Opinion,
}

/// A labeled run of tokens, `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
    pub sentiment: Option<Sentiment>,
}

impl Span {
    /// Number of tokens covered.
    pub fn width(&self) -> usize {
        self.end + 1 - self.start
    }

    fn bounds(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Decodes BIO labels into spans. An `IA`/`IP` that does not continue a span
/// of its own kind opens a new one.
pub fn extract_spans(labels: &[AeLabel]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &label) in labels.iter().enumerate() {
        let kind = match label {
            AeLabel::BA | AeLabel::IA => Some(SpanKind::Aspect),
            AeLabel::BP | AeLabel::IP => Some(SpanKind::Opinion),
            AeLabel::O => None,
        };
        let continues = matches!(label, AeLabel::IA | AeLabel::IP)
            && open.is_some_and(|s| Some(s.kind) == kind);
        if continues {
            if let Some(s) = open.as_mut() {
                s.end = i;
            }
            continue;
        }
        spans.extend(open.take());
        open = kind.map(|kind| Span {
            start: i,
            end: i,
            kind,
            sentiment: None,
        });
    }
    spans.extend(open);
    spans
}

/// Labels each aspect span with the argmax of the sentiment distribution at
/// its first token. Opinion spans are left untouched.
pub fn assign_sentiments(spans: &mut [Span], y_as: &[[f64; Sentiment::COUNT]]) -> Result<()> {
    for span in spans.iter_mut().filter(|s| s.kind == SpanKind::Aspect) {
        let dist = y_as.get(span.start).ok_or_else(|| {
            invalid!("span starts at {} but only {} distributions", span.start, y_as.len())
        })?;
        span.sentiment = Some(Sentiment::argmax(dist));
    }
    Ok(())
}

/// Most probable extraction label per token; ties go to the earlier class.
pub fn decode_labels(y_ae: &[[f64; AeLabel::COUNT]]) -> Vec<AeLabel> {
    y_ae.iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            AeLabel::from_index(best).expect("5 classes")
        })
        .collect()
}

/// Decoded output for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<AeLabel>,
    pub aspects: Vec<Span>,
    pub opinions: Vec<Span>,
}

impl Prediction {
    pub fn from_labels(labels: Vec<AeLabel>, y_as: &[[f64; Sentiment::COUNT]]) -> Result<Self> {
        if labels.len() != y_as.len() {
            return Err(invalid!(
                "{} extraction labels but {} sentiment distributions",
                labels.len(),
                y_as.len()
            ));
        }
        let mut spans = extract_spans(&labels);
        assign_sentiments(&mut spans, y_as)?;
        let (aspects, opinions) = spans.into_iter().partition(|s| s.kind == SpanKind::Aspect);
        Ok(Prediction {
            labels,
            aspects,
            opinions,
        })
    }

    pub fn from_outputs(
        y_ae: &[[f64; AeLabel::COUNT]],
        y_as: &[[f64; Sentiment::COUNT]],
    ) -> Result<Self> {
        Self::from_labels(decode_labels(y_ae), y_as)
    }
}

/// Gold spans of one sentence; conflict aspects carry no sentiment.
struct GoldSpans {
    aspects: Vec<(Span, GoldSentiment)>,
    opinions: Vec<Span>,
}

fn gold_spans(inst: &AspectInstance) -> GoldSpans {
    let mut aspects = Vec::new();
    let mut opinions = Vec::new();
    for mut span in extract_spans(&inst.ae_labels) {
        match span.kind {
            SpanKind::Aspect => {
                let gold = inst.as_labels[span.start];
                span.sentiment = gold.trainable();
                aspects.push((span, gold));
            }
            SpanKind::Opinion => opinions.push(span),
        }
    }
    GoldSpans { aspects, opinions }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    fn add(&mut self, tp: usize, predicted: usize, gold: usize) {
        self.tp += tp;
        self.fp += predicted - tp;
        self.fn_ += gold - tp;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalCounts {
    pub aspect: MatchCounts,
    pub opinion: MatchCounts,
    pub interactive: MatchCounts,
    /// `confusion[gold][predicted]` over correctly extracted non-conflict aspects.
    pub sentiment_confusion: [[usize; Sentiment::COUNT]; Sentiment::COUNT],
}

impl EvalCounts {
    pub fn matched_spans(&self) -> usize {
        self.sentiment_confusion.iter().flatten().sum()
    }

    pub fn correct_sentiments(&self) -> usize {
        (0..Sentiment::COUNT).map(|k| self.sentiment_confusion[k][k]).sum()
    }

    /// Per-class F1 from the confusion matrix; zero-support classes score 0.
    pub fn class_f1(&self, class: Sentiment) -> f64 {
        let k = class.index();
        let tp = self.sentiment_confusion[k][k];
        let predicted: usize = (0..Sentiment::COUNT).map(|g| self.sentiment_confusion[g][k]).sum();
        let gold: usize = self.sentiment_confusion[k].iter().sum();
        f1(ratio(tp, predicted), ratio(tp, gold))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub f1_a: f64,
    pub f1_o: f64,
    pub acc_s: f64,
    pub f1_s: f64,
    pub f1_i: f64,
    /// Set when no aspect span was extracted correctly, so acc-s and F1-s are vacuous.
    pub no_matched_spans: bool,
    pub counts: EvalCounts,
}

impl EvalReport {
    fn from_counts(counts: EvalCounts) -> Self {
        let matched = counts.matched_spans();
        let f1_s = Sentiment::ALL.iter().map(|&c| counts.class_f1(c)).sum::<f64>()
            / Sentiment::COUNT as f64;
        EvalReport {
            f1_a: counts.aspect.f1(),
            f1_o: counts.opinion.f1(),
            acc_s: ratio(counts.correct_sentiments(), matched),
            f1_s,
            f1_i: counts.interactive.f1(),
            no_matched_spans: matched == 0,
            counts,
        }
    }

    /// The five metrics in report order.
    pub fn metrics(&self) -> [(&'static str, f64); 5] {
        [
            ("F1-a", self.f1_a),
            ("F1-o", self.f1_o),
            ("acc-s", self.acc_s),
            ("F1-s", self.f1_s),
            ("F1-I", self.f1_i),
        ]
    }

    /// JSON report: percentages rounded to two decimals plus raw counts.
    pub fn to_json(&self) -> serde_json::Value {
        let pct = |v: f64| (v * 10000.0).round() / 100.0;
        let mc = |c: &MatchCounts| json!({"tp": c.tp, "fp": c.fp, "fn": c.fn_});
        json!({
            "f1_a": pct(self.f1_a),
            "f1_o": pct(self.f1_o),
            "acc_s": pct(self.acc_s),
            "f1_s": pct(self.f1_s),
            "f1_i": pct(self.f1_i),
            "no_matched_spans": self.no_matched_spans,
            "aspect": mc(&self.counts.aspect),
            "opinion": mc(&self.counts.opinion),
            "interactive": mc(&self.counts.interactive),
            "sentiment_confusion": self.counts.sentiment_confusion,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.metrics() {
            writeln!(f, "{name:<6} {:6.2}", v * 100.0)?;
        }
        let c = &self.counts;
        for (name, m) in [("aspect", &c.aspect), ("opinion", &c.opinion), ("interactive", &c.interactive)] {
            writeln!(f, "{name} tp={} fp={} fn={}", m.tp, m.fp, m.fn_)?;
        }
        write!(f, "sentiment matched={} correct={}", c.matched_spans(), c.correct_sentiments())?;
        if self.no_matched_spans {
            write!(f, " (no matched spans)")?;
        }
        Ok(())
    }
}

/// Scores predictions against gold sentences.
///
/// Conflict-labeled gold aspects count toward F1-a only. For F1-I they are
/// removed from the gold set, and predictions landing exactly on one are ignored.
pub fn compute_metrics(predictions: &[Prediction], gold: &[AspectInstance]) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(invalid!(
            "{} predictions for {} gold sentences",
            predictions.len(),
            gold.len()
        ));
    }
    let mut counts = EvalCounts::default();
    for (k, (pred, inst)) in predictions.iter().zip(gold).enumerate() {
        if pred.labels.len() != inst.len() {
            return Err(invalid!(
                "sentence {k}: {} predicted labels for {} tokens",
                pred.labels.len(),
                inst.len()
            ));
        }
        let g = gold_spans(inst);

        let gold_aspects: HashSet<(usize, usize)> = g.aspects.iter().map(|(s, _)| s.bounds()).collect();
        let tp = pred.aspects.iter().filter(|s| gold_aspects.contains(&s.bounds())).count();
        counts.aspect.add(tp, pred.aspects.len(), gold_aspects.len());

        let gold_opinions: HashSet<(usize, usize)> = g.opinions.iter().map(Span::bounds).collect();
        let tp = pred.opinions.iter().filter(|s| gold_opinions.contains(&s.bounds())).count();
        counts.opinion.add(tp, pred.opinions.len(), gold_opinions.len());

        let conflicts: HashSet<(usize, usize)> = g
            .aspects
            .iter()
            .filter(|(_, gs)| *gs == GoldSentiment::Conflict)
            .map(|(s, _)| s.bounds())
            .collect();
        let labeled: Vec<(Span, Sentiment)> = g
            .aspects
            .iter()
            .filter_map(|(s, _)| s.sentiment.map(|v| (*s, v)))
            .collect();
        let considered: Vec<&Span> = pred
            .aspects
            .iter()
            .filter(|s| !conflicts.contains(&s.bounds()))
            .collect();
        let mut tp = 0;
        for p in &considered {
            if let Some((_, gs)) = labeled.iter().find(|(s, _)| s.bounds() == p.bounds()) {
                let ps = p.sentiment.unwrap_or(Sentiment::Pos);
                counts.sentiment_confusion[gs.index()][ps.index()] += 1;
                if ps == *gs {
                    tp += 1;
                }
            }
        }
        counts.interactive.add(tp, considered.len(), labeled.len());
    }
    Ok(EvalReport::from_counts(counts))
}
