//! Aspect-level and document-level corpora, and minibatching.
//!
//! Aspect files are column-oriented: one token per line as
//! `token<TAB>ae_label<TAB>as_label`, sentences separated by blank lines,
//! `-` for "no sentiment". Document files hold one document per line as
//! `label<TAB>token token ...`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, ImnError, Result};
use crate::labels::{AeLabel, GoldSentiment, Sentiment};
use crate::vocab::{Vocabulary, PAD};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AspectInstance {
    pub tokens: Vec<String>,
    pub ae_labels: Vec<AeLabel>,
    pub as_labels: Vec<GoldSentiment>,
}

impl AspectInstance {
    /// Builds an instance and checks gold well-formedness.
    pub fn new(
        tokens: Vec<String>,
        ae_labels: Vec<AeLabel>,
        as_labels: Vec<GoldSentiment>,
    ) -> Result<Self> {
        let inst = AspectInstance {
            tokens,
            ae_labels,
            as_labels,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(invalid!("empty sentence"));
        }
        if self.ae_labels.len() != n || self.as_labels.len() != n {
            return Err(invalid!(
                "{} tokens but {} extraction and {} sentiment labels",
                n,
                self.ae_labels.len(),
                self.as_labels.len()
            ));
        }
        let mut prev = AeLabel::O;
        let mut span_sentiment = GoldSentiment::None;
        for (i, (&ae, &sent)) in self.ae_labels.iter().zip(&self.as_labels).enumerate() {
            match ae {
                AeLabel::IA if !matches!(prev, AeLabel::BA | AeLabel::IA) => {
                    return Err(invalid!("token {i}: IA after {prev}"));
                }
                AeLabel::IP if !matches!(prev, AeLabel::BP | AeLabel::IP) => {
                    return Err(invalid!("token {i}: IP after {prev}"));
                }
                _ => {}
            }
            if ae.is_aspect() == (sent == GoldSentiment::None) {
                return Err(invalid!(
                    "token {i}: sentiment {sent} on a token labelled {ae}"
                ));
            }
            match ae {
                AeLabel::BA => span_sentiment = sent,
                AeLabel::IA if sent != span_sentiment => {
                    return Err(invalid!(
                        "token {i}: sentiment {sent} differs from its aspect's {span_sentiment}"
                    ));
                }
                _ => {}
            }
            prev = ae;
        }
        Ok(())
    }

    /// Gold opinion indicators: 1 on BP/IP tokens, else 0.
    pub fn gold_opinion(&self) -> Vec<f64> {
        self.ae_labels
            .iter()
            .map(|l| if l.is_opinion() { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn parse_aspect_str(text: &str, origin: &Path) -> Result<Vec<AspectInstance>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut ae = Vec::new();
    let mut sent = Vec::new();
    let mut start_line = 1;

    let err = |line: usize, message: String| ImnError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut flush = |tokens: &mut Vec<String>,
                     ae: &mut Vec<AeLabel>,
                     sent: &mut Vec<GoldSentiment>,
                     start_line: usize|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let inst = AspectInstance::new(
            std::mem::take(tokens),
            std::mem::take(ae),
            std::mem::take(sent),
        )
        .map_err(|e| err(start_line, format!("sentence starting here: {e}")))?;
        out.push(inst);
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut ae, &mut sent, start_line)?;
            continue;
        }
        if tokens.is_empty() {
            start_line = lineno;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(
                lineno,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        if cols[0].is_empty() {
            return Err(err(lineno, "empty token".into()));
        }
        let label: AeLabel = cols[1].parse().map_err(|e: ImnError| err(lineno, e.to_string()))?;
        let s: GoldSentiment = cols[2].parse().map_err(|e: ImnError| err(lineno, e.to_string()))?;
        tokens.push(cols[0].to_string());
        ae.push(label);
        sent.push(s);
    }
    flush(&mut tokens, &mut ae, &mut sent, start_line)?;
    Ok(out)
}

pub fn parse_aspect_file(path: impl AsRef<Path>) -> Result<Vec<AspectInstance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ImnError::io(path, e))?;
    parse_aspect_str(&text, path)
}

pub fn serialize_aspect(instances: &[AspectInstance]) -> String {
    let mut out = String::new();
    for (k, inst) in instances.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        for ((tok, ae), s) in inst.tokens.iter().zip(&inst.ae_labels).zip(&inst.as_labels) {
            let _ = writeln!(out, "{tok}\t{ae}\t{s}");
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DocKind {
    /// Document sentiment (pos/neg/neu).
    Sentiment,
    /// Domain of origin; class ids follow the configured domain list.
    Domain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentInstance {
    pub tokens: Vec<String>,
    pub kind: DocKind,
    pub label: usize,
}

/// Parses one document per line. For [`DocKind::Domain`] the label must be
/// one of `domains`, and its id is its position there.
pub fn parse_doc_str(
    text: &str,
    origin: &Path,
    kind: DocKind,
    domains: &[String],
) -> Result<Vec<DocumentInstance>> {
    let err = |line: usize, message: String| ImnError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, body)) = line.split_once('\t') else {
            return Err(err(lineno, "expected label<TAB>text".into()));
        };
        let label = match kind {
            DocKind::Sentiment => label
                .parse::<Sentiment>()
                .map_err(|e| err(lineno, e.to_string()))?
                .index(),
            DocKind::Domain => domains
                .iter()
                .position(|d| d == label)
                .ok_or_else(|| err(lineno, format!("unknown domain {label:?}")))?,
        };
        let tokens: Vec<String> = body.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(err(lineno, "empty document text".into()));
        }
        out.push(DocumentInstance {
            tokens,
            kind,
            label,
        });
    }
    Ok(out)
}

pub fn parse_doc_file(
    path: impl AsRef<Path>,
    kind: DocKind,
    domains: &[String],
) -> Result<Vec<DocumentInstance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ImnError::io(path, e))?;
    parse_doc_str(&text, path, kind, domains)
}

/// Raw text for tagging: one sentence per line, whitespace-tokenized.
pub fn parse_raw_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

/// Shuffles under `rng` and splits into consecutive chunks of `batch_size`.
/// Every instance appears exactly once.
pub fn make_batches<'a, T, R: Rng + ?Sized>(
    instances: &'a [T],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<&'a T>>> {
    if batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &instances[i]).collect())
        .collect())
}

/// Draws `size` distinct instances (or all of them if fewer exist).
pub fn sample_batch<'a, T, R: Rng + ?Sized>(
    instances: &'a [T],
    size: usize,
    rng: &mut R,
) -> Vec<&'a T> {
    let amount = size.min(instances.len());
    rand::seq::index::sample(rng, instances.len(), amount)
        .into_iter()
        .map(|i| &instances[i])
        .collect()
}

/// A padded minibatch of token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, max_len]`, padded with [`PAD`].
    pub token_ids: Vec<Vec<usize>>,
    /// `true` exactly on real (non-padding) positions.
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_tokens<S: AsRef<str>>(sentences: &[&[S]], vocab: &Vocabulary) -> Result<Self> {
        if sentences.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(sentences.len());
        let mut mask = Vec::with_capacity(sentences.len());
        for (k, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(invalid!("sentence {k} in batch is empty"));
            }
            let mut ids: Vec<usize> = s.iter().map(|t| vocab.id(t.as_ref())).collect();
            let mut m = vec![true; ids.len()];
            ids.resize(max_len, PAD);
            m.resize(max_len, false);
            token_ids.push(ids);
            mask.push(m);
        }
        Ok(Batch { token_ids, mask })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Drops padding and lays sentences end to end.
    pub fn packed(&self) -> PackedBatch {
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(self.len());
        let mut token_sentence = Vec::new();
        for (k, (row, m)) in self.token_ids.iter().zip(&self.mask).enumerate() {
            let start = ids.len();
            for (&id, &keep) in row.iter().zip(m) {
                if keep {
                    ids.push(id);
                    token_sentence.push(k);
                }
            }
            segments.push((start, ids.len() - start));
        }
        PackedBatch {
            ids,
            segments,
            token_sentence,
        }
    }
}

/// Token ids of a batch laid end to end, with per-sentence `(start, len)` segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    pub ids: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    /// Sentence index of each packed token.
    pub token_sentence: Vec<usize>,
}

impl PackedBatch {
    pub fn num_tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.segments.len()
    }
}
