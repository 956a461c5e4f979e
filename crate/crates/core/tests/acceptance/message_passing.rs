//! Message passing on a fixture family where aspect identity depends on
//! opinion context out of convolutional reach.
//!
//! Each sentence holds a candidate word. When the sentence also holds an
//! opinion word, at least 10 tokens away, the candidate is an aspect with the
//! opinion's polarity; otherwise it is not an aspect. Without message passing
//! the stacked CNNs see at most 8 tokens to either side, so the candidate's
//! tag cannot depend on the opinion.

use imn::data::{AspectInstance, DocKind, DocumentInstance};
use imn::labels::{AeLabel, GoldSentiment, Sentiment};
use imn::training::{evaluate, train, TrainConfig, TrainingData};
use imn::vocab::Vocabulary;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{build_model, narrow_config, Outcome};

const CANDIDATES: [&str; 6] = ["build", "hinge", "casing", "finish", "bezel", "trackpad"];
const POSITIVE: [&str; 4] = ["great", "superb", "solid", "lovely"];
const NEGATIVE: [&str; 4] = ["awful", "flimsy", "poor", "terrible"];
const FILLER: [&str; 16] = [
    "the", "a", "of", "and", "it", "we", "this", "that", "with", "for", "was", "is", "then", "there", "my", "so",
];
const FOOD: [&str; 4] = ["pasta", "soup", "bread", "curry"];
const MIN_GAP: usize = 10;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Filler sentence of `len` tokens with a candidate and, optionally, an opinion
/// at least `MIN_GAP` tokens from it.
fn sentence(rng: &mut ChaCha8Rng, opinion: Option<Sentiment>) -> AspectInstance {
    let len = rng.gen_range(16..=22);
    let mut tokens: Vec<String> = (0..len).map(|_| FILLER.choose(rng).unwrap().to_string()).collect();
    let mut ae = vec![AeLabel::O; len];
    let mut sent = vec![GoldSentiment::None; len];
    let (p, q) = loop {
        let p = rng.gen_range(0..len);
        let q = rng.gen_range(0..len);
        if p.abs_diff(q) >= MIN_GAP {
            break (p, q);
        }
    };
    tokens[p] = CANDIDATES.choose(rng).unwrap().to_string();
    if let Some(s) = opinion {
        let words = if s == Sentiment::Pos { &POSITIVE } else { &NEGATIVE };
        tokens[q] = words.choose(rng).unwrap().to_string();
        ae[p] = AeLabel::BA;
        sent[p] = GoldSentiment::Label(s);
        ae[q] = AeLabel::BP;
    }
    AspectInstance::new(tokens, ae, sent).unwrap()
}

fn corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<AspectInstance> {
    (0..n)
        .map(|k| {
            let opinion = match k % 4 {
                0 => Some(Sentiment::Pos),
                1 => Some(Sentiment::Neg),
                _ => None,
            };
            sentence(rng, opinion)
        })
        .collect()
}

fn documents(rng: &mut ChaCha8Rng, n: usize) -> (Vec<DocumentInstance>, Vec<DocumentInstance>) {
    let mut ds = Vec::with_capacity(n);
    let mut dd = Vec::with_capacity(n);
    for k in 0..n {
        let (label, opinion) = match k % 3 {
            0 => (0, Some(Sentiment::Pos)),
            1 => (1, Some(Sentiment::Neg)),
            _ => (2, None),
        };
        ds.push(DocumentInstance {
            tokens: sentence(rng, opinion).tokens,
            kind: DocKind::Sentiment,
            label,
        });
        let domain = k % 2;
        let mut tokens = sentence(rng, None).tokens;
        if domain == 0 {
            for t in tokens.iter_mut().filter(|t| CANDIDATES.contains(&t.as_str())) {
                *t = FOOD.choose(rng).unwrap().to_string();
            }
        }
        dd.push(DocumentInstance {
            tokens,
            kind: DocKind::Domain,
            label: domain,
        });
    }
    (ds, dd)
}

fn test_f1_i(iterations: usize, seed: u64, data: &TrainingData, test: &[AspectInstance], vocab: &Vocabulary) -> f64 {
    let mut model = build_model(narrow_config(16, 8, 8), vocab, 100 + seed, 0.5);
    let config = TrainConfig {
        iterations,
        batch_size: 8,
        learning_rate: 1e-3,
        max_pretrain_epochs: 2,
        max_epochs: 150,
        seed,
        ..TrainConfig::default()
    };
    train(&mut model, vocab, data, &config, &mut ()).unwrap();
    evaluate(&model, vocab, test, iterations, 32).unwrap().f1_i
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train_set = corpus(&mut rng, 96);
    let test = corpus(&mut rng, 64);
    let (ds, dd) = documents(&mut rng, 150);
    let streams = train_set
        .iter()
        .chain(&test)
        .map(|i| i.tokens.as_slice())
        .chain(ds.iter().chain(&dd).map(|d| d.tokens.as_slice()));
    let vocab = Vocabulary::build(streams, 1).unwrap();
    let data = TrainingData {
        aspect: &train_set,
        sentiment_docs: &ds,
        domain_docs: &dd,
    };

    let mut mean = [0.0; 2];
    let mut runs = [Vec::new(), Vec::new()];
    for (slot, t) in [0, 2].into_iter().enumerate() {
        for &seed in &SEEDS {
            let f = test_f1_i(t, seed, &data, &test, &vocab);
            runs[slot].push(format!("{:.1}", f * 100.0));
            mean[slot] += f / SEEDS.len() as f64;
        }
    }
    Outcome::new(
        mean[1] > mean[0],
        format!(
            "mean test F1-I T=0 {:.2} [{}] vs T=2 {:.2} [{}]",
            mean[0] * 100.0,
            runs[0].join(" "),
            mean[1] * 100.0,
            runs[1].join(" ")
        ),
    )
}
