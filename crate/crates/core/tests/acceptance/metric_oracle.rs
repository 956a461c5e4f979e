//! `compute_metrics` against a brute-force span matcher: every well-formed
//! gold sequence of length <= 5 paired with every predicted sequence of the
//! same length, plus random longer corpora.

use imn::data::AspectInstance;
use imn::labels::{AeLabel, GoldSentiment, Sentiment};
use imn::metrics::{compute_metrics, EvalReport, Prediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::Outcome;

const LABELS: [AeLabel; 5] = [AeLabel::BA, AeLabel::IA, AeLabel::BP, AeLabel::IP, AeLabel::O];
const GOLD_SENTIMENTS: [GoldSentiment; 4] = [
    GoldSentiment::Label(Sentiment::Pos),
    GoldSentiment::Label(Sentiment::Neg),
    GoldSentiment::Label(Sentiment::Neu),
    GoldSentiment::Conflict,
];
const CORPUS: usize = 7;
const RANDOM_CASES: usize = 200;

struct Case {
    gold: AspectInstance,
    labels: Vec<AeLabel>,
    y_as: Vec<[f64; 3]>,
}

#[derive(Debug, Default, PartialEq)]
struct Expected {
    aspect: [usize; 3],
    opinion: [usize; 3],
    interactive: [usize; 3],
    confusion: [[usize; 3]; 3],
    metrics: [u64; 5],
}

fn all_sequences(n: usize) -> Vec<Vec<AeLabel>> {
    (0..5usize.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let l = LABELS[code % 5];
                    code /= 5;
                    l
                })
                .collect()
        })
        .collect()
}

fn well_formed(labels: &[AeLabel]) -> bool {
    labels.iter().enumerate().all(|(i, &l)| {
        let prev = if i == 0 { AeLabel::O } else { labels[i - 1] };
        match l {
            AeLabel::IA => matches!(prev, AeLabel::BA | AeLabel::IA),
            AeLabel::IP => matches!(prev, AeLabel::BP | AeLabel::IP),
            _ => true,
        }
    })
}

/// Every interval `[i, j]` that lenient decoding yields as a span of the
/// kind marked by `begin`/`inside`: it opens on `begin`, or on an `inside`
/// whose predecessor is not of the kind; it continues over `inside` only;
/// and the following label is not `inside`.
fn brute_spans(labels: &[AeLabel], begin: AeLabel, inside: AeLabel) -> Vec<(usize, usize)> {
    let n = labels.len();
    let of_kind = |l: AeLabel| l == begin || l == inside;
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let opens = labels[i] == begin || (labels[i] == inside && (i == 0 || !of_kind(labels[i - 1])));
            let body = labels[i + 1..=j].iter().all(|&l| l == inside);
            let closed = j + 1 == n || labels[j + 1] != inside;
            if opens && body && closed {
                out.push((i, j));
            }
        }
    }
    out
}

fn first_max(d: &[f64; 3]) -> usize {
    let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..3).find(|&k| d[k] == m).unwrap()
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn oracle(cases: &[Case]) -> Expected {
    let mut e = Expected::default();
    for c in cases {
        let gold_a = brute_spans(&c.gold.ae_labels, AeLabel::BA, AeLabel::IA);
        let gold_o = brute_spans(&c.gold.ae_labels, AeLabel::BP, AeLabel::IP);
        let pred_a = brute_spans(&c.labels, AeLabel::BA, AeLabel::IA);
        let pred_o = brute_spans(&c.labels, AeLabel::BP, AeLabel::IP);

        for (gold, pred, slot) in [(&gold_a, &pred_a, &mut e.aspect), (&gold_o, &pred_o, &mut e.opinion)] {
            let tp = pred.iter().filter(|s| gold.contains(s)).count();
            slot[0] += tp;
            slot[1] += pred.len() - tp;
            slot[2] += gold.len() - tp;
        }

        let sentiment_of = |s: &(usize, usize)| c.gold.as_labels[s.0];
        let conflicts: Vec<_> = gold_a.iter().filter(|s| sentiment_of(s) == GoldSentiment::Conflict).collect();
        let labeled: Vec<_> = gold_a.iter().filter(|s| sentiment_of(s) != GoldSentiment::Conflict).collect();
        let considered: Vec<_> = pred_a.iter().filter(|s| !conflicts.contains(s)).collect();
        let mut tp = 0;
        for p in &considered {
            if labeled.contains(p) {
                let g = sentiment_of(p).trainable().unwrap().index();
                let k = first_max(&c.y_as[p.0]);
                e.confusion[g][k] += 1;
                if g == k {
                    tp += 1;
                }
            }
        }
        e.interactive[0] += tp;
        e.interactive[1] += considered.len() - tp;
        e.interactive[2] += labeled.len() - tp;
    }
    let matched: usize = e.confusion.iter().flatten().sum();
    let correct: usize = (0..3).map(|k| e.confusion[k][k]).sum();
    let acc = if matched == 0 { 0.0 } else { correct as f64 / matched as f64 };
    let class_f1 = |k: usize| {
        let tp = e.confusion[k][k];
        let predicted: usize = (0..3).map(|g| e.confusion[g][k]).sum();
        let gold: usize = e.confusion[k].iter().sum();
        f1(tp, predicted - tp, gold - tp)
    };
    let macro_f1 = (class_f1(0) + class_f1(1) + class_f1(2)) / 3.0;
    e.metrics = [
        f1(e.aspect[0], e.aspect[1], e.aspect[2]),
        f1(e.opinion[0], e.opinion[1], e.opinion[2]),
        acc,
        macro_f1,
        f1(e.interactive[0], e.interactive[1], e.interactive[2]),
    ]
    .map(f64::to_bits);
    e
}

fn observed(r: &EvalReport) -> Expected {
    let c = &r.counts;
    let m = |x: &imn::metrics::MatchCounts| [x.tp, x.fp, x.fn_];
    Expected {
        aspect: m(&c.aspect),
        opinion: m(&c.opinion),
        interactive: m(&c.interactive),
        confusion: c.sentiment_confusion,
        metrics: r.metrics().map(|(_, v)| v.to_bits()),
    }
}

fn check(cases: &[Case]) -> Result<(), String> {
    let preds: Vec<Prediction> = cases
        .iter()
        .map(|c| Prediction::from_labels(c.labels.clone(), &c.y_as).unwrap())
        .collect();
    let gold: Vec<AspectInstance> = cases.iter().map(|c| c.gold.clone()).collect();
    let report = compute_metrics(&preds, &gold).map_err(|e| e.to_string())?;
    let want = oracle(cases);
    let got = observed(&report);
    let matched: usize = want.confusion.iter().flatten().sum();
    if got != want || report.no_matched_spans != (matched == 0) {
        let describe: Vec<String> = cases
            .iter()
            .map(|c| format!("gold {:?} pred {:?}", c.gold.ae_labels, c.labels))
            .collect();
        return Err(format!("{}: expected {want:?}, got {got:?}", describe.join(" | ")));
    }
    Ok(())
}

fn random_dist(rng: &mut ChaCha8Rng) -> [f64; 3] {
    match rng.gen_range(0..10) {
        0 => [1.0 / 3.0; 3],
        1 => {
            let mut d = [0.4; 3];
            d[rng.gen_range(0..3)] = 0.2;
            d
        }
        _ => {
            let raw = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let total: f64 = raw.iter().sum();
            raw.map(|v| v / total)
        }
    }
}

fn make_case(gold_labels: Vec<AeLabel>, labels: Vec<AeLabel>, rng: &mut ChaCha8Rng) -> Case {
    let mut sentiment = GoldSentiment::None;
    let as_labels: Vec<GoldSentiment> = gold_labels
        .iter()
        .map(|l| match l {
            AeLabel::BA => {
                sentiment = GOLD_SENTIMENTS[rng.gen_range(0..4)];
                sentiment
            }
            AeLabel::IA => sentiment,
            _ => GoldSentiment::None,
        })
        .collect();
    let tokens = (0..gold_labels.len()).map(|i| format!("w{i}")).collect();
    let y_as = (0..labels.len()).map(|_| random_dist(rng)).collect();
    Case {
        gold: AspectInstance::new(tokens, gold_labels, as_labels).unwrap(),
        labels,
        y_as,
    }
}

fn random_gold(n: usize, rng: &mut ChaCha8Rng) -> Vec<AeLabel> {
    let mut out: Vec<AeLabel> = Vec::with_capacity(n);
    while out.len() < n {
        let l = LABELS[rng.gen_range(0..5)];
        out.push(l);
        if !well_formed(&out) {
            out.pop();
        }
    }
    out
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0usize;
    let mut corpora = 0usize;
    let mut buffer = Vec::with_capacity(CORPUS);
    for n in 1..=5 {
        let all = all_sequences(n);
        for gold in all.iter().filter(|s| well_formed(s)) {
            for pred in &all {
                let case = make_case(gold.clone(), pred.clone(), &mut rng);
                if let Err(e) = check(std::slice::from_ref(&case)) {
                    return Outcome::fail(e);
                }
                pairs += 1;
                buffer.push(case);
                if buffer.len() == CORPUS {
                    if let Err(e) = check(&buffer) {
                        return Outcome::fail(e);
                    }
                    corpora += 1;
                    buffer.clear();
                }
            }
        }
    }

    for _ in 0..RANDOM_CASES {
        let sentences = rng.gen_range(1..=5);
        let cases: Vec<Case> = (0..sentences)
            .map(|_| {
                let n = rng.gen_range(6..=40);
                let gold = random_gold(n, &mut rng);
                let pred = gold
                    .iter()
                    .map(|&l| if rng.gen_bool(0.25) { LABELS[rng.gen_range(0..5)] } else { l })
                    .collect();
                make_case(gold, pred, &mut rng)
            })
            .collect();
        if let Err(e) = check(&cases) {
            return Outcome::fail(e);
        }
    }
    Outcome::new(
        true,
        format!(
            "{pairs} exhaustive gold/prediction pairs (n <= 5), {corpora} pooled {CORPUS}-sentence corpora, {RANDOM_CASES} random longer corpora; counts and all five metrics bitwise equal"
        ),
    )
}
