//! Sentiment predictions on tokens outside gold aspect spans never reach the
//! aspect loss: permuting them leaves the loss bitwise unchanged.

use imn::autodiff::Tape;
use imn::data::AspectInstance;
use imn::params::ParamStore;
use imn::tensor::Tensor;
use imn::training::aspect_loss;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{memorization_fixture, Outcome};

const TRIALS: usize = 200;

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        })
        .collect()
}

fn loss(y_ae: &[Vec<f64>], y_as: &[Vec<f64>], segments: &[(usize, usize)], gold: &[&AspectInstance]) -> f64 {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(Tensor::from_rows(y_ae).unwrap());
    let s = tape.constant(Tensor::from_rows(y_as).unwrap());
    let l = aspect_loss(&mut tape, a, s, segments, gold).unwrap();
    tape.value(l).data()[0]
}

pub fn run() -> Outcome {
    let fixture = memorization_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut moved = 0;
    for trial in 0..TRIALS {
        let k = rng.gen_range(1..=4);
        let gold: Vec<&AspectInstance> = fixture.aspect.choose_multiple(&mut rng, k).collect();
        let mut segments = Vec::new();
        let mut start = 0;
        for g in &gold {
            segments.push((start, g.len()));
            start += g.len();
        }
        let y_ae = random_rows(&mut rng, start, 5);
        let y_as = random_rows(&mut rng, start, 3);
        let masked: Vec<usize> = gold
            .iter()
            .flat_map(|g| g.ae_labels.iter())
            .enumerate()
            .filter(|(_, l)| !l.is_aspect())
            .map(|(i, _)| i)
            .collect();
        let mut order = masked.clone();
        order.shuffle(&mut rng);
        let mut permuted = y_as.clone();
        for (&to, &from) in masked.iter().zip(&order) {
            permuted[to] = y_as[from].clone();
        }
        moved += masked.iter().zip(&order).filter(|(a, b)| a != b).count();

        let before = loss(&y_ae, &y_as, &segments, &gold);
        let after = loss(&y_ae, &permuted, &segments, &gold);
        if before.to_bits() != after.to_bits() {
            return Outcome::fail(format!("trial {trial}: loss {before:e} became {after:e}"));
        }

        // control: touching an aspect token must move the loss
        let trainable = gold
            .iter()
            .flat_map(|g| g.ae_labels.iter().zip(&g.as_labels))
            .position(|(l, s)| l.is_aspect() && s.trainable().is_some());
        if let Some(i) = trainable {
            let mut touched = y_as.clone();
            touched[i].rotate_left(1);
            if loss(&y_ae, &touched, &segments, &gold) == before {
                return Outcome::fail(format!("trial {trial}: aspect token {i} does not affect the loss"));
            }
        }
    }
    Outcome::new(
        moved > 0,
        format!("{TRIALS} random batches, {moved} non-aspect rows moved, loss bitwise identical"),
    )
}
