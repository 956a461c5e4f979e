//! Central finite differences against reverse-mode gradients of the aspect
//! loss, over every scalar of every parameter group, with T=2.

use imn::autodiff::Tape;
use imn::data::PackedBatch;
use imn::model::{ForwardOptions, Imn};
use imn::params::ParamGroup;
use imn::training::{aspect_loss, pack};
use imn::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::common::{build_model, memorization_fixture, narrow_config, Outcome};

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;
/// Entries whose analytic and numeric magnitudes both fall below this are
/// judged by the group norm only.
const ENTRY_FLOOR: f64 = 1e-6;

fn loss(model: &Imn, batch: &PackedBatch, gold: &[&imn::data::AspectInstance]) -> f64 {
    let mut tape = Tape::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let state = model.forward(&mut tape, batch, &ForwardOptions::eval(2), &mut rng).unwrap();
    let last = state.last();
    let l = aspect_loss(&mut tape, last.y_ae, last.y_as, &state.segments, gold).unwrap();
    tape.value(l).data()[0]
}

pub fn run() -> Outcome {
    let fixture = memorization_fixture();
    // the fish contrast sentence, a neutral one and a second contrast sentence
    let gold: Vec<_> = [0, 1, 15].iter().map(|&i| &fixture.aspect[i]).collect();
    let toks: Vec<&[String]> = gold.iter().map(|g| g.tokens.as_slice()).collect();
    let vocab = Vocabulary::build(toks.iter().copied(), 1).unwrap();
    let batch = pack(&toks, &vocab).unwrap();
    let mut model = build_model(narrow_config(6, 4, 3), &vocab, 11, 0.5);

    let analytic = {
        let mut tape = Tape::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = model.forward(&mut tape, &batch, &ForwardOptions::eval(2), &mut rng).unwrap();
        let last = state.last();
        let l = aspect_loss(&mut tape, last.y_ae, last.y_as, &state.segments, &gold).unwrap();
        tape.backward(l).unwrap()
    };

    let ids: Vec<_> = model.params().ids().collect();
    let mut per_group: Vec<(ParamGroup, f64, f64, f64, usize)> = ParamGroup::ALL
        .iter()
        .map(|&g| (g, 0.0, 0.0, 0.0, 0))
        .collect();
    let mut worst_entry = (0.0f64, String::new());
    for id in ids {
        let group = model.params().get(id).group;
        let name = model.params().get(id).name.clone();
        let n = model.params().value(id).numel();
        let grad = analytic.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let slot = per_group.iter_mut().find(|s| s.0 == group).unwrap();
        for (k, &a) in grad.iter().enumerate() {
            let orig = model.params().value(id).data()[k];
            model.params_mut().value_mut(id).data_mut()[k] = orig + STEP;
            let plus = loss(&model, &batch, &gold);
            model.params_mut().value_mut(id).data_mut()[k] = orig - STEP;
            let minus = loss(&model, &batch, &gold);
            model.params_mut().value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);

            slot.1 += (a - numeric).powi(2);
            slot.2 += a * a;
            slot.3 += numeric * numeric;
            slot.4 += 1;
            let scale = a.abs().max(numeric.abs());
            if scale >= ENTRY_FLOOR {
                let rel = (a - numeric).abs() / scale;
                if rel > worst_entry.0 {
                    worst_entry = (rel, format!("{name}[{k}]"));
                }
            }
        }
    }

    let mut pass = worst_entry.0 < TOLERANCE;
    let mut parts = Vec::new();
    for (group, diff, a, n, count) in &per_group {
        let norm = a.sqrt().max(n.sqrt());
        let rel = if norm > 0.0 { diff.sqrt() / norm } else { f64::INFINITY };
        pass &= rel < TOLERANCE;
        parts.push(format!("{group} {rel:.1e} over {count}"));
    }
    Outcome::new(
        pass,
        format!(
            "group relative errors: {}; worst entry {:.1e} at {}",
            parts.join(", "),
            worst_entry.0,
            worst_entry.1
        ),
    )
}
