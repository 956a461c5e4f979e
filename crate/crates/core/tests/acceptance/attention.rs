//! Attention-matrix laws over random inputs with n in 1..=16.

use imn::autodiff::Tape;
use imn::encoders::self_attention;
use imn::params::{uniform, ParamStore};
use imn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::Outcome;

const CASES: usize = 1000;

fn attention(h: &Tensor, p: &[f64], w: &Tensor) -> (Tensor, Tensor) {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let n = h.rows();
    let hv = tape.constant(h.clone());
    let pv = tape.constant(Tensor::new(vec![n, 1], p.to_vec()).unwrap());
    let wv = tape.constant(w.clone());
    let out = self_attention(&mut tape, hv, pv, wv, &[(0, n)]).unwrap();
    (tape.value(out.matrices[0]).clone(), tape.value(out.context).clone())
}

/// First law the matrix breaks, if any.
fn check(a: &Tensor, context: &Tensor, n: usize) -> Option<String> {
    if n == 1 {
        return (a.data() != [0.0] || context.data().iter().any(|&v| v != 0.0))
            .then(|| "single token must give [[0]] and a zero context".into());
    }
    for i in 0..n {
        if a.at(i, i) != 0.0 {
            return Some(format!("diagonal {i} is {}", a.at(i, i)));
        }
        if let Some(v) = a.row(i).iter().find(|&&v| v < 0.0 || !v.is_finite()) {
            return Some(format!("row {i} has entry {v}"));
        }
        let sum: f64 = a.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Some(format!("row {i} sums to {sum}"));
        }
    }
    None
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sizes = [0usize; 17];
    for case in 0..CASES {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        sizes[n] += 1;
        let scale = [0.1, 1.0, 5.0][case % 3];
        let h = uniform(&mut rng, &[n, d], scale);
        let w = uniform(&mut rng, &[d, d], scale);
        let p: Vec<f64> = (0..n)
            .map(|_| match rng.gen_range(0..6) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen::<f64>(),
            })
            .collect();
        let (a, ctx) = attention(&h, &p, &w);
        if let Some(e) = check(&a, &ctx, n) {
            return Outcome::fail(format!("case {case} (n={n}): {e}"));
        }

        // no opinion anywhere: every off-diagonal entry is 1/(n-1)
        let (a0, _) = attention(&h, &vec![0.0; n], &w);
        if n > 1 {
            let want = 1.0 / (n - 1) as f64;
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    if (a0.at(i, j) - want).abs() > 1e-12 {
                        return Outcome::fail(format!(
                            "case {case}: zero-opinion entry ({i},{j}) is {} not {want}",
                            a0.at(i, j)
                        ));
                    }
                }
            }
        }
    }
    let covered = (1..=16).filter(|&n| sizes[n] > 0).count();
    Outcome::new(
        covered == 16,
        format!("{CASES} random cases, {covered}/16 lengths covered, zero diagonal, non-negative, rows sum to 1, zero opinion gives uniform rows"),
    )
}
