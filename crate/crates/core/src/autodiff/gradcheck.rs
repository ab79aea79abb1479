//! Central finite-difference checks for tape gradients, run in `f64`.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / (|analytic| + 1e-8)` over all entries.
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `build` receives one trainable leaf per input and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, h, Tape::new, build)
}

/// [`check_gradients`] with a custom tape constructor, e.g. a seeded
/// training tape so dropout masks repeat across evaluations.
pub fn check_gradients_with<F, M>(
    inputs: &[Tensor<f64>],
    h: f64,
    make_tape: M,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    M: Fn() -> Tape<f64>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = make_tape();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.dense(*var, inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[j] - numeric).abs() / (analytic[j].abs() + 1e-8);
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = (i, j, analytic[j], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
