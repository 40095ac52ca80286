//! Central-difference gradient verification.

use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)`.
    pub rel_error: f64,
    pub abs_error: f64,
    /// Largest reverse-mode gradient magnitude; zero for blocked inputs.
    pub max_abs_analytic: f64,
    /// Either gradient contained NaN or infinity.
    pub non_finite: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Worst relative error; infinite if any entry was non-finite.
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| if e.non_finite { f64::INFINITY } else { e.rel_error }).fold(0.0, f64::max)
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_error() < threshold
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| {
            let key = |e: &GradCheckEntry| if e.non_finite { f64::INFINITY } else { e.rel_error };
            key(a).total_cmp(&key(b))
        })
    }
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`, for every named input.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor)], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("grad_check", "step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let mut numeric = vec![0.0; t.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = values[k].data()[i];
            values[k].data_mut()[i] = x0 + h;
            let up = eval(&values)?;
            values[k].data_mut()[i] = x0 - h;
            let down = eval(&values)?;
            values[k].data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        let non_finite = !analytic.is_finite() || numeric.iter().any(|v| !v.is_finite());
        let abs_error = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic.max_abs().max(numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let rel_error = if scale > 0.0 { abs_error / scale } else { abs_error };
        report.entries.push(GradCheckEntry {
            name: name.to_string(),
            rel_error,
            abs_error,
            max_abs_analytic: analytic.max_abs(),
            non_finite,
        });
    }
    Ok(report)
}
