use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Below this magnitude (both sides) the absolute error is reported instead
/// of the relative one.
const ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_error <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(|p| p.max_error > self.tolerance)
    }
}

fn element_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABSOLUTE_FLOOR {
        diff
    } else {
        diff / scale
    }
}

fn evaluate<F>(f: &F, params: &[(String, Tensor)]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central finite differences `(f(p + h) - f(p - h)) / 2h`, element by
/// element.
///
/// `f` receives a fresh tape and one variable per entry of `params`, in
/// order, and must be deterministic.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&options.step) {
        return Err(Error::config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            options.step
        )));
    }
    let (tape, vars, out) = evaluate(&f, params)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut working: Vec<(String, Tensor)> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (p, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[p])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let mut elements: Vec<usize> = match options.max_elements {
            Some(m) if m < tensor.numel() => index::sample(&mut rng, tensor.numel(), m).into_vec(),
            _ => (0..tensor.numel()).collect(),
        };
        elements.sort_unstable();

        let mut report = ParamReport {
            name: name.clone(),
            checked: elements.len(),
            max_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &elements {
            let original = tensor.data()[i];
            working[p].1.data_mut()[i] = original + options.step;
            let (t, _, o) = evaluate(&f, &working)?;
            let plus = t.value(o).item();
            working[p].1.data_mut()[i] = original - options.step;
            let (t, _, o) = evaluate(&f, &working)?;
            let minus = t.value(o).item();
            working[p].1.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * options.step);
            let err = element_error(analytic[i], numeric);
            if err > report.max_error {
                report.max_error = err;
                report.worst_index = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        params: reports,
    })
}
