use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Target distribution with `1 - s` on the true class and `s / (C - 1)` on
/// every other class.
pub fn smoothed_target(classes: usize, target: usize, smoothing: f64) -> Vec<f64> {
    let off = if classes > 1 { smoothing / (classes - 1) as f64 } else { 0.0 };
    (0..classes)
        .map(|c| if c == target { 1.0 - smoothing } else { off })
        .collect()
}

/// Mean over the batch of the cross-entropy between the smoothed targets
/// and `softmax(logits)`. `logits` is `[B, C]`, or `[C]` for one sample.
pub fn label_smooth_ce(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (batch, classes) = match shape[..] {
        [c] => (1, c),
        [b, c] => (b, c),
        _ => return Err(Error::shape("label_smooth_ce", format!("logits {shape:?}"))),
    };
    if targets.len() != batch {
        return Err(Error::shape(
            "label_smooth_ce",
            format!("{} targets for a batch of {batch}", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::config(format!("target {t} out of range for {classes} classes")));
    }
    let q: Vec<f64> = targets
        .iter()
        .flat_map(|&t| smoothed_target(classes, t, smoothing))
        .collect();
    let q = tape.constant(Tensor::new(shape, q)?);
    let logp = tape.log_softmax_rows(logits)?;
    let weighted = tape.mul(logp, q)?;
    let total = tape.sum_all(weighted)?;
    tape.mul_scalar(total, -1.0 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(logits: Vec<f64>, shape: Vec<usize>, targets: &[usize], s: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape, logits).unwrap());
        let l = label_smooth_ce(&mut tape, x, targets, s).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for t in 0..4 {
            assert!((loss(vec![0.7; 4], vec![4], &[t], 0.2) - 4f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_smoothing_is_cross_entropy() {
        let logits = vec![1.0, -0.5, 2.0];
        let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((loss(logits.clone(), vec![3], &[1], 0.0) - (lse + 0.5)).abs() < 1e-14);
    }

    #[test]
    fn batch_mean() {
        let a = loss(vec![1.0, 2.0, 0.0], vec![3], &[0], 0.1);
        let b = loss(vec![0.0, 0.5, 3.0], vec![3], &[2], 0.1);
        let both = loss(vec![1.0, 2.0, 0.0, 0.0, 0.5, 3.0], vec![2, 3], &[0, 2], 0.1);
        assert!((both - (a + b) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_target() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        assert!(label_smooth_ce(&mut tape, x, &[3], 0.2).is_err());
    }
}
