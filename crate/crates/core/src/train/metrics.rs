use crate::error::{Error, Result};

/// Overall accuracy, mean per-class accuracy and the confusion matrix
/// (`confusion[truth][predicted]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// `pairs` are `(true label, predicted label)`. Classes without any
    /// sample in the split are left out of the mean class accuracy.
    pub fn from_pairs(classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("cannot compute metrics on an empty split"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for &(truth, pred) in pairs {
            if truth >= classes || pred >= classes {
                return Err(Error::config(format!("label pair ({truth}, {pred}) out of range")));
            }
            confusion[truth][pred] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class: Vec<f64> = confusion
            .iter()
            .enumerate()
            .filter_map(|(c, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();
        Ok(Metrics {
            oa: correct as f64 / pairs.len() as f64,
            macc: per_class.iter().sum::<f64>() / per_class.len() as f64,
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let m = Metrics::from_pairs(3, &[(0, 0), (1, 1), (2, 2), (2, 2)]).unwrap();
        assert_eq!((m.oa, m.macc), (1.0, 1.0));
    }

    #[test]
    fn unbalanced_hand_count() {
        let m = Metrics::from_pairs(2, &[(0, 0), (0, 0), (0, 0), (1, 0)]).unwrap();
        assert_eq!(m.oa, 0.75);
        assert_eq!(m.macc, 0.5);
        let trace: usize = (0..2).map(|c| m.confusion[c][c]).sum();
        assert_eq!(m.oa, trace as f64 / m.total() as f64);
    }

    #[test]
    fn single_class_split() {
        let m = Metrics::from_pairs(4, &[(2, 2), (2, 1), (2, 2), (2, 2)]).unwrap();
        assert_eq!(m.macc, 0.75);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(Metrics::from_pairs(2, &[]).is_err());
    }
}
