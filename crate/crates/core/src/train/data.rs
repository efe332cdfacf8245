use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{OncoError, Result};
use crate::exam::{load_model_input, to_model_input, ExamPair, ModelInput, Preprocess};
use crate::labels::{PairLabelRow, ResponseLabel};
use crate::scalar::Scalar;

/// A preprocessed exam pair ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPair<T> {
    pub pair_id: String,
    pub patient_id: String,
    pub baseline: ModelInput<T>,
    pub followup: ModelInput<T>,
    pub label: Option<ResponseLabel>,
    pub flipped: bool,
}

impl<T: Scalar> InputPair<T> {
    pub fn from_exam_pair(pair: &ExamPair, prep: &Preprocess) -> Self {
        Self {
            pair_id: pair.pair_id(),
            patient_id: pair.baseline.patient_id.clone(),
            baseline: to_model_input(&pair.baseline, prep),
            followup: to_model_input(&pair.followup, prep),
            label: pair.label,
            flipped: pair.flipped,
        }
    }

    /// Swaps the exams and flips the label. Unlabeled pairs are refused.
    pub fn flipped(&self) -> Result<Self> {
        let label = self
            .label
            .ok_or_else(|| OncoError::Data(format!("cannot flip unlabeled pair {}", self.pair_id)))?;
        Ok(Self {
            pair_id: self.pair_id.clone(),
            patient_id: self.patient_id.clone(),
            baseline: self.followup.clone(),
            followup: self.baseline.clone(),
            label: Some(label.flipped()),
            flipped: !self.flipped,
        })
    }
}

/// Loads every manifest row from `exams_root/<exam_id>/`.
pub fn load_pairs<T: Scalar>(rows: &[PairLabelRow], exams_root: &Path, prep: &Preprocess) -> Result<Vec<InputPair<T>>> {
    rows.par_iter()
        .map(|row| {
            Ok(InputPair {
                pair_id: row.pair_id(),
                patient_id: row.patient_id.clone(),
                baseline: load_model_input(&exams_root.join(&row.baseline_exam), prep)?,
                followup: load_model_input(&exams_root.join(&row.followup_exam), prep)?,
                label: row.label.label(),
                flipped: false,
            })
        })
        .collect()
}

/// Splits by patient so no patient lands on both sides. Roughly
/// `val_fraction` of the patients go to the second set; each side gets at
/// least one patient when there are two or more.
pub fn patient_split<P: Clone>(
    items: &[P],
    patient_of: impl Fn(&P) -> &str,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<P>, Vec<P>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(OncoError::Config(format!("val_fraction must lie in [0, 1), got {val_fraction}")));
    }
    let mut patients: Vec<&str> = items.iter().map(&patient_of).collect::<BTreeSet<_>>().into_iter().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (patients.len() as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && patients.len() >= 2 {
        n_val = n_val.clamp(1, patients.len() - 1);
    }
    let val: BTreeSet<&str> = patients[..n_val].iter().copied().collect();
    let (va, tr): (Vec<P>, Vec<P>) = items.iter().cloned().partition(|p| val.contains(patient_of(p)));
    Ok((tr, va))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_patients_together() {
        let items: Vec<(String, usize)> = (0..40).map(|i| (format!("p{}", i / 3), i)).collect();
        let (tr, va) = patient_split(&items, |x| x.0.as_str(), 0.25, 3).unwrap();
        assert_eq!(tr.len() + va.len(), 40);
        let a: BTreeSet<_> = tr.iter().map(|x| &x.0).collect();
        let b: BTreeSet<_> = va.iter().map(|x| &x.0).collect();
        assert!(a.is_disjoint(&b));
        assert!(!b.is_empty());
        assert_eq!(patient_split(&items, |x| x.0.as_str(), 0.25, 3).unwrap().1, va);
    }

    #[test]
    fn split_fraction_bounds() {
        let items = vec![("a", 1)];
        assert!(patient_split(&items, |x| x.0, 1.0, 0).is_err());
        let (tr, va) = patient_split(&items, |x| x.0, 0.0, 0).unwrap();
        assert_eq!((tr.len(), va.len()), (1, 0));
    }
}
