use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{OncoError, Result};
use crate::labels::ResponseLabel;

/// Five-point visual uptake score relative to mediastinum and liver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DeauvilleScore(u8);

impl DeauvilleScore {
    pub fn new(v: u8) -> Result<Self> {
        if (1..=5).contains(&v) {
            Ok(Self(v))
        } else {
            Err(OncoError::Domain(format!("Deauville score must be 1..=5, got {v}")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for DeauvilleScore {
    type Error = OncoError;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DeauvilleScore> for u8 {
    fn from(s: DeauvilleScore) -> u8 {
        s.0
    }
}

impl fmt::Display for DeauvilleScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Two-rater contingency table with its agreement statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaTable {
    pub categories: Vec<String>,
    /// `counts[i][j]`: rater A said category i, rater B category j.
    pub counts: Vec<Vec<usize>>,
    pub n: usize,
    pub p_observed: f64,
    pub p_expected: f64,
    pub kappa: f64,
}

/// Unweighted Cohen's kappa with its contingency table. When chance
/// agreement is total (both raters constant on the same category) kappa is
/// taken as 1.
pub fn kappa_table<C: Ord + Clone + fmt::Display>(a: &[C], b: &[C]) -> Result<KappaTable> {
    if a.len() != b.len() || a.is_empty() {
        return Err(OncoError::Shape(format!(
            "kappa needs two equal non-empty rating lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let cats: Vec<C> = a.iter().chain(b).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let k = cats.len();
    let idx = |c: &C| cats.binary_search(c).expect("category collected above");
    let mut counts = vec![vec![0usize; k]; k];
    for (x, y) in a.iter().zip(b) {
        counts[idx(x)][idx(y)] += 1;
    }
    let n = a.len() as f64;
    let p_o = (0..k).map(|i| counts[i][i]).sum::<usize>() as f64 / n;
    let p_e = (0..k)
        .map(|i| {
            let row: usize = counts[i].iter().sum();
            let col: usize = counts.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    let kappa = if p_e == 1.0 {
        if p_o == 1.0 {
            1.0
        } else {
            return Err(OncoError::UndefinedMetric("kappa undefined: chance agreement is 1".into()));
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(KappaTable {
        categories: cats.iter().map(|c| c.to_string()).collect(),
        counts,
        n: a.len(),
        p_observed: p_o,
        p_expected: p_e,
        kappa,
    })
}

pub fn cohens_kappa<C: Ord + Clone + fmt::Display>(a: &[C], b: &[C]) -> Result<f64> {
    kappa_table(a, b).map(|t| t.kappa)
}

/// Agreement of model predictions with Deauville scores under the two
/// stratifications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeauvilleAgreement {
    /// Worse (score 5, progression) against not worse, over all items.
    pub stratification_1: KappaTable,
    /// Resolution (scores 1-3) against progression (score 5), restricted to
    /// items where both sides fall in those groups. `None` when empty.
    pub stratification_2: Option<KappaTable>,
    pub n_items: usize,
    pub n_retained_2: usize,
}

impl DeauvilleAgreement {
    pub fn kappa_1(&self) -> f64 {
        self.stratification_1.kappa
    }

    pub fn kappa_2(&self) -> Option<f64> {
        self.stratification_2.as_ref().map(|t| t.kappa)
    }
}

pub fn deauville_agreement(preds: &[ResponseLabel], scores: &[DeauvilleScore]) -> Result<DeauvilleAgreement> {
    if preds.len() != scores.len() {
        return Err(OncoError::Shape(format!(
            "{} predictions but {} Deauville scores",
            preds.len(),
            scores.len()
        )));
    }
    let worse = |w: bool| if w { "worse" } else { "not_worse" };
    let model_1: Vec<&str> = preds.iter().map(|&p| worse(p == ResponseLabel::Progression)).collect();
    let reader_1: Vec<&str> = scores.iter().map(|s| worse(s.value() == 5)).collect();
    let stratification_1 = kappa_table(&model_1, &reader_1)?;

    let (model_2, reader_2): (Vec<&str>, Vec<&str>) = preds
        .iter()
        .zip(scores)
        .filter(|(p, s)| matches!(p, ResponseLabel::Progression | ResponseLabel::Resolution) && s.value() != 4)
        .map(|(&p, s)| {
            let m = if p == ResponseLabel::Progression { "progression" } else { "resolution" };
            let r = if s.value() == 5 { "progression" } else { "resolution" };
            (m, r)
        })
        .unzip();
    let stratification_2 = if model_2.is_empty() {
        None
    } else {
        Some(kappa_table(&model_2, &reader_2)?)
    };
    Ok(DeauvilleAgreement {
        stratification_1,
        n_retained_2: model_2.len(),
        stratification_2,
        n_items: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ResponseLabel::*;

    fn ds(v: &[u8]) -> Vec<DeauvilleScore> {
        v.iter().map(|&x| DeauvilleScore::new(x).unwrap()).collect()
    }

    #[test]
    fn identical_raters_agree_perfectly() {
        assert_eq!(cohens_kappa(&[1, 2, 3, 1], &[1, 2, 3, 1]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&["x", "x"], &["x", "x"]).unwrap(), 1.0);
    }

    #[test]
    fn chance_level_fixture() {
        let t = kappa_table(&["W", "W", "N", "N"], &["N", "N", "N", "N"]).unwrap();
        assert_eq!(t.p_observed, 0.5);
        assert_eq!(t.p_expected, 0.5);
        assert_eq!(t.kappa, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(cohens_kappa(&[1, 2], &[1]).is_err());
        assert!(cohens_kappa::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn deauville_range() {
        assert!(DeauvilleScore::new(0).is_err());
        assert!(DeauvilleScore::new(6).is_err());
        assert_eq!(serde_json::to_string(&DeauvilleScore::new(4).unwrap()).unwrap(), "4");
        assert!(serde_json::from_str::<DeauvilleScore>("7").is_err());
    }

    #[test]
    fn all_progression_all_five() {
        let a = deauville_agreement(&[Progression; 4], &ds(&[5, 5, 5, 5])).unwrap();
        assert_eq!(a.kappa_1(), 1.0);
        assert_eq!(a.kappa_2(), Some(1.0));
    }

    #[test]
    fn score_four_only_counts_in_first_stratification() {
        let a = deauville_agreement(&[Resolution, Progression], &ds(&[4, 5])).unwrap();
        assert_eq!(a.stratification_1.n, 2);
        assert_eq!(a.kappa_1(), 1.0);
        assert_eq!(a.n_retained_2, 1);
    }

    #[test]
    fn empty_second_stratification() {
        let a = deauville_agreement(&[Stable, Stable], &ds(&[4, 3])).unwrap();
        assert!(a.stratification_2.is_none());
    }
}
