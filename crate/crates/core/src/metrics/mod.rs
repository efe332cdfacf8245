//! ROC analysis, bootstrap intervals, paired model comparison, the flip
//! protocol and rater agreement.

mod kappa;
mod report;
mod roc;

pub use kappa::{cohens_kappa, deauville_agreement, kappa_table, DeauvilleAgreement, DeauvilleScore, KappaTable};
pub use report::{
    flip_eval, macro_auroc, multiclass_report, paired_bootstrap_pvalue, score_pairs, EvalReport, Interval, LabeledPair,
    PairScorer, PairedComparison, PerClass, RocBand, ScoredPair,
};
pub use roc::{auroc_binary, roc_curve, tpr_at, trapezoid};
