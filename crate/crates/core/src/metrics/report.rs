use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::roc::{auroc_binary, roc_curve, tpr_at};
use crate::error::{OncoError, Result};
use crate::labels::ResponseLabel;
use crate::model::NUM_CLASSES;

/// Model output for one labeled pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_id: String,
    /// Ordered (progression, resolution, stable).
    pub probs: [f64; NUM_CLASSES],
    pub true_label: ResponseLabel,
}

impl ScoredPair {
    pub fn new(pair_id: impl Into<String>, probs: [f64; NUM_CLASSES], true_label: ResponseLabel) -> Result<Self> {
        let pair_id = pair_id.into();
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(OncoError::Domain(format!(
                "{pair_id}: probabilities {probs:?} are not a distribution"
            )));
        }
        Ok(Self {
            pair_id,
            probs,
            true_label,
        })
    }

    pub fn predicted(&self) -> ResponseLabel {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        ResponseLabel::ALL[best]
    }
}

/// One value per response class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass<T> {
    pub progression: T,
    pub resolution: T,
    pub stable: T,
}

impl<T> PerClass<T> {
    pub fn from_fn(mut f: impl FnMut(ResponseLabel) -> T) -> Self {
        Self {
            progression: f(ResponseLabel::Progression),
            resolution: f(ResponseLabel::Resolution),
            stable: f(ResponseLabel::Stable),
        }
    }

    pub fn get(&self, c: ResponseLabel) -> &T {
        match c {
            ResponseLabel::Progression => &self.progression,
            ResponseLabel::Resolution => &self.resolution,
            ResponseLabel::Stable => &self.stable,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Micro-averaged ROC across bootstrap replicates on a fixed FPR grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocBand {
    pub fpr: Vec<f64>,
    pub tpr_mean: Vec<f64>,
    pub tpr_std: Vec<f64>,
    /// `mean - 2 std`, clipped to `[0, 1]`.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub class_counts: PerClass<usize>,
    pub auroc_per_class: PerClass<Option<f64>>,
    /// Mean over classes whose AUROC is defined.
    pub auroc_macro: Option<f64>,
    pub auroc_micro: Option<f64>,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Percentile 95% intervals keyed by statistic name; `None` when too
    /// few replicates were usable.
    pub ci_95: BTreeMap<String, Option<Interval>>,
    pub roc_points: PerClass<Vec<(f64, f64)>>,
    pub micro_roc: Vec<(f64, f64)>,
    pub micro_band: Option<RocBand>,
    pub n_bootstrap: usize,
    pub n_skipped: usize,
}

#[derive(Clone, Debug)]
struct Stats {
    per_class: [Option<f64>; NUM_CLASSES],
    macro_auc: Option<f64>,
    micro_auc: Option<f64>,
    f1: f64,
    precision: f64,
    recall: f64,
    accuracy: f64,
    confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl Stats {
    fn named(&self) -> Vec<(String, Option<f64>)> {
        let mut v: Vec<(String, Option<f64>)> = ResponseLabel::ALL
            .iter()
            .map(|c| (format!("auroc_{}", c.as_str()), self.per_class[c.index()]))
            .collect();
        v.extend([
            ("auroc_macro".to_string(), self.macro_auc),
            ("auroc_micro".to_string(), self.micro_auc),
            ("f1_macro".to_string(), Some(self.f1)),
            ("precision_macro".to_string(), Some(self.precision)),
            ("recall_macro".to_string(), Some(self.recall)),
            ("accuracy".to_string(), Some(self.accuracy)),
        ]);
        v
    }
}

fn class_scores(items: &[&ScoredPair], c: usize) -> (Vec<f64>, Vec<bool>) {
    items
        .iter()
        .map(|s| (s.probs[c], s.true_label.index() == c))
        .unzip()
}

fn micro_inputs(items: &[&ScoredPair]) -> (Vec<f64>, Vec<bool>) {
    items
        .iter()
        .flat_map(|s| (0..NUM_CLASSES).map(move |c| (s.probs[c], s.true_label.index() == c)))
        .unzip()
}

fn compute(items: &[&ScoredPair]) -> Stats {
    let per_class: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|c| {
        let (s, y) = class_scores(items, c);
        auroc_binary(&s, &y).ok()
    });
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let (ms, my) = micro_inputs(items);
    let micro_auc = auroc_binary(&ms, &my).ok();

    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for s in items {
        confusion[s.true_label.index()][s.predicted().index()] += 1;
    }
    // classes seen in either truth or predictions; empty ratios count as 0
    let (mut p_sum, mut r_sum, mut f_sum, mut k) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        k += 1;
    }
    let k = k.max(1) as f64;
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Stats {
        per_class,
        macro_auc,
        micro_auc,
        f1: f_sum / k,
        precision: p_sum / k,
        recall: r_sum / k,
        accuracy: correct as f64 / items.len().max(1) as f64,
        confusion,
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

fn classes_present(items: &[&ScoredPair]) -> usize {
    let mut seen = [false; NUM_CLASSES];
    for s in items {
        seen[s.true_label.index()] = true;
    }
    seen.iter().filter(|&&b| b).count()
}

/// RNG for bootstrap replicate `r`: an independent stream of the seed, so
/// replicates can run in any order.
fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

fn resample<'a>(items: &[&'a ScoredPair], rng: &mut ChaCha8Rng) -> Vec<&'a ScoredPair> {
    (0..items.len()).map(|_| items[rng.random_range(0..items.len())]).collect()
}

const BAND_POINTS: usize = 101;

/// One-vs-rest and micro-averaged AUROC, macro precision/recall/F1 from
/// argmax predictions, and percentile bootstrap intervals over resampled
/// pairs. Replicates with fewer than two classes are skipped; if more than
/// half are skipped no intervals are reported.
pub fn multiclass_report(scored: &[ScoredPair], n_boot: usize, seed: u64) -> Result<EvalReport> {
    let items: Vec<&ScoredPair> = scored.iter().collect();
    if classes_present(&items) < 2 {
        return Err(OncoError::UndefinedMetric(format!(
            "multiclass report needs at least two classes among {} pairs",
            scored.len()
        )));
    }
    let point = compute(&items);
    let grid: Vec<f64> = (0..BAND_POINTS).map(|i| i as f64 / (BAND_POINTS - 1) as f64).collect();

    let reps: Vec<Option<(Stats, Option<Vec<f64>>)>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let sample = resample(&items, &mut rng);
            if classes_present(&sample) < 2 {
                return None;
            }
            let (ms, my) = micro_inputs(&sample);
            let curve = roc_curve(&ms, &my)
                .ok()
                .map(|roc| grid.iter().map(|&f| tpr_at(&roc, f)).collect());
            Some((compute(&sample), curve))
        })
        .collect();
    let n_skipped = reps.iter().filter(|r| r.is_none()).count();
    let usable: Vec<&(Stats, Option<Vec<f64>>)> = reps.iter().flatten().collect();
    let enough = |m: usize| n_boot > 0 && m * 2 >= n_boot;

    let mut ci_95 = BTreeMap::new();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (stats, _) in &usable {
        for (name, v) in stats.named() {
            let col = columns.entry(name).or_default();
            if let Some(v) = v {
                col.push(v);
            }
        }
    }
    for (name, _) in point.named() {
        let interval = columns.get_mut(&name).and_then(|col| {
            if !enough(col.len()) || !enough(usable.len()) {
                return None;
            }
            col.sort_by(f64::total_cmp);
            Some(Interval {
                lo: quantile(col, 0.025),
                hi: quantile(col, 0.975),
            })
        });
        ci_95.insert(name, interval);
    }

    let curves: Vec<&Vec<f64>> = usable.iter().filter_map(|(_, c)| c.as_ref()).collect();
    let micro_band = enough(curves.len()).then(|| {
        let m = curves.len() as f64;
        let tpr_mean: Vec<f64> = (0..BAND_POINTS).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / m).collect();
        let tpr_std: Vec<f64> = (0..BAND_POINTS)
            .map(|i| (curves.iter().map(|c| (c[i] - tpr_mean[i]).powi(2)).sum::<f64>() / m).sqrt())
            .collect();
        let lower = tpr_mean.iter().zip(&tpr_std).map(|(m, s)| (m - 2.0 * s).clamp(0.0, 1.0)).collect();
        let upper = tpr_mean.iter().zip(&tpr_std).map(|(m, s)| (m + 2.0 * s).clamp(0.0, 1.0)).collect();
        RocBand {
            fpr: grid.clone(),
            tpr_mean,
            tpr_std,
            lower,
            upper,
        }
    });

    let roc_points = PerClass::from_fn(|c| {
        let (s, y) = class_scores(&items, c.index());
        roc_curve(&s, &y).unwrap_or_default()
    });
    let (ms, my) = micro_inputs(&items);
    Ok(EvalReport {
        n_pairs: scored.len(),
        class_counts: PerClass::from_fn(|c| scored.iter().filter(|s| s.true_label == c).count()),
        auroc_per_class: PerClass::from_fn(|c| point.per_class[c.index()]),
        auroc_macro: point.macro_auc,
        auroc_micro: point.micro_auc,
        f1_macro: point.f1,
        precision_macro: point.precision,
        recall_macro: point.recall,
        accuracy: point.accuracy,
        confusion: point.confusion,
        ci_95,
        roc_points,
        micro_roc: roc_curve(&ms, &my).unwrap_or_default(),
        micro_band,
        n_bootstrap: n_boot,
        n_skipped,
    })
}

/// Outcome of a paired bootstrap comparison of two models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub auroc_a: f64,
    pub auroc_b: f64,
    /// `auroc_a - auroc_b` on the full set.
    pub delta: f64,
    pub p_value: f64,
    pub n_bootstrap: usize,
    pub n_used: usize,
}

/// Two-sided paired bootstrap test of the macro AUROC difference. Both
/// models are evaluated on the same resampled pairs in each replicate.
pub fn paired_bootstrap_pvalue(a: &[ScoredPair], b: &[ScoredPair], n_boot: usize, seed: u64) -> Result<PairedComparison> {
    let by_id: HashMap<&str, &ScoredPair> = b.iter().map(|s| (s.pair_id.as_str(), s)).collect();
    if by_id.len() != b.len() || a.len() != b.len() {
        return Err(OncoError::Data("pair_id sets differ or contain duplicates".into()));
    }
    let mut pairs = Vec::with_capacity(a.len());
    let mut missing = Vec::new();
    for s in a {
        match by_id.get(s.pair_id.as_str()) {
            Some(t) if t.true_label == s.true_label => pairs.push((s, *t)),
            Some(_) => {
                return Err(OncoError::Data(format!("pair {} has different labels in the two runs", s.pair_id)))
            }
            None => missing.push(s.pair_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(OncoError::Data(format!("pair_ids missing from second run: {}", missing.join(", "))));
    }
    let macro_of = |idx: &[usize], first: bool| {
        let items: Vec<&ScoredPair> = idx
            .iter()
            .map(|&i| if first { pairs[i].0 } else { pairs[i].1 })
            .collect();
        compute(&items).macro_auc
    };
    let all: Vec<usize> = (0..pairs.len()).collect();
    let (auroc_a, auroc_b) = match (macro_of(&all, true), macro_of(&all, false)) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(OncoError::UndefinedMetric("macro AUROC undefined on the full set".into())),
    };
    let deltas: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = replicate_rng(seed, r);
            let idx: Vec<usize> = (0..pairs.len()).map(|_| rng.random_range(0..pairs.len())).collect();
            Some(macro_of(&idx, true)? - macro_of(&idx, false)?)
        })
        .collect();
    let m = deltas.len() as f64;
    let le = deltas.iter().filter(|&&d| d <= 0.0).count() as f64;
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count() as f64;
    let p_value = (2.0 * ((1.0 + le) / (1.0 + m)).min((1.0 + ge) / (1.0 + m))).min(1.0);
    Ok(PairedComparison {
        auroc_a,
        auroc_b,
        delta: auroc_a - auroc_b,
        p_value,
        n_bootstrap: n_boot,
        n_used: deltas.len(),
    })
}

/// Macro AUROC over the classes present, without bootstrap.
pub fn macro_auroc(scored: &[ScoredPair]) -> Option<f64> {
    let items: Vec<&ScoredPair> = scored.iter().collect();
    compute(&items).macro_auc
}

/// A labeled pair that can be presented in reverse temporal order.
pub trait LabeledPair: Sized {
    fn pair_id(&self) -> String;
    fn label(&self) -> Option<ResponseLabel>;
    fn flipped(&self) -> Result<Self>;
}

/// Anything that assigns class probabilities to a pair.
pub trait PairScorer<P> {
    fn probabilities(&self, pair: &P) -> Result<[f64; NUM_CLASSES]>;
}

impl<P, F> PairScorer<P> for F
where
    F: Fn(&P) -> Result<[f64; NUM_CLASSES]>,
{
    fn probabilities(&self, pair: &P) -> Result<[f64; NUM_CLASSES]> {
        self(pair)
    }
}

/// Scores every labeled pair.
pub fn score_pairs<P: LabeledPair, S: PairScorer<P> + ?Sized>(scorer: &S, pairs: &[P]) -> Result<Vec<ScoredPair>> {
    pairs
        .iter()
        .map(|p| {
            let label = p
                .label()
                .ok_or_else(|| OncoError::Data(format!("pair {} is unlabeled", p.pair_id())))?;
            ScoredPair::new(p.pair_id(), scorer.probabilities(p)?, label)
        })
        .collect()
}

/// Reports on the pairs as given and with every pair's order reversed and
/// progression/resolution labels swapped.
pub fn flip_eval<P: LabeledPair, S: PairScorer<P> + ?Sized>(
    scorer: &S,
    pairs: &[P],
    n_boot: usize,
    seed: u64,
) -> Result<(EvalReport, EvalReport)> {
    if pairs.is_empty() {
        return Err(OncoError::Data("flip evaluation needs at least one pair".into()));
    }
    let original = multiclass_report(&score_pairs(scorer, pairs)?, n_boot, seed)?;
    let flipped: Vec<P> = pairs.iter().map(LabeledPair::flipped).collect::<Result<_>>()?;
    let flipped = multiclass_report(&score_pairs(scorer, &flipped)?, n_boot, seed)?;
    Ok((original, flipped))
}

impl LabeledPair for crate::exam::ExamPair {
    fn pair_id(&self) -> String {
        crate::exam::ExamPair::pair_id(self)
    }

    fn label(&self) -> Option<ResponseLabel> {
        self.label
    }

    fn flipped(&self) -> Result<Self> {
        crate::exam::flip_pair(self.clone())
    }
}
