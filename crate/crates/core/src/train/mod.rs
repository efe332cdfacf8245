//! Supervised training with Adam, step learning-rate decay and early
//! stopping on validation loss.

mod data;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OncoError, Result};
use crate::exam::{augment, AugmentConfig};
use crate::metrics::{macro_auroc, LabeledPair, PairScorer, ScoredPair};
use crate::model::{ModelConfig, ModelVariant, Mode, OncoNet, NUM_CLASSES};
use crate::nn::{Graph, ReluRule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use data::{load_pairs, patient_split, InputPair};

/// Named random substreams derived from the single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Bootstrap = 4,
    Augment = 5,
}

/// Seed for one named substream of `seed`.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.random()
}

/// Seed for one item of one epoch within a substream.
pub fn item_seed(base: u64, epoch: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng.random()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub variant: ModelVariant,
    pub model: ModelConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            max_epochs: 30,
            lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 5,
            seed: 0,
            variant: ModelVariant::Siamese,
            model: ModelConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OncoError::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 || self.lr_decay_every == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs, lr_decay_every and patience must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1), got {}", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam moments must lie in [0, 1) and epsilon must be positive".into());
        }
        self.model.validate()
    }

    /// Step decay: `lr · factor^⌊epoch / every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    fn model_config(&self) -> ModelConfig {
        self.model.clone().with_variant(self.variant)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_auroc: Option<f64>,
    pub wall_time_s: f64,
    /// SHA-256 of every validation input as fed to the network.
    pub val_input_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| OncoError::io("<train record>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut epochs = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| OncoError::io("<train record>", e))?;
            if !line.trim().is_empty() {
                epochs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { epochs })
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    }
}

/// Parameters with the lowest validation loss and the full log.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: OncoNet<T>,
    pub record: TrainRecord,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mean loss and macro AUROC of an eval-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochEval {
    pub loss: f64,
    /// `None` when fewer than two classes are present.
    pub macro_auroc: Option<f64>,
    pub scored: Vec<ScoredPair>,
}

struct Adam<T> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut OncoNet<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let [b1t, b2t, lrt, epst] = [b1, b2, lr, cfg.epsilon].map(T::from_f64_lossy);
        let (c1t, c2t) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
        let one = T::one();
        for (name, g) in grads {
            let Some(p) = model.params_mut().get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1t * *mi + (one - b1t) * gi;
                *vi = b2t * *vi + (one - b2t) * gi * gi;
                let mhat = *mi / c1t;
                let vhat = *vi / c2t;
                *pi -= lrt * mhat / (vhat.sqrt() + epst);
            }
        }
    }
}

fn check_labeled<T>(pairs: &[InputPair<T>], what: &str) -> Result<()> {
    let unlabeled: Vec<&str> = pairs.iter().filter(|p| p.label.is_none()).map(|p| p.pair_id.as_str()).collect();
    if unlabeled.is_empty() {
        Ok(())
    } else {
        Err(OncoError::Data(format!("{what} pairs without a label: {}", unlabeled.join(", "))))
    }
}

/// Refuses splits that share a patient.
pub fn check_patient_disjoint<T>(train: &[InputPair<T>], val: &[InputPair<T>]) -> Result<()> {
    let a: BTreeSet<&str> = train.iter().map(|p| p.patient_id.as_str()).collect();
    let b: BTreeSet<&str> = val.iter().map(|p| p.patient_id.as_str()).collect();
    let overlap: Vec<&str> = a.intersection(&b).copied().collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(OncoError::Data(format!(
            "train and validation share patients: {}",
            overlap.join(", ")
        )))
    }
}

/// Loss and parameter gradients of one training item.
fn item_gradients<T: Scalar>(
    model: &OncoNet<T>,
    pair: &InputPair<T>,
    aug: Option<(&AugmentConfig, u64)>,
    dropout_seed: u64,
) -> Result<(f64, Vec<(String, Tensor<T>)>)> {
    let label = pair.label.expect("checked before training");
    let (pre, post) = match aug {
        // both exams share one draw so they stay registered
        Some((cfg, seed)) => (augment(&pair.baseline, seed, cfg), augment(&pair.followup, seed, cfg)),
        None => (pair.baseline.clone(), pair.followup.clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut g = Graph::new();
    let a = g.input_ref(pre.voxels(), false);
    let b = g.input_ref(post.voxels(), false);
    let z = model.forward_graph(&mut g, a, b, Mode::Train(&mut rng))?;
    let loss = g.cross_entropy(z, label.index())?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    let grads = g.backward(loss, T::one(), ReluRule::Standard)?;
    Ok((value, grads.into_params()))
}

/// One optimizer step on a batch; returns the batch's summed loss.
fn train_batch<T: Scalar>(
    model: &mut OncoNet<T>,
    adam: &mut Adam<T>,
    batch: &[(usize, &InputPair<T>)],
    epoch: usize,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let aug_base = derive_seed(cfg.seed, Stream::Augment);
    let drop_base = derive_seed(cfg.seed, Stream::Dropout);
    let frozen: &OncoNet<T> = model;
    let results: Vec<(f64, Vec<(String, Tensor<T>)>)> = batch
        .par_iter()
        .map(|&(idx, pair)| {
            let aug = cfg.augment.as_ref().map(|a| (a, item_seed(aug_base, epoch, idx)));
            item_gradients(frozen, pair, aug, item_seed(drop_base, epoch, idx))
        })
        .collect::<Result<_>>()?;
    // summed in batch order so the result does not depend on thread count
    let mut total: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut loss = 0.0;
    for (l, grads) in results {
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(t) => t.add_assign(&g)?,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
    for g in total.values_mut() {
        g.scale(scale);
    }
    adam.step(model, &total, lr, cfg);
    Ok(loss)
}

/// Eval-mode class probabilities, computed in f64.
pub fn pair_probabilities<T: Scalar>(model: &OncoNet<T>, pair: &InputPair<T>) -> Result<[f64; NUM_CLASSES]> {
    let z = model.predict(&pair.baseline, &pair.followup)?;
    let zf: Vec<f64> = z.z.iter().map(|v| v.to_f64_lossy()).collect();
    let p = crate::nn::softmax(&zf);
    Ok([p[0], p[1], p[2]])
}

impl<T: Scalar> PairScorer<InputPair<T>> for OncoNet<T> {
    fn probabilities(&self, pair: &InputPair<T>) -> Result<[f64; NUM_CLASSES]> {
        pair_probabilities(self, pair)
    }
}

/// Mean cross-entropy and macro AUROC without dropout or augmentation.
pub fn evaluate_epoch<T: Scalar>(model: &OncoNet<T>, pairs: &[InputPair<T>]) -> Result<EpochEval> {
    if pairs.is_empty() {
        return Err(OncoError::Data("evaluation needs at least one pair".into()));
    }
    check_labeled(pairs, "evaluation")?;
    let probs: Vec<[f64; NUM_CLASSES]> = pairs
        .par_iter()
        .map(|p| pair_probabilities(model, p))
        .collect::<Result<_>>()?;
    let scored: Vec<ScoredPair> = pairs
        .iter()
        .zip(&probs)
        .map(|(pair, &p)| ScoredPair::new(pair.pair_id.clone(), p, pair.label.expect("checked")))
        .collect::<Result<_>>()?;
    Ok(eval_from_scores(scored))
}

/// Loss and macro AUROC of already-scored pairs.
pub fn eval_from_scores(scored: Vec<ScoredPair>) -> EpochEval {
    let loss = scored
        .iter()
        .map(|s| -s.probs[s.true_label.index()].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / scored.len() as f64;
    EpochEval {
        loss,
        macro_auroc: macro_auroc(&scored),
        scored,
    }
}

fn inputs_digest<T: Scalar>(pairs: &[InputPair<T>]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        for m in [&p.baseline, &p.followup] {
            for v in m.voxels().data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains a freshly initialized network and returns the parameters from the
/// epoch with the lowest validation loss.
pub fn train<T: Scalar>(cfg: &TrainConfig, train_pairs: &[InputPair<T>], val_pairs: &[InputPair<T>]) -> Result<TrainOutcome<T>> {
    let model = OncoNet::new(cfg.model_config(), derive_seed(cfg.seed, Stream::Init))?;
    train_from(cfg, model, train_pairs, val_pairs)
}

/// Same as [`train`], starting from given parameters.
pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    mut model: OncoNet<T>,
    train_pairs: &[InputPair<T>],
    val_pairs: &[InputPair<T>],
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(OncoError::Data("training needs non-empty train and validation sets".into()));
    }
    check_labeled(train_pairs, "training")?;
    check_labeled(val_pairs, "validation")?;
    check_patient_disjoint(train_pairs, val_pairs)?;

    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Data));
    let mut record = TrainRecord::default();
    let mut best: Option<(usize, f64, OncoNet<T>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &InputPair<T>)> = chunk.iter().map(|&i| (i, &train_pairs[i])).collect();
            loss_sum += train_batch(&mut model, &mut adam, &batch, epoch, lr, cfg)?;
        }
        let val = evaluate_epoch(&model, val_pairs)?;
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_pairs.len() as f64,
            val_loss: val.loss,
            val_macro_auroc: val.macro_auroc,
            wall_time_s: start.elapsed().as_secs_f64(),
            val_input_digest: inputs_digest(val_pairs),
        });
        if best.as_ref().is_none_or(|(_, l, _)| val.loss < *l) {
            best = Some((epoch, val.loss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        record,
        best_epoch,
        best_val_loss,
    })
}

impl<T: Scalar> LabeledPair for InputPair<T> {
    fn pair_id(&self) -> String {
        self.pair_id.clone()
    }

    fn label(&self) -> Option<crate::labels::ResponseLabel> {
        self.label
    }

    fn flipped(&self) -> Result<Self> {
        InputPair::flipped(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exam::ModelInput;
    use crate::labels::ResponseLabel;

    #[test]
    fn lr_schedule_steps_every_ten_epochs() {
        let cfg = TrainConfig::default();
        for e in 0..10 {
            assert_eq!(cfg.lr_at(e), 1e-4);
        }
        for e in 10..20 {
            assert!((cfg.lr_at(e) - 1e-5).abs() < 1e-20);
        }
        assert!((cfg.lr_at(29) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.lr_decay_factor = 1.0;
        assert!(c.validate().is_err());
        c.lr_decay_factor = 0.1;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn pair(id: &str, patient: &str, label: Option<ResponseLabel>) -> InputPair<f32> {
        let m = ModelInput::from_tensor(Tensor::zeros(&[2, 6, 8, 8])).unwrap();
        InputPair {
            pair_id: id.into(),
            patient_id: patient.into(),
            baseline: m.clone(),
            followup: m,
            label,
            flipped: false,
        }
    }

    #[test]
    fn overlapping_patients_are_refused() {
        let tr = [pair("a", "p1", Some(ResponseLabel::Stable)), pair("b", "p2", Some(ResponseLabel::Stable))];
        let va = [pair("c", "p2", Some(ResponseLabel::Stable)), pair("d", "p3", Some(ResponseLabel::Stable))];
        let err = check_patient_disjoint(&tr, &va).unwrap_err().to_string();
        assert!(err.contains("p2") && !err.contains("p1"), "{err}");
    }

    #[test]
    fn uniform_predictions_cost_ln3() {
        let s: Vec<_> = (0..6)
            .map(|i| ScoredPair::new(format!("{i}"), [1.0 / 3.0; 3], ResponseLabel::ALL[i % 3]).unwrap())
            .collect();
        let e = eval_from_scores(s);
        assert!((e.loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(e.macro_auroc, Some(0.5));
    }

    #[test]
    fn single_class_has_no_auroc_but_has_loss() {
        let s: Vec<_> = (0..3)
            .map(|i| ScoredPair::new(format!("{i}"), [1.0, 0.0, 0.0], ResponseLabel::Progression).unwrap())
            .collect();
        let e = eval_from_scores(s);
        assert_eq!(e.macro_auroc, None);
        assert_eq!(e.loss, 0.0);
    }

    #[test]
    fn substreams_differ() {
        let s: BTreeSet<u64> = [Stream::Data, Stream::Init, Stream::Dropout, Stream::Bootstrap, Stream::Augment]
            .iter()
            .map(|&st| derive_seed(7, st))
            .collect();
        assert_eq!(s.len(), 5);
        assert_ne!(item_seed(1, 0, 1), item_seed(1, 1, 0));
    }
}
