//! PET/CT exams on disk and in memory, the resampled network input, train-time
//! augmentation and a synthetic phantom generator.

mod io;
mod phantom;
mod resample;

use chrono::NaiveDate;

use crate::error::{OncoError, Result};
use crate::labels::{ResponseLabel, SuvPair};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{read_exam, read_volume, write_exam, write_volume, ExamMeta};
pub use phantom::{
    generate_dataset, make_phantom_pair, DatasetSpec, GroundTruthRow, Lesion, PhantomRecord, PhantomSpec,
};
pub use resample::{augment, load_model_input, to_model_input, AugmentConfig, CropRotate, Preprocess};

/// Clinical acquisition sizes: CT slices are 512², PET slices 128².
pub const CT_SIZE: usize = 512;
pub const PET_SIZE: usize = 128;
/// Encoder temporal stride; model inputs are padded to a multiple of it.
pub const SLICE_MULTIPLE: usize = 6;

/// One PET/CT examination. Volumes are `(l, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Exam {
    pub exam_id: String,
    pub patient_id: String,
    pub date: NaiveDate,
    ct: Tensor<f32>,
    pet: Tensor<f32>,
}

impl Exam {
    pub fn new(
        exam_id: impl Into<String>,
        patient_id: impl Into<String>,
        date: NaiveDate,
        ct: Tensor<f32>,
        pet: Tensor<f32>,
    ) -> Result<Self> {
        let exam_id = exam_id.into();
        for (what, v) in [("ct", &ct), ("pet", &pet)] {
            if v.shape().len() != 3 {
                return Err(OncoError::Shape(format!(
                    "{exam_id}: {what} must be (l, H, W), got {:?}",
                    v.shape()
                )));
            }
        }
        let l = ct.shape()[0];
        if pet.shape()[0] != l {
            return Err(OncoError::Shape(format!(
                "{exam_id}: ct has {l} slices, pet has {}",
                pet.shape()[0]
            )));
        }
        if l < SLICE_MULTIPLE {
            return Err(OncoError::Shape(format!("{exam_id}: need at least 6 slices, got {l}")));
        }
        if let Some(v) = pet.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(OncoError::Domain(format!("{exam_id}: pet value {v} is negative or NaN")));
        }
        Ok(Self {
            exam_id,
            patient_id: patient_id.into(),
            date,
            ct,
            pet,
        })
    }

    pub fn ct(&self) -> &Tensor<f32> {
        &self.ct
    }

    pub fn pet(&self) -> &Tensor<f32> {
        &self.pet
    }

    pub fn slices(&self) -> usize {
        self.ct.shape()[0]
    }
}

/// Baseline and follow-up exams of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamPair {
    pub baseline: Exam,
    pub followup: Exam,
    pub label: Option<ResponseLabel>,
    pub suv: Option<SuvPair>,
    /// Set when the temporal order has been reversed.
    pub flipped: bool,
}

impl ExamPair {
    pub fn new(baseline: Exam, followup: Exam, label: Option<ResponseLabel>, suv: Option<SuvPair>) -> Result<Self> {
        let pair = Self {
            baseline,
            followup,
            label,
            suv,
            flipped: false,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline.patient_id != self.followup.patient_id {
            return Err(OncoError::Data(format!(
                "pair mixes patients {} and {}",
                self.baseline.patient_id, self.followup.patient_id
            )));
        }
        if !self.flipped && self.baseline.date > self.followup.date {
            return Err(OncoError::Data(format!(
                "baseline {} ({}) is after follow-up {} ({})",
                self.baseline.exam_id, self.baseline.date, self.followup.exam_id, self.followup.date
            )));
        }
        Ok(())
    }

    pub fn pair_id(&self) -> String {
        format!("{}__{}", self.baseline.exam_id, self.followup.exam_id)
    }
}

/// Reverses the temporal order of a labeled pair. Progression and resolution
/// swap; stable stays stable. Applying it twice restores the pair.
pub fn flip_pair(pair: ExamPair) -> Result<ExamPair> {
    let label = pair
        .label
        .ok_or_else(|| OncoError::Data(format!("cannot flip unlabeled pair {}", pair.pair_id())))?;
    Ok(ExamPair {
        baseline: pair.followup,
        followup: pair.baseline,
        label: Some(label.flipped()),
        suv: pair.suv.map(|s| s.flipped()),
        flipped: !pair.flipped,
    })
}

/// Network input: `(2, l, S, S)` with CT in channel 0 and PET in channel 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    voxels: Tensor<T>,
    /// Slice count before zero padding.
    source_slices: usize,
}

impl<T: Scalar> ModelInput<T> {
    pub fn new(voxels: Tensor<T>, source_slices: usize) -> Result<Self> {
        match *voxels.shape() {
            [2, l, h, w] if l > 0 && l % SLICE_MULTIPLE == 0 && h == w && source_slices <= l => {}
            _ => {
                return Err(OncoError::Shape(format!(
                    "model input must be (2, 6k, S, S), got {:?}",
                    voxels.shape()
                )))
            }
        }
        if !voxels.all_finite() {
            return Err(OncoError::Domain("model input has non-finite voxels".into()));
        }
        Ok(Self {
            voxels,
            source_slices,
        })
    }

    /// Wraps a full tensor with no padding information.
    pub fn from_tensor(voxels: Tensor<T>) -> Result<Self> {
        let l = voxels.shape().get(1).copied().unwrap_or(0);
        Self::new(voxels, l)
    }

    pub fn voxels(&self) -> &Tensor<T> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Tensor<T> {
        self.voxels
    }

    pub fn slices(&self) -> usize {
        self.voxels.shape()[1]
    }

    pub fn source_slices(&self) -> usize {
        self.source_slices
    }

    pub fn grid(&self) -> usize {
        self.voxels.shape()[2]
    }

    pub fn cast<U: Scalar>(&self) -> ModelInput<U> {
        ModelInput {
            voxels: self.voxels.cast(),
            source_slices: self.source_slices,
        }
    }
}
