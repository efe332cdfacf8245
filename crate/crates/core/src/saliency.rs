//! Guided-backpropagation saliency over the input voxels and slice overlays.

use std::fmt;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{OncoError, Result};
use crate::exam::ModelInput;
use crate::labels::ResponseLabel;
use crate::model::{Mode, OncoNet, NUM_CLASSES};
use crate::nn::{Graph, ReluRule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Member {
    Baseline,
    Followup,
}

impl Member {
    pub fn as_str(self) -> &'static str {
        match self {
            Member::Baseline => "baseline",
            Member::Followup => "followup",
        }
    }
}

impl fmt::Display for Member {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Quantity differentiated with respect to the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy against the target class, differentiated with the
    /// sign that increases the target probability. The guided rule keeps
    /// only positive signals, so the descent direction would be suppressed.
    #[default]
    Loss,
    /// The target-class logit.
    Logit,
}

impl std::str::FromStr for Objective {
    type Err = OncoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Self::Loss),
            "logit" => Ok(Self::Logit),
            other => Err(OncoError::Config(format!("unknown saliency objective {other:?}"))),
        }
    }
}

/// Per-voxel saliency of one exam, `|gradient|` scaled so the volume max is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyVolume {
    values: Tensor<f32>,
    pub target_class: ResponseLabel,
    pub member: Member,
    /// Largest `|gradient|` before normalization.
    pub raw_max: f64,
}

impl SaliencyVolume {
    /// Takes absolute values and normalizes by the volume maximum. An
    /// all-zero gradient stays zero.
    pub fn from_gradient<T: Scalar>(grad: &Tensor<T>, target_class: ResponseLabel, member: Member) -> Self {
        let abs: Vec<f64> = grad.data().iter().map(|v| v.to_f64_lossy().abs()).collect();
        let raw_max = abs.iter().copied().fold(0.0, f64::max);
        let scale = if raw_max > 0.0 { 1.0 / raw_max } else { 0.0 };
        let values = Tensor::from_fn(grad.shape(), |i| (abs[i] * scale) as f32);
        Self {
            values,
            target_class,
            member,
            raw_max,
        }
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    /// `(z, y, x)` of the largest channel-summed saliency.
    pub fn spatial_argmax(&self) -> [usize; 3] {
        let s = self.values.shape();
        let plane = s[1] * s[2] * s[3];
        let d = self.values.data();
        let mut best = (0, f32::NEG_INFINITY);
        for i in 0..plane {
            let v: f32 = (0..s[0]).map(|c| d[c * plane + i]).sum();
            if v > best.1 {
                best = (i, v);
            }
        }
        let i = best.0;
        [i / (s[2] * s[3]), (i / s[3]) % s[2], i % s[3]]
    }

    /// Slice with the largest saliency mass.
    pub fn peak_slice(&self) -> usize {
        self.spatial_argmax()[0]
    }
}

/// Signed gradients of the objective with respect to both inputs (for
/// [`Objective::Loss`], of the negated loss).
pub fn input_gradients<T: Scalar>(
    model: &OncoNet<T>,
    pre: &ModelInput<T>,
    post: &ModelInput<T>,
    target: ResponseLabel,
    objective: Objective,
    rule: ReluRule,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let a = g.input_ref(pre.voxels(), true);
    let b = g.input_ref(post.voxels(), true);
    let z = model.forward_graph(&mut g, a, b, Mode::Eval)?;
    let root = match objective {
        Objective::Loss => g.cross_entropy(z, target.index())?,
        Objective::Logit => g.pick(z, target.index())?,
    };
    let seed = match objective {
        Objective::Loss => -T::one(),
        Objective::Logit => T::one(),
    };
    let mut grads = g.backward(root, seed, rule)?;
    let zero = |x: &ModelInput<T>| Tensor::zeros(x.voxels().shape());
    let ga = grads.take(a).unwrap_or_else(|| zero(pre));
    let gb = grads.take(b).unwrap_or_else(|| zero(post));
    Ok((ga, gb))
}

/// Guided-backpropagation saliency for a target class given by index.
pub fn guided_backprop<T: Scalar>(
    model: &OncoNet<T>,
    pre: &ModelInput<T>,
    post: &ModelInput<T>,
    target_class: usize,
    objective: Objective,
) -> Result<(SaliencyVolume, SaliencyVolume)> {
    let target = ResponseLabel::from_index(target_class).ok_or_else(|| {
        OncoError::Domain(format!("target class {target_class} is not in 0..{NUM_CLASSES}"))
    })?;
    let (ga, gb) = input_gradients(model, pre, post, target, objective, ReluRule::Guided)?;
    Ok((
        SaliencyVolume::from_gradient(&ga, target, Member::Baseline),
        SaliencyVolume::from_gradient(&gb, target, Member::Followup),
    ))
}

/// Maximum heat-layer opacity.
pub const OVERLAY_ALPHA: f32 = 0.6;

/// Black-red-yellow-white ramp for `t` in `[0, 1]`.
pub fn heat_color(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

fn check_slice<T: Scalar>(input: &ModelInput<T>, slice: usize) -> Result<()> {
    if slice >= input.slices() {
        return Err(OncoError::Domain(format!(
            "slice {slice} out of range for {} slices",
            input.slices()
        )));
    }
    Ok(())
}

fn blend(gray: f32, heat: f32) -> Rgb<u8> {
    let a = OVERLAY_ALPHA * heat;
    let c = heat_color(heat);
    Rgb(c.map(|ch| (((1.0 - a) * gray + a * ch) * 255.0).round().clamp(0.0, 255.0) as u8))
}

// CT channel is normalized to [-1, 1].
fn render_with<T: Scalar>(input: &ModelInput<T>, slice: usize, heat: impl Fn(usize, usize) -> f32) -> RgbImage {
    let s = input.grid();
    let ct = input.voxels().data();
    let base = slice * s * s;
    RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let i = y as usize * s + x as usize;
        let gray = ((ct[base + i].to_f64_lossy() as f32 + 1.0) * 0.5).clamp(0.0, 1.0);
        blend(gray, heat(y as usize, x as usize))
    })
}

/// Grayscale CT slice without any overlay.
pub fn render_ct<T: Scalar>(input: &ModelInput<T>, slice: usize) -> Result<RgbImage> {
    check_slice(input, slice)?;
    Ok(render_with(input, slice, |_, _| 0.0))
}

/// CT slice with the channel-summed saliency as a heat layer, normalized
/// over the whole volume.
pub fn render_overlay<T: Scalar>(input: &ModelInput<T>, saliency: &SaliencyVolume, slice: usize) -> Result<RgbImage> {
    check_slice(input, slice)?;
    if saliency.shape() != input.voxels().shape() {
        return Err(OncoError::Shape(format!(
            "saliency {:?} does not match input {:?}",
            saliency.shape(),
            input.voxels().shape()
        )));
    }
    let sh = saliency.shape();
    let plane = sh[1] * sh[2] * sh[3];
    let d = saliency.values().data();
    let summed: Vec<f32> = (0..plane).map(|i| (0..sh[0]).map(|c| d[c * plane + i]).sum()).collect();
    let max = summed.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let s = sh[2];
    let base = slice * s * s;
    Ok(render_with(input, slice, |y, x| summed[base + y * s + x] * scale))
}

/// CT slice with PET uptake as the heat layer, normalized over the volume.
pub fn render_pet_overlay<T: Scalar>(input: &ModelInput<T>, slice: usize) -> Result<RgbImage> {
    check_slice(input, slice)?;
    let s = input.grid();
    let vol = input.slices() * s * s;
    let pet = &input.voxels().data()[vol..];
    let max = pet.iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let base = slice * s * s;
    Ok(render_with(input, slice, |y, x| {
        (pet[base + y * s + x].to_f64_lossy() * scale) as f32
    }))
}

/// `<pair_id>_<member>_<slice>.png`
pub fn overlay_filename(pair_id: &str, member: Member, slice: usize) -> String {
    format!("{pair_id}_{member}_{slice}.png")
}

pub fn write_overlay(img: &RgbImage, dir: &Path, pair_id: &str, member: Member, slice: usize) -> Result<PathBuf> {
    let path = dir.join(overlay_filename(pair_id, member, slice));
    img.save_with_format(&path, image::ImageFormat::Png)?;
    Ok(path)
}
