//! The paired-exam response classifier: a shared 3D encoder with a
//! soft-attention decoder, a difference head and a two-layer classifier,
//! plus the single-pass variant that differences the inputs instead.

pub mod attention;
pub mod backbone;
pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OncoError, Result};
use crate::exam::ModelInput;
use crate::labels::ResponseLabel;
use crate::nn::graph::{softmax, Graph, Var};
use crate::nn::params::{fan_in_uniform, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use backbone::{Activation, Backbone, BackboneKind};

/// Number of output classes, ordered as [`ResponseLabel::ALL`].
pub const NUM_CLASSES: usize = 3;
/// PET/CT channels of a model input.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiffDirection {
    /// `follow-up - baseline`
    #[default]
    FollowupMinusBaseline,
    BaselineMinusFollowup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Two weight-shared passes, difference of decoder outputs.
    #[default]
    Siamese,
    /// One pass over the voxelwise input difference.
    SinglePass,
}

impl std::str::FromStr for ModelVariant {
    type Err = OncoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(Self::Siamese),
            "single_pass" | "single-pass" => Ok(Self::SinglePass),
            other => Err(OncoError::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Which input channels the encoder may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputChannels {
    #[default]
    Both,
    CtOnly,
    PetOnly,
}

impl InputChannels {
    fn keep(self) -> Option<[bool; INPUT_CHANNELS]> {
        match self {
            InputChannels::Both => None,
            InputChannels::CtOnly => Some([true, false]),
            InputChannels::PetOnly => Some([false, true]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Encoder channels per voxel; also the decoder/hidden size.
    #[serde(rename = "C")]
    pub channels: usize,
    pub dropout: f64,
    pub diff_direction: DiffDirection,
    #[serde(default)]
    pub variant: ModelVariant,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub input_channels: InputChannels,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Inception,
            channels: 1024,
            dropout: 0.5,
            diff_direction: DiffDirection::FollowupMinusBaseline,
            variant: ModelVariant::Siamese,
            activation: Activation::Relu,
            input_channels: InputChannels::Both,
        }
    }
}

impl ModelConfig {
    /// Small backbone with 8 encoder channels.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            channels: 8,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(OncoError::Config(format!(
                "encoder needs at least 4 channels, got {}",
                self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(OncoError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn hidden_size(&self) -> usize {
        self.channels
    }
}

/// Forward-pass mode; dropout only fires in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Encoder output of shape `(C, l/6, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding<T> {
    grid: Tensor<T>,
}

impl<T: Scalar> Encoding<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        if grid.shape().len() != 4 {
            return Err(OncoError::Shape(format!(
                "encoding must be (C, D, H, W), got {:?}",
                grid.shape()
            )));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Tensor<T> {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[0]
    }

    /// `(depth, height, width)` of the voxel grid.
    pub fn spatial_dims(&self) -> [usize; 3] {
        let s = self.grid.shape();
        [s[1], s[2], s[3]]
    }
}

/// Softmax attention weights, one per encoding voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    alpha: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(alpha: Tensor<T>) -> Self {
        Self { alpha }
    }

    pub fn alpha(&self) -> &Tensor<T> {
        &self.alpha
    }
}

/// Decoder output (or the difference of two), length `hidden_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderRepr<T> {
    h: Vec<T>,
}

impl<T: Scalar> DecoderRepr<T> {
    pub fn new(h: Vec<T>) -> Self {
        Self { h }
    }

    pub fn values(&self) -> &[T] {
        &self.h
    }

    pub fn norm(&self) -> T {
        self.h.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Logits ordered (Progression, Resolution, Stable).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassLogits<T> {
    pub z: [T; NUM_CLASSES],
}

impl<T: Scalar> ClassLogits<T> {
    fn from_slice(z: &[T]) -> Result<Self> {
        let z: [T; NUM_CLASSES] = z
            .try_into()
            .map_err(|_| OncoError::Shape(format!("expected {NUM_CLASSES} logits, got {}", z.len())))?;
        Ok(Self { z })
    }

    pub fn probabilities(&self) -> [T; NUM_CLASSES] {
        let p = softmax(&self.z);
        [p[0], p[1], p[2]]
    }

    pub fn predicted(&self) -> ResponseLabel {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.z[k] > self.z[best] {
                best = k;
            }
        }
        ResponseLabel::from_index(best).expect("index below NUM_CLASSES")
    }
}

/// Parameter-name prefixes of the three trainable components.
pub const ENCODER_PREFIX: &str = "encoder";
pub const ATTENTION_PARAM: &str = "decoder.attention.w";
pub const CLASSIFIER_PREFIX: &str = "classifier";

/// The network together with its parameters.
#[derive(Clone, Debug)]
pub struct OncoNet<T> {
    config: ModelConfig,
    backbone: Backbone,
    params: ParamStore<T>,
}

impl<T: Scalar> OncoNet<T> {
    /// Randomly initialized network: He-uniform convolutions, zero attention
    /// vector (uniform attention at start), fan-in uniform linear layers.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone, INPUT_CHANNELS, config.channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone.init_params(ENCODER_PREFIX, &mut params, &mut rng);
        let c = config.channels;
        let hidden = config.hidden_size();
        params.insert(ATTENTION_PARAM, Tensor::zeros(&[c]));
        params.insert("classifier.fc1.weight", fan_in_uniform(&[hidden, c], c, &mut rng));
        params.insert("classifier.fc1.bias", fan_in_uniform(&[hidden], c, &mut rng));
        params.insert("classifier.fc2.weight", fan_in_uniform(&[NUM_CLASSES, hidden], hidden, &mut rng));
        params.insert("classifier.fc2.bias", fan_in_uniform(&[NUM_CLASSES], hidden, &mut rng));
        Ok(Self {
            config,
            backbone,
            params,
        })
    }

    /// Wraps existing parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = Self::new(config.clone(), 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(OncoError::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(OncoError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if let Some(extra) = params.names().find(|n| expected.params.get(n).is_none()) {
            return Err(OncoError::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            params,
            ..expected
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Same network in another scalar type.
    pub fn cast<U: Scalar>(&self) -> OncoNet<U> {
        OncoNet {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            params: self.params.cast(),
        }
    }

    // ---- graph-level building blocks ----

    /// Records the encoder on an input node of shape `(2, l, H, W)`.
    pub fn encode_graph<'p>(&'p self, g: &mut Graph<'p, T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        check_input_shape(&shape)?;
        let x = match self.config.input_channels.keep() {
            Some(keep) => g.channel_mask(x, &keep)?,
            None => x,
        };
        self.backbone
            .forward(g, &self.params, ENCODER_PREFIX, x, self.config.activation)
    }

    /// Records the attention decoder on an encoding node.
    pub fn decode_graph<'p>(&'p self, g: &mut Graph<'p, T>, enc: Var) -> Result<Var> {
        let w = g.param(&self.params, ATTENTION_PARAM)?;
        g.attention(enc, w)
    }

    fn ordered<'a>(&self, pre: &'a Var, post: &'a Var) -> (Var, Var) {
        match self.config.diff_direction {
            DiffDirection::FollowupMinusBaseline => (*post, *pre),
            DiffDirection::BaselineMinusFollowup => (*pre, *post),
        }
    }

    /// Weight-shared passes over both exams; returns the decoder difference.
    pub fn siamese_diff_graph<'p>(&'p self, g: &mut Graph<'p, T>, pre: Var, post: Var) -> Result<Var> {
        let (first, second) = self.ordered(&pre, &post);
        let e1 = self.encode_graph(g, first)?;
        let h1 = self.decode_graph(g, e1)?;
        let e2 = self.encode_graph(g, second)?;
        let h2 = self.decode_graph(g, e2)?;
        g.sub(h1, h2)
    }

    /// `fc2(dropout(relu(fc1(d))))`.
    pub fn classify_graph<'p>(&'p self, g: &mut Graph<'p, T>, d: Var, mode: Mode<'_>) -> Result<Var> {
        let p = &self.params;
        let w1 = g.param(p, "classifier.fc1.weight")?;
        let b1 = g.param(p, "classifier.fc1.bias")?;
        let mut h = g.linear(d, w1, b1)?;
        if self.config.activation == Activation::Relu {
            h = g.relu(h);
        }
        if let Mode::Train(rng) = mode {
            if self.config.dropout > 0.0 {
                let keep = 1.0 - self.config.dropout;
                let scale = T::from_f64_lossy(1.0 / keep);
                let n = g.value(h).len();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                h = g.dropout(h, mask)?;
            }
        }
        let w2 = g.param(p, "classifier.fc2.weight")?;
        let b2 = g.param(p, "classifier.fc2.bias")?;
        g.linear(h, w2, b2)
    }

    /// Logits for a pair under the configured variant.
    pub fn forward_graph<'p>(&'p self, g: &mut Graph<'p, T>, pre: Var, post: Var, mode: Mode<'_>) -> Result<Var> {
        self.forward_graph_as(self.config.variant, g, pre, post, mode)
    }

    /// Logits for a pair under an explicit variant.
    pub fn forward_graph_as<'p>(
        &'p self,
        variant: ModelVariant,
        g: &mut Graph<'p, T>,
        pre: Var,
        post: Var,
        mode: Mode<'_>,
    ) -> Result<Var> {
        let d = match variant {
            ModelVariant::Siamese => self.siamese_diff_graph(g, pre, post)?,
            ModelVariant::SinglePass => {
                if g.value(pre).shape() != g.value(post).shape() {
                    return Err(OncoError::Shape(format!(
                        "pair shapes differ: {:?} vs {:?}",
                        g.value(pre).shape(),
                        g.value(post).shape()
                    )));
                }
                let (first, second) = self.ordered(&pre, &post);
                let x = g.sub(first, second)?;
                let e = self.encode_graph(g, x)?;
                self.decode_graph(g, e)?
            }
        };
        self.classify_graph(g, d, mode)
    }

    // ---- tensor-level convenience API (eval mode) ----

    pub fn encode(&self, input: &ModelInput<T>) -> Result<Encoding<T>> {
        let mut g = Graph::new();
        let x = g.input_ref(input.voxels(), false);
        let e = self.encode_graph(&mut g, x)?;
        Encoding::new(g.value(e).clone())
    }

    /// The learned attention vector `w`.
    pub fn attention_vector(&self) -> &[T] {
        self.params
            .get(ATTENTION_PARAM)
            .expect("attention vector registered at construction")
            .data()
    }

    pub fn siamese_diff(&self, pre: &ModelInput<T>, post: &ModelInput<T>) -> Result<DecoderRepr<T>> {
        let mut g = Graph::new();
        let a = g.input_ref(pre.voxels(), false);
        let b = g.input_ref(post.voxels(), false);
        let d = self.siamese_diff_graph(&mut g, a, b)?;
        Ok(DecoderRepr::new(g.value(d).data().to_vec()))
    }

    /// Decoder output for a single exam.
    pub fn decode(&self, input: &ModelInput<T>) -> Result<DecoderRepr<T>> {
        let mut g = Graph::new();
        let x = g.input_ref(input.voxels(), false);
        let e = self.encode_graph(&mut g, x)?;
        let h = self.decode_graph(&mut g, e)?;
        Ok(DecoderRepr::new(g.value(h).data().to_vec()))
    }

    pub fn classify(&self, d: &DecoderRepr<T>, mode: Mode<'_>) -> Result<ClassLogits<T>> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[d.values().len()], d.values().to_vec())?, false);
        let z = self.classify_graph(&mut g, x, mode)?;
        ClassLogits::from_slice(g.value(z).data())
    }

    /// Siamese logits regardless of the configured variant.
    pub fn forward_pair(&self, pre: &ModelInput<T>, post: &ModelInput<T>) -> Result<ClassLogits<T>> {
        self.forward_as(ModelVariant::Siamese, pre, post)
    }

    /// Single-pass logits regardless of the configured variant.
    pub fn forward_single_pass(&self, pre: &ModelInput<T>, post: &ModelInput<T>) -> Result<ClassLogits<T>> {
        self.forward_as(ModelVariant::SinglePass, pre, post)
    }

    /// Eval-mode logits under the configured variant.
    pub fn predict(&self, pre: &ModelInput<T>, post: &ModelInput<T>) -> Result<ClassLogits<T>> {
        self.forward_as(self.config.variant, pre, post)
    }

    fn forward_as(&self, variant: ModelVariant, pre: &ModelInput<T>, post: &ModelInput<T>) -> Result<ClassLogits<T>> {
        let mut g = Graph::new();
        let a = g.input_ref(pre.voxels(), false);
        let b = g.input_ref(post.voxels(), false);
        let z = self.forward_graph_as(variant, &mut g, a, b, Mode::Eval)?;
        ClassLogits::from_slice(g.value(z).data())
    }
}

fn check_input_shape(shape: &[usize]) -> Result<()> {
    match *shape {
        [INPUT_CHANNELS, l, _, _] if l > 0 && l % 6 == 0 => Ok(()),
        [INPUT_CHANNELS, l, _, _] => Err(OncoError::Shape(format!(
            "slice count {l} is not a positive multiple of 6"
        ))),
        _ => Err(OncoError::Shape(format!(
            "model input must be (2, l, H, W), got {shape:?}"
        ))),
    }
}
