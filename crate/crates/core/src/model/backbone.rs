//! Inflated Inception-style 3D encoders.
//!
//! Both variants reduce depth by 6. The full backbone reduces height and
//! width by 32 (224 -> 7); the tiny one by 8 (56 -> 7) and exists for
//! gradient checks and fast smoke training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::kernels::Window3;
use crate::nn::params::{he_uniform, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Inception,
    Tiny,
}

impl BackboneKind {
    /// Height/width reduction factor.
    pub fn spatial_stride(self) -> usize {
        match self {
            BackboneKind::Inception => 32,
            BackboneKind::Tiny => 8,
        }
    }

    /// Depth reduction factor.
    pub const fn depth_stride(self) -> usize {
        6
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// No rectifiers anywhere; only useful for testing gradient rules.
    Identity,
}

/// Output widths of the four inception branches:
/// `[1x1, 3x3 reduce, 3x3, 3x3b reduce, 3x3b, pool proj]`.
type Widths = [usize; 6];

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        win: Window3,
    },
    Pool(Window3),
    Mixed {
        name: String,
        cin: usize,
        widths: Widths,
    },
}

fn mixed_out(w: &Widths) -> usize {
    w[0] + w[2] + w[4] + w[5]
}

/// Scales a template block to `scale` and forces the output width to `out`
/// when given.
fn scaled(template: Widths, scale: f64, out: Option<usize>) -> Widths {
    let mut w = template.map(|v| ((v as f64 * scale).round() as usize).max(1));
    if let Some(out) = out {
        let rest = w[0] + w[2] + w[4];
        w[5] = out.saturating_sub(rest).max(1);
        if mixed_out(&w) != out {
            // very small targets: shrink the other branches first
            w = [1, 1, 1, 1, 1, 1];
            w[0] = out.saturating_sub(3).max(1);
        }
    }
    w
}

const POOL_HW: Window3 = Window3::new([1, 3, 3], [1, 2, 2], [0, 1, 1]);
const POOL_DHW: Window3 = Window3::new([3, 3, 3], [3, 2, 2], [0, 1, 1]);
const BRANCH_POOL: Window3 = Window3::new([3, 3, 3], [1, 1, 1], [1, 1, 1]);

/// A concrete encoder layout.
#[derive(Clone, Debug)]
pub struct Backbone {
    kind: BackboneKind,
    layers: Vec<Layer>,
    out_channels: usize,
}

impl Backbone {
    pub fn new(kind: BackboneKind, in_channels: usize, out_channels: usize) -> Self {
        let layers = match kind {
            BackboneKind::Inception => inception_layers(in_channels, out_channels),
            BackboneKind::Tiny => tiny_layers(in_channels, out_channels),
        };
        Self {
            kind,
            layers,
            out_channels,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Registers every parameter under `prefix` with He-uniform weights and
    /// zero biases.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, prefix: &str, store: &mut ParamStore<T>, rng: &mut R) {
        for (name, shape) in self.param_shapes(prefix) {
            if name.ends_with(".bias") {
                store.insert(&name, crate::tensor::Tensor::zeros(&shape));
            } else {
                let fan_in = shape[1..].iter().product();
                store.insert(&name, he_uniform(&shape, fan_in, rng));
            }
        }
    }

    /// Parameter names and shapes in registration order.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: [usize; 3]| {
            out.push((format!("{name}.weight"), vec![cout, cin, k[0], k[1], k[2]]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        for layer in &self.layers {
            match layer {
                Layer::Conv { name, cin, cout, win } => {
                    conv(format!("{prefix}.{name}"), *cin, *cout, win.kernel)
                }
                Layer::Pool(_) => {}
                Layer::Mixed { name, cin, widths } => {
                    let p = format!("{prefix}.{name}");
                    conv(format!("{p}.branch0"), *cin, widths[0], [1, 1, 1]);
                    conv(format!("{p}.branch1a"), *cin, widths[1], [1, 1, 1]);
                    conv(format!("{p}.branch1b"), widths[1], widths[2], [3, 3, 3]);
                    conv(format!("{p}.branch2a"), *cin, widths[3], [1, 1, 1]);
                    conv(format!("{p}.branch2b"), widths[3], widths[4], [3, 3, 3]);
                    conv(format!("{p}.branch3"), *cin, widths[5], [1, 1, 1]);
                }
            }
        }
        out
    }

    /// Records the encoder on `g`; input `(Cin, l, H, W)`, output
    /// `(C, l/6, H/s, W/s)`.
    pub fn forward<'p, T: Scalar>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        prefix: &str,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        let unit = |g: &mut Graph<'p, T>, name: &str, x: Var, win: Window3| -> Result<Var> {
            let w = g.param(store, &format!("{name}.weight"))?;
            let b = g.param(store, &format!("{name}.bias"))?;
            let y = g.conv3d(x, w, Some(b), win)?;
            Ok(match act {
                Activation::Relu => g.relu(y),
                Activation::Identity => y,
            })
        };
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { name, win, .. } => unit(g, &format!("{prefix}.{name}"), h, *win)?,
                Layer::Pool(win) => g.max_pool3d(h, *win)?,
                Layer::Mixed { name, .. } => {
                    let p = format!("{prefix}.{name}");
                    let b0 = unit(g, &format!("{p}.branch0"), h, Window3::pointwise())?;
                    let b1 = unit(g, &format!("{p}.branch1a"), h, Window3::pointwise())?;
                    let b1 = unit(g, &format!("{p}.branch1b"), b1, Window3::same([3, 3, 3]))?;
                    let b2 = unit(g, &format!("{p}.branch2a"), h, Window3::pointwise())?;
                    let b2 = unit(g, &format!("{p}.branch2b"), b2, Window3::same([3, 3, 3]))?;
                    let b3 = g.max_pool3d(h, BRANCH_POOL)?;
                    let b3 = unit(g, &format!("{p}.branch3"), b3, Window3::pointwise())?;
                    g.concat(&[b0, b1, b2, b3])?
                }
            };
        }
        Ok(h)
    }
}

fn conv(name: &str, cin: usize, cout: usize, win: Window3) -> Layer {
    Layer::Conv {
        name: name.to_string(),
        cin,
        cout,
        win,
    }
}

fn inception_layers(cin: usize, out: usize) -> Vec<Layer> {
    let s = out as f64 / 1024.0;
    let ch = |v: usize| ((v as f64 * s).round() as usize).max(1);
    let blocks: [(&str, Widths); 9] = [
        ("mixed_3b", [64, 96, 128, 16, 32, 32]),
        ("mixed_3c", [128, 128, 192, 32, 96, 64]),
        ("mixed_4b", [192, 96, 208, 16, 48, 64]),
        ("mixed_4c", [160, 112, 224, 24, 64, 64]),
        ("mixed_4d", [128, 128, 256, 24, 64, 64]),
        ("mixed_4e", [112, 144, 288, 32, 64, 64]),
        ("mixed_4f", [256, 160, 320, 32, 128, 128]),
        ("mixed_5b", [256, 160, 320, 32, 128, 128]),
        ("mixed_5c", [384, 192, 384, 48, 128, 128]),
    ];
    let mut layers = vec![
        conv("conv_1a", cin, ch(64), Window3::new([7, 7, 7], [2, 2, 2], [3, 3, 3])),
        Layer::Pool(POOL_HW),
        conv("conv_2b", ch(64), ch(64), Window3::pointwise()),
        conv("conv_2c", ch(64), ch(192), Window3::same([3, 3, 3])),
        Layer::Pool(POOL_HW),
    ];
    let mut c = ch(192);
    for (name, template) in blocks {
        match name {
            "mixed_4b" => layers.push(Layer::Pool(POOL_DHW)),
            "mixed_5b" => layers.push(Layer::Pool(POOL_HW)),
            _ => {}
        }
        let target = (name == "mixed_5c").then_some(out);
        let widths = scaled(template, s, target);
        layers.push(Layer::Mixed {
            name: name.into(),
            cin: c,
            widths,
        });
        c = mixed_out(&widths);
    }
    layers
}

fn tiny_layers(cin: usize, out: usize) -> Vec<Layer> {
    let first = [4, 4, 8, 2, 4, 4];
    vec![
        conv("conv_1a", cin, 8, Window3::new([3, 5, 5], [2, 2, 2], [1, 2, 2])),
        Layer::Pool(POOL_HW),
        Layer::Mixed {
            name: "mixed_a".into(),
            cin: 8,
            widths: first,
        },
        Layer::Pool(POOL_DHW),
        Layer::Mixed {
            name: "mixed_b".into(),
            cin: mixed_out(&first),
            widths: scaled([64, 96, 128, 16, 32, 32], out as f64 / 256.0, Some(out)),
        },
    ]
}
