//! Dense 3D convolution and max-pooling kernels over `(C, D, H, W)` tensors.
//!
//! Convolutions are lowered to one GEMM per output depth slice so the
//! im2col buffer stays bounded by a single slice.

use crate::error::{OncoError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel size, stride and symmetric zero padding along (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window3 {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Window3 {
    pub const fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub const fn pointwise() -> Self {
        Self::new([1, 1, 1], [1, 1, 1], [0, 0, 0])
    }

    /// "Same" padding for odd kernels with unit stride.
    pub const fn same(kernel: [usize; 3]) -> Self {
        Self::new(
            kernel,
            [1, 1, 1],
            [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        )
    }

    fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    /// Output extent along each axis, or `None` if the window does not fit.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.pad[a];
            if span < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

fn dims4(t: &[usize], what: &str) -> Result<[usize; 4]> {
    match *t {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(OncoError::Shape(format!(
            "{what} must be (C, D, H, W), got {t:?}"
        ))),
    }
}

fn out_dims(window: &Window3, spatial: [usize; 3]) -> Result<[usize; 3]> {
    window.output_dims(spatial).ok_or_else(|| {
        OncoError::Shape(format!(
            "window {:?} does not fit input extent {:?}",
            window.kernel, spatial
        ))
    })
}

/// Fills `cols` (K x Ho*Wo) for output depth `od`.
#[allow(clippy::too_many_arguments)]
fn im2col_slice<T: Scalar>(
    x: &[T],
    [cin, d, h, w]: [usize; 4],
    win: &Window3,
    od: usize,
    [ho, wo]: [usize; 2],
    cols: &mut [T],
) {
    let [kd, kh, kw] = win.kernel;
    let [sd, sh, sw] = win.stride;
    let [pd, ph, pw] = win.pad;
    let hw = ho * wo;
    let mut row = 0;
    for ci in 0..cin {
        for a in 0..kd {
            let iz = (od * sd + a) as isize - pd as isize;
            let z_ok = iz >= 0 && (iz as usize) < d;
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    row += 1;
                    if !z_ok {
                        dst.fill(T::zero());
                        continue;
                    }
                    let plane = &x[(ci * d + iz as usize) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * sh + b) as isize - ph as isize;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy as usize >= h {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        for (ox, v) in drow.iter_mut().enumerate() {
                            let ix = (ox * sw + c) as isize - pw as isize;
                            *v = if ix >= 0 && (ix as usize) < w {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` (K x Ho*Wo) for output depth `od` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_slice<T: Scalar>(
    cols: &[T],
    [cin, d, h, w]: [usize; 4],
    win: &Window3,
    od: usize,
    [ho, wo]: [usize; 2],
    dx: &mut [T],
) {
    let [kd, kh, kw] = win.kernel;
    let [sd, sh, sw] = win.stride;
    let [pd, ph, pw] = win.pad;
    let hw = ho * wo;
    let mut row = 0;
    for ci in 0..cin {
        for a in 0..kd {
            let iz = (od * sd + a) as isize - pd as isize;
            let z_ok = iz >= 0 && (iz as usize) < d;
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * hw..(row + 1) * hw];
                    row += 1;
                    if !z_ok {
                        continue;
                    }
                    let plane = &mut dx[(ci * d + iz as usize) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * sh + b) as isize - ph as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (ox, &g) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * sw + c) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output shape of a convolution with `cout` filters.
pub fn conv3d_output_shape(input: &[usize], cout: usize, win: &Window3) -> Result<Vec<usize>> {
    let [_, d, h, w] = dims4(input, "conv input")?;
    let [od, oh, ow] = out_dims(win, [d, h, w])?;
    Ok(vec![cout, od, oh, ow])
}

/// Cross-correlation of `x` (Cin, D, H, W) with `weight` (Cout, Cin, kd, kh, kw).
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    win: &Window3,
) -> Result<Tensor<T>> {
    let xd = dims4(x.shape(), "conv input")?;
    let [cin, d, h, w] = xd;
    let (cout, k) = check_weight(weight, cin, win)?;
    let [od, oh, ow] = out_dims(win, [d, h, w])?;
    let hw = oh * ow;
    let mut out = Tensor::zeros(&[cout, od, oh, ow]);
    if win.is_pointwise() {
        let n = d * h * w;
        T::gemm(
            cout,
            cin,
            n,
            T::one(),
            weight.data(),
            (cin as isize, 1),
            x.data(),
            (n as isize, 1),
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
    } else {
        let mut cols = vec![T::zero(); k * hw];
        for z in 0..od {
            im2col_slice(x.data(), xd, win, z, [oh, ow], &mut cols);
            T::gemm(
                cout,
                k,
                hw,
                T::one(),
                weight.data(),
                (k as isize, 1),
                &cols,
                (hw as isize, 1),
                T::zero(),
                &mut out.data_mut()[z * hw..],
                ((od * hw) as isize, 1),
            );
        }
    }
    if let Some(b) = bias {
        let per = od * hw;
        for (c, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let bc = b.data()[c];
            for v in chunk {
                *v += bc;
            }
        }
    }
    Ok(out)
}

fn check_weight<T: Scalar>(weight: &Tensor<T>, cin: usize, win: &Window3) -> Result<(usize, usize)> {
    match *weight.shape() {
        [cout, wc, kd, kh, kw] if wc == cin && [kd, kh, kw] == win.kernel => {
            Ok((cout, cin * kd * kh * kw))
        }
        ref s => Err(OncoError::Shape(format!(
            "conv weight {s:?} incompatible with {cin} input channels and kernel {:?}",
            win.kernel
        ))),
    }
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a convolution given the upstream gradient `dy`.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    win: &Window3,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let xd = dims4(x.shape(), "conv input")?;
    let [cin, d, h, w] = xd;
    let (cout, k) = check_weight(weight, cin, win)?;
    let [od, oh, ow] = out_dims(win, [d, h, w])?;
    if dy.shape() != [cout, od, oh, ow] {
        return Err(OncoError::Shape(format!(
            "conv upstream gradient {:?} does not match output [{cout}, {od}, {oh}, {ow}]",
            dy.shape()
        )));
    }
    let hw = oh * ow;
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));

    if win.is_pointwise() {
        let n = d * h * w;
        T::gemm(
            cout,
            n,
            cin,
            T::one(),
            dy.data(),
            (n as isize, 1),
            x.data(),
            (1, n as isize),
            T::zero(),
            dw.data_mut(),
            (cin as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                cin,
                cout,
                n,
                T::one(),
                weight.data(),
                (1, cin as isize),
                dy.data(),
                (n as isize, 1),
                T::zero(),
                dx.data_mut(),
                (n as isize, 1),
            );
        }
    } else {
        let mut cols = vec![T::zero(); k * hw];
        for z in 0..od {
            im2col_slice(x.data(), xd, win, z, [oh, ow], &mut cols);
            let dy_slice = &dy.data()[z * hw..];
            T::gemm(
                cout,
                hw,
                k,
                T::one(),
                dy_slice,
                ((od * hw) as isize, 1),
                &cols,
                (1, hw as isize),
                T::one(),
                dw.data_mut(),
                (k as isize, 1),
            );
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    k,
                    cout,
                    hw,
                    T::one(),
                    weight.data(),
                    (1, k as isize),
                    dy_slice,
                    ((od * hw) as isize, 1),
                    T::zero(),
                    &mut cols,
                    (hw as isize, 1),
                );
                col2im_slice(&cols, xd, win, z, [oh, ow], dx.data_mut());
            }
        }
    }

    let per = od * hw;
    let bias = Tensor::from_fn(&[cout], |c| dy.data()[c * per..(c + 1) * per].iter().copied().sum());
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias,
    })
}

/// Max pooling with implicit `-inf` padding. Returns the output and the flat
/// input index selected for every output element.
pub fn max_pool3d_forward<T: Scalar>(x: &Tensor<T>, win: &Window3) -> Result<(Tensor<T>, Vec<u32>)> {
    let [c, d, h, w] = dims4(x.shape(), "pool input")?;
    let [od, oh, ow] = out_dims(win, [d, h, w])?;
    let [kd, kh, kw] = win.kernel;
    let [sd, sh, sw] = win.stride;
    let [pd, ph, pw] = win.pad;
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let mut arg = vec![0u32; c * od * oh * ow];
    let xs = x.data();
    let mut o = 0;
    for ch in 0..c {
        let base = ch * d * h * w;
        for z in 0..od {
            let z0 = (z * sd) as isize - pd as isize;
            for y in 0..oh {
                let y0 = (y * sh) as isize - ph as isize;
                for xo in 0..ow {
                    let x0 = (xo * sw) as isize - pw as isize;
                    let mut best = T::neg_infinity();
                    let mut best_i = None;
                    for a in 0..kd as isize {
                        let iz = z0 + a;
                        if iz < 0 || iz as usize >= d {
                            continue;
                        }
                        for b in 0..kh as isize {
                            let iy = y0 + b;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let row = base + (iz as usize * h + iy as usize) * w;
                            for cc in 0..kw as isize {
                                let ix = x0 + cc;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let i = row + ix as usize;
                                if best_i.is_none() || xs[i] > best {
                                    best = xs[i];
                                    best_i = Some(i);
                                }
                            }
                        }
                    }
                    let i = best_i.ok_or_else(|| {
                        OncoError::Shape("pooling window lies entirely in padding".into())
                    })?;
                    out.data_mut()[o] = best;
                    arg[o] = i as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool3d_backward<T: Scalar>(input_shape: &[usize], argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i as usize] += g;
    }
    dx
}
