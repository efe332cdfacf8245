//! Resampling of exams onto the square model grid, intensity normalization
//! and the crop/rescale/rotate augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{read_volume, write_volume, ExamMeta};
use super::{Exam, ModelInput, SLICE_MULTIPLE};
use crate::error::{OncoError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Intensity normalization and target grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub grid: usize,
    pub ct_min: f32,
    pub ct_max: f32,
    pub pet_scale: f32,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            grid: 224,
            ct_min: -1000.0,
            ct_max: 1000.0,
            pet_scale: 10.0,
        }
    }
}

impl Preprocess {
    pub fn with_grid(grid: usize) -> Self {
        Self {
            grid,
            ..Self::default()
        }
    }

    /// Clip to `[ct_min, ct_max]`, then map linearly onto `[-1, 1]`.
    pub fn normalize_ct(&self, v: f32) -> f32 {
        let mid = 0.5 * (self.ct_max + self.ct_min);
        let half = 0.5 * (self.ct_max - self.ct_min);
        (v.clamp(self.ct_min, self.ct_max) - mid) / half
    }

    pub fn normalize_pet(&self, v: f32) -> f32 {
        v / self.pet_scale
    }
}

// Source index pair and weight for each output index, half-pixel centers.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of one `(h, w)` slice to `(n, n)`.
fn resize_slice(src: &[f32], h: usize, w: usize, n: usize, out: &mut [f32]) {
    let ty = axis_taps(h, n);
    let tx = axis_taps(w, n);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        let row = &mut out[oy * n..(oy + 1) * n];
        for (o, &(x0, x1, fx)) in row.iter_mut().zip(&tx) {
            let a = r0[x0] + fx * (r0[x1] - r0[x0]);
            let b = r1[x0] + fx * (r1[x1] - r1[x0]);
            *o = a + fy * (b - a);
        }
    }
}

fn resample_channel(v: &Tensor<f32>, n: usize, dst: &mut [f32], norm: impl Fn(f32) -> f32) {
    let (l, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut tmp = vec![0.0f32; h * w];
    for z in 0..l {
        for (t, s) in tmp.iter_mut().zip(&v.data()[z * h * w..(z + 1) * h * w]) {
            *t = norm(*s);
        }
        resize_slice(&tmp, h, w, n, &mut dst[z * n * n..(z + 1) * n * n]);
    }
}

/// Stacks normalized CT and PET on a common `grid × grid` plane, zero padding
/// slices at the end up to the next multiple of 6.
pub fn to_model_input<T: Scalar>(exam: &Exam, prep: &Preprocess) -> ModelInput<T> {
    let n = prep.grid;
    let l = exam.slices();
    let padded = l.div_ceil(SLICE_MULTIPLE) * SLICE_MULTIPLE;
    let plane = padded * n * n;
    let mut data = vec![0.0f32; 2 * plane];
    let (ct_part, pet_part) = data.split_at_mut(plane);
    resample_channel(exam.ct(), n, ct_part, |v| prep.normalize_ct(v));
    resample_channel(exam.pet(), n, pet_part, |v| prep.normalize_pet(v));
    let t = Tensor::from_vec(&[2, padded, n, n], data).expect("sized above");
    ModelInput::new(t.cast(), l).expect("finite resampled exam")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache directory named by `ONCONET_CACHE`, if set.
fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("ONCONET_CACHE").filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Reads an exam directory and resamples it, reusing a cached result when
/// `ONCONET_CACHE` points to a directory. Entries are keyed by a hash of the
/// volume files and the preprocessing parameters.
pub fn load_model_input<T: Scalar>(dir: &Path, prep: &Preprocess) -> Result<ModelInput<T>> {
    let Some(cache) = cache_dir() else {
        return Ok(to_model_input(&super::read_exam(dir)?, prep));
    };
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read(&meta_path).map_err(|e| OncoError::io(&meta_path, e))?;
    let meta: ExamMeta =
        serde_json::from_slice(&meta_raw).map_err(|e| OncoError::format("meta.json", e.to_string()))?;
    let mut h = Sha256::new();
    for f in ["ct.f32", "pet.f32"] {
        let p = dir.join(f);
        h.update(fs::read(&p).map_err(|e| OncoError::io(&p, e))?);
    }
    h.update(serde_json::to_vec(prep)?);
    let entry = cache.join(format!("{}.f32", hex(&h.finalize())));
    if let Ok(v) = read_volume(&entry) {
        if let Ok(input) = ModelInput::new(v.cast(), meta.l) {
            return Ok(input);
        }
    }
    let input: ModelInput<f32> = to_model_input(&super::read_exam(dir)?, prep);
    fs::create_dir_all(&cache).map_err(|e| OncoError::io(&cache, e))?;
    // write to a temporary name first so concurrent readers never see a partial file
    let tmp = entry.with_extension(format!("tmp{}", std::process::id()));
    write_volume(&tmp, input.voxels())?;
    fs::rename(&tmp, &entry).map_err(|e| OncoError::io(&entry, e))?;
    Ok(input.cast())
}

/// Train-time augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the grid (200/224 at full size).
    pub crop_fraction: f64,
    pub max_rotation_deg: f64,
    /// Leave the PET channel unrotated.
    pub rotate_ct_only: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_fraction: 200.0 / 224.0,
            max_rotation_deg: 10.0,
            rotate_ct_only: false,
        }
    }
}

/// One draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRotate {
    pub crop: usize,
    /// `(row, column)` of the crop's top-left corner.
    pub offset: (usize, usize),
    pub angle_deg: f64,
}

impl AugmentConfig {
    pub fn crop_size(&self, grid: usize) -> usize {
        ((grid as f64 * self.crop_fraction).round() as usize).clamp(1, grid)
    }

    pub fn draw(&self, grid: usize, seed: u64) -> CropRotate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = self.crop_size(grid);
        let room = grid - crop;
        let oy = rng.random_range(0..=room);
        let ox = rng.random_range(0..=room);
        let angle_deg = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg)
        } else {
            0.0
        };
        CropRotate {
            crop,
            offset: (oy, ox),
            angle_deg,
        }
    }
}

// For every output pixel, the bilinear taps into the source slice.
fn warp_taps(n: usize, p: &CropRotate, rotate: bool) -> Vec<[(usize, f32); 4]> {
    let c = (n as f64 - 1.0) / 2.0;
    let theta = if rotate { p.angle_deg.to_radians() } else { 0.0 };
    let (sin, cos) = theta.sin_cos();
    let scale = p.crop as f64 / n as f64;
    let max = (n - 1) as f64;
    let mut taps = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // inverse rotation about the grid center, then into crop coordinates
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let ry = c + cos * dy - sin * dx;
            let rx = c + sin * dy + cos * dx;
            // positions outside the image take the nearest edge value
            let sy = (p.offset.0 as f64 + (ry + 0.5) * scale - 0.5).clamp(0.0, max);
            let sx = (p.offset.1 as f64 + (rx + 0.5) * scale - 0.5).clamp(0.0, max);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            taps.push([
                (y0 * n + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * n + x1, (1.0 - fy) * fx),
                (y1 * n + x0, fy * (1.0 - fx)),
                (y1 * n + x1, fy * fx),
            ]);
        }
    }
    taps
}

/// Random crop shared by all slices and both channels, rescaled back to the
/// full grid, followed by one in-plane rotation. Deterministic in `seed`.
pub fn augment<T: Scalar>(input: &ModelInput<T>, seed: u64, cfg: &AugmentConfig) -> ModelInput<T> {
    let n = input.grid();
    let l = input.slices();
    let p = cfg.draw(n, seed);
    let rotated = warp_taps(n, &p, true);
    let unrotated = if cfg.rotate_ct_only { Some(warp_taps(n, &p, false)) } else { None };
    let src = input.voxels().data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..2 {
        let taps = match (&unrotated, ch) {
            (Some(t), 1) => t,
            _ => &rotated,
        };
        for z in 0..l {
            let off = (ch * l + z) * n * n;
            let s = &src[off..off + n * n];
            for (o, t) in out[off..off + n * n].iter_mut().zip(taps) {
                let mut acc = 0.0f32;
                for &(i, w) in t {
                    acc += w * s[i].to_f32_lossy();
                }
                *o = T::from_f32_lossy(acc);
            }
        }
    }
    let t = Tensor::from_vec(input.voxels().shape(), out).expect("same shape");
    ModelInput::new(t, input.source_slices()).expect("convex combination of finite voxels")
}
