//! Synthetic paired exams with known response: Gaussian PET lesions on a
//! noisy background, matching CT density blobs, and report text that lists
//! each lesion's peak uptake.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_exam, Exam, ExamPair, CT_SIZE, PET_SIZE};
use crate::error::{OncoError, Result};
use crate::labels::{lugano_classify, ResponseLabel, SuvPair};
use crate::tensor::Tensor;

/// A spherical lesion in PET voxel coordinates (`x`, `y` in-plane, `z` slice).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
    pub suv_peak: f64,
}

impl Lesion {
    /// Gaussian width; the profile falls to e^-2 of the peak at the radius.
    fn sigma(&self) -> f64 {
        self.radius / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub l: usize,
    pub lesions: Vec<Lesion>,
    /// Multiplies every lesion peak at follow-up.
    pub change_factor: f64,
    pub patient_id: String,
    pub baseline_date: NaiveDate,
    pub interval_days: u64,
    pub ct_size: usize,
    pub pet_size: usize,
}

const STREAM_BASELINE: u64 = 0;
const STREAM_FOLLOWUP: u64 = 1;
const STREAM_REPORT: u64 = 2;

/// Change factors per class; every draw is at least 15 points from a
/// threshold, so labels survive flipping.
fn change_range(label: ResponseLabel) -> (f64, f64) {
    match label {
        ResponseLabel::Progression => (1.5, 2.0),
        ResponseLabel::Resolution => (0.3, 0.6),
        ResponseLabel::Stable => (0.9, 1.1),
    }
}

impl PhantomSpec {
    pub fn new(seed: u64, l: usize, lesions: Vec<Lesion>, change_factor: f64) -> Self {
        let base = NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date");
        Self {
            seed,
            l,
            lesions,
            change_factor,
            patient_id: format!("PT{seed}"),
            baseline_date: base + Days::new(seed % 3650),
            interval_days: 90,
            ct_size: CT_SIZE,
            pet_size: PET_SIZE,
        }
    }

    pub fn with_geometry(mut self, ct_size: usize, pet_size: usize) -> Self {
        self.ct_size = ct_size;
        self.pet_size = pet_size;
        self
    }

    /// One lesion with a class-appropriate change factor, all drawn from `seed`.
    pub fn random(seed: u64, label: ResponseLabel, l: usize, ct_size: usize, pet_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = change_range(label);
        let change_factor = rng.random_range(lo..=hi);
        let r_max = ((l as f64 - 1.0) / 2.0).min(pet_size as f64 / 8.0);
        let radius = rng.random_range(0.6 * r_max..=r_max);
        let margin = radius + 0.15 * pet_size as f64;
        let xy_hi = pet_size as f64 - 1.0 - margin;
        let x = rng.random_range(margin..=xy_hi.max(margin));
        let y = rng.random_range(margin..=xy_hi.max(margin));
        let z = rng.random_range(radius..=(l as f64 - 1.0 - radius).max(radius));
        let suv_peak = rng.random_range(5.0..=10.0);
        Self::new(
            seed,
            l,
            vec![Lesion {
                center: [x, y, z],
                radius,
                suv_peak,
            }],
            change_factor,
        )
        .with_geometry(ct_size, pet_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.change_factor > 0.0 && self.change_factor.is_finite()) {
            return Err(OncoError::Spec(format!("change_factor must be positive, got {}", self.change_factor)));
        }
        if self.l < super::SLICE_MULTIPLE {
            return Err(OncoError::Spec(format!("need at least 6 slices, got {}", self.l)));
        }
        if self.ct_size == 0 || self.pet_size == 0 {
            return Err(OncoError::Spec("volume sizes must be positive".into()));
        }
        if self.lesions.is_empty() {
            return Err(OncoError::Spec("a phantom needs at least one lesion".into()));
        }
        let limits = [self.pet_size as f64 - 1.0, self.pet_size as f64 - 1.0, self.l as f64 - 1.0];
        for (i, les) in self.lesions.iter().enumerate() {
            if !(les.radius > 0.0 && les.suv_peak > 0.0) {
                return Err(OncoError::Spec(format!("lesion {i} needs positive radius and peak")));
            }
            for (axis, (&c, &hi)) in ["x", "y", "z"].iter().zip(les.center.iter().zip(&limits)) {
                if c - les.radius < 0.0 || c + les.radius > hi {
                    return Err(OncoError::Spec(format!(
                        "lesion {i} extends outside the volume along {axis}: center {c}, radius {}, extent [0, {hi}]",
                        les.radius
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn followup_lesions(&self) -> Vec<Lesion> {
        self.lesions
            .iter()
            .map(|l| Lesion {
                suv_peak: l.suv_peak * self.change_factor,
                ..*l
            })
            .collect()
    }

    fn max_peak(lesions: &[Lesion]) -> f64 {
        lesions.iter().map(|l| l.suv_peak).fold(f64::MIN, f64::max)
    }

    /// Label of the largest lesion peak before and after.
    pub fn ground_truth(&self) -> Result<(ResponseLabel, SuvPair)> {
        self.validate()?;
        lugano_classify(Self::max_peak(&self.lesions), Self::max_peak(&self.followup_lesions()))
    }

    pub fn exam_ids(&self) -> (String, String) {
        (format!("{}_e0", self.patient_id), format!("{}_e1", self.patient_id))
    }

    pub fn dates(&self) -> (NaiveDate, NaiveDate) {
        (self.baseline_date, self.baseline_date + Days::new(self.interval_days))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Liver uptake written into the abdomen section, baseline then follow-up.
    pub fn liver_suv(&self) -> (f64, f64) {
        let mut rng = self.rng(STREAM_REPORT);
        (rng.random_range(1.5..=2.5), rng.random_range(1.5..=2.5))
    }

    /// Inclusive `(z, y, x)` bounds of the largest follow-up lesion on a
    /// `grid × grid` model input plane.
    pub fn lesion_bbox(&self, grid: usize) -> ([usize; 3], [usize; 3]) {
        let les = self
            .followup_lesions()
            .into_iter()
            .max_by(|a, b| a.suv_peak.total_cmp(&b.suv_peak))
            .expect("validated spec has a lesion");
        let s = grid as f64 / self.pet_size as f64;
        let to_grid = |p: f64| (p + 0.5) * s - 0.5;
        let hi_xy = (grid - 1) as f64;
        let hi_z = (self.l - 1) as f64;
        let span = |c: f64, r: f64, hi: f64| ((c - r).floor().max(0.0) as usize, (c + r).ceil().min(hi) as usize);
        let (z0, z1) = span(les.center[2], les.radius, hi_z);
        let (y0, y1) = span(to_grid(les.center[1]), les.radius * s, hi_xy);
        let (x0, x1) = span(to_grid(les.center[0]), les.radius * s, hi_xy);
        ([z0, y0, x0], [z1, y1, x1])
    }

    /// Baseline and follow-up report text.
    pub fn reports(&self) -> Result<(String, String)> {
        self.validate()?;
        let mut rng = self.rng(STREAM_REPORT);
        let liver = (rng.random_range(1.5..=2.5), rng.random_range(1.5..=2.5));
        let (d0, d1) = self.dates();
        let pre = render_report(d0, &self.lesions, liver.0, &mut rng);
        let post = render_report(d1, &self.followup_lesions(), liver.1, &mut rng);
        Ok((pre, post))
    }

    fn pet_volume(&self, lesions: &[Lesion], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = self.pet_size;
        let mut v = Tensor::from_fn(&[self.l, n, n], |_| rng.random_range(0.5f32..=1.5));
        let data = v.data_mut();
        for z in 0..self.l {
            for y in 0..n {
                for x in 0..n {
                    let i = (z * n + y) * n + x;
                    for les in lesions {
                        let d2 = (x as f64 - les.center[0]).powi(2)
                            + (y as f64 - les.center[1]).powi(2)
                            + (z as f64 - les.center[2]).powi(2);
                        let s = les.sigma();
                        let g = (les.suv_peak * (-d2 / (2.0 * s * s)).exp()) as f32;
                        data[i] = data[i].max(g);
                    }
                }
            }
        }
        v
    }

    fn ct_volume(&self, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = self.ct_size;
        let scale = n as f64 / self.pet_size as f64;
        let c = (n as f64 - 1.0) / 2.0;
        let body = 0.45 * n as f64;
        let noise = Normal::new(0.0f32, 20.0).expect("valid sigma");
        let mut v = Tensor::zeros(&[self.l, n, n]);
        let data = v.data_mut();
        for z in 0..self.l {
            for y in 0..n {
                for x in 0..n {
                    let r2 = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)) / (body * body);
                    let base = if r2 <= 1.0 { 40.0 } else { -1000.0 };
                    let mut hu = base + noise.sample(rng);
                    for les in &self.lesions {
                        // PET voxel centers map to CT coordinates through the pixel-center rule
                        let cx = (les.center[0] + 0.5) * scale - 0.5;
                        let cy = (les.center[1] + 0.5) * scale - 0.5;
                        let s = les.sigma() * scale;
                        let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (s * s)
                            + (z as f64 - les.center[2]).powi(2) / les.sigma().powi(2);
                        hu += (60.0 * (-d2 / 2.0).exp()) as f32;
                    }
                    data[(z * n + y) * n + x] = hu;
                }
            }
        }
        v
    }
}

fn render_report(date: NaiveDate, lesions: &[Lesion], liver: f64, rng: &mut ChaCha8Rng) -> String {
    let phrasing = |v: f64, rng: &mut ChaCha8Rng| match rng.random_range(0..4) {
        0 => format!("SUVmax {v}"),
        1 => format!("SUV max of {v}"),
        2 => format!("SUV-max = {v}"),
        _ => format!("SUVmax: {v}"),
    };
    let mut s = String::new();
    let _ = writeln!(s, "EXAMINATION: FDG PET/CT skull base to mid-thigh");
    let _ = writeln!(s, "DATE: {date}");
    let _ = writeln!(s, "FINDINGS:");
    let _ = writeln!(s, "HEAD AND NECK:");
    let _ = writeln!(s, "No hypermetabolic cervical lymphadenopathy.");
    let _ = writeln!(s, "THORAX:");
    for (i, les) in lesions.iter().enumerate() {
        let _ = writeln!(s, "Hypermetabolic pulmonary nodule {} with {}.", i + 1, phrasing(les.suv_peak, rng));
    }
    let _ = writeln!(s, "ABDOMEN AND PELVIS:");
    let _ = writeln!(s, "Physiologic hepatic uptake, {}.", phrasing(liver, rng));
    let _ = writeln!(s, "IMPRESSION:");
    let _ = write!(s, "See findings above.");
    s
}

/// Builds both exams and their reports. The pair carries the ground-truth
/// label and the SUV pair it was derived from.
pub fn make_phantom_pair(spec: &PhantomSpec) -> Result<(ExamPair, String, String)> {
    let (label, suv) = spec.ground_truth()?;
    let (pre_report, post_report) = spec.reports()?;
    let (id0, id1) = spec.exam_ids();
    let (d0, d1) = spec.dates();
    let mut r0 = spec.rng(STREAM_BASELINE);
    let mut r1 = spec.rng(STREAM_FOLLOWUP);
    let baseline = Exam::new(
        id0,
        spec.patient_id.clone(),
        d0,
        spec.ct_volume(&mut r0),
        spec.pet_volume(&spec.lesions, &mut r0),
    )?;
    let followup = Exam::new(
        id1,
        spec.patient_id.clone(),
        d1,
        spec.ct_volume(&mut r1),
        spec.pet_volume(&spec.followup_lesions(), &mut r1),
    )?;
    let pair = ExamPair::new(baseline, followup, Some(label), Some(suv))?;
    Ok((pair, pre_report, post_report))
}

/// Parameters of a generated on-disk dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_patients: usize,
    pub seed: u64,
    pub l: usize,
    pub ct_size: usize,
    pub pet_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_patients: 30,
            seed: 0,
            l: 12,
            ct_size: CT_SIZE,
            pet_size: PET_SIZE,
        }
    }
}

impl DatasetSpec {
    /// Class assignment cycles progression, resolution, stable so any
    /// multiple of three patients is exactly balanced.
    pub fn specs(&self) -> Vec<PhantomSpec> {
        let mut master = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_patients)
            .map(|i| {
                let label = ResponseLabel::ALL[i % 3];
                let mut s = PhantomSpec::random(master.random(), label, self.l, self.ct_size, self.pet_size);
                s.patient_id = format!("PT{i:04}");
                s.baseline_date =
                    NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date") + Days::new(master.random_range(0..3000));
                s
            })
            .collect()
    }
}

/// Everything known about one generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord {
    pub patient_id: String,
    pub pair_id: String,
    pub baseline_exam: String,
    pub followup_exam: String,
    pub label: ResponseLabel,
    pub suv_pre: f64,
    pub suv_post: f64,
    pub liver_pre: f64,
    pub liver_post: f64,
    pub deauville: u8,
    pub spec: PhantomSpec,
}

impl PhantomRecord {
    /// See [`PhantomSpec::lesion_bbox`].
    pub fn lesion_bbox(&self, grid: usize) -> ([usize; 3], [usize; 3]) {
        self.spec.lesion_bbox(grid)
    }
}

/// Ground-truth CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub patient_id: String,
    pub baseline_exam: String,
    pub followup_exam: String,
    pub label: ResponseLabel,
    pub suv_pre: f64,
    pub suv_post: f64,
    pub change_factor: f64,
}

// Synthetic Deauville score for the follow-up exam, mostly consistent with
// the response class.
fn deauville_for(label: ResponseLabel, rng: &mut ChaCha8Rng) -> u8 {
    if rng.random_bool(0.1) {
        return rng.random_range(1..=5);
    }
    match label {
        ResponseLabel::Progression => 5,
        ResponseLabel::Resolution => rng.random_range(1..=3),
        ResponseLabel::Stable => {
            if rng.random_bool(0.7) {
                4
            } else {
                3
            }
        }
    }
}

/// Writes `exams/`, `reports/`, `ground_truth.csv`, `deauville.csv` and
/// `phantoms.json` under `out`.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<Vec<PhantomRecord>> {
    let mut deauville_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    deauville_rng.set_stream(7);
    let mut records = Vec::with_capacity(spec.n_patients);
    for ps in spec.specs() {
        let (pair, pre_report, post_report) = make_phantom_pair(&ps)?;
        let label = pair.label.expect("phantom pairs are labeled");
        let suv = pair.suv.expect("phantom pairs carry SUVs");
        for (exam, report) in [(&pair.baseline, &pre_report), (&pair.followup, &post_report)] {
            write_exam(exam, &out.join("exams").join(&exam.exam_id))?;
            let rdir = out.join("reports").join(&exam.patient_id);
            fs::create_dir_all(&rdir).map_err(|e| OncoError::io(&rdir, e))?;
            let rpath = rdir.join(format!("{}_{}.txt", exam.date, exam.exam_id));
            fs::write(&rpath, report).map_err(|e| OncoError::io(&rpath, e))?;
        }
        let (liver_pre, liver_post) = ps.liver_suv();
        records.push(PhantomRecord {
            patient_id: ps.patient_id.clone(),
            pair_id: pair.pair_id(),
            baseline_exam: pair.baseline.exam_id.clone(),
            followup_exam: pair.followup.exam_id.clone(),
            label,
            suv_pre: suv.suv_pre,
            suv_post: suv.suv_post,
            liver_pre,
            liver_post,
            deauville: deauville_for(label, &mut deauville_rng),
            spec: ps,
        });
    }

    let gt_path = out.join("ground_truth.csv");
    let mut w = csv::Writer::from_path(&gt_path)?;
    for r in &records {
        w.serialize(GroundTruthRow {
            patient_id: r.patient_id.clone(),
            baseline_exam: r.baseline_exam.clone(),
            followup_exam: r.followup_exam.clone(),
            label: r.label,
            suv_pre: r.suv_pre,
            suv_post: r.suv_post,
            change_factor: r.spec.change_factor,
        })?;
    }
    w.flush().map_err(|e| OncoError::io(&gt_path, e))?;

    let dv_path = out.join("deauville.csv");
    let mut w = csv::Writer::from_path(&dv_path)?;
    w.write_record(["pair_id", "deauville"])?;
    for r in &records {
        w.write_record([r.pair_id.as_str(), &r.deauville.to_string()])?;
    }
    w.flush().map_err(|e| OncoError::io(&dv_path, e))?;

    let ph_path = out.join("phantoms.json");
    fs::write(&ph_path, serde_json::to_vec_pretty(&records)?).map_err(|e| OncoError::io(&ph_path, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{parse_report, region_suvmax, RegionName};

    fn small(label: ResponseLabel, seed: u64) -> PhantomSpec {
        PhantomSpec::random(seed, label, 12, 32, 16)
    }

    #[test]
    fn change_factor_decides_label() {
        let les = vec![Lesion {
            center: [8.0, 8.0, 5.0],
            radius: 3.0,
            suv_peak: 6.0,
        }];
        for (cf, want) in [
            (1.6, ResponseLabel::Progression),
            (1.0, ResponseLabel::Stable),
            (0.5, ResponseLabel::Resolution),
        ] {
            let s = PhantomSpec::new(1, 12, les.clone(), cf).with_geometry(32, 16);
            assert_eq!(s.ground_truth().unwrap().0, want);
        }
    }

    #[test]
    fn lesion_outside_volume_is_a_spec_error() {
        let s = PhantomSpec::new(
            1,
            12,
            vec![Lesion {
                center: [1.0, 8.0, 5.0],
                radius: 3.0,
                suv_peak: 6.0,
            }],
            1.0,
        )
        .with_geometry(32, 16);
        assert!(matches!(s.validate(), Err(OncoError::Spec(_))));
    }

    #[test]
    fn reports_recover_ground_truth() {
        for seed in 0..60 {
            let s = small(ResponseLabel::ALL[seed as usize % 3], seed);
            let (want, _) = s.ground_truth().unwrap();
            let (a, b) = s.reports().unwrap();
            let pre = region_suvmax(&parse_report(&a), RegionName::Thorax).unwrap();
            let post = region_suvmax(&parse_report(&b), RegionName::Thorax).unwrap();
            assert_eq!(lugano_classify(pre, post).unwrap().0, want, "seed {seed}");
        }
    }

    #[test]
    fn volumes_are_deterministic_and_lesion_is_brightest() {
        let s = small(ResponseLabel::Progression, 4);
        let (p1, r1, _) = make_phantom_pair(&s).unwrap();
        let (p2, r2, _) = make_phantom_pair(&s).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
        let pet = p1.followup.pet();
        let at = pet.unravel(pet.argmax().unwrap());
        let c = s.lesions[0].center;
        assert!((at[0] as f64 - c[2]).abs() <= 1.0 && (at[1] as f64 - c[1]).abs() <= 1.0 && (at[2] as f64 - c[0]).abs() <= 1.0);
        assert!(p1.baseline.pet().data().iter().all(|&v| v >= 0.5));
    }

    #[test]
    fn random_specs_are_valid_for_small_geometries() {
        for seed in 0..200 {
            for (l, pet) in [(6, 8), (12, 16), (12, 64), (36, 128)] {
                PhantomSpec::random(seed, ResponseLabel::Stable, l, pet * 2, pet).validate().unwrap();
            }
        }
    }
}
