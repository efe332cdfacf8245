//! Exam directories: `meta.json`, `ct.f32` and `pet.f32`. Each volume file is
//! one JSON header line `{"shape": [l, H, W]}` followed by little-endian f32
//! data in C order.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::Exam;
use crate::error::{OncoError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamMeta {
    pub exam_id: String,
    pub patient_id: String,
    pub date: NaiveDate,
    pub l: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
}

pub fn write_volume(path: &Path, v: &Tensor<f32>) -> Result<()> {
    let mut bytes = serde_json::to_vec(&Header {
        shape: v.shape().to_vec(),
    })?;
    bytes.push(b'\n');
    bytes.reserve(v.len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| OncoError::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| OncoError::io(path, e))?;
    let field = |f: &str| format!("{}: {f}", path.display());
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| OncoError::format(field("header"), "missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| OncoError::format(field("header"), e.to_string()))?;
    let payload = &bytes[nl + 1..];
    let want: usize = header.shape.iter().product();
    if payload.len() != want * 4 {
        return Err(OncoError::format(
            field("shape"),
            format!(
                "header declares {:?} ({} values) but payload holds {} bytes ({} values)",
                header.shape,
                want,
                payload.len(),
                payload.len() as f64 / 4.0
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&header.shape, data)
}

pub fn write_exam(exam: &Exam, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OncoError::io(dir, e))?;
    let meta = ExamMeta {
        exam_id: exam.exam_id.clone(),
        patient_id: exam.patient_id.clone(),
        date: exam.date,
        l: exam.slices(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| OncoError::io(&meta_path, e))?;
    write_volume(&dir.join("ct.f32"), exam.ct())?;
    write_volume(&dir.join("pet.f32"), exam.pet())
}

pub fn read_exam(dir: &Path) -> Result<Exam> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read(&meta_path).map_err(|e| OncoError::io(&meta_path, e))?;
    let meta: ExamMeta =
        serde_json::from_slice(&raw).map_err(|e| OncoError::format("meta.json", e.to_string()))?;
    let ct = read_volume(&dir.join("ct.f32"))?;
    let pet = read_volume(&dir.join("pet.f32"))?;
    for (what, v) in [("ct.f32", &ct), ("pet.f32", &pet)] {
        if v.shape().first() != Some(&meta.l) {
            return Err(OncoError::format(
                format!("{what} shape"),
                format!("meta.json says l={}, volume has shape {:?}", meta.l, v.shape()),
            ));
        }
    }
    Exam::new(meta.exam_id, meta.patient_id, meta.date, ct, pet)
}
