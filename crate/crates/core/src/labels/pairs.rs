use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{lugano_classify, parse_report, region_suvmax, RegionName, ResponseLabel};
use crate::error::{OncoError, Result};

/// One report with its exam metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    pub patient_id: String,
    pub exam_id: String,
    pub report_text: String,
    pub date: NaiveDate,
}

/// Reports found under a directory plus files that could not be used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportCorpus {
    pub records: Vec<ReportRecord>,
    /// `(path, reason)` for every skipped file.
    pub skipped: Vec<(String, String)>,
}

fn record_from_path(pid: &str, path: &Path) -> std::result::Result<ReportRecord, String> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or("file name is not UTF-8")?;
    let (date, exam_id) = stem
        .split_once('_')
        .ok_or("file name is not <date>_<exam_id>.txt")?;
    let date: NaiveDate = date.parse().map_err(|e| format!("bad date {date:?}: {e}"))?;
    if exam_id.is_empty() {
        return Err("empty exam id".into());
    }
    let report_text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    Ok(ReportRecord {
        patient_id: pid.to_string(),
        exam_id: exam_id.to_string(),
        report_text,
        date,
    })
}

/// Reads `<dir>/<patient_id>/<date>_<exam_id>.txt`. Unreadable or misnamed
/// files are reported in `skipped`; records come out sorted by path.
pub fn load_reports(dir: &Path) -> Result<ReportCorpus> {
    let list = |d: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .map_err(|e| OncoError::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut corpus = ReportCorpus::default();
    for pdir in list(dir)? {
        if !pdir.is_dir() {
            continue;
        }
        let Some(pid) = pdir.file_name().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        for f in list(&pdir)? {
            if f.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            match record_from_path(&pid, &f) {
                Ok(r) => corpus.records.push(r),
                Err(why) => corpus.skipped.push((f.display().to_string(), why)),
            }
        }
    }
    Ok(corpus)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Labeled(ResponseLabel),
    /// One of the two reports has no SUVmax for the region.
    Unlabeled,
}

impl PairLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairLabel::Labeled(l) => l.as_str(),
            PairLabel::Unlabeled => "unlabeled",
        }
    }

    pub fn label(&self) -> Option<ResponseLabel> {
        match self {
            PairLabel::Labeled(l) => Some(*l),
            PairLabel::Unlabeled => None,
        }
    }
}

/// One row of the pair manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLabelRow {
    pub patient_id: String,
    pub baseline_exam: String,
    pub followup_exam: String,
    pub region: RegionName,
    pub suv_pre: Option<f64>,
    pub suv_post: Option<f64>,
    pub percent_change: Option<f64>,
    pub label: PairLabel,
}

impl PairLabelRow {
    /// Identifier used for this pair in predictions and saliency output.
    pub fn pair_id(&self) -> String {
        format!("{}__{}", self.baseline_exam, self.followup_exam)
    }
}

/// Consecutive-in-time exam pairs per patient, labeled by the region SUVmax
/// change. Rows are ordered by patient id, then date.
pub fn label_pairs(records: &[ReportRecord], region: RegionName) -> Result<Vec<PairLabelRow>> {
    let mut by_patient: BTreeMap<&str, Vec<&ReportRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(&r.patient_id).or_default().push(r);
    }
    let mut collisions = Vec::new();
    for (pid, exams) in by_patient.iter_mut() {
        exams.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.exam_id.cmp(&b.exam_id)));
        for w in exams.windows(2) {
            if w[0].date == w[1].date {
                collisions.push(format!(
                    "{pid} on {} ({}, {})",
                    w[0].date, w[0].exam_id, w[1].exam_id
                ));
            }
        }
    }
    if !collisions.is_empty() {
        return Err(OncoError::Data(format!(
            "duplicate (patient_id, date): {}",
            collisions.join("; ")
        )));
    }

    let mut rows = Vec::new();
    for (pid, exams) in by_patient {
        let suv: Vec<Option<f64>> = exams
            .iter()
            .map(|r| region_suvmax(&parse_report(&r.report_text), region))
            .collect();
        for i in 1..exams.len() {
            let (pre, post) = (suv[i - 1], suv[i]);
            let (label, pc) = match (pre, post) {
                (Some(a), Some(b)) => {
                    let (l, p) = lugano_classify(a, b)?;
                    (PairLabel::Labeled(l), Some(p.percent_change))
                }
                _ => (PairLabel::Unlabeled, None),
            };
            rows.push(PairLabelRow {
                patient_id: pid.to_string(),
                baseline_exam: exams[i - 1].exam_id.clone(),
                followup_exam: exams[i].exam_id.clone(),
                region,
                suv_pre: pre,
                suv_post: post,
                percent_change: pc,
                label,
            });
        }
    }
    Ok(rows)
}

pub const MANIFEST_HEADER: [&str; 8] = [
    "patient_id",
    "baseline_exam",
    "followup_exam",
    "region",
    "suv_pre",
    "suv_post",
    "percent_change",
    "label",
];

fn fmt_opt(v: Option<f64>) -> String {
    // Display prints the shortest string that round-trips.
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_manifest<W: Write>(rows: &[PairLabelRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([
            r.patient_id.as_str(),
            &r.baseline_exam,
            &r.followup_exam,
            r.region.as_str(),
            &fmt_opt(r.suv_pre),
            &fmt_opt(r.suv_post),
            &fmt_opt(r.percent_change),
            r.label.as_str(),
        ])?;
    }
    w.flush().map_err(|e| OncoError::io("<manifest>", e))?;
    Ok(())
}

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<PairLabelRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(OncoError::format(
            "manifest header",
            format!("expected {:?}, got {:?}", MANIFEST_HEADER, header),
        ));
    }
    let opt = |s: &str, field: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| OncoError::format(field, format!("not a number: {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let label = match &rec[7] {
            "unlabeled" => PairLabel::Unlabeled,
            s => PairLabel::Labeled(s.parse()?),
        };
        rows.push(PairLabelRow {
            patient_id: rec[0].to_string(),
            baseline_exam: rec[1].to_string(),
            followup_exam: rec[2].to_string(),
            region: rec[3].parse()?,
            suv_pre: opt(&rec[4], "suv_pre")?,
            suv_post: opt(&rec[5], "suv_post")?,
            percent_change: opt(&rec[6], "percent_change")?,
            label,
        });
    }
    Ok(rows)
}
