use std::time::Instant;

use chrono::Days;
use onconet::exam::{generate_dataset, DatasetSpec, Preprocess};
use onconet::labels::{
    label_pairs, load_reports, lugano_classify, parse_report, read_manifest, region_suvmax, write_manifest, RegionName,
    ReportRecord,
};
use onconet::train::load_pairs;

fn corpus(n: usize) -> (Vec<ReportRecord>, Vec<onconet::exam::PhantomSpec>) {
    let specs = DatasetSpec {
        n_patients: n,
        seed: 17,
        ..DatasetSpec::default()
    }
    .specs();
    let mut records = Vec::new();
    for s in &specs {
        let (pre, post) = s.reports().unwrap();
        let (b, f) = s.exam_ids();
        let (db, df) = s.dates();
        for (exam_id, text, date) in [(b, pre, db), (f, post, df)] {
            records.push(ReportRecord {
                patient_id: s.patient_id.clone(),
                exam_id,
                report_text: text,
                date,
            });
        }
    }
    (records, specs)
}

#[test]
fn labeler_recovers_every_generated_label_quickly() {
    let (records, specs) = corpus(200);
    let start = Instant::now();
    let rows = label_pairs(&records, RegionName::Thorax).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(rows.len(), 200);
    for (row, spec) in rows.iter().zip(&specs) {
        let (truth, suv) = spec.ground_truth().unwrap();
        assert_eq!(row.patient_id, spec.patient_id);
        assert_eq!(row.label.label(), Some(truth));
        assert!((row.suv_pre.unwrap() - suv.suv_pre).abs() < 1e-9);
    }
    assert!(elapsed.as_secs_f64() < 5.0, "{elapsed:?}");
}

#[test]
fn parser_and_rule_agree_with_the_spec_per_report() {
    let (_, specs) = corpus(30);
    for s in &specs {
        let (pre, post) = s.reports().unwrap();
        let a = region_suvmax(&parse_report(&pre), RegionName::Thorax).unwrap();
        let b = region_suvmax(&parse_report(&post), RegionName::Thorax).unwrap();
        assert_eq!(lugano_classify(a, b).unwrap().0, s.ground_truth().unwrap().0);
    }
}

#[test]
fn out_of_order_reports_are_paired_by_date() {
    let (mut records, specs) = corpus(6);
    records.reverse();
    // a third, later exam for the first patient adds one more pair
    let mut extra = records.iter().find(|r| r.patient_id == specs[0].patient_id).unwrap().clone();
    extra.exam_id = "LATE".into();
    extra.date = specs[0].dates().1 + Days::new(90);
    records.push(extra);
    let rows = label_pairs(&records, RegionName::Thorax).unwrap();
    assert_eq!(rows.len(), 7);
    let first: Vec<_> = rows.iter().filter(|r| r.patient_id == specs[0].patient_id).collect();
    assert_eq!(first[0].baseline_exam, specs[0].exam_ids().0);
    assert_eq!(first[1].followup_exam, "LATE");
}

#[test]
fn generated_dataset_round_trips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        n_patients: 6,
        seed: 3,
        l: 6,
        ct_size: 32,
        pet_size: 16,
    };
    let truth = generate_dataset(&spec, dir.path()).unwrap();
    let corpus = load_reports(&dir.path().join("reports")).unwrap();
    assert!(corpus.skipped.is_empty());
    assert_eq!(corpus.records.len(), 12);
    let rows = label_pairs(&corpus.records, RegionName::Thorax).unwrap();
    for (row, t) in rows.iter().zip(&truth) {
        assert_eq!(row.pair_id(), t.pair_id);
        assert_eq!(row.label.label(), Some(t.label));
    }

    let mut buf = Vec::new();
    write_manifest(&rows, &mut buf).unwrap();
    let back = read_manifest(buf.as_slice()).unwrap();
    assert_eq!(back, rows);

    let pairs = load_pairs::<f32>(&back, &dir.path().join("exams"), &Preprocess::with_grid(16)).unwrap();
    assert_eq!(pairs.len(), 6);
    for (p, t) in pairs.iter().zip(&truth) {
        assert_eq!(p.pair_id, t.pair_id);
        assert_eq!(p.label, Some(t.label));
        assert_eq!(p.baseline.voxels().shape(), &[2, 6, 16, 16]);
    }
}

#[test]
fn missing_exam_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        n_patients: 3,
        seed: 4,
        l: 6,
        ct_size: 32,
        pet_size: 16,
    };
    generate_dataset(&spec, dir.path()).unwrap();
    let corpus = load_reports(&dir.path().join("reports")).unwrap();
    let rows = label_pairs(&corpus.records, RegionName::Thorax).unwrap();
    std::fs::remove_dir_all(dir.path().join("exams").join(&rows[1].followup_exam)).unwrap();
    assert!(load_pairs::<f32>(&rows, &dir.path().join("exams"), &Preprocess::with_grid(16)).is_err());
}
