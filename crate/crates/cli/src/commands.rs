use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use onconet::exam::{generate_dataset, DatasetSpec, Preprocess};
use onconet::labels::{label_pairs, load_reports, read_manifest, write_manifest, PairLabelRow, RegionName, ResponseLabel};
use onconet::metrics::{
    deauville_agreement, flip_eval as flip_eval_pairs, multiclass_report, paired_bootstrap_pvalue, score_pairs,
    DeauvilleScore, EvalReport, ScoredPair,
};
use onconet::model::checkpoint;
use onconet::model::{ModelConfig, ModelVariant, OncoNet};
use onconet::saliency::{guided_backprop, render_overlay, render_pet_overlay, write_overlay, Member, Objective};
use onconet::train::{derive_seed, load_pairs, patient_split, train as train_model, InputPair, Stream, TrainConfig};
use onconet::OncoError;

use crate::{plot, AgreementArgs, CliError, DataArgs, EvalArgs, LabelArgs, PhantomArgs, ReportArgs, SaliencyArgs, TrainArgs};

type CliResult<T> = Result<T, CliError>;

const PREPROCESS_KEY: &str = "preprocess";
const TRAIN_KEY: &str = "train";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    OncoError::io(path, e).into()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(OncoError::from)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("{} does not exist", path.display())))
    }
}

fn write_rows(rows: &[PairLabelRow], path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_manifest(rows, f)?;
    Ok(())
}

fn read_rows(path: &Path) -> CliResult<Vec<PairLabelRow>> {
    require_exists(path)?;
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(read_manifest(f)?)
}

fn class_counts<'a>(labels: impl Iterator<Item = Option<ResponseLabel>> + 'a) -> BTreeMap<&'static str, usize> {
    let mut counts: BTreeMap<&'static str, usize> = ResponseLabel::ALL.iter().map(|c| (c.as_str(), 0)).collect();
    for l in labels {
        *counts.entry(l.map_or("unlabeled", |c| c.as_str())).or_default() += 1;
    }
    counts
}

pub fn label(a: &LabelArgs) -> CliResult<Value> {
    let region: RegionName = a.region.parse()?;
    require_exists(&a.reports)?;
    let corpus = load_reports(&a.reports)?;
    for (path, why) in &corpus.skipped {
        eprintln!("{}", json!({ "warning": "skipped report", "path": path, "reason": why }));
    }
    if corpus.records.is_empty() {
        return Err(CliError::data(format!("no reports parsed under {}", a.reports.display())));
    }
    let rows = label_pairs(&corpus.records, region)?;
    write_rows(&rows, &a.out)?;
    Ok(json!({
        "manifest": a.out,
        "region": region,
        "n_reports": corpus.records.len(),
        "n_skipped": corpus.skipped.len(),
        "n_pairs": rows.len(),
        "class_counts": class_counts(rows.iter().map(|r| r.label.label())),
    }))
}

const PHANTOM_OUTPUTS: [&str; 5] = ["exams", "reports", "ground_truth.csv", "deauville.csv", "phantoms.json"];

pub fn phantom(a: &PhantomArgs) -> CliResult<Value> {
    if a.n_patients == 0 {
        return Err(CliError::config("--n-patients must be at least 1"));
    }
    let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !a.force {
            return Err(CliError::config(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        for name in PHANTOM_OUTPUTS {
            let p = a.out.join(name);
            let res = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            if let Err(e) = res.filter_err() {
                return Err(io_err(&p, e));
            }
        }
    }
    create_dir(&a.out)?;
    let spec = DatasetSpec {
        n_patients: a.n_patients,
        seed: a.seed,
        l: a.slices,
        ct_size: a.ct_size,
        pet_size: a.pet_size,
    };
    let records = generate_dataset(&spec, &a.out)?;
    Ok(json!({
        "out": a.out,
        "n_patients": a.n_patients,
        "n_pairs": records.len(),
        "class_counts": class_counts(records.iter().map(|r| Some(r.label))),
    }))
}

trait FilterNotFound {
    fn filter_err(self) -> std::io::Result<()>;
}

impl FilterNotFound for std::io::Result<()> {
    fn filter_err(self) -> std::io::Result<()> {
        match self {
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            other => other,
        }
    }
}

fn labeled_rows(rows: Vec<PairLabelRow>) -> (Vec<PairLabelRow>, usize) {
    let n = rows.len();
    let kept: Vec<_> = rows.into_iter().filter(|r| r.label.label().is_some()).collect();
    let dropped = n - kept.len();
    (kept, dropped)
}

fn load(data: &DataArgs, rows: &[PairLabelRow], prep: &Preprocess) -> CliResult<Vec<InputPair<f32>>> {
    require_exists(&data.exams)?;
    Ok(load_pairs(rows, &data.exams, prep)?)
}

pub fn train(a: &TrainArgs) -> CliResult<Value> {
    let variant: ModelVariant = a.variant.parse()?;
    let mut model = if a.tiny { ModelConfig::tiny() } else { ModelConfig::default() };
    if let Some(c) = a.channels {
        model.channels = c;
    }
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        lr: a.lr,
        patience: a.patience,
        seed: a.seed,
        variant,
        model,
        augment: if a.no_augment { None } else { Some(Default::default()) },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    if a.grid < 8 {
        return Err(CliError::config(format!("--grid {} is too small", a.grid)));
    }
    let prep = Preprocess::with_grid(a.grid);

    let (rows, n_unlabeled) = labeled_rows(read_rows(&a.data.manifest)?);
    let (train_rows, val_rows) = patient_split(
        &rows,
        |r| r.patient_id.as_str(),
        a.val_fraction,
        derive_seed(a.seed, Stream::Data),
    )?;
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(CliError::data(format!(
            "need labeled pairs from at least two patients, got {} train and {} validation",
            train_rows.len(),
            val_rows.len()
        )));
    }
    let train_pairs = load(&a.data, &train_rows, &prep)?;
    let val_pairs = load(&a.data, &val_rows, &prep)?;
    let outcome = train_model(&cfg, &train_pairs, &val_pairs)?;

    create_dir(&a.out)?;
    let ckpt = a.out.join("model.safetensors");
    let meta = BTreeMap::from([
        (PREPROCESS_KEY.to_string(), serde_json::to_string(&prep).map_err(OncoError::from)?),
        (TRAIN_KEY.to_string(), serde_json::to_string(&cfg).map_err(OncoError::from)?),
    ]);
    checkpoint::save_with(&outcome.model, &ckpt, &meta)?;
    let log = a.out.join("train_log.jsonl");
    let f = fs::File::create(&log).map_err(|e| io_err(&log, e))?;
    outcome.record.write_jsonl(std::io::BufWriter::new(f))?;
    write_rows(&train_rows, &a.out.join("train_manifest.csv"))?;
    write_rows(&val_rows, &a.out.join("val_manifest.csv"))?;

    let best = &outcome.record.epochs[outcome.best_epoch];
    Ok(json!({
        "checkpoint": ckpt,
        "train_manifest": a.out.join("train_manifest.csv"),
        "val_manifest": a.out.join("val_manifest.csv"),
        "n_train": train_pairs.len(),
        "n_val": val_pairs.len(),
        "n_unlabeled_skipped": n_unlabeled,
        "epochs_run": outcome.record.epochs.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "best_val_macro_auroc": best.val_macro_auroc,
        "variant": variant,
    }))
}

fn load_model(path: &Path) -> CliResult<(OncoNet<f32>, Preprocess)> {
    require_exists(path)?;
    let (model, meta) = checkpoint::load_with_metadata::<f32>(path)?;
    let prep = match meta.get(PREPROCESS_KEY) {
        Some(s) => serde_json::from_str(s).map_err(OncoError::from)?,
        None => Preprocess::default(),
    };
    Ok((model, prep))
}

fn eval_inputs(a: &EvalArgs) -> CliResult<(OncoNet<f32>, Vec<InputPair<f32>>, usize)> {
    if a.n_bootstrap == 0 {
        return Err(CliError::config("--n-bootstrap must be at least 1"));
    }
    let (model, prep) = load_model(&a.checkpoint)?;
    let (rows, dropped) = labeled_rows(read_rows(&a.data.manifest)?);
    if rows.is_empty() {
        return Err(CliError::data("manifest has no labeled pairs"));
    }
    let pairs = load(&a.data, &rows, &prep)?;
    Ok((model, pairs, dropped))
}

fn write_predictions(scored: &[ScoredPair], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(OncoError::from)?;
    w.write_record([
        "pair_id",
        "true_label",
        "predicted",
        "p_progression",
        "p_resolution",
        "p_stable",
    ])
    .map_err(OncoError::from)?;
    for s in scored {
        w.write_record([
            s.pair_id.clone(),
            s.true_label.as_str().to_string(),
            s.predicted().as_str().to_string(),
            s.probs[0].to_string(),
            s.probs[1].to_string(),
            s.probs[2].to_string(),
        ])
        .map_err(OncoError::from)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

// One row per ROC point; the micro-averaged curve is labeled "micro".
fn write_roc(report: &EvalReport, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(OncoError::from)?;
    w.write_record(["class", "fpr", "tpr"]).map_err(OncoError::from)?;
    let curves = ResponseLabel::ALL
        .iter()
        .map(|c| (c.as_str(), report.roc_points.get(*c)))
        .chain(std::iter::once(("micro", &report.micro_roc)));
    for (name, points) in curves {
        for (fpr, tpr) in points {
            w.write_record([name.to_string(), fpr.to_string(), tpr.to_string()])
                .map_err(OncoError::from)?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn eval(a: &EvalArgs) -> CliResult<Value> {
    let (model, pairs, dropped) = eval_inputs(a)?;
    let boot_seed = derive_seed(a.seed, Stream::Bootstrap);
    let scored = score_pairs(&model, &pairs)?;
    let report = multiclass_report(&scored, a.n_bootstrap, boot_seed)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    write_predictions(&scored, &a.out.join("predictions.csv"))?;
    write_roc(&report, &a.out.join("roc.csv"))?;
    let mut out = serde_json::to_value(&report).map_err(OncoError::from)?;
    out["n_unlabeled_skipped"] = json!(dropped);
    if let Some(other) = &a.compare {
        let (model_b, _) = load_model(other)?;
        let scored_b = score_pairs(&model_b, &pairs)?;
        let cmp = paired_bootstrap_pvalue(&scored, &scored_b, a.n_bootstrap, boot_seed)?;
        write_json(&a.out.join("comparison.json"), &cmp)?;
        out["comparison"] = serde_json::to_value(&cmp).map_err(OncoError::from)?;
    }
    Ok(out)
}

pub fn flip_eval(a: &EvalArgs) -> CliResult<Value> {
    let (model, pairs, dropped) = eval_inputs(a)?;
    let (original, flipped) = flip_eval_pairs(&model, &pairs, a.n_bootstrap, derive_seed(a.seed, Stream::Bootstrap))?;
    let delta = original.auroc_macro.zip(flipped.auroc_macro).map(|(o, f)| f - o);
    let out = json!({
        "original": original,
        "flipped": flipped,
        "delta_auroc_macro": delta,
        "n_unlabeled_skipped": dropped,
    });
    create_dir(&a.out)?;
    write_json(&a.out.join("flip_eval.json"), &out)?;
    Ok(out)
}

#[derive(Deserialize)]
struct PredictionRow {
    pair_id: String,
    predicted: ResponseLabel,
}

#[derive(Deserialize)]
struct DeauvilleRow {
    pair_id: String,
    deauville: DeauvilleScore,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    require_exists(path)?;
    let mut r = csv::Reader::from_path(path).map_err(OncoError::from)?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn agreement(a: &AgreementArgs) -> CliResult<Value> {
    let preds: Vec<PredictionRow> = read_csv(&a.predictions)?;
    let scores: BTreeMap<String, DeauvilleScore> = read_csv::<DeauvilleRow>(&a.deauville)?
        .into_iter()
        .map(|r| (r.pair_id, r.deauville))
        .collect();
    let missing: Vec<&str> = preds
        .iter()
        .filter(|p| !scores.contains_key(&p.pair_id))
        .map(|p| p.pair_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::data(format!("no Deauville score for: {}", missing.join(", "))));
    }
    if preds.is_empty() {
        return Err(CliError::data("no predictions to compare"));
    }
    let labels: Vec<ResponseLabel> = preds.iter().map(|p| p.predicted).collect();
    let ds: Vec<DeauvilleScore> = preds.iter().map(|p| scores[&p.pair_id]).collect();
    let result = deauville_agreement(&labels, &ds)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("agreement.json"), &result)?;
    let mut out = serde_json::to_value(&result).map_err(OncoError::from)?;
    out["kappa_1"] = json!(result.kappa_1());
    out["kappa_2"] = json!(result.kappa_2());
    Ok(out)
}

#[derive(Serialize)]
struct MemberSaliency {
    argmax: [usize; 3],
    raw_max: f64,
    file: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pet_file: Option<PathBuf>,
}

#[derive(Serialize)]
struct PairSaliency {
    pair_id: String,
    label: Option<ResponseLabel>,
    predicted: ResponseLabel,
    target: ResponseLabel,
    baseline: MemberSaliency,
    followup: MemberSaliency,
}

fn parse_target(s: &str) -> CliResult<Option<ResponseLabel>> {
    match s {
        "predicted" | "label" => Ok(None),
        other => ResponseLabel::ALL
            .into_iter()
            .find(|c| c.as_str() == other)
            .map(Some)
            .ok_or_else(|| CliError::config(format!("unknown saliency target {other:?}"))),
    }
}

pub fn saliency(a: &SaliencyArgs) -> CliResult<Value> {
    let objective: Objective = a.objective.parse()?;
    let fixed = parse_target(&a.target)?;
    let (model, prep) = load_model(&a.checkpoint)?;
    let mut rows = read_rows(&a.data.manifest)?;
    if !a.pairs.is_empty() {
        let unknown: Vec<&str> = a
            .pairs
            .iter()
            .filter(|id| !rows.iter().any(|r| &r.pair_id() == *id))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::data(format!("pairs not in manifest: {}", unknown.join(", "))));
        }
        rows.retain(|r| a.pairs.contains(&r.pair_id()));
    }
    if a.target == "label" {
        rows.retain(|r| r.label.label().is_some());
    }
    if rows.is_empty() {
        return Err(CliError::data("no pairs to explain"));
    }
    let pairs = load(&a.data, &rows, &prep)?;
    let dir = a.out.join("saliency");
    create_dir(&dir)?;
    if a.pet {
        create_dir(&dir.join("pet"))?;
    }

    let results: Vec<PairSaliency> = pairs
        .par_iter()
        .map(|p| -> CliResult<PairSaliency> {
            let predicted = model.predict(&p.baseline, &p.followup)?.predicted();
            let target = match (fixed, a.target.as_str()) {
                (Some(c), _) => c,
                (None, "label") => p.label.expect("filtered to labeled rows"),
                _ => predicted,
            };
            let (sb, sf) = guided_backprop(&model, &p.baseline, &p.followup, target.index(), objective)?;
            let render = |input, sal: &onconet::saliency::SaliencyVolume, member: Member| -> CliResult<MemberSaliency> {
                let argmax = sal.spatial_argmax();
                let slice = argmax[0];
                let img = render_overlay(input, sal, slice)?;
                let file = write_overlay(&img, &dir, &p.pair_id, member, slice)?;
                let pet_file = if a.pet {
                    let img = render_pet_overlay(input, slice)?;
                    Some(write_overlay(&img, &dir.join("pet"), &p.pair_id, member, slice)?)
                } else {
                    None
                };
                Ok(MemberSaliency {
                    argmax,
                    raw_max: sal.raw_max,
                    file,
                    pet_file,
                })
            };
            let baseline = render(&p.baseline, &sb, Member::Baseline)?;
            let followup = render(&p.followup, &sf, Member::Followup)?;
            Ok(PairSaliency {
                pair_id: p.pair_id.clone(),
                label: p.label,
                predicted,
                target,
                baseline,
                followup,
            })
        })
        .collect::<CliResult<_>>()?;
    let out = json!({ "objective": objective, "grid": prep.grid, "pairs": results });
    write_json(&a.out.join("saliency.json"), &out)?;
    Ok(out)
}

pub fn report(a: &ReportArgs) -> CliResult<Value> {
    let mut figures = Vec::new();
    create_dir(&a.out)?;
    for spec in &a.evals {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--eval expects name=path, got {spec:?}")))?;
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(CliError::config(format!("bad figure name {name:?}")));
        }
        let path = Path::new(path);
        require_exists(path)?;
        let report: EvalReport = read_json(path)?;
        let png = a.out.join(format!("roc_{name}.png"));
        plot::roc_figure(&report, name, &png)?;
        figures.push(json!({
            "name": name,
            "file": png,
            "auroc_micro": report.auroc_micro,
            "auroc_macro": report.auroc_macro,
            "has_band": report.micro_band.is_some(),
        }));
    }
    Ok(json!({ "figures": figures }))
}
