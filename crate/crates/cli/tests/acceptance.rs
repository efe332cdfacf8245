//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p onconet-cli --test acceptance`.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use onconet::exam::{make_phantom_pair, ModelInput, PhantomRecord, PhantomSpec, Preprocess};
use onconet::labels::{label_pairs, lugano_classify, RegionName, ReportRecord, ResponseLabel};
use onconet::metrics::{
    auroc_binary, cohens_kappa, flip_eval, multiclass_report, paired_bootstrap_pvalue, score_pairs, ScoredPair,
};
use onconet::model::attention::attend;
use onconet::model::{Activation, Encoding, Mode, ModelConfig, ModelVariant, OncoNet, ATTENTION_PARAM};
use onconet::nn::{Graph, ReluRule};
use onconet::saliency::{input_gradients, Objective};
use onconet::train::{train, InputPair, TrainConfig};
use onconet::Tensor;

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input<T: onconet::Scalar>(r: &mut ChaCha8Rng, l: usize, s: usize) -> ModelInput<T> {
    let t = Tensor::from_fn(&[2, l, s, s], |_| T::from_f64(r.random_range(-1.0..1.0)).unwrap());
    ModelInput::from_tensor(t).unwrap()
}

fn labeler() -> Check {
    let specs = onconet::exam::DatasetSpec {
        n_patients: 200,
        seed: 2024,
        ..Default::default()
    }
    .specs();
    let mut records = Vec::new();
    for s in &specs {
        let (pre, post) = s.reports().map_err(|e| e.to_string())?;
        let (b, f) = s.exam_ids();
        let (db, df) = s.dates();
        for (exam_id, report_text, date) in [(b, pre, db), (f, post, df)] {
            records.push(ReportRecord {
                patient_id: s.patient_id.clone(),
                exam_id,
                report_text,
                date,
            });
        }
    }
    let start = Instant::now();
    let rows = label_pairs(&records, RegionName::Thorax).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let truth: HashMap<&str, ResponseLabel> = specs
        .iter()
        .map(|s| (s.patient_id.as_str(), s.ground_truth().unwrap().0))
        .collect();
    let hits = rows
        .iter()
        .filter(|r| r.label.label() == truth.get(r.patient_id.as_str()).copied())
        .count();
    let msg = format!("{hits}/{} labels recovered from {} reports in {secs:.3} s", specs.len(), records.len());
    if rows.len() == specs.len() && hits == specs.len() && secs < 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn brute_force_label(a: f64, b: f64) -> ResponseLabel {
    if b > 1.25 * a {
        ResponseLabel::Progression
    } else if b < 0.75 * a {
        ResponseLabel::Resolution
    } else {
        ResponseLabel::Stable
    }
}

fn lugano_partition() -> Check {
    let mut r = rng(7);
    let mut mismatches = 0;
    let mut scale_breaks = 0;
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        // log-uniform over two decades, biased toward the thresholds
        let a = 10f64.powf(r.random_range(-1.0..1.0));
        let b = a * r.random_range(0.5..1.5);
        let (label, _) = lugano_classify(a, b).map_err(|e| e.to_string())?;
        counts[label.index()] += 1;
        if label != brute_force_label(a, b) {
            mismatches += 1;
        }
        for k in [0.1, 1.0, 10.0] {
            if lugano_classify(k * a, k * b).map_err(|e| e.to_string())?.0 != label {
                scale_breaks += 1;
            }
        }
    }
    let msg = format!(
        "10000 pairs, {mismatches} oracle mismatches, {scale_breaks} scale changes, class counts {counts:?}"
    );
    if mismatches == 0 && scale_breaks == 0 && counts.iter().all(|&c| c > 0) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn shape_law() -> Check {
    // the spatial law does not depend on width, so a narrow encoder keeps this fast
    let model = OncoNet::<f32>::new(ModelConfig { channels: 16, ..ModelConfig::default() }, 0).map_err(|e| e.to_string())?;
    let mut r = rng(3);
    let mut dims = Vec::new();
    for l in [12, 24, 36, 60] {
        let e = model.encode(&random_input::<f32>(&mut r, l, 224)).map_err(|e| e.to_string())?;
        if e.spatial_dims() != [l / 6, 7, 7] {
            return Err(format!("l = {l}: got {:?}", e.spatial_dims()));
        }
        dims.push(e.spatial_dims());
    }
    let mut worst = 0f64;
    for _ in 0..100 {
        let (c, d, h, w) = (8, r.random_range(1..4), r.random_range(1..8), r.random_range(1..8));
        let grid = Tensor::from_fn(&[c, d, h, w], |_| r.random_range(-5.0..5.0f64));
        let wv: Vec<f64> = (0..c).map(|_| r.random_range(-2.0..2.0)).collect();
        let (_, alpha) = attend(&Encoding::new(grid).unwrap(), &wv).map_err(|e| e.to_string())?;
        let sum: f64 = alpha.alpha().data().iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    let msg = format!("dims {dims:?}; max |sum(alpha) - 1| = {worst:.2e} over 100 encodings");
    if worst < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn with_attention<T: onconet::Scalar>(mut model: OncoNet<T>, seed: u64) -> OncoNet<T> {
    let mut r = rng(seed);
    for w in model.params_mut().get_mut(ATTENTION_PARAM).unwrap().data_mut() {
        *w = T::from_f64(r.random_range(-0.5..0.5)).unwrap();
    }
    model
}

fn siamese_identities() -> Check {
    let model = with_attention(OncoNet::<f32>::new(ModelConfig::tiny(), 5).map_err(|e| e.to_string())?, 11);
    let mut r = rng(4);
    let logits: Vec<[f32; 3]> = (0..20)
        .map(|_| {
            let x = random_input::<f32>(&mut r, 12, 32);
            model.forward_pair(&x, &x).map(|z| z.z)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut dev = 0f32;
    for a in &logits {
        for b in &logits {
            for k in 0..3 {
                dev = dev.max((a[k] - b[k]).abs());
            }
        }
    }
    let mut anti = 0f32;
    for _ in 0..10 {
        let a = random_input::<f32>(&mut r, 12, 32);
        let b = random_input::<f32>(&mut r, 12, 32);
        let ab = model.siamese_diff(&a, &b).map_err(|e| e.to_string())?;
        let ba = model.siamese_diff(&b, &a).map_err(|e| e.to_string())?;
        for (x, y) in ab.values().iter().zip(ba.values()) {
            anti = anti.max((x + y).abs());
        }
    }
    let msg = format!("max logit deviation over 20 identical pairs {dev:.2e}; max |d(a,b) + d(b,a)| {anti:.2e}");
    if dev < 1e-5 && anti < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_check() -> Check {
    let model = with_attention(OncoNet::<f64>::new(ModelConfig::tiny(), 21).map_err(|e| e.to_string())?, 1);
    let mut r = rng(22);
    let a = random_input::<f64>(&mut r, 6, 16);
    let b = random_input::<f64>(&mut r, 6, 16);
    let target = ResponseLabel::Resolution;
    let loss_at = |x: &ModelInput<f64>, y: &ModelInput<f64>| {
        let mut g = Graph::new();
        let xv = g.input_ref(x.voxels(), false);
        let yv = g.input_ref(y.voxels(), false);
        let z = model.forward_graph(&mut g, xv, yv, Mode::Eval).unwrap();
        let l = g.cross_entropy(z, target.index()).unwrap();
        g.value(l).data()[0]
    };
    let (ga, gb) = input_gradients(&model, &a, &b, target, Objective::Loss, ReluRule::Standard).map_err(|e| e.to_string())?;
    let eps = 1e-3;
    let mut ok = 0;
    for k in 0..200 {
        let first = k % 2 == 0;
        let (base, grad) = if first { (&a, &ga) } else { (&b, &gb) };
        let i = r.random_range(0..base.voxels().len());
        let shifted = |d: f64| {
            let mut t = base.voxels().clone();
            t.data_mut()[i] += d;
            ModelInput::from_tensor(t).unwrap()
        };
        let (p, m) = (shifted(eps), shifted(-eps));
        let (lp, lm) = if first { (loss_at(&p, &b), loss_at(&m, &b)) } else { (loss_at(&a, &p), loss_at(&a, &m)) };
        let numeric = (lp - lm) / (2.0 * eps);
        // the loss objective yields the gradient of the negated loss
        let analytic = -grad.data()[i];
        let scale = numeric.abs().max(analytic.abs());
        if scale < 1e-10 || (numeric - analytic).abs() / scale < 1e-2 {
            ok += 1;
        }
    }

    let linear = ModelConfig {
        activation: Activation::Identity,
        ..ModelConfig::tiny()
    };
    let toy = with_attention(OncoNet::<f64>::new(linear, 31).map_err(|e| e.to_string())?, 2);
    let mut equal = true;
    for objective in [Objective::Loss, Objective::Logit] {
        for c in ResponseLabel::ALL {
            let plain = input_gradients(&toy, &a, &b, c, objective, ReluRule::Standard).map_err(|e| e.to_string())?;
            let guided = input_gradients(&toy, &a, &b, c, objective, ReluRule::Guided).map_err(|e| e.to_string())?;
            equal &= plain == guided;
        }
    }
    let msg = format!("{ok}/200 coordinates within 1e-2 relative error; guided == plain on rectifier-free net: {equal}");
    if ok >= 190 && equal {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut n) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                n += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / n
}

fn random_scored(r: &mut ChaCha8Rng, n: usize) -> Vec<ScoredPair> {
    (0..n)
        .map(|i| {
            let raw: [f64; 3] = [r.random(), r.random(), r.random()];
            let s: f64 = raw.iter().sum();
            ScoredPair::new(
                format!("p{i}"),
                [raw[0] / s, raw[1] / s, 1.0 - raw[0] / s - raw[1] / s],
                ResponseLabel::ALL[i % 3],
            )
            .unwrap()
        })
        .collect()
}

fn metric_oracles() -> Check {
    let score_sets = [
        [0.1, 0.4, 0.35, 0.8, 0.65, 0.9],
        [0.3, 0.3, 0.5, 0.5, 0.7, 0.7],
        [0.2, 0.2, 0.2, 0.2, 0.2, 0.2],
    ];
    let mut labelings = 0;
    for scores in &score_sets {
        for mask in 0u32..64 {
            if mask.count_ones() != 3 {
                continue;
            }
            let labels: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
            let got = auroc_binary(scores, &labels).map_err(|e| e.to_string())?;
            let want = mann_whitney(scores, &labels);
            if got != want {
                return Err(format!("scores {scores:?} labels {labels:?}: {got} != {want}"));
            }
            labelings += 1;
        }
    }

    // hand-computed tables: (rater a, rater b, kappa)
    let fixtures: Vec<(Vec<u8>, Vec<u8>, f64)> = vec![
        // po = 0.5, pe = 0.5
        (vec![0, 0, 1, 1], vec![0, 1, 0, 1], 0.0),
        // [[20, 5], [10, 15]]: po = 0.7, pe = 0.5
        (
            [vec![0; 25], vec![1; 25]].concat(),
            [vec![0; 20], vec![1; 5], vec![0; 10], vec![1; 15]].concat(),
            0.4,
        ),
        // perfect agreement over three categories
        (vec![0, 1, 2, 2, 1, 0], vec![0, 1, 2, 2, 1, 0], 1.0),
        // [[2, 1, 0], [0, 2, 1], [1, 0, 2]]: po = 6/9, pe = 1/3
        (vec![0, 0, 0, 1, 1, 1, 2, 2, 2], vec![0, 0, 1, 1, 1, 2, 2, 2, 0], 0.5),
    ];
    for (a, b, want) in &fixtures {
        let got = cohens_kappa(a, b).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("kappa {got} != {want} for {a:?} vs {b:?}"));
        }
    }

    let mut r = rng(99);
    let mut outside = Vec::new();
    let mut deterministic = true;
    for trial in 0..100 {
        let scored = random_scored(&mut r, 30);
        let rep = multiclass_report(&scored, 200, trial).map_err(|e| e.to_string())?;
        deterministic &= rep == multiclass_report(&scored, 200, trial).map_err(|e| e.to_string())?;
        let point: HashMap<String, Option<f64>> = [
            ("auroc_macro", rep.auroc_macro),
            ("auroc_micro", rep.auroc_micro),
            ("auroc_progression", rep.auroc_per_class.progression),
            ("auroc_resolution", rep.auroc_per_class.resolution),
            ("auroc_stable", rep.auroc_per_class.stable),
            ("f1_macro", Some(rep.f1_macro)),
            ("precision_macro", Some(rep.precision_macro)),
            ("recall_macro", Some(rep.recall_macro)),
            ("accuracy", Some(rep.accuracy)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (name, ci) in &rep.ci_95 {
            let (Some(ci), Some(Some(p))) = (ci, point.get(name)) else {
                return Err(format!("trial {trial}: no interval or point for {name}"));
            };
            if !(ci.lo <= *p && *p <= ci.hi) {
                outside.push(format!("{name}@{trial}"));
            }
        }
    }
    let msg = format!(
        "AUROC exact on {labelings} 3-vs-3 labelings; {} kappa fixtures; bootstrap deterministic: {deterministic}; \
         intervals missing their point estimate: {}",
        fixtures.len(),
        if outside.is_empty() { "none".to_string() } else { outside.join(", ") }
    );
    if deterministic && outside.is_empty() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Split {
    train: Vec<InputPair<f32>>,
    test: Vec<InputPair<f32>>,
}

fn phantom_pairs(offset: u64, n: usize, prep: &Preprocess) -> Vec<InputPair<f32>> {
    (0..n)
        .map(|i| {
            let mut s = PhantomSpec::random(offset + i as u64, ResponseLabel::ALL[i % 3], 12, 128, 64);
            s.patient_id = format!("P{}", offset + i as u64);
            let (pair, _, _) = make_phantom_pair(&s).unwrap();
            InputPair::from_exam_pair(&pair, prep)
        })
        .collect()
}

fn learnability_config(variant: ModelVariant) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        variant,
        lr: 1e-3,
        max_epochs: 30,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn learnability(split: &Split) -> (Check, Option<OncoNet<f32>>) {
    let start = Instant::now();
    let out = match train(&learnability_config(ModelVariant::Siamese), &split.train, &split.test) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let (orig, flipped) = match flip_eval(&out.model, &split.test, 1000, 0) {
        Ok(x) => x,
        Err(e) => return (Err(e.to_string()), None),
    };
    let (a, f) = (orig.auroc_macro.unwrap_or(0.0), flipped.auroc_macro.unwrap_or(0.0));
    let msg = format!(
        "{} epochs in {secs:.0} s on {} threads; held-out macro AUROC {a:.3}, flipped {f:.3} (|diff| {:.3})",
        out.record.epochs.len(),
        rayon::current_num_threads(),
        (a - f).abs()
    );
    let pass = a >= 0.90 && (a - f).abs() <= 0.15 && secs <= 1800.0 && out.record.epochs.len() <= 30;
    (if pass { Ok(msg) } else { Err(msg) }, Some(out.model))
}

fn ablation(split: &Split, siamese: Option<&OncoNet<f32>>) -> Check {
    let siamese = siamese.ok_or("siamese model unavailable")?;
    let single = train(&learnability_config(ModelVariant::SinglePass), &split.train, &split.test)
        .map_err(|e| e.to_string())?
        .model;
    let a = score_pairs(siamese, &split.test).map_err(|e| e.to_string())?;
    let b = score_pairs(&single, &split.test).map_err(|e| e.to_string())?;
    let cmp = paired_bootstrap_pvalue(&a, &b, 1000, 0).map_err(|e| e.to_string())?;
    let msg = format!(
        "siamese {:.3} vs single-pass {:.3}: delta {:+.3}, p = {:.3} ({} of {} replicates usable)",
        cmp.auroc_a, cmp.auroc_b, cmp.delta, cmp.p_value, cmp.n_used, cmp.n_bootstrap
    );
    if (0.0..=1.0).contains(&cmp.p_value) && cmp.delta.is_finite() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cli(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_onconet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`onconet {}` exited with {:?}: {}",
            args[0],
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn pipeline() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let (data, run, manifest) = (p("data"), p("run"), p("pairs.csv"));
    let exams = format!("{data}/exams");
    let reports = format!("{data}/reports");
    let ckpt = format!("{run}/model.safetensors");
    let val = format!("{run}/val_manifest.csv");
    cli(&[
        "phantom", "--n-patients", "90", "--seed", "3", "--slices", "12", "--ct-size", "128", "--pet-size", "64",
        "--out", &data,
    ])?;
    cli(&["label", "--reports", &reports, "--out", &manifest])?;
    cli(&[
        "train", "--manifest", &manifest, "--exams", &exams, "--out", &run, "--tiny", "--grid", "112", "--lr",
        "1e-3", "--val-fraction", "0.34",
    ])?;
    let eval = cli(&["eval", "--checkpoint", &ckpt, "--manifest", &val, "--exams", &exams, "--out", &run])?;
    let sal = cli(&["saliency", "--checkpoint", &ckpt, "--manifest", &val, "--exams", &exams, "--out", &run])?;
    let eval_spec = format!("validation={run}/eval.json");
    cli(&["report", "--eval", &eval_spec, "--out", &run])?;
    if !Path::new(&format!("{run}/roc_validation.png")).is_file() {
        return Err("report wrote no figure".into());
    }

    let grid = sal["grid"].as_u64().ok_or("saliency.json has no grid")? as usize;
    let phantoms: Vec<PhantomRecord> =
        serde_json::from_slice(&std::fs::read(format!("{data}/phantoms.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let by_id: HashMap<&str, &PhantomRecord> = phantoms.iter().map(|r| (r.pair_id.as_str(), r)).collect();
    let (mut n, mut inside) = (0, 0);
    for pair in sal["pairs"].as_array().ok_or("saliency.json has no pairs")? {
        if pair["label"] != "progression" || pair["predicted"] != "progression" {
            continue;
        }
        let id = pair["pair_id"].as_str().unwrap_or_default();
        let rec = by_id.get(id).ok_or_else(|| format!("{id} not in phantoms.json"))?;
        let (lo, hi) = rec.lesion_bbox(grid);
        let argmax: Vec<usize> = serde_json::from_value(pair["followup"]["argmax"].clone()).map_err(|e| e.to_string())?;
        n += 1;
        if (0..3).all(|k| lo[k] <= argmax[k] && argmax[k] <= hi[k]) {
            inside += 1;
        }
    }
    let msg = format!(
        "all stages exited 0; validation macro AUROC {}; follow-up saliency peak inside the lesion box for {inside}/{n} \
         correctly classified progression pairs",
        eval["auroc_macro"]
    );
    if n > 0 && inside * 10 >= n * 7 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn report(id: usize, name: &str, check: Check, elapsed: Duration, failed: &mut usize) {
    let (tag, detail) = match check {
        Ok(m) => ("PASS", m),
        Err(m) => {
            *failed += 1;
            ("FAIL", m)
        }
    };
    println!("{tag} [{id}] {name}: {detail} ({:.1} s)", elapsed.as_secs_f64());
}

fn main() {
    let mut failed = 0;
    let timed = |f: &dyn Fn() -> Check| {
        let t = Instant::now();
        let c = f();
        (c, t.elapsed())
    };

    let (c, t) = timed(&labeler);
    report(1, "labeler recovers generated labels", c, t, &mut failed);
    let (c, t) = timed(&lugano_partition);
    report(2, "change rule partition and scale invariance", c, t, &mut failed);
    let (c, t) = timed(&shape_law);
    report(3, "encoder shape law and attention normalization", c, t, &mut failed);
    let (c, t) = timed(&siamese_identities);
    report(4, "siamese identities", c, t, &mut failed);
    let (c, t) = timed(&gradient_check);
    report(5, "input gradients and guided rule", c, t, &mut failed);
    let (c, t) = timed(&metric_oracles);
    report(6, "metric oracles and bootstrap intervals", c, t, &mut failed);

    let prep = Preprocess::with_grid(112);
    let split = Split {
        train: phantom_pairs(1000, 60, &prep),
        test: phantom_pairs(5000, 30, &prep),
    };
    let t = Instant::now();
    let (c, model) = learnability(&split);
    report(7, "learnability on phantoms", c, t.elapsed(), &mut failed);
    let t = Instant::now();
    let c = ablation(&split, model.as_ref());
    report(8, "single-pass ablation and paired test", c, t.elapsed(), &mut failed);
    let (c, t) = timed(&pipeline);
    report(9, "command-line pipeline and saliency localization", c, t, &mut failed);

    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
