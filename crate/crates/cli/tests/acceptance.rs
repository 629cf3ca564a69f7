//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails at the end if any criterion failed. Criteria run one after another
//! inside a single test so the timing measurements have the machine to
//! themselves.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use arnn::bench::{self, arnn_self_attention_path, full_attention_forward, GridPoint, Mechanism};
use arnn::cell::{recurrent_gate, CellConfig, CellParams, CellState};
use arnn::data::{synth_generate, SynthConfig};
use arnn::model::{ArnnModel, ModelConfig, Segment};
use arnn::numerics::{Matrix, Param, Rng};
use arnn::training::{self, evaluate, TrainConfig};
use common::{arnn, p, printed, read_predictions};

const SIGMA_1: f64 = 0.7310585786;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let run = arnn(&["gradcheck", "--config", "small", "--eps", "1e-5", "--tol", "1e-4"]);
    let secs = start.elapsed().as_secs_f64();
    let names: Vec<&str> = ArnnModel::param_names().collect();
    let mut worst = 0.0f64;
    let mut seen = 0;
    for line in run.stdout.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() >= 4 && names.contains(&fields[0]) {
            seen += 1;
            worst = worst.max(fields[2].parse().unwrap_or(f64::INFINITY));
        }
    }
    outcome(
        run.code == 0 && seen == 18 && worst <= 1e-4 && secs < 60.0,
        format!("exit {}, {seen} tensors, worst relative error {worst:.2e} (tol 1e-4), {secs:.1}s (limit 60s)", run.code),
    )
}

fn attention_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = Rng::seed(1000 + case);
        let c = rng.range(1, 9);
        let n = rng.range(1, 65);
        let x = Matrix::uniform(c, n, 1.0, &mut rng);
        let mut params = CellParams::zeros(&CellConfig::new(c, n, 1, 0.0).unwrap());
        let bound = 1.0 / (n as f64).sqrt();
        for w in [&mut params.wx_q, &mut params.wx_k, &mut params.wx_v] {
            *w = Param::new(Matrix::uniform(n, n, bound, &mut rng));
        }
        let windowed = arnn_self_attention_path(&x, 1, &params).unwrap();
        let full = full_attention_forward(&x, &params.wx_q.value, &params.wx_k.value, &params.wx_v.value).unwrap();
        worst = worst.max(windowed[0].max_abs_diff(&full));
    }
    outcome(worst < 1e-10, format!("20 cases with c <= 8, n <= 64, max |diff| {worst:.2e} (tol 1e-10)"))
}

fn gate_analytics() -> Outcome {
    let (s, m) = (5, 7);
    let config = CellConfig::new(3, m, s, 0.0).unwrap();
    let params = CellParams::zeros(&config);
    let h = Matrix::zeros(s, m);
    let start = Matrix::uniform(s, m, 1.0, &mut Rng::seed(8));

    let one = recurrent_gate(&h, &CellState::new(start.clone()), &params).unwrap();
    let one_err = one.vectors.max_abs_diff(&start.scale(SIGMA_1));

    let mut state = CellState::new(start.clone());
    let mut k_err = 0.0f64;
    for k in 1..=50 {
        state = recurrent_gate(&h, &state, &params).unwrap();
        k_err = k_err.max(state.vectors.max_abs_diff(&start.scale(SIGMA_1.powi(k))));
    }
    outcome(
        one_err <= 1e-9 && k_err <= 1e-7,
        format!("one step error {one_err:.2e} (tol 1e-9), worst over k <= 50 {k_err:.2e} (tol 1e-7)"),
    )
}

fn complexity_law() -> Outcome {
    let start = Instant::now();
    let ls = [2usize, 4, 8, 16, 32, 64];
    let products: Vec<u64> = ls.iter().map(|&l| bench::flops_arnn(16, 1024, l).unwrap() * l as u64).collect();
    let constant = products.windows(2).all(|w| w[0] == w[1]);

    let grid: Vec<GridPoint> = ls.iter().map(|&l| GridPoint { c: 16, n: 1024, l, s: 32 }).collect();
    let records = bench::sweep(&grid, 5, 0).unwrap();
    let times: Vec<f64> = records
        .iter()
        .filter(|r| r.mechanism == Mechanism::Arnn)
        .map(|r| r.median_ms())
        .collect();
    let monotone = times.windows(2).all(|w| w[1] <= 1.15 * w[0]);
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = ls.iter().zip(&times).map(|(l, t)| format!("l={l}:{t:.1}ms")).collect();
    outcome(
        constant && monotone && secs < 300.0,
        format!(
            "l*flops constant={constant} ({}), forward medians {} non-increasing within 15%={monotone}, {secs:.0}s (limit 300s)",
            products[0],
            shown.join(" ")
        ),
    )
}

struct EndToEnd {
    data: std::path::PathBuf,
    model: std::path::PathBuf,
    log: String,
}

fn end_to_end(dir: &Path) -> (Outcome, Option<EndToEnd>) {
    let start = Instant::now();
    let data = dir.join("data");
    let synth = arnn(&["synth", "--out", p(&data), "--seed", "0"]);
    if synth.code != 0 {
        return (outcome(false, format!("synth failed: {}", synth.stderr)), None);
    }
    let model = dir.join("model.arnn");
    let log = dir.join("log.csv");
    let run = arnn(&["train", "--data", p(&data), "--seed", "0", "--out", p(&model), "--log", p(&log)]);
    let secs = start.elapsed().as_secs_f64();
    if run.code != 0 {
        return (outcome(false, format!("train failed: {}", run.stderr)), None);
    }
    let text = fs::read_to_string(&log).unwrap();
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    let loss: f64 = last[2].parse().unwrap();
    let acc: f64 = last[3].parse().unwrap();
    let rows = text.lines().count() - 1;
    (
        outcome(
            rows == 30 && acc >= 0.95 && loss < 0.1 && secs < 900.0,
            format!("{rows} epochs, test accuracy {acc} (>= 0.95), final train loss {loss:.4} (< 0.1), {secs:.0}s (limit 900s)"),
        ),
        Some(EndToEnd { data, model, log: text }),
    )
}

/// Loss after epoch 3 never climbs more than 10% above the best epoch so far.
fn loss_shape(log: &str) -> Outcome {
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let mut best = losses[3];
    let mut worst_rise = 0.0f64;
    for &l in &losses[4..] {
        worst_rise = worst_rise.max(l / best - 1.0);
        best = best.min(l);
    }
    outcome(
        worst_rise <= 0.10 && losses[29] < losses[3],
        format!("largest rise over best-so-far after epoch 3 {:.1}% (limit 10%)", 100.0 * worst_rise),
    )
}

fn accuracy_of(segments: &[Segment], l: usize, s: usize) -> f64 {
    let config = TrainConfig { seed: 0, ..TrainConfig::default() };
    let split = training::split_train_test(segments, config.split, config.seed).unwrap();
    let (c, n) = segments[0].data.shape();
    let mut model = ArnnModel::new(ModelConfig::new(c, n, l, s, config.dropout_p).unwrap(), config.seed);
    training::train(&mut model, &split.train, &split.test, &config).unwrap();
    evaluate(&model, &split.test).unwrap().accuracy
}

fn ablation(full_scale_l16_s32: Option<f64>) -> Outcome {
    let start = Instant::now();
    let segments = synth_generate(&SynthConfig { seed: 0, ..SynthConfig::default() }).unwrap().segments;
    let base = full_scale_l16_s32.unwrap_or_else(|| accuracy_of(&segments, 16, 32));
    let l2 = accuracy_of(&segments, 2, 32);
    let s4 = accuracy_of(&segments, 16, 4);
    let s16 = accuracy_of(&segments, 16, 16);
    let s64 = accuracy_of(&segments, 16, 64);
    let l_ok = base >= l2;
    let s_ok = [s16, base, s64].iter().all(|&a| a >= s4);
    outcome(
        l_ok && s_ok,
        format!(
            "l=16 {base} >= l=2 {l2}: {l_ok}; s=16 {s16}, s=32 {base}, s=64 {s64} each >= s=4 {s4}: {s_ok}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn determinism(dir: &Path, e2e: Option<&EndToEnd>) -> Outcome {
    let data = dir.join("small");
    let synth = arnn(&["synth", "--out", p(&data), "--channels", "4", "--length", "128", "--count", "12", "--seed", "2"]);
    assert_eq!(synth.code, 0, "{}", synth.stderr);
    let train = |tag: &str| {
        let (model, log) = (dir.join(format!("{tag}.arnn")), dir.join(format!("{tag}.csv")));
        let run = arnn(&[
            "train", "--data", p(&data), "--windows", "8", "--states", "4", "--epochs", "4", "--batch", "6",
            "--seed", "2", "--out", p(&model), "--log", p(&log),
        ]);
        assert_eq!(run.code, 0, "{}", run.stderr);
        (fs::read(model).unwrap(), fs::read(log).unwrap())
    };
    let identical = train("first") == train("second");

    let mut bitwise = true;
    let mut checked = 0;
    if let Some(e2e) = e2e {
        let model = ArnnModel::load(&e2e.model).unwrap();
        let reloaded = ArnnModel::from_bytes(&model.to_bytes()).unwrap();
        for seg in arnn::data::load_manifest(&e2e.data, None).unwrap().segments.iter().take(40) {
            let a = model.forward(&seg.data, false, &mut Rng::seed(0)).unwrap().logit;
            let b = reloaded.forward(&seg.data, false, &mut Rng::seed(0)).unwrap().logit;
            bitwise &= a.to_bits() == b.to_bits();
            checked += 1;
        }
    } else {
        bitwise = false;
    }
    outcome(
        identical && bitwise && checked > 0,
        format!("two train runs byte-identical={identical}; save->load->forward bit-exact on {checked} segments={bitwise}"),
    )
}

/// A 1-channel, 2-sample model whose prediction is 1 exactly when the first sample exceeds the second.
fn comparator_model() -> ArnnModel {
    let mut model = ArnnModel::zeros(ModelConfig::new(1, 2, 1, 1, 0.0).unwrap());
    model.cell.wx_v.value = Matrix::identity(2);
    model.cell.w_o.value = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
    model.cell.w_z.value = Matrix::identity(2).scale(5.0);
    model.cell.b_i.value = Matrix::filled(1, 2, 40.0);
    model.cell.b_f.value = Matrix::filled(1, 2, -40.0);
    model.head_w.value = Matrix::from_rows(&[[4.0, 0.0]]);
    model
}

fn metrics_identity(e2e: Option<&EndToEnd>, dir: &Path) -> Outcome {
    // TP=2, FP=1, FN=1, TN=6
    let cases = [(1, 1), (1, 1), (0, 1), (1, 0), (0, 0), (0, 0), (0, 0), (0, 0), (0, 0), (0, 0)];
    let fixture: Vec<Segment> = cases
        .iter()
        .enumerate()
        .map(|(i, &(label, pred))| {
            let (a, b) = if pred == 1 { (0.9, 0.1) } else { (0.1, 0.9) };
            Segment::new(format!("case{i}"), Matrix::from_rows(&[[a, b]]), label)
        })
        .collect();
    let m = evaluate(&comparator_model(), &fixture).unwrap();
    let (p_hand, r_hand) = (2.0 / 3.0, 2.0 / 3.0);
    let f1_hand = 2.0 * p_hand * r_hand / (p_hand + r_hand);
    let fixture_ok = (m.tp, m.fp, m.fn_, m.tn) == (2, 1, 1, 6)
        && m.accuracy == 0.8
        && m.precision == p_hand
        && m.recall == r_hand
        && m.f1 == f1_hand;

    let Some(e2e) = e2e else {
        return outcome(false, format!("fixture exact={fixture_ok}; no trained model for the recount"));
    };
    let preds = dir.join("predictions.csv");
    let run = arnn(&["eval", "--model", p(&e2e.model), "--data", p(&e2e.data), "--seed", "0", "--predictions", p(&preds)]);
    if run.code != 0 {
        return outcome(false, format!("eval failed: {}", run.stderr));
    }
    let rows = read_predictions(&preds);
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (_, label, prob, pred) in &rows {
        assert_eq!(*pred, u8::from(*prob >= 0.5));
        match (label, pred) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let acc = (tp + tn) as f64 / rows.len() as f64;
    let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let rec = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    let shown = |key: &str| printed(&run.stdout, key).and_then(|v| v.parse::<f64>().ok());
    let recount_ok = shown("accuracy") == Some(acc)
        && shown("precision") == Some(prec)
        && shown("recall") == Some(rec)
        && shown("f1") == Some(f1)
        && run.stdout.contains(&format!("tp={tp} fp={fp} fn={fn_} tn={tn}"));
    let last: Vec<&str> = e2e.log.lines().last().unwrap().split(',').collect();
    let matches_log = printed(&run.stdout, "accuracy").as_deref() == Some(last[3])
        && printed(&run.stdout, "f1").as_deref() == Some(last[4]);
    outcome(
        fixture_ok && recount_ok && matches_log && rows.len() == 50,
        format!(
            "10-case fixture exact={fixture_ok}; recount of {} predictions matches printed={recount_ok}; eval equals last log row={matches_log}",
            rows.len()
        ),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("criterion {id} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "attention oracle equivalence", attention_oracle());
    report(3, "gate analytics", gate_analytics());
    report(4, "complexity law", complexity_law());
    let (e2e_outcome, e2e) = end_to_end(tmp.path());
    report(5, "end-to-end learning", e2e_outcome);
    let shape_ok = e2e.as_ref().is_some_and(|e| {
        let shape = loss_shape(&e.log);
        println!("invariant {} loss curve shape: {}", if shape.pass { "PASS" } else { "FAIL" }, shape.detail);
        shape.pass
    });
    let base = e2e.as_ref().map(|e| e.log.lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap());
    report(6, "ablation direction", ablation(base));
    report(7, "determinism and persistence", determinism(tmp.path(), e2e.as_ref()));
    report(8, "metrics identity", metrics_identity(e2e.as_ref(), tmp.path()));

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(shape_ok, "loss curve shape invariant failed");
}
