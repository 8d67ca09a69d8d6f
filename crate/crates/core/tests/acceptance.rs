//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with the measured values. Run with `-- --nocapture --test-threads 1` to
//! see the lines and get undisturbed timings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sahnet::eval::{
    chi_square, class_metrics, macro_average, odds_ratio, roc_auc, round2, ClassCounts, ClassMetrics,
    Contingency2x2, UndefinedPolicy, Z_95,
};
use sahnet::explain::{grad_cam, grad_cam_coarse, CamModel, ExplainError};
use sahnet::net::{DenseNetConfig, ForwardOptions, MetadataSpec, Model, Stage};
use sahnet::prep::{
    dice, extract_brain, register_affine, to_nonnegative, BrainParams, IntensityMap, RegistrationOptions,
};
use sahnet::synth::{generate, SynthConfig, SynthSubject};
use sahnet::tensor::{finite_diff_check, BatchNormMode, GradCheckOptions, Tape, Tensor, TensorError, Var};
use sahnet::train::{
    early_stop_epoch, fit_observed, plateau_schedule, predict, stratified_split, volume_input, Checkpoint, Dataset,
    EpochRecord, FitOutcome, Monitor, PlateauConfig, Sample, TrainConfig,
};
use sahnet::volio::{
    diagonal_affine, read_nifti, write_nifti, Affine, IntensityUnit, VolioError, Volume,
};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

/// Serializes the heavy criteria so their timings are not shared CPU time.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, failures: &[String], detail: &str) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} [{status}] {name}: {detail}");
    for f in failures {
        println!("    {f}");
    }
    assert!(failures.is_empty(), "criterion {n} failed: {failures:?}");
}

fn within(elapsed: Duration, budget_s: f64, failures: &mut Vec<String>) {
    if elapsed.as_secs_f64() >= budget_s {
        failures.push(format!("runtime {:.1} s exceeds {budget_s} s", elapsed.as_secs_f64()));
    }
}

// ---------------------------------------------------------------- criterion 1

/// Snapshot columns: image model then combined model, each at best AUC,
/// best F1, best loss and last epoch.
const COLUMNS: [&str; 8] =
    ["image/auc", "image/f1", "image/loss", "image/last", "fused/auc", "fused/f1", "fused/loss", "fused/last"];

/// Alive-class (tp, tn, fp, fn) per column; the dead class is the complement.
const ALIVE_COUNTS: [(u64, u64, u64, u64); 8] = [
    (27, 2, 11, 3),
    (25, 5, 8, 5),
    (19, 11, 2, 11),
    (22, 10, 3, 8),
    (29, 3, 10, 1),
    (24, 9, 4, 6),
    (23, 8, 5, 7),
    (30, 0, 13, 0),
];

type Row = [Option<f64>; 8];

const fn all(v: [f64; 8]) -> Row {
    [Some(v[0]), Some(v[1]), Some(v[2]), Some(v[3]), Some(v[4]), Some(v[5]), Some(v[6]), Some(v[7])]
}

/// Rows: sensitivity, specificity, precision, fpr, fnr, fdr, accuracy, f1.
const ALIVE_ROWS: [Row; 8] = [
    all([0.90, 0.83, 0.63, 0.73, 0.97, 0.80, 0.77, 1.0]),
    all([0.15, 0.38, 0.85, 0.77, 0.23, 0.69, 0.62, 0.0]),
    all([0.71, 0.76, 0.90, 0.88, 0.74, 0.86, 0.82, 0.70]),
    all([0.85, 0.62, 0.15, 0.23, 0.77, 0.31, 0.38, 1.0]),
    all([0.10, 0.17, 0.37, 0.27, 0.03, 0.20, 0.23, 0.00]),
    all([0.29, 0.24, 0.10, 0.12, 0.26, 0.14, 0.18, 0.30]),
    all([0.67, 0.70, 0.70, 0.74, 0.74, 0.77, 0.72, 0.70]),
    all([0.79, 0.79, 0.75, 0.80, 0.84, 0.83, 0.79, 0.82]),
];

const DEAD_ROWS: [Row; 8] = [
    all([0.15, 0.38, 0.85, 0.77, 0.23, 0.69, 0.62, 0.0]),
    all([0.90, 0.83, 0.63, 0.73, 0.97, 0.80, 0.77, 1.00]),
    [Some(0.40), Some(0.50), Some(0.50), Some(0.56), Some(0.75), Some(0.60), Some(0.53), None],
    all([0.10, 0.17, 0.37, 0.27, 0.03, 0.20, 0.23, 0.0]),
    all([0.85, 0.62, 0.15, 0.23, 0.77, 0.31, 0.38, 1.0]),
    [Some(0.60), Some(0.50), Some(0.50), Some(0.44), Some(0.25), Some(0.40), Some(0.47), None],
    all([0.67, 0.70, 0.70, 0.74, 0.74, 0.77, 0.72, 0.70]),
    all([0.22, 0.43, 0.63, 0.65, 0.35, 0.64, 0.57, 0.0]),
];

const MACRO_TP: [f64; 8] = [14.5, 15.0, 15.0, 16.0, 16.0, 16.5, 15.5, 15.0];
const MACRO_FP: [f64; 8] = [7.0, 6.5, 6.5, 5.5, 5.5, 5.0, 6.0, 6.5];
const MACRO_ROWS: [[f64; 8]; 8] = [
    [0.53, 0.61, 0.74, 0.75, 0.60, 0.75, 0.69, 0.50],
    [0.53, 0.61, 0.74, 0.75, 0.60, 0.75, 0.69, 0.50],
    [0.56, 0.63, 0.70, 0.72, 0.75, 0.73, 0.68, 0.35],
    [0.47, 0.39, 0.26, 0.25, 0.40, 0.25, 0.31, 0.50],
    [0.47, 0.39, 0.26, 0.25, 0.40, 0.25, 0.31, 0.50],
    [0.44, 0.37, 0.30, 0.28, 0.25, 0.27, 0.32, 0.15],
    [0.67, 0.70, 0.70, 0.74, 0.74, 0.77, 0.72, 0.70],
    [0.51, 0.61, 0.69, 0.72, 0.60, 0.74, 0.68, 0.41],
];

fn compare_rows(
    label: &str,
    col: usize,
    got: &ClassMetrics,
    want: impl Fn(usize) -> Option<f64>,
    cells: &mut usize,
    failures: &mut Vec<String>,
) {
    for (r, (name, v)) in got.fields().into_iter().enumerate() {
        *cells += 1;
        let v = v.map(round2);
        if v != want(r) {
            failures.push(format!("{label} {name} at {}: got {v:?}, want {:?}", COLUMNS[col], want(r)));
        }
    }
}

#[test]
fn criterion_01_snapshot_metric_fixtures() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut cells = 0;
    for col in 0..8 {
        let (tp, tn, fp, fn_) = ALIVE_COUNTS[col];
        let alive = ClassCounts::new(tp, tn, fp, fn_);
        let dead = alive.complement();
        compare_rows("alive", col, &class_metrics(&alive), |r| ALIVE_ROWS[r][col], &mut cells, &mut failures);
        compare_rows("dead", col, &class_metrics(&dead), |r| DEAD_ROWS[r][col], &mut cells, &mut failures);

        // The never-predicted dead class in the last fused column only
        // averages the reported way when undefined values count as zero.
        let undefined = class_metrics(&dead).precision.is_none();
        let policy = if undefined { UndefinedPolicy::Zero } else { UndefinedPolicy::Propagate };
        let avg = macro_average(&[alive, dead], policy).unwrap();
        for (name, got, want) in [
            ("tp", avg.tp, MACRO_TP[col]),
            ("tn", avg.tn, MACRO_TP[col]),
            ("fp", avg.fp, MACRO_FP[col]),
            ("fn", avg.fn_, MACRO_FP[col]),
        ] {
            cells += 1;
            if got != want {
                failures.push(format!("macro {name} at {}: got {got}, want {want}", COLUMNS[col]));
            }
        }
        compare_rows("macro", col, &avg.metrics, |r| Some(MACRO_ROWS[r][col]), &mut cells, &mut failures);
        if undefined && macro_average(&[alive, dead], UndefinedPolicy::Propagate).unwrap().metrics.precision.is_some() {
            failures.push(format!("propagating policy hides the undefined precision at {}", COLUMNS[col]));
        }
    }
    within(start.elapsed(), 1.0, &mut failures);
    verdict(1, "metric fixtures", &failures, &format!("{cells} cells compared in {:?}", start.elapsed()));
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_clinical_statistics() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let hypertension = Contingency2x2::new(39, 57, 26, 97);
    // The female-exposed table; the reported ratio is for males.
    let female = Contingency2x2::new(41, 74, 24, 80);
    let cases = [
        ("hypertension", odds_ratio(&hypertension, Z_95).unwrap(), chi_square(&hypertension).unwrap(), [2.55, 1.41, 4.63], 9.81),
        ("male sex", odds_ratio(&female, Z_95).unwrap().invert(), chi_square(&female).unwrap(), [0.54, 0.30, 0.98], 4.14),
        (
            "male sex (swapped rows)",
            odds_ratio(&female.swap_exposure(), Z_95).unwrap(),
            chi_square(&female.swap_exposure()).unwrap(),
            [0.54, 0.30, 0.98],
            4.14,
        ),
    ];
    let mut detail = Vec::new();
    for (name, or, chi, want, want_chi) in cases {
        let got = [round2(or.or_value), round2(or.ci_low), round2(or.ci_high)];
        if got != want {
            failures.push(format!("{name}: OR {got:?}, want {want:?}"));
        }
        if round2(chi.statistic) != want_chi {
            failures.push(format!("{name}: chi-square {}, want {want_chi}", chi.statistic));
        }
        detail.push(format!("{name} OR {:.2} ({:.2}, {:.2}) chi2 {:.2}", got[0], got[1], got[2], chi.statistic));
    }
    within(start.elapsed(), 1.0, &mut failures);
    verdict(2, "clinical statistics", &failures, &detail.join("; "));
}

// ---------------------------------------------------------------- criterion 3

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an output with fixed random weights so every element matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = t.shape(y).to_vec();
    let w = t.leaf(rand_tensor(&mut rng, &shape), false);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type LayerFn = fn(&mut Tape, &[Var], u64) -> Result<Var, TensorError>;

fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, LayerFn, Vec<Tensor>)> {
    let x4 = rand_tensor(rng, &[2, 2, 5, 6]);
    let x5 = rand_tensor(rng, &[2, 2, 4, 5, 3]);
    vec![
        (
            "conv2d",
            |t, v, s| {
                let y = t.conv(v[0], v[1], Some(v[2]), &[2, 1], &[1, 1])?;
                project(t, y, s)
            },
            vec![x4.clone(), rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[3])],
        ),
        (
            "conv3d",
            |t, v, s| {
                let y = t.conv(v[0], v[1], None, &[1, 2, 1], &[1, 1, 1])?;
                project(t, y, s)
            },
            vec![x5.clone(), rand_tensor(rng, &[2, 2, 3, 3, 3])],
        ),
        (
            "batch_norm/train",
            |t, v, s| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
                project(t, y, s)
            },
            vec![x4.clone(), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])],
        ),
        (
            "batch_norm/eval",
            |t, v, s| {
                let mode = BatchNormMode::Eval { mean: &[0.3, -0.2], var: &[1.5, 0.7], eps: 1e-5 };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
                project(t, y, s)
            },
            vec![x4.clone(), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])],
        ),
        (
            "relu",
            |t, v, s| {
                let y = t.relu(v[0]);
                project(t, y, s)
            },
            vec![x5.clone()],
        ),
        (
            "max_pool",
            |t, v, s| {
                let y = t.max_pool(v[0], &[3, 3, 3], &[2, 2, 2], &[1, 1, 1])?;
                project(t, y, s)
            },
            vec![x5.clone()],
        ),
        (
            "avg_pool",
            |t, v, s| {
                let y = t.avg_pool(v[0], &[2, 2, 2], &[2, 2, 2])?;
                project(t, y, s)
            },
            vec![x5.clone()],
        ),
        (
            "concat+global_avg_pool",
            |t, v, s| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                let y = t.global_avg_pool(c)?;
                project(t, y, s)
            },
            vec![x5, rand_tensor(rng, &[2, 1, 4, 5, 3])],
        ),
        (
            "linear+dropout+softmax",
            |t, v, s| {
                let keep: Vec<bool> = (0..12).map(|i| (s >> i) & 1 == 1 || i % 3 == 0).collect();
                let z = t.linear(v[0], v[1], Some(v[2]))?;
                let d = t.dropout(z, &keep, 0.3)?;
                let y = t.softmax(d)?;
                project(t, y, s)
            },
            vec![rand_tensor(rng, &[4, 5]), rand_tensor(rng, &[5, 3]), rand_tensor(rng, &[3])],
        ),
    ]
}

#[test]
fn criterion_03_gradient_correctness() {
    let _guard = heavy();
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, f, params) in layer_cases(&mut rng) {
            let opts = GradCheckOptions { seed, ..Default::default() };
            let r = finite_diff_check(|t, v| f(t, v, seed), &params, &opts).unwrap();
            worst = worst.max(r.max_rel_error);
            checks += 1;
            if r.max_rel_error >= GRAD_TOL {
                failures.push(format!("{name} seed {seed}: {:.2e}", r.max_rel_error));
            }
        }
    }

    // Full tiny network on a 16³ volume, train mode, every parameter tensor
    // and the input.
    let model = Model::build(DenseNetConfig::tiny(3, 16), 11).unwrap();
    let names: Vec<String> = model.parameter_names().iter().map(|s| s.to_string()).collect();
    let mut net_worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Move normalization affines off 1 and 0 so every path is exercised.
        let mut params: Vec<Tensor> = names
            .iter()
            .map(|n| {
                let mut t = model.tensor(n).unwrap().to_tensor();
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
                t
            })
            .collect();
        params.push(rand_tensor(&mut rng, &model.input_shape(2)));
        let k = names.len();
        // Train-mode normalization after the stem cancels per-channel shifts,
        // so a few stem gradients are zero up to rounding; a denominator floor
        // judges those on absolute error.
        let opts = GradCheckOptions { seed, max_coords_per_param: Some(3), denominator_floor: 1e-6, ..Default::default() };
        let r = finite_diff_check(
            |t, v| {
                let bound = model.bind_vars(t, &v[..k]).expect("bind");
                let out = model.forward_on(t, &bound, v[k], None, ForwardOptions::train(seed)).expect("forward");
                project(t, out.logits, seed)
            },
            &params,
            &opts,
        )
        .unwrap();
        net_worst = net_worst.max(r.max_rel_error);
        checks += 1;
        if r.max_rel_error >= GRAD_TOL {
            failures.push(format!("tiny network seed {seed}: {:.2e}", r.max_rel_error));
        }
    }
    within(start.elapsed(), 300.0, &mut failures);
    verdict(
        3,
        "gradient correctness",
        &failures,
        &format!(
            "{checks} checks over {GRAD_SEEDS} seeds, worst layer {worst:.2e}, worst network {net_worst:.2e}, {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_architecture_arithmetic() {
    let mut failures = Vec::new();
    let model = Model::build(DenseNetConfig::densenet121(3, 64), 0).unwrap();
    let mut trace = Vec::new();
    for stage in &model.plan().stages {
        match stage {
            Stage::Stem { channels, .. } => trace.push(*channels),
            Stage::Block { out_channels, .. } | Stage::Transition { out_channels, .. } => trace.push(*out_channels),
        }
    }
    let want = [64, 256, 128, 512, 256, 1024, 512, 1024];
    if trace != want {
        failures.push(format!("channel trace {trace:?}, want {want:?}"));
    }
    let head = model.head_input_width();
    let fused = model.fuse_metadata(MetadataSpec::default(), 0).unwrap();
    let fused_head = fused.tensor("head.weight").unwrap().shape[0];
    if head != 1024 || fused.head_input_width() != 1032 || fused_head != 1032 {
        failures.push(format!("head input {head}, fused {} (weight rows {fused_head})", fused.head_input_width()));
    }
    let trace_text = trace.iter().map(usize::to_string).collect::<Vec<_>>().join("→");
    verdict(4, "architecture arithmetic", &failures, &format!("{trace_text}, head {head}, fused {fused_head}"));
}

// ------------------------------------------------------- shared training run

/// Training recipe for the tiny network on the default synthetic cohort.
fn train_config() -> TrainConfig {
    TrainConfig { epochs: 30, freeze_epochs: 1, lr_phase1: 3e-3, lr_phase2: Some(3e-3), seed: 0, ..Default::default() }
}

fn dataset(subjects: &[SynthSubject]) -> Dataset {
    let (spatial, _) = volume_input(&subjects[0].volume);
    let mut d = Dataset::new(1, spatial);
    for s in subjects {
        let (_, image) = volume_input(&s.volume);
        d.push(Sample { id: s.truth.subject_id.clone(), image, label: s.truth.label, metadata: None }).unwrap();
    }
    d
}

struct Trained {
    initial: Model,
    outcome: FitOutcome,
    records: Vec<EpochRecord>,
    /// Problems seen in frozen-phase epochs.
    frozen_violations: Vec<String>,
    frozen_epochs_checked: usize,
    val: Dataset,
    elapsed: Duration,
}

fn bits(model: &Model, name: &str) -> Vec<u32> {
    model.tensor(name).unwrap().data.iter().map(|v| v.to_bits()).collect()
}

fn same_state(a: &Model, b: &Model) -> bool {
    a.tensors().len() == b.tensors().len()
        && a.tensors().iter().zip(b.tensors()).all(|(x, y)| {
            x.name == y.name && x.data.iter().map(|v| v.to_bits()).eq(y.data.iter().map(|v| v.to_bits()))
        })
}

fn run_training(cfg: &TrainConfig) -> Trained {
    let cohort = generate(&SynthConfig::default()).unwrap();
    let all = dataset(&cohort);
    let (tr, va) = stratified_split(&all.labels(), 0.2, cfg.seed).unwrap();
    let (train, val) = (all.subset(&tr), all.subset(&va));
    let initial = Model::build(DenseNetConfig::tiny(3, 32), cfg.seed).unwrap();
    let mut frozen_violations = Vec::new();
    let mut frozen_epochs_checked = 0;
    let mut records = Vec::new();
    let start = Instant::now();
    let outcome = fit_observed(initial.clone(), &train, &val, cfg, None, |record, model| {
        records.push(record.clone());
        if record.phase != 1 {
            return;
        }
        frozen_epochs_checked += 1;
        for t in initial.tensors() {
            let changed = bits(&initial, &t.name) != bits(model, &t.name);
            match (t.name.starts_with("head."), changed) {
                (false, true) => frozen_violations.push(format!("epoch {}: backbone tensor {} changed", record.epoch, t.name)),
                (true, false) if t.name == "head.weight" => {
                    frozen_violations.push(format!("epoch {}: head did not train", record.epoch))
                }
                _ => {}
            }
        }
    })
    .unwrap();
    let elapsed = start.elapsed();
    assert_eq!((train.len(), val.len()), (64, 16), "split sizes");
    Trained { initial, outcome, records, frozen_violations, frozen_epochs_checked, val, elapsed }
}

fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let _guard = heavy();
        run_training(&train_config())
    })
}

fn scores(model: &Model, data: &Dataset) -> Vec<f64> {
    predict(model, data, 8).unwrap().data().chunks(2).map(|r| r[1]).collect()
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_end_to_end_training() {
    let run = trained();
    let mut failures = Vec::new();
    let labels = run.val.labels();
    let dead: Vec<bool> = labels.iter().map(|&l| l == 1).collect();

    // Recomputed from the final model, independently of the history.
    let s = scores(&run.outcome.last.model, &run.val);
    let accuracy = s.iter().zip(&labels).filter(|(s, &l)| usize::from(**s > 0.5) == l).count() as f64 / labels.len() as f64;
    let auc = roc_auc(&s, &dead).unwrap();
    if accuracy < 0.9 || auc < 0.9 {
        failures.push(format!("final model: accuracy {accuracy:.3}, AUC {auc:.3}"));
    }
    let last = run.records.last().unwrap();
    if (last.val_accuracy - accuracy).abs() > 1e-12 || (last.val_auc - auc).abs() > 1e-12 {
        failures.push(format!("history disagrees with recomputed metrics: {last:?}"));
    }
    if run.records.len() > 30 {
        failures.push(format!("{} epochs run", run.records.len()));
    }
    within(run.elapsed, 900.0, &mut failures);

    // Same seed, same everything.
    let again = {
        let _guard = heavy();
        run_training(&train_config())
    };
    let deterministic =
        same_state(&again.outcome.last.model, &run.outcome.last.model) && again.outcome.history == run.outcome.history;
    if !deterministic {
        failures.push("a second run with the same seed differs".into());
    }
    verdict(
        5,
        "end-to-end synthetic training",
        &failures,
        &format!(
            "val accuracy {accuracy:.3}, AUC {auc:.3} after {} epochs, {:.0} s per run, deterministic {deterministic}",
            run.records.len(),
            run.elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_transfer_schedule_contract() {
    let run = trained();
    let mut failures = run.frozen_violations.clone();
    if run.frozen_epochs_checked != train_config().freeze_epochs {
        failures.push(format!("{} frozen epochs observed", run.frozen_epochs_checked));
    }
    let partition = run.initial.param_partition();
    let moved = partition.backbone.iter().filter(|n| bits(&run.initial, n) != bits(&run.outcome.last.model, n)).count();
    if moved == 0 {
        failures.push("backbone never trained in the second phase".into());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.json");
    run.outcome.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let before = predict(&run.outcome.last.model, &run.val, run.val.len()).unwrap();
    let after = predict(&loaded.model, &run.val, run.val.len()).unwrap();
    let identical = before.data().iter().map(|v| v.to_bits()).eq(after.data().iter().map(|v| v.to_bits()));
    if !identical {
        failures.push("forward after save/load differs".into());
    }
    if !same_state(&loaded.model, &run.outcome.last.model) || loaded.optimizer != run.outcome.last.optimizer {
        failures.push("restored state differs".into());
    }
    if loaded.meta != run.outcome.last.meta {
        failures.push("restored metadata differs".into());
    }
    verdict(
        6,
        "transfer schedule contract",
        &failures,
        &format!(
            "{} frozen epoch(s) bitwise, {moved}/{} backbone tensors trained afterwards, reload bitwise {identical}",
            run.frozen_epochs_checked,
            partition.backbone.len()
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

/// Improvement flags recomputed from scratch: epoch `i` improves when it
/// beats the value at the most recent improving epoch by more than `delta`.
fn improvements(values: &[f64], lower: bool, delta: f64) -> Vec<bool> {
    let mut flags = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let reference = (0..i).rev().find(|&j| flags[j]).map(|j| values[j]);
        let improves = match reference {
            None => true,
            Some(r) if lower => values[i] < r - delta,
            Some(r) => values[i] > r + delta,
        };
        flags.push(improves);
    }
    flags
}

/// Early stopping by definition: the first epoch preceded (inclusively) by
/// `patience` consecutive epochs without improvement.
fn replay_early_stop(values: &[f64], lower: bool, patience: usize, delta: f64) -> Option<usize> {
    (1..=values.len()).find(|&t| {
        let flags = improvements(&values[..t], lower, delta);
        t >= patience && flags[t - patience..].iter().all(|f| !f)
    })
}

/// Plateau schedule by replay: the epochs since the last improvement or
/// reduction are counted afresh for every prefix.
fn replay_plateau(values: &[f64], lower: bool, cfg: &PlateauConfig, lr0: f64) -> Vec<f64> {
    let flags = improvements(values, lower, cfg.min_delta);
    let mut out = Vec::new();
    for t in 0..values.len() {
        let mut lr = lr0;
        let mut quiet = 0;
        for &improved in &flags[..=t] {
            if improved {
                quiet = 0;
            } else {
                quiet += 1;
                if quiet == cfg.patience {
                    lr = (lr * cfg.factor).max(cfg.min_lr);
                    quiet = 0;
                }
            }
        }
        out.push(lr);
    }
    out
}

#[test]
fn criterion_07_callback_oracle_equivalence() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut stops, mut reductions) = (0, 0);
    for h in 0..100 {
        let len = rng.random_range(1..60);
        // Noisy trends with plateaus and repeated values.
        let trend = rng.random_range(-0.02..0.02);
        let values: Vec<f64> = (0..len)
            .map(|i| {
                let v = 0.5 + trend * i as f64 + rng.random_range(-0.05..0.05);
                if rng.random_bool(0.2) { (v * 20.0).round() / 20.0 } else { v }
            })
            .collect();
        let monitor = Monitor::ALL[rng.random_range(0..Monitor::ALL.len())];
        let lower = monitor.lower_is_better();
        let patience = rng.random_range(1..8);
        let delta = [0.0, 1e-3, 0.02][rng.random_range(0..3)];

        let got = early_stop_epoch(&values, monitor, patience, delta);
        let want = replay_early_stop(&values, lower, patience, delta);
        stops += usize::from(want.is_some());
        if got != want {
            failures.push(format!("history {h}: early stop {got:?}, replay {want:?}"));
        }

        let cfg = PlateauConfig {
            enabled: true,
            monitor,
            factor: rng.random_range(0.1..0.9),
            patience: rng.random_range(1..6),
            min_delta: delta,
            min_lr: [0.0, 1e-4][rng.random_range(0..2)],
        };
        let got = plateau_schedule(&values, 1e-2, &cfg);
        let want = replay_plateau(&values, lower, &cfg, 1e-2);
        reductions += want.windows(2).filter(|w| w[1] < w[0]).count();
        if got != want {
            failures.push(format!("history {h}: plateau schedule {got:?}, replay {want:?}"));
        }
    }
    verdict(
        7,
        "callback oracle equivalence",
        &failures,
        &format!("100 histories, {stops} early stops, {reductions} learning-rate reductions, exact agreement"),
    );
}

// ---------------------------------------------------------------- criterion 8

/// Linear readout of the input's global average: Grad-CAM must equal
/// `ReLU(Σ_c w_c A_c) / |A|` exactly.
struct Readout {
    weights: Tensor,
}

impl CamModel for Readout {
    fn cam_forward(&self, tape: &mut Tape, input: Var, _: Option<&Tensor>, _: &str) -> Result<(Var, Var), ExplainError> {
        let pooled = tape.global_avg_pool(input)?;
        let w = tape.leaf(self.weights.clone(), false);
        Ok((tape.linear(pooled, w, None)?, input))
    }
}

fn readout_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, spatial) = (3, [5, 4, 6]);
    let s: usize = spatial.iter().product();
    let input = rand_tensor(&mut rng, &[1, c, spatial[0], spatial[1], spatial[2]]);
    let weights = rand_tensor(&mut rng, &[c, 2]);
    let model = Readout { weights: weights.clone() };
    let mut worst = 0.0f64;
    for class in 0..2 {
        let coarse = grad_cam_coarse(&model, &input, None, class, "input").unwrap();
        for (i, g) in coarse.data().iter().enumerate() {
            let want = (0..c).map(|ch| weights.data()[ch * 2 + class] * input.data()[ch * s + i]).sum::<f64>().max(0.0)
                / s as f64;
            worst = worst.max((g - want).abs());
        }
        let sal = grad_cam(&model, &input, None, class, "input").unwrap();
        if !sal.all_zero {
            for (i, v) in sal.grid.iter().enumerate() {
                worst = worst.max((v - coarse.data()[i] / sal.peak).abs());
            }
        }
    }
    worst
}

#[test]
fn criterion_08_grad_cam_localization() {
    let mut failures = Vec::new();
    let toy = (0..20).map(readout_error).fold(0.0, f64::max);
    if toy > 1e-10 {
        failures.push(format!("linear readout error {toy:e}"));
    }

    let run = trained();
    let _guard = heavy();
    let model = &run.outcome.last.model;
    let layer = model.last_conv_layer();
    let held_out = generate(&SynthConfig { n_subjects: 40, seed: 99, ..Default::default() }).unwrap();
    let mut fractions = Vec::new();
    for s in held_out.iter().filter(|s| s.truth.label == 1) {
        let (spatial, data) = volume_input(&s.volume);
        let mut shape = vec![1, 1];
        shape.extend(&spatial);
        let input = Tensor::new(shape, data.iter().map(|&v| v as f64).collect()).unwrap();
        let sal = grad_cam(model, &input, None, 1, &layer).unwrap();
        let top = sal.top_indices(0.1);
        let inside = top
            .iter()
            .filter(|&&i| {
                let c = sal.coords(i);
                s.truth.in_bbox(c[2], c[1], c[0])
            })
            .count();
        fractions.push(inside as f64 / top.len() as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    if fractions.len() < 10 {
        failures.push(format!("only {} held-out lesion subjects", fractions.len()));
    }
    if mean < 0.6 {
        failures.push(format!("mean top-decile fraction inside the lesion box {mean:.3} < 0.6"));
    }
    verdict(
        8,
        "Grad-CAM localization",
        &failures,
        &format!("{} held-out subjects, mean in-box fraction {mean:.3} at {layer}; readout error {toy:.1e}", fractions.len()),
    );
}

// ---------------------------------------------------------------- criterion 9

/// Two Gaussian blobs, moved by `shift` voxels and rotated by `angle_deg`
/// about the z axis through the grid centre.
fn blob_phantom(shift: [f64; 3], angle_deg: f64) -> Volume {
    let c = 19.5;
    let (s, co) = angle_deg.to_radians().sin_cos();
    Volume::from_fn([40; 3], diagonal_affine([1.0; 3], [0.0; 3]), IntensityUnit::NonNegative, |x, y, z| {
        let (px, py, pz) = (x as f64 - c - shift[0], y as f64 - c - shift[1], z as f64 - c - shift[2]);
        let (qx, qy) = (co * px + s * py, -s * px + co * py);
        let g = |cx: f64, cy: f64, cz: f64, sx: f64, sy: f64, sz: f64| {
            (-((qx - cx) / sx).powi(2) - ((qy - cy) / sy).powi(2) - ((pz - cz) / sz).powi(2)).exp()
        };
        (1000.0 * g(0.0, 0.0, 0.0, 9.0, 6.0, 7.0) + 600.0 * g(5.0, 3.0, 2.0, 3.0, 2.5, 3.0)) as f32
    })
    .unwrap()
}

/// Brain sphere (radius 10) inside a skull shell, in air.
fn sphere_phantom() -> (Volume, Vec<bool>) {
    let c = 15.5;
    let r = |x: usize, y: usize, z: usize| ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
    let v = Volume::from_fn([32; 3], Affine::identity(), IntensityUnit::Hu, |x, y, z| match r(x, y, z) {
        d if d <= 10.0 => 40.0,
        d if d <= 12.0 => 800.0,
        _ => -1000.0,
    })
    .unwrap();
    let mut truth = Vec::new();
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                truth.push(r(x, y, z) <= 10.0);
            }
        }
    }
    (v, truth)
}

#[test]
fn criterion_09_preprocessing_phantoms() {
    let _guard = heavy();
    let mut failures = Vec::new();
    let fixed = blob_phantom([0.0; 3], 0.0);
    let opts = RegistrationOptions::default();

    let moved = register_affine(&blob_phantom([3.0, -2.0, 1.0], 0.0), &fixed, &opts).unwrap();
    let d = moved.transform.displacement_at(fixed.world_center());
    let shift_err = (0..3).map(|a| (d[a] - [3.0, -2.0, 1.0][a]).abs()).fold(0.0, f64::max);
    if shift_err >= 0.5 {
        failures.push(format!("translation recovered as {d:?}"));
    }

    let rotated = register_affine(&blob_phantom([0.0; 3], 5.0), &fixed, &opts).unwrap();
    let angle = rotated.transform.angle_z_deg();
    if (angle - 5.0).abs() >= 1.0 {
        failures.push(format!("rotation recovered as {angle:.3}°"));
    }

    let (v, truth) = sphere_phantom();
    let mask = extract_brain(&v, &BrainParams::default(), &IntensityMap::default()).unwrap();
    let dsc = dice(mask.grid(), &truth);
    if dsc < 0.95 {
        failures.push(format!("sphere Dice {dsc:.4}"));
    }

    let hu: Vec<f32> = (-1024..=3071).map(|h| h as f32).collect();
    let sweep = Volume::new(hu.clone(), [hu.len(), 1, 1], Affine::identity(), IntensityUnit::Hu).unwrap();
    let (mapped, clamped) = to_nonnegative(&sweep, &IntensityMap::default()).unwrap();
    let out = mapped.data();
    let monotone = out.windows(2).all(|w| w[1] > w[0]);
    let min = out.iter().copied().fold(f32::INFINITY, f32::min);
    if !monotone || min != 0.0 || out[0] != 0.0 || clamped != 0 {
        failures.push(format!("intensity sweep: monotone {monotone}, min {min}, clamped {clamped}"));
    }
    verdict(
        9,
        "preprocessing phantoms",
        &failures,
        &format!(
            "translation error {shift_err:.3} voxel, rotation {angle:.3}°, Dice {dsc:.4}, {} HU values strictly increasing from 0",
            hu.len()
        ),
    );
}

// --------------------------------------------------------------- criterion 10

fn random_volume(rng: &mut ChaCha8Rng) -> Volume {
    let shape = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..6)];
    let spacing = [rng.random_range(0.3..4.0), rng.random_range(0.3..4.0), rng.random_range(0.3..6.0)];
    let origin = [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)];
    let mut affine = diagonal_affine(spacing, origin);
    affine[(0, 2)] = rng.random_range(-0.4..0.4);
    let unit = [IntensityUnit::Hu, IntensityUnit::NonNegative, IntensityUnit::Normalized][rng.random_range(0..3)];
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-3000.0f32..3000.0)).collect();
    Volume::new(data, shape, affine, unit).unwrap()
}

#[test]
fn criterion_10_format_robustness() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut fuzzed = 0;
    for i in 0..50 {
        let v = random_volume(&mut rng);
        let bytes = write_nifti(&v).unwrap();
        match read_nifti(&bytes) {
            Ok(back) if back == v => {}
            other => failures.push(format!("volume {i}: roundtrip gave {other:?}")),
        }

        // Every corrupted magic byte and every truncation point must be
        // rejected with its own error.
        for pos in 344..348 {
            let mut bad = bytes.clone();
            bad[pos] = bad[pos].wrapping_add(rng.random_range(1..=255));
            fuzzed += 1;
            match std::panic::catch_unwind(|| read_nifti(&bad)) {
                Ok(Err(VolioError::BadMagic | VolioError::PairUnsupported | VolioError::Nifti2Unsupported)) => {}
                other => failures.push(format!("volume {i}: magic byte {pos} corrupted gave {:?}", other.map(|r| r.map(|_| ())))),
            }
        }
        for len in (0..bytes.len()).step_by(1 + i % 7) {
            fuzzed += 1;
            match std::panic::catch_unwind(|| read_nifti(&bytes[..len])) {
                Ok(Err(VolioError::Truncated { .. })) => {}
                other => failures.push(format!("volume {i}: {len}-byte prefix gave {:?}", other.map(|r| r.map(|_| ())))),
            }
        }
    }
    verdict(10, "format robustness", &failures, &format!("50 roundtrips exact, {fuzzed} corrupted inputs rejected"));
}
