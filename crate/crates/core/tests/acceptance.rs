//! One test per acceptance criterion. Each prints a single
//! `criterion N PASS|FAIL|FLAG` line straight to the process stdout so the
//! summary survives output capture; the trained runs are shared.

mod common;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use common::feb::feb_gradient_errors;
use common::primitives::{cases, point};
use robustgs::gendeg::{loss_classification, loss_contrastive, GenDeg, GenDegConfig};
use robustgs::harness::bench::{bench_scan, format_bench};
use robustgs::harness::pipeline::{
    self, EnhancerSummary, ENHANCER_CHECKPOINT, ENHANCER_LOG, GENDEG_CHECKPOINT, GENDEG_LOG,
};
use robustgs::harness::{MetricsReport, RunConfig};
use robustgs::router::{
    gumbel_softmax, semantic_modulate_c, sort_by_class, RouterConfig, SemanticRouter,
};
use robustgs::ssm::discretize::{exprel_closed, exprel_series};
use robustgs::ssm::{
    discretize_zoh, discretize_zoh_allow_zero, scan_parallel, scan_sequential, ScanDims, ScanMode,
    ScanModulation, SelectiveScan,
};
use robustgs::tensor::finite_difference_check;
use robustgs::{ParamStore, SeededRng, Tape, Tensor};
use tempfile::TempDir;

fn report(n: usize, status: &str, what: &str, detail: &str) {
    let line = format!("\ncriterion {n:>2} {status}: {what} ({detail})\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

/// Prints the line and fails the test when `pass` is false.
fn verdict(n: usize, pass: bool, what: &str, detail: String) {
    report(n, if pass { "PASS" } else { "FAIL" }, what, &detail);
    assert!(pass, "criterion {n}: {what}: {detail}");
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> RunConfig {
    RunConfig::parse(&fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

#[test]
fn criterion_01_autodiff_matches_finite_differences() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    let primitives = cases();
    for (name, shape, f, domain) in &primitives {
        let mut rng = SeededRng::new(1000);
        for _ in 0..10 {
            let err = finite_difference_check(*f, &point(shape, *domain, &mut rng), 1e-5).unwrap();
            if err > worst {
                worst = err;
                worst_name = name;
            }
        }
    }
    let mut feb_worst: f64 = 0.0;
    for seed in 0..10 {
        let (p, x) = feb_gradient_errors(100 + seed);
        feb_worst = feb_worst.max(p).max(x);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        worst < 1e-4 && feb_worst < 1e-4 && secs < 120.0,
        "autodiff vs central differences",
        format!(
            "{} primitives x 10 points worst {worst:.2e} ({worst_name}); FEB x 10 points worst {feb_worst:.2e}; {secs:.1}s",
            primitives.len()
        ),
    );
}

#[test]
fn criterion_02_parallel_scan_equals_sequential() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for &len in &[8usize, 64, 1024] {
        for &state in &[4usize, 16] {
            for seed in 0..20u64 {
                let mut rng = SeededRng::new(seed);
                let channels = 2;
                let dims = ScanDims {
                    len,
                    channels,
                    state,
                };
                let a: Vec<f64> = (0..channels * state)
                    .map(|_| -rng.uniform_range(0.1, 4.0))
                    .collect();
                let b: Vec<f64> = (0..len * state).map(|_| rng.normal()).collect();
                let delta: Vec<f64> = (0..len * channels)
                    .map(|_| rng.uniform_range(0.01, 0.5))
                    .collect();
                let x: Vec<f64> = (0..len * channels).map(|_| rng.normal()).collect();
                let c: Vec<f64> = (0..len * state).map(|_| rng.normal()).collect();
                let d: Vec<f64> = (0..channels).map(|_| rng.normal()).collect();
                let ssm = discretize_zoh(&a, &b, &delta, dims).unwrap();
                let s = scan_sequential(&ssm, &x, &c, &d, None).unwrap();
                let p = scan_parallel(&ssm, &x, &c, &d, None).unwrap();
                for (u, v) in
                    s.y.iter()
                        .zip(&p.y)
                        .chain(s.final_state.iter().zip(&p.final_state))
                {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        2,
        worst < 1e-10 && secs < 30.0,
        "parallel vs sequential scan",
        format!("lengths 8/64/1024, states 4/16, 20 seeds: max |diff| {worst:.2e}; {secs:.2}s"),
    );
}

#[test]
fn criterion_03_discretization() {
    let mut worst: f64 = 0.0;
    let mut z: f64 = 1e-8;
    while z <= 1e-3 {
        for s in [z, -z] {
            worst = worst.max((exprel_closed(s) - exprel_series(s)).abs());
        }
        z *= 1.1;
    }
    let one = ScanDims {
        len: 1,
        channels: 1,
        state: 1,
    };
    let limit = discretize_zoh_allow_zero(&[-2.0], &[1.0], &[0.0], one).unwrap();
    let limit_ok = limit.a_bar[0] == 1.0 && limit.b_bar[0] == 0.0;
    let w = discretize_zoh(&[-2.0f64], &[1.0], &[0.5], one).unwrap();
    let (a_err, b_err) = (
        (w.a_bar[0] - 0.3678794).abs(),
        (w.b_bar[0] - 0.3160603).abs(),
    );
    verdict(
        3,
        worst < 1e-10 && limit_ok && a_err < 1e-6 && b_err < 1e-6,
        "zero-order-hold discretization",
        format!(
            "series vs closed form worst {worst:.2e} over |z| in [1e-8, 1e-3]; step 0 gives ({}, {}); worked value ({:.7}, {:.7})",
            limit.a_bar[0], limit.b_bar[0], w.a_bar[0], w.b_bar[0]
        ),
    );
}

#[test]
fn criterion_04_router_invariants() {
    let t = Instant::now();
    let mut rng = SeededRng::new(44);

    // Round trip and sortedness for sizes up to 4096.
    let mut round_trip = true;
    let mut sorted = true;
    for &n in &[1usize, 7, 64, 513, 4096] {
        let classes: Vec<usize> = (0..n).map(|_| rng.below(64)).collect();
        let perm = sort_by_class(&classes, 64).unwrap();
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(vec![n, 2], |_| rng.normal()).unwrap())
            .unwrap();
        let back = perm.restore(perm.apply(x).unwrap()).unwrap();
        round_trip &= back.value().data() == x.value().data();
        round_trip &= (0..n).all(|i| perm.inverse[perm.forward[i]] == i);
        sorted &= perm
            .forward
            .windows(2)
            .all(|w| classes[w[0]] <= classes[w[1]]);
    }

    // Ties keep their original order.
    let stable = sort_by_class(&[2, 0, 1, 0], 3).unwrap().forward == [1, 3, 2, 0];

    // Simplex rows from a real router, soft and hard.
    let mut store = ParamStore::new();
    let config = RouterConfig {
        classes: 8,
        d_inner: 16,
        temperature: 1.0,
        hard: false,
    };
    let router =
        SemanticRouter::new(&mut store, "r", 12, 4, config, &mut SeededRng::new(2)).unwrap();
    let tape = Tape::new();
    let x = tape
        .constant(Tensor::from_fn(vec![200, 12], |_| rng.normal()).unwrap())
        .unwrap();
    let soft = router
        .route(&tape, &store, x, Some(&mut SeededRng::new(3)))
        .unwrap();
    let row_err = soft
        .weights
        .value()
        .data()
        .chunks(8)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let hard_router = SemanticRouter {
        config: RouterConfig {
            hard: true,
            ..config
        },
        ..router.clone()
    };
    let hard = hard_router
        .route(&tape, &store, x, Some(&mut SeededRng::new(3)))
        .unwrap();
    let one_hot = hard.weights.value().data().chunks(8).all(|r| {
        r.iter().filter(|&&v| v == 1.0).count() == 1 && r.iter().filter(|&&v| v == 0.0).count() == 7
    });

    // Straight-through gradient equals the soft gradient at the same noise.
    let logits = Tensor::from_fn(vec![30, 5], |_| rng.normal()).unwrap();
    let target = Tensor::from_fn(vec![30, 5], |_| rng.normal()).unwrap();
    let grad = |hard: bool| {
        let tape = Tape::new();
        let l = tape.var(logits.clone()).unwrap();
        let w = gumbel_softmax(l, 0.5, hard, Some(&mut SeededRng::new(9))).unwrap();
        let loss = w
            .mul(tape.constant(target.clone()).unwrap())
            .unwrap()
            .sum()
            .unwrap();
        tape.backward(loss).unwrap().wrt(l)
    };
    let st_equal = grad(true) == grad(false);
    let secs = t.elapsed().as_secs_f64();

    verdict(
        4,
        round_trip && sorted && stable && row_err < 1e-6 && one_hot && st_equal && secs < 30.0,
        "router invariants",
        format!(
            "round trip {round_trip}, sorted {sorted}, stable ties {stable}, row-sum error {row_err:.1e}, one-hot {one_hot}, straight-through = soft {st_equal}; {secs:.2}s"
        ),
    );
}

#[test]
fn criterion_05_loss_closed_forms() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(vec![5, 6]).unwrap()).unwrap();
    let cls = loss_classification(uniform, &[0, 1, 2, 3, 5])
        .unwrap()
        .item()
        .unwrap();
    let cls_err = (cls - 6f64.ln()).abs();

    let z = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let con = loss_contrastive(tape.constant(z.clone()).unwrap(), &[0, 0, 1], 1.0)
        .unwrap()
        .item()
        .unwrap();
    let con_err = (con - (-1f64).exp().ln_1p()).abs();

    let mut rng = SeededRng::new(55);
    let emb = Tensor::from_fn(vec![8, 5], |_| rng.normal()).unwrap();
    let labels = [0, 1, 0, 2, 1, 2, 0, 1];
    let base = loss_contrastive(tape.constant(emb.clone()).unwrap(), &labels, 0.07)
        .unwrap()
        .item()
        .unwrap();
    let scaled = loss_contrastive(tape.constant(emb.map(|v| 37.5 * v)).unwrap(), &labels, 0.07)
        .unwrap()
        .item()
        .unwrap();
    let scale_err = (base - scaled).abs();

    let cfg = GenDegConfig {
        width: 8,
        z_dim: 6,
        proxy_dim: 5,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let g = GenDeg::new(&mut store, "g", cfg, &mut SeededRng::new(1)).unwrap();
    let imgs = robustgs::harness::data::synthetic_images(8, 16, 2).unwrap();
    let clean: Vec<_> = imgs[..4].iter().collect();
    let degraded: Vec<_> = imgs[4..].iter().collect();
    let parts = g
        .losses(&tape, &store, &clean, &degraded, &[1, 4, 1, 4])
        .unwrap();
    let (r, c, k, total) = (
        parts.reconstruction.item().unwrap(),
        parts.contrastive.item().unwrap(),
        parts.classification.item().unwrap(),
        parts.total.item().unwrap(),
    );
    let weights_ok = cfg.loss_weights == [1.0, 0.5, 0.3];
    let total_err = (total - (1.0 * r + 0.5 * c + 0.3 * k)).abs();

    verdict(
        5,
        cls_err < 1e-9 && con_err < 1e-9 && scale_err < 1e-9 && weights_ok && total_err < 1e-12,
        "loss closed forms",
        format!(
            "uniform classification - ln 6 = {cls_err:.1e}; worked contrastive error {con_err:.1e}; rescaling change {scale_err:.1e}; weights {:?}, total error {total_err:.1e}",
            cfg.loss_weights
        ),
    );
}

#[test]
fn criterion_06_neutral_modulation_and_semantic_offset() {
    let mut store = ParamStore::new();
    let (len, ch, st) = (20, 6, 4);
    let s = SelectiveScan::new(&mut store, "s", ch, st, &mut SeededRng::new(6)).unwrap();
    let mut rng = SeededRng::new(7);
    let x0 = Tensor::from_fn(vec![len, ch], |_| rng.normal()).unwrap();
    let mut neutral = true;
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let tape = Tape::new();
        let x = tape.constant(x0.clone()).unwrap();
        let plain = s
            .forward(&tape, &store, x, &ScanModulation::default(), mode)
            .unwrap();
        let m = ScanModulation {
            gate_b: Some(tape.constant(Tensor::ones(vec![st]).unwrap()).unwrap()),
            gate_c: Some(tape.constant(Tensor::ones(vec![st]).unwrap()).unwrap()),
            gate_step: Some(tape.constant(Tensor::ones(vec![ch]).unwrap()).unwrap()),
            c_offset: Some(
                tape.constant(Tensor::zeros(vec![len, st]).unwrap())
                    .unwrap(),
            ),
            init_state: None,
        };
        let gated = s.forward(&tape, &store, x, &m, mode).unwrap();
        neutral &= plain.y.value().data() == gated.y.value().data();
        neutral &= plain.final_state.value().data() == gated.final_state.value().data();
    }

    // One-hot routing adds exactly the selected prototype.
    let (n, k, d) = (9, 5, st);
    let tape = Tape::new();
    let c = Tensor::from_fn(vec![n, d], |_| rng.normal()).unwrap();
    let protos = Tensor::from_fn(vec![k, d], |_| rng.normal()).unwrap();
    let picks: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let w = Tensor::from_fn(
        vec![n, k],
        |i| if picks[i / k] == i % k { 1.0 } else { 0.0 },
    )
    .unwrap();
    let out = semantic_modulate_c(
        tape.constant(c.clone()).unwrap(),
        tape.constant(w).unwrap(),
        tape.constant(protos.clone()).unwrap(),
    )
    .unwrap()
    .value();
    let exact = (0..n).all(|i| {
        (0..d)
            .all(|j| out.data()[i * d + j] == c.data()[i * d + j] + protos.data()[picks[i] * d + j])
    });

    verdict(
        6,
        neutral && exact,
        "neutral gates and semantic offset",
        format!("unit gates reproduce the plain scan bit-for-bit: {neutral}; one-hot rows give C + p_k exactly: {exact}"),
    );
}

struct GenDegRun {
    _dir: TempDir,
    checkpoint: PathBuf,
    totals: Vec<f64>,
    accuracy: f64,
    seconds: f64,
}

fn gendeg_run() -> &'static GenDegRun {
    static RUN: OnceLock<GenDegRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let t = Instant::now();
        let s = pipeline::train_gendeg(&load_config("gendeg.cfg"), dir.path(), None).unwrap();
        let totals = fs::read_to_string(dir.path().join(GENDEG_LOG))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split('\t').nth(4).unwrap().parse().unwrap())
            .collect();
        GenDegRun {
            checkpoint: dir.path().join(GENDEG_CHECKPOINT),
            _dir: dir,
            totals,
            accuracy: s.holdout_accuracy,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_07_gendeg_desk_run() {
    let run = gendeg_run();
    let steps = run.totals.len();
    let (at10, last) = (run.totals[10], *run.totals.last().unwrap());
    let drop = 1.0 - last / at10;
    verdict(
        7,
        steps == 2000 && drop >= 0.5 && run.accuracy >= 0.8,
        "GenDeg desk run",
        format!(
            "{steps} steps; total loss {at10:.4} at step 10 -> {last:.4} at the end ({:.1}% drop); held-out accuracy {:.1}% over 120 images; {:.0}s",
            100.0 * drop,
            100.0 * run.accuracy,
            run.seconds
        ),
    );
}

struct EnhancerRun {
    _dir: TempDir,
    summary: EnhancerSummary,
    report: Option<MetricsReport>,
    seconds: f64,
}

fn enhancer_run(ablate: Option<&str>, evaluate: bool) -> EnhancerRun {
    let mut cfg = load_config("enhancer.cfg");
    cfg.gendeg_checkpoint = Some(gendeg_run().checkpoint.clone());
    if let Some(key) = ablate {
        cfg.set(key, "false").unwrap();
    }
    let dir = TempDir::new().unwrap();
    let t = Instant::now();
    let summary = pipeline::train_enhancer(&cfg, dir.path(), None).unwrap();
    let report = evaluate.then(|| pipeline::eval(&cfg, &summary.checkpoint, dir.path()).unwrap());
    EnhancerRun {
        _dir: dir,
        summary,
        report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn full_enhancer() -> &'static EnhancerRun {
    static RUN: OnceLock<EnhancerRun> = OnceLock::new();
    RUN.get_or_init(|| enhancer_run(None, true))
}

#[test]
fn criterion_08_enhancer_desk_run() {
    let run = full_enhancer();
    let metrics = run.report.as_ref().unwrap();
    let avg = &metrics.average;
    let reduction = avg.l1_reduction();
    let gain = avg.psnr_gain();
    verdict(
        8,
        reduction >= 0.3 && gain >= 2.0,
        "enhancer desk run",
        format!(
            "{} steps; held-out feature L1 {:.4} vs degraded {:.4} ({:.1}% reduction); decoded PSNR {:.2} vs {:.2} dB ({gain:+.2} dB over six kinds); {:.0}s",
            run.summary.steps,
            avg.l1_enhanced,
            avg.l1_degraded,
            100.0 * reduction,
            avg.psnr_enhanced,
            avg.psnr_degraded,
            run.seconds
        ),
    );
    // The clean row compares against an identity baseline at the PSNR cap.
    let clean = &metrics.clean;
    report(
        8,
        "INFO",
        "clean inputs",
        &format!(
            "enhanced-vs-clean PSNR {:.2} dB against the {:.1} dB identity baseline",
            clean.psnr_enhanced, clean.psnr_degraded
        ),
    );
}

#[test]
fn criterion_09_ablation_direction() {
    let full = full_enhancer().summary.validation_loss;
    let mut rows = Vec::new();
    let mut pass = true;
    for key in ["deg_injection", "semantic_reorder", "multi_view"] {
        let v = enhancer_run(Some(key), false).summary.validation_loss;
        pass &= full <= v;
        rows.push(format!("{key} off {v:.5}"));
    }
    verdict(
        9,
        pass,
        "ablation direction",
        format!("full {full:.5}; {}", rows.join(", ")),
    );
}

fn tiny() -> RunConfig {
    RunConfig {
        image_size: 24,
        train_images: 12,
        holdout_images: 12,
        batch_size: 6,
        epochs: 4,
        learning_rate: 1e-3,
        z_dim: 16,
        channels: 48,
        state_dim: 4,
        classes: 4,
        d_inner: 8,
        crop_size: 16,
        crop_shift: 4,
        ..Default::default()
    }
}

#[test]
fn criterion_10_determinism_and_resume() {
    let tmp = TempDir::new().unwrap();
    let p = |s: &str| tmp.path().join(s);
    let read = |dir: PathBuf, f: &str| fs::read(dir.join(f)).unwrap();
    let rows = |dir: PathBuf, f: &str| -> Vec<String> {
        fs::read_to_string(dir.join(f))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(str::to_owned)
            .collect()
    };
    let cfg = tiny();
    let short = RunConfig {
        epochs: 2,
        ..cfg.clone()
    };

    pipeline::train_gendeg(&cfg, &p("g1"), None).unwrap();
    pipeline::train_gendeg(&cfg, &p("g2"), None).unwrap();
    pipeline::train_gendeg(&short, &p("gh"), None).unwrap();
    pipeline::train_gendeg(&cfg, &p("gr"), Some(&p("gh").join(GENDEG_CHECKPOINT))).unwrap();
    let g_same = read(p("g1"), GENDEG_LOG) == read(p("g2"), GENDEG_LOG)
        && read(p("g1"), GENDEG_CHECKPOINT) == read(p("g2"), GENDEG_CHECKPOINT);
    let mut spliced = rows(p("gh"), GENDEG_LOG);
    spliced.extend(rows(p("gr"), GENDEG_LOG));
    let g_resume = spliced == rows(p("g1"), GENDEG_LOG)
        && read(p("g1"), GENDEG_CHECKPOINT) == read(p("gr"), GENDEG_CHECKPOINT);

    let with = |c: &RunConfig| RunConfig {
        gendeg_checkpoint: Some(p("g1").join(GENDEG_CHECKPOINT)),
        ..c.clone()
    };
    pipeline::train_enhancer(&with(&cfg), &p("e1"), None).unwrap();
    pipeline::train_enhancer(&with(&cfg), &p("e2"), None).unwrap();
    pipeline::train_enhancer(&with(&short), &p("eh"), None).unwrap();
    pipeline::train_enhancer(
        &with(&cfg),
        &p("er"),
        Some(&p("eh").join(ENHANCER_CHECKPOINT)),
    )
    .unwrap();
    let e_same = read(p("e1"), ENHANCER_LOG) == read(p("e2"), ENHANCER_LOG)
        && read(p("e1"), ENHANCER_CHECKPOINT) == read(p("e2"), ENHANCER_CHECKPOINT);
    let mut spliced = rows(p("eh"), ENHANCER_LOG);
    spliced.extend(rows(p("er"), ENHANCER_LOG));
    let e_resume = spliced == rows(p("e1"), ENHANCER_LOG)
        && read(p("e1"), ENHANCER_CHECKPOINT) == read(p("er"), ENHANCER_CHECKPOINT);

    let ckpt = robustgs::harness::Checkpoint::load(p("e1").join(ENHANCER_CHECKPOINT)).unwrap();
    let round_trip = ckpt.encode() == read(p("e1"), ENHANCER_CHECKPOINT);

    verdict(
        10,
        g_same && g_resume && e_same && e_resume && round_trip,
        "determinism and persistence",
        format!(
            "GenDeg identical {g_same}, resumed {g_resume}; enhancer identical {e_same}, resumed {e_resume}; save-load-save identical {round_trip}"
        ),
    );
}

#[test]
fn criterion_11_scan_throughput() {
    let rows = bench_scan(&[1024, 4096, 16384], &[16], 1 << 16, 11).unwrap();
    let table = format_bench(&rows, rayon::current_num_threads());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(format!("\n{table}").as_bytes());
    drop(out);
    let long: Vec<_> = rows
        .iter()
        .filter(|r| r.len >= 4096 && r.state == 16)
        .collect();
    assert!(!long.is_empty());
    let holds = long.iter().all(|r| r.parallel_not_slower());
    let detail = long
        .iter()
        .map(|r| {
            format!(
                "L={} seq {:.1} ns/token, par {:.1} ns/token",
                r.len, r.sequential_ns_per_token, r.parallel_ns_per_token
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    // Informational: the table must be produced; a slower parallel scan is
    // flagged rather than failed.
    report(
        11,
        if holds { "PASS" } else { "FLAG" },
        "parallel scan throughput >= sequential at L >= 4096, N = 16",
        &format!("{detail}; {} thread(s)", rayon::current_num_threads()),
    );
}
