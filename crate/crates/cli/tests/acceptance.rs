//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Oracles here are written independently of the engine code.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mlcl_cli::{cmd_metrics, cmd_run, load_config};
use mlcl_core::harness::run_experiment;
use mlcl_core::model::{init_model, loss_and_grad};
use mlcl_core::strategies::{agem_project, ewc_fisher, ewc_penalty_grad, EpisodicMemory, FisherSnapshot};
use mlcl_core::{
    cbt, cft, Activation, CbtRow, Example, ExperimentConfig, GradientVector, HeadKind, LrSchedule, ModelConfig,
    ParameterVector, RunResult, ScoreMatrix,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check { pass, detail: detail.into() }
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shifted.json")
}

fn shifted(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config(&config_path(), &o).expect("acceptance config")
}

fn run(overrides: &[&str]) -> RunResult {
    run_experiment(&shifted(overrides)).expect("run")
}

fn cbt_mean(r: &RunResult) -> f64 {
    r.cbt.expect("sequential run has CBT").mean
}

// 1
fn gradient_correctness() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 20 {
        let tokens = rng.random_bool(0.4);
        let config = ModelConfig {
            input_dim: rng.random_range(1..=8),
            hidden_dims: (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=8)).collect(),
            num_labels: if tokens { 5 } else { rng.random_range(2..=5) },
            activation: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu },
            head_kind: if tokens { HeadKind::TokenLabeling } else { HeadKind::SequenceClassification },
            init_seed: rng.random(),
        };
        if config.num_parameters() > 200 {
            continue;
        }
        let mut theta = init_model(&config).unwrap();
        for v in &mut theta.values {
            *v += rng.random_range(-0.5..0.5);
        }
        let batch: Vec<Example> = (0..rng.random_range(1..=6))
            .map(|_| {
                let x = |rng: &mut ChaCha8Rng| {
                    (0..config.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>()
                };
                if tokens {
                    let n = rng.random_range(1..=5);
                    let xs = (0..n).map(|_| x(&mut rng)).collect();
                    let ys = (0..n).map(|_| rng.random_range(0..config.num_labels)).collect();
                    Example::tokens("t", xs, ys)
                } else {
                    let xs = x(&mut rng);
                    Example::sequence("t", xs, rng.random_range(0..config.num_labels))
                }
            })
            .collect();
        let (_, g) = loss_and_grad(&theta, &config, &batch).unwrap();
        let loss = |t: &ParameterVector| loss_and_grad(t, &config, &batch).unwrap().0;
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p.values[i] += h;
            let mut m = theta.clone();
            m.values[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-7);
            worst = worst.max(rel);
        }
        done += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} over 20 instances in {secs:.2}s"),
    )
}

// 2
fn lr_adjust_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..100 {
        let lr0 = 10f64.powf(rng.random_range(-6.0..0.0));
        let gamma = rng.random_range(0.0..=1.0);
        let lr_min = if rng.random_bool(0.2) { 0.0 } else { 10f64.powf(rng.random_range(-9.0..-3.0)) };
        let mut s = LrSchedule { lr_current: lr0, gamma, lr_min, per_step_decay: 1.0 };
        let mut oracle = lr0;
        for _ in 0..50 {
            s = s.lr_adjust();
            let next = oracle * gamma;
            oracle = if next < lr_min { lr_min } else { next };
            if s.lr_current.to_bits() != oracle.to_bits() {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches in 100 x 50 adjustments"))
}

// 3
fn agem_feasibility() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut infeasible, mut moved, mut projected) = (0, 0, 0);
    for dim in [2, 10, 1000] {
        for _ in 0..1000 {
            let mut v = || GradientVector { values: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let (g, r) = (v(), v());
            let p = agem_project(&g, &r).unwrap();
            if p != g {
                projected += 1;
            }
            let dot: f64 = p.values.iter().zip(&r.values).map(|(a, b)| a * b).sum();
            let norm = |x: &GradientVector| x.values.iter().map(|a| a * a).sum::<f64>().sqrt();
            if dot < -1e-9 * norm(&p) * norm(&r) {
                infeasible += 1;
            }
            if agem_project(&p, &r).unwrap() != p {
                moved += 1;
            }
        }
    }
    check(
        infeasible == 0 && moved == 0,
        format!("3000 pairs ({projected} projected): {infeasible} infeasible, {moved} changed by re-projection"),
    )
}

// 4
fn ewc_penalty() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let config = ModelConfig {
        input_dim: 4,
        hidden_dims: vec![5],
        num_labels: 3,
        activation: Activation::Tanh,
        head_kind: HeadKind::SequenceClassification,
        init_seed: 3,
    };
    let anchor = init_model(&config).unwrap();
    let data: Vec<Example> = (0..30)
        .map(|i| Example::sequence("a", (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), i % 3))
        .collect();
    let mut snapshots = vec![ewc_fisher(&anchor, &config, &data, 20, "a", &mut rng).unwrap()];
    snapshots.push(FisherSnapshot {
        fisher_diag: (0..anchor.len()).map(|_| rng.random_range(0.0..2.0)).collect(),
        anchor: ParameterVector {
            values: anchor.values.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect(),
            layout: anchor.layout.clone(),
        },
        task_id: "b".into(),
    });
    let mut theta = anchor.clone();
    for v in &mut theta.values {
        *v += rng.random_range(-1.0..1.0);
    }
    let lambda = 7.5;
    let (value, g) = ewc_penalty_grad(&theta, &snapshots, lambda).unwrap();
    // independent penalty oracle
    let penalty = |t: &ParameterVector| -> f64 {
        let mut total = 0.0;
        for s in &snapshots {
            for i in 0..t.len() {
                let d = t.values[i] - s.anchor.values[i];
                total += lambda / 2.0 * s.fisher_diag[i] * d * d;
            }
        }
        total
    };
    let h = 1e-4;
    let mut worst = (value - penalty(&theta)).abs() / value.abs().max(1e-12);
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p.values[i] += h;
        let mut m = theta.clone();
        m.values[i] -= h;
        let fd = (penalty(&p) - penalty(&m)) / (2.0 * h);
        if fd != 0.0 || g.values[i] != 0.0 {
            worst = worst.max((fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-8));
        }
    }
    let (p0, g0) = ewc_penalty_grad(&theta, &snapshots, 0.0).unwrap();
    let zero_lambda = p0 == 0.0 && g0.values.iter().all(|v| *v == 0.0);
    let (p1, g1) = ewc_penalty_grad(&anchor, &snapshots[..1], lambda).unwrap();
    let at_anchor = p1 == 0.0 && g1.values.iter().all(|v| *v == 0.0);
    check(
        worst < 1e-6 && zero_lambda && at_anchor,
        format!("max relative error {worst:.2e}; lambda=0 zero: {zero_lambda}; theta=anchor zero: {at_anchor}"),
    )
}

fn matrix(rows: &[Vec<f64>]) -> ScoreMatrix {
    let mut m = ScoreMatrix::new((0..rows.len()).map(|i| format!("t{i}")).collect());
    for (k, r) in rows.iter().enumerate() {
        m.set_row(k, r.clone()).unwrap();
    }
    m
}

// 5
fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(2..=20);
        let r: Vec<Vec<f64>> = (0..t).map(|_| (0..t).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
        let m = matrix(&r);
        let mut forward = 0.0;
        for i in 0..t - 1 {
            let mut avg = 0.0;
            for j in i + 1..t {
                avg += r[i][j];
            }
            forward += avg / (t - 1 - i) as f64;
        }
        forward /= (t - 1) as f64;
        let mut backward = 0.0;
        for i in 0..t - 1 {
            backward += r[t - 1][i] - r[i][i];
        }
        backward /= (t - 1) as f64;
        worst = worst
            .max((cft(&m).unwrap() - forward).abs())
            .max((cbt(&m, CbtRow::Final).unwrap() - backward).abs());
    }
    let worked = [
        cft(&matrix(&[vec![0.0, 80.0], vec![0.0, 0.0]])).unwrap() == 80.0,
        cft(&matrix(&[vec![0.0, 60.0, 80.0], vec![0.0, 0.0, 90.0], vec![0.0; 3]])).unwrap() == 80.0,
        cft(&matrix(&[vec![42.0; 3], vec![42.0; 3], vec![42.0; 3]])).unwrap() == 42.0,
        cbt(&matrix(&[vec![90.0, 1.0, 1.0], vec![1.0, 85.0, 1.0], vec![70.0, 80.0, 1.0]]), CbtRow::Final).unwrap()
            == -12.5,
        cbt(&matrix(&[vec![90.0, 1.0, 1.0], vec![1.0, 85.0, 1.0], vec![90.0, 85.0, 1.0]]), CbtRow::Final).unwrap()
            == 0.0,
    ];
    let exact = worked.iter().filter(|w| **w).count();
    check(
        worst < 1e-12 && exact == worked.len(),
        format!("max deviation {worst:.1e} on 1000 matrices; worked examples exact {exact}/{}", worked.len()),
    )
}

struct Runs {
    vanilla: RunResult,
    multi: RunResult,
    base_secs: f64,
}

// 6
fn forgetting(runs: &Runs) -> Check {
    let (v, m) = (&runs.vanilla, &runs.multi);
    let gap = m.final_average.mean - v.final_average.mean;
    check(
        cbt_mean(v) < -5.0 && gap >= 3.0 && runs.base_secs < 300.0,
        format!(
            "vanilla CBT {:.2}; multi final {:.2} vs vanilla {:.2} (gap {gap:.2}); {:.1}s",
            cbt_mean(v),
            m.final_average.mean,
            v.final_average.mean,
            runs.base_secs
        ),
    )
}

// 7
fn cl_methods_help(runs: &Runs) -> Check {
    let v = cbt_mean(&runs.vanilla);
    let replay = cbt_mean(&run(&["strategy.kind=replay"]));
    let agem = cbt_mean(&run(&["strategy.kind=agem"]));
    check(
        replay > v && agem > v,
        format!("CBT vanilla {v:.2}, replay {replay:.2}, agem {agem:.2}"),
    )
}

// 8
fn lr_adjust_effect() -> Check {
    let mut improved = 0;
    let mut parts = Vec::new();
    for kind in ["vanilla", "replay", "agem", "ewc"] {
        let k = format!("strategy.kind={kind}");
        let off = cbt_mean(&run(&[&k, "strategy.use_lr_adjust=false"]));
        let on = cbt_mean(&run(&[&k, "strategy.use_lr_adjust=true"]));
        if on > off {
            improved += 1;
        }
        parts.push(format!("{kind} {off:.2} -> {on:.2}"));
    }
    check(improved >= 3, format!("{improved}/4 improved: {}", parts.join(", ")))
}

// 9
fn warm_start_shape(runs: &Runs) -> Check {
    let w = run(&["warm_start_k=5"]);
    let warm_row = w.curve[0];
    let next = w.curve[1];
    let final_w = w.curve.last().unwrap().mean;
    let final_v = runs.vanilla.final_average.mean;
    let drop = warm_row.mean - next.mean;
    check(
        warm_row.stage == 5 && next.stage == 6 && final_w >= final_v && drop >= 1.0,
        format!(
            "final {final_w:.2} vs vanilla {final_v:.2}; stage 5 -> 6 average {:.2} -> {:.2} (drop {drop:.2})",
            warm_row.mean, next.mean
        ),
    )
}

fn same_rows(a: &RunResult, b: &RunResult) -> bool {
    a.seeds.len() == b.seeds.len()
        && a.seeds.iter().zip(&b.seeds).all(|(x, y)| {
            x.seed == y.seed
                && x.task_order == y.task_order
                && (0..x.matrix.num_tasks()).all(|k| match (x.matrix.row(k), y.matrix.row(k)) {
                    (None, None) => true,
                    (Some(p), Some(q)) => p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits()),
                    _ => false,
                })
        })
}

// 10
fn degenerate_equivalences(runs: &Runs) -> Check {
    let replay = run(&[
        "strategy.kind=replay",
        "strategy.store_memory_prob=1",
        "strategy.run_per_step=1000000000",
    ]);
    let ewc = run(&["strategy.kind=ewc", "strategy.lambda=0"]);
    let agem = run(&["strategy.kind=agem", "strategy.store_memory_prob=0"]);
    let r = [same_rows(&runs.vanilla, &replay), same_rows(&runs.vanilla, &ewc), same_rows(&runs.vanilla, &agem)];
    check(
        r.iter().all(|x| *x),
        format!("bitwise equal to vanilla: replay {}, ewc {}, agem {}", r[0], r[1], r[2]),
    )
}

// 11
fn memory_balance() -> Check {
    let mut worst = (10usize, 10usize);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feed: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        feed.shuffle(&mut rng);
        let mut m = EpisodicMemory::new(Some(100), 1.0);
        for (i, y) in feed.into_iter().enumerate() {
            m.observe(Example::sequence("t", vec![i as f64], y), &mut rng);
        }
        let mut counts = [0usize; 10];
        for e in m.entries() {
            counts[e.example.gold()[0]] += 1;
        }
        worst.0 = worst.0.min(*counts.iter().min().unwrap());
        worst.1 = worst.1.max(*counts.iter().max().unwrap());
    }
    check(
        worst.0 >= 9 && worst.1 <= 11,
        format!("per-label counts within [{}, {}] over 20 shuffled feeds", worst.0, worst.1),
    )
}

// 12
fn round_trip() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let set = ["strategy.kind=replay".to_string()];
    cmd_run(&config_path(), &set, Some(&a)).unwrap();
    cmd_run(&config_path(), &set, Some(&b)).unwrap();
    let stored: RunResult = serde_json::from_str(&fs::read_to_string(a.join("result.json")).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    let (mut cfts, mut cbts) = (Vec::new(), Vec::new());
    for s in &stored.seeds {
        let m = cmd_metrics(&a.join(format!("R_seed{}.csv", s.seed)), stored.config.cbt_row).unwrap();
        let (f, c) = (m["cft"].as_f64().unwrap(), m["cbt"].as_f64().unwrap());
        worst = worst
            .max((f - s.report.cft.unwrap()).abs())
            .max((c - s.report.cbt.unwrap()).abs());
        cfts.push(f);
        cbts.push(c);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    worst = worst
        .max((mean(&cfts) - stored.cft.unwrap().mean).abs())
        .max((mean(&cbts) - stored.cbt.unwrap().mean).abs());
    let identical = fs::read(a.join("result.json")).unwrap() == fs::read(b.join("result.json")).unwrap();
    check(
        worst < 1e-9 && identical,
        format!("max CFT/CBT deviation {worst:.1e}; result.json byte-identical: {identical}"),
    )
}

fn main() {
    // keep assertion noise out of the report
    panic::set_hook(Box::new(|info| eprintln!("  panic: {info}")));
    let started = Instant::now();
    let shared = panic::catch_unwind(|| {
        let t = Instant::now();
        let vanilla = run(&[]);
        let multi = run(&["method=multi"]);
        Runs { vanilla, multi, base_secs: t.elapsed().as_secs_f64() }
    })
    .ok();

    let plain: Vec<(&str, fn() -> Check)> = vec![
        ("gradient correctness", gradient_correctness),
        ("LR ADJUST exactness", lr_adjust_exactness),
        ("A-GEM feasibility and idempotence", agem_feasibility),
        ("EWC penalty", ewc_penalty),
        ("metric oracle", metric_oracle),
    ];
    let on_runs: Vec<(&str, fn(&Runs) -> Check)> = vec![
        ("forgetting reproduction", forgetting),
        ("CL-method ordering", cl_methods_help),
        ("LR ADJUST effect", |_| lr_adjust_effect()),
        ("warm-start shape", warm_start_shape),
        ("degenerate equivalences", degenerate_equivalences),
    ];
    let tail: Vec<(&str, fn() -> Check)> = vec![("replay memory balance", memory_balance), ("round trip", round_trip)];

    let mut results: Vec<(String, Check, Duration)> = Vec::new();
    let mut record = |name: &str, f: &dyn Fn() -> Check| {
        let t = Instant::now();
        let c = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| check(false, "panicked"));
        results.push((name.to_string(), c, t.elapsed()));
    };
    for (name, f) in &plain {
        record(name, &|| f());
    }
    for (name, f) in &on_runs {
        match &shared {
            Some(runs) => record(name, &|| f(runs)),
            None => record(name, &|| check(false, "baseline runs failed")),
        }
    }
    for (name, f) in &tail {
        record(name, &|| f());
    }

    let mut failed = 0;
    for (i, (name, c, d)) in results.iter().enumerate() {
        if !c.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.2}s]",
            if c.pass { "PASS" } else { "FAIL" },
            i + 1,
            c.detail,
            d.as_secs_f64()
        );
    }
    println!(
        "{}/{} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
