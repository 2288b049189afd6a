use mlcl_core::harness::aggregate;
use mlcl_core::metrics::{micro_f1, span_precision_recall};
use mlcl_core::model::{forward, init_model, loss_and_grad};
use mlcl_core::strategies::{agem_project, ewc_penalty_grad, EpisodicMemory, FisherSnapshot};
use mlcl_core::{
    cbt, cft, Activation, CbtRow, Example, GradientVector, HeadKind, LabelVocab, LrSchedule, ModelConfig,
    ParameterVector, ScoreMatrix,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64, tokens: bool, relu: bool) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_labels = if tokens { 5 } else { rng.random_range(2..=4) };
    ModelConfig {
        input_dim: rng.random_range(1..=4),
        hidden_dims: match rng.random_range(0..3) {
            0 => vec![],
            1 => vec![rng.random_range(1..=5)],
            _ => vec![3, 2],
        },
        num_labels,
        activation: if relu { Activation::Relu } else { Activation::Tanh },
        head_kind: if tokens { HeadKind::TokenLabeling } else { HeadKind::SequenceClassification },
        init_seed: seed,
    }
}

fn random_batch(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let n = rng.random_range(1..=4);
    let feat = |rng: &mut ChaCha8Rng| (0..config.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    (0..n)
        .map(|_| match config.head_kind {
            HeadKind::SequenceClassification => {
                let x = feat(rng);
                Example::sequence("t", x, rng.random_range(0..config.num_labels))
            }
            HeadKind::TokenLabeling => {
                let len = rng.random_range(1..=4);
                let xs = (0..len).map(|_| feat(rng)).collect();
                let ys = (0..len).map(|_| rng.random_range(0..config.num_labels)).collect();
                Example::tokens("t", xs, ys)
            }
        })
        .collect()
}

fn perturbed(theta: &ParameterVector, rng: &mut ChaCha8Rng) -> ParameterVector {
    let mut t = theta.clone();
    for v in &mut t.values {
        *v += rng.random_range(-0.3..0.3);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..10_000, tokens: bool) {
        let config = small_model(seed, tokens, false);
        prop_assume!(config.num_parameters() <= 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let theta = perturbed(&init_model(&config).unwrap(), &mut rng);
        let batch = random_batch(&config, &mut rng);
        let (_, g) = loss_and_grad(&theta, &config, &batch).unwrap();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus.values[i] += h;
            let mut minus = theta.clone();
            minus.values[i] -= h;
            let fd = (loss_and_grad(&plus, &config, &batch).unwrap().0
                - loss_and_grad(&minus, &config, &batch).unwrap().0)
                / (2.0 * h);
            let rel = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", g.values[i]);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, tokens: bool, relu: bool) {
        let config = small_model(seed, tokens, relu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = perturbed(&init_model(&config).unwrap(), &mut rng);
        for ex in random_batch(&config, &mut rng) {
            for row in forward(&theta, &config, &ex).unwrap() {
                prop_assert_eq!(row.len(), config.num_labels);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn agem_projection_is_the_nearest_feasible_point(
        g in prop::collection::vec(-3.0f64..3.0, 3),
        r in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let g = GradientVector { values: g };
        let r = GradientVector { values: r };
        let p = agem_project(&g, &r).unwrap();
        prop_assert!(p.dot(&r) >= -1e-9 * p.norm_sq().sqrt() * r.norm_sq().sqrt());
        prop_assert_eq!(agem_project(&p, &r).unwrap(), p.clone());
        // brute force over a grid of feasible candidates
        let dist = |c: &[f64]| c.iter().zip(&g.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = dist(&p.values);
        let steps: Vec<f64> = (-12..=12).map(|k| k as f64 * 0.5).collect();
        for &x in &steps {
            for &y in &steps {
                for &z in &steps {
                    let c = [x, y, z];
                    let d: f64 = c.iter().zip(&r.values).map(|(a, b)| a * b).sum();
                    if d >= 0.0 {
                        prop_assert!(dist(&c) >= best - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn ewc_gradient_matches_finite_differences(seed in 0u64..10_000, n in 1usize..20, snaps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vec = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let theta = ParameterVector { values: vec(&mut rng, -2.0, 2.0), layout: vec![] };
        let snapshots: Vec<FisherSnapshot> = (0..snaps)
            .map(|s| FisherSnapshot {
                fisher_diag: vec(&mut rng, 0.0, 3.0),
                anchor: ParameterVector { values: vec(&mut rng, -2.0, 2.0), layout: vec![] },
                task_id: format!("t{s}"),
            })
            .collect();
        let lambda = rng.random_range(0.01..50.0);
        let (_, g) = ewc_penalty_grad(&theta, &snapshots, lambda).unwrap();
        let h = 1e-4;
        for i in 0..n {
            let mut plus = theta.clone();
            plus.values[i] += h;
            let mut minus = theta.clone();
            minus.values[i] -= h;
            let fd = (ewc_penalty_grad(&plus, &snapshots, lambda).unwrap().0
                - ewc_penalty_grad(&minus, &snapshots, lambda).unwrap().0)
                / (2.0 * h);
            let rel = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-8);
            prop_assert!(rel < 1e-6, "{fd} vs {}", g.values[i]);
        }
    }

    #[test]
    fn lr_adjust_follows_the_recurrence(
        lr0 in 1e-6f64..1.0,
        gamma in 0.01f64..=1.0,
        lr_min in 0.0f64..1e-3,
    ) {
        let mut s = LrSchedule { lr_current: lr0, gamma, lr_min, per_step_decay: 1.0 };
        let mut oracle = lr0;
        for _ in 0..50 {
            s = s.lr_adjust();
            oracle = if oracle * gamma > lr_min { oracle * gamma } else { lr_min };
            prop_assert_eq!(s.lr_current, oracle);
        }
    }

    #[test]
    fn memory_stays_balanced(labels in 2usize..12, per_label in 5usize..40, cap in 1usize..60, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feed: Vec<usize> = (0..labels * per_label).map(|i| i % labels).collect();
        rand::seq::SliceRandom::shuffle(feed.as_mut_slice(), &mut rng);
        let mut m = EpisodicMemory::new(Some(cap), 1.0);
        for (i, y) in feed.into_iter().enumerate() {
            m.observe(Example::sequence("t", vec![i as f64], y), &mut rng);
        }
        prop_assert_eq!(m.len(), cap.min(labels * per_label));
        let counts: Vec<usize> = m.counts().values().copied().collect();
        if cap >= labels {
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "{:?}", counts);
        } else {
            prop_assert!(counts.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn transfer_metrics_match_double_loop(t in 2usize..12, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<Vec<f64>> = (0..t).map(|_| (0..t).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
        let m = matrix(&r);
        let mut fwd = 0.0;
        for i in 0..t - 1 {
            let mut s = 0.0;
            for j in i + 1..t {
                s += r[i][j];
            }
            fwd += s / (t - i - 1) as f64;
        }
        fwd /= (t - 1) as f64;
        let mut bwd = 0.0;
        for i in 0..t - 1 {
            bwd += r[t - 1][i] - r[i][i];
        }
        bwd /= (t - 1) as f64;
        prop_assert!((cft(&m).unwrap() - fwd).abs() < 1e-12);
        prop_assert!((cbt(&m, CbtRow::Final).unwrap() - bwd).abs() < 1e-12);
    }

    #[test]
    fn cbt_flips_sign_when_final_row_and_diagonal_swap(t in 2usize..10, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r: Vec<Vec<f64>> = (0..t).map(|_| (0..t).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
        let before = cbt(&matrix(&r), CbtRow::Final).unwrap();
        for i in 0..t - 1 {
            let d = r[i][i];
            r[i][i] = r[t - 1][i];
            r[t - 1][i] = d;
        }
        let after = cbt(&matrix(&r), CbtRow::Final).unwrap();
        prop_assert!((before + after).abs() < 1e-9);
    }

    #[test]
    fn micro_f1_is_accuracy(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let acc = 100.0 * pairs.iter().filter(|(a, b)| a == b).count() as f64 / pairs.len() as f64;
        prop_assert!((micro_f1(&p, &g).unwrap() - acc).abs() < 1e-9);
    }

    #[test]
    fn span_scores_swap_under_role_exchange(
        seqs in prop::collection::vec(prop::collection::vec((0usize..5, 0usize..5), 1..12), 1..6),
    ) {
        let vocab = LabelVocab::bio(5).unwrap();
        let a: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().map(|x| x.0).collect()).collect();
        let b: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().map(|x| x.1).collect()).collect();
        let (p1, r1) = span_precision_recall(&a, &b, &vocab).unwrap();
        let (p2, r2) = span_precision_recall(&b, &a, &vocab).unwrap();
        prop_assert_eq!(p1, r2);
        prop_assert_eq!(r1, p2);
    }

    #[test]
    fn aggregate_matches_population_formula(xs in prop::collection::vec(-100.0f64..100.0, 1..30)) {
        let s = aggregate(&xs).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((s.mean - mean).abs() < 1e-9);
        prop_assert!((s.std - var.sqrt()).abs() < 1e-9);
    }
}

fn matrix(r: &[Vec<f64>]) -> ScoreMatrix {
    let mut m = ScoreMatrix::new((0..r.len()).map(|i| format!("t{i}")).collect());
    for (k, row) in r.iter().enumerate() {
        m.set_row(k, row.clone()).unwrap();
    }
    m
}
