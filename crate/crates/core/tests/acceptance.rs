//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p ltlab-core --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use ltlab::data::{bayes_posterior, GaussianMixtureSpec};
use ltlab::experiment::{
    execute, run_experiment, DecoupleConfig, DecoupleMethod, ExperimentConfig,
};
use ltlab::losses::{
    balanced_sigmoid_offsets, balanced_softmax_probs, posterior_balanced_to_train, softmax_probs,
    ClassCounts, LossKind, PosteriorVector,
};
use ltlab::margins::{bound_objective, optimal_margins};
use ltlab::numerics::Rng;
use ltlab::training::ModelParams;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn random_posterior(rng: &mut Rng, k: usize) -> Vec<f64> {
    // Log-uniform entries give posteriors spanning several orders of magnitude.
    normalize(
        &(0..k)
            .map(|_| (-8.0 * rng.uniform()).exp())
            .collect::<Vec<_>>(),
    )
}

fn equal_counts_reduction() -> Outcome {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let k = [2, 5, 50][i % 3];
        let n = 1 + rng.below(10_000) as u64;
        let counts = ClassCounts::uniform(k, n).unwrap();
        let logits = random_logits(&mut rng, k, 10.0);
        let tau = rng.uniform_range(0.1, 2.0);
        let bs = balanced_softmax_probs(&logits, &counts, tau).unwrap();
        let sm = softmax_probs(&logits).unwrap();
        worst = worst.max(max_abs_diff(bs.as_slice(), sm.as_slice()));
    }
    outcome(
        worst <= 1e-12,
        format!("max |diff| {worst:.2e} (tol 1e-12)"),
    )
}

fn logit_shift_equivalence() -> Outcome {
    let mut rng = Rng::new(102);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let k = [2, 5, 50][i % 3];
        let counts = random_counts(&mut rng, k, 10_000);
        let logits = random_logits(&mut rng, k, 10.0);
        let tau = rng.uniform_range(0.1, 2.0);
        let shifted: Vec<f64> = logits
            .iter()
            .zip(counts.as_slice())
            .map(|(z, &n)| z + tau * (n as f64).ln())
            .collect();
        let bs = balanced_softmax_probs(&logits, &counts, tau).unwrap();
        let sm = softmax_probs(&shifted).unwrap();
        worst = worst.max(max_abs_diff(bs.as_slice(), sm.as_slice()));
    }
    outcome(
        worst <= 1e-12,
        format!("max |diff| {worst:.2e} (tol 1e-12)"),
    )
}

fn canonical_link_round_trip() -> Outcome {
    let mut rng = Rng::new(103);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let k = [2, 5, 50][i % 3];
        let phi = random_posterior(&mut rng, k);
        let counts = random_counts(&mut rng, k, 10_000);
        let eta: Vec<f64> = phi.iter().map(|p| (p / phi[k - 1]).ln()).collect();
        let via_loss = balanced_softmax_probs(&eta, &counts, 1.0).unwrap();
        let via_conv =
            posterior_balanced_to_train(&PosteriorVector::new(phi).unwrap(), &counts).unwrap();
        worst = worst.max(max_abs_diff(via_loss.as_slice(), via_conv.as_slice()));
    }
    outcome(
        worst <= 1e-11,
        format!("max |diff| {worst:.2e} (tol 1e-11)"),
    )
}

fn bayes_consistency() -> Outcome {
    let mut rng = Rng::new(104);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let k = 2 + i % 9;
        let dim = 1 + i % 4;
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| 2.0 * rng.normal()).collect())
            .collect();
        let variances: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.uniform_range(0.2, 3.0)).collect())
            .collect();
        let spec = GaussianMixtureSpec {
            means,
            covariance: ltlab::data::Covariance::PerClass(variances),
        };
        let counts = random_counts(&mut rng, k, 5000);
        let x: Vec<f64> = (0..dim).map(|_| 3.0 * rng.normal()).collect();
        let uniform = vec![1.0 / k as f64; k];
        let prior = normalize(
            &counts
                .as_slice()
                .iter()
                .map(|&n| n as f64)
                .collect::<Vec<_>>(),
        );
        let converted =
            posterior_balanced_to_train(&bayes_posterior(&spec, &uniform, &x).unwrap(), &counts)
                .unwrap();
        let direct = bayes_posterior(&spec, &prior, &x).unwrap();
        worst = worst.max(max_abs_diff(converted.as_slice(), direct.as_slice()));
    }
    outcome(
        worst <= 1e-10,
        format!("max |diff| {worst:.2e} (tol 1e-10)"),
    )
}

fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-5;
    let mut rng = Rng::new(105);
    let mut failures = Vec::new();
    let mut worst_loss: f64 = 0.0;
    let mut worst_model: f64 = 0.0;
    for kind in LossKind::ALL {
        for trial in 0..100 {
            let k = [2, 3, 5, 10][trial % 4];
            let counts = random_counts(&mut rng, k, 1000);
            let loss = loss_spec(kind, &mut rng, k).prepare(&counts).unwrap();
            let logits = random_logits(&mut rng, k, 4.0);
            let y = rng.below(k);
            let numeric = central_diff(&logits, |z| loss.loss(z, y).unwrap());
            let err = max_rel_err(&loss.grad(&logits, y).unwrap(), &numeric);
            worst_loss = worst_loss.max(err);
            if err > TOL {
                failures.push(format!("{kind} loss"));
            }
        }
        for hidden in [None, Some(5)] {
            for _ in 0..100 {
                let (dim, k, n) = (3, 4, 5);
                let counts = random_counts(&mut rng, k, 1000);
                let loss = loss_spec(kind, &mut rng, k).prepare(&counts).unwrap();
                let mut params = ModelParams::init(dim, hidden, k, &mut rng);
                for l in &mut params.layers {
                    l.bias.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
                }
                if hidden.is_some() && rng.below(2) == 1 {
                    params.lws_scales = Some((0..k).map(|_| rng.uniform_range(0.5, 2.0)).collect());
                }
                let x = random_matrix(&mut rng, n, dim);
                let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
                let err = model_grad_check(&params, &x, &labels, &loss);
                worst_model = worst_model.max(err);
                if err > TOL {
                    failures.push(format!("{kind} model hidden={hidden:?}"));
                }
            }
        }
    }
    failures.dedup();
    outcome(
        failures.is_empty(),
        format!(
            "max rel err losses {worst_loss:.2e}, models {worst_model:.2e} (tol 1e-5){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    )
}

/// Simplex grid `{beta * i / steps : sum i = steps, i_j >= 1}` minimum of the
/// bound objective, written independently of the library's grid search.
fn grid_minimum(counts: &ClassCounts, beta: f64, steps: usize) -> f64 {
    let h = beta / steps as f64;
    let n: Vec<f64> = counts.as_slice().iter().map(|&c| c as f64).collect();
    let obj = |g: &[f64]| -> f64 { g.iter().zip(&n).map(|(g, n)| 4.0 / g / n.sqrt()).sum() };
    let mut best = f64::INFINITY;
    match n.len() {
        2 => {
            for i in 1..steps {
                best = best.min(obj(&[i as f64 * h, (steps - i) as f64 * h]));
            }
        }
        3 => {
            for i in 1..steps {
                for j in 1..steps - i {
                    let l = steps - i - j;
                    best = best.min(obj(&[i as f64 * h, j as f64 * h, l as f64 * h]));
                }
            }
        }
        _ => unreachable!(),
    }
    best
}

/// Objective at the grid point nearest `gammas` (largest-remainder rounding).
fn projected_objective(gammas: &[f64], counts: &ClassCounts, beta: f64, steps: usize) -> f64 {
    let scaled: Vec<f64> = gammas.iter().map(|g| g / beta * steps as f64).collect();
    let mut units: Vec<usize> = scaled.iter().map(|s| (s.floor() as usize).max(1)).collect();
    while units.iter().sum::<usize>() < steps {
        let j = (0..units.len())
            .max_by(|&a, &b| {
                (scaled[a] - units[a] as f64)
                    .partial_cmp(&(scaled[b] - units[b] as f64))
                    .unwrap()
            })
            .unwrap();
        units[j] += 1;
    }
    let g: Vec<f64> = units
        .iter()
        .map(|&u| u as f64 * beta / steps as f64)
        .collect();
    bound_objective(&g, counts, 1.0).unwrap()
}

fn margin_optimality() -> Outcome {
    const STEPS: usize = 1000;
    let mut rng = Rng::new(106);
    let mut worst_gap: f64 = 0.0;
    let mut ok = true;
    for k in [2, 3] {
        for _ in 0..20 {
            let counts = random_counts(&mut rng, k, 5000);
            let beta = rng.uniform_range(0.5, 2.0);
            let g = optimal_margins(&counts, beta).unwrap();
            let star = bound_objective(&g, &counts, 1.0).unwrap();
            let grid = grid_minimum(&counts, beta, STEPS);
            let projected = projected_objective(&g, &counts, beta, STEPS);
            // gamma* must beat every grid point, and the grid cannot do
            // better than the grid point next to gamma*.
            ok &= star <= grid * (1.0 + 1e-12);
            ok &= grid <= projected * (1.0 + 1e-12);
            ok &= (g.iter().sum::<f64>() - beta).abs() <= 1e-12;
            worst_gap = worst_gap.max((grid - star) / star);
        }
    }
    outcome(
        ok,
        format!("40 instances, grid 1e-3, max relative grid gap {worst_gap:.2e}"),
    )
}

fn sigmoid_neutrality() -> Outcome {
    let mut rng = Rng::new(107);
    let mut ok = true;
    for k in 2..=50 {
        let n = 1 + rng.below(100_000) as u64;
        let offsets = balanced_sigmoid_offsets(&ClassCounts::uniform(k, n).unwrap()).unwrap();
        ok &= offsets.iter().all(|&o| o == 0.0);
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let counts = random_counts(&mut rng, 2, 1_000_000);
        let o = balanced_sigmoid_offsets(&counts).unwrap();
        worst = worst.max((o[0] + o[1]).abs());
    }
    ok &= worst <= 1e-12;
    outcome(
        ok,
        format!("balanced offsets exactly 0 for k=2..50; k=2 max |o1+o2| {worst:.2e}"),
    )
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct BenchRun {
    balanced_acc: f64,
    uniform_kl: f64,
    bayes: f64,
}

fn bench(loss: LossKind, imbalance_factor: f64, seed: u64) -> BenchRun {
    let m = execute(&ExperimentConfig::synthetic_benchmark(
        loss,
        imbalance_factor,
        seed,
    ))
    .unwrap()
    .metrics;
    BenchRun {
        balanced_acc: m.report.balanced_accuracy,
        uniform_kl: m.report.uniform_kl,
        bayes: m.bayes_balanced_accuracy.unwrap(),
    }
}

fn benchmark(runs: &[(BenchRun, BenchRun)]) -> Outcome {
    let sm: Vec<f64> = runs.iter().map(|r| r.0.balanced_acc).collect();
    let bs: Vec<f64> = runs.iter().map(|r| r.1.balanced_acc).collect();
    let bayes: Vec<f64> = runs.iter().map(|r| r.1.bayes).collect();
    let gain = 100.0 * (mean(&bs) - mean(&sm));
    let to_bayes = 100.0 * (mean(&bayes) - mean(&bs));
    outcome(
        gain >= 3.0 && to_bayes <= 5.0,
        format!(
            "balanced acc softmax {:.2}%, balanced softmax {:.2}%, Bayes {:.2}%: gain {gain:.2} pts (need >= 3), gap to Bayes {to_bayes:.2} pts (need <= 5)",
            100.0 * mean(&sm),
            100.0 * mean(&bs),
            100.0 * mean(&bayes)
        ),
    )
}

fn marginal_stability(at10: &[(BenchRun, BenchRun)], at100: &[(BenchRun, BenchRun)]) -> Outcome {
    let gaps = |runs: &[(BenchRun, BenchRun)]| -> Vec<f64> {
        runs.iter()
            .map(|(s, b)| s.uniform_kl - b.uniform_kl)
            .collect()
    };
    let (g10, g100) = (gaps(at10), gaps(at100));
    let every_seed = g10.iter().chain(&g100).all(|g| *g > 0.0);
    let grows = mean(&g100) > mean(&g10);
    outcome(
        every_seed && grows,
        format!(
            "KL(softmax) - KL(balanced softmax): mean {:.4} at IF=10, {:.4} at IF=100; positive for every seed: {every_seed}",
            mean(&g10),
            mean(&g100)
        ),
    )
}

fn mlp_config(seed: u64, method: Option<DecoupleMethod>) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic_benchmark(LossKind::SoftmaxCe, 100.0, seed);
    c.train.hidden_dim = Some(32);
    c.decouple = method.map(|method| DecoupleConfig {
        method,
        train: None,
        loss: None,
        allow_linear: false,
    });
    c
}

fn decoupling() -> Outcome {
    let mut crt_gain = Vec::new();
    let mut lws_gain = Vec::new();
    let mut frozen = true;
    for seed in SEEDS {
        let base = execute(&mlp_config(seed, None)).unwrap();
        let crt = execute(&mlp_config(seed, Some(DecoupleMethod::Crt))).unwrap();
        let lws = execute(&mlp_config(seed, Some(DecoupleMethod::Lws))).unwrap();
        let b = base.metrics.report.balanced_accuracy;
        crt_gain.push(crt.metrics.report.balanced_accuracy - b);
        lws_gain.push(lws.metrics.report.balanced_accuracy - b);
        frozen &= crt.stage1 == base.params && lws.stage1 == base.params;
        frozen &= crt.params.layers[..1] == base.params.layers[..1];
        frozen &= lws.params.layers == base.params.layers;
    }
    let (c, l) = (100.0 * mean(&crt_gain), 100.0 * mean(&lws_gain));
    outcome(
        c > 0.0 && l > 0.0 && frozen,
        format!("mean balanced-acc gain over stage 1: cRT {c:+.2} pts, LWS {l:+.2} pts; frozen params bitwise equal: {frozen}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut configs = [
        ExperimentConfig::synthetic_benchmark(LossKind::BalancedSoftmax, 100.0, 7),
        mlp_config(7, Some(DecoupleMethod::Lws)),
    ];
    configs[1].train.epochs = 4;
    let mut identical = true;
    let mut files = 0;
    for (i, config) in configs.iter().enumerate() {
        let a = dir.path().join(format!("{i}a"));
        let b = dir.path().join(format!("{i}b"));
        run_experiment(config, &a).unwrap();
        run_experiment(config, &b).unwrap();
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            identical &=
                std::fs::read(a.join(&name)).unwrap() == std::fs::read(b.join(&name)).unwrap();
            files += 1;
        }
    }
    outcome(
        identical,
        format!("{files} artifact files compared byte for byte"),
    )
}

fn main() -> ExitCode {
    type Check = Box<dyn Fn() -> Outcome>;
    let bench_runs = |imb: f64| -> Vec<(BenchRun, BenchRun)> {
        SEEDS
            .iter()
            .map(|&s| {
                (
                    bench(LossKind::SoftmaxCe, imb, s),
                    bench(LossKind::BalancedSoftmax, imb, s),
                )
            })
            .collect()
    };
    let checks: Vec<(u32, Duration, Check)> = vec![
        (1, Duration::from_secs(1), Box::new(equal_counts_reduction)),
        (2, Duration::from_secs(1), Box::new(logit_shift_equivalence)),
        (
            3,
            Duration::from_secs(1),
            Box::new(canonical_link_round_trip),
        ),
        (4, Duration::from_secs(5), Box::new(bayes_consistency)),
        (5, Duration::from_secs(30), Box::new(gradient_suite)),
        (6, Duration::from_secs(60), Box::new(margin_optimality)),
        (7, Duration::from_secs(1), Box::new(sigmoid_neutrality)),
        (
            8,
            Duration::from_secs(120),
            Box::new(move || benchmark(&bench_runs(100.0))),
        ),
        (
            9,
            Duration::from_secs(120),
            Box::new(move || marginal_stability(&bench_runs(10.0), &bench_runs(100.0))),
        ),
        (10, Duration::from_secs(120), Box::new(decoupling)),
        (11, Duration::from_secs(120), Box::new(determinism)),
    ];
    let mut failed = 0;
    for (id, budget, check) in checks {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id}: {} {} [{:.2}s{}]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            if in_time {
                String::new()
            } else {
                format!(", over the {}s budget", budget.as_secs())
            }
        );
    }
    if failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
