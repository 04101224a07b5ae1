//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero on failure.
//!
//! `QRSTREAM_ACCEPTANCE=1,3,9` runs a subset.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use qrstream::inference::critical::{simulate_limit_quantiles, CriticalValues, TABLE_PROBS, TABLE_VALUES};
use qrstream::inference::t_statistic;
use qrstream::init::rule_of_thumb_gamma0;
use qrstream::mc::{coverage_experiment, dgp_names, generate_dgp, HomogeneityDesign, McDesign, Noise};
use qrstream::oracle::{batch_random_scaling, exact_qr};
use qrstream::pipeline::{fit, FitConfig, Source};
use qrstream::rng::{derive_seed, rng_from_seed};
use qrstream::scaling::{ScalingAccumulator, ScalingMode};
use qrstream::sgd::{LearningRate, QuantileLevel, SgdPath};
use qrstream::{mc, wald_statistic};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn coverage_d10() -> Outcome {
    let design = McDesign::new(100_000, 10, 0.5, 1000, 101);
    let s = coverage_experiment(&design).map_err(|e| e.to_string())?.summary;
    check(
        !s.invalid && (0.925..=0.965).contains(&s.coverage) && (0.0174..=0.0234).contains(&s.mean_ci_length),
        format!(
            "coverage {:.3} in [0.925, 0.965], mean CI length {:.5} in [0.0174, 0.0234], failed {}",
            s.coverage, s.mean_ci_length, s.failed
        ),
    )
}

fn coverage_d80() -> Outcome {
    let design = McDesign::new(100_000, 80, 0.5, 1000, 202);
    let s = coverage_experiment(&design).map_err(|e| e.to_string())?.summary;
    check(
        !s.invalid && (0.930..=0.975).contains(&s.coverage),
        format!(
            "coverage {:.3} in [0.930, 0.975], mean CI length {:.5}, failed {}",
            s.coverage, s.mean_ci_length, s.failed
        ),
    )
}

fn critical_values() -> Outcome {
    let q = simulate_limit_quantiles(1, 2000, 200_000, 7, &TABLE_PROBS).map_err(|e| e.to_string())?;
    let errs: Vec<f64> = q.t.iter().zip(TABLE_VALUES).map(|(s, t)| s / t - 1.0).collect();
    let worst = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    check(
        worst < 0.02,
        format!(
            "simulated {:?} vs {:?}, worst relative error {:.4}",
            q.t.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            TABLE_VALUES,
            worst
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut rng = rng_from_seed(404);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let n = rng.random_range(2..=10_000usize);
        let d = rng.random_range(1..=5usize);
        let offset = [0.0, 1.0, 1e3, -1e4][k % 4];
        let beta0: Vec<f64> = (0..d).map(|_| offset + rng.random_range(-1.0..1.0)).collect();
        let mut path = Vec::with_capacity(n);
        let mut b = beta0.clone();
        for _ in 0..n {
            for v in b.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += 0.1 * z;
            }
            path.push(b.clone());
        }
        let mut acc = ScalingAccumulator::full(&beta0);
        let mut avg = vec![0.0; d];
        for (i, beta) in path.iter().enumerate() {
            let i = i as u64 + 1;
            for j in 0..d {
                avg[j] += (beta[j] - avg[j]) / i as f64;
            }
            acc.accumulate(&avg, i).map_err(|e| e.to_string())?;
        }
        let rec = acc.finalize(&avg).map_err(|e| e.to_string())?.to_dense().unwrap();
        let batch = batch_random_scaling(&path).map_err(|e| e.to_string())?;
        let scale = batch.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dev = (&rec - &batch).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
        worst = worst.max(dev);
    }
    check(worst < 1e-8, format!("200 paths, worst max|V_rec - V_batch| / max|V_batch| = {worst:.2e}"))
}

fn exact_qr_agreement() -> Outcome {
    let taus = [0.25, 0.5, 0.75];
    let cvs = CriticalValues::bundled();
    let mut good = 0;
    let mut worst_ratio = 0.0f64;
    for k in 0..100 {
        let tau = taus[k % 3];
        let data = generate_dgp(10_000, 2, derive_seed(505, k as u64)).map_err(|e| e.to_string())?;
        let mut cfg = FitConfig::new(tau);
        cfg.seed = k as u64;
        let rep = fit(Source::Memory(&data), &dgp_names(2), None, &cfg, &cvs).map_err(|e| e.to_string())?;
        let exact = exact_qr(&data, tau).map_err(|e| e.to_string())?;
        let mut ok = true;
        for e in &rep.estimates {
            let j = e.coord - 1;
            let half = 0.5 * e.ci.length();
            let ratio = (e.estimate - exact.beta[j]).abs() / half;
            worst_ratio = worst_ratio.max(ratio);
            ok &= ratio <= 5.0;
        }
        good += usize::from(ok);
    }
    check(
        good >= 95,
        format!("{good}/100 fixtures within 5 half-widths (worst ratio {worst_ratio:.3})"),
    )
}

struct ScaledRun {
    t: Vec<f64>,
    wald: f64,
}

fn scaled_run(data: &qrstream::Dataset, c: f64, tau: f64, gamma0: f64, beta0: &[f64], hyp: &[f64]) -> qrstream::Result<ScaledRun> {
    let d = data.dim();
    let b0: Vec<f64> = beta0.iter().map(|b| c * b).collect();
    let sched = LearningRate::new(c * gamma0, 0.501)?;
    let mut path = SgdPath::new(QuantileLevel::new(tau)?, sched, b0.clone())?.with_accumulator(ScalingAccumulator::full(&b0))?;
    for (x, y) in data.rows() {
        path.observe(x, c * y)?;
    }
    let res = path.finish()?;
    let v = &res.scaling[0];
    let t = (0..d)
        .map(|j| t_statistic(res.beta_bar[j], c * hyp[j], v.variance(j).unwrap(), res.n))
        .collect::<qrstream::Result<Vec<_>>>()?;
    let r = DMatrix::identity(d, d);
    let ch: Vec<f64> = hyp.iter().map(|h| c * h).collect();
    let wald = wald_statistic(&r, &ch, &res.beta_bar, v, res.n)?.statistic;
    Ok(ScaledRun { t, wald })
}

fn equivariance() -> Outcome {
    let cvs = CriticalValues::bundled();
    let (t_cv, _) = cvs.two_sided(0.95).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut flips = 0;
    let mut rng = rng_from_seed(606);
    for k in 0..20 {
        let d = 1 + k % 3;
        let data = generate_dgp(5_000, d, derive_seed(606, k as u64)).map_err(|e| e.to_string())?;
        let tau = [0.25, 0.5, 0.75][k % 3];
        let beta0: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Hypotheses near the truth so that both decisions occur.
        let hyp: Vec<f64> = (0..=d).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect();
        let (w_cv, _) = cvs.lookup(0.95, d + 1, qrstream::StatForm::Wald).map_err(|e| e.to_string())?;
        let base = scaled_run(&data, 1.0, tau, 1.0, &beta0, &hyp).map_err(|e| e.to_string())?;
        for c in [1e-3, 1e3] {
            let run = scaled_run(&data, c, tau, 1.0, &beta0, &hyp).map_err(|e| e.to_string())?;
            for (a, b) in base.t.iter().zip(&run.t) {
                worst = worst.max((a - b).abs() / a.abs().max(1e-300));
                flips += usize::from((a.abs() > t_cv) != (b.abs() > t_cv));
            }
            flips += usize::from((base.wald > w_cv) != (run.wald > w_cv));
        }
    }
    check(
        worst < 1e-8 && flips == 0,
        format!("20 fixtures x 2 scales: worst t relative change {worst:.2e}, decision flips {flips}"),
    )
}

fn mode_consistency() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = rng_from_seed(707);
    for k in 0..50 {
        let d = 1 + k % 6;
        let data = generate_dgp(3_000, d, derive_seed(707, k as u64)).map_err(|e| e.to_string())?;
        let p = d + 1;
        let beta0: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut coords: Vec<usize> = (0..p).filter(|_| rng.random_bool(0.6)).collect();
        if coords.is_empty() {
            coords.push(p - 1);
        }
        // Reverse to exercise a non-sorted selection.
        coords.reverse();
        let run = || -> qrstream::Result<_> {
            let sched = LearningRate::new(1.0, 0.501)?;
            let mut path = SgdPath::new(QuantileLevel::new(0.4)?, sched, beta0.clone())?
                .with_accumulator(ScalingAccumulator::full(&beta0))?
                .with_accumulator(ScalingAccumulator::subvector(&coords, &beta0)?)?
                .with_accumulator(ScalingAccumulator::diagonal(&coords, &beta0)?)?;
            for (x, y) in data.rows() {
                path.observe(x, y)?;
            }
            path.finish()
        };
        let res = run().map_err(|e| e.to_string())?;
        let (full, sub, diag) = (&res.scaling[0], &res.scaling[1], &res.scaling[2]);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
        for &a in &coords {
            for &b in &coords {
                worst = worst.max(rel(full.entry(a, b).unwrap(), sub.entry(a, b).unwrap()));
            }
            worst = worst.max(rel(full.variance(a).unwrap(), diag.variance(a).unwrap()));
        }
    }
    check(worst <= 1e-10, format!("50 fixtures, worst relative difference {worst:.2e}"))
}

fn homogeneity_size() -> Outcome {
    let design = HomogeneityDesign {
        n: 100_000,
        d: 5,
        taus: [0.3, 0.7],
        reps: 500,
        seed: 808,
        coords: (1..=5).collect(),
        level: 0.95,
        noise: Noise::Homoskedastic,
        init: Default::default(),
    };
    let s = mc::homogeneity_experiment(&design, &CriticalValues::bundled()).map_err(|e| e.to_string())?;
    check(
        s.failed == 0 && (0.03..=0.08).contains(&s.rejection_rate),
        format!(
            "ell = 5 slopes, rejection rate {:.3} in [0.03, 0.08] ({} / {}, failed {})",
            s.rejection_rate, s.rejections, s.completed, s.failed
        ),
    )
}

fn time_pass(data: &qrstream::Dataset, mode: ScalingMode) -> qrstream::Result<f64> {
    let p = data.dim();
    let beta0 = vec![0.0; p];
    let coords: Vec<usize> = (0..p).collect();
    let acc = match mode {
        ScalingMode::Diagonal => ScalingAccumulator::diagonal(&coords, &beta0)?,
        _ => ScalingAccumulator::full(&beta0),
    };
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let mut path = SgdPath::new(QuantileLevel::new(0.5)?, LearningRate::new(1.0, 0.501)?, beta0.clone())?
            .with_accumulator(acc.clone())?;
        let t = Instant::now();
        for (x, y) in data.rows() {
            path.observe(x, y)?;
        }
        let res = path.finish()?;
        best = best.min(t.elapsed().as_secs_f64());
        std::hint::black_box(res);
    }
    Ok(best)
}

fn performance_scaling() -> Outcome {
    let n = 100_000;
    let small = generate_dgp(n, 40, 909).map_err(|e| e.to_string())?;
    let large = generate_dgp(n, 80, 910).map_err(|e| e.to_string())?;
    let mut line = String::new();
    let mut ok = true;
    for (mode, limit) in [(ScalingMode::Diagonal, 2.5), (ScalingMode::Full, 5.0)] {
        let a = time_pass(&small, mode).map_err(|e| e.to_string())?;
        let b = time_pass(&large, mode).map_err(|e| e.to_string())?;
        let ratio = b / a;
        ok &= ratio <= limit;
        line.push_str(&format!(
            "{}: {:.3}s -> {:.3}s, ratio {:.2} (limit {limit}); ",
            mode.as_str(),
            a,
            b,
            ratio
        ));
    }
    check(ok, format!("d 40 -> 80 at n = {n}: {}", line.trim_end_matches("; ")))
}

fn rule_of_thumb() -> Outcome {
    let a = rule_of_thumb_gamma0(1.0, QuantileLevel::new(0.5).unwrap()).map_err(|e| e.to_string())?;
    let b = rule_of_thumb_gamma0(1.0, QuantileLevel::new(0.1).unwrap()).map_err(|e| e.to_string())?;
    check(
        (a - 0.798).abs() <= 0.001 && (b - 0.585).abs() <= 0.001,
        format!("gamma0(1, 0.5) = {a:.5}, gamma0(1, 0.1) = {b:.5}"),
    )
}

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// n = 10^6, d = 100 streamed from a generator: memory must not grow with n.
fn memory_smoke() -> Outcome {
    const CEILING_MB: f64 = 256.0;
    let n = 1_000_000u64;
    let d = 100;
    let p = d + 1;
    let beta0 = vec![0.0; p];
    let all: Vec<usize> = (0..p).collect();
    let sub: Vec<usize> = (0..20).collect();
    let run = || -> qrstream::Result<_> {
        let mut path = SgdPath::new(QuantileLevel::new(0.5)?, LearningRate::new(1.0, 0.501)?, beta0.clone())?
            .with_accumulator(ScalingAccumulator::diagonal(&all, &beta0)?)?
            .with_accumulator(ScalingAccumulator::subvector(&sub, &beta0)?)?;
        let mut rng = rng_from_seed(1001);
        let mut x = vec![1.0; p];
        for _ in 0..n {
            let mut y = 1.0;
            for v in &mut x[1..] {
                *v = rng.sample(StandardNormal);
                y += *v;
            }
            let e: f64 = rng.sample(StandardNormal);
            path.observe(&x, y + e)?;
        }
        path.finish()
    };
    let t = Instant::now();
    let res = run().map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let rss = peak_rss_mb();
    let err = res.beta_bar.iter().fold(0.0f64, |m, b| m.max((b - 1.0).abs()));
    let within = rss.is_none_or(|r| r < CEILING_MB);
    check(
        res.n == n && within && err < 0.05,
        format!(
            "n = 10^6, d = 100 in {secs:.1}s, peak RSS {} MB (ceiling {CEILING_MB}), max |avg - 1| = {err:.4}",
            rss.map_or("n/a".to_string(), |r| format!("{r:.1}"))
        ),
    )
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("0", "memory smoke test", memory_smoke),
        ("1", "coverage, d = 10", coverage_d10),
        ("2", "coverage, d = 80", coverage_d80),
        ("3", "critical values", critical_values),
        ("4", "recursive vs batch scaling", oracle_equivalence),
        ("5", "exact QR agreement", exact_qr_agreement),
        ("6", "scale equivariance", equivariance),
        ("7", "subvector / diagonal consistency", mode_consistency),
        ("8", "homogeneity test size", homogeneity_size),
        ("9", "performance scaling", performance_scaling),
        ("10", "rule-of-thumb constants", rule_of_thumb),
    ];
    let only: Option<Vec<String>> = std::env::var("QRSTREAM_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|s| s == id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
