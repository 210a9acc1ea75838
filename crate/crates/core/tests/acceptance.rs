//! Runs the nine acceptance criteria in order and prints one line per
//! criterion. Exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cirlab::ablation::{ablate, apply_preset, AblationReport, Table};
use cirlab::checks::{gradient_suite, reservoir_retention};
use cirlab::losses::{gram_pair, logit_kd_loss};
use cirlab::pool::ModelPool;
use cirlab::report::{write_run, METRICS_FILE};
use cirlab::stream::{generate_stream, ImageSource};
use cirlab::trainer::{fine_tune_stream, run_stream, Learner, RunOptions};
use cirlab::{AblationFlags, Array, Exemplar, LossSchedule, MemoryBuffer, ModelParams, RunConfig, Tape};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn rows_of(a: &Array<f64>) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn min_eig(a: &Array<f64>) -> f64 {
    SymmetricEigen::new(DMatrix::from_row_slice(a.rows(), a.cols(), a.data()))
        .eigenvalues
        .min()
}

fn random_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let report = gradient_suite(50, 11).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(report.passed(), format!("\n{report}"))?;
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} operations x 50 instances in {:.1}s",
        report.results.len(),
        elapsed.as_secs_f64()
    ))
}

fn gram_identities() -> Outcome {
    let l = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let g = gram_pair(&Array::from_rows(&l).unwrap()).map_err(|e| e.to_string())?;
    let inst = naive_matmul(&l, &transpose(&l));
    let class = naive_matmul(&transpose(&l), &l);
    ensure(
        rows_of(&g.instance) == inst,
        format!("instance gram {:?}", rows_of(&g.instance)),
    )?;
    ensure(
        rows_of(&g.class) == class,
        format!("class gram {:?}", rows_of(&g.class)),
    )?;
    ensure(inst == vec![vec![5.0, 11.0], vec![11.0, 25.0]], "oracle instance gram")?;
    ensure(class == vec![vec![10.0, 14.0], vec![14.0, 20.0]], "oracle class gram")?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let (b, c) = (rng.random_range(1..10), rng.random_range(1..10));
        let rows = random_rows(&mut rng, b, c);
        let l = Array::from_rows(&rows).unwrap();
        let g = gram_pair(&l).map_err(|e| e.to_string())?;
        for m in [&g.instance, &g.class] {
            let r = rows_of(m);
            ensure(r == transpose(&r), "gram not symmetric")?;
            worst = worst.min(min_eig(m));
        }
        let tape = Tape::new();
        let kd = logit_kd_loss(tape.constant(l.clone()), &[l], false).map_err(|e| e.to_string())?;
        ensure(kd.item() == 0.0, format!("logit_kd_loss(l, [l]) = {}", kd.item()))?;
    }
    ensure(worst >= -1e-9, format!("min eigenvalue {worst:e}"))?;
    Ok(format!(
        "2x2 example exact, 200 random batches symmetric, min eigenvalue {worst:.1e}"
    ))
}

fn schedule() -> Outcome {
    let s = LossSchedule::default();
    ensure(s.alpha(0) == 0.5, format!("alpha(0) = {}", s.alpha(0)))?;
    ensure(s.alpha(1) == 0.475, format!("alpha(1) = {}", s.alpha(1)))?;
    let mut oracle = 0.5;
    for t in 0..50 {
        // Each oracle multiplication rounds once, so it drifts by up to
        // half an ulp per step.
        let drift = (s.alpha(t) - oracle).abs() / oracle;
        ensure(
            drift <= (t as f64 + 2.0) * f64::EPSILON,
            format!("alpha({t}) = {} vs {oracle}", s.alpha(t)),
        )?;
        if t > 0 {
            ensure(s.alpha(t) < s.alpha(t - 1), format!("alpha not decreasing at {t}"))?;
        }
        ensure(s.beta(t) == 0.002 * t as f64, format!("beta({t}) = {}", s.beta(t)))?;
        let w = s.labeled_weight(t);
        ensure((0.95..1.0).contains(&w), format!("labeled weight({t}) = {w}"))?;
        oracle *= 0.95;
    }
    Ok(format!("alpha(49) = {:.6}, beta(49) = {}", s.alpha(49), s.beta(49)))
}

fn buffer_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (f, c) = (896, 100);
    let mut buffer = MemoryBuffer::<f64>::new(200, 4);
    let mut max_len = 0;
    let mut rejected = 0;
    for i in 0..10_000usize {
        // Every tenth insert is malformed: over budget or of the wrong shape.
        let (fi, ci) = match i % 10 {
            0 => (f + rng.random_range(1..200), c),
            5 => (f - 1, c),
            _ => (f, c),
        };
        let outcome = buffer.insert(Exemplar {
            feature: vec![1.0; fi],
            logit: vec![0.0; ci],
            label: rng.random_range(0..c),
            task: i / 1000,
        });
        ensure(
            outcome.is_ok() == (fi == f),
            format!("insert {i} with {fi} features: {outcome:?}"),
        )?;
        rejected += usize::from(outcome.is_err());
        max_len = max_len.max(buffer.len());
        ensure(buffer.len() <= 200, format!("buffer grew to {}", buffer.len()))?;
        ensure(
            buffer.exemplars().iter().all(|e| e.float_cost() <= 1024),
            "exemplar over 1024 floats",
        )?;
    }
    ensure(max_len <= 200, format!("buffer grew to {max_len}"))?;

    let (trials, inserts, cap) = (1000, 1000, 200);
    let stats = reservoir_retention(trials, inserts, cap, 40).map_err(|e| e.to_string())?;
    let p = cap as f64 / inserts as f64;
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    let outside = stats
        .retained
        .iter()
        .filter(|&&r| (r as f64 - mean).abs() > 3.0 * sd)
        .count();
    // About 0.27% of items fall beyond 3 sigma by chance alone.
    ensure(
        outside <= inserts / 100,
        format!("{outside} of {inserts} items beyond 3 sigma"),
    )?;
    let total: usize = stats.retained.iter().sum();
    ensure(total == trials * cap, format!("retained total {total}"))?;
    Ok(format!("max size {max_len}, {rejected} malformed inserts rejected; {outside}/{inserts} items beyond 3 sigma over {trials} trials"))
}

fn pool_contract() -> Outcome {
    let cfg = RunConfig::default().model_config();
    let models: Vec<ModelParams<f64>> = (0..6)
        .map(|i| ModelParams::init(cfg.clone(), 900 + i).unwrap())
        .collect();
    let mut pool = ModelPool::<f64>::new(3, 0.99).map_err(|e| e.to_string())?;
    for (i, m) in models.iter().enumerate() {
        pool.push_snapshot(m);
        let expect = &models[(i + 1).saturating_sub(3)..=i];
        ensure(pool.len() == expect.len(), "pool size")?;
        ensure(
            pool.snapshots().zip(expect).all(|(a, b)| a == b),
            format!("FIFO order after push {i}"),
        )?;
    }

    let current = models[0].clone();
    let mut fixed = ModelPool::<f64>::new(1, 0.99).map_err(|e| e.to_string())?;
    fixed.push_snapshot(&current);
    fixed.ema_refresh_all(&current).map_err(|e| e.to_string())?;
    ensure(
        fixed.newest() == Some(&current),
        "EMA moved a snapshot equal to the current model",
    )?;

    let mut ema = ModelPool::<f64>::new(1, 0.99).map_err(|e| e.to_string())?;
    ema.push_snapshot(&models[5]);
    let d0 = ema.newest().unwrap().distance_sq(&current).sqrt();
    let mut expected = d0;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        ema.ema_refresh_all(&current).map_err(|e| e.to_string())?;
        expected *= 0.99;
        let d = ema.newest().unwrap().distance_sq(&current).sqrt();
        worst = worst.max((d - expected).abs() / expected);
    }
    ensure(worst <= 1e-9, format!("relative error {worst:e}"))?;
    Ok(format!(
        "FIFO K=3 over 6 pushes, fixed point, 1000 refreshes within {worst:.1e}"
    ))
}

fn describe(report: &AblationReport) -> String {
    report
        .results
        .iter()
        .map(|r| format!("{} {:.3}", r.name, r.mean))
        .collect::<Vec<_>>()
        .join(", ")
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

fn table(report: &AblationReport, name: &str) -> (f64, f64) {
    mean_std(&report.result(name).expect("preset present").accuracies)
}

fn table1() -> Outcome {
    let start = Instant::now();
    let report = ablate(
        Table::Components,
        &RunConfig::default(),
        &[0, 1, 2, 3, 4],
        &ImageSource::Synthetic,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let m = |n: &str| table(&report, n).0;
    let (ft, ft_sd) = table(&report, "ft");
    let (full, full_sd) = table(&report, "full");
    let pooled = ((ft_sd * ft_sd + full_sd * full_sd) / 2.0).sqrt();
    let line = describe(&report);
    ensure(ft < m("baseline"), format!("ft >= baseline: {line}"))?;
    ensure(
        m("baseline") < m("baseline+mlkd"),
        format!("baseline >= baseline+mlkd: {line}"),
    )?;
    ensure(m("baseline+mlkd") <= full, format!("baseline+mlkd > full: {line}"))?;
    ensure(
        m("baseline") < m("baseline+ssl"),
        format!("baseline >= baseline+ssl: {line}"),
    )?;
    ensure(
        full - ft > 2.0 * pooled,
        format!("gap {:.3} vs pooled std {pooled:.3}", full - ft),
    )?;
    ensure(report.ordering_holds(), "library verdicts disagree")?;
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!("{line}; {:.0}s", elapsed.as_secs_f64()))
}

fn table4() -> Outcome {
    let report = ablate(
        Table::DynamicWeight,
        &RunConfig::default(),
        &[0, 1, 2, 3, 4],
        &ImageSource::Synthetic,
    )
    .map_err(|e| e.to_string())?;
    let (dynamic, d_sd) = table(&report, "dynamic");
    let (fixed, f_sd) = table(&report, "fixed");
    let pooled = ((d_sd * d_sd + f_sd * f_sd) / 2.0).sqrt();
    ensure(
        dynamic >= fixed - 0.5 * pooled,
        format!("dynamic {dynamic:.4} < fixed {fixed:.4} - 0.5 x {pooled:.4}"),
    )?;
    Ok(format!(
        "dynamic {dynamic:.4} vs fixed {fixed:.4} (pooled std {pooled:.4})"
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for preset in ["full", "baseline+ssl"] {
        let cfg = apply_preset(&RunConfig::default(), preset)
            .map_err(|e| e.to_string())?
            .with_seed(7);
        let mut files = Vec::new();
        for run in 0..2 {
            let metrics =
                run_stream::<f64>(&cfg, &ImageSource::Synthetic, &RunOptions::default()).map_err(|e| e.to_string())?;
            let out = dir.path().join(format!("{preset}-{run}"));
            write_run(&out, &cfg, &metrics).map_err(|e| e.to_string())?;
            files.push(fs::read(out.join(METRICS_FILE)).map_err(|e| e.to_string())?);
        }
        ensure(
            files[0] == files[1],
            format!("{preset}: metrics.csv differs between runs"),
        )?;
    }
    Ok("full and baseline+ssl, seed 7: identical metrics.csv".into())
}

fn bits(p: &ModelParams<f64>) -> Vec<u64> {
    p.blocks()
        .iter()
        .flat_map(|b| b.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn baseline_reduction() -> Outcome {
    let mut cfg = apply_preset(&RunConfig::default(), "full")
        .map_err(|e| e.to_string())?
        .with_seed(3);
    cfg.flags = AblationFlags::none();
    let stream = generate_stream(&cfg.stream, &ImageSource::Synthetic).map_err(|e| e.to_string())?;
    let mut learner = Learner::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut a = Vec::new();
    for (t, exp) in stream.iter().enumerate() {
        learner
            .train_experience_with(exp, t, |p| a.push(bits(p)))
            .map_err(|e| e.to_string())?;
    }
    let mut b = Vec::new();
    fine_tune_stream::<f64>(&cfg, &stream, |p| b.push(bits(p))).map_err(|e| e.to_string())?;
    ensure(a.len() >= 100, format!("only {} steps", a.len()))?;
    ensure(a.len() == b.len(), format!("{} vs {} steps", a.len(), b.len()))?;
    if let Some(i) = (0..a.len()).find(|&i| a[i] != b[i]) {
        return Err(format!("trajectories diverge at step {i}"));
    }
    let classes: BTreeSet<usize> = stream
        .iter()
        .flat_map(|e| e.present_classes().iter().copied())
        .collect();
    Ok(format!(
        "{} steps bitwise identical over {} classes",
        a.len(),
        classes.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("gram and logit KD identities", gram_identities),
        ("schedule values", schedule),
        ("buffer contract", buffer_contract),
        ("pool contract", pool_contract),
        ("component ablation ordering", table1),
        ("dynamic SSL weight non-inferiority", table4),
        ("determinism", determinism),
        ("baseline reduction", baseline_reduction),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
