//! On-demand correctness suites: finite-difference gradients for every loss
//! and the stochastic/structural invariants of buffer, pool and schedules.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::autodiff::{Tape, Var};
use crate::buffer::{Exemplar, MemoryBuffer};
use crate::config::AblationFlags;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::losses::{
    ace_loss, der_loss, feature_kd_loss, final_loss, gram_pair, logit_constraint_loss, logit_kd_loss,
    ssl_rotation_loss, LossInputs, LossSchedule, ReplayTerms, UnlabeledTerms,
};
use crate::nn::{BoundModel, ModelConfig, ModelParams, ROTATIONS};
use crate::pool::ModelPool;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.results.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {:<28} {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            )?;
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn block(name: &str, a: Array<f64>) -> (String, Array<f64>) {
    (name.to_string(), a)
}

/// Logits whose hinge arguments all sit well away from the kink at 0.
fn hinge_safe_logits(rng: &mut ChaCha8Rng, b: usize, c: usize, labels: &[usize], unseen: &[usize]) -> Array<f64> {
    loop {
        let l = normal(rng, &[b, c], 1.0);
        let clear = labels
            .iter()
            .enumerate()
            .all(|(i, &y)| unseen.iter().all(|&j| (l.get2(i, j) - l.get2(i, y)).abs() > 1e-3));
        if clear {
            return l;
        }
    }
}

/// A toy model whose forward pass exercises every layer type.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        image_side: 4,
        hidden: vec![5, 4],
        num_classes: 6,
        conv_channels: 2,
    }
}

type Case = Box<dyn Fn(u64) -> Result<GradCheckReport>>;

fn fd<F>(f: F, params: &[(String, Array<f64>)]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    finite_diff_check(f, params, FD_STEP, FD_TOLERANCE)
}

fn gradient_cases() -> Vec<(&'static str, Case)> {
    let ace: Case = Box::new(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(2..7), rng.random_range(3..8));
        let y = labels(&mut rng, b, c);
        let mut present: BTreeSet<usize> = y.iter().copied().collect();
        present.insert(rng.random_range(0..c));
        let l = normal(&mut rng, &[b, c], 1.5);
        fd(move |_, p| ace_loss(p[0], &y, &present), &[block("logits", l)])
    });
    let ssl: Case = Box::new(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(1..9);
        let y = labels(&mut rng, b, ROTATIONS);
        let l = normal(&mut rng, &[b, ROTATIONS], 1.5);
        fd(move |_, p| ssl_rotation_loss(p[0], &y), &[block("rotation_logits", l)])
    });
    let gram = |row_normalize: bool| -> Case {
        Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, c, k) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4));
            let prev: Vec<Array<f64>> = (0..k).map(|_| normal(&mut rng, &[b, c], 1.0)).collect();
            let l = normal(&mut rng, &[b, c], 1.0);
            fd(
                move |_, p| logit_kd_loss(p[0], &prev, row_normalize),
                &[block("logits", l)],
            )
        })
    };
    let fkd: Case = Box::new(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, f) = (rng.random_range(1..6), rng.random_range(1..9));
        let target = normal(&mut rng, &[b, f], 1.0);
        let x = normal(&mut rng, &[b, f], 1.0);
        fd(move |_, p| feature_kd_loss(p[0], &target), &[block("features", x)])
    });
    let lc: Case = Box::new(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(1..6), rng.random_range(3..8));
        let seen_n = rng.random_range(1..c);
        let y = labels(&mut rng, b, seen_n);
        let seen: BTreeSet<usize> = (0..seen_n).collect();
        let unseen: Vec<usize> = (seen_n..c).collect();
        let l = hinge_safe_logits(&mut rng, b, c, &y, &unseen);
        fd(
            move |_, p| logit_constraint_loss(p[0], &y, &seen, 0.0),
            &[block("logits", l)],
        )
    });
    let der: Case = Box::new(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let stored = normal(&mut rng, &[b, c], 1.0);
        let l = normal(&mut rng, &[b, c], 1.0);
        fd(move |_, p| der_loss(p[0], &stored), &[block("logits", l)])
    });
    let composite: Case = Box::new(composite_case);
    vec![
        ("ace", ace),
        ("ssl_rotation", ssl),
        ("gram_logit_kd", gram(false)),
        ("gram_logit_kd_normalized", gram(true)),
        ("feature_kd", fkd),
        ("logit_constraint", lc),
        ("der", der),
        ("full_objective", composite),
    ]
}

/// The complete objective with every term active, differentiated through a
/// toy model with respect to all of its parameters.
fn composite_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = toy_model_config();
    let (d, c, f) = (config.input_dim(), config.num_classes, config.feature_dim());
    let mut model = ModelParams::<f64>::init(config.clone(), rng.random())?;
    // Zero biases put dead rows exactly on ReLU and hinge kinks.
    for b in model.blocks_mut().iter_mut().filter(|b| b.name.ends_with(".b")) {
        b.value = normal(&mut rng, b.value.shape(), 0.3);
    }
    let mut pool = ModelPool::new(3, 0.9)?;
    for _ in 0..rng.random_range(1..4) {
        pool.push_snapshot(&ModelParams::init(config.clone(), rng.random())?);
    }

    let (bl, bu, br) = (4, 3, 2);
    let x_labeled = normal(&mut rng, &[bl, d], 1.0);
    let y = labels(&mut rng, bl, c - 2);
    let x_unlabeled = normal(&mut rng, &[bu, d], 1.0);
    let rotations = labels(&mut rng, bu, ROTATIONS);
    let replay_features = normal(&mut rng, &[br, f], 1.0).map(|v| v.abs());
    let replay_logits = normal(&mut rng, &[br, c], 1.0);
    let replay_labels = labels(&mut rng, br, c);
    let seen: BTreeSet<usize> = (0..c - 2).collect();
    let known: BTreeSet<usize> = (0..c - 3).collect();
    let targets = pool.compute_targets(&x_unlabeled)?.expect("pool is non-empty");
    let t = rng.random_range(1..20);
    let schedule = LossSchedule::default();
    let flags = AblationFlags::all();

    let params: Vec<(String, Array<f64>)> = model
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), b.value.clone()))
        .collect();
    fd(
        |tape, p| {
            let m = BoundModel::from_vars(&config, p.to_vec())?;
            let labeled_logits = m.classify(m.encode(tape.constant(x_labeled.clone()))?)?;
            let u = m.forward(tape.constant(x_unlabeled.clone()))?;
            let inputs = LossInputs {
                labeled_logits,
                labels: &y,
                replay: Some(ReplayTerms {
                    logits_now: m.classify(tape.constant(replay_features.clone()))?,
                    stored_logits: &replay_logits,
                    labels: &replay_labels,
                }),
                unlabeled: Some(UnlabeledTerms {
                    features: u.features,
                    logits: u.logits,
                    rotation_logits: u.rotation_logits,
                    rotation_labels: &rotations,
                }),
                targets: Some(&targets),
                seen_classes: &seen,
                known_classes: Some(&known),
            };
            Ok(final_loss(&inputs, &schedule, &flags, t)?.0)
        },
        &params,
    )
}

/// Runs every gradient case over `instances` seeded random instances.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    for (name, case) in gradient_cases() {
        let mut worst = 0.0f64;
        let mut failures = 0;
        for i in 0..instances {
            let r = case(seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            worst = worst.max(r.max_error());
            failures += usize::from(!r.passed());
        }
        report.push(
            name,
            failures == 0,
            format!("{instances} instances, {failures} failed, max rel error {worst:.2e}"),
        );
    }
    Ok(report)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array<f64>) -> f64 {
    let n = a.rows();
    let m = DMatrix::from_row_slice(n, n, a.data());
    SymmetricEigen::new(m).eigenvalues.min()
}

#[derive(Clone, Debug)]
pub struct RetentionStats {
    pub trials: usize,
    pub inserts: usize,
    pub capacity: usize,
    /// Times each item (by insertion order) survived to the end.
    pub retained: Vec<usize>,
}

/// Fills a fresh buffer with `inserts` distinct items per trial and tallies
/// which survive.
pub fn reservoir_retention(trials: usize, inserts: usize, capacity: usize, seed: u64) -> Result<RetentionStats> {
    let mut retained = vec![0usize; inserts];
    for trial in 0..trials {
        let mut buffer = MemoryBuffer::<f64>::new(capacity, seed.wrapping_add(trial as u64));
        for i in 0..inserts {
            buffer.insert(Exemplar {
                feature: vec![0.0],
                logit: vec![0.0],
                label: i,
                task: 0,
            })?;
        }
        for e in buffer.exemplars() {
            retained[e.label] += 1;
        }
    }
    Ok(RetentionStats {
        trials,
        inserts,
        capacity,
        retained,
    })
}

/// Structural and statistical invariants.
pub fn invariant_suite(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst_asym = 0.0f64;
    let mut worst_eig = f64::INFINITY;
    let mut self_kd_zero = true;
    for _ in 0..100 {
        let (b, c) = (rng.random_range(1..9), rng.random_range(1..9));
        let l = normal(&mut rng, &[b, c], 2.0);
        let g = gram_pair(&l)?;
        for m in [&g.instance, &g.class] {
            worst_asym = worst_asym.max(m.sub(&m.transpose()?)?.data().iter().fold(0.0, |a, v| a.max(v.abs())));
            worst_eig = worst_eig.min(min_eigenvalue(m));
        }
        let tape = Tape::new();
        self_kd_zero &= logit_kd_loss(tape.constant(l.clone()), &[l], false)?.item() == 0.0;
    }
    report.push(
        "gram_symmetric_psd",
        worst_asym == 0.0 && worst_eig >= -1e-9,
        format!("max asymmetry {worst_asym:e}, min eigenvalue {worst_eig:e}"),
    );
    report.push("logit_kd_self_zero", self_kd_zero, "100 random batches".into());

    let s = LossSchedule::default();
    let decreasing = (1..50).all(|t| s.alpha(t) < s.alpha(t - 1));
    let weights_ok = (0..50).all(|t| (0.95..1.0).contains(&s.labeled_weight(t)));
    report.push(
        "schedule",
        s.alpha(0) == 0.5 && s.alpha(1) == 0.475 && decreasing && weights_ok,
        format!(
            "alpha(0)={} alpha(1)={} alpha(49)={:.6}",
            s.alpha(0),
            s.alpha(1),
            s.alpha(49)
        ),
    );

    let mut buffer = MemoryBuffer::<f64>::new(200, seed);
    let (f, c) = (rng.random_range(1..900), rng.random_range(1..100));
    let mut max_len = 0;
    let mut rejections_ok = true;
    for i in 0..10_000 {
        // Every tenth insert is over budget and must be refused.
        let extra = if i % 10 == 0 { 1024 - f - c + 1 } else { 0 };
        let outcome = buffer.insert(Exemplar {
            feature: vec![0.5; f + extra],
            logit: vec![0.5; c],
            label: rng.random_range(0..c),
            task: i / 1000,
        });
        rejections_ok &= outcome.is_err() == (extra > 0);
        max_len = max_len.max(buffer.len());
    }
    let budget_ok = buffer.exemplars().iter().all(|e| e.float_cost() <= 1024);
    report.push(
        "buffer_capacity",
        max_len <= 200 && budget_ok && rejections_ok,
        format!("max size {max_len} over 10000 inserts, {f}+{c} floats each"),
    );

    let stats = reservoir_retention(1000, 2000, 200, seed)?;
    let (outside, decile_z) = retention_spread(&stats);
    report.push(
        "reservoir_uniformity",
        outside <= 0.01 && decile_z <= 3.0,
        format!(
            "{:.2}% items beyond 3 sigma, worst decile |z| {decile_z:.2}",
            outside * 100.0
        ),
    );

    let config = toy_model_config();
    let current = ModelParams::<f64>::init(config.clone(), seed)?;
    let mut pool = ModelPool::new(1, 0.99)?;
    pool.push_snapshot(&ModelParams::init(config.clone(), seed + 1)?);
    let d0 = pool.newest().expect("one snapshot").distance_sq(&current).sqrt();
    let mut worst_ratio = 0.0f64;
    let mut prev = d0;
    for _ in 0..1000 {
        pool.ema_refresh_all(&current)?;
        let d = pool.newest().expect("one snapshot").distance_sq(&current).sqrt();
        worst_ratio = worst_ratio.max((d / prev - 0.99).abs() / 0.99);
        prev = d;
    }
    report.push(
        "pool_ema_contraction",
        worst_ratio <= 1e-9,
        format!("max relative deviation from 0.99 per refresh {worst_ratio:.2e}"),
    );

    let mut fifo = ModelPool::<f64>::new(3, 0.999)?;
    let tagged: Vec<ModelParams<f64>> = (0..5)
        .map(|i| ModelParams::init(config.clone(), 100 + i))
        .collect::<Result<_>>()?;
    let mut fifo_ok = true;
    for (i, m) in tagged.iter().enumerate() {
        fifo.push_snapshot(m);
        let expect = &tagged[(i + 1).saturating_sub(3)..=i];
        fifo_ok &= fifo.len() == expect.len() && fifo.snapshots().zip(expect).all(|(a, b)| a == b);
    }
    let mut fixed = ModelPool::<f64>::new(2, 0.37)?;
    fixed.push_snapshot(&current);
    fixed.ema_refresh_all(&current)?;
    fifo_ok &= fixed.newest() == Some(&current);
    report.push(
        "pool_fifo_fixed_point",
        fifo_ok,
        "K=3 over 5 pushes; EMA fixed point".into(),
    );

    let img = normal(&mut rng, &[5, 5], 1.0);
    let mut r = img.clone();
    let mut distinct = BTreeSet::new();
    for k in 0..4 {
        let rk = img.rotate90(k)?;
        let mut sorted = rk.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut orig = img.data().to_vec();
        orig.sort_by(f64::total_cmp);
        distinct.insert(rk.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if sorted != orig {
            distinct.clear();
            break;
        }
        r = r.rotate90(1)?;
    }
    report.push(
        "rotation_bijection",
        distinct.len() == 4 && r == img,
        "four distinct permutations, fourth power is identity".into(),
    );
    Ok(report)
}

/// Fraction of items whose retention count lies beyond 3 sigma of the
/// binomial mean, and the largest |z| among insertion-order deciles under
/// the hypergeometric law of a single trial.
pub fn retention_spread(stats: &RetentionStats) -> (f64, f64) {
    let (trials, n, cap) = (stats.trials as f64, stats.inserts as f64, stats.capacity as f64);
    let p = cap / n;
    let (mean, sd) = (trials * p, (trials * p * (1.0 - p)).sqrt());
    let outside = stats
        .retained
        .iter()
        .filter(|&&r| (r as f64 - mean).abs() > 3.0 * sd)
        .count();

    let group = stats.inserts / 10;
    let g = group as f64;
    let per_trial_var = cap * (g / n) * (1.0 - g / n) * (n - cap) / (n - 1.0);
    let group_sd = (trials * per_trial_var).sqrt();
    let group_mean = trials * cap * g / n;
    let worst_z = stats
        .retained
        .chunks(group)
        .map(|c| (c.iter().sum::<usize>() as f64 - group_mean).abs() / group_sd)
        .fold(0.0, f64::max);
    (outside as f64 / n, worst_z)
}
