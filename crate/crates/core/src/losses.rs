//! Loss terms of the training objective and their task-indexed weights.
//!
//! Every loss is a pure function of tape variables and constant targets, so
//! gradients only ever reach the current model.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::Var;
use crate::config::AblationFlags;
use crate::error::{Error, Result};
use crate::nn::ROTATIONS;
use crate::pool::PoolTargets;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogitKdTarget {
    /// One Gram-matching term per pool snapshot.
    PerModelSum,
    /// A single term against the per-sample most confident snapshot.
    ConfidenceComposite,
}

/// Scalar weights of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub c: f64,
    pub omega: f64,
    pub gamma: f64,
    pub eta: f64,
    pub beta_slope: f64,
    pub delta: f64,
    /// Hinge margin of the logit constraint.
    pub lc_margin: f64,
    /// When false the SSL weight stays at `c` for every task.
    pub dynamic_ssl: bool,
    pub gram_row_normalize: bool,
    pub logit_kd_target: LogitKdTarget,
    /// Restrict logit distillation to classes seen before the current task.
    pub kd_known_classes: bool,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            c: 0.5,
            omega: 0.95,
            gamma: 0.1,
            eta: 0.4,
            beta_slope: 0.002,
            delta: 0.1,
            lc_margin: 0.0,
            dynamic_ssl: true,
            gram_row_normalize: false,
            logit_kd_target: LogitKdTarget::PerModelSum,
            kd_known_classes: true,
        }
    }
}

impl LossSchedule {
    /// Default constants with the logit distillation weight scaled down for the
    /// small desk model, whose raw-logit Gram differences are about four
    /// orders of magnitude above the other terms.
    pub fn desk() -> Self {
        Self {
            delta: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::Config(format!("omega {} must lie in (0, 1)", self.omega)));
        }
        let weights = [
            ("c", self.c),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("beta_slope", self.beta_slope),
            ("delta", self.delta),
            ("lc_margin", self.lc_margin),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(())
    }

    /// SSL weight at task `t`: `c * omega^t`, or `c` without dynamic weighting.
    pub fn alpha(&self, t: usize) -> f64 {
        if self.dynamic_ssl {
            self.c * self.omega.powi(t as i32)
        } else {
            self.c
        }
    }

    /// Feature-distillation weight at task `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta_slope * t as f64
    }

    /// Weight of the supervised term, `1 - 0.1 * alpha`.
    pub fn labeled_weight(&self, t: usize) -> f64 {
        1.0 - 0.1 * self.alpha(t)
    }
}

/// Instance and class Gram matrices of one logit batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GramPair<S> {
    /// `l * l^T`, B x B.
    pub instance: Array<S>,
    /// `l^T * l`, C x C.
    pub class: Array<S>,
}

pub fn gram_pair<S: Scalar>(logits: &Array<S>) -> Result<GramPair<S>> {
    let t = logits.transpose()?;
    Ok(GramPair {
        instance: logits.matmul(&t)?,
        class: t.matmul(logits)?,
    })
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy<'t, S: Scalar>(logits: Var<'t, S>, labels: &[usize]) -> Result<Var<'t, S>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
    }
    let flat = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    Ok(logits.log_softmax().gather(flat)?.mean().neg())
}

/// Cross-entropy whose softmax runs only over `classes_in_batch`.
pub fn ace_loss<'t, S: Scalar>(
    logits: Var<'t, S>,
    labels: &[usize],
    classes_in_batch: &BTreeSet<usize>,
) -> Result<Var<'t, S>> {
    let cols: Vec<usize> = classes_in_batch.iter().copied().collect();
    let local = labels
        .iter()
        .map(|y| {
            cols.binary_search(y)
                .map_err(|_| Error::Invalid(format!("label {y} not among batch classes {cols:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    cross_entropy(logits.select_cols(cols)?, &local)
}

/// 4-way rotation prediction cross-entropy.
pub fn ssl_rotation_loss<'t, S: Scalar>(rotation_logits: Var<'t, S>, rotation_labels: &[usize]) -> Result<Var<'t, S>> {
    if rotation_logits.shape().get(1) != Some(&ROTATIONS) {
        return Err(Error::shape(
            "ssl_rotation_loss",
            &rotation_logits.shape(),
            &[0, ROTATIONS],
        ));
    }
    cross_entropy(rotation_logits, rotation_labels)
}

/// Gram-correlation distillation against each previous logit batch:
/// `(1/B) sum_k |G - G_k|^2 + (1/C) sum_k |M - M_k|^2`.
pub fn logit_kd_loss<'t, S: Scalar>(curr: Var<'t, S>, prev: &[Array<S>], row_normalize: bool) -> Result<Var<'t, S>> {
    let tape = curr.tape();
    let shape = curr.shape();
    if let Some(p) = prev.iter().find(|p| p.shape() != shape.as_slice()) {
        return Err(Error::shape("logit_kd_loss", &shape, p.shape()));
    }
    if prev.is_empty() {
        return Ok(tape.scalar(S::zero()));
    }
    let (b, c) = (S::count(shape[0]), S::count(shape[1]));
    let l = if row_normalize { curr.row_normalize() } else { curr };
    let lt = l.t()?;
    let g_curr = l.matmul(lt)?;
    let m_curr = lt.matmul(l)?;

    let mut instance_terms = Vec::with_capacity(prev.len());
    let mut class_terms = Vec::with_capacity(prev.len());
    for p in prev {
        let target = if row_normalize {
            tape.constant(p.clone()).row_normalize().value().clone()
        } else {
            p.clone()
        };
        let grams = gram_pair(&target)?;
        instance_terms.push(g_curr.sub(tape.constant(grams.instance))?.sum_sq());
        class_terms.push(m_curr.sub(tape.constant(grams.class))?.sum_sq());
    }
    let instance = sum_vars(&instance_terms)?.scale(S::one() / b);
    let class = sum_vars(&class_terms)?.scale(S::one() / c);
    instance.add(class)
}

fn sum_vars<'t, S: Scalar>(terms: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// Batch mean of squared L2 distances between rows.
pub fn feature_kd_loss<'t, S: Scalar>(curr: Var<'t, S>, target: &Array<S>) -> Result<Var<'t, S>> {
    let shape = curr.shape();
    if shape.as_slice() != target.shape() {
        return Err(Error::shape("feature_kd_loss", &shape, target.shape()));
    }
    if shape[0] == 0 {
        return Ok(curr.tape().scalar(S::zero()));
    }
    let diff = curr.sub(curr.tape().constant(target.clone()))?;
    Ok(diff.sum_sq().scale(S::one() / S::count(shape[0])))
}

/// Hinge pushing every not-yet-seen class logit below the ground-truth logit:
/// batch mean of `sum_{j unseen} max(0, l_j - l_y + margin)`.
pub fn logit_constraint_loss<'t, S: Scalar>(
    logits: Var<'t, S>,
    labels: &[usize],
    seen_classes: &BTreeSet<usize>,
    margin: S,
) -> Result<Var<'t, S>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("logit_constraint_loss", &shape, &[labels.len()]));
    }
    let c = shape[1];
    let unseen: Vec<usize> = (0..c).filter(|j| !seen_classes.contains(j)).collect();
    if unseen.is_empty() || labels.is_empty() {
        return Ok(logits.tape().scalar(S::zero()));
    }
    let mut others = Vec::with_capacity(labels.len() * unseen.len());
    let mut truth = Vec::with_capacity(labels.len() * unseen.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Invalid(format!("label {y} out of range for {c} classes")));
        }
        for &j in &unseen {
            others.push(i * c + j);
            truth.push(i * c + y);
        }
    }
    let gap = logits.gather(others)?.sub(logits.gather(truth)?)?;
    Ok(gap
        .add_scalar(margin)
        .relu()
        .sum()
        .scale(S::one() / S::count(labels.len())))
}

/// Mean squared error between current and stored logits; 0 for an empty batch.
pub fn der_loss<'t, S: Scalar>(now: Var<'t, S>, stored: &Array<S>) -> Result<Var<'t, S>> {
    let shape = now.shape();
    if shape.as_slice() != stored.shape() {
        return Err(Error::shape("der_loss", &shape, stored.shape()));
    }
    if stored.is_empty() {
        return Ok(now.tape().scalar(S::zero()));
    }
    let diff = now.sub(now.tape().constant(stored.clone()))?;
    Ok(diff.sum_sq().scale(S::one() / S::count(stored.len())))
}

/// Replayed exemplars pushed through the current classifier head.
pub struct ReplayTerms<'t, 'a, S> {
    pub logits_now: Var<'t, S>,
    pub stored_logits: &'a Array<S>,
    pub labels: &'a [usize],
}

/// Current-model outputs on the (rotated) unlabeled batch.
pub struct UnlabeledTerms<'t, 'a, S> {
    pub features: Var<'t, S>,
    pub logits: Var<'t, S>,
    pub rotation_logits: Var<'t, S>,
    pub rotation_labels: &'a [usize],
}

pub struct LossInputs<'t, 'a, S> {
    pub labeled_logits: Var<'t, S>,
    pub labels: &'a [usize],
    pub replay: Option<ReplayTerms<'t, 'a, S>>,
    pub unlabeled: Option<UnlabeledTerms<'t, 'a, S>>,
    pub targets: Option<&'a PoolTargets<S>>,
    /// Classes encountered in the labeled stream so far.
    pub seen_classes: &'a BTreeSet<usize>,
    /// Logit columns the pool was trained on; `None` distills every column.
    pub known_classes: Option<&'a BTreeSet<usize>>,
}

/// Weighted value of each term of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alpha: f64,
    pub beta: f64,
    pub ace: f64,
    pub ssl: f64,
    pub lc: f64,
    pub der: f64,
    pub feature_kd: f64,
    pub logit_kd: f64,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} ace={} ssl={} lc={} der={} feature_kd={} logit_kd={} (alpha={}, beta={})",
            self.total, self.ace, self.ssl, self.lc, self.der, self.feature_kd, self.logit_kd, self.alpha, self.beta
        )
    }
}

/// Composes the full objective at task `t`.
///
/// Disabled terms are not built at all. The SSL weight `alpha` also sets the
/// supervised weight `1 - 0.1 * alpha`; with SSL disabled `alpha` is 0 and
/// the supervised term enters with weight exactly 1.
pub fn final_loss<'t, S: Scalar>(
    inputs: &LossInputs<'t, '_, S>,
    schedule: &LossSchedule,
    flags: &AblationFlags,
    t: usize,
) -> Result<(Var<'t, S>, LossBreakdown)> {
    let use_ssl = flags.use_ssl && inputs.unlabeled.is_some();
    let alpha = if use_ssl { schedule.alpha(t) } else { 0.0 };
    let beta = schedule.beta(t);
    let mut report = LossBreakdown {
        alpha,
        beta,
        ..LossBreakdown::default()
    };

    // Supervised term. Incoming rows normalize over the classes present in
    // the labeled batch; replayed rows over every class seen so far. The two
    // are combined as a mean over all rows. Without ACE both use every class.
    let num_classes = inputs.labeled_logits.shape()[1];
    let all: BTreeSet<usize> = (0..num_classes).collect();
    let classes: BTreeSet<usize> = if flags.use_ace {
        inputs.labels.iter().copied().collect()
    } else {
        all.clone()
    };
    let mut total = ace_loss(inputs.labeled_logits, inputs.labels, &classes)?;
    if let (Some(r), true) = (&inputs.replay, flags.use_der) {
        let seen = if flags.use_ace {
            let mut seen = inputs.seen_classes.clone();
            seen.extend(r.labels.iter().copied());
            seen
        } else {
            all
        };
        let replayed = ace_loss(r.logits_now, r.labels, &seen)?;
        let (bl, br) = (inputs.labels.len() as f64, r.labels.len() as f64);
        total = total
            .scale(S::lit(bl / (bl + br)))
            .add(replayed.scale(S::lit(br / (bl + br))))?;
    }
    let ace_weight = 1.0 - 0.1 * alpha;
    if ace_weight != 1.0 {
        total = total.scale(S::lit(ace_weight));
    }
    report.ace = total.item().as_f64();

    let add = |total: &mut Var<'t, S>, term: Var<'t, S>, w: f64| -> Result<f64> {
        let weighted = term.scale(S::lit(w));
        *total = total.add(weighted)?;
        Ok(weighted.item().as_f64())
    };

    if let (true, Some(u)) = (use_ssl, &inputs.unlabeled) {
        let ssl = ssl_rotation_loss(u.rotation_logits, u.rotation_labels)?;
        report.ssl = add(&mut total, ssl, alpha)?;
    }
    if flags.use_lc {
        let lc = logit_constraint_loss(
            inputs.labeled_logits,
            inputs.labels,
            inputs.seen_classes,
            S::lit(schedule.lc_margin),
        )?;
        report.lc = add(&mut total, lc, schedule.gamma)?;
    }
    if let (true, Some(r)) = (flags.use_der, &inputs.replay) {
        let der = der_loss(r.logits_now, r.stored_logits)?;
        report.der = add(&mut total, der, schedule.eta)?;
    }
    if let (Some(u), Some(targets)) = (&inputs.unlabeled, inputs.targets) {
        if flags.use_feature_kd && beta > 0.0 {
            let fkd = feature_kd_loss(u.features, &targets.feature_targets)?;
            report.feature_kd = add(&mut total, fkd, beta)?;
        }
        if flags.use_logit_kd {
            let prev: &[Array<S>] = match schedule.logit_kd_target {
                LogitKdTarget::PerModelSum => &targets.logit_batches,
                LogitKdTarget::ConfidenceComposite => std::slice::from_ref(&targets.composite_logits),
            };
            let lkd = match inputs.known_classes.filter(|_| schedule.kd_known_classes) {
                Some(known) if known.is_empty() => u.logits.tape().scalar(S::zero()),
                Some(known) => {
                    let cols: Vec<usize> = known.iter().copied().collect();
                    let prev = prev.iter().map(|p| p.select_cols(&cols)).collect::<Result<Vec<_>>>()?;
                    logit_kd_loss(u.logits.select_cols(cols)?, &prev, schedule.gram_row_normalize)?
                }
                None => logit_kd_loss(u.logits, prev, schedule.gram_row_normalize)?,
            };
            report.logit_kd = add(&mut total, lkd, schedule.delta)?;
        }
    }
    report.total = total.item().as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn arr(rows: &[&[f64]]) -> Array<f64> {
        Array::from_rows(rows).unwrap()
    }

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn schedule_values() {
        let s = LossSchedule::default();
        assert_eq!(s.alpha(0), 0.5);
        assert_eq!(s.alpha(1), 0.475);
        assert_eq!(s.beta(5), 0.002 * 5.0);
        assert!((s.beta(5) - 0.01).abs() <= f64::EPSILON * 0.01);
        let fixed = LossSchedule {
            dynamic_ssl: false,
            ..s
        };
        assert_eq!(fixed.alpha(30), 0.5);
    }

    #[test]
    fn schedule_validation() {
        let bad = LossSchedule {
            omega: 1.0,
            ..LossSchedule::default()
        };
        assert!(bad.validate().is_err());
        let neg = LossSchedule {
            gamma: -0.1,
            ..LossSchedule::default()
        };
        assert!(neg.validate().is_err());
        assert!(LossSchedule::default().validate().is_ok());
    }

    #[test]
    fn ace_two_uniform_classes_is_ln2() {
        let tape = Tape::new();
        let l = tape.constant(Array::<f64>::zeros(&[3, 5]));
        let loss = ace_loss(l, &[1, 3, 1], &set(&[1, 3])).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ace_with_all_classes_is_cross_entropy() {
        let tape = Tape::new();
        let l = tape.constant(arr(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.4]]));
        let a = ace_loss(l, &[2, 0], &set(&[0, 1, 2])).unwrap().item();
        let b = cross_entropy(l, &[2, 0]).unwrap().item();
        assert_eq!(a, b);
    }

    #[test]
    fn ace_rejects_foreign_label() {
        let tape = Tape::new();
        let l = tape.constant(Array::<f64>::zeros(&[1, 4]));
        assert!(ace_loss(l, &[2], &set(&[0, 1])).is_err());
    }

    #[test]
    fn ssl_uniform_is_ln4() {
        let tape = Tape::new();
        let l = tape.constant(Array::<f64>::zeros(&[2, 4]));
        let loss = ssl_rotation_loss(l, &[0, 3]).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ssl_confident_tends_to_zero() {
        let tape = Tape::new();
        let l = tape.constant(arr(&[&[0.0, 0.0, 60.0, 0.0]]));
        assert!(ssl_rotation_loss(l, &[2]).unwrap().item() < 1e-20);
    }

    #[test]
    fn gram_identity_and_worked_example() {
        let eye = arr(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = gram_pair(&eye).unwrap();
        assert_eq!(g.instance, eye);
        assert_eq!(g.class, eye);

        let g = gram_pair(&arr(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(g.instance, arr(&[&[5.0, 11.0], &[11.0, 25.0]]));
        assert_eq!(g.class, arr(&[&[10.0, 14.0], &[14.0, 20.0]]));
    }

    #[test]
    fn logit_kd_cases() {
        let tape = Tape::new();
        let l = arr(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let curr = tape.param(l.clone());
        assert_eq!(
            logit_kd_loss(curr, std::slice::from_ref(&l), false).unwrap().item(),
            0.0
        );
        assert_eq!(logit_kd_loss(curr, &[], false).unwrap().item(), 0.0);
        let prev = arr(&[&[2.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(logit_kd_loss(curr, &[prev], false).unwrap().item(), 18.0);
        assert!(logit_kd_loss(curr, &[Array::zeros(&[3, 2])], false).is_err());
    }

    #[test]
    fn logit_kd_row_normalized_scale_invariant() {
        let tape = Tape::new();
        let l = arr(&[&[1.0, 2.0], &[0.5, -1.0]]);
        let curr = tape.param(l.clone());
        let loss = logit_kd_loss(curr, &[l.scale(3.0)], true).unwrap().item();
        assert!(loss.abs() < 1e-24);
    }

    #[test]
    fn feature_kd_cases() {
        let tape = Tape::new();
        let curr = tape.param(arr(&[&[1.0, 0.0]]));
        assert_eq!(feature_kd_loss(curr, &arr(&[&[1.0, 0.0]])).unwrap().item(), 0.0);
        assert_eq!(feature_kd_loss(curr, &arr(&[&[0.0, 0.0]])).unwrap().item(), 1.0);
        assert!(feature_kd_loss(curr, &arr(&[&[0.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn lc_cases() {
        let tape = Tape::new();
        let l = tape.param(arr(&[&[1.0, 2.0]]));
        let v = logit_constraint_loss(l, &[0], &set(&[0]), 0.0).unwrap().item();
        assert_eq!(v, 1.0);
        let all = logit_constraint_loss(l, &[0], &set(&[0, 1]), 0.0).unwrap().item();
        assert_eq!(all, 0.0);
        let low = tape.param(arr(&[&[5.0, -5.0]]));
        assert_eq!(logit_constraint_loss(low, &[0], &set(&[0]), 0.0).unwrap().item(), 0.0);
    }

    #[test]
    fn der_cases() {
        let tape = Tape::new();
        let l = arr(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(der_loss(tape.param(l.clone()), &l).unwrap().item(), 0.0);
        let empty = Array::<f64>::new(vec![0, 2], vec![]).unwrap();
        assert_eq!(der_loss(tape.param(empty.clone()), &empty).unwrap().item(), 0.0);
    }

    #[test]
    fn first_task_with_empty_memory_and_pool() {
        let tape = Tape::new();
        let labeled = tape.param(arr(&[&[0.2, -0.1, 0.4], &[1.0, 0.3, -0.2]]));
        let feats = tape.param(arr(&[&[0.1, 0.2], &[0.3, 0.4]]));
        let unl_logits = tape.param(arr(&[&[0.0, 0.1, 0.2], &[0.3, 0.2, 0.1]]));
        let rot = tape.param(arr(&[&[0.1, 0.2, 0.3, 0.4], &[0.4, 0.3, 0.2, 0.1]]));
        let seen = set(&[0, 1]);
        let inputs = LossInputs {
            labeled_logits: labeled,
            labels: &[0, 1],
            replay: None,
            unlabeled: Some(UnlabeledTerms {
                features: feats,
                logits: unl_logits,
                rotation_logits: rot,
                rotation_labels: &[1, 2],
            }),
            targets: None,
            seen_classes: &seen,
            known_classes: None,
        };
        let flags = AblationFlags::all();
        let s = LossSchedule::default();
        let (total, parts) = final_loss(&inputs, &s, &flags, 0).unwrap();
        let ace = ace_loss(labeled, &[0, 1], &seen).unwrap().item();
        let ssl = ssl_rotation_loss(rot, &[1, 2]).unwrap().item();
        let lc = logit_constraint_loss(labeled, &[0, 1], &seen, 0.0).unwrap().item();
        let expected = 0.95 * ace + 0.5 * ssl + 0.1 * lc;
        assert!((total.item() - expected).abs() < 1e-14);
        assert_eq!(parts.der, 0.0);
        assert_eq!(parts.feature_kd, 0.0);
        assert_eq!(parts.logit_kd, 0.0);
        assert_eq!(parts.alpha, 0.5);
    }

    #[test]
    fn no_auxiliary_terms_is_plain_ace() {
        let tape = Tape::new();
        let labeled = tape.param(arr(&[&[0.2, -0.1, 0.4], &[1.0, 0.3, -0.2]]));
        let seen = set(&[0, 2]);
        let inputs = LossInputs {
            labeled_logits: labeled,
            labels: &[0, 2],
            replay: None,
            unlabeled: None,
            targets: None,
            seen_classes: &seen,
            known_classes: None,
        };
        let (total, _) = final_loss(&inputs, &LossSchedule::default(), &AblationFlags::none(), 3).unwrap();
        let ace = ace_loss(labeled, &[0, 2], &seen).unwrap();
        assert_eq!(total.item().to_bits(), ace.item().to_bits());
    }
}
