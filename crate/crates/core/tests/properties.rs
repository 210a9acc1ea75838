use std::collections::BTreeSet;

use approx::assert_relative_eq;
use cirlab::checks::min_eigenvalue;
use cirlab::losses::{
    ace_loss, der_loss, feature_kd_loss, gram_pair, logit_constraint_loss, logit_kd_loss, ssl_rotation_loss,
};
use cirlab::{Array, Exemplar, MemoryBuffer, Tape};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-4.0f64..4.0, r * c).prop_map(move |d| Array::new(vec![r, c], d).unwrap())
    })
}

/// A matrix together with a label per row, each in `0..cols`.
fn labeled(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (Array<f64>, Vec<usize>)> {
    matrix(max_rows, max_cols).prop_flat_map(|m| {
        let (r, c) = (m.rows(), m.cols());
        (Just(m), prop::collection::vec(0..c, r))
    })
}

fn permuted(a: &Array<f64>, perm: &[usize]) -> Array<f64> {
    a.select_rows(perm).unwrap()
}

proptest! {
    #[test]
    fn gram_pair_symmetric_psd(l in matrix(7, 7)) {
        let g = gram_pair(&l).unwrap();
        for m in [&g.instance, &g.class] {
            prop_assert_eq!(m, &m.transpose().unwrap());
            let scale = m.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
            prop_assert!(min_eigenvalue(m) >= -1e-12 * scale);
        }
    }

    #[test]
    fn losses_non_negative((l, y) in labeled(6, 6), prev in matrix(6, 6)) {
        let tape = Tape::new();
        let x = tape.param(l.clone());
        let classes: BTreeSet<usize> = (0..l.cols()).collect();
        prop_assert!(ace_loss(x, &y, &classes).unwrap().item() >= 0.0);
        prop_assert!(der_loss(x, &l.map(|v| v * 0.5)).unwrap().item() >= 0.0);
        prop_assert!(feature_kd_loss(x, &l.map(|v| -v)).unwrap().item() >= 0.0);
        let seen: BTreeSet<usize> = y.iter().copied().collect();
        prop_assert!(logit_constraint_loss(x, &y, &seen, 0.5).unwrap().item() >= 0.0);
        if prev.shape() == l.shape() {
            prop_assert!(logit_kd_loss(x, &[prev], false).unwrap().item() >= 0.0);
        }
    }

    #[test]
    fn ssl_loss_non_negative((data, y) in (1..6usize).prop_flat_map(|r| (
        prop::collection::vec(-4.0f64..4.0, r * 4),
        prop::collection::vec(0..4usize, r),
    ))) {
        let r = y.len();
        let tape = Tape::new();
        let x = tape.param(Array::new(vec![r, 4], data).unwrap());
        prop_assert!(ssl_rotation_loss(x, &y).unwrap().item() >= 0.0);
    }

    #[test]
    fn kd_invariant_under_row_permutation(
        (curr, prev, perm) in (2..6usize, 1..6usize).prop_flat_map(|(b, c)| (
            prop::collection::vec(-3.0f64..3.0, b * c),
            prop::collection::vec(-3.0f64..3.0, b * c),
            Just((0..b).collect::<Vec<_>>()).prop_shuffle(),
        ).prop_map(move |(x, y, p)| (
            Array::new(vec![b, c], x).unwrap(),
            Array::new(vec![b, c], y).unwrap(),
            p,
        )))
    ) {
        let tape = Tape::new();
        let base = logit_kd_loss(tape.constant(curr.clone()), std::slice::from_ref(&prev), false).unwrap().item();
        let moved = logit_kd_loss(
            tape.constant(permuted(&curr, &perm)),
            &[permuted(&prev, &perm)],
            false,
        ).unwrap().item();
        assert_relative_eq!(base, moved, max_relative = 1e-10, epsilon = 1e-10);

        let f = feature_kd_loss(tape.constant(curr.clone()), &prev).unwrap().item();
        let fp = feature_kd_loss(tape.constant(permuted(&curr, &perm)), &permuted(&prev, &perm)).unwrap().item();
        assert_relative_eq!(f, fp, max_relative = 1e-12, epsilon = 1e-12);
    }

    #[test]
    fn backward_is_linear(
        (l, y) in labeled(5, 5),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let classes: BTreeSet<usize> = (0..l.cols()).collect();
        let target = l.map(|v| v.sin());
        let grad = |wa: f64, wb: f64| {
            let tape = Tape::new();
            let x = tape.param(l.clone());
            let loss = ace_loss(x, &y, &classes).unwrap().scale(wa)
                .add(der_loss(x, &target).unwrap().scale(wb)).unwrap();
            tape.backward(loss).unwrap().wrt(x)
        };
        let combined = grad(a, b);
        let separate = grad(1.0, 0.0).scale(a).add(&grad(0.0, 1.0).scale(b)).unwrap();
        for (u, v) in combined.data().iter().zip(separate.data()) {
            assert_relative_eq!(*u, *v, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn buffer_never_exceeds_capacity(
        capacity in 0..40usize,
        labels in prop::collection::vec(0..8usize, 0..300),
        balanced in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut buffer = MemoryBuffer::<f64>::new(capacity, seed).class_balanced(balanced);
        for (i, &label) in labels.iter().enumerate() {
            buffer.insert(Exemplar { feature: vec![i as f64; 3], logit: vec![0.0; 8], label, task: i / 50 }).unwrap();
            prop_assert!(buffer.len() <= capacity);
            prop_assert_eq!(buffer.len(), (i + 1).min(capacity));
        }
        prop_assert_eq!(buffer.seen_count(), labels.len() as u64);
    }

    #[test]
    fn rotation_is_a_bijection(side in 1..7usize, seed in any::<u64>()) {
        let data: Vec<f64> = (0..side * side).map(|i| (i as f64 + 1.0) * ((seed % 7) as f64 + 1.0)).collect();
        let img = Array::new(vec![side, side], data).unwrap();
        let mut sorted = img.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut r = img.clone();
        for k in 0..4 {
            let rk = img.rotate90(k).unwrap();
            prop_assert_eq!(&rk, &r);
            let mut s = rk.data().to_vec();
            s.sort_by(f64::total_cmp);
            prop_assert_eq!(&s, &sorted);
            r = r.rotate90(1).unwrap();
        }
        prop_assert_eq!(r, img);
    }
}
