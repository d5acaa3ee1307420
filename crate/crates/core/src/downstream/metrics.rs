use std::collections::BTreeSet;

use crate::cmatrix::CMatrix;

/// F1 of one class from counts; 0 when the class is never hit.
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Macro F1 over the classes appearing in either `pred` or `truth`.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label length mismatch");
    let classes: BTreeSet<usize> = pred.iter().chain(truth).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for (&p, &t) in pred.iter().zip(truth) {
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            f1_from_counts(tp, fp, fn_)
        })
        .sum();
    total / classes.len() as f64
}

/// Mean Euclidean error.
pub fn mde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .sum::<f64>()
        / pred.len() as f64
}

/// Σ‖Ĥ − H‖² / Σ‖H‖² (linear).
pub fn nmse(est: &[CMatrix], truth: &[CMatrix]) -> f64 {
    assert_eq!(est.len(), truth.len(), "estimate/label length mismatch");
    let err: f64 = est.iter().zip(truth).map(|(e, t)| e.sq_dist(t)).sum();
    let energy: f64 = truth.iter().map(CMatrix::energy).sum();
    err / energy
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn nmse_db(est: &[CMatrix], truth: &[CMatrix]) -> f64 {
    to_db(nmse(est, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn f1_three_sample_fixture() {
        // truth [1,0,1], pred [1,1,0]:
        // class 1: tp 1, fp 1, fn 1 → F1 0.5; class 0: tp 0 → 0.
        assert!((macro_f1(&[1, 1, 0], &[1, 0, 1]) - 0.25).abs() < 1e-12);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]), 1.0);
        assert_eq!(macro_f1(&[0, 0, 0], &[0, 0, 0]), 1.0);
        // truth [0,0,1], pred [0,0,0]: class 0 P=2/3 R=1 → 0.8; class 1 → 0.
        assert!((macro_f1(&[0, 0, 0], &[0, 0, 1]) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn mde_three_sample_fixture() {
        let truth = [[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        let pred = [[3.0, 4.0], [1.0, 1.0], [2.0, -2.0]];
        assert!((mde(&pred, &truth) - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(mde(&truth, &truth), 0.0);
    }

    #[test]
    fn nmse_three_sample_fixture() {
        let c = |v: f64| CMatrix::from_vec(1, 1, vec![Complex64::new(v, 0.0)]);
        let truth = [c(1.0), c(2.0), c(2.0)];
        let est = [c(1.0), c(2.0), CMatrix::from_vec(1, 1, vec![Complex64::new(2.0, 3.0)])];
        // error 9, energy 9.
        assert!((nmse(&est, &truth) - 1.0).abs() < 1e-12);
        assert!(nmse_db(&est, &truth).abs() < 1e-12);
        let half = [c(1.0), c(2.0), c(2.0 + 3.0)];
        assert!((nmse_db(&half, &truth) - to_db(1.0)).abs() < 1e-12);
        assert!((to_db(0.1) + 10.0).abs() < 1e-12);
    }
}
