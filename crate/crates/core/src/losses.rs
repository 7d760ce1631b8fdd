//! Contrastive alignment, prototype self-training and marginal entropy terms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Floor applied inside logarithms and divisions.
pub const FLOOR: f64 = 1e-12;
/// Allowed deviation from unit row norm for inputs that must lie on the sphere.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{which} row {row} has norm {norm}, expected 1")]
    NotNormalized { which: &'static str, row: usize, norm: f64 },
    #[error("soft assignment needs at least 2 centroids, got {0}")]
    TooFewClusters(usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("{0} term is required for this stage")]
    MissingTerm(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Refine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau_align: f64,
    pub tau_proto: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_align: 0.5,
            tau_proto: 0.1,
            alpha: 1.0,
            beta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.tau_align) || !positive(self.tau_proto) {
            return Err(LossError::InvalidConfig("temperatures must be positive".into()));
        }
        if !non_negative(self.alpha) || !non_negative(self.beta) {
            return Err(LossError::InvalidConfig("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_unit_rows(t: &Tensor, which: &'static str) -> Result<(), LossError> {
    for (row, norm) in t.row_norms().into_iter().enumerate() {
        if (norm - 1.0).abs() > NORM_TOLERANCE || !norm.is_finite() {
            return Err(LossError::NotNormalized { which, row, norm });
        }
    }
    Ok(())
}

/// One-directional InfoNCE between paired rows, averaged over the batch.
pub fn alignment_loss(tape: &mut Tape, z_tab: Var, z_txt: Var, tau: f64) -> Result<Var, LossError> {
    check_unit_rows(tape.value(z_tab), "z_tab")?;
    check_unit_rows(tape.value(z_txt), "z_txt")?;
    let txt_t = tape.transpose(z_txt)?;
    let sim = tape.matmul(z_tab, txt_t)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits)?;
    let positives = tape.diag(log_probs)?;
    let mean = tape.mean(positives);
    Ok(tape.scale(mean, -1.0))
}

/// Softmax over scaled cosine similarities to the centroids.
pub fn soft_assign(tape: &mut Tape, z: Var, mu: Var, tau: f64) -> Result<Var, LossError> {
    let k = tape.value(mu).rows();
    if k < 2 {
        return Err(LossError::TooFewClusters(k));
    }
    let mu_t = tape.transpose(mu)?;
    let sim = tape.matmul(z, mu_t)?;
    let logits = tape.scale(sim, 1.0 / tau);
    Ok(tape.softmax_rows(logits)?)
}

/// Squares assignments, divides by the batch cluster frequency and renormalizes each row.
pub fn sharpen_targets(p: &Tensor) -> Tensor {
    let f = p.mean_rows().expect("assignment matrix").map(|v| v * p.rows() as f64);
    let mut q = p.clone();
    for i in 0..p.rows() {
        let row = q.row_mut(i);
        for (v, &fj) in row.iter_mut().zip(f.data()) {
            *v = *v * *v / fj.max(FLOOR);
        }
        let total: f64 = row.iter().sum();
        let total = total.max(FLOOR);
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    q
}

/// KL(Q‖P) summed over the batch, with Q held constant.
pub fn proto_loss(tape: &mut Tape, p: Var, q: &Tensor) -> Result<Var, LossError> {
    let self_term: f64 = q.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let q_var = tape.constant(q.clone());
    let log_p = tape.log(p, FLOOR);
    let cross = tape.mul(q_var, log_p)?;
    let cross_sum = tape.sum(cross);
    let neg_cross = tape.scale(cross_sum, -1.0);
    let constant = tape.constant(Tensor::scalar(self_term));
    Ok(tape.add(neg_cross, constant)?)
}

/// Negative entropy of the batch-mean assignment.
pub fn entropy_reg(tape: &mut Tape, p: Var) -> Result<Var, LossError> {
    let p_bar = tape.mean_rows(p)?;
    let log_p_bar = tape.log(p_bar, FLOOR);
    let terms = tape.mul(p_bar, log_p_bar)?;
    Ok(tape.sum(terms))
}

/// Loss terms computed on one batch; absent terms are skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub align: Option<T>,
    pub proto: Option<T>,
    pub ent: Option<T>,
}

impl<T> Default for LossTerms<T> {
    fn default() -> Self {
        Self {
            align: None,
            proto: None,
            ent: None,
        }
    }
}

/// Warm-up uses alignment alone; refinement adds the weighted prototype and entropy terms.
pub fn total_loss(tape: &mut Tape, terms: LossTerms<Var>, config: &LossConfig, stage: Stage) -> Result<Var, LossError> {
    match stage {
        Stage::Warmup => terms.align.ok_or(LossError::MissingTerm("alignment")),
        Stage::Refine => {
            let mut parts = Vec::new();
            if let Some(a) = terms.align {
                parts.push(a);
            }
            if let Some(p) = terms.proto {
                parts.push(tape.scale(p, config.alpha));
            }
            if let Some(e) = terms.ent {
                parts.push(tape.scale(e, config.beta));
            }
            let mut acc = *parts.first().ok_or(LossError::MissingTerm("any"))?;
            for &p in &parts[1..] {
                acc = tape.add(acc, p)?;
            }
            Ok(acc)
        }
    }
}

/// Scalar counterpart of [`total_loss`].
pub fn total_value(terms: LossTerms<f64>, config: &LossConfig, stage: Stage) -> f64 {
    match stage {
        Stage::Warmup => terms.align.unwrap_or(0.0),
        Stage::Refine => {
            terms.align.unwrap_or(0.0)
                + config.alpha * terms.proto.unwrap_or(0.0)
                + config.beta * terms.ent.unwrap_or(0.0)
        }
    }
}

/// Evaluates [`alignment_loss`] without keeping a tape.
pub fn alignment_value(z_tab: &Tensor, z_txt: &Tensor, tau: f64) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(z_tab.clone());
    let b = tape.constant(z_txt.clone());
    let l = alignment_loss(&mut tape, a, b, tau)?;
    Ok(tape.value(l).item())
}

/// Evaluates [`soft_assign`] without keeping a tape.
pub fn soft_assign_value(z: &Tensor, mu: &Tensor, tau: f64) -> Result<Tensor, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(mu.clone());
    let p = soft_assign(&mut tape, a, b, tau)?;
    Ok(tape.value(p).clone())
}

pub fn proto_value(p: &Tensor, q: &Tensor) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = proto_loss(&mut tape, pv, q)?;
    Ok(tape.value(l).item())
}

pub fn entropy_value(p: &Tensor) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = entropy_reg(&mut tape, pv)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let z = t(&[&[0.6, 0.8]]);
        assert_eq!(alignment_value(&z, &z, 0.5).unwrap(), 0.0);

        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(alignment_value(&e, &e, 1.0).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(alignment_value(&e, &e, 1.0).unwrap(), 0.3133, epsilon = 1e-4);

        let tab = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![-1.0, 0.0]]).unwrap();
        let txt = Tensor::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap();
        assert_abs_diff_eq!(alignment_value(&tab, &txt, 0.5).unwrap(), 1.3863, epsilon = 1e-4);

        let bad = t(&[&[2.0, 0.0]]);
        assert!(matches!(alignment_value(&bad, &z, 0.5), Err(LossError::NotNormalized { .. })));
    }

    #[test]
    fn soft_assign_examples() {
        let z = t(&[&[1.0, 0.0]]);
        let mu = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = soft_assign_value(&z, &mu, 1.0).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p.get(0, 1), 0.2689, epsilon = 1e-4);
        let p = soft_assign_value(&z, &mu, 0.1).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 0.99995, epsilon = 1e-4);

        let mu_eq = t(&[&[0.0, 1.0], &[0.0, -1.0], &[0.0, 1.0]]);
        let p = soft_assign_value(&z, &mu_eq, 0.5).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(p.get(0, j), 1.0 / 3.0, epsilon = 1e-12);
        }
        assert!(matches!(
            soft_assign_value(&z, &t(&[&[1.0, 0.0]]), 0.5),
            Err(LossError::TooFewClusters(1))
        ));
    }

    #[test]
    fn sharpen_examples() {
        let one_hot = t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(sharpen_targets(&one_hot), one_hot);
        let half = t(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(sharpen_targets(&half), half);
        let p = t(&[&[0.9, 0.1], &[0.6, 0.4]]);
        let q = sharpen_targets(&p);
        let expected = [[0.9643, 0.0357], [0.4286, 0.5714]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(q.get(i, j), expected[i][j], epsilon = 1e-4);
            }
        }
        // An empty column still yields finite targets.
        let q = sharpen_targets(&t(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]));
        assert!(q.all_finite());
    }

    #[test]
    fn proto_examples() {
        let p = t(&[&[0.3, 0.7], &[0.5, 0.5]]);
        assert_abs_diff_eq!(proto_value(&p, &p).unwrap(), 0.0, epsilon = 1e-15);
        let kl = proto_value(&t(&[&[0.5, 0.5]]), &t(&[&[0.9, 0.1]])).unwrap();
        assert_abs_diff_eq!(kl, 0.3681, epsilon = 1e-4);
        // Zero probability under positive target is clamped rather than infinite.
        let clamped = proto_value(&t(&[&[1.0, 0.0]]), &t(&[&[0.5, 0.5]])).unwrap();
        assert!(clamped.is_finite() && clamped > 0.0);
    }

    #[test]
    fn entropy_examples() {
        let uniform = Tensor::filled(vec![3, 4], 0.25);
        assert_abs_diff_eq!(entropy_value(&uniform).unwrap(), -(4f64.ln()), epsilon = 1e-12);
        assert_eq!(entropy_value(&t(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap(), 0.0);
        let p = t(&[&[1.0, 0.0], &[0.5, 0.5]]);
        assert_abs_diff_eq!(entropy_value(&p).unwrap(), -0.5623, epsilon = 1e-4);
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        let terms = LossTerms {
            align: Some(0.5),
            proto: Some(0.2),
            ent: Some(-1.0),
        };
        assert_eq!(total_value(terms, &cfg, Stage::Warmup), 0.5);
        assert_abs_diff_eq!(total_value(terms, &cfg, Stage::Refine), 0.6, epsilon = 1e-12);
        let zero = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg
        };
        assert_eq!(total_value(terms, &zero, Stage::Refine), 0.5);

        let mut tape = Tape::new();
        let vars = LossTerms {
            align: Some(tape.constant(Tensor::scalar(0.5))),
            proto: Some(tape.constant(Tensor::scalar(0.2))),
            ent: Some(tape.constant(Tensor::scalar(-1.0))),
        };
        let w = total_loss(&mut tape, vars, &cfg, Stage::Warmup).unwrap();
        assert_eq!(tape.value(w).item(), 0.5);
        let r = total_loss(&mut tape, vars, &cfg, Stage::Refine).unwrap();
        assert_abs_diff_eq!(tape.value(r).item(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau_align: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            beta: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn unit_rows(rows: usize, cols: usize, raw: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, raw.to_vec()).unwrap().l2_normalize_rows().unwrap()
    }

    /// Full refine objective on a toy instance as a function of raw inputs.
    fn toy_objective(a: &Tensor, b: &Tensor, m: &Tensor, q: &Tensor, cfg: &LossConfig) -> f64 {
        let mut tape = Tape::new();
        let (av, bv, mv) = (tape.param(a.clone()), tape.param(b.clone()), tape.param(m.clone()));
        let za = tape.l2_normalize_rows(av).unwrap();
        let zb = tape.l2_normalize_rows(bv).unwrap();
        let mu = tape.l2_normalize_rows(mv).unwrap();
        let align = alignment_loss(&mut tape, za, zb, cfg.tau_align).unwrap();
        let p = soft_assign(&mut tape, za, mu, cfg.tau_proto).unwrap();
        let proto = proto_loss(&mut tape, p, q).unwrap();
        let ent = entropy_reg(&mut tape, p).unwrap();
        let terms = LossTerms {
            align: Some(align),
            proto: Some(proto),
            ent: Some(ent),
        };
        let total = total_loss(&mut tape, terms, cfg, Stage::Refine).unwrap();
        tape.value(total).item()
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let a = Tensor::matrix(4, 3, vec![0.3, -1.2, 0.8, 1.1, 0.4, -0.2, -0.7, 0.9, 0.5, 0.2, 0.1, -1.3]).unwrap();
        let b = Tensor::matrix(4, 3, vec![0.5, -0.9, 0.6, 0.7, 0.8, -0.4, -0.3, 1.1, 0.2, 0.6, -0.2, -1.0]).unwrap();
        let m = Tensor::matrix(2, 3, vec![1.0, 0.2, -0.3, -0.4, 0.9, 0.5]).unwrap();
        let p0 = soft_assign_value(&a.l2_normalize_rows().unwrap(), &m.l2_normalize_rows().unwrap(), cfg.tau_proto).unwrap();
        let q = sharpen_targets(&p0);

        let mut tape = Tape::new();
        let (av, bv, mv) = (tape.param(a.clone()), tape.param(b.clone()), tape.param(m.clone()));
        let za = tape.l2_normalize_rows(av).unwrap();
        let zb = tape.l2_normalize_rows(bv).unwrap();
        let mu = tape.l2_normalize_rows(mv).unwrap();
        let align = alignment_loss(&mut tape, za, zb, cfg.tau_align).unwrap();
        let p = soft_assign(&mut tape, za, mu, cfg.tau_proto).unwrap();
        let proto = proto_loss(&mut tape, p, &q).unwrap();
        let ent = entropy_reg(&mut tape, p).unwrap();
        let terms = LossTerms {
            align: Some(align),
            proto: Some(proto),
            ent: Some(ent),
        };
        let total = total_loss(&mut tape, terms, &cfg, Stage::Refine).unwrap();
        let grads = tape.backward(total).unwrap();

        let h = 1e-6;
        let check = |analytic: &Tensor, which: usize| {
            for idx in 0..analytic.len() {
                let mut inputs = [a.clone(), b.clone(), m.clone()];
                inputs[which].data_mut()[idx] += h;
                let up = toy_objective(&inputs[0], &inputs[1], &inputs[2], &q, &cfg);
                inputs[which].data_mut()[idx] -= 2.0 * h;
                let down = toy_objective(&inputs[0], &inputs[1], &inputs[2], &q, &cfg);
                let numeric = (up - down) / (2.0 * h);
                let g = analytic.data()[idx];
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-3, "input {which} entry {idx}: analytic {g}, numeric {numeric}");
            }
        };
        check(&grads.wrt(av), 0);
        check(&grads.wrt(bv), 1);
        check(&grads.wrt(mv), 2);
    }

    fn arb_unit(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-1.0..1.0f64, rows * cols)
            .prop_filter("non-degenerate rows", move |v| v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4))
            .prop_map(move |v| unit_rows(rows, cols, &v))
    }

    fn arb_dist(rows: usize, k: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1e-3..1.0f64, rows * k).prop_map(move |v| {
            let mut t = Tensor::matrix(rows, k, v).unwrap();
            for i in 0..rows {
                let s: f64 = t.row(i).iter().sum();
                t.row_mut(i).iter_mut().for_each(|x| *x /= s);
            }
            t
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn alignment_is_nonnegative_and_permutation_invariant(
            (a, b, rot) in (1usize..6).prop_flat_map(|n| (arb_unit(n, 3), arb_unit(n, 3), 0..n)),
            tau in 0.05..2.0f64,
        ) {
            let l = alignment_value(&a, &b, tau).unwrap();
            prop_assert!(l >= -1e-12);
            if a.rows() == 1 {
                prop_assert!(l.abs() < 1e-12);
            }
            let n = a.rows();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let lp = alignment_value(&a.select_rows(&perm).unwrap(), &b.select_rows(&perm).unwrap(), tau).unwrap();
            prop_assert!((l - lp).abs() < 1e-9);
        }

        #[test]
        fn assignment_rows_are_distributions(
            (z, mu) in (1usize..6, 2usize..5).prop_flat_map(|(n, k)| (arb_unit(n, 4), arb_unit(k, 4))),
            tau in 0.05..2.0f64,
        ) {
            let p = soft_assign_value(&z, &mu, tau).unwrap();
            let q = sharpen_targets(&p);
            for i in 0..p.rows() {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!((q.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.row(i).iter().chain(q.row(i)).all(|&v| v >= 0.0));
            }
            let kl = proto_value(&p, &q).unwrap();
            prop_assert!(kl >= -1e-12);
            let ent = entropy_value(&p).unwrap();
            let k = mu.rows() as f64;
            prop_assert!(ent <= 1e-12 && ent >= -k.ln() - 1e-12);
        }

        #[test]
        fn kl_is_zero_only_for_equal_distributions(
            (p, q) in (1usize..5, 2usize..5).prop_flat_map(|(n, k)| (arb_dist(n, k), arb_dist(n, k))),
        ) {
            prop_assert!(proto_value(&p, &p).unwrap().abs() < 1e-12);
            let max_diff = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let kl = proto_value(&p, &q).unwrap();
            if max_diff > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn sharpening_fixes_one_hot(labels in prop::collection::vec(0usize..4, 1..10)) {
            let mut p = Tensor::zeros(vec![labels.len(), 4]);
            for (i, &l) in labels.iter().enumerate() {
                p.set(i, l, 1.0);
            }
            let q = sharpen_targets(&p);
            prop_assert_eq!(&q, &p);
            prop_assert_eq!(sharpen_targets(&q), q);
        }
    }
}
