//! Gradient-free prototype adaptation:
//! `μ_e ← λ μ_e + (1 − λ) E_{z ∈ B_e}[z]`.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::numerics::Matrix;

use super::prototypes::ExpertPrototypes;
use super::routing::RoutingDecision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    /// `B_e` is the set of tokens whose top-k contains `e`.
    Hard,
    /// `B_e` is every token, weighted by its routing probability for `e`.
    Soft,
}

pub fn ema_update(
    prototypes: &ExpertPrototypes,
    latents: &Matrix,
    decision: &RoutingDecision,
    lambda: f64,
    mode: EmaMode,
) -> Result<ExpertPrototypes> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LprError::param(format!(
            "EMA decay must lie in [0, 1], got {lambda}"
        )));
    }
    if latents.rows() != decision.tokens() || latents.cols() != prototypes.d_latent() {
        return Err(LprError::shape(
            "ema_update",
            latents.shape(),
            prototypes.means.shape(),
        ));
    }
    if decision.experts() != prototypes.experts() {
        return Err(LprError::shape(
            "ema_update",
            decision.probs.shape(),
            prototypes.means.shape(),
        ));
    }

    let (m, d) = prototypes.means.shape();
    let mut sums = Matrix::zeros(m, d);
    let mut mass = vec![0.0; m];
    for t in 0..decision.tokens() {
        let z = latents.row(t);
        let mut add = |e: usize, w: f64| {
            mass[e] += w;
            for (s, &v) in sums.row_mut(e).iter_mut().zip(z) {
                *s += w * v;
            }
        };
        match mode {
            EmaMode::Hard => decision.selected(t).iter().for_each(|&e| add(e, 1.0)),
            EmaMode::Soft => (0..m).for_each(|e| add(e, decision.probs[(t, e)])),
        }
    }

    let mut out = prototypes.clone();
    for e in 0..m {
        // Experts that received no tokens keep their prototype.
        if mass[e] <= 0.0 {
            continue;
        }
        for (mu, &s) in out.means.row_mut(e).iter_mut().zip(sums.row(e)) {
            *mu = lambda * *mu + (1.0 - lambda) * s / mass[e];
        }
    }
    out.enforce_constraints();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::routing::route_from_scores;

    fn protos() -> ExpertPrototypes {
        ExpertPrototypes::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]),
            Matrix::zeros(3, 2),
            false,
        )
        .unwrap()
    }

    #[test]
    fn lambda_one_is_identity() {
        let p = protos();
        let z = Matrix::from_rows(&[vec![5.0, 5.0]]);
        let d = route_from_scores(Matrix::row_vector(&[0.0, 1.0, 2.0]), 1).unwrap();
        for mode in [EmaMode::Hard, EmaMode::Soft] {
            assert_eq!(ema_update(&p, &z, &d, 1.0, mode).unwrap(), p);
        }
    }

    #[test]
    fn lambda_zero_hard_copies_the_assigned_token() {
        let p = protos();
        let z = Matrix::from_rows(&[vec![0.25, -0.5]]);
        let d = route_from_scores(Matrix::row_vector(&[0.0, 1.0, 2.0]), 1).unwrap();
        let out = ema_update(&p, &z, &d, 0.0, EmaMode::Hard).unwrap();
        assert_eq!(out.means.row(2), &[0.25, -0.5]);
        assert_eq!(out.means.row(0), p.means.row(0));
        assert_eq!(out.means.row(1), p.means.row(1));
    }

    #[test]
    fn soft_update_matches_hand_computation() {
        let p = ExpertPrototypes::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            Matrix::zeros(2, 2),
            false,
        )
        .unwrap();
        let z = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let mut d = route_from_scores(Matrix::zeros(2, 2), 1).unwrap();
        d.probs = Matrix::from_rows(&[vec![0.75, 0.25], vec![0.5, 0.5]]);
        let out = ema_update(&p, &z, &d, 0.9, EmaMode::Soft).unwrap();
        // Expert 0: weighted mean (0.75·[2,0] + 0.5·[0,4]) / 1.25 = [1.2, 1.6].
        // Expert 1: (0.25·[2,0] + 0.5·[0,4]) / 0.75 = [2/3, 8/3].
        let e0 = [0.9 * 1.0 + 0.1 * 1.2, 0.1 * 1.6];
        let e1 = [0.1 * 2.0 / 3.0, 0.9 + 0.1 * 8.0 / 3.0];
        for c in 0..2 {
            assert!((out.means[(0, c)] - e0[c]).abs() < 1e-12);
            assert!((out.means[(1, c)] - e1[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_when_tokens_sit_on_prototypes() {
        let p = protos();
        let z = Matrix::from_rows(&[p.means.row(0).to_vec(), p.means.row(1).to_vec()]);
        let d = route_from_scores(
            Matrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]),
            1,
        )
        .unwrap();
        let out = ema_update(&p, &z, &d, 0.37, EmaMode::Hard).unwrap();
        assert!(out.means.max_abs_diff(&p.means) < 1e-15);
    }

    #[test]
    fn rejects_bad_lambda() {
        let p = protos();
        let z = Matrix::zeros(1, 2);
        let d = route_from_scores(Matrix::zeros(1, 3), 1).unwrap();
        assert!(matches!(
            ema_update(&p, &z, &d, 1.5, EmaMode::Hard),
            Err(LprError::Param(_))
        ));
        assert!(ema_update(&p, &z, &d, -0.1, EmaMode::Soft).is_err());
    }

    #[test]
    fn unit_ball_is_enforced_after_update() {
        let mut p = protos();
        p.unit_ball = true;
        let z = Matrix::from_rows(&[vec![10.0, 10.0]]);
        let d = route_from_scores(Matrix::row_vector(&[1.0, 0.0, 0.0]), 1).unwrap();
        let out = ema_update(&p, &z, &d, 0.5, EmaMode::Hard).unwrap();
        assert!(crate::numerics::norm(out.means.row(0)) <= 1.0 + 1e-9);
    }
}
