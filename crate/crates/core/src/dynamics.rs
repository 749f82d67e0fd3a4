//! Rigid-manipulator kinematics and dynamics.
//!
//! The [`Manipulator`] trait exposes the closed-form maps `f`, `J`, `H`, `C`
//! and `g` of an n-link arm. [`TwoLinkPlanar`] is the concrete point-mass
//! two-link planar arm used by the bundled scenarios.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// |det J| below this value is reported as a singular configuration.
pub const SINGULARITY_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid manipulator parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("inertia matrix is not positive definite at q = {q:?}")]
    NotPositiveDefinite { q: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got} for {what}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Physical parameters of the point-mass two-link planar arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManipulatorParams {
    /// Link lengths (m).
    pub l1: f64,
    pub l2: f64,
    /// Point masses at the distal end of each link (kg).
    pub m1: f64,
    pub m2: f64,
    /// Gravitational acceleration (m/s²), acting along −y of the base frame.
    pub g0: f64,
}

impl ManipulatorParams {
    pub const N_JOINTS: usize = 2;

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [("l1", self.l1), ("l2", self.l2), ("m1", self.m1), ("m2", self.m2)];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(DynamicsError::InvalidParameter {
                    name,
                    value,
                    reason: "must be finite and strictly positive",
                });
            }
        }
        if !(self.g0.is_finite() && self.g0 >= 0.0) {
            return Err(DynamicsError::InvalidParameter {
                name: "g0",
                value: self.g0,
                reason: "must be finite and non-negative",
            });
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        Self::N_JOINTS
    }

    /// Radii of the reachable annulus `[|l1 − l2|, l1 + l2]`.
    pub fn reach(&self) -> (f64, f64) {
        ((self.l1 - self.l2).abs(), self.l1 + self.l2)
    }
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        Self {
            l1: 0.2,
            l2: 0.2,
            m1: 1.0,
            m2: 1.0,
            g0: 9.81,
        }
    }
}

/// Joint positions `q` (rad) and velocities `xi` (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub xi: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, xi: DVector<f64>) -> Self {
        Self { q, xi }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            xi: DVector::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsMatrices {
    /// Inertia matrix `H(q)`.
    pub h: DMatrix<f64>,
    /// Coriolis/centrifugal matrix `C(q, ξ)` (Christoffel form).
    pub c: DMatrix<f64>,
    /// Gravity torque `g(q)`.
    pub g: DVector<f64>,
}

/// Kinematic and dynamic model of a rigid arm with a square Jacobian.
pub trait Manipulator: Send + Sync {
    fn dof(&self) -> usize;

    fn forward_kinematics(&self, q: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64>;

    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64>;

    /// `∂H/∂q_i` evaluated at `q`.
    fn inertia_partial(&self, q: &DVector<f64>, i: usize) -> DMatrix<f64>;

    fn coriolis(&self, q: &DVector<f64>, xi: &DVector<f64>) -> DMatrix<f64>;

    fn gravity(&self, q: &DVector<f64>) -> DVector<f64>;

    fn dynamics_matrices(&self, state: &JointState) -> DynamicsMatrices {
        DynamicsMatrices {
            h: self.inertia(&state.q),
            c: self.coriolis(&state.q, &state.xi),
            g: self.gravity(&state.q),
        }
    }

    /// `Ḣ(q, ξ) = Σ_i (∂H/∂q_i) ξ_i`.
    fn inertia_rate(&self, q: &DVector<f64>, xi: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let mut hdot = DMatrix::zeros(n, n);
        for i in 0..n {
            hdot += self.inertia_partial(q, i) * xi[i];
        }
        hdot
    }

    fn jacobian_determinant(&self, q: &DVector<f64>) -> f64 {
        self.jacobian(q).determinant()
    }
}

/// Two-link planar arm with point masses at the link tips.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TwoLinkPlanar {
    pub params: ManipulatorParams,
}

impl TwoLinkPlanar {
    pub fn new(params: ManipulatorParams) -> Result<Self, DynamicsError> {
        params.validate()?;
        Ok(Self { params })
    }

    fn check(q: &DVector<f64>) {
        assert_eq!(q.len(), 2, "two-link arm expects a 2-vector of joint values");
    }
}

impl Manipulator for TwoLinkPlanar {
    fn dof(&self) -> usize {
        2
    }

    fn forward_kinematics(&self, q: &DVector<f64>) -> DVector<f64> {
        Self::check(q);
        let ManipulatorParams { l1, l2, .. } = self.params;
        let q12 = q[0] + q[1];
        DVector::from_vec(vec![l1 * q[0].cos() + l2 * q12.cos(), l1 * q[0].sin() + l2 * q12.sin()])
    }

    fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        Self::check(q);
        let ManipulatorParams { l1, l2, .. } = self.params;
        let (s1, c1) = q[0].sin_cos();
        let (s12, c12) = (q[0] + q[1]).sin_cos();
        DMatrix::from_row_slice(2, 2, &[-l1 * s1 - l2 * s12, -l2 * s12, l1 * c1 + l2 * c12, l2 * c12])
    }

    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64> {
        Self::check(q);
        let ManipulatorParams { l1, l2, m1, m2, .. } = self.params;
        let c2 = q[1].cos();
        let h22 = m2 * l2 * l2;
        let h12 = h22 + m2 * l1 * l2 * c2;
        let h11 = (m1 + m2) * l1 * l1 + h22 + 2.0 * m2 * l1 * l2 * c2;
        DMatrix::from_row_slice(2, 2, &[h11, h12, h12, h22])
    }

    fn inertia_partial(&self, q: &DVector<f64>, i: usize) -> DMatrix<f64> {
        Self::check(q);
        match i {
            0 => DMatrix::zeros(2, 2),
            1 => {
                let ManipulatorParams { l1, l2, m2, .. } = self.params;
                let a = m2 * l1 * l2 * q[1].sin();
                DMatrix::from_row_slice(2, 2, &[-2.0 * a, -a, -a, 0.0])
            }
            _ => panic!("joint index {i} out of range for a two-link arm"),
        }
    }

    fn coriolis(&self, q: &DVector<f64>, xi: &DVector<f64>) -> DMatrix<f64> {
        Self::check(q);
        let ManipulatorParams { l1, l2, m2, .. } = self.params;
        let a = m2 * l1 * l2 * q[1].sin();
        DMatrix::from_row_slice(2, 2, &[-a * xi[1], -a * (xi[0] + xi[1]), a * xi[0], 0.0])
    }

    fn gravity(&self, q: &DVector<f64>) -> DVector<f64> {
        Self::check(q);
        let ManipulatorParams { l1, l2, m1, m2, g0 } = self.params;
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        let g2 = m2 * g0 * l2 * c12;
        DVector::from_vec(vec![(m1 + m2) * g0 * l1 * c1 + g2, g2])
    }

    fn jacobian_determinant(&self, q: &DVector<f64>) -> f64 {
        Self::check(q);
        self.params.l1 * self.params.l2 * q[1].sin()
    }
}

/// Joint accelerations `H⁻¹(u + d − Cξ − g)`.
pub fn forward_dynamics(
    model: &dyn Manipulator,
    state: &JointState,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    let n = model.dof();
    for (what, len) in [
        ("q", state.q.len()),
        ("xi", state.xi.len()),
        ("u", u.len()),
        ("d", d.len()),
    ] {
        if len != n {
            return Err(DynamicsError::Dimension {
                what,
                expected: n,
                got: len,
            });
        }
    }
    let m = model.dynamics_matrices(state);
    let rhs = u + d - &m.c * &state.xi - &m.g;
    let chol = m.h.cholesky().ok_or_else(|| DynamicsError::NotPositiveDefinite {
        q: state.q.iter().copied().collect(),
    })?;
    Ok(chol.solve(&rhs))
}

/// Total mechanical kinetic energy `½ ξᵀ H(q) ξ`.
pub fn kinetic_energy(model: &dyn Manipulator, state: &JointState) -> f64 {
    0.5 * state.xi.dot(&(model.inertia(&state.q) * &state.xi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn light_arm() -> TwoLinkPlanar {
        TwoLinkPlanar::new(ManipulatorParams {
            l1: 0.2,
            l2: 0.2,
            m1: 1.0,
            m2: 1.0,
            g0: 9.81,
        })
        .unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn forward_kinematics_examples() {
        let arm = light_arm();
        let x = arm.forward_kinematics(&v(&[0.0, 0.0]));
        assert_abs_diff_eq!(x[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-15);

        // 0.2 + 0.2 cos(π/4), 0.2 sin(π/4)
        let x = arm.forward_kinematics(&v(&[0.0, FRAC_PI_4]));
        assert_abs_diff_eq!(x[0], 0.341_421_356_237_309_5, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.141_421_356_237_309_5, epsilon = 1e-15);

        let x = arm.forward_kinematics(&v(&[PI, 0.0]));
        assert_abs_diff_eq!(x[0], -0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_examples() {
        let arm = light_arm();
        let j = arm.jacobian(&v(&[0.0, 0.0]));
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.4, 0.2]);
        assert_abs_diff_eq!(j, expected, epsilon = 1e-15);

        let j = arm.jacobian(&v(&[0.0, FRAC_PI_2]));
        let expected = DMatrix::from_row_slice(2, 2, &[-0.2, -0.2, 0.2, 0.0]);
        assert_abs_diff_eq!(j, expected, epsilon = 1e-15);

        for q1 in [-2.0, 0.3, 1.7] {
            let q = v(&[q1, 0.0]);
            assert_abs_diff_eq!(arm.jacobian(&q).determinant(), 0.0, epsilon = 1e-15);
            assert_eq!(arm.jacobian_determinant(&q), 0.0);
        }
    }

    #[test]
    fn dynamics_matrix_examples() {
        let arm = light_arm();
        let m = arm.dynamics_matrices(&JointState::at_rest(v(&[0.7, FRAC_PI_2])));
        let expected = DMatrix::from_row_slice(2, 2, &[0.12, 0.04, 0.04, 0.04]);
        assert_abs_diff_eq!(m.h, expected, epsilon = 1e-15);
        assert_eq!(m.c, DMatrix::zeros(2, 2));

        let flat = TwoLinkPlanar::new(ManipulatorParams { g0: 0.0, ..arm.params }).unwrap();
        assert_eq!(flat.gravity(&v(&[0.3, -1.1])), DVector::zeros(2));
    }

    #[test]
    fn gravity_matches_potential_gradient() {
        let arm = light_arm();
        let p = arm.params;
        let potential = |q: &DVector<f64>| {
            let x = arm.forward_kinematics(q);
            p.m1 * p.g0 * p.l1 * q[0].sin() + p.m2 * p.g0 * x[1]
        };
        let q = v(&[0.4, -0.9]);
        let g = arm.gravity(&q);
        let step = 1e-6;
        for i in 0..2 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += step;
            qm[i] -= step;
            let fd = (potential(&qp) - potential(&qm)) / (2.0 * step);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn forward_dynamics_examples() {
        let arm = light_arm();
        let q = v(&[0.0, FRAC_PI_4]);
        let st = JointState::at_rest(q.clone());
        let g = arm.gravity(&q);
        let zero = DVector::zeros(2);

        let acc = forward_dynamics(&arm, &st, &g, &zero).unwrap();
        assert_abs_diff_eq!(acc, zero, epsilon = 1e-12);

        let acc = forward_dynamics(&arm, &st, &zero, &g).unwrap();
        assert_abs_diff_eq!(acc, zero, epsilon = 1e-12);

        // Solve H a = [0.01, 0] with Cramer's rule.
        let u = &g + v(&[0.01, 0.0]);
        let acc = forward_dynamics(&arm, &st, &u, &zero).unwrap();
        let h = arm.inertia(&q);
        let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
        let expected = v(&[0.01 * h[(1, 1)] / det, -0.01 * h[(1, 0)] / det]);
        assert_abs_diff_eq!(acc, expected, epsilon = 1e-12);
    }

    #[test]
    fn forward_dynamics_residual() {
        let arm = light_arm();
        let st = JointState::new(v(&[0.3, 1.2]), v(&[-2.0, 0.7]));
        let u = v(&[0.5, -1.5]);
        let d = v(&[0.05, 0.02]);
        let acc = forward_dynamics(&arm, &st, &u, &d).unwrap();
        let m = arm.dynamics_matrices(&st);
        let residual = &m.h * &acc + &m.c * &st.xi + &m.g - &u - &d;
        assert!(residual.amax() < 1e-10);
    }

    #[test]
    fn forward_dynamics_rejects_bad_dimensions() {
        let arm = light_arm();
        let st = JointState::at_rest(v(&[0.0, 0.5]));
        let err = forward_dynamics(&arm, &st, &v(&[1.0]), &DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, DynamicsError::Dimension { what: "u", .. }));
    }

    /// A deliberately broken model whose inertia loses definiteness.
    struct Degenerate;

    impl Manipulator for Degenerate {
        fn dof(&self) -> usize {
            2
        }
        fn forward_kinematics(&self, q: &DVector<f64>) -> DVector<f64> {
            q.clone()
        }
        fn jacobian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::identity(2, 2)
        }
        fn inertia(&self, _q: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])
        }
        fn inertia_partial(&self, _q: &DVector<f64>, _i: usize) -> DMatrix<f64> {
            DMatrix::zeros(2, 2)
        }
        fn coriolis(&self, _q: &DVector<f64>, _xi: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(2, 2)
        }
        fn gravity(&self, _q: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(2)
        }
    }

    #[test]
    fn non_positive_definite_inertia_is_an_error() {
        let st = JointState::at_rest(DVector::zeros(2));
        let err = forward_dynamics(&Degenerate, &st, &DVector::zeros(2), &DVector::zeros(2));
        assert!(matches!(err, Err(DynamicsError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn parameter_validation() {
        let mut p = light_arm().params;
        p.m2 = 0.0;
        assert!(p.validate().is_err());
        p.m2 = 1.0;
        p.g0 = -1.0;
        assert!(p.validate().is_err());
        p.g0 = 0.0;
        assert!(p.validate().is_ok());
    }
}
