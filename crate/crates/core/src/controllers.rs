//! Task-space regulators built on Jacobian-transpose feedback.
//!
//! Each law is split into a torque map and a state-derivative map. The
//! velocity-free laws only ever see a [`PositionMeasurement`], which has no
//! velocity field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Manipulator;
use crate::internal_model::InternalModelPair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GainError {
    #[error("gain `{name}` = {value} must be finite and strictly positive")]
    NotPositive { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    /// Task-space stiffness.
    pub kp: f64,
    /// Damping injection.
    pub kd: f64,
    /// Filter gain of `χ̇ = −h(χ + h q)`.
    pub h: f64,
}

impl Gains {
    pub fn new(kp: f64, kd: f64, h: f64) -> Result<Self, GainError> {
        let g = Self { kp, kd, h };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GainError> {
        for (name, value) in [("kp", self.kp), ("kd", self.kd), ("h", self.h)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(GainError::NotPositive { name, value });
            }
        }
        Ok(())
    }
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            kp: 50.0,
            kd: 10.0,
            h: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullStateCtlState {
    pub eta1: DVector<f64>,
    pub eta2: DVector<f64>,
}

impl FullStateCtlState {
    pub fn zeros(ims: &InternalModelPair) -> Self {
        let (l1, l2) = ims.dims();
        Self {
            eta1: DVector::zeros(l1),
            eta2: DVector::zeros(l2),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.eta1.norm_squared() + self.eta2.norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFreeCtlState {
    pub zeta1: DVector<f64>,
    pub zeta2: DVector<f64>,
    pub chi: DVector<f64>,
}

impl VelocityFreeCtlState {
    pub fn zeros(ims: &InternalModelPair, n: usize) -> Self {
        let (l1, l2) = ims.dims();
        Self {
            zeta1: DVector::zeros(l1),
            zeta2: DVector::zeros(l2),
            chi: DVector::zeros(n),
        }
    }
}

/// Measurements available to a full-state law.
#[derive(Debug, Clone, PartialEq)]
pub struct FullMeasurement {
    pub q: DVector<f64>,
    /// Task-space error `e = f(q) − x_d`.
    pub e: DVector<f64>,
    pub xi: DVector<f64>,
}

/// Measurements available to a velocity-free law: positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMeasurement {
    pub q: DVector<f64>,
    pub e: DVector<f64>,
}

impl FullMeasurement {
    pub fn positions(&self) -> PositionMeasurement {
        PositionMeasurement {
            q: self.q.clone(),
            e: self.e.clone(),
        }
    }
}

/// Torque of a velocity-free law together with the filter output `ξ̂ = χ + h q`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredTorque {
    pub torque: DVector<f64>,
    pub xi_hat: DVector<f64>,
}

/// Joint-space passive law `u = −k Jᵀ x + v + g`.
pub fn passive_reg_joint(
    model: &dyn Manipulator,
    q: &DVector<f64>,
    x: &DVector<f64>,
    v: &DVector<f64>,
    k: f64,
) -> DVector<f64> {
    -k * model.jacobian(q).transpose() * x + v + model.gravity(q)
}

/// Task-space passive law `u = −k Jᵀ x + Jᵀ F + g`.
pub fn passive_reg_task(
    model: &dyn Manipulator,
    q: &DVector<f64>,
    x: &DVector<f64>,
    force: &DVector<f64>,
    k: f64,
) -> DVector<f64> {
    let jt = model.jacobian(q).transpose();
    -k * &jt * x + &jt * force + model.gravity(q)
}

/// `B₁ᵀ η₁ + Jᵀ B₂ᵀ η₂`.
pub fn full_state_compensation(
    ctl: &FullStateCtlState,
    jacobian: &DMatrix<f64>,
    ims: &InternalModelPair,
) -> DVector<f64> {
    ims.torque.b.transpose() * &ctl.eta1 + jacobian.transpose() * (ims.force.b.transpose() * &ctl.eta2)
}

pub fn full_state_torque(
    ctl: &FullStateCtlState,
    meas: &FullMeasurement,
    model: &dyn Manipulator,
    ims: &InternalModelPair,
    gains: &Gains,
) -> DVector<f64> {
    let j = model.jacobian(&meas.q);
    -gains.kp * j.transpose() * &meas.e - gains.kd * &meas.xi
        + model.gravity(&meas.q)
        + full_state_compensation(ctl, &j, ims)
}

pub fn full_state_ctl_derivative(
    ctl: &FullStateCtlState,
    meas: &FullMeasurement,
    model: &dyn Manipulator,
    ims: &InternalModelPair,
) -> FullStateCtlState {
    let xdot = model.jacobian(&meas.q) * &meas.xi;
    FullStateCtlState {
        eta1: &ims.torque.a * &ctl.eta1 - &ims.torque.b * &meas.xi,
        eta2: &ims.force.a * &ctl.eta2 - &ims.force.b * xdot,
    }
}

/// Filter output `ξ̂ = χ + h q`.
pub fn filter_output(chi: &DVector<f64>, q: &DVector<f64>, h: f64) -> DVector<f64> {
    chi + h * q
}

/// Internal-model outputs `Aᵢ ζᵢ − Bᵢ yᵢ` with `y₁ = q`, `y₂ = e`.
pub fn velocity_free_im_outputs(
    ctl: &VelocityFreeCtlState,
    meas: &PositionMeasurement,
    ims: &InternalModelPair,
) -> (DVector<f64>, DVector<f64>) {
    (
        &ims.torque.a * &ctl.zeta1 - &ims.torque.b * &meas.q,
        &ims.force.a * &ctl.zeta2 - &ims.force.b * &meas.e,
    )
}

/// `B₁ᵀ(A₁ζ₁ − B₁q) + Jᵀ B₂ᵀ(A₂ζ₂ − B₂e)`.
pub fn velocity_free_compensation(
    ctl: &VelocityFreeCtlState,
    meas: &PositionMeasurement,
    jacobian: &DMatrix<f64>,
    ims: &InternalModelPair,
) -> DVector<f64> {
    let (o1, o2) = velocity_free_im_outputs(ctl, meas, ims);
    ims.torque.b.transpose() * o1 + jacobian.transpose() * (ims.force.b.transpose() * o2)
}

pub fn velocity_free_torque(
    ctl: &VelocityFreeCtlState,
    meas: &PositionMeasurement,
    model: &dyn Manipulator,
    ims: &InternalModelPair,
    gains: &Gains,
) -> FilteredTorque {
    let j = model.jacobian(&meas.q);
    let xi_hat = filter_output(&ctl.chi, &meas.q, gains.h);
    let torque = -gains.kp * j.transpose() * &meas.e - gains.kd * &xi_hat
        + model.gravity(&meas.q)
        + velocity_free_compensation(ctl, meas, &j, ims);
    FilteredTorque { torque, xi_hat }
}

pub fn velocity_free_ctl_derivative(
    ctl: &VelocityFreeCtlState,
    meas: &PositionMeasurement,
    ims: &InternalModelPair,
    gains: &Gains,
) -> VelocityFreeCtlState {
    let (zeta1, zeta2) = velocity_free_im_outputs(ctl, meas, ims);
    VelocityFreeCtlState {
        zeta1,
        zeta2,
        chi: -gains.h * filter_output(&ctl.chi, &meas.q, gains.h),
    }
}

/// Componentwise `tanh`.
pub fn tanh_vec(x: &DVector<f64>) -> DVector<f64> {
    x.map(f64::tanh)
}

/// `e / (1 + eᵀe)`.
pub fn saturate_error(e: &DVector<f64>) -> DVector<f64> {
    e / (1.0 + e.norm_squared())
}

/// Bounded stabilization part `−k_p Jᵀ e/(1+eᵀe) − k_d Tanh(ξ̂)`.
pub fn saturated_stabilization(
    jacobian: &DMatrix<f64>,
    e: &DVector<f64>,
    xi_hat: &DVector<f64>,
    gains: &Gains,
) -> DVector<f64> {
    -gains.kp * jacobian.transpose() * saturate_error(e) - gains.kd * tanh_vec(xi_hat)
}

/// `k_p σ_max(J)/2 + k_d √n`, an upper bound on the saturated stabilization norm.
pub fn saturated_stabilization_bound(jacobian: &DMatrix<f64>, gains: &Gains) -> f64 {
    let sigma_max = jacobian.singular_values().max();
    gains.kp * sigma_max / 2.0 + gains.kd * (jacobian.ncols() as f64).sqrt()
}

pub fn saturated_torque(
    ctl: &VelocityFreeCtlState,
    meas: &PositionMeasurement,
    model: &dyn Manipulator,
    ims: &InternalModelPair,
    gains: &Gains,
) -> FilteredTorque {
    let j = model.jacobian(&meas.q);
    let xi_hat = filter_output(&ctl.chi, &meas.q, gains.h);
    let torque = saturated_stabilization(&j, &meas.e, &xi_hat, gains)
        + model.gravity(&meas.q)
        + velocity_free_compensation(ctl, meas, &j, ims);
    FilteredTorque { torque, xi_hat }
}
