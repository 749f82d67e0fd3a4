//! Storage and Lyapunov functions evaluated on closed-loop states.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ClosedLoop, ClosedLoopState, ControllerKind, ControllerState, LoopOutputs, SimError};
use crate::controllers::{filter_output, tanh_vec};
use crate::dynamics::Manipulator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageKind {
    /// `½k_p|e|² + ½ξᵀHξ`.
    V1,
    /// `½|η − Σw|²`.
    V2,
    /// `½|Aζ − By − Σw|²`.
    V3,
    /// `½k_p|e|² + ½ξᵀHξ + V₂`.
    V,
    /// `V₃ + ½(k_d/h)|ξ̂|² + ½k_p|e|² + ½ξᵀHξ`.
    VBar,
    /// `V₃ + ½(k_d/h)Σ ln cosh ξ̂ᵢ + ½k_p ln(1 + |e|²) + ½ξᵀHξ`.
    U,
    /// As `U` with `(k_d/h)Σ ln cosh ξ̂ᵢ`; its rate is `−k_d Tanh(ξ̂)ᵀξ̂`.
    UDissipative,
}

impl StorageKind {
    pub const ALL: [StorageKind; 7] = [
        Self::V1,
        Self::V2,
        Self::V3,
        Self::V,
        Self::VBar,
        Self::U,
        Self::UDissipative,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::V1 => "V1",
            Self::V2 => "V2",
            Self::V3 => "V3",
            Self::V => "V",
            Self::VBar => "Vbar",
            Self::U => "U",
            Self::UDissipative => "U-dissipative",
        }
    }

    fn needs_sigma(&self) -> bool {
        !matches!(self, Self::V1)
    }

    fn admissible(&self, controller: ControllerKind) -> bool {
        match self {
            Self::V1 => true,
            Self::V2 | Self::V => controller == ControllerKind::FullState,
            Self::V3 | Self::VBar | Self::U | Self::UDissipative => controller.uses_filter(),
        }
    }
}

impl fmt::Display for StorageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StorageKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            "v" => Ok(Self::V),
            "vbar" | "v-bar" => Ok(Self::VBar),
            "u" => Ok(Self::U),
            "u-dissipative" | "udissipative" => Ok(Self::UDissipative),
            other => Err(SimError::InvalidScenario(format!("unknown storage function `{other}`"))),
        }
    }
}

fn kinetic(cl: &ClosedLoop, s: &ClosedLoopState) -> f64 {
    0.5 * s.xi.dot(&(cl.scenario.model.inertia(&s.q) * &s.xi))
}

fn xi_hat(cl: &ClosedLoop, s: &ClosedLoopState) -> Option<DVector<f64>> {
    match &s.ctl {
        ControllerState::VelocityFree(c) => Some(filter_output(&c.chi, &s.q, cl.scenario.gains.h)),
        _ => None,
    }
}

fn log_cosh(x: f64) -> f64 {
    // ln cosh x = |x| + ln(1 + e^{−2|x|}) − ln 2, stable for large |x|.
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Evaluate storage function `kind` at `s`.
pub fn storage_eval(cl: &ClosedLoop, kind: StorageKind, s: &ClosedLoopState) -> Result<f64, SimError> {
    let controller = cl.scenario.controller;
    if !kind.admissible(controller) {
        return Err(SimError::StorageUnavailable { kind, controller });
    }
    if kind.needs_sigma() && cl.sigma.is_none() {
        return Err(SimError::MissingSigma(kind));
    }
    let g = &cl.scenario.gains;
    let e = cl.error(&s.q);
    let half_z = || 0.5 * cl.error_coordinates(s).map_or(0.0, |z| z.norm_squared());
    let value = match kind {
        StorageKind::V1 => 0.5 * g.kp * e.norm_squared() + kinetic(cl, s),
        StorageKind::V2 | StorageKind::V3 => half_z(),
        StorageKind::V => 0.5 * g.kp * e.norm_squared() + kinetic(cl, s) + half_z(),
        StorageKind::VBar => {
            let xh = xi_hat(cl, s).expect("filtered controller state");
            half_z() + 0.5 * g.kd / g.h * xh.norm_squared() + 0.5 * g.kp * e.norm_squared() + kinetic(cl, s)
        }
        StorageKind::U | StorageKind::UDissipative => {
            let xh = xi_hat(cl, s).expect("filtered controller state");
            let coef = if kind == StorageKind::U { 0.5 } else { 1.0 };
            half_z()
                + coef * g.kd / g.h * xh.iter().map(|&x| log_cosh(x)).sum::<f64>()
                + 0.5 * g.kp * e.norm_squared().ln_1p()
                + kinetic(cl, s)
        }
    };
    Ok(value)
}

/// Analytic time derivative of `kind` along the closed loop at `s`.
///
/// `V₁` returns the supplied power `ξᵀ(u − g + d) + k_p eᵀJξ`, which reduces
/// to `ξᵀd` under the passive laws. `V₂`, `V₃` return `−ξᵀd̃`.
/// NaN when `kind` is unavailable for this loop.
pub fn dissipation_rate(cl: &ClosedLoop, kind: StorageKind, s: &ClosedLoopState, out: &LoopOutputs) -> f64 {
    if !kind.admissible(cl.scenario.controller) || (kind.needs_sigma() && cl.sigma.is_none()) {
        return f64::NAN;
    }
    let g = &cl.scenario.gains;
    let model = &cl.scenario.model;
    match kind {
        StorageKind::V1 => {
            let j = model.jacobian(&s.q);
            s.xi.dot(&(&out.u - model.gravity(&s.q) + &out.disturbance.d)) + g.kp * out.e.dot(&(j * &s.xi))
        }
        StorageKind::V2 | StorageKind::V3 => match cl.error_system_output(s) {
            Some(dt) => -s.xi.dot(&dt),
            None => f64::NAN,
        },
        StorageKind::V => -g.kd * s.xi.norm_squared(),
        StorageKind::VBar => match &out.xi_hat {
            Some(xh) => -g.kd * xh.norm_squared(),
            None => f64::NAN,
        },
        StorageKind::U => match &out.xi_hat {
            Some(xh) => {
                let t = tanh_vec(xh);
                -0.5 * g.kd * (t.dot(xh) + t.dot(&s.xi))
            }
            None => f64::NAN,
        },
        StorageKind::UDissipative => match &out.xi_hat {
            Some(xh) => -g.kd * tanh_vec(xh).dot(xh),
            None => f64::NAN,
        },
    }
}
