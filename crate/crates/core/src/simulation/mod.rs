//! Closed-loop assembly (plant + exosystem + controller), fixed-step
//! integration, trajectory logging and run metrics.

pub mod integrator;
pub mod metrics;
pub mod storage;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{self, FullMeasurement, FullStateCtlState, Gains, PositionMeasurement, VelocityFreeCtlState};
use crate::dynamics::{
    self, DynamicsError, JointState, Manipulator, ManipulatorParams, TwoLinkPlanar, SINGULARITY_THRESHOLD,
};
use crate::exosystem::{reference_sinusoids, DisturbanceSample, ExoError, ExosystemSpec};
use crate::internal_model::{reference_internal_models, stack_sigma, InternalModelError, InternalModelPair};

pub use integrator::{rk4_step, IntegrationError, DIVERGENCE_LIMIT};
pub use metrics::{metrics, RunMetrics};
pub use storage::{storage_eval, StorageKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Exosystem(#[from] ExoError),
    #[error(transparent)]
    InternalModel(#[from] InternalModelError),
    #[error("state diverged at t = {t}: component {index} = {value}")]
    Diverged { t: f64, index: usize, value: f64 },
    #[error("storage function {0} needs the regulator solution, which does not exist for this scenario")]
    MissingSigma(StorageKind),
    #[error("storage function {kind} is not defined for the {controller} controller")]
    StorageUnavailable {
        kind: StorageKind,
        controller: ControllerKind,
    },
}

impl From<IntegrationError<SimError>> for SimError {
    fn from(e: IntegrationError<SimError>) -> Self {
        match e {
            IntegrationError::BadStep(dt) => SimError::InvalidScenario(format!("step size {dt}")),
            IntegrationError::Diverged { t, index, value } => SimError::Diverged { t, index, value },
            IntegrationError::Vector(inner) => inner,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    FullState,
    VelocityFree,
    Saturated,
    PassiveJoint,
    PassiveTask,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FullState => "full-state",
            Self::VelocityFree => "velocity-free",
            Self::Saturated => "saturated",
            Self::PassiveJoint => "passive-joint",
            Self::PassiveTask => "passive-task",
        }
    }

    pub fn uses_filter(&self) -> bool {
        matches!(self, Self::VelocityFree | Self::Saturated)
    }

    /// Storage function logged for runs under this law.
    pub fn storage_kind(&self) -> StorageKind {
        match self {
            Self::FullState => StorageKind::V,
            Self::VelocityFree => StorageKind::VBar,
            Self::Saturated => StorageKind::UDissipative,
            Self::PassiveJoint | Self::PassiveTask => StorageKind::V1,
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown controller `{0}` (expected full, vf, sat, passive-p1 or passive-p2)")]
pub struct UnknownController(pub String);

impl FromStr for ControllerKind {
    type Err = UnknownController;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "full-state" => Ok(Self::FullState),
            "vf" | "velocity-free" => Ok(Self::VelocityFree),
            "sat" | "saturated" => Ok(Self::Saturated),
            "passive-p1" | "passive-joint" | "p1" => Ok(Self::PassiveJoint),
            "passive-p2" | "passive-task" | "p2" => Ok(Self::PassiveTask),
            other => Err(UnknownController(other.to_string())),
        }
    }
}

/// Everything needed to run one closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: TwoLinkPlanar,
    pub exo: ExosystemSpec,
    pub ims: InternalModelPair,
    pub gains: Gains,
    pub controller: ControllerKind,
    pub x_d: DVector<f64>,
    pub q0: DVector<f64>,
    pub xi0: DVector<f64>,
    /// Packed initial controller state; zeros when `None`.
    pub ctl0: Option<DVector<f64>>,
    pub t_end: f64,
    pub dt: f64,
    pub settle_tol: f64,
}

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_T_END: f64 = 20.0;
pub const DEFAULT_SETTLE_TOL: f64 = 1e-3;

impl Scenario {
    /// The reference two-simulation setup: four 0.1-amplitude tones at
    /// ω = 1..4, `k_p = 50`, `k_d = 10`, `h = 100`, `q₀ = [0, π/4]`,
    /// `x_d = [0.064, 0.290]` and zero controller initial states.
    pub fn reference(controller: ControllerKind) -> Self {
        Self {
            model: TwoLinkPlanar::new(ManipulatorParams::default()).expect("default parameters are valid"),
            exo: ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).expect("reference tones are valid"),
            ims: reference_internal_models(),
            gains: Gains::default(),
            controller,
            x_d: DVector::from_vec(vec![0.064, 0.290]),
            q0: DVector::from_vec(vec![0.0, std::f64::consts::FRAC_PI_4]),
            xi0: DVector::zeros(2),
            ctl0: None,
            t_end: DEFAULT_T_END,
            dt: DEFAULT_DT,
            settle_tol: DEFAULT_SETTLE_TOL,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.model.dof()
    }

    /// Number of logged samples, `floor(t_end / dt) + 1`.
    pub fn n_samples(&self) -> usize {
        ((self.t_end / self.dt) * (1.0 + 1e-12)).floor() as usize + 1
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidScenario(msg));
        self.model.params.validate()?;
        if let Err(e) = self.gains.validate() {
            return bad(e.to_string());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.t_end.is_finite() && self.t_end > self.dt) {
            return bad(format!("t_end = {} must exceed dt = {}", self.t_end, self.dt));
        }
        if !(self.settle_tol.is_finite() && self.settle_tol > 0.0) {
            return bad(format!("settle_tol = {} must be positive", self.settle_tol));
        }
        let n = self.n_joints();
        for (what, len) in [("q0", self.q0.len()), ("xi0", self.xi0.len()), ("x_d", self.x_d.len())] {
            if len != n {
                return bad(format!("{what} has length {len}, expected {n}"));
            }
        }
        if self.exo.n_channels() != n || self.ims.torque.n_channels() != n || self.ims.force.n_channels() != n {
            return bad("exosystem and internal models must have one channel per joint".into());
        }
        let (inner, outer) = self.model.params.reach();
        let r = self.x_d.norm();
        if r < inner || r > outer {
            return bad(format!(
                "target x_d = {:?} (radius {r:.4}) lies outside the reachable annulus [{inner:.4}, {outer:.4}]",
                self.x_d.as_slice()
            ));
        }
        if let Some(c) = &self.ctl0 {
            let expected = ControllerLayout::new(self).ctl_len();
            if c.len() != expected {
                return bad(format!(
                    "initial controller state has length {}, expected {expected}",
                    c.len()
                ));
            }
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !finite(&self.q0) || !finite(&self.xi0) || !finite(&self.x_d) {
            return bad("initial state and target must be finite".into());
        }
        Ok(())
    }

    pub fn initial_state(&self) -> ClosedLoopState {
        let layout = ControllerLayout::new(self);
        let ctl = match &self.ctl0 {
            Some(v) => layout.unpack(v.as_slice()),
            None => layout.zeros(),
        };
        ClosedLoopState {
            w: self.exo.w0.clone(),
            q: self.q0.clone(),
            xi: self.xi0.clone(),
            ctl,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerState {
    FullState(FullStateCtlState),
    VelocityFree(VelocityFreeCtlState),
    Stateless,
}

impl ControllerState {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Self::FullState(c) => c.eta1.iter().chain(c.eta2.iter()).copied().collect(),
            Self::VelocityFree(c) => c
                .zeta1
                .iter()
                .chain(c.zeta2.iter())
                .chain(c.chi.iter())
                .copied()
                .collect(),
            Self::Stateless => Vec::new(),
        }
    }
}

/// Dimensions of the controller part of the packed state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ControllerLayout {
    kind: ControllerKind,
    l1: usize,
    l2: usize,
    n: usize,
}

impl ControllerLayout {
    fn new(scn: &Scenario) -> Self {
        let (l1, l2) = scn.ims.dims();
        Self {
            kind: scn.controller,
            l1,
            l2,
            n: scn.n_joints(),
        }
    }

    fn ctl_len(&self) -> usize {
        match self.kind {
            ControllerKind::FullState => self.l1 + self.l2,
            ControllerKind::VelocityFree | ControllerKind::Saturated => self.l1 + self.l2 + self.n,
            ControllerKind::PassiveJoint | ControllerKind::PassiveTask => 0,
        }
    }

    fn zeros(&self) -> ControllerState {
        self.unpack(&vec![0.0; self.ctl_len()])
    }

    fn unpack(&self, v: &[f64]) -> ControllerState {
        let (l1, l2, n) = (self.l1, self.l2, self.n);
        match self.kind {
            ControllerKind::FullState => ControllerState::FullState(FullStateCtlState {
                eta1: DVector::from_column_slice(&v[..l1]),
                eta2: DVector::from_column_slice(&v[l1..l1 + l2]),
            }),
            ControllerKind::VelocityFree | ControllerKind::Saturated => {
                ControllerState::VelocityFree(VelocityFreeCtlState {
                    zeta1: DVector::from_column_slice(&v[..l1]),
                    zeta2: DVector::from_column_slice(&v[l1..l1 + l2]),
                    chi: DVector::from_column_slice(&v[l1 + l2..l1 + l2 + n]),
                })
            }
            ControllerKind::PassiveJoint | ControllerKind::PassiveTask => ControllerState::Stateless,
        }
    }
}

/// Closed-loop state `(w, q, ξ, controller state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub w: DVector<f64>,
    pub q: DVector<f64>,
    pub xi: DVector<f64>,
    pub ctl: ControllerState,
}

impl ClosedLoopState {
    /// Packed as `[w, q, ξ, ctl]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v: Vec<f64> = Vec::with_capacity(self.w.len() + 2 * self.q.len() + 16);
        v.extend(self.w.iter());
        v.extend(self.q.iter());
        v.extend(self.xi.iter());
        v.extend(self.ctl.to_vec());
        DVector::from_vec(v)
    }

    pub fn joint_state(&self) -> JointState {
        JointState::new(self.q.clone(), self.xi.clone())
    }
}

/// Signals evaluated alongside the vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutputs {
    pub e: DVector<f64>,
    pub u: DVector<f64>,
    pub disturbance: DisturbanceSample,
    pub xi_hat: Option<DVector<f64>>,
    /// Internal-model part of the control torque.
    pub compensation: DVector<f64>,
    pub det_j: f64,
}

/// A scenario with its regulator solution and stacked matrices precomputed.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub scenario: Scenario,
    layout: ControllerLayout,
    /// `Σ = [Σ₁; Σ₂]` when the regulator equations are solvable.
    pub sigma: Option<DMatrix<f64>>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ClosedLoop {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let sigma = match scenario.ims.solve(&scenario.exo) {
            Ok((s1, s2)) => Some(stack_sigma(&s1.sigma, &s2.sigma)),
            Err(InternalModelError::NoSolution { residual }) => {
                log::warn!(
                    "regulator equations unsolvable (residual {residual:.3e}); error-coordinate storage is unavailable"
                );
                None
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            layout: ControllerLayout::new(scenario),
            a: scenario.ims.stacked_a(),
            b: scenario.ims.stacked_b(),
            scenario: scenario.clone(),
            sigma,
        })
    }

    pub fn unpack(&self, x: &DVector<f64>) -> ClosedLoopState {
        let p = self.scenario.exo.dim();
        let n = self.layout.n;
        ClosedLoopState {
            w: DVector::from_column_slice(&x.as_slice()[..p]),
            q: DVector::from_column_slice(&x.as_slice()[p..p + n]),
            xi: DVector::from_column_slice(&x.as_slice()[p + n..p + 2 * n]),
            ctl: self.layout.unpack(&x.as_slice()[p + 2 * n..]),
        }
    }

    pub fn error(&self, q: &DVector<f64>) -> DVector<f64> {
        self.scenario.model.forward_kinematics(q) - &self.scenario.x_d
    }

    /// Control torque and auxiliary signals at `s`.
    pub fn outputs(&self, s: &ClosedLoopState) -> Result<LoopOutputs, SimError> {
        let scn = &self.scenario;
        let model = &scn.model;
        let j = model.jacobian(&s.q);
        let e = self.error(&s.q);
        let disturbance = scn.exo.disturbance(&s.w, &j)?;
        let (u, xi_hat, compensation) = match (&scn.controller, &s.ctl) {
            (ControllerKind::FullState, ControllerState::FullState(c)) => {
                let meas = FullMeasurement {
                    q: s.q.clone(),
                    e: e.clone(),
                    xi: s.xi.clone(),
                };
                let u = controllers::full_state_torque(c, &meas, model, &scn.ims, &scn.gains);
                (u, None, controllers::full_state_compensation(c, &j, &scn.ims))
            }
            (ControllerKind::VelocityFree | ControllerKind::Saturated, ControllerState::VelocityFree(c)) => {
                let meas = PositionMeasurement {
                    q: s.q.clone(),
                    e: e.clone(),
                };
                let out = if scn.controller == ControllerKind::Saturated {
                    controllers::saturated_torque(c, &meas, model, &scn.ims, &scn.gains)
                } else {
                    controllers::velocity_free_torque(c, &meas, model, &scn.ims, &scn.gains)
                };
                let comp = controllers::velocity_free_compensation(c, &meas, &j, &scn.ims);
                (out.torque, Some(out.xi_hat), comp)
            }
            (ControllerKind::PassiveJoint, ControllerState::Stateless) => {
                let v = DVector::zeros(self.layout.n);
                (
                    controllers::passive_reg_joint(model, &s.q, &e, &v, scn.gains.kp),
                    None,
                    DVector::zeros(self.layout.n),
                )
            }
            (ControllerKind::PassiveTask, ControllerState::Stateless) => {
                let f = DVector::zeros(self.layout.n);
                (
                    controllers::passive_reg_task(model, &s.q, &e, &f, scn.gains.kp),
                    None,
                    DVector::zeros(self.layout.n),
                )
            }
            _ => {
                return Err(SimError::InvalidScenario(
                    "controller state does not match the controller kind".into(),
                ))
            }
        };
        Ok(LoopOutputs {
            e,
            u,
            disturbance,
            xi_hat,
            compensation,
            det_j: model.jacobian_determinant(&s.q),
        })
    }

    /// Time derivative of the closed-loop state.
    pub fn derivative(&self, s: &ClosedLoopState) -> Result<(ClosedLoopState, LoopOutputs), SimError> {
        let scn = &self.scenario;
        let out = self.outputs(s)?;
        let w_dot = scn.exo.derivative(&s.w)?;
        let xi_dot = dynamics::forward_dynamics(&scn.model, &s.joint_state(), &out.u, &out.disturbance.d)?;
        let ctl_dot = match &s.ctl {
            ControllerState::FullState(c) => {
                let meas = FullMeasurement {
                    q: s.q.clone(),
                    e: out.e.clone(),
                    xi: s.xi.clone(),
                };
                ControllerState::FullState(controllers::full_state_ctl_derivative(c, &meas, &scn.model, &scn.ims))
            }
            ControllerState::VelocityFree(c) => {
                let meas = PositionMeasurement {
                    q: s.q.clone(),
                    e: out.e.clone(),
                };
                ControllerState::VelocityFree(controllers::velocity_free_ctl_derivative(
                    c, &meas, &scn.ims, &scn.gains,
                ))
            }
            ControllerState::Stateless => ControllerState::Stateless,
        };
        Ok((
            ClosedLoopState {
                w: w_dot,
                q: s.xi.clone(),
                xi: xi_dot,
                ctl: ctl_dot,
            },
            out,
        ))
    }

    pub fn vector_field(&self, x: &DVector<f64>) -> Result<DVector<f64>, SimError> {
        Ok(self.derivative(&self.unpack(x))?.0.to_vector())
    }

    /// Rebuild the closed-loop state stored in a log record.
    pub fn state_at(&self, r: &Record) -> ClosedLoopState {
        ClosedLoopState {
            w: DVector::from_column_slice(&r.w),
            q: DVector::from_column_slice(&r.q),
            xi: DVector::from_column_slice(&r.xi),
            ctl: self.layout.unpack(&r.ctl),
        }
    }

    /// Stacked error coordinates: `η − Σw` (full state) or `Aζ − By − Σw`
    /// with `y = [q; e]` (velocity-free laws).
    pub fn error_coordinates(&self, s: &ClosedLoopState) -> Option<DVector<f64>> {
        let sigma = self.sigma.as_ref()?;
        let sw = sigma * &s.w;
        match &s.ctl {
            ControllerState::FullState(c) => {
                let eta = DVector::from_vec(c.eta1.iter().chain(c.eta2.iter()).copied().collect());
                Some(eta - sw)
            }
            ControllerState::VelocityFree(c) => {
                let zeta = DVector::from_vec(c.zeta1.iter().chain(c.zeta2.iter()).copied().collect());
                let e = self.error(&s.q);
                let y = DVector::from_vec(s.q.iter().chain(e.iter()).copied().collect());
                Some(&self.a * zeta - &self.b * y - sw)
            }
            ControllerState::Stateless => None,
        }
    }

    /// Error-system output `Γᵀ(q) Bᵀ (error coordinates)`, i.e. `d̃` or `d̄`.
    pub fn error_system_output(&self, s: &ClosedLoopState) -> Option<DVector<f64>> {
        let z = self.error_coordinates(s)?;
        let n = self.layout.n;
        let bz = self.b.transpose() * z;
        let j = self.scenario.model.jacobian(&s.q);
        Some(bz.rows(0, n).into_owned() + j.transpose() * bz.rows(n, n))
    }

    /// Vector field of the error coordinates evaluated from `(ξ, q)`:
    /// `A z − B Γ(q) ξ`.
    pub fn error_vector_field(&self, z: &DVector<f64>, q: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        let j = self.scenario.model.jacobian(q);
        let gamma_xi = DVector::from_vec(xi.iter().chain((j * xi).iter()).copied().collect());
        &self.a * z - &self.b * gamma_xi
    }
}

/// Closed-loop vector field at `s` (the system is autonomous; `t` is unused).
pub fn closed_loop_derivative(scn: &Scenario, s: &ClosedLoopState, _t: f64) -> Result<ClosedLoopState, SimError> {
    Ok(ClosedLoop::new(scn)?.derivative(s)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub t: f64,
    pub w: Vec<f64>,
    pub q: Vec<f64>,
    pub xi: Vec<f64>,
    pub ctl: Vec<f64>,
    pub e: Vec<f64>,
    pub u: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d: Vec<f64>,
    pub xi_hat: Option<Vec<f64>>,
    pub compensation: Vec<f64>,
    /// Value of the controller's storage function (NaN if unavailable).
    pub storage: f64,
    /// Instantaneous rate of `storage` predicted by the analytic identity.
    pub dissipation: f64,
    /// `∫₀ᵗ dissipation`, integrated alongside the state by the same RK4 step.
    pub dissipated: f64,
    pub det_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SimEventKind {
    /// `|det J|` dropped below the singularity threshold.
    NearSingular,
    /// `|det J|` recovered above the threshold.
    Regular,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub t: f64,
    pub kind: SimEventKind,
    pub det_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub controller: ControllerKind,
    pub storage_kind: StorageKind,
    pub n_joints: usize,
    pub records: Vec<Record>,
    pub events: Vec<SimEvent>,
}

impl TrajectoryLog {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.t)
    }

    pub fn has_filter(&self) -> bool {
        self.controller.uses_filter()
    }

    /// Records with `t` in `[from, to]`.
    pub fn window(&self, from: f64, to: f64) -> impl Iterator<Item = &Record> + '_ {
        let eps = 1e-9;
        self.records
            .iter()
            .filter(move |r| r.t >= from - eps && r.t <= to + eps)
    }
}

/// A run that stopped early; carries the log up to the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct SimulationFailure {
    pub error: SimError,
    pub log: Option<TrajectoryLog>,
}

impl From<SimError> for SimulationFailure {
    fn from(error: SimError) -> Self {
        Self { error, log: None }
    }
}

fn make_record(cl: &ClosedLoop, t: f64, s: &ClosedLoopState, out: &LoopOutputs, rate: f64, dissipated: f64) -> Record {
    let kind = cl.scenario.controller.storage_kind();
    let storage = storage::storage_eval(cl, kind, s).unwrap_or(f64::NAN);
    let v = |x: &DVector<f64>| x.iter().copied().collect::<Vec<f64>>();
    Record {
        t,
        w: v(&s.w),
        q: v(&s.q),
        xi: v(&s.xi),
        ctl: s.ctl.to_vec(),
        e: v(&out.e),
        u: v(&out.u),
        d1: v(&out.disturbance.d1),
        d2: v(&out.disturbance.d2),
        d: v(&out.disturbance.d),
        xi_hat: out.xi_hat.as_ref().map(v),
        compensation: v(&out.compensation),
        storage,
        dissipation: rate,
        dissipated,
        det_j: out.det_j,
    }
}

/// Integrate the closed loop over `[0, t_end]` with fixed-step RK4, logging
/// every step. Identical scenarios give bit-identical logs.
pub fn simulate(scn: &Scenario) -> Result<(TrajectoryLog, RunMetrics), SimulationFailure> {
    let cl = ClosedLoop::new(scn)?;
    let n_samples = scn.n_samples();
    let kind = scn.controller.storage_kind();
    let mut log = TrajectoryLog {
        controller: scn.controller,
        storage_kind: kind,
        n_joints: scn.n_joints(),
        records: Vec::with_capacity(n_samples),
        events: Vec::new(),
    };

    // The state is augmented with the running integral of the storage rate,
    // so the dissipation identity is checked at the integrator's accuracy.
    let n = scn.initial_state().to_vector().len();
    let eval = |x: &DVector<f64>| -> Result<(ClosedLoopState, ClosedLoopState, LoopOutputs, f64), SimError> {
        let s = cl.unpack(&x.rows(0, n).into_owned());
        let (ds, out) = cl.derivative(&s)?;
        let rate = storage::dissipation_rate(&cl, kind, &s, &out);
        Ok((s, ds, out, rate))
    };
    let augment = |ds: &ClosedLoopState, rate: f64| {
        let mut v = ds.to_vector().as_slice().to_vec();
        v.push(if rate.is_finite() { rate } else { 0.0 });
        DVector::from_vec(v)
    };
    let mut field = |_t: f64, x: &DVector<f64>| -> Result<DVector<f64>, SimError> {
        let (_, ds, _, rate) = eval(x)?;
        Ok(augment(&ds, rate))
    };

    let mut x = scn.initial_state().to_vector().push(0.0);
    let mut singular = false;
    for k in 0..n_samples {
        let t = k as f64 * scn.dt;
        let (s, ds, out, rate) = match eval(&x) {
            Ok(v) => v,
            Err(error) => return Err(SimulationFailure { error, log: Some(log) }),
        };
        let near = out.det_j.abs() < SINGULARITY_THRESHOLD;
        if near != singular {
            singular = near;
            let kind = if near {
                SimEventKind::NearSingular
            } else {
                SimEventKind::Regular
            };
            if near {
                log::warn!("near-singular Jacobian at t = {t:.4}: det J = {:.3e}", out.det_j);
            }
            log.events.push(SimEvent {
                t,
                kind,
                det_j: out.det_j,
            });
        }
        let dissipated = if rate.is_finite() { x[n] } else { f64::NAN };
        log.records.push(make_record(&cl, t, &s, &out, rate, dissipated));
        if k + 1 == n_samples {
            break;
        }
        match integrator::rk4_step_from(&mut field, t, &x, scn.dt, augment(&ds, rate)) {
            Ok(next) => x = next,
            Err(e) => {
                return Err(SimulationFailure {
                    error: e.into(),
                    log: Some(log),
                })
            }
        }
    }
    let m = metrics::metrics(&log, scn.settle_tol);
    Ok((log, m))
}

/// Integrate only the state (no logging) and return the final packed state.
pub fn integrate_final_state(scn: &Scenario) -> Result<DVector<f64>, SimError> {
    let cl = ClosedLoop::new(scn)?;
    let mut field = |_t: f64, x: &DVector<f64>| cl.vector_field(x);
    let mut x = scn.initial_state().to_vector();
    for k in 0..scn.n_samples() - 1 {
        x = integrator::rk4_step(&mut field, k as f64 * scn.dt, &x, scn.dt)?;
    }
    Ok(x)
}
