//! Built-in verification suites.
//!
//! Each suite runs a fixed set of numerical checks against the bundled
//! scenario and reports measured defects next to their tolerances.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::config::reference_scenario;
use crate::dynamics::{forward_dynamics, JointState, Manipulator};
use crate::internal_model::{
    composite_observable, pbh_observable, regulator_residuals, sigma_via_regression, stack_sigma, validate_assumption2,
};
use crate::linalg::{observability_rank_observable, skew_defect};
use crate::simulation::{
    integrate_final_state, rk4_step, simulate, storage_eval, ClosedLoop, ControllerKind, Scenario, SimError,
    StorageKind, TrajectoryLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Model,
    Passivity,
    Lossless,
    Assumption,
    Observability,
    Sylvester,
    Dissipation,
    Integrator,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Self::Model,
        Self::Passivity,
        Self::Lossless,
        Self::Assumption,
        Self::Observability,
        Self::Sylvester,
        Self::Dissipation,
        Self::Integrator,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Model => "model",
            Self::Passivity => "passivity",
            Self::Lossless => "lossless",
            Self::Assumption => "assumption",
            Self::Observability => "observability",
            Self::Sylvester => "sylvester",
            Self::Dissipation => "dissipation",
            Self::Integrator => "integrator",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Self::Model => "inertia, skew-symmetry, Jacobian and forward dynamics",
            Self::Passivity => "energy conservation under the passive laws",
            Self::Lossless => "internal-model error systems are lossless",
            Self::Assumption => "internal models are skew, nonsingular and observable",
            Self::Observability => "composite internal-model observability",
            Self::Sylvester => "regulator equation residuals",
            Self::Dissipation => "storage monotonicity and dissipation identity",
            Self::Integrator => "RK4 order and exosystem accuracy",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown suite `{0}` (expected one of: all, {names})", names = suite_names())]
pub struct UnknownSuite(pub String);

fn suite_names() -> String {
    Suite::ALL.iter().map(Suite::as_str).collect::<Vec<_>>().join(", ")
}

impl FromStr for Suite {
    type Err = UnknownSuite;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| UnknownSuite(s.to_string()))
    }
}

/// Parse `all` or a comma-separated list of suite names.
pub fn parse_selector(sel: &str) -> Result<Vec<Suite>, UnknownSuite> {
    if sel.trim().eq_ignore_ascii_case("all") {
        return Ok(Suite::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in sel.split(',') {
        let s: Suite = name.parse()?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    /// Pass when `measured <= tol`.
    AtMost(f64),
    /// Pass when `measured > tol`.
    Above(f64),
    /// Pass when `measured == expected`, for counts and verdicts.
    Equals(f64),
}

impl Bound {
    pub fn holds(&self, measured: f64) -> bool {
        match *self {
            Bound::AtMost(tol) => measured <= tol,
            Bound::Above(tol) => measured > tol,
            Bound::Equals(v) => measured == v,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::AtMost(t) => write!(f, "<= {t:.1e}"),
            Bound::Above(t) => write!(f, "> {t:.1e}"),
            Bound::Equals(v) => write!(f, "== {v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub pass: bool,
}

struct Collector {
    suite: Suite,
    checks: Vec<Check>,
}

impl Collector {
    fn push(&mut self, name: impl Into<String>, measured: f64, bound: Bound) {
        self.checks.push(Check {
            suite: self.suite,
            name: name.into(),
            pass: bound.holds(measured),
            measured,
            bound,
        });
    }

    /// Record a step that could not run as a failed check.
    fn failed(&mut self, name: impl Into<String>, err: &SimError) {
        log::error!("{}: {err}", self.suite);
        self.push(name, f64::NAN, Bound::AtMost(0.0));
    }
}

pub fn run_suite(suite: Suite) -> Vec<Check> {
    let mut c = Collector {
        suite,
        checks: Vec::new(),
    };
    match suite {
        Suite::Model => model(&mut c),
        Suite::Passivity => passivity(&mut c),
        Suite::Lossless => lossless(&mut c),
        Suite::Assumption => assumption(&mut c),
        Suite::Observability => observability(&mut c),
        Suite::Sylvester => sylvester(&mut c),
        Suite::Dissipation => dissipation(&mut c),
        Suite::Integrator => integrator(&mut c),
    }
    c.checks
}

fn grid(n: usize, lo: f64, hi: f64) -> impl Iterator<Item = f64> + Clone {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

fn model(c: &mut Collector) {
    let scn = reference_scenario();
    let m = &scn.model;
    let (mut asym, mut min_eig, mut skew, mut jac, mut fd_res) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    for q1 in grid(13, -PI, PI) {
        for q2 in grid(13, -PI, PI) {
            let q = DVector::from_vec(vec![q1, q2]);
            let h = m.inertia(&q);
            asym = asym.max((&h - h.transpose()).amax());
            min_eig = min_eig.min(h.symmetric_eigenvalues().min());
            let xi = DVector::from_vec(vec![2.0 * q2.sin() - 1.0, 3.0 * q1.cos()]);
            skew = skew.max(skew_defect(&(m.inertia_rate(&q, &xi) - 2.0 * m.coriolis(&q, &xi))));

            let eps = 1e-6;
            let j = m.jacobian(&q);
            for col in 0..2 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[col] += eps;
                qm[col] -= eps;
                let fd = (m.forward_kinematics(&qp) - m.forward_kinematics(&qm)) / (2.0 * eps);
                jac = jac.max((fd - j.column(col)).amax());
            }

            let u = DVector::from_vec(vec![0.3, -0.4]);
            let d = DVector::from_vec(vec![-0.1, 0.2]);
            if let Ok(acc) = forward_dynamics(m, &JointState::new(q.clone(), xi.clone()), &u, &d) {
                let lhs = &h * acc + m.coriolis(&q, &xi) * &xi + m.gravity(&q);
                fd_res = fd_res.max((lhs - u - d).amax());
            }
        }
    }
    c.push("H symmetry defect", asym, Bound::AtMost(1e-12));
    c.push("H minimum eigenvalue", min_eig, Bound::Above(0.0));
    c.push("Hdot - 2C skew defect", skew, Bound::AtMost(1e-9));
    c.push("Jacobian finite-difference gap", jac, Bound::AtMost(1e-6));
    c.push("forward dynamics residual", fd_res, Bound::AtMost(1e-10));
}

fn passivity(c: &mut Collector) {
    for kind in [ControllerKind::PassiveJoint, ControllerKind::PassiveTask] {
        let mut scn = reference_scenario();
        scn.controller = kind;
        scn.exo.w0.fill(0.0);
        scn.t_end = 10.0;
        match simulate(&scn) {
            Ok((log, _)) => {
                let v0 = log.records[0].storage;
                let drift = log.records.iter().map(|r| (r.storage - v0).abs()).fold(0.0, f64::max) / v0;
                c.push(format!("{kind}: V1 conservation defect"), drift, Bound::AtMost(1e-6));
            }
            Err(f) => c.failed(format!("{kind}: V1 conservation defect"), &f.error),
        }
    }
}

/// Largest gap between the five-point derivative of `kind` along `log`
/// and `−ξᵀ(error output)`.
fn lossless_gap(scn: &Scenario, log: &TrajectoryLog, kind: StorageKind) -> Result<f64, SimError> {
    let cl = ClosedLoop::new(scn)?;
    let states: Vec<_> = log.records.iter().map(|r| cl.state_at(r)).collect();
    let v = states
        .iter()
        .map(|s| storage_eval(&cl, kind, s))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut worst: f64 = 0.0;
    for k in 2..states.len().saturating_sub(2) {
        let fd = (v[k - 2] - 8.0 * v[k - 1] + 8.0 * v[k + 1] - v[k + 2]) / (12.0 * scn.dt);
        let out = cl.error_system_output(&states[k]).ok_or(SimError::MissingSigma(kind))?;
        worst = worst.max((fd + states[k].xi.dot(&out)).abs());
    }
    Ok(worst)
}

fn lossless(c: &mut Collector) {
    for (kind, storage) in [
        (ControllerKind::FullState, StorageKind::V2),
        (ControllerKind::VelocityFree, StorageKind::V3),
    ] {
        let mut scn = reference_scenario();
        scn.controller = kind;
        scn.t_end = 5.0;
        scn.dt = 5e-4;
        if kind.uses_filter() {
            let (l1, l2) = scn.ims.dims();
            let mut ctl0 = DVector::zeros(l1 + l2 + 2);
            ctl0.rows_mut(l1 + l2, 2).copy_from(&(-scn.gains.h * &scn.q0));
            scn.ctl0 = Some(ctl0);
        }
        let name = format!("{kind}: |d{storage}/dt + xi^T d~|");
        match simulate(&scn)
            .map_err(|f| f.error)
            .and_then(|(log, _)| lossless_gap(&scn, &log, storage))
        {
            Ok(gap) => c.push(name, gap, Bound::AtMost(1e-5)),
            Err(e) => c.failed(name, &e),
        }
    }
}

fn assumption(c: &mut Collector) {
    let scn = reference_scenario();
    for (side, im) in [("torque", &scn.ims.torque), ("force", &scn.ims.force)] {
        let r = validate_assumption2(im);
        c.push(format!("{side} model: A + A^T"), r.skew_defect, Bound::AtMost(1e-12));
        c.push(
            format!("{side} model: min singular value of A"),
            r.min_singular_value,
            Bound::Above(1e-9),
        );
        c.push(
            format!("{side} model: (A, B^T) observable"),
            f64::from(u8::from(r.observable)),
            Bound::Equals(1.0),
        );
    }
}

fn observability(c: &mut Collector) {
    let scn = reference_scenario();
    let (t, f) = (&scn.ims.torque, &scn.ims.force);
    let (c1, c2) = (t.b.transpose(), f.b.transpose());
    let verdict = |v: Result<bool, _>| match v {
        Ok(true) => 1.0,
        Ok(false) => 0.0,
        Err(_) => f64::NAN,
    };
    let identity = DMatrix::identity(2, 2);
    c.push(
        "reference composite (T = I) observable",
        verdict(composite_observable(&t.a, &c1, &f.a, &c2, &identity)),
        Bound::Equals(1.0),
    );
    let twist = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
    c.push(
        "reference composite (T invertible) observable",
        verdict(composite_observable(&t.a, &c1, &f.a, &c2, &twist)),
        Bound::Equals(1.0),
    );
    c.push(
        "identical models are not observable",
        verdict(composite_observable(&t.a, &c1, &t.a, &c1, &identity)),
        Bound::Equals(0.0),
    );

    // PBH and Kalman rank tests agree on structured pairs.
    let mut disagreements = 0;
    for n in 1..=6usize {
        for variant in 0..3 {
            let a = DMatrix::from_fn(n, n, |i, j| match variant {
                0 => ((i * 7 + j * 3) % 5) as f64 - 2.0,
                1 => {
                    if i == j {
                        0.5
                    } else {
                        0.0
                    }
                }
                _ => {
                    if j == i + 1 {
                        1.0
                    } else {
                        0.0
                    }
                }
            });
            let cm = DMatrix::from_fn(1, n, |_, j| {
                if variant == 2 {
                    f64::from(u8::from(j == 0))
                } else {
                    1.0 + j as f64
                }
            });
            disagreements += usize::from(pbh_observable(&a, &cm) != observability_rank_observable(&a, &cm));
        }
    }
    c.push(
        "PBH / rank test disagreements",
        disagreements as f64,
        Bound::Equals(0.0),
    );
}

fn sylvester(c: &mut Collector) {
    let scn = reference_scenario();
    let mut sigmas = Vec::new();
    for (side, im, d) in [
        ("torque", &scn.ims.torque, &scn.exo.d1),
        ("force", &scn.ims.force, &scn.exo.d2),
    ] {
        match crate::internal_model::solve_sigma(&im.a, &im.b, &scn.exo.s, d) {
            Ok(sol) => {
                let (syl, out) = regulator_residuals(&sol.sigma, &im.a, &im.b, &scn.exo.s, d);
                c.push(format!("{side}: |Sigma S - A Sigma|"), syl, Bound::AtMost(1e-9));
                c.push(format!("{side}: |B^T Sigma + D|"), out, Bound::AtMost(1e-9));
                sigmas.push(sol.sigma);
            }
            Err(e) => c.failed(format!("{side}: regulator equations"), &e.into()),
        }
    }
    if let [s1, s2] = sigmas.as_slice() {
        let q = DVector::from_vec(vec![0.0, FRAC_PI_4]);
        match sigma_via_regression(&scn.ims, &scn.exo, &scn.model, &q) {
            Ok(r) => c.push(
                "regression vs direct solution",
                (r - stack_sigma(s1, s2)).amax(),
                Bound::AtMost(1e-6),
            ),
            Err(e) => c.failed("regression vs direct solution", &e.into()),
        }
    }
}

fn dissipation(c: &mut Collector) {
    for kind in [
        ControllerKind::FullState,
        ControllerKind::VelocityFree,
        ControllerKind::Saturated,
    ] {
        let mut scn = reference_scenario();
        scn.controller = kind;
        let storage = kind.storage_kind();
        match simulate(&scn) {
            Ok((log, m)) => {
                let rise = log
                    .records
                    .windows(2)
                    .map(|w| w[1].storage - w[0].storage)
                    .fold(f64::NEG_INFINITY, f64::max);
                c.push(
                    format!("{kind}: max step increase of {storage}"),
                    rise,
                    Bound::AtMost(1e-9),
                );
                c.push(
                    format!("{kind}: dissipation identity defect"),
                    m.dissipation_defect,
                    Bound::AtMost(1e-4),
                );
            }
            Err(f) => c.failed(format!("{kind}: simulation"), &f.error),
        }
    }
}

fn integrator(c: &mut Collector) {
    let mut base = reference_scenario();
    base.t_end = 5.0;
    let end = |dt: f64| {
        let mut scn = base.clone();
        scn.dt = dt;
        integrate_final_state(&scn)
    };
    let result = (|| -> Result<Vec<f64>, SimError> {
        let reference = end(2.5e-4)?;
        [4e-3, 2e-3, 1e-3]
            .iter()
            .map(|&dt| Ok((end(dt)? - &reference).norm()))
            .collect()
    })();
    match result {
        Ok(errs) => {
            let order = errs
                .windows(2)
                .map(|w| (w[0] / w[1]).log2())
                .fold(f64::INFINITY, f64::min);
            c.push("observed RK4 order", order, Bound::Above(3.5));
        }
        Err(e) => c.failed("observed RK4 order", &e),
    }

    let exo = &base.exo;
    let dt = 1e-3;
    let mut w = exo.w0.clone();
    let mut field = |_t: f64, w: &DVector<f64>| -> Result<DVector<f64>, std::convert::Infallible> { Ok(&exo.s * w) };
    let mut gap: f64 = 0.0;
    for k in 0..20_000 {
        match rk4_step(&mut field, k as f64 * dt, &w, dt) {
            Ok(next) => w = next,
            Err(_) => {
                gap = f64::NAN;
                break;
            }
        }
        gap = gap.max((&w - exo.solution((k + 1) as f64 * dt)).amax());
    }
    c.push("exosystem vs closed form over 20 s", gap, Bound::AtMost(1e-8));
}
