//! Internal-model synthesis and the regulator equations
//! `Σ S = A Σ`, `Bᵀ Σ + D = 0`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::Manipulator;
use crate::exosystem::{DisturbanceKind, ExosystemSpec};
use crate::linalg::{self, RANK_RTOL};

/// Residual bound for accepting a regulator solution.
pub const SIGMA_ACCEPT_TOL: f64 = 1e-9;
/// Least-squares residual above which no solution is deemed to exist.
pub const SIGMA_EXIST_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InternalModelError {
    #[error("channel {channel}: frequency {frequency} must be finite and strictly positive")]
    BadFrequency { channel: usize, frequency: f64 },
    #[error("channel {channel}: frequency {frequency} listed twice")]
    DuplicateFrequency { channel: usize, frequency: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("regulator equations have no solution (least-squares residual {residual:.3e})")]
    NoSolution { residual: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("observability stack has rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },
}

/// Linear internal model `η̇ = A η − B y` with output `Bᵀ η`.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalModelSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub kind: DisturbanceKind,
}

impl InternalModelSpec {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, kind: DisturbanceKind) -> Result<Self, InternalModelError> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(InternalModelError::Dimension(format!(
                "A is {:?}, B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b, kind })
    }

    /// State dimension ℓ.
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.b.ncols()
    }
}

/// Build a block-diagonal internal model from per-channel frequency lists.
///
/// Channel `j` gets one rotation block `[[0, ω], [−ω, 0]]` per frequency,
/// read through the first coordinate of the block (`B` column `j`).
pub fn build_internal_model(
    channel_frequencies: &[Vec<f64>],
    kind: DisturbanceKind,
) -> Result<InternalModelSpec, InternalModelError> {
    for (channel, freqs) in channel_frequencies.iter().enumerate() {
        for (i, &frequency) in freqs.iter().enumerate() {
            if !(frequency.is_finite() && frequency > 0.0) {
                return Err(InternalModelError::BadFrequency { channel, frequency });
            }
            if freqs[..i].contains(&frequency) {
                return Err(InternalModelError::DuplicateFrequency { channel, frequency });
            }
        }
    }
    let n = channel_frequencies.len();
    let ell: usize = channel_frequencies.iter().map(|f| 2 * f.len()).sum();
    let mut a = DMatrix::zeros(ell, ell);
    let mut b = DMatrix::zeros(ell, n);
    let mut offset = 0;
    for (channel, freqs) in channel_frequencies.iter().enumerate() {
        for &w in freqs {
            a[(offset, offset + 1)] = w;
            a[(offset + 1, offset)] = -w;
            b[(offset, channel)] = 1.0;
            offset += 2;
        }
    }
    Ok(InternalModelSpec { a, b, kind })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assumption2Report {
    /// `‖A + Aᵀ‖_∞`.
    pub skew_defect: f64,
    pub min_singular_value: f64,
    pub nonsingular: bool,
    pub observable: bool,
}

impl Assumption2Report {
    pub fn passed(&self) -> bool {
        self.skew_defect <= 1e-12 && self.nonsingular && self.observable
    }
}

pub fn validate_assumption2(spec: &InternalModelSpec) -> Assumption2Report {
    let sv = linalg::singular_values(&spec.a);
    let largest = sv.first().copied().unwrap_or(0.0);
    let smallest = sv.last().copied().unwrap_or(0.0);
    Assumption2Report {
        skew_defect: linalg::skew_defect(&spec.a),
        min_singular_value: smallest,
        nonsingular: spec.dim() == 0 || smallest > RANK_RTOL * largest.max(1.0),
        observable: linalg::pbh_observable(&spec.a, &spec.b.transpose()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegulatorSolution {
    pub sigma: DMatrix<f64>,
    /// `‖Σ S − A Σ‖_∞`.
    pub residual_sylvester: f64,
    /// `‖Bᵀ Σ + D‖_∞`.
    pub residual_output: f64,
}

impl RegulatorSolution {
    pub fn accepted(&self) -> bool {
        self.residual_sylvester < SIGMA_ACCEPT_TOL && self.residual_output < SIGMA_ACCEPT_TOL
    }
}

pub fn regulator_residuals(
    sigma: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> (f64, f64) {
    let syl = sigma * s - a * sigma;
    let out = b.transpose() * sigma + d;
    let amax = |m: &DMatrix<f64>| if m.is_empty() { 0.0 } else { m.amax() };
    (amax(&syl), amax(&out))
}

/// Solve `Σ S = A Σ`, `Bᵀ Σ = −D` jointly in the entries of Σ.
///
/// Both equations are lifted with Kronecker products acting on the
/// column-major `vec(Σ)` and solved in the minimum-norm least-squares sense.
pub fn solve_sigma(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<RegulatorSolution, InternalModelError> {
    let ell = a.nrows();
    let p = s.nrows();
    let n = b.ncols();
    if !a.is_square() || !s.is_square() || b.nrows() != ell || d.shape() != (n, p) {
        return Err(InternalModelError::Dimension(format!(
            "A {:?}, B {:?}, S {:?}, D {:?}",
            a.shape(),
            b.shape(),
            s.shape(),
            d.shape()
        )));
    }
    if ell == 0 {
        let sigma = DMatrix::zeros(0, p);
        let residual = if d.is_empty() { 0.0 } else { d.amax() };
        if residual > SIGMA_EXIST_TOL {
            return Err(InternalModelError::NoSolution { residual });
        }
        return Ok(RegulatorSolution {
            sigma,
            residual_sylvester: 0.0,
            residual_output: residual,
        });
    }

    // vec(Σ S) = (Sᵀ ⊗ I) vec Σ, vec(A Σ) = (I ⊗ A) vec Σ, vec(Bᵀ Σ) = (I ⊗ Bᵀ) vec Σ.
    let i_ell = DMatrix::identity(ell, ell);
    let i_p = DMatrix::identity(p, p);
    let sylvester = s.transpose().kronecker(&i_ell) - i_p.kronecker(a);
    let output = i_p.kronecker(&b.transpose());
    let rows = sylvester.nrows() + output.nrows();
    let mut lhs = DMatrix::zeros(rows, ell * p);
    lhs.view_mut((0, 0), sylvester.shape()).copy_from(&sylvester);
    lhs.view_mut((sylvester.nrows(), 0), output.shape()).copy_from(&output);
    let mut rhs = DVector::zeros(rows);
    let minus_d = -d;
    rhs.rows_mut(sylvester.nrows(), n * p)
        .copy_from(&DVector::from_column_slice(minus_d.as_slice()));

    let svd = lhs.clone().svd(true, true);
    let eps = RANK_RTOL * svd.singular_values.max();
    let vec_sigma = svd
        .solve(&rhs, eps)
        .map_err(|e| InternalModelError::Dimension(e.to_string()))?;
    let lsq_residual = (&lhs * &vec_sigma - &rhs).amax();
    if lsq_residual > SIGMA_EXIST_TOL {
        return Err(InternalModelError::NoSolution { residual: lsq_residual });
    }
    let sigma = DMatrix::from_column_slice(ell, p, vec_sigma.as_slice());
    let (residual_sylvester, residual_output) = regulator_residuals(&sigma, a, b, s, d);
    Ok(RegulatorSolution {
        sigma,
        residual_sylvester,
        residual_output,
    })
}

pub fn pbh_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    linalg::pbh_observable(a, c)
}

/// PBH test on `(diag(A₁, A₂), [C₁, T C₂])` after checking the hypotheses
/// of the composite observability result.
pub fn composite_observable(
    a1: &DMatrix<f64>,
    c1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    c2: &DMatrix<f64>,
    t: &DMatrix<f64>,
) -> Result<bool, InternalModelError> {
    if c1.ncols() != a1.nrows() || c2.ncols() != a2.nrows() {
        return Err(InternalModelError::Dimension(
            "C_i must have as many columns as A_i".into(),
        ));
    }
    if t.shape() != (c1.nrows(), c2.nrows()) {
        return Err(InternalModelError::Dimension(format!(
            "T must be {}x{}, got {:?}",
            c1.nrows(),
            c2.nrows(),
            t.shape()
        )));
    }
    if linalg::numerical_rank(t, RANK_RTOL) != t.ncols() {
        return Err(InternalModelError::Precondition(
            "T does not have full column rank".into(),
        ));
    }
    if !linalg::pbh_observable(a1, c1) {
        return Err(InternalModelError::Precondition("(A1, C1) is not observable".into()));
    }
    if !linalg::pbh_observable(a2, c2) {
        return Err(InternalModelError::Precondition("(A2, C2) is not observable".into()));
    }
    let a = linalg::block_diag(&[a1, a2]);
    let tc2 = t * c2;
    let mut c = DMatrix::zeros(c1.nrows(), a.ncols());
    c.view_mut((0, 0), c1.shape()).copy_from(c1);
    c.view_mut((0, c1.ncols()), tc2.shape()).copy_from(&tc2);
    Ok(linalg::pbh_observable(&a, &c))
}

/// Torque-side and force-side internal models used together by a controller.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalModelPair {
    pub torque: InternalModelSpec,
    pub force: InternalModelSpec,
}

impl InternalModelPair {
    pub fn new(torque: InternalModelSpec, force: InternalModelSpec) -> Result<Self, InternalModelError> {
        if torque.n_channels() != force.n_channels() {
            return Err(InternalModelError::Dimension(format!(
                "torque model has {} channels, force model {}",
                torque.n_channels(),
                force.n_channels()
            )));
        }
        Ok(Self { torque, force })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.torque.dim(), self.force.dim())
    }

    /// `A = diag(A₁, A₂)`.
    pub fn stacked_a(&self) -> DMatrix<f64> {
        linalg::block_diag(&[&self.torque.a, &self.force.a])
    }

    /// `B = diag(B₁, B₂)`.
    pub fn stacked_b(&self) -> DMatrix<f64> {
        linalg::block_diag(&[&self.torque.b, &self.force.b])
    }

    /// Solve the regulator equations for both sides against `exo`.
    pub fn solve(&self, exo: &ExosystemSpec) -> Result<(RegulatorSolution, RegulatorSolution), InternalModelError> {
        let s1 = solve_sigma(&self.torque.a, &self.torque.b, &exo.s, &exo.d1)?;
        let s2 = solve_sigma(&self.force.a, &self.force.b, &exo.s, &exo.d2)?;
        Ok((s1, s2))
    }
}

/// `Σ = [Σ₁; Σ₂]`.
pub fn stack_sigma(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(s1.nrows() + s2.nrows(), s1.ncols());
    out.view_mut((0, 0), s1.shape()).copy_from(s1);
    out.view_mut((s1.nrows(), 0), s2.shape()).copy_from(s2);
    out
}

/// `Γ(q) = [I; J(q)]`, `Φ₁` and `Φ₂` at a fixed configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeMaps {
    pub gamma: DMatrix<f64>,
    pub phi1: DMatrix<f64>,
    pub phi2: DMatrix<f64>,
}

impl CompositeMaps {
    pub fn build(ims: &InternalModelPair, exo: &ExosystemSpec, jacobian: &DMatrix<f64>) -> Self {
        let n = jacobian.ncols();
        let mut gamma = DMatrix::zeros(2 * n, n);
        gamma.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        gamma.view_mut((n, 0), (n, n)).copy_from(jacobian);

        let a = ims.stacked_a();
        let b = ims.stacked_b();
        let d = exo.stacked_output();
        let ell = a.nrows();
        let p = exo.dim();

        let mut phi1 = DMatrix::zeros(n * ell, ell);
        let mut phi2 = DMatrix::zeros(n * ell, p);
        let mut left = gamma.transpose() * b.transpose();
        let mut right = gamma.transpose() * d;
        for k in 0..ell {
            phi1.view_mut((k * n, 0), (n, ell)).copy_from(&left);
            phi2.view_mut((k * n, 0), (n, p)).copy_from(&right);
            left = &left * &a;
            right = &right * &exo.s;
        }
        Self { gamma, phi1, phi2 }
    }
}

/// Recover `Σ = −(Φ₁ᵀ Φ₁)⁻¹ Φ₁ᵀ Φ₂` from the observability stacks at `q`.
pub fn sigma_via_regression(
    ims: &InternalModelPair,
    exo: &ExosystemSpec,
    model: &dyn Manipulator,
    q: &DVector<f64>,
) -> Result<DMatrix<f64>, InternalModelError> {
    let jacobian = model.jacobian(q);
    if jacobian.shape() != (ims.torque.n_channels(), ims.torque.n_channels()) {
        return Err(InternalModelError::Dimension(format!(
            "Jacobian is {:?}, internal models have {} channels",
            jacobian.shape(),
            ims.torque.n_channels()
        )));
    }
    let maps = CompositeMaps::build(ims, exo, &jacobian);
    let ell = maps.phi1.ncols();
    let rank = linalg::numerical_rank(&maps.phi1, RANK_RTOL);
    if rank < ell {
        return Err(InternalModelError::RankDeficient { rank, expected: ell });
    }
    let j_rank = linalg::numerical_rank(&jacobian, RANK_RTOL);
    if j_rank < jacobian.ncols() {
        return Err(InternalModelError::RankDeficient {
            rank: j_rank,
            expected: jacobian.ncols(),
        });
    }
    // Least squares through the SVD of Φ₁; equal to the normal-equation
    // formula when Φ₁ has full column rank.
    let svd = maps.phi1.clone().svd(true, true);
    let eps = RANK_RTOL * svd.singular_values.max();
    let x = svd
        .solve(&maps.phi2, eps)
        .map_err(|e| InternalModelError::Dimension(e.to_string()))?;
    Ok(-x)
}

/// Normal-equation form of the regression, kept for comparison.
pub fn sigma_via_normal_equations(maps: &CompositeMaps) -> Option<DMatrix<f64>> {
    let gram = maps.phi1.transpose() * &maps.phi1;
    let inv = gram.try_inverse()?;
    Some(-(inv * maps.phi1.transpose() * &maps.phi2))
}

/// Torque-side (ω = 1, 3) and force-side (ω = 2, 4) models of the bundled scenario.
pub fn reference_internal_models() -> InternalModelPair {
    InternalModelPair {
        torque: build_internal_model(&[vec![1.0], vec![3.0]], DisturbanceKind::Torque).expect("valid frequencies"),
        force: build_internal_model(&[vec![2.0], vec![4.0]], DisturbanceKind::Force).expect("valid frequencies"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ManipulatorParams, TwoLinkPlanar};
    use crate::exosystem::reference_sinusoids;
    use std::f64::consts::FRAC_PI_4;

    fn rot(w: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0])
    }

    #[test]
    fn reference_torque_model_layout() {
        let im = build_internal_model(&[vec![1.0], vec![3.0]], DisturbanceKind::Torque).unwrap();
        assert_eq!(im.a, linalg::block_diag(&[&rot(1.0), &rot(3.0)]));
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = 1.0;
        b[(2, 1)] = 1.0;
        assert_eq!(im.b, b);
        assert!(validate_assumption2(&im).passed());
    }

    #[test]
    fn single_block_model() {
        let im = build_internal_model(&[vec![1.0]], DisturbanceKind::Torque).unwrap();
        assert_eq!(im.dim(), 2);
        assert_eq!(im.a, rot(1.0));
        assert_eq!(linalg::skew_defect(&im.a), 0.0);
    }

    #[test]
    fn build_rejects_bad_frequencies() {
        assert!(matches!(
            build_internal_model(&[vec![0.0]], DisturbanceKind::Torque),
            Err(InternalModelError::BadFrequency { .. })
        ));
        assert!(matches!(
            build_internal_model(&[vec![-2.0]], DisturbanceKind::Torque),
            Err(InternalModelError::BadFrequency { .. })
        ));
        assert!(matches!(
            build_internal_model(&[vec![1.0, 1.0]], DisturbanceKind::Torque),
            Err(InternalModelError::DuplicateFrequency { .. })
        ));
        // The same frequency on two different channels is fine.
        assert!(build_internal_model(&[vec![1.0], vec![1.0]], DisturbanceKind::Torque).is_ok());
    }

    #[test]
    fn assumption2_failures() {
        let mut im = build_internal_model(&[vec![1.0]], DisturbanceKind::Torque).unwrap();
        im.b = DMatrix::zeros(2, 1);
        let report = validate_assumption2(&im);
        assert!(!report.observable);
        assert!(!report.passed());

        let singular = InternalModelSpec::new(
            linalg::block_diag(&[&rot(1.0), &DMatrix::zeros(1, 1)]),
            DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 1.0]),
            DisturbanceKind::Torque,
        )
        .unwrap();
        let report = validate_assumption2(&singular);
        assert!(!report.nonsingular);
        assert!(!report.passed());
    }

    #[test]
    fn sigma_scalar_oscillator() {
        let a = rot(1.0);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let d = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let sol = solve_sigma(&a, &b, &a, &d).unwrap();
        let expected = -DMatrix::<f64>::identity(2, 2);
        assert!((&sol.sigma - expected).amax() < 1e-12);
        assert!(sol.accepted());
    }

    #[test]
    fn sigma_zero_disturbance() {
        let a = rot(1.0);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let sol = solve_sigma(&a, &b, &a, &DMatrix::zeros(1, 2)).unwrap();
        assert!(sol.sigma.amax() < 1e-15);
        assert!(sol.accepted());
    }

    #[test]
    fn sigma_disjoint_spectra_has_no_solution() {
        let a = rot(2.0);
        let s = rot(1.0);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.3]);
        let d = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(matches!(
            solve_sigma(&a, &b, &s, &d),
            Err(InternalModelError::NoSolution { .. })
        ));
    }

    #[test]
    fn sigma_rejects_bad_dimensions() {
        let a = rot(1.0);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            solve_sigma(&a, &b, &a, &DMatrix::zeros(2, 2)),
            Err(InternalModelError::Dimension(_))
        ));
    }

    #[test]
    fn reference_sigma_residuals() {
        let exo = ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).unwrap();
        let ims = reference_internal_models();
        let (s1, s2) = ims.solve(&exo).unwrap();
        for (sol, im, d) in [(&s1, &ims.torque, &exo.d1), (&s2, &ims.force, &exo.d2)] {
            assert!(sol.accepted());
            let (r1, r2) = regulator_residuals(&sol.sigma, &im.a, &im.b, &exo.s, d);
            assert!(r1 < 1e-9 && r2 < 1e-9);
        }
    }

    #[test]
    fn regression_matches_sylvester() {
        let exo = ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).unwrap();
        let ims = reference_internal_models();
        let (s1, s2) = ims.solve(&exo).unwrap();
        let stacked = stack_sigma(&s1.sigma, &s2.sigma);
        let arm = TwoLinkPlanar::new(ManipulatorParams::default()).unwrap();
        let q = DVector::from_vec(vec![0.0, FRAC_PI_4]);
        let reg = sigma_via_regression(&ims, &exo, &arm, &q).unwrap();
        assert!((&reg - &stacked).amax() < 1e-6);
    }

    #[test]
    fn regression_zero_disturbance() {
        let mut exo = ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).unwrap();
        exo.d1.fill(0.0);
        exo.d2.fill(0.0);
        let ims = reference_internal_models();
        let arm = TwoLinkPlanar::new(ManipulatorParams::default()).unwrap();
        let q = DVector::from_vec(vec![0.3, 1.0]);
        let reg = sigma_via_regression(&ims, &exo, &arm, &q).unwrap();
        assert!(reg.amax() < 1e-15);
    }

    #[test]
    fn regression_singular_configuration() {
        let exo = ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).unwrap();
        let ims = reference_internal_models();
        let arm = TwoLinkPlanar::new(ManipulatorParams::default()).unwrap();
        let q = DVector::from_vec(vec![0.0, 0.0]);
        assert!(matches!(
            sigma_via_regression(&ims, &exo, &arm, &q),
            Err(InternalModelError::RankDeficient { .. })
        ));
    }

    #[test]
    fn composite_examples() {
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let t = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(composite_observable(&rot(1.0), &c, &rot(2.0), &c, &t), Ok(true));
        assert_eq!(composite_observable(&rot(1.0), &c, &rot(1.0), &c, &t), Ok(false));
        let stacked = linalg::block_diag(&[&rot(1.0), &rot(1.0)]);
        let cc = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 1.0, 0.0]);
        assert!(!linalg::observability_rank_observable(&stacked, &cc));

        let c2 = DMatrix::identity(2, 2);
        let t2 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        assert_eq!(
            linalg::numerical_rank(&(&t2 * &c2), RANK_RTOL),
            linalg::numerical_rank(&c2, RANK_RTOL)
        );
        let c1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(composite_observable(&rot(1.0), &c1, &rot(3.0), &c2, &t2), Ok(true));
    }

    #[test]
    fn composite_reports_preconditions() {
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let zero_t = DMatrix::zeros(1, 1);
        assert!(matches!(
            composite_observable(&rot(1.0), &c, &rot(2.0), &c, &zero_t),
            Err(InternalModelError::Precondition(_))
        ));
        let t = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            composite_observable(&rot(1.0), &DMatrix::zeros(1, 2), &rot(2.0), &c, &t),
            Err(InternalModelError::Precondition(_))
        ));
    }
}
