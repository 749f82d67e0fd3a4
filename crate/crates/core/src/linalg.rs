//! Small dense linear-algebra helpers shared by the synthesis code.

use nalgebra::{Complex, DMatrix};

/// Singular values below `RANK_RTOL * σ_max` are treated as zero.
pub const RANK_RTOL: f64 = 1e-10;

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank with a singular-value threshold relative to the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let sv = singular_values(m);
    let Some(&largest) = sv.first() else {
        return 0;
    };
    if largest == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * largest).count()
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `‖M + Mᵀ‖_∞` (max-abs entry).
pub fn skew_defect(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    (m + m.transpose()).amax()
}

/// Eigenvalues of a real square matrix, with near-duplicates merged.
pub fn distinct_eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.is_empty() {
        return Vec::new();
    }
    let scale = a.amax().max(1.0);
    let mut out: Vec<Complex<f64>> = Vec::new();
    for ev in a.complex_eigenvalues().iter() {
        if !out.iter().any(|e| (e - ev).norm() <= 1e-9 * scale) {
            out.push(*ev);
        }
    }
    out
}

/// Real embedding of the complex PBH pencil `[sI − A; C]`.
///
/// For `M = Mr + i·Mi` the block matrix `[[Mr, −Mi], [Mi, Mr]]` has rank
/// `2·rank(M)`.
pub fn pbh_pencil_real(a: &DMatrix<f64>, c: &DMatrix<f64>, s: Complex<f64>) -> DMatrix<f64> {
    let l = a.nrows();
    let r = c.nrows();
    let mut mr = DMatrix::zeros(l + r, l);
    let mut mi = DMatrix::zeros(l + r, l);
    mr.view_mut((0, 0), (l, l))
        .copy_from(&(DMatrix::identity(l, l) * s.re - a));
    mr.view_mut((l, 0), (r, l)).copy_from(c);
    mi.view_mut((0, 0), (l, l)).copy_from(&(DMatrix::identity(l, l) * s.im));
    let mut lifted = DMatrix::zeros(2 * (l + r), 2 * l);
    lifted.view_mut((0, 0), (l + r, l)).copy_from(&mr);
    lifted.view_mut((0, l), (l + r, l)).copy_from(&(-&mi));
    lifted.view_mut((l + r, 0), (l + r, l)).copy_from(&mi);
    lifted.view_mut((l + r, l), (l + r, l)).copy_from(&mr);
    lifted
}

/// PBH observability test: `rank [sI − A; C] = ℓ` at every eigenvalue `s` of `A`.
pub fn pbh_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    assert!(a.is_square(), "A must be square");
    let l = a.nrows();
    if l == 0 {
        return true;
    }
    assert_eq!(c.ncols(), l, "C must have as many columns as A");
    distinct_eigenvalues(a)
        .into_iter()
        .all(|s| numerical_rank(&pbh_pencil_real(a, c, s), RANK_RTOL) == 2 * l)
}

/// `[C; CA; …; CA^{ℓ−1}]`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let l = a.nrows();
    let r = c.nrows();
    let mut out = DMatrix::zeros(r * l, l);
    let mut block = c.clone();
    for k in 0..l {
        out.view_mut((k * r, 0), (r, l)).copy_from(&block);
        block = &block * a;
    }
    out
}

/// Classical Kalman rank test on the observability matrix.
pub fn observability_rank_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let l = a.nrows();
    l == 0 || numerical_rank(&observability_matrix(a, c), RANK_RTOL) == l
}
