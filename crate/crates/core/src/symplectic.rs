//! The symplectic Stiefel manifold `Sp(2n, 2k) = { X : X^T J_2n X = J_2k }`.
//!
//! Points are certified at construction. The tangent space at `P` is
//! `{ Z : Z^T J P + P^T J Z = 0 }`. Updates move along the tangent space and
//! come back to the manifold through the Cayley retraction.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{self, frobenius_norm, LinalgError, Matrix};

/// Residual bound checked when a point is constructed.
pub const POINT_TOL: f64 = 1e-8;
/// Residual bound checked after a retraction.
pub const RETRACT_TOL: f64 = 1e-7;
/// Tangency bound (relative to `max(1, ||X||_F)`) accepted by the retraction.
pub const TANGENT_TOL: f64 = 1e-6;
/// Standard deviation of the entries of the random seed matrix.
pub const DEFAULT_INIT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("invalid manifold size n={n}, k={k} (need 1 <= k <= n)")]
    InvalidSize { n: usize, k: usize },
    #[error("expected a {expected:?} matrix, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("symplectic constraint violated: residual {residual:e} > {tol:e}")]
    ConstraintViolation { residual: f64, tol: f64 },
    #[error("direction is not tangent: residual {residual:e}")]
    NotTangent { residual: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("checkpoint I/O: {0}")]
    Io(String),
}

/// Projection operator used by the Riemannian optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// `(I + P J P^T J) X`, see [`project_tangent_paper`].
    Paper,
    /// Corrector form, see [`project_tangent_stable`].
    #[default]
    Stable,
}

impl std::str::FromStr for ProjectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "stable" => Ok(Self::Stable),
            other => Err(format!("unknown projection mode '{other}' (paper|stable)")),
        }
    }
}

/// `J_2m = [[0, I_m], [-I_m, 0]]`.
pub fn standard_j(m: usize) -> Matrix {
    let mut j = Matrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        j[(i, m + i)] = 1.0;
        j[(m + i, i)] = -1.0;
    }
    j
}

/// `J^T A` computed by row permutation: rows `0..m` become `-A[m..]`, rows
/// `m..` become `A[..m]`.
fn jt_mul(a: &Matrix) -> Matrix {
    let m = a.rows() / 2;
    Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        if i < m {
            -a[(m + i, j)]
        } else {
            a[(i - m, j)]
        }
    })
}

/// `J A`: rows `0..m` become `A[m..]`, rows `m..` become `-A[..m]`.
fn j_mul(a: &Matrix) -> Matrix {
    let m = a.rows() / 2;
    Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        if i < m {
            a[(m + i, j)]
        } else {
            -a[(i - m, j)]
        }
    })
}

fn check_size(n: usize, k: usize) -> Result<(), ManifoldError> {
    if k == 0 || k > n {
        return Err(ManifoldError::InvalidSize { n, k });
    }
    Ok(())
}

fn check_shape(x: &Matrix, n: usize, k: usize) -> Result<(), ManifoldError> {
    check_size(n, k)?;
    if x.shape() != (2 * n, 2 * k) {
        return Err(ManifoldError::ShapeMismatch {
            expected: (2 * n, 2 * k),
            got: x.shape(),
        });
    }
    Ok(())
}

/// `||X^T J_2n X - J_2k||_F`.
pub fn symplectic_residual(x: &Matrix, n: usize, k: usize) -> Result<f64, ManifoldError> {
    check_shape(x, n, k)?;
    let gram = x.transpose().matmul(&j_mul(x))?;
    Ok(frobenius_norm(&(&gram - &standard_j(k))))
}

/// `||Z^T J P + P^T J Z||_F`, the defect of `Z` as a tangent vector at `P`.
pub fn tangent_residual(p: &Matrix, z: &Matrix) -> Result<f64, ManifoldError> {
    if p.shape() != z.shape() {
        return Err(ManifoldError::ShapeMismatch {
            expected: p.shape(),
            got: z.shape(),
        });
    }
    let s = z.transpose().matmul(&j_mul(p))?;
    Ok(frobenius_norm(&(&s - &s.transpose())))
}

/// A `2n x 2k` matrix certified to lie on `Sp(2n, 2k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticPoint {
    mat: Matrix,
    n: usize,
    k: usize,
}

impl SymplecticPoint {
    /// Certifies `mat` with the construction tolerance [`POINT_TOL`].
    pub fn new(mat: Matrix, n: usize, k: usize) -> Result<Self, ManifoldError> {
        Self::with_tolerance(mat, n, k, POINT_TOL)
    }

    pub fn with_tolerance(mat: Matrix, n: usize, k: usize, tol: f64) -> Result<Self, ManifoldError> {
        let residual = symplectic_residual(&mat, n, k)?;
        if !(residual <= tol) {
            return Err(ManifoldError::ConstraintViolation { residual, tol });
        }
        Ok(Self { mat, n, k })
    }

    /// The point `J_2n` on the square manifold `Sp(2n)`.
    pub fn standard(n: usize) -> Self {
        Self {
            mat: standard_j(n),
            n,
            k: n,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mat: Matrix::identity(2 * n),
            n,
            k: n,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn residual(&self) -> f64 {
        symplectic_residual(&self.mat, self.n, self.k).expect("certified shape")
    }

    /// Text checkpoint: a `rows cols n k` header then one row per line,
    /// entries with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.mat.rows(), self.mat.cols(), self.n, self.k);
        write_rows(&mut out, &self.mat);
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ManifoldError> {
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| ManifoldError::Io("empty checkpoint".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| ManifoldError::Io(format!("bad header: {e}")))?;
        let [rows, cols, n, k] = header[..] else {
            return Err(ManifoldError::Io("header must be 'rows cols n k'".into()));
        };
        let mat = parse_rows(lines, rows, cols).map_err(ManifoldError::Io)?;
        Self::new(mat, n, k)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifoldError> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
            .map_err(|e| ManifoldError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ManifoldError> {
        let text = std::fs::read_to_string(path).map_err(|e| ManifoldError::Io(e.to_string()))?;
        Self::from_text(&text)
    }
}

pub(crate) fn write_rows(out: &mut String, m: &Matrix) {
    for i in 0..m.rows() {
        let row = m.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
}

pub(crate) fn parse_rows<'a>(
    lines: impl Iterator<Item = &'a str>,
    rows: usize,
    cols: usize,
) -> Result<Matrix, String> {
    let mut data = Vec::with_capacity(rows * cols);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|e| format!("line {}: {e}", lineno + 2))?,
            );
        }
    }
    Matrix::new(rows, cols, data).map_err(|e| e.to_string())
}

/// A tangent vector together with its base point.
#[derive(Debug, Clone)]
pub struct TangentVector<'a> {
    mat: Matrix,
    base: &'a SymplecticPoint,
}

impl<'a> TangentVector<'a> {
    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn base(&self) -> &'a SymplecticPoint {
        self.base
    }

    pub fn residual(&self) -> f64 {
        tangent_residual(self.base.matrix(), &self.mat).expect("same shape")
    }
}

/// Random point on `Sp(2n, 2k)` with seed-matrix entries drawn from
/// `Normal(0, 0.1^2)`.
pub fn random_symplectic(n: usize, k: usize, seed: u64) -> Result<SymplecticPoint, ManifoldError> {
    random_symplectic_with_sigma(n, k, seed, DEFAULT_INIT_SIGMA)
}

pub fn random_symplectic_with_sigma(
    n: usize,
    k: usize,
    seed: u64,
    sigma: f64,
) -> Result<SymplecticPoint, ManifoldError> {
    check_size(n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| ManifoldError::Linalg(LinalgError::InvalidData(e.to_string())))?;
    let lambda = Matrix::from_fn(2 * k, 2 * k, |_, _| normal.sample(&mut rng));
    symplectic_from_seed_matrix(n, k, &lambda)
}

/// Deterministic construction from a `2k x 2k` seed matrix `Λ`.
///
/// `L = Λ^T Λ` is symmetric, so `Z = [L[k..]; -L[..k]]` is Hamiltonian and
/// `V = exp(Z)` is symplectic. The rows of `V` are then spread over the
/// `2n` rows with zero padding: `[V[..k]; 0; V[k..]; 0]`.
pub fn symplectic_from_seed_matrix(
    n: usize,
    k: usize,
    lambda: &Matrix,
) -> Result<SymplecticPoint, ManifoldError> {
    check_size(n, k)?;
    if lambda.shape() != (2 * k, 2 * k) {
        return Err(ManifoldError::ShapeMismatch {
            expected: (2 * k, 2 * k),
            got: lambda.shape(),
        });
    }
    let l = lambda.transpose().matmul(lambda)?;
    let z = Matrix::from_fn(2 * k, 2 * k, |i, j| if i < k { l[(k + i, j)] } else { -l[(i - k, j)] });
    let v = linalg::matrix_exp(&z)?;
    let mut m = Matrix::zeros(2 * n, 2 * k);
    for i in 0..k {
        m.row_mut(i).copy_from_slice(v.row(i));
        m.row_mut(n + i).copy_from_slice(v.row(k + i));
    }
    SymplecticPoint::new(m, n, k)
}

/// `X^+ = J_2k^T X^T J_2n`.
pub fn symplectic_inverse(x: &Matrix, n: usize, k: usize) -> Result<Matrix, ManifoldError> {
    check_shape(x, n, k)?;
    Ok(symplectic_inverse_unchecked(x))
}

fn symplectic_inverse_unchecked(x: &Matrix) -> Matrix {
    // X^T J_2n = (J_2n^T X)^T
    let xt_j = jt_mul(x).transpose();
    jt_mul(&xt_j)
}

/// Projection `(I_2n + P J_2k P^T J_2n) X`.
///
/// For square `P` this operator vanishes identically: `P J P^T = J` and so
/// `I + J J = 0`. That case returns exact zeros instead of rounding noise.
/// Only rectangular bases give a useful projection.
pub fn project_tangent_paper(p: &SymplecticPoint, x: &Matrix) -> Result<Matrix, ManifoldError> {
    check_shape(x, p.n, p.k)?;
    if p.n == p.k {
        return Ok(Matrix::zeros(x.rows(), x.cols()));
    }
    let pm = p.matrix();
    let pjpt = pm.matmul(&j_mul(&pm.transpose()))?;
    let op = &Matrix::identity(2 * p.n) + &pjpt.matmul(&standard_j(p.n))?;
    Ok(op.matmul(x)?)
}

/// Corrector projection `Z = X + 1/2 P J_2k S` with
/// `S = X^T J P + P^T J X`.
///
/// `Z` satisfies the tangent constraint identically and equals `X` when `X`
/// is already tangent.
pub fn project_tangent_stable<'a>(
    p: &'a SymplecticPoint,
    x: &Matrix,
) -> Result<TangentVector<'a>, ManifoldError> {
    check_shape(x, p.n, p.k)?;
    let pm = p.matrix();
    let a = x.transpose().matmul(&j_mul(pm))?;
    let s = &a - &a.transpose();
    let corr = pm.matmul(&j_mul(&s))?.scale(0.5);
    Ok(TangentVector {
        mat: x + &corr,
        base: p,
    })
}

/// Projects with the requested operator.
pub fn project_tangent(
    p: &SymplecticPoint,
    x: &Matrix,
    mode: ProjectionMode,
) -> Result<Matrix, ManifoldError> {
    match mode {
        ProjectionMode::Paper => project_tangent_paper(p, x),
        ProjectionMode::Stable => Ok(project_tangent_stable(p, x)?.into_matrix()),
    }
}

/// Cayley retraction `R_P(λX)`.
///
/// With `B = P^+ X` and `H = X - P B` the result is
/// `(λH + 2P)(λ²/4 H^+ H - λ/2 B + I)^{-1} - P`, re-certified with
/// [`RETRACT_TOL`]. A singular inner system means the step is too large.
pub fn cayley_retract(
    p: &SymplecticPoint,
    x: &Matrix,
    lambda: f64,
) -> Result<SymplecticPoint, ManifoldError> {
    check_shape(x, p.n, p.k)?;
    let tan = tangent_residual(p.matrix(), x)?;
    if tan > TANGENT_TOL * frobenius_norm(x).max(1.0) {
        return Err(ManifoldError::NotTangent { residual: tan });
    }
    let pm = p.matrix();
    let b = symplectic_inverse_unchecked(pm).matmul(x)?;
    let h = x - &pm.matmul(&b)?;
    let hph = symplectic_inverse_unchecked(&h).matmul(&h)?;
    let mut inner = hph.scale(lambda * lambda / 4.0);
    inner.axpy(-lambda / 2.0, &b);
    inner += &Matrix::identity(2 * p.k);
    let mut lhs = h.scale(lambda);
    lhs.axpy(2.0, pm);
    let out = &linalg::solve_right(&lhs, &inner)? - pm;
    SymplecticPoint::with_tolerance(out, p.n, p.k, RETRACT_TOL)
}

/// Inverse of the Cayley retraction: returns the tangent vector at `P` that
/// [`cayley_retract`] (with `λ = 1`) maps to `Q`.
pub fn inverse_retract(p: &SymplecticPoint, q: &SymplecticPoint) -> Result<Matrix, ManifoldError> {
    if (p.n, p.k) != (q.n, q.k) {
        return Err(ManifoldError::ShapeMismatch {
            expected: p.mat.shape(),
            got: q.mat.shape(),
        });
    }
    let (pm, qm) = (p.matrix(), q.matrix());
    let eye = Matrix::identity(2 * p.k);
    let u = linalg::inverse(&(&eye + &symplectic_inverse_unchecked(qm).matmul(pm)?))?;
    let v = linalg::inverse(&(&eye + &symplectic_inverse_unchecked(pm).matmul(qm)?))?;
    let b = (&u - &v).scale(2.0);
    let h = (&(pm + qm).matmul(&v)? - pm).scale(2.0);
    Ok(&pm.matmul(&b)? + &h)
}
