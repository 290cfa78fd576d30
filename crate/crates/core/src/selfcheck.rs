//! Property suite for the symplectic manifold operations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{determinant, frobenius_norm, Matrix};
use crate::symplectic::{
    cayley_retract, inverse_retract, project_tangent_paper, project_tangent_stable, random_symplectic,
    symplectic_residual, tangent_residual, ManifoldError, SymplecticPoint,
};
use crate::sub_seed;

pub const DEFAULT_SIZES: [(usize, usize); 4] = [(1, 1), (2, 1), (4, 2), (8, 4)];
pub const DEFAULT_SEEDS: u64 = 100;

pub const INIT_TOL: f64 = 1e-10;
pub const DET_TOL: f64 = 1e-7;
pub const STABLE_TANGENT_TOL: f64 = 1e-10;
pub const FIRST_ORDER_TANGENT_TOL: f64 = 1e-9;
pub const CLOSURE_TOL: f64 = 1e-9;
pub const ROUND_TRIP_TOL: f64 = 1e-8;
/// Scale of the tangent step used to build nearby point pairs.
pub const NEARBY_STEP: f64 = 0.1;

/// Worst value of one property over a seed range.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub property: &'static str,
    pub n: usize,
    pub k: usize,
    pub seeds: u64,
    pub worst: f64,
    pub tol: f64,
    /// First seed that broke the bound.
    pub failed_seed: Option<u64>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failed_seed.is_none()
    }
}

/// Parses `"n,k;n,k;..."`.
pub fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>, String> {
    let mut out = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let nums: Vec<&str> = part.split(',').map(str::trim).collect();
        let [n, k] = nums[..] else {
            return Err(format!("size '{part}' is not 'n,k'"));
        };
        let n: usize = n.parse().map_err(|_| format!("size '{part}': bad n"))?;
        let k: usize = k.parse().map_err(|_| format!("size '{part}': bad k"))?;
        if k == 0 || k > n {
            return Err(format!("size '{part}': need 1 <= k <= n"));
        }
        out.push((n, k));
    }
    if out.is_empty() {
        return Err("no sizes given".into());
    }
    Ok(out)
}

/// Residual of `m` as a point of `Sp(2n, 2k)`, or the residual as the
/// error when it exceeds `tol`.
pub fn check_point(m: &Matrix, n: usize, k: usize, tol: f64) -> Result<f64, f64> {
    match symplectic_residual(m, n, k) {
        Ok(r) if r <= tol => Ok(r),
        Ok(r) => Err(r),
        Err(_) => Err(f64::INFINITY),
    }
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// A point and a nearby point reached by one retraction step.
pub fn nearby_pair(n: usize, k: usize, seed: u64) -> Result<(SymplecticPoint, SymplecticPoint), ManifoldError> {
    let p = random_symplectic(n, k, seed)?;
    let x = gaussian(2 * n, 2 * k, sub_seed(seed, 1)).scale(NEARBY_STEP);
    let z = project_tangent_stable(&p, &x)?.into_matrix();
    let q = cayley_retract(&p, &z, 1.0)?;
    Ok((p, q))
}

struct Tracker {
    result: PropertyResult,
}

impl Tracker {
    fn new(property: &'static str, n: usize, k: usize, tol: f64) -> Self {
        Self {
            result: PropertyResult {
                property,
                n,
                k,
                seeds: 0,
                worst: 0.0,
                tol,
                failed_seed: None,
            },
        }
    }

    fn record(&mut self, seed: u64, value: Result<f64, ManifoldError>) {
        let v = value.unwrap_or(f64::INFINITY);
        let r = &mut self.result;
        r.seeds += 1;
        if v.is_nan() || v > r.worst {
            r.worst = if v.is_nan() { f64::INFINITY } else { v };
        }
        if !(v <= r.tol) && r.failed_seed.is_none() {
            r.failed_seed = Some(seed);
        }
    }
}

/// Runs every property for each size over seeds `0..seeds`.
pub fn run_manifold_suite(sizes: &[(usize, usize)], seeds: u64) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    for &(n, k) in sizes {
        let mut init = Tracker::new("init residual", n, k, INIT_TOL);
        let mut det = Tracker::new("determinant", n, k, DET_TOL);
        let mut stable = Tracker::new("stable projection tangency", n, k, STABLE_TANGENT_TOL);
        let first_order_tol = if n == k { 0.0 } else { FIRST_ORDER_TANGENT_TOL };
        let mut first_order = Tracker::new("first-order projection tangency", n, k, first_order_tol);
        let mut closure = Tracker::new("retraction closure", n, k, CLOSURE_TOL);
        let mut round = Tracker::new("retraction round trip", n, k, ROUND_TRIP_TOL);
        for seed in 0..seeds {
            let p = match random_symplectic(n, k, seed) {
                Ok(p) => p,
                Err(e) => {
                    for t in [&mut init, &mut det, &mut stable, &mut first_order, &mut closure, &mut round] {
                        t.record(seed, Err(e.clone()));
                    }
                    continue;
                }
            };
            init.record(seed, Ok(p.residual()));
            if n == k {
                det.record(seed, determinant(p.matrix()).map(|d| (d - 1.0).abs()).map_err(Into::into));
            }
            let x = gaussian(2 * n, 2 * k, sub_seed(seed, 2));
            stable.record(
                seed,
                project_tangent_stable(&p, &x).and_then(|z| tangent_residual(p.matrix(), z.matrix())),
            );
            first_order.record(
                seed,
                project_tangent_paper(&p, &x).and_then(|z| {
                    if n == k {
                        Ok(z.max_abs())
                    } else {
                        tangent_residual(p.matrix(), &z)
                    }
                }),
            );
            match nearby_pair(n, k, seed) {
                Ok((p, q)) => {
                    closure.record(seed, symplectic_residual(q.matrix(), n, k));
                    let back = inverse_retract(&p, &q)
                        .and_then(|z| cayley_retract(&p, &z, 1.0))
                        .map(|r| frobenius_norm(&(r.matrix() - q.matrix())));
                    round.record(seed, back);
                }
                Err(e) => {
                    closure.record(seed, Err(e.clone()));
                    round.record(seed, Err(e));
                }
            }
        }
        out.extend([init, det, stable, first_order, closure, round].into_iter().filter(|t| t.result.seeds > 0).map(|t| t.result));
    }
    out
}
