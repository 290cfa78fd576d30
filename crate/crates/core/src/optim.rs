//! Parameter updates: Adam for Euclidean parameters, Riemannian gradient
//! descent on the symplectic Stiefel manifold, the soft symplectic penalty
//! and global-norm gradient clipping.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::linalg::{LinalgError, Matrix};
use crate::symplectic::{cayley_retract, project_tangent, standard_j, ManifoldError, ProjectionMode, SymplecticPoint};

/// Retries after the first attempt when the retraction system is singular.
pub const MAX_STEP_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifold step failed after {attempts} attempts (last step size {lr:e}): {source}")]
    StepFailed {
        attempts: usize,
        lr: f64,
        source: ManifoldError,
    },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, OptimError>;

/// Global L2 norm over all entries of all gradients.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / g` when the global norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamState {
    /// Moments for parameters of the given shapes, all subject to decay.
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self::with_decay_mask(cfg, shapes, &vec![true; shapes.len()])
    }

    /// `decay[i] == false` exempts parameter `i` from weight decay.
    pub fn with_decay_mask(cfg: AdamConfig, shapes: &[(usize, usize)], decay: &[bool]) -> Self {
        assert_eq!(shapes.len(), decay.len(), "one decay flag per parameter");
        Self {
            cfg,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            decay: decay.to_vec(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch(format!(
                "{} params and {} grads for {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(OptimError::ShapeMismatch(format!(
                    "slot {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay[i] { c.lr * c.weight_decay } else { 0.0 };
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, (x, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= decay * *x;
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// One Riemannian step `R_P(-η Π_P(grad))`. A singular retraction system
/// halves `η` and retries up to [`MAX_STEP_RETRIES`] times. Returns the new
/// point and the step size actually used.
pub fn riemannian_update(
    point: &SymplecticPoint,
    grad: &Matrix,
    lr: f64,
    mode: ProjectionMode,
) -> Result<(SymplecticPoint, f64)> {
    if grad.shape() != point.matrix().shape() {
        return Err(OptimError::ShapeMismatch(format!(
            "gradient {:?} for point {:?}",
            grad.shape(),
            point.matrix().shape()
        )));
    }
    let direction = project_tangent(point, grad, mode)?;
    let mut eta = lr;
    let mut attempts = 0;
    loop {
        attempts += 1;
        match cayley_retract(point, &direction.scale(-eta), 1.0) {
            Ok(next) => return Ok((next, eta)),
            Err(ManifoldError::Linalg(LinalgError::SingularMatrix { .. })) if attempts <= MAX_STEP_RETRIES => {
                eta *= 0.5;
            }
            Err(e @ ManifoldError::Linalg(LinalgError::SingularMatrix { .. })) => {
                return Err(OptimError::StepFailed {
                    attempts,
                    lr: eta,
                    source: e,
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Riemannian gradient descent state for one manifold parameter.
#[derive(Debug, Clone)]
pub struct RgdState {
    pub point: SymplecticPoint,
    pub lr: f64,
    pub mode: ProjectionMode,
    pub steps: u64,
}

impl RgdState {
    pub fn new(point: SymplecticPoint, lr: f64, mode: ProjectionMode) -> Self {
        Self {
            point,
            lr,
            mode,
            steps: 0,
        }
    }

    pub fn step(&mut self, grad: &Matrix) -> Result<()> {
        let (next, _) = riemannian_update(&self.point, grad, self.lr, self.mode)?;
        self.point = next;
        self.steps += 1;
        Ok(())
    }
}

/// `weight · ||M^T J M - J||²_F` recorded on the tape.
pub fn soft_penalty(tape: &mut Tape, m: Var, weight: f64) -> Result<Var> {
    let (r, c) = tape.value(m).shape();
    if r != c || r % 2 != 0 {
        return Err(OptimError::ShapeMismatch(format!(
            "penalty needs a square even matrix, got {r}x{c}"
        )));
    }
    let j = tape.constant(standard_j(r / 2));
    let mt = tape.transpose(m);
    let jm = tape.matmul(j, m)?;
    let mtjm = tape.matmul(mt, jm)?;
    let diff = tape.sub(mtjm, j)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, weight))
}

/// Numeric value of [`soft_penalty`].
pub fn soft_penalty_value(m: &Matrix, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mv = tape.constant(m.clone());
    let p = soft_penalty(&mut tape, mv, weight)?;
    Ok(tape.scalar(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use crate::linalg::frobenius_norm;
    use crate::symplectic::{random_symplectic, symplectic_residual};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clipping_examples() {
        let mut small = vec![Matrix::from_rows(&[[0.3, 0.4]])];
        let before = small.clone();
        assert_eq!(clip_gradients(&mut small, 1.0), 0.5);
        assert_eq!(small, before);
        let mut g = vec![Matrix::from_rows(&[[3.0, 4.0]])];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((g[0][(0, 0)] - 0.6).abs() < 1e-15 && (g[0][(0, 1)] - 0.8).abs() < 1e-15);
        let mut z = vec![Matrix::zeros(2, 2), Matrix::zeros(1, 3)];
        clip_gradients(&mut z, 1.0);
        assert_eq!(global_norm(&z), 0.0);
    }

    #[test]
    fn clipping_never_increases_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut g: Vec<Matrix> = (0..3)
                .map(|_| Matrix::from_fn(2, 3, |_, _| rng.random_range(-5.0..5.0)))
                .collect();
            let before: Vec<f64> = g.iter().map(frobenius_norm).collect();
            let max = rng.random_range(0.1..10.0);
            clip_gradients(&mut g, max);
            assert!(global_norm(&g) <= max * (1.0 + 1e-12) || global_norm(&g) <= before.iter().map(|x| x * x).sum::<f64>().sqrt());
            for (a, b) in g.iter().zip(&before) {
                assert!(frobenius_norm(a) <= *b);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_only_decays() {
        let mut p = Matrix::from_rows(&[[2.0, -1.0]]);
        let mut st = AdamState::new(AdamConfig::new(0.1, 0.01), &[(1, 2)]);
        st.step(&mut [&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[2.0 * (1.0 - 0.001), -(1.0 - 0.001)]]));
        let mut q = Matrix::from_rows(&[[2.0]]);
        let mut nd = AdamState::with_decay_mask(AdamConfig::new(0.1, 0.01), &[(1, 1)], &[false]);
        nd.step(&mut [&mut q], &[Matrix::zeros(1, 1)]).unwrap();
        assert_eq!(q[(0, 0)], 2.0);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let g = Matrix::from_rows(&[[0.5, -3.0, 1e-3]]);
        let mut p = Matrix::zeros(1, 3);
        let mut st = AdamState::new(AdamConfig::new(0.01, 0.0), &[(1, 3)]);
        st.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for j in 0..3 {
            let gj = g[(0, j)];
            let expect = -0.01 * gj / (gj.abs() + 1e-8);
            assert!((p[(0, j)] - expect).abs() <= 1e-15);
            assert!((p[(0, j)] + 0.01 * gj.signum()).abs() <= 1e-7);
        }
    }

    #[test]
    fn adam_descends_scalar_quadratic() {
        let mut x = Matrix::from_rows(&[[1.0]]);
        let mut st = AdamState::new(AdamConfig::new(0.01, 0.0), &[(1, 1)]);
        let mut f = 0.5;
        for _ in 0..2 {
            let g = x.clone();
            st.step(&mut [&mut x], &[g]).unwrap();
            let nf = 0.5 * x[(0, 0)] * x[(0, 0)];
            assert!(nf < f);
            f = nf;
        }
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let g = Matrix::from_rows(&[[0.3, -0.2]]);
        let run = || {
            let mut p = Matrix::from_rows(&[[1.0, 2.0]]);
            let mut st = AdamState::new(AdamConfig::new(0.05, 1e-3), &[(1, 2)]);
            for _ in 0..5 {
                st.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let mut p = Matrix::zeros(1, 2);
        let mut st = AdamState::new(AdamConfig::new(0.05, 0.0), &[(1, 2)]);
        assert!(st.step(&mut [&mut p], &[Matrix::zeros(2, 1)]).is_err());
    }

    #[test]
    fn rgd_zero_gradient_keeps_point() {
        let p = random_symplectic(3, 2, 1).unwrap();
        let mut st = RgdState::new(p.clone(), 0.1, ProjectionMode::Stable);
        st.step(&Matrix::zeros(6, 4)).unwrap();
        assert_eq!(st.point.matrix(), p.matrix());
    }

    #[test]
    fn rgd_descends_toward_symplectic_target() {
        for seed in 0..5 {
            let target = random_symplectic(2, 2, 100 + seed).unwrap();
            let mut st = RgdState::new(random_symplectic(2, 2, seed).unwrap(), 0.05, ProjectionMode::Stable);
            let f = |m: &Matrix| 0.5 * frobenius_norm(&(m - target.matrix())).powi(2);
            let mut prev = f(st.point.matrix());
            for step in 0..50 {
                let grad = st.point.matrix() - target.matrix();
                st.step(&grad).unwrap();
                let now = f(st.point.matrix());
                assert!(now < prev, "seed {seed} step {step}: {now} >= {prev}");
                assert!(st.point.residual() <= 1e-8);
                prev = now;
            }
        }
    }

    #[test]
    fn first_order_projection_freezes_square_points() {
        let m0 = random_symplectic(2, 2, 7).unwrap();
        let mut st = RgdState::new(m0.clone(), 0.05, ProjectionMode::Paper);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            st.step(&g).unwrap();
            assert_eq!(st.point.matrix(), m0.matrix());
        }
    }

    #[test]
    fn rgd_keeps_manifold_over_many_random_steps() {
        let mut st = RgdState::new(random_symplectic(4, 2, 3).unwrap(), 0.01, ProjectionMode::Stable);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let mut g = vec![Matrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0))];
            clip_gradients(&mut g, 1.0);
            st.step(&g[0]).unwrap();
        }
        assert!(st.point.residual() <= 1e-7, "{:e}", st.point.residual());
    }

    #[test]
    fn rgd_scale_consistency() {
        let p = random_symplectic(3, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let (a, _) = riemannian_update(&p, &g, 0.1, ProjectionMode::Stable).unwrap();
        let (b, _) = riemannian_update(&p, &g.scale(2.0), 0.05, ProjectionMode::Stable).unwrap();
        assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn huge_steps_halve_or_fail_cleanly() {
        let p = random_symplectic(1, 1, 0).unwrap();
        let g = Matrix::from_rows(&[[3.0, -1.0], [2.0, 0.5]]);
        match riemannian_update(&p, &g, 1e6, ProjectionMode::Stable) {
            Ok((q, eta)) => {
                assert!(eta <= 1e6);
                assert!(symplectic_residual(q.matrix(), 1, 1).unwrap() <= 1e-7);
            }
            Err(e) => assert!(matches!(e, OptimError::StepFailed { .. } | OptimError::Manifold(_))),
        }
    }

    #[test]
    fn penalty_examples() {
        let m = random_symplectic(2, 2, 4).unwrap();
        assert!(soft_penalty_value(m.matrix(), 1.0).unwrap() <= 1e-18);
        let v = soft_penalty_value(&Matrix::identity(2).scale(2.0), 0.5).unwrap();
        assert!((v - 0.5 * 18.0).abs() < 1e-12);
        assert!(soft_penalty_value(&Matrix::zeros(3, 3), 1.0).is_err());
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m0 = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let m = tape.leaf(m0.clone());
        let p = soft_penalty(&mut tape, m, 0.7).unwrap();
        let g = tape.gradient(p, &[m]).unwrap().remove(0);
        let fd = finite_difference_gradient(|x| soft_penalty_value(x, 0.7).unwrap(), &m0, 1e-5);
        assert!(frobenius_norm(&(&g - &fd)) <= 1e-4 * frobenius_norm(&fd));
    }

    #[test]
    fn adam_minimizes_penalty() {
        let mut m = Matrix::identity(2).scale(1.5);
        let mut st = AdamState::new(AdamConfig::new(0.01, 0.0), &[(2, 2)]);
        let mut value = f64::INFINITY;
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let mv = tape.leaf(m.clone());
            let p = soft_penalty(&mut tape, mv, 1.0).unwrap();
            value = tape.scalar(p);
            if value < 1e-4 {
                break;
            }
            let g = tape.gradient(p, &[mv]).unwrap();
            st.step(&mut [&mut m], &g).unwrap();
        }
        assert!(value < 1e-4, "penalty {value}");
    }
}
