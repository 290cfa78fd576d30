//! Hamiltonian node dynamics.
//!
//! Each node carries a phase vector `z = [q | p]` of width `2k`. Rows of a
//! `nodes x 2k` matrix are nodes. The energy network `H` maps a phase vector
//! to a scalar and the total energy is the sum over nodes. The field is
//! `dz/dt = M ∇H(z)` applied per node, with `M` chosen by
//! [`StructureChoice`]. Integration is classic RK4, recorded on an autodiff
//! tape so the loss can be differentiated through the whole trajectory.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::linalg::{LinalgError, Matrix};
use crate::symplectic::{parse_rows, standard_j, write_rows, SymplecticPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("structure matrix is singular at the current state")]
    SingularStructure,
    #[error("state became non-finite at t={t}")]
    NonFinite { t: f64 },
    #[error("energy trace is empty")]
    EmptyTrace,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("I/O: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, DynamicsError>;

/// Weights and biases of a tanh multilayer perceptron with a linear output
/// layer. Inputs are rows: `y = tanh(x W_1 + b_1) ... W_L + b_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

impl MlpParams {
    pub fn new(weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(DynamicsError::InvalidArgument(format!(
                "{} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if b.shape() != (1, w.cols()) {
                return Err(DynamicsError::ShapeMismatch(format!(
                    "layer {l}: bias {:?} for weight {:?}",
                    b.shape(),
                    w.shape()
                )));
            }
            if l > 0 && weights[l - 1].cols() != w.rows() {
                return Err(DynamicsError::ShapeMismatch(format!(
                    "layer {l}: input {} after output {}",
                    w.rows(),
                    weights[l - 1].cols()
                )));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(DynamicsError::InvalidArgument(format!("layer {l}: non-finite entries")));
            }
        }
        Ok(Self { weights, biases })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Matrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..=bound)));
            biases.push(Matrix::from_fn(1, w[1], |_, _| rng.random_range(-bound..=bound)));
        }
        Ok(Self { weights, biases })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            weights: dims.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect(),
            biases: dims.windows(2).map(|w| Matrix::zeros(1, w[1])).collect(),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].rows()];
        d.extend(self.weights.iter().map(Matrix::cols));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    /// Parameters in the order `w_1, b_1, w_2, b_2, ...`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Numeric forward pass on the rows of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(DynamicsError::ShapeMismatch(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = self.bind_const(&mut tape);
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant.
    pub fn bind_const(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.constant(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.constant(b.clone())).collect(),
        }
    }

    /// Text checkpoint: `mlp <layers>` then for every matrix a `rows cols`
    /// line followed by its rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("mlp {}\n", self.weights.len());
        for p in self.params() {
            let _ = writeln!(out, "{} {}", p.rows(), p.cols());
            write_rows(&mut out, p);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| DynamicsError::Io(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
        let layers: usize = header
            .strip_prefix("mlp ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad header '{header}'")))?;
        let mut mats = Vec::with_capacity(2 * layers);
        for _ in 0..2 * layers {
            let shape = lines.next().ok_or_else(|| bad("truncated checkpoint".into()))?;
            let dims: Vec<usize> = shape
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("bad shape line '{shape}': {e}")))?;
            let [rows, cols] = dims[..] else {
                return Err(bad(format!("bad shape line '{shape}'")));
            };
            mats.push(parse_rows(lines.by_ref().take(rows), rows, cols).map_err(bad)?);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, m) in mats.into_iter().enumerate() {
            if i % 2 == 0 {
                weights.push(m);
            } else {
                biases.push(m);
            }
        }
        Self::new(weights, biases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes()).map_err(|e| DynamicsError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DynamicsError::Io(e.to_string()))?;
        Self::from_text(&text)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(DynamicsError::InvalidArgument(format!("bad mlp dims {dims:?}")));
    }
    Ok(())
}

/// An MLP whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl BoundMlp {
    /// Same order as [`MlpParams::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if l < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Jacobian at a single row `z`: entry `(i, j)` is `∂f_j/∂z_i`.
    ///
    /// For `f(z) = tanh(z W_1 + b_1) W_2 + b_2` this is `W_1 diag(1 - a²) W_2`,
    /// and deeper networks chain the same way.
    pub fn jacobian_at(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if tape.value(z).rows() != 1 {
            return Err(DynamicsError::ShapeMismatch(format!(
                "jacobian needs a single row, got {:?}",
                tape.value(z).shape()
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = z;
        let mut acc: Option<Var> = None;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let factor = if l < last {
                let lin = tape.matmul(h, w)?;
                let pre = tape.add(lin, b)?;
                h = tape.tanh(pre);
                let sq = tape.mul(h, h)?;
                let d = tape.affine(sq, -1.0, 1.0);
                let rows = tape.value(w).rows();
                let dr = tape.broadcast_rows(d, rows)?;
                tape.mul(w, dr)?
            } else {
                w
            };
            acc = Some(match acc {
                Some(a) => tape.matmul(a, factor)?,
                None => factor,
            });
        }
        Ok(acc.expect("at least one layer"))
    }
}

/// Scalar energy of a batch of phase vectors, summed over rows.
pub trait Hamiltonian {
    fn energy(&self, tape: &mut Tape, z: Var) -> Result<Var>;
}

/// `½ ||z||²` summed over nodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticHamiltonian;

impl Hamiltonian for QuadraticHamiltonian {
    fn energy(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let sq = tape.mul(z, z)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5))
    }
}

impl Hamiltonian for BoundMlp {
    fn energy(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let out = self.forward(tape, z)?;
        if tape.value(out).cols() != 1 {
            return Err(DynamicsError::ShapeMismatch(format!(
                "energy network must output a scalar per node, got width {}",
                tape.value(out).cols()
            )));
        }
        Ok(tape.sum(out))
    }
}

impl Hamiltonian for MlpParams {
    fn energy(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.bind_const(tape).energy(tape, z)
    }
}

/// Node positions and momenta, both `nodes x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Matrix,
    pub p: Matrix,
}

impl PhaseState {
    pub fn new(q: Matrix, p: Matrix) -> Result<Self> {
        if q.shape() != p.shape() {
            return Err(DynamicsError::ShapeMismatch(format!("q {:?} vs p {:?}", q.shape(), p.shape())));
        }
        if !q.is_finite() || !p.is_finite() {
            return Err(DynamicsError::InvalidArgument("non-finite phase state".into()));
        }
        Ok(Self { q, p })
    }

    pub fn k(&self) -> usize {
        self.q.cols()
    }

    /// `[q | p]`, one row per node.
    pub fn stacked(&self) -> Matrix {
        self.q.hstack(&self.p).expect("same rows")
    }

    pub fn from_stacked(z: &Matrix) -> Result<Self> {
        if !z.cols().is_multiple_of(2) {
            return Err(DynamicsError::ShapeMismatch(format!("odd phase width {}", z.cols())));
        }
        let k = z.cols() / 2;
        Self::new(z.slice_cols(0, k), z.slice_cols(k, 2 * k))
    }
}

/// How the energy gradient is turned into a velocity.
#[derive(Debug, Clone)]
pub enum StructureChoice {
    /// `M = J_2k`.
    StandardJ,
    /// Free `2k x 2k` matrix.
    Unconstrained(Matrix),
    /// `M^{-1} = K` with `K_ij = ∂_i f_j - ∂_j f_i` for a network
    /// `f: R^2k -> R^2k`. `K` is taken at the mean phase vector unless
    /// `per_node` is set.
    NeuralForm { f: MlpParams, per_node: bool },
    /// Point of `Sp(2k, 2k)`.
    ManifoldConstrained(SymplecticPoint),
    /// Free matrix with a penalty `weight · ||M^T J M - J||²_F` in the loss.
    SoftRegularized { m: Matrix, weight: f64 },
}

impl StructureChoice {
    /// Records the structure on `tape`. Matrices become leaves when
    /// `trainable` is set, constants otherwise.
    pub fn bind(&self, tape: &mut Tape, k: usize, trainable: bool) -> Result<BoundStructure> {
        let put = |tape: &mut Tape, m: &Matrix| -> Result<Var> {
            if m.shape() != (2 * k, 2 * k) {
                return Err(DynamicsError::ShapeMismatch(format!(
                    "structure must be {0}x{0}, got {1:?}",
                    2 * k,
                    m.shape()
                )));
            }
            Ok(if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) })
        };
        Ok(match self {
            StructureChoice::StandardJ => BoundStructure::Matrix(tape.constant(standard_j(k))),
            StructureChoice::Unconstrained(m) | StructureChoice::SoftRegularized { m, .. } => {
                BoundStructure::Matrix(put(tape, m)?)
            }
            StructureChoice::ManifoldConstrained(p) => BoundStructure::Matrix(put(tape, p.matrix())?),
            StructureChoice::NeuralForm { f, per_node } => {
                if f.input_dim() != 2 * k || f.output_dim() != 2 * k {
                    return Err(DynamicsError::ShapeMismatch(format!(
                        "neural form must map {0} -> {0}, got {1:?}",
                        2 * k,
                        f.dims()
                    )));
                }
                BoundStructure::NeuralForm {
                    f: if trainable { f.bind(tape) } else { f.bind_const(tape) },
                    per_node: *per_node,
                }
            }
        })
    }
}

/// A structure whose parameters live on a tape.
#[derive(Debug, Clone)]
pub enum BoundStructure {
    Matrix(Var),
    NeuralForm { f: BoundMlp, per_node: bool },
}

impl BoundStructure {
    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundStructure::Matrix(m) => vec![*m],
            BoundStructure::NeuralForm { f, .. } => f.vars(),
        }
    }
}

/// Skew matrix `K = Jf - Jf^T` of a neural form at the single row `z`.
pub fn neural_form_matrix(tape: &mut Tape, f: &BoundMlp, z: Var) -> Result<Var> {
    let jac = f.jacobian_at(tape, z)?;
    let jt = tape.transpose(jac);
    Ok(tape.sub(jac, jt)?)
}

fn solve_structure(tape: &mut Tape, k: Var, rhs: Var) -> Result<Var> {
    tape.solve(k, rhs).map_err(|e| match e {
        AutodiffError::Linalg(LinalgError::SingularMatrix { .. }) => DynamicsError::SingularStructure,
        other => other.into(),
    })
}

/// Records the field at `z` (`nodes x 2k`). Returns the velocity and the
/// energy at `z`.
pub fn field_on_tape(
    tape: &mut Tape,
    ham: &dyn Hamiltonian,
    structure: &BoundStructure,
    z: Var,
) -> Result<(Var, Var)> {
    let h = ham.energy(tape, z)?;
    let g = tape.grad_graph(h, &[z])?[0];
    let d = match structure {
        BoundStructure::Matrix(m) => {
            let mt = tape.transpose(*m);
            tape.matmul(g, mt)?
        }
        BoundStructure::NeuralForm { f, per_node: false } => {
            let n = tape.value(z).rows();
            let cs = tape.col_sum(z);
            let zbar = tape.scale(cs, 1.0 / n as f64);
            let k = neural_form_matrix(tape, f, zbar)?;
            let gt = tape.transpose(g);
            let dt = solve_structure(tape, k, gt)?;
            tape.transpose(dt)
        }
        BoundStructure::NeuralForm { f, per_node: true } => {
            let n = tape.value(z).rows();
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let zi = tape.slice_rows(z, i, i + 1)?;
                let gi = tape.slice_rows(g, i, i + 1)?;
                let k = neural_form_matrix(tape, f, zi)?;
                let git = tape.transpose(gi);
                let di = solve_structure(tape, k, git)?;
                rows.push(tape.transpose(di));
            }
            tape.concat_rows(&rows)?
        }
    };
    Ok((d, h))
}

/// Number of RK4 steps covering `[t0, t1]` with nominal step `h`.
pub fn step_count(t0: f64, t1: f64, h: f64) -> Result<usize> {
    if !(t1 > t0) || !(h > 0.0) || !t0.is_finite() || !t1.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!(
            "need t1 > t0 and h > 0, got [{t0}, {t1}] with h={h}"
        )));
    }
    Ok((((t1 - t0) / h).round() as usize).max(1))
}

/// Classic RK4 recorded on the tape. Returns the final phase vector and the
/// `(t, H)` values at each of the `steps + 1` step boundaries.
pub fn rk4_on_tape(
    tape: &mut Tape,
    ham: &dyn Hamiltonian,
    structure: &BoundStructure,
    z0: Var,
    t0: f64,
    t1: f64,
    h: f64,
) -> Result<(Var, Vec<(f64, f64)>)> {
    let steps = step_count(t0, t1, h)?;
    let dt = (t1 - t0) / steps as f64;
    let mut z = z0;
    let mut energies = Vec::with_capacity(steps + 1);
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        let (k1, e) = field_on_tape(tape, ham, structure, z)?;
        energies.push((t, tape.scalar(e)));
        let z2 = axpy(tape, z, 0.5 * dt, k1)?;
        let (k2, _) = field_on_tape(tape, ham, structure, z2)?;
        let z3 = axpy(tape, z, 0.5 * dt, k2)?;
        let (k3, _) = field_on_tape(tape, ham, structure, z3)?;
        let z4 = axpy(tape, z, dt, k3)?;
        let (k4, _) = field_on_tape(tape, ham, structure, z4)?;
        let a = tape.add(k2, k3)?;
        let a = tape.scale(a, 2.0);
        let b = tape.add(k1, k4)?;
        let sum = tape.add(a, b)?;
        z = axpy(tape, z, dt / 6.0, sum)?;
        if !tape.value(z).is_finite() {
            return Err(DynamicsError::NonFinite { t: t + dt });
        }
    }
    let e = ham.energy(tape, z)?;
    energies.push((t1, tape.scalar(e)));
    Ok((z, energies))
}

fn axpy(tape: &mut Tape, z: Var, s: f64, d: Var) -> Result<Var> {
    let sd = tape.scale(d, s);
    Ok(tape.add(z, sd)?)
}

/// `p(t0) = Q_φ(q(t0))`, applied row-wise.
pub fn momentum_init(phi: &MlpParams, q: &Matrix) -> Result<Matrix> {
    if phi.input_dim() != q.cols() || phi.output_dim() != q.cols() {
        return Err(DynamicsError::ShapeMismatch(format!(
            "momentum network {:?} for width {}",
            phi.dims(),
            q.cols()
        )));
    }
    phi.forward(q)
}

/// Total energy of a phase state.
pub fn energy(ham: &dyn Hamiltonian, state: &PhaseState) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(state.stacked());
    let e = ham.energy(&mut tape, z)?;
    Ok(tape.scalar(e))
}

/// Velocity `(dq/dt, dp/dt)` at `state`. The field is autonomous, so the
/// time argument only documents the call site.
pub fn field(structure: &StructureChoice, ham: &dyn Hamiltonian, state: &PhaseState, _t: f64) -> Result<PhaseState> {
    let mut tape = Tape::new();
    let bound = structure.bind(&mut tape, state.k(), false)?;
    let z = tape.constant(state.stacked());
    let (d, _) = field_on_tape(&mut tape, ham, &bound, z)?;
    PhaseState::from_stacked(tape.value(d))
}

/// RK4 from `t0` to `t1`. Returns the final state and `(t, H)` at every step
/// boundary.
pub fn rk4_integrate(
    structure: &StructureChoice,
    ham: &dyn Hamiltonian,
    state0: &PhaseState,
    t0: f64,
    t1: f64,
    h: f64,
) -> Result<(PhaseState, Vec<(f64, f64)>)> {
    let mut tape = Tape::new();
    let bound = structure.bind(&mut tape, state0.k(), false)?;
    let z0 = tape.constant(state0.stacked());
    let (z, energies) = rk4_on_tape(&mut tape, ham, &bound, z0, t0, t1, h)?;
    Ok((PhaseState::from_stacked(tape.value(z))?, energies))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRecord {
    pub epoch: usize,
    pub layer: usize,
    pub t: f64,
    pub h: f64,
}

/// Energy samples collected over a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyTrace {
    pub records: Vec<EnergyRecord>,
}

pub const ENERGY_CSV_HEADER: &str = "epoch,layer,t,H";

impl EnergyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push_segment(&mut self, epoch: usize, layer: usize, segment: &[(f64, f64)]) {
        self.records
            .extend(segment.iter().map(|&(t, h)| EnergyRecord { epoch, layer, t, h }));
    }

    pub fn extend(&mut self, other: EnergyTrace) {
        self.records.extend(other.records);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ENERGY_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.layer, r.t, r.h);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| DynamicsError::Io(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ENERGY_CSV_HEADER.split(',').collect::<Vec<_>>() {
            return Err(DynamicsError::Io(format!("unexpected energy header {headers:?}")));
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| DynamicsError::Io(e.to_string()))?;
            let field = |j: usize| row.get(j).unwrap_or("");
            let err = |e: String| DynamicsError::Io(format!("energy line {}: {e}", i + 2));
            records.push(EnergyRecord {
                epoch: field(0).parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                layer: field(1).parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                t: field(2).parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
                h: field(3).parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            });
        }
        Ok(Self { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes()).map_err(|e| DynamicsError::Io(e.to_string()))
    }

    /// Mean energy of every epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, s, c)) if *e == r.epoch => {
                    *s += r.h;
                    *c += 1;
                }
                _ => out.push((r.epoch, r.h, 1)),
            }
        }
        out.into_iter().map(|(e, s, c)| (e, s / c as f64)).collect()
    }
}

/// `(max |H(t) - H(t0)|` over every integration, population standard
/// deviation of the per-epoch mean energy`)`.
///
/// An integration is a maximal run of records with the same epoch and layer
/// and non-decreasing `t`.
pub fn energy_drift(trace: &EnergyTrace) -> Result<(f64, f64)> {
    if trace.is_empty() {
        return Err(DynamicsError::EmptyTrace);
    }
    let mut drift: f64 = 0.0;
    let mut start = trace.records[0];
    let mut prev = start;
    for r in &trace.records {
        if r.epoch != prev.epoch || r.layer != prev.layer || r.t < prev.t {
            start = *r;
        }
        drift = drift.max((r.h - start.h).abs());
        prev = *r;
    }
    let means: Vec<f64> = trace.epoch_means().into_iter().map(|(_, m)| m).collect();
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / means.len() as f64;
    Ok((drift, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use crate::linalg::frobenius_norm;
    use crate::symplectic::random_symplectic;

    fn oscillator() -> PhaseState {
        PhaseState::new(Matrix::from_rows(&[[1.0]]), Matrix::from_rows(&[[0.0]])).unwrap()
    }

    fn rand_state(seed: u64, nodes: usize, k: usize) -> PhaseState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Matrix::from_fn(nodes, k, |_, _| rng.random_range(-1.0..1.0));
        PhaseState::new(m(), m()).unwrap()
    }

    #[test]
    fn momentum_examples() {
        let q = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]);
        let zero = MlpParams::zeros(&[2, 2, 2]).unwrap();
        assert_eq!(momentum_init(&zero, &q).unwrap(), Matrix::zeros(2, 2));
        let ident = MlpParams::new(vec![Matrix::identity(2)], vec![Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(momentum_init(&ident, &q).unwrap(), q);
        for seed in 0..100 {
            let phi = MlpParams::init(&[3, 3, 3], seed).unwrap();
            let q = rand_state(seed, 5, 3).q;
            let p = momentum_init(&phi, &q).unwrap();
            assert_eq!(p.shape(), q.shape());
            assert!(p.is_finite());
        }
        assert!(momentum_init(&ident, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn energy_examples() {
        let s = PhaseState::new(Matrix::from_rows(&[[1.0, 0.0]]), Matrix::zeros(1, 2)).unwrap();
        assert_eq!(energy(&QuadraticHamiltonian, &s).unwrap(), 0.5);
        let st = rand_state(3, 4, 2);
        let doubled = PhaseState::new(st.q.scale(2.0), st.p.scale(2.0)).unwrap();
        let e1 = energy(&QuadraticHamiltonian, &st).unwrap();
        let e2 = energy(&QuadraticHamiltonian, &doubled).unwrap();
        assert!((e2 - 4.0 * e1).abs() <= 1e-12 * e2.abs());
        let theta = MlpParams::init(&[4, 4, 1], 11).unwrap();
        let a = energy(&theta, &st).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.to_bits(), energy(&theta, &st).unwrap().to_bits());
    }

    #[test]
    fn energy_is_sum_over_nodes() {
        let theta = MlpParams::init(&[4, 4, 1], 5).unwrap();
        let st = rand_state(8, 3, 2);
        let total = energy(&theta, &st).unwrap();
        let parts: f64 = (0..3)
            .map(|i| {
                let one = PhaseState::new(st.q.slice_rows(i, i + 1), st.p.slice_rows(i, i + 1)).unwrap();
                energy(&theta, &one).unwrap()
            })
            .sum();
        assert!((total - parts).abs() <= 1e-12);
    }

    #[test]
    fn standard_field_on_oscillator() {
        let d = field(&StructureChoice::StandardJ, &QuadraticHamiltonian, &oscillator(), 0.0).unwrap();
        assert_eq!(d.q, Matrix::from_rows(&[[0.0]]));
        assert_eq!(d.p, Matrix::from_rows(&[[-1.0]]));
    }

    #[test]
    fn manifold_with_j_matches_standard_bitwise() {
        for k in 1..4 {
            let theta = MlpParams::init(&[2 * k, 2 * k, 1], k as u64).unwrap();
            let st = rand_state(k as u64, 5, k);
            let a = field(&StructureChoice::StandardJ, &theta, &st, 0.0).unwrap();
            let m = StructureChoice::ManifoldConstrained(SymplecticPoint::standard(k));
            let b = field(&m, &theta, &st, 0.0).unwrap();
            assert_eq!(a, b);
            let (za, _) = rk4_integrate(&StructureChoice::StandardJ, &theta, &st, 0.0, 1.0, 0.2).unwrap();
            let (zb, _) = rk4_integrate(&m, &theta, &st, 0.0, 1.0, 0.2).unwrap();
            assert!(frobenius_norm(&(&za.stacked() - &zb.stacked())) <= 1e-14);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_field() {
        let k = 2;
        let theta = MlpParams::zeros(&[4, 4, 1]).unwrap();
        let st = rand_state(1, 3, k);
        let structures = [
            StructureChoice::StandardJ,
            StructureChoice::Unconstrained(Matrix::filled(4, 4, 0.7)),
            StructureChoice::ManifoldConstrained(random_symplectic(2, 2, 4).unwrap()),
            StructureChoice::SoftRegularized {
                m: Matrix::identity(4),
                weight: 1.0,
            },
            StructureChoice::NeuralForm {
                f: MlpParams::init(&[4, 4, 4], 2).unwrap(),
                per_node: false,
            },
        ];
        for s in &structures {
            let d = field(s, &theta, &st, 0.0).unwrap();
            assert_eq!(d.stacked(), Matrix::zeros(3, 4), "{s:?}");
        }
    }

    #[test]
    fn general_matrix_field_is_m_times_gradient() {
        let m = Matrix::from_rows(&[[0.5, 1.0], [-2.0, 0.25]]);
        let st = PhaseState::new(Matrix::from_rows(&[[1.0], [3.0]]), Matrix::from_rows(&[[2.0], [-1.0]])).unwrap();
        let d = field(&StructureChoice::Unconstrained(m.clone()), &QuadraticHamiltonian, &st, 0.0).unwrap();
        for i in 0..2 {
            let g = [st.q[(i, 0)], st.p[(i, 0)]];
            assert_eq!(d.q[(i, 0)], m[(0, 0)] * g[0] + m[(0, 1)] * g[1]);
            assert_eq!(d.p[(i, 0)], m[(1, 0)] * g[0] + m[(1, 1)] * g[1]);
        }
    }

    #[test]
    fn neural_form_matrix_is_skew_and_matches_jacobian() {
        let f = MlpParams::init(&[4, 6, 4], 21).unwrap();
        let z0 = Matrix::from_rows(&[[0.3, -0.2, 0.9, 0.1]]);
        let mut tape = Tape::new();
        let bound = f.bind_const(&mut tape);
        let z = tape.constant(z0.clone());
        let kv = neural_form_matrix(&mut tape, &bound, z).unwrap();
        let k = tape.value(kv).clone();
        assert!(frobenius_norm(&(&k + &k.transpose())) <= 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                let d = |a: usize, b: usize| {
                    finite_difference_gradient(|m| f.forward(m).unwrap()[(0, b)], &z0, 1e-6)[(0, a)]
                };
                let expect = d(i, j) - d(j, i);
                assert!((k[(i, j)] - expect).abs() <= 1e-7, "({i},{j})");
            }
        }
    }

    #[test]
    fn neural_form_solves_against_k() {
        let f = MlpParams::init(&[2, 3, 2], 7).unwrap();
        let st = rand_state(2, 3, 1);
        let s = StructureChoice::NeuralForm {
            f: f.clone(),
            per_node: false,
        };
        let d = field(&s, &QuadraticHamiltonian, &st, 0.0).unwrap();
        let z = st.stacked();
        let zbar = Matrix::from_fn(1, 2, |_, j| (0..3).map(|i| z[(i, j)]).sum::<f64>() / 3.0);
        let mut tape = Tape::new();
        let b = f.bind_const(&mut tape);
        let zv = tape.constant(zbar);
        let kv = neural_form_matrix(&mut tape, &b, zv).unwrap();
        let k = tape.value(kv).clone();
        let back = k.matmul(&d.stacked().transpose()).unwrap().transpose();
        assert!(frobenius_norm(&(&back - &z)) <= 1e-10);
        let per = StructureChoice::NeuralForm { f, per_node: true };
        assert!(field(&per, &QuadraticHamiltonian, &st, 0.0).unwrap().q.is_finite());
    }

    #[test]
    fn singular_neural_form_is_reported() {
        let f = MlpParams::zeros(&[2, 2, 2]).unwrap();
        let s = StructureChoice::NeuralForm { f, per_node: false };
        assert_eq!(
            field(&s, &QuadraticHamiltonian, &oscillator(), 0.0),
            Err(DynamicsError::SingularStructure)
        );
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let theta = MlpParams::zeros(&[4, 4, 1]).unwrap();
        let st = rand_state(6, 4, 2);
        let (out, energies) = rk4_integrate(&StructureChoice::StandardJ, &theta, &st, 0.0, 1.0, 0.2).unwrap();
        assert_eq!(out, st);
        assert_eq!(energies.len(), 6);
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let two_pi = 2.0 * std::f64::consts::PI;
        let (out, energies) =
            rk4_integrate(&StructureChoice::StandardJ, &QuadraticHamiltonian, &oscillator(), 0.0, two_pi, 0.01).unwrap();
        assert!((out.q[(0, 0)] - 1.0).abs() <= 1e-6);
        assert!(out.p[(0, 0)].abs() <= 1e-6);
        let mut trace = EnergyTrace::new();
        trace.push_segment(0, 0, &energies);
        let (drift, _) = energy_drift(&trace).unwrap();
        assert!(drift <= 1e-8, "drift {drift:e}");
    }

    fn max_drift(h: f64, t1: f64) -> f64 {
        let (_, e) = rk4_integrate(&StructureChoice::StandardJ, &QuadraticHamiltonian, &oscillator(), 0.0, t1, h).unwrap();
        e.iter().map(|(_, v)| (v - e[0].1).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn drift_shows_fourth_order_convergence() {
        let two_pi = 2.0 * std::f64::consts::PI;
        assert!(max_drift(0.1, two_pi) / max_drift(0.05, two_pi) >= 8.0);
        assert!(max_drift(0.2, 1.0) / max_drift(0.05, 1.0) >= 32.0);
    }

    #[test]
    fn integration_is_time_shift_invariant() {
        let theta = MlpParams::init(&[4, 4, 1], 2).unwrap();
        let st = rand_state(9, 3, 2);
        let (a, ea) = rk4_integrate(&StructureChoice::StandardJ, &theta, &st, 0.0, 1.0, 0.2).unwrap();
        let (b, eb) = rk4_integrate(&StructureChoice::StandardJ, &theta, &st, 5.0, 6.0, 0.2).unwrap();
        assert_eq!(a, b);
        assert_eq!(ea.len(), eb.len());
        for (x, y) in ea.iter().zip(&eb) {
            assert_eq!(x.1, y.1);
        }
    }

    #[test]
    fn step_count_rules() {
        assert_eq!(step_count(0.0, 1.0, 0.2).unwrap(), 5);
        assert_eq!(step_count(0.0, 1.0, 5.0).unwrap(), 1);
        assert!(step_count(1.0, 1.0, 0.2).is_err());
        assert!(step_count(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let m = Matrix::from_rows(&[[1e200, 0.0], [0.0, 1e200]]);
        let r = rk4_integrate(&StructureChoice::Unconstrained(m), &QuadraticHamiltonian, &oscillator(), 0.0, 1.0, 0.5);
        assert!(matches!(r, Err(DynamicsError::NonFinite { .. })));
    }

    #[test]
    fn drift_examples() {
        assert_eq!(energy_drift(&EnergyTrace::new()), Err(DynamicsError::EmptyTrace));
        let mut flat = EnergyTrace::new();
        for epoch in 0..3 {
            flat.push_segment(epoch, 0, &[(0.0, 2.0), (0.5, 2.0), (1.0, 2.0)]);
        }
        assert_eq!(energy_drift(&flat).unwrap(), (0.0, 0.0));
        let mut t = EnergyTrace::new();
        t.push_segment(0, 0, &[(0.0, 1.0), (1.0, 1.5)]);
        t.push_segment(1, 0, &[(0.0, 3.0), (1.0, 3.0)]);
        let (d, s) = energy_drift(&t).unwrap();
        assert_eq!(d, 0.5);
        assert!((s - 0.875).abs() < 1e-15);
    }

    #[test]
    fn energy_csv_round_trip() {
        let mut t = EnergyTrace::new();
        t.push_segment(0, 1, &[(0.0, 0.1), (0.2, 1.0 / 3.0)]);
        let text = t.to_csv();
        assert!(text.starts_with("epoch,layer,t,H\n"));
        assert_eq!(EnergyTrace::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn mlp_checkpoint_round_trip() {
        let f = MlpParams::init(&[3, 5, 1], 4).unwrap();
        assert_eq!(MlpParams::from_text(&f.to_text()).unwrap(), f);
        assert!(MlpParams::from_text("mlp 2\n1 1\n0.0\n").is_err());
    }

    #[test]
    fn mlp_validation() {
        assert!(MlpParams::new(vec![Matrix::zeros(2, 3)], vec![Matrix::zeros(1, 2)]).is_err());
        assert!(MlpParams::new(
            vec![Matrix::zeros(2, 3), Matrix::zeros(2, 1)],
            vec![Matrix::zeros(1, 3), Matrix::zeros(1, 1)]
        )
        .is_err());
        assert!(MlpParams::init(&[2], 0).is_err());
    }

    #[test]
    fn structure_gradient_matches_finite_differences() {
        // d/dM of the summed final state after one RK4 run.
        let theta = MlpParams::init(&[4, 4, 1], 3).unwrap();
        let st = rand_state(4, 3, 2);
        let m0 = random_symplectic(2, 2, 5).unwrap().into_matrix();
        let run = |m: &Matrix, tape: &mut Tape, mv: Option<Var>| -> (Var, Option<Var>) {
            let mv = mv.unwrap_or_else(|| tape.leaf(m.clone()));
            let z0 = tape.constant(st.stacked());
            let th = theta.bind_const(tape);
            let (z, _) = rk4_on_tape(tape, &th, &BoundStructure::Matrix(mv), z0, 0.0, 1.0, 0.25).unwrap();
            let w = tape.constant(Matrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5)));
            let p = tape.mul(z, w).unwrap();
            (tape.sum(p), Some(mv))
        };
        let mut tape = Tape::new();
        let (out, mv) = run(&m0, &mut tape, None);
        let g = tape.gradient(out, &[mv.unwrap()]).unwrap().remove(0);
        let fd = finite_difference_gradient(
            |m| {
                let mut t = Tape::new();
                let (o, _) = run(m, &mut t, None);
                t.scalar(o)
            },
            &m0,
            1e-5,
        );
        assert!(frobenius_norm(&(&g - &fd)) <= 1e-6_f64.max(1e-4 * frobenius_norm(&fd)));
    }
}
