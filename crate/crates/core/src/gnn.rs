//! Hamiltonian graph network for node classification.
//!
//! Forward pass: `tanh(X W_in + b_in)` with optional dropout gives the
//! initial positions `q` (width `k`). Each layer sets `p = Q_φ(q)`,
//! integrates `(q, p)` along the structured Hamiltonian field with RK4 over
//! `[0, T]`, keeps `q(T)` and aggregates it as `(Ã + I) q(T)`. A linear
//! classifier reads the final `q`. With zero layers the model is a
//! features-only MLP.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, LinearOperator, Tape, Var};
use crate::data::{GraphDataset, NormalizedAdjacency, Normalization, SplitKind};
use crate::dynamics::{
    rk4_on_tape, step_count, BoundMlp, BoundStructure, DynamicsError, EnergyTrace, MlpParams,
};
use crate::linalg::Matrix;
use crate::optim::{clip_gradients, soft_penalty, AdamConfig, AdamState, OptimError};
use crate::sub_seed;
use crate::symplectic::{
    parse_rows, random_symplectic, standard_j, symplectic_residual, write_rows, ManifoldError, ProjectionMode,
    SymplecticPoint,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GnnError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("mask selects no nodes")]
    EmptyMask,
    #[error("epoch {epoch}: optimizer step failed: {source}")]
    StepFailed { epoch: usize, source: OptimError },
    #[error("epoch {epoch}: forward pass failed: {source}")]
    ForwardFailed { epoch: usize, source: DynamicsError },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("I/O: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, GnnError>;

/// Which structure matrix drives the Hamiltonian field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `M = J`.
    Standard,
    /// Free `M`, trained with Adam.
    Unconstrained,
    /// `M^{-1}` from the curl of a learned network.
    NeuralForm,
    /// `M` on the symplectic manifold, trained with Riemannian descent.
    Manifold,
    /// Free `M` plus a symplectic penalty in the loss.
    Soft,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Unconstrained => "unconstrained",
            Variant::NeuralForm => "neural-form",
            Variant::Manifold => "manifold",
            Variant::Soft => "soft",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "unconstrained" => Ok(Self::Unconstrained),
            "neural-form" => Ok(Self::NeuralForm),
            "manifold" => Ok(Self::Manifold),
            "soft" => Ok(Self::Soft),
            other => Err(format!(
                "unknown variant '{other}' (standard|unconstrained|neural-form|manifold|soft)"
            )),
        }
    }
}

/// Model shape and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    /// Step size for manifold parameters; `None` reuses `lr`.
    pub manifold_lr: Option<f64>,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Phase-space half width `k`.
    pub hidden: usize,
    pub layers: usize,
    pub ode_time: f64,
    pub ode_step: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub projection: ProjectionMode,
    pub soft_weight: Option<f64>,
    pub normalization: Normalization,
    /// Evaluate the neural form per node instead of at the mean state.
    pub per_node_form: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Manifold,
            lr: 0.01,
            manifold_lr: None,
            weight_decay: 0.001,
            dropout: 0.0,
            hidden: 64,
            layers: 1,
            ode_time: 1.0,
            ode_step: 0.2,
            max_grad_norm: 1.0,
            epochs: 500,
            patience: 100,
            seed: 0,
            projection: ProjectionMode::Stable,
            soft_weight: None,
            normalization: Normalization::Symmetric,
            per_node_form: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GnnError::InvalidConfig(m));
        let positive = [
            ("lr", self.lr),
            ("ode_time", self.ode_time),
            ("ode_step", self.ode_step),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(m) = self.manifold_lr {
            if !(m > 0.0 && m.is_finite()) {
                return bad(format!("manifold_lr must be positive, got {m}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        match (self.variant, self.soft_weight) {
            (Variant::Soft, None) => return bad("variant soft requires soft_weight".into()),
            (Variant::Soft, Some(w)) if !(w >= 0.0 && w.is_finite()) => {
                return bad(format!("soft_weight must be non-negative, got {w}"))
            }
            (v, Some(_)) if v != Variant::Soft => {
                return bad(format!("soft_weight only applies to variant soft, not {v}"))
            }
            _ => {}
        }
        step_count(0.0, self.ode_time, self.ode_step)?;
        Ok(())
    }

    pub fn steps_per_layer(&self) -> usize {
        step_count(0.0, self.ode_time, self.ode_step).unwrap_or(1)
    }
}

/// Structure parameter of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerStructure {
    Standard,
    /// Free matrix (unconstrained and soft variants).
    Free(Matrix),
    Neural(MlpParams),
    Manifold(SymplecticPoint),
}

impl LayerStructure {
    /// Symplectic residual of the structure matrix; `NaN` for the neural
    /// form, which has no single matrix.
    pub fn residual(&self) -> f64 {
        match self {
            LayerStructure::Standard => 0.0,
            LayerStructure::Free(m) => {
                let k = m.rows() / 2;
                symplectic_residual(m, k, k).unwrap_or(f64::NAN)
            }
            LayerStructure::Neural(_) => f64::NAN,
            LayerStructure::Manifold(p) => p.residual(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamLayer {
    /// Energy network `2k -> 2k -> 1`.
    pub theta: MlpParams,
    /// Momentum network `k -> k -> k`.
    pub phi: MlpParams,
    pub structure: LayerStructure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input: MlpParams,
    pub layers: Vec<HamLayer>,
    pub output: MlpParams,
    pub variant: Variant,
    pub dropout: f64,
    pub ode_time: f64,
    pub ode_step: f64,
    pub soft_weight: f64,
    pub per_node_form: bool,
}

/// One recorded forward pass.
pub struct Forward {
    pub logits: Var,
    /// `(t, H)` samples, one list per layer.
    pub energies: Vec<Vec<(f64, f64)>>,
    /// Euclidean parameters in [`Model::euclid_params`] order.
    pub euclid: Vec<Var>,
    /// Manifold parameters, one per manifold layer in layer order.
    pub manifold: Vec<Var>,
    /// Structure matrices that carry the soft penalty.
    pub penalized: Vec<Var>,
}

/// `(Ã + I) q`, recorded on the tape.
pub fn aggregate(tape: &mut Tape, q: Var, adj: &Rc<NormalizedAdjacency>) -> Result<Var> {
    let op: Rc<dyn LinearOperator> = adj.clone();
    let aq = tape.linear(op, q)?;
    Ok(tape.add(aq, q)?)
}

/// One Hamiltonian layer: momentum from `q`, RK4 over `[0, T]`, keep
/// `q(T)`, aggregate. Returns the new `q` and the `(t, H)` samples.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    tape: &mut Tape,
    theta: &BoundMlp,
    phi: &BoundMlp,
    structure: &BoundStructure,
    q: Var,
    adj: &Rc<NormalizedAdjacency>,
    ode_time: f64,
    ode_step: f64,
) -> Result<(Var, Vec<(f64, f64)>)> {
    let k = tape.value(q).cols();
    let p = phi.forward(tape, q)?;
    let z0 = tape.concat_cols(q, p)?;
    let (z1, energies) = rk4_on_tape(tape, theta, structure, z0, 0.0, ode_time, ode_step)?;
    let q1 = tape.slice_cols(z1, 0, k)?;
    Ok((aggregate(tape, q1, adj)?, energies))
}

/// Fraction of `rows` whose arg-max logit equals the label. Ties resolve
/// to the lowest class index.
pub fn accuracy(logits: &Matrix, labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(GnnError::EmptyMask);
    }
    let hits = rows
        .iter()
        .filter(|&&i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == labels[i]
        })
        .count();
    Ok(hits as f64 / rows.len() as f64)
}

/// Mean cross-entropy over `rows` and the accuracy on the same rows.
pub fn loss_and_metrics(tape: &mut Tape, logits: Var, labels: &[usize], rows: &[usize]) -> Result<(Var, f64)> {
    if rows.is_empty() {
        return Err(GnnError::EmptyMask);
    }
    let acc = accuracy(tape.value(logits), labels, rows)?;
    let loss = tape.softmax_cross_entropy(logits, labels, rows)?;
    Ok((loss, acc))
}

impl Model {
    /// Fresh model for a dataset with `features` inputs and `classes`
    /// outputs.
    pub fn new(cfg: &TrainConfig, features: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if features == 0 || classes == 0 {
            return Err(GnnError::InvalidConfig(format!("{features} features and {classes} classes")));
        }
        let k = cfg.hidden;
        let seed = cfg.seed;
        let input = MlpParams::init(&[features, k], sub_seed(seed, 10))?;
        let output = MlpParams::init(&[k, classes], sub_seed(seed, 11))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers as u64 {
            let theta = MlpParams::init(&[2 * k, 2 * k, 1], sub_seed(seed, 100 + 10 * l))?;
            let phi = MlpParams::init(&[k, k, k], sub_seed(seed, 101 + 10 * l))?;
            let m_seed = sub_seed(seed, 102 + 10 * l);
            let structure = match cfg.variant {
                Variant::Standard => LayerStructure::Standard,
                Variant::Unconstrained | Variant::Soft => {
                    LayerStructure::Free(random_symplectic(k, k, m_seed)?.into_matrix())
                }
                Variant::Manifold => LayerStructure::Manifold(random_symplectic(k, k, m_seed)?),
                Variant::NeuralForm => LayerStructure::Neural(MlpParams::init(&[2 * k, 2 * k, 2 * k], m_seed)?),
            };
            layers.push(HamLayer { theta, phi, structure });
        }
        Ok(Self {
            input,
            layers,
            output,
            variant: cfg.variant,
            dropout: cfg.dropout,
            ode_time: cfg.ode_time,
            ode_step: cfg.ode_step,
            soft_weight: cfg.soft_weight.unwrap_or(0.0),
            per_node_form: cfg.per_node_form,
        })
    }

    pub fn hidden(&self) -> usize {
        self.input.output_dim()
    }

    /// Euclidean parameters: input projection, then per layer the energy
    /// network, momentum network and any non-manifold structure, then the
    /// classifier.
    pub fn euclid_params(&self) -> Vec<&Matrix> {
        let mut out = self.input.params();
        for l in &self.layers {
            out.extend(l.theta.params());
            out.extend(l.phi.params());
            match &l.structure {
                LayerStructure::Free(m) => out.push(m),
                LayerStructure::Neural(f) => out.extend(f.params()),
                LayerStructure::Standard | LayerStructure::Manifold(_) => {}
            }
        }
        out.extend(self.output.params());
        out
    }

    pub fn euclid_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.input.params_mut();
        for l in &mut self.layers {
            out.extend(l.theta.params_mut());
            out.extend(l.phi.params_mut());
            match &mut l.structure {
                LayerStructure::Free(m) => out.push(m),
                LayerStructure::Neural(f) => out.extend(f.params_mut()),
                LayerStructure::Standard | LayerStructure::Manifold(_) => {}
            }
        }
        out.extend(self.output.params_mut());
        out
    }

    /// Weight-decay flags matching [`Model::euclid_params`]: structure
    /// matrices are exempt.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = vec![true; self.input.params().len()];
        for l in &self.layers {
            out.extend(vec![true; l.theta.params().len() + l.phi.params().len()]);
            match &l.structure {
                LayerStructure::Free(_) => out.push(false),
                LayerStructure::Neural(f) => out.extend(vec![true; f.params().len()]),
                LayerStructure::Standard | LayerStructure::Manifold(_) => {}
            }
        }
        out.extend(vec![true; self.output.params().len()]);
        out
    }

    pub fn manifold_points(&self) -> Vec<&SymplecticPoint> {
        self.layers
            .iter()
            .filter_map(|l| match &l.structure {
                LayerStructure::Manifold(p) => Some(p),
                _ => None,
            })
            .collect()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.structure.residual()).collect()
    }

    /// Records the forward pass. Dropout is active only when `dropout_rng`
    /// is given.
    pub fn record(
        &self,
        tape: &mut Tape,
        features: &Matrix,
        adj: &Rc<NormalizedAdjacency>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let k = self.hidden();
        let x = tape.constant(features.clone());
        let input = self.input.bind(tape);
        let mut euclid = input.vars();
        let mut manifold = Vec::new();
        let mut penalized = Vec::new();
        let lin = input.forward(tape, x)?;
        let mut q = tape.tanh(lin);
        if let (Some(rng), true) = (dropout_rng, self.dropout > 0.0) {
            let keep = 1.0 - self.dropout;
            let (r, c) = tape.value(q).shape();
            let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = tape.constant(mask);
            q = tape.mul(q, m)?;
        }
        let mut energies = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let theta = layer.theta.bind(tape);
            let phi = layer.phi.bind(tape);
            euclid.extend(theta.vars());
            euclid.extend(phi.vars());
            let structure = match &layer.structure {
                LayerStructure::Standard => BoundStructure::Matrix(tape.constant(standard_j(k))),
                LayerStructure::Free(m) => {
                    let v = tape.leaf(m.clone());
                    euclid.push(v);
                    if self.variant == Variant::Soft {
                        penalized.push(v);
                    }
                    BoundStructure::Matrix(v)
                }
                LayerStructure::Manifold(p) => {
                    let v = tape.leaf(p.matrix().clone());
                    manifold.push(v);
                    BoundStructure::Matrix(v)
                }
                LayerStructure::Neural(f) => {
                    let b = f.bind(tape);
                    euclid.extend(b.vars());
                    BoundStructure::NeuralForm {
                        f: b,
                        per_node: self.per_node_form,
                    }
                }
            };
            let (next, e) = layer_forward(tape, &theta, &phi, &structure, q, adj, self.ode_time, self.ode_step)?;
            q = next;
            energies.push(e);
        }
        let output = self.output.bind(tape);
        let logits = output.forward(tape, q)?;
        euclid.extend(output.vars());
        Ok(Forward {
            logits,
            energies,
            euclid,
            manifold,
            penalized,
        })
    }

    /// Cross-entropy over `rows` plus the soft penalty of every penalized
    /// structure matrix.
    pub fn objective(&self, tape: &mut Tape, fwd: &Forward, labels: &[usize], rows: &[usize]) -> Result<(Var, f64)> {
        let (mut loss, acc) = loss_and_metrics(tape, fwd.logits, labels, rows)?;
        for &m in &fwd.penalized {
            let p = soft_penalty(tape, m, self.soft_weight)?;
            loss = tape.add(loss, p)?;
        }
        Ok((loss, acc))
    }

    /// Evaluation-mode logits.
    pub fn forward(&self, features: &Matrix, adj: &Rc<NormalizedAdjacency>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let fwd = self.record(&mut tape, features, adj, None)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Training objective on `rows` and its gradients with respect to the
    /// Euclidean and manifold parameters (no dropout).
    pub fn loss_and_gradients(
        &self,
        ds: &GraphDataset,
        adj: &Rc<NormalizedAdjacency>,
        rows: &[usize],
    ) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let fwd = self.record(&mut tape, ds.features(), adj, None)?;
        let (loss, _) = self.objective(&mut tape, &fwd, ds.labels(), rows)?;
        let mut wrt = fwd.euclid.clone();
        wrt.extend(&fwd.manifold);
        let mut grads = tape.gradient(loss, &wrt)?;
        let manifold = grads.split_off(fwd.euclid.len());
        Ok((tape.scalar(loss), grads, manifold))
    }

    /// Writes `input.txt`, `output.txt` and per layer `layer{l}_theta.txt`,
    /// `layer{l}_phi.txt` and the structure (`layer{l}_m.txt` or
    /// `layer{l}_form.txt`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |e: DynamicsError| GnnError::Io(e.to_string());
        self.input.save(&dir.join("input.txt")).map_err(io)?;
        self.output.save(&dir.join("output.txt")).map_err(io)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let l = l + 1;
            layer.theta.save(&dir.join(format!("layer{l}_theta.txt"))).map_err(io)?;
            layer.phi.save(&dir.join(format!("layer{l}_phi.txt"))).map_err(io)?;
            match &layer.structure {
                LayerStructure::Standard => {}
                LayerStructure::Manifold(p) => p.save(&dir.join(format!("layer{l}_m.txt")))?,
                LayerStructure::Free(m) => {
                    let mut text = format!("{} {}\n", m.rows(), m.cols());
                    write_rows(&mut text, m);
                    crate::io::write_atomic(&dir.join(format!("layer{l}_m.txt")), text.as_bytes())
                        .map_err(|e| GnnError::Io(e.to_string()))?;
                }
                LayerStructure::Neural(f) => f.save(&dir.join(format!("layer{l}_form.txt"))).map_err(io)?,
            }
        }
        Ok(())
    }

    /// Reads checkpoints written by [`Model::save`] into a model built
    /// from the same configuration.
    pub fn load(cfg: &TrainConfig, dir: &Path) -> Result<Self> {
        let io = |e: DynamicsError| GnnError::Io(e.to_string());
        let input = MlpParams::load(&dir.join("input.txt")).map_err(io)?;
        let output = MlpParams::load(&dir.join("output.txt")).map_err(io)?;
        let mut model = Self::new(cfg, input.input_dim(), output.output_dim())?;
        model.input = input;
        model.output = output;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let l = l + 1;
            layer.theta = MlpParams::load(&dir.join(format!("layer{l}_theta.txt"))).map_err(io)?;
            layer.phi = MlpParams::load(&dir.join(format!("layer{l}_phi.txt"))).map_err(io)?;
            let m_path = dir.join(format!("layer{l}_m.txt"));
            layer.structure = match &layer.structure {
                LayerStructure::Standard => LayerStructure::Standard,
                LayerStructure::Manifold(_) => LayerStructure::Manifold(SymplecticPoint::load(&m_path)?),
                LayerStructure::Free(_) => {
                    let text = std::fs::read_to_string(&m_path).map_err(|e| GnnError::Io(e.to_string()))?;
                    let mut lines = text.lines();
                    let dims: Vec<usize> = lines
                        .next()
                        .unwrap_or("")
                        .split_whitespace()
                        .filter_map(|t| t.parse().ok())
                        .collect();
                    let [r, c] = dims[..] else {
                        return Err(GnnError::Io(format!("{}: bad header", m_path.display())));
                    };
                    LayerStructure::Free(parse_rows(lines, r, c).map_err(GnnError::Io)?)
                }
                LayerStructure::Neural(_) => {
                    LayerStructure::Neural(MlpParams::load(&dir.join(format!("layer{l}_form.txt"))).map_err(io)?)
                }
            };
        }
        Ok(model)
    }
}

/// Logits of `model` on `ds` in evaluation mode.
pub fn model_forward(model: &Model, ds: &GraphDataset, norm: Normalization) -> Result<Matrix> {
    let adj = Rc::new(NormalizedAdjacency::new(ds, norm));
    model.forward(ds.features(), &adj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub energy: EnergyTrace,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test accuracy of the best-validation checkpoint.
    pub test_acc: f64,
    pub layers: usize,
    /// Parameters at the best-validation epoch.
    pub best_model: Model,
}

impl TrainReport {
    pub fn csv_header(layers: usize) -> String {
        let mut h = String::from("epoch,train_loss,val_loss,val_acc");
        for l in 1..=layers {
            let _ = write!(h, ",residual_l{l}");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.layers);
        out.push('\n');
        for r in &self.epochs {
            let _ = write!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc);
            for v in &r.residuals {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.train_loss).collect()
    }
}

/// Full training run. Each epoch: forward on the train rows (with dropout),
/// backward, global-norm clipping over all gradients, Adam on the Euclidean
/// parameters, Riemannian descent on manifold structures, then an
/// evaluation pass that supplies validation metrics and the energy trace.
/// The checkpoint is the epoch with the best validation accuracy, ties going
/// to the lower validation loss; training stops after `patience` epochs
/// without a new checkpoint.
pub fn train(ds: &GraphDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut model = Model::new(cfg, ds.num_features(), ds.num_classes())?;
    train_model(&mut model, ds, cfg)
}

pub fn train_model(model: &mut Model, ds: &GraphDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let train_rows = ds.indices(SplitKind::Train);
    let val_rows = ds.indices(SplitKind::Val);
    let test_rows = ds.indices(SplitKind::Test);
    if train_rows.is_empty() || val_rows.is_empty() || test_rows.is_empty() {
        return Err(GnnError::EmptyMask);
    }
    let adj = Rc::new(NormalizedAdjacency::new(ds, cfg.normalization));
    let shapes: Vec<(usize, usize)> = model.euclid_params().iter().map(|m| m.shape()).collect();
    let mut adam = AdamState::with_decay_mask(AdamConfig::new(cfg.lr, cfg.weight_decay), &shapes, &model.decay_mask());
    let m_lr = cfg.manifold_lr.unwrap_or(cfg.lr);

    let mut epochs = Vec::new();
    let mut energy = EnergyTrace::new();
    let mut best: Option<(usize, f64, f64, f64, Model)> = None;
    for epoch in 0..cfg.epochs {
        let fwd_err = |e: GnnError| match e {
            GnnError::Dynamics(source) => GnnError::ForwardFailed { epoch, source },
            other => other,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1_000_000 + epoch as u64));
        let mut tape = Tape::new();
        let fwd = model.record(&mut tape, ds.features(), &adj, Some(&mut rng)).map_err(fwd_err)?;
        let (loss, _) = model.objective(&mut tape, &fwd, ds.labels(), train_rows)?;
        let train_loss = tape.scalar(loss);
        let mut wrt = fwd.euclid.clone();
        wrt.extend(&fwd.manifold);
        let mut grads = tape.gradient(loss, &wrt)?;
        drop(tape);
        clip_gradients(&mut grads, cfg.max_grad_norm);
        let m_grads = grads.split_off(fwd.euclid.len());
        adam.step(&mut model.euclid_params_mut(), &grads)
            .map_err(|source| GnnError::StepFailed { epoch, source })?;
        let mut gi = 0;
        for layer in &mut model.layers {
            if let LayerStructure::Manifold(p) = &mut layer.structure {
                let (next, _) = crate::optim::riemannian_update(p, &m_grads[gi], m_lr, cfg.projection)
                    .map_err(|source| GnnError::StepFailed { epoch, source })?;
                *p = next;
                gi += 1;
            }
        }

        let mut tape = Tape::new();
        let fwd = model.record(&mut tape, ds.features(), &adj, None).map_err(fwd_err)?;
        let (val_loss_var, val_acc) = loss_and_metrics(&mut tape, fwd.logits, ds.labels(), val_rows)?;
        let val_loss = tape.scalar(val_loss_var);
        let test_acc = accuracy(tape.value(fwd.logits), ds.labels(), test_rows)?;
        for (l, seg) in fwd.energies.iter().enumerate() {
            energy.push_segment(epoch, l + 1, seg);
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            residuals: model.residuals(),
        });
        let improved = best
            .as_ref()
            .is_none_or(|b| val_acc > b.1 || (val_acc == b.1 && val_loss < b.2));
        if improved {
            best = Some((epoch, val_acc, val_loss, test_acc, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_acc, _, test_acc, best_model) = best.expect("at least one epoch");
    Ok(TrainReport {
        epochs,
        energy,
        best_epoch,
        best_val_acc,
        test_acc,
        layers: model.layers.len(),
        best_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use crate::data::{gen_sbm, gen_tree, SbmConfig, Split, TreeConfig};
    use crate::linalg::frobenius_norm;

    fn six_node_graph() -> GraphDataset {
        let edges = vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (2, 3)];
        let features = Matrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.5);
        let labels = vec![0, 0, 0, 1, 1, 1];
        let split = Split {
            train: vec![0, 3, 5],
            val: vec![1, 4],
            test: vec![2],
        };
        GraphDataset::new("six", edges, features, labels, split).unwrap()
    }

    fn small_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            hidden: 2,
            layers: 1,
            weight_decay: 0.0,
            soft_weight: (variant == Variant::Soft).then_some(0.5),
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    fn adj(ds: &GraphDataset) -> Rc<NormalizedAdjacency> {
        Rc::new(NormalizedAdjacency::new(ds, Normalization::Symmetric))
    }

    #[test]
    fn aggregate_examples() {
        let two = GraphDataset::new(
            "pair",
            vec![(0, 1)],
            Matrix::zeros(3, 1),
            vec![0, 1, 0],
            Split {
                train: vec![0, 1],
                val: vec![],
                test: vec![2],
            },
        )
        .unwrap();
        let a = adj(&two);
        let q0 = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]]);
        let mut tape = Tape::new();
        let q = tape.constant(q0.clone());
        let out = aggregate(&mut tape, q, &a).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), &[4.0, 1.0]);
        assert_eq!(v.row(1), &[4.0, 1.0]);
        assert_eq!(v.row(2), q0.row(2));
        let q1 = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let q2 = Matrix::from_fn(3, 2, |i, j| (i * j) as f64 - 1.0);
        let mut t = Tape::new();
        let (a1, a2, a12) = {
            let x = t.constant(q1.clone());
            let y = t.constant(q2.clone());
            let xy = t.add(x, y).unwrap();
            (
                aggregate(&mut t, x, &a).unwrap(),
                aggregate(&mut t, y, &a).unwrap(),
                aggregate(&mut t, xy, &a).unwrap(),
            )
        };
        let sum = t.value(a1) + t.value(a2);
        assert!(frobenius_norm(&(&sum - t.value(a12))) <= 1e-12);
    }

    #[test]
    fn zero_energy_layer_only_aggregates() {
        let ds = six_node_graph();
        let a = adj(&ds);
        let q0 = Matrix::from_fn(6, 2, |i, j| (i as f64) - (j as f64) * 0.5);
        let mut tape = Tape::new();
        let theta = MlpParams::zeros(&[4, 4, 1]).unwrap().bind(&mut tape);
        let phi = MlpParams::init(&[2, 2, 2], 1).unwrap().bind(&mut tape);
        let s = BoundStructure::Matrix(tape.constant(standard_j(2)));
        let q = tape.constant(q0.clone());
        let (out, e) = layer_forward(&mut tape, &theta, &phi, &s, q, &a, 1.0, 0.2).unwrap();
        let expect = &a.apply(&q0) + &q0;
        assert_eq!(tape.value(out), &expect);
        assert_eq!(e.len(), 6);
    }

    #[test]
    fn loss_examples() {
        let labels = [0, 1, 2];
        let rows = [0, 1, 2];
        let mut tape = Tape::new();
        let perfect = tape.constant(Matrix::from_fn(3, 3, |i, j| if i == j { 10.0 } else { 0.0 }));
        let (_, acc) = loss_and_metrics(&mut tape, perfect, &labels, &rows).unwrap();
        assert_eq!(acc, 1.0);
        let uniform = tape.constant(Matrix::filled(3, 3, -0.7));
        let (loss, _) = loss_and_metrics(&mut tape, uniform, &labels, &rows).unwrap();
        assert!((tape.scalar(loss) - 3f64.ln()).abs() < 1e-14);
        let logits = Matrix::from_rows(&[[0.1, 0.5, 0.2], [2.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
        let shifted = Matrix::from_fn(3, 3, |i, j| logits[(i, j)] + 5.0 * i as f64 - 3.0);
        assert_eq!(accuracy(&logits, &labels, &rows).unwrap(), accuracy(&shifted, &labels, &rows).unwrap());
        assert_eq!(
            loss_and_metrics(&mut tape, uniform, &labels, &[]).map(|_| ()),
            Err(GnnError::EmptyMask)
        );
    }

    #[test]
    fn forward_shape_and_determinism() {
        let ds = six_node_graph();
        for variant in [Variant::Standard, Variant::Manifold, Variant::NeuralForm, Variant::Soft] {
            let model = Model::new(&small_cfg(variant), 3, 2).unwrap();
            let a = model_forward(&model, &ds, Normalization::Symmetric).unwrap();
            assert_eq!(a.shape(), (6, 2));
            assert_eq!(a, model_forward(&model, &ds, Normalization::Symmetric).unwrap());
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let ds = six_node_graph();
        let perm = [4, 2, 0, 5, 1, 3];
        let pds = ds.permuted(&perm).unwrap();
        for variant in [Variant::Manifold, Variant::NeuralForm] {
            let model = Model::new(&small_cfg(variant), 3, 2).unwrap();
            let a = model_forward(&model, &ds, Normalization::Symmetric).unwrap();
            let b = model_forward(&model, &pds, Normalization::Symmetric).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..2 {
                    assert!((b[(new, c)] - a[(old, c)]).abs() <= 1e-12);
                }
            }
        }
    }

    fn relative_gap(a: &Matrix, b: &Matrix) -> f64 {
        frobenius_norm(&(a - b)) / frobenius_norm(b).max(1e-12)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let ds = six_node_graph();
        let a = adj(&ds);
        let rows = ds.indices(SplitKind::Train).to_vec();
        for variant in [Variant::Manifold, Variant::NeuralForm, Variant::Soft] {
            let model = Model::new(&small_cfg(variant), 3, 2).unwrap();
            let (_, ge, gm) = model.loss_and_gradients(&ds, &a, &rows).unwrap();
            assert_eq!(ge.len(), model.euclid_params().len());
            for (idx, g) in ge.iter().enumerate() {
                let base = model.euclid_params()[idx].clone();
                let fd = finite_difference_gradient(
                    |x| {
                        let mut m = model.clone();
                        *m.euclid_params_mut()[idx] = x.clone();
                        m.loss_and_gradients(&ds, &a, &rows).unwrap().0
                    },
                    &base,
                    1e-6,
                );
                assert!(relative_gap(g, &fd) <= 1e-3, "{variant} param {idx}");
            }
            if let LayerStructure::Manifold(p) = &model.layers[0].structure {
                let fd = finite_difference_gradient(
                    |x| {
                        let mut m = model.clone();
                        m.layers[0].structure = LayerStructure::Free(x.clone());
                        m.variant = Variant::Unconstrained;
                        m.loss_and_gradients(&ds, &a, &rows).unwrap().0
                    },
                    p.matrix(),
                    1e-6,
                );
                assert!(relative_gap(&gm[0], &fd) <= 1e-3);
            }
        }
    }

    #[test]
    fn validation_and_test_labels_do_not_leak() {
        let ds = six_node_graph();
        let a = adj(&ds);
        let model = Model::new(&small_cfg(Variant::Manifold), 3, 2).unwrap();
        let rows = ds.indices(SplitKind::Train).to_vec();
        let (l1, g1, m1) = model.loss_and_gradients(&ds, &a, &rows).unwrap();
        let mut labels = ds.labels().to_vec();
        for &i in ds.indices(SplitKind::Val).iter().chain(ds.indices(SplitKind::Test)) {
            labels[i] = 1 - labels[i];
        }
        let flipped = GraphDataset::new("flip", ds.edges().to_vec(), ds.features().clone(), labels, ds.split().clone())
            .unwrap();
        let (l2, g2, m2) = model.loss_and_gradients(&flipped, &a, &rows).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let soft = TrainConfig {
            variant: Variant::Soft,
            ..TrainConfig::default()
        };
        assert!(soft.validate().is_err());
        let stray = TrainConfig {
            soft_weight: Some(1.0),
            ..TrainConfig::default()
        };
        assert!(stray.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!("neural-form".parse::<Variant>().is_ok());
        assert!("bogus".parse::<Variant>().is_err());
    }

    fn sbm_cfg(variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            hidden: 8,
            epochs: 30,
            seed,
            soft_weight: (variant == Variant::Soft).then_some(1.0),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_report_shapes() {
        let ds = gen_sbm(&SbmConfig {
            n_per_block: 20,
            ..SbmConfig::default()
        })
        .unwrap();
        for variant in [Variant::Standard, Variant::Unconstrained, Variant::NeuralForm, Variant::Manifold, Variant::Soft] {
            let cfg = sbm_cfg(variant, 1);
            let r = train(&ds, &cfg).unwrap();
            assert_eq!(r.epochs.len(), 30);
            assert_eq!(r.energy.len(), 30 * 6);
            let csv = r.to_csv();
            assert!(csv.starts_with("epoch,train_loss,val_loss,val_acc,residual_l1\n"));
            assert_eq!(csv.lines().count(), 31);
            let res = r.epochs.last().unwrap().residuals[0];
            match variant {
                Variant::Standard => assert_eq!(res, 0.0),
                Variant::NeuralForm => assert!(res.is_nan()),
                Variant::Manifold => assert!(res <= 1e-6),
                _ => assert!(res.is_finite()),
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_tree(&TreeConfig::default()).unwrap();
        let cfg = TrainConfig {
            dropout: 0.3,
            ..sbm_cfg(Variant::Manifold, 4)
        };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.energy, b.energy);
    }

    #[test]
    fn train_loss_improves_early() {
        let ds = gen_sbm(&SbmConfig::default()).unwrap();
        let cfg = TrainConfig {
            hidden: 16,
            epochs: 20,
            ..sbm_cfg(Variant::Manifold, 0)
        };
        let losses = train(&ds, &cfg).unwrap().train_losses();
        let mut best = f64::INFINITY;
        let mut improvements = 0;
        for l in losses {
            if l < best {
                best = l;
                improvements += 1;
            }
        }
        assert!(improvements >= 10, "{improvements}");
    }

    #[test]
    fn early_stopping_respects_patience() {
        let ds = gen_sbm(&SbmConfig {
            n_per_block: 20,
            ..SbmConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            patience: 3,
            epochs: 200,
            ..sbm_cfg(Variant::Standard, 2)
        };
        let r = train(&ds, &cfg).unwrap();
        assert_eq!(r.epochs.len(), r.best_epoch + 4);
    }

    #[test]
    fn baseline_without_layers() {
        let ds = gen_sbm(&SbmConfig::default()).unwrap();
        let cfg = TrainConfig {
            layers: 0,
            ..sbm_cfg(Variant::Manifold, 0)
        };
        let r = train(&ds, &cfg).unwrap();
        assert!(r.energy.is_empty());
        assert!(r.to_csv().starts_with("epoch,train_loss,val_loss,val_acc\n"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        for variant in [Variant::Manifold, Variant::Unconstrained, Variant::NeuralForm, Variant::Standard] {
            let cfg = TrainConfig {
                layers: 2,
                ..small_cfg(variant)
            };
            let model = Model::new(&cfg, 3, 2).unwrap();
            let dir = tmp.path().join(variant.as_str());
            std::fs::create_dir_all(&dir).unwrap();
            model.save(&dir).unwrap();
            assert_eq!(Model::load(&cfg, &dir).unwrap(), model);
        }
    }
}
