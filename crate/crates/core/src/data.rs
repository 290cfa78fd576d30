//! Graph datasets: the on-disk directory format, validation, normalized
//! adjacency and two synthetic generators.
//!
//! Directory layout:
//!
//! * `edges.csv`: header `src,dst`, one edge per line
//! * `features.csv`: header `f0,...,f{d-1}`, one node per line
//! * `labels.csv`: header `label`, one node per line
//! * `split.json`: `{"train": [...], "val": [...], "test": [...]}`
//!
//! Edges are undirected. On construction they are symmetrized,
//! deduplicated and stripped of self-loops.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::LinearOperator;
use crate::linalg::Matrix;
use crate::sub_seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, DataError>;

/// Node index lists for the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    name: String,
    edges: Vec<(usize, usize)>,
    raw_edge_count: usize,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl GraphDataset {
    /// Validates and normalizes. Edges may be given in either direction and
    /// with duplicates; self-loops are dropped. The node count is
    /// `labels.len()` and the class count `max(label) + 1`.
    pub fn new(
        name: impl Into<String>,
        edges: Vec<(usize, usize)>,
        features: Matrix,
        labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(DataError::Validation("dataset has no nodes".into()));
        }
        if features.rows() != n {
            return Err(DataError::Validation(format!(
                "features have {} rows for {n} nodes",
                features.rows()
            )));
        }
        if !features.is_finite() {
            return Err(DataError::Validation("features contain non-finite values".into()));
        }
        let raw_edge_count = edges.len();
        let mut norm = Vec::with_capacity(edges.len());
        for (s, d) in edges {
            if s >= n || d >= n {
                return Err(DataError::Validation(format!(
                    "edge endpoints in range: edge ({s},{d}) with {n} nodes"
                )));
            }
            if s != d {
                norm.push((s.min(d), s.max(d)));
            }
        }
        norm.sort_unstable();
        norm.dedup();
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut split = split;
        for (kind, ids) in [("train", &mut split.train), ("val", &mut split.val), ("test", &mut split.test)] {
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(DataError::Validation(format!("{kind} split lists a node twice")));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
                return Err(DataError::Validation(format!("{kind} split node {bad} out of range")));
            }
        }
        let mut owner = vec![None; n];
        for (kind, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
            for &i in ids {
                if let Some(prev) = owner[i] {
                    return Err(DataError::Validation(format!(
                        "masks disjoint: node {i} is in both {prev} and {kind}"
                    )));
                }
                owner[i] = Some(kind);
            }
        }
        let mut seen = vec![false; num_classes];
        for &i in &split.train {
            seen[labels[i]] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(DataError::Validation(format!(
                "every class present in train mask: class {c} missing"
            )));
        }
        Ok(Self {
            name: name.into(),
            edges: norm,
            raw_edge_count,
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge rows as given, before deduplication.
    pub fn raw_edge_count(&self) -> usize {
        self.raw_edge_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn indices(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.split.train,
            SplitKind::Val => &self.split.val,
            SplitKind::Test => &self.split.test,
        }
    }

    pub fn mask(&self, kind: SplitKind) -> Vec<bool> {
        let mut m = vec![false; self.num_nodes()];
        for &i in self.indices(kind) {
            m[i] = true;
        }
        m
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes()];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Reorders nodes: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(DataError::InvalidArgument("not a permutation".into()));
            }
            inv[old] = new;
        }
        if perm.len() != n {
            return Err(DataError::InvalidArgument("not a permutation".into()));
        }
        let features = Matrix::from_fn(n, self.num_features(), |i, j| self.features[(perm[i], j)]);
        let labels = perm.iter().map(|&o| self.labels[o]).collect();
        let edges = self.edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect();
        let map = |ids: &[usize]| ids.iter().map(|&o| inv[o]).collect();
        let split = Split {
            train: map(&self.split.train),
            val: map(&self.split.val),
            test: map(&self.split.test),
        };
        Self::new(self.name.clone(), edges, features, labels, split)
    }

    /// Writes the directory format. Every file is written atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |e: std::io::Error| DataError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let mut edges = String::from("src,dst\n");
        for &(a, b) in &self.edges {
            let _ = writeln!(edges, "{a},{b}");
        }
        let mut feats = (0..self.num_features()).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
        feats.push('\n');
        for i in 0..self.num_nodes() {
            let row: Vec<String> = self.features.row(i).iter().map(|v| format!("{v}")).collect();
            feats.push_str(&row.join(","));
            feats.push('\n');
        }
        let mut labels = String::from("label\n");
        for l in &self.labels {
            let _ = writeln!(labels, "{l}");
        }
        let split = serde_json::to_string(&self.split).map_err(|e| DataError::Io(e.to_string()))?;
        for (file, body) in [
            ("edges.csv", edges),
            ("features.csv", feats),
            ("labels.csv", labels),
            ("split.json", split + "\n"),
        ] {
            crate::io::write_atomic(&dir.join(file), body.as_bytes()).map_err(io)?;
        }
        Ok(())
    }
}

fn read(dir: &Path, file: &str) -> Result<String> {
    let path = dir.join(file);
    fs::read_to_string(&path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

fn parse_err(file: &str, line: u64, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a CSV body with a fixed header into rows of fields.
fn csv_rows(file: &str, text: &str, header: &[String]) -> Result<Vec<(u64, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(file, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if got != header {
        return Err(parse_err(file, 1, format!("expected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(file, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(file: &str, line: u64, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| parse_err(file, line, format!("'{s}': {e}")))
}

/// Reads and validates a dataset directory. The dataset name is the
/// directory's final component.
pub fn load_dataset(dir: &Path) -> Result<GraphDataset> {
    let labels_text = read(dir, "labels.csv")?;
    let mut labels = Vec::new();
    for (line, rec) in csv_rows("labels.csv", &labels_text, &["label".to_string()])? {
        labels.push(parse_field::<usize>("labels.csv", line, &rec[0])?);
    }

    let feat_text = read(dir, "features.csv")?;
    let first = feat_text.lines().next().unwrap_or("");
    let d = first.split(',').count();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    let mut data = Vec::with_capacity(labels.len() * d);
    let mut rows = 0;
    for (line, rec) in csv_rows("features.csv", &feat_text, &header)? {
        for v in &rec {
            let x: f64 = parse_field("features.csv", line, v)?;
            if !x.is_finite() {
                return Err(parse_err("features.csv", line, "non-finite value"));
            }
            data.push(x);
        }
        rows += 1;
    }
    if rows != labels.len() {
        return Err(DataError::Validation(format!(
            "features.csv has {rows} rows but labels.csv has {}",
            labels.len()
        )));
    }
    let features = Matrix::new(rows, d, data).map_err(|e| DataError::Validation(e.to_string()))?;

    let edge_text = read(dir, "edges.csv")?;
    let mut edges = Vec::new();
    for (line, rec) in csv_rows("edges.csv", &edge_text, &["src".to_string(), "dst".to_string()])? {
        edges.push((
            parse_field::<usize>("edges.csv", line, &rec[0])?,
            parse_field::<usize>("edges.csv", line, &rec[1])?,
        ));
    }

    let split_text = read(dir, "split.json")?;
    let split: Split = serde_json::from_str(&split_text)
        .map_err(|e| parse_err("split.json", e.line() as u64, e.to_string()))?;

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    GraphDataset::new(name, edges, features, labels, split)
}

/// How the adjacency is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `D^{-1/2} A D^{-1/2}`.
    #[default]
    Symmetric,
    /// `D^{-1} A`.
    Row,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "row" => Ok(Self::Row),
            other => Err(format!("unknown normalization '{other}' (symmetric|row)")),
        }
    }
}

/// Sparse normalized adjacency in coordinate form, sorted by `(row, col)`.
/// The diagonal is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl NormalizedAdjacency {
    pub fn new(ds: &GraphDataset, norm: Normalization) -> Self {
        let deg = ds.degrees();
        let mut entries = Vec::with_capacity(2 * ds.num_edges());
        for &(i, j) in ds.edges() {
            for (a, b) in [(i, j), (j, i)] {
                let v = match norm {
                    Normalization::Symmetric => 1.0 / ((deg[a] * deg[b]) as f64).sqrt(),
                    Normalization::Row => 1.0 / deg[a] as f64,
                };
                entries.push((a, b, v));
            }
        }
        entries.sort_by_key(|e| (e.0, e.1));
        Self { n: ds.num_nodes(), entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(i, j)))
            .map_or(0.0, |k| self.entries[k].2)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.entries {
            m[(i, j)] = v;
        }
        m
    }
}

/// Symmetric `D^{-1/2} A D^{-1/2}`.
pub fn normalized_adjacency(ds: &GraphDataset) -> NormalizedAdjacency {
    NormalizedAdjacency::new(ds, Normalization::Symmetric)
}

impl LinearOperator for NormalizedAdjacency {
    fn shape(&self) -> (usize, usize) {
        (self.n, self.n)
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, x.cols());
        for &(i, j, v) in &self.entries {
            let src = x.row(j).to_vec();
            for (o, s) in out.row_mut(i).iter_mut().zip(src) {
                *o += v * s;
            }
        }
        out
    }

    fn apply_transpose(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, x.cols());
        for &(i, j, v) in &self.entries {
            let src = x.row(i).to_vec();
            for (o, s) in out.row_mut(j).iter_mut().zip(src) {
                *o += v * s;
            }
        }
        out
    }
}

/// Stratified split: per class, `max(1, round(frac * count))` nodes each for
/// train and val, the rest for test.
pub fn stratified_split(labels: &[usize], train_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (class, mut ids) in by_class {
        let c = ids.len();
        let tr = ((train_frac * c as f64).round() as usize).max(1);
        let va = ((val_frac * c as f64).round() as usize).max(1);
        if tr + va >= c {
            return Err(DataError::DegenerateGraph(format!(
                "class {class} has {c} nodes, too few for a train/val/test split"
            )));
        }
        ids.shuffle(&mut rng);
        split.train.extend_from_slice(&ids[..tr]);
        split.val.extend_from_slice(&ids[tr..tr + va]);
        split.test.extend_from_slice(&ids[tr + va..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Feature rows with mean `separation` on coordinate `label mod d` and
/// Gaussian noise.
fn class_features(labels: &[usize], d: usize, separation: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    Matrix::from_fn(labels.len(), d, |i, j| {
        let mean = if j == labels[i] % d { separation } else { 0.0 };
        mean + noise.sample(rng)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub n_per_block: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub seed: u64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            n_per_block: 50,
            blocks: 2,
            p_in: 0.2,
            p_out: 0.02,
            feat_dim: 16,
            seed: 0,
        }
    }
}

pub const SBM_FEATURE_SEPARATION: f64 = 1.0;
pub const SBM_FEATURE_NOISE: f64 = 0.5;

/// Stochastic block model with class-mean Gaussian features and a 10/10/80
/// stratified split.
pub fn gen_sbm(cfg: &SbmConfig) -> Result<GraphDataset> {
    if !(0.0 <= cfg.p_out && cfg.p_out < cfg.p_in && cfg.p_in <= 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
            cfg.p_in, cfg.p_out
        )));
    }
    if cfg.blocks == 0 || cfg.n_per_block == 0 {
        return Err(DataError::DegenerateGraph(format!(
            "{} blocks of {} nodes",
            cfg.blocks, cfg.n_per_block
        )));
    }
    if cfg.feat_dim == 0 {
        return Err(DataError::InvalidArgument("feat_dim must be positive".into()));
    }
    let n = cfg.blocks * cfg.n_per_block;
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.n_per_block).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let mut frng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2));
    let features = class_features(&labels, cfg.feat_dim, SBM_FEATURE_SEPARATION, SBM_FEATURE_NOISE, &mut frng);
    let split = stratified_split(&labels, 0.1, 0.1, sub_seed(cfg.seed, 3))?;
    GraphDataset::new(format!("sbm-{}x{}-s{}", cfg.blocks, cfg.n_per_block, cfg.seed), edges, features, labels, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub depth: usize,
    pub branching: usize,
    pub feat_dim: usize,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            branching: 2,
            feat_dim: 16,
            seed: 0,
        }
    }
}

/// Probability that an infected node passes the infection to a child.
pub const TREE_TRANSMISSION: f64 = 0.75;
pub const TREE_FEATURE_SEPARATION: f64 = 1.0;
pub const TREE_FEATURE_NOISE: f64 = 1.0;
/// Smallest class size accepted before the cascade is redrawn.
const TREE_MIN_CLASS: usize = 3;

/// Complete tree with `depth` levels below the root. Labels come from an
/// infection cascade started at the root: each child of an infected node
/// is infected with probability [`TREE_TRANSMISSION`], so the chance of
/// label 1 decays geometrically with the hop count. Cascades leaving a
/// class with fewer than three nodes are redrawn with the next sub-seed.
pub fn gen_tree(cfg: &TreeConfig) -> Result<GraphDataset> {
    if cfg.depth < 2 || cfg.branching < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need depth >= 2 and branching >= 2, got {} and {}",
            cfg.depth, cfg.branching
        )));
    }
    if cfg.feat_dim == 0 {
        return Err(DataError::InvalidArgument("feat_dim must be positive".into()));
    }
    let n: usize = (0..=cfg.depth).map(|l| cfg.branching.pow(l as u32)).sum();
    // node i > 0 has parent (i - 1) / branching in breadth-first numbering
    let edges: Vec<(usize, usize)> = (1..n).map(|i| ((i - 1) / cfg.branching, i)).collect();
    let mut labels = vec![0; n];
    for attempt in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 100 + attempt));
        labels[0] = 1;
        for i in 1..n {
            let parent = (i - 1) / cfg.branching;
            labels[i] = usize::from(labels[parent] == 1 && rng.random::<f64>() < TREE_TRANSMISSION);
        }
        let ones = labels.iter().filter(|&&l| l == 1).count();
        if ones >= TREE_MIN_CLASS && n - ones >= TREE_MIN_CLASS {
            break;
        }
        if attempt == 999 {
            return Err(DataError::DegenerateGraph("no balanced infection cascade found".into()));
        }
    }
    let mut frng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2));
    let features = class_features(&labels, cfg.feat_dim, TREE_FEATURE_SEPARATION, TREE_FEATURE_NOISE, &mut frng);
    let split = stratified_split(&labels, 0.1, 0.1, sub_seed(cfg.seed, 3))?;
    GraphDataset::new(
        format!("tree-d{}b{}-s{}", cfg.depth, cfg.branching, cfg.seed),
        edges,
        features,
        labels,
        split,
    )
}
