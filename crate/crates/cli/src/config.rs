//! Flat key-value run configuration (a JSON object of strings and numbers).

use std::path::PathBuf;

use serde_json::{Map, Number, Value};
use sympgnn::data::{Normalization, SbmConfig, TreeConfig};
use sympgnn::gnn::{TrainConfig, Variant};
use sympgnn::ProjectionMode;

const PRESETS: [(&str, &str); 6] = [
    ("disease", include_str!("../presets/disease.json")),
    ("airport", include_str!("../presets/airport.json")),
    ("pubmed", include_str!("../presets/pubmed.json")),
    ("citeseer", include_str!("../presets/citeseer.json")),
    ("cora-defaults", include_str!("../presets/cora-defaults.json")),
    ("sbm", include_str!("../presets/sbm.json")),
];

const TRAIN_KEYS: [&str; 17] = [
    "variant",
    "lr",
    "manifold_lr",
    "weight_decay",
    "dropout",
    "hidden",
    "layers",
    "ode_time",
    "ode_step",
    "max_grad_norm",
    "epochs",
    "patience",
    "seed",
    "projection",
    "soft_weight",
    "normalization",
    "per_node_form",
];
const SBM_KEYS: [&str; 6] = ["blocks", "n_per_block", "p_in", "p_out", "feat_dim", "data_seed"];
const TREE_KEYS: [&str; 4] = ["depth", "branching", "feat_dim", "data_seed"];

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Dir(PathBuf),
    Sbm(SbmConfig),
    Tree(TreeConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// Preset contents by name.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}

/// Parses `text` as a flat JSON object.
pub fn parse_object(text: &str) -> Result<Map<String, Value>, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("config is not valid JSON: {e}"))?;
    let Value::Object(map) = value else {
        return Err("config must be a JSON object".into());
    };
    for (k, v) in &map {
        if !matches!(v, Value::String(_) | Value::Number(_)) {
            return Err(format!("key '{k}': values must be strings or numbers"));
        }
    }
    Ok(map)
}

/// Applies `key=value`; the value becomes a number when it parses as one.
pub fn apply_override(map: &mut Map<String, Value>, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override '{spec}' is not key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("override '{spec}' has an empty key"));
    }
    let raw = raw.trim();
    let value = if let Ok(u) = raw.parse::<u64>() {
        Value::Number(u.into())
    } else if let Some(n) = raw.parse::<f64>().ok().and_then(Number::from_f64) {
        Value::Number(n)
    } else {
        Value::String(raw.to_string())
    };
    map.insert(key.to_string(), value);
    Ok(())
}

struct Reader<'a> {
    map: &'a Map<String, Value>,
}

impl Reader<'_> {
    fn text(&self, key: &str) -> Result<Option<String>, String> {
        Ok(match self.map.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(_) => return Err(format!("key '{key}': expected a string or number")),
        })
    }

    fn float(&self, key: &str) -> Result<Option<f64>, String> {
        match self.map.get(key) {
            None => Ok(None),
            Some(Value::Number(n)) => Ok(n.as_f64()),
            Some(Value::String(s)) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| format!("key '{key}': '{s}' is not a number")),
            Some(_) => Err(format!("key '{key}': expected a number")),
        }
    }

    fn count(&self, key: &str) -> Result<Option<usize>, String> {
        match self.float(key)? {
            None => Ok(None),
            Some(v) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => Ok(Some(v as usize)),
            Some(v) => Err(format!("key '{key}': {v} is not a non-negative integer")),
        }
    }

    fn seed(&self, key: &str) -> Result<Option<u64>, String> {
        match self.map.get(key) {
            Some(Value::Number(n)) if n.as_u64().is_some() => Ok(n.as_u64()),
            Some(Value::String(s)) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| format!("key '{key}': '{s}' is not a seed")),
            None => Ok(None),
            Some(v) => Err(format!("key '{key}': {v} is not a seed")),
        }
    }

    fn flag(&self, key: &str) -> Result<Option<bool>, String> {
        match self.text(key)?.as_deref() {
            None => Ok(None),
            Some("1" | "true") => Ok(Some(true)),
            Some("0" | "false") => Ok(Some(false)),
            Some(other) => Err(format!("key '{key}': '{other}' is not 0/1/true/false")),
        }
    }

    fn parsed<T: std::str::FromStr<Err = String>>(&self, key: &str) -> Result<Option<T>, String> {
        self.text(key)?
            .map(|s| s.parse::<T>().map_err(|e| format!("key '{key}': {e}")))
            .transpose()
    }
}

impl RunConfig {
    pub fn from_map(map: &Map<String, Value>) -> Result<Self, String> {
        let r = Reader { map };
        let dataset_text = r.text("dataset")?.ok_or("missing key 'dataset'")?;
        let gen_keys: &[&str] = match dataset_text.as_str() {
            "sbm" => &SBM_KEYS,
            "tree" => &TREE_KEYS,
            _ => &[],
        };
        for key in map.keys() {
            let known = key == "dataset" || key == "out" || TRAIN_KEYS.contains(&key.as_str()) || gen_keys.contains(&key.as_str());
            if !known {
                return Err(format!("unknown key '{key}' for dataset '{dataset_text}'"));
            }
        }
        let d = TrainConfig::default();
        let train = TrainConfig {
            variant: r.parsed::<Variant>("variant")?.unwrap_or(d.variant),
            lr: r.float("lr")?.unwrap_or(d.lr),
            manifold_lr: r.float("manifold_lr")?,
            weight_decay: r.float("weight_decay")?.unwrap_or(d.weight_decay),
            dropout: r.float("dropout")?.unwrap_or(d.dropout),
            hidden: r.count("hidden")?.unwrap_or(d.hidden),
            layers: r.count("layers")?.unwrap_or(d.layers),
            ode_time: r.float("ode_time")?.unwrap_or(d.ode_time),
            ode_step: r.float("ode_step")?.unwrap_or(d.ode_step),
            max_grad_norm: r.float("max_grad_norm")?.unwrap_or(d.max_grad_norm),
            epochs: r.count("epochs")?.unwrap_or(d.epochs),
            patience: r.count("patience")?.unwrap_or(d.patience),
            seed: r.seed("seed")?.unwrap_or(d.seed),
            projection: r.parsed::<ProjectionMode>("projection")?.unwrap_or(d.projection),
            soft_weight: r.float("soft_weight")?,
            normalization: r.parsed::<Normalization>("normalization")?.unwrap_or(d.normalization),
            per_node_form: r.flag("per_node_form")?.unwrap_or(d.per_node_form),
        };
        train.validate().map_err(|e| e.to_string())?;
        let data_seed = r.seed("data_seed")?.unwrap_or(train.seed);
        let dataset = match dataset_text.as_str() {
            "sbm" => {
                let s = SbmConfig::default();
                DatasetSpec::Sbm(SbmConfig {
                    n_per_block: r.count("n_per_block")?.unwrap_or(s.n_per_block),
                    blocks: r.count("blocks")?.unwrap_or(s.blocks),
                    p_in: r.float("p_in")?.unwrap_or(s.p_in),
                    p_out: r.float("p_out")?.unwrap_or(s.p_out),
                    feat_dim: r.count("feat_dim")?.unwrap_or(s.feat_dim),
                    seed: data_seed,
                })
            }
            "tree" => {
                let t = TreeConfig::default();
                DatasetSpec::Tree(TreeConfig {
                    depth: r.count("depth")?.unwrap_or(t.depth),
                    branching: r.count("branching")?.unwrap_or(t.branching),
                    feat_dim: r.count("feat_dim")?.unwrap_or(t.feat_dim),
                    seed: data_seed,
                })
            }
            path => DatasetSpec::Dir(PathBuf::from(path)),
        };
        let out = PathBuf::from(r.text("out")?.unwrap_or_else(|| "run".into()));
        Ok(Self { dataset, train, out })
    }

    /// The effective configuration as a flat object; parsing it back gives
    /// the same run.
    pub fn to_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let num = |v: f64| Value::Number(Number::from_f64(v).expect("finite config value"));
        let int = |v: usize| Value::Number((v as u64).into());
        match &self.dataset {
            DatasetSpec::Dir(p) => {
                m.insert("dataset".into(), Value::String(p.display().to_string()));
            }
            DatasetSpec::Sbm(s) => {
                m.insert("dataset".into(), "sbm".into());
                m.insert("blocks".into(), int(s.blocks));
                m.insert("n_per_block".into(), int(s.n_per_block));
                m.insert("p_in".into(), num(s.p_in));
                m.insert("p_out".into(), num(s.p_out));
                m.insert("feat_dim".into(), int(s.feat_dim));
                m.insert("data_seed".into(), s.seed.into());
            }
            DatasetSpec::Tree(t) => {
                m.insert("dataset".into(), "tree".into());
                m.insert("depth".into(), int(t.depth));
                m.insert("branching".into(), int(t.branching));
                m.insert("feat_dim".into(), int(t.feat_dim));
                m.insert("data_seed".into(), t.seed.into());
            }
        }
        let t = &self.train;
        m.insert("variant".into(), t.variant.as_str().into());
        m.insert("lr".into(), num(t.lr));
        if let Some(v) = t.manifold_lr {
            m.insert("manifold_lr".into(), num(v));
        }
        m.insert("weight_decay".into(), num(t.weight_decay));
        m.insert("dropout".into(), num(t.dropout));
        m.insert("hidden".into(), int(t.hidden));
        m.insert("layers".into(), int(t.layers));
        m.insert("ode_time".into(), num(t.ode_time));
        m.insert("ode_step".into(), num(t.ode_step));
        m.insert("max_grad_norm".into(), num(t.max_grad_norm));
        m.insert("epochs".into(), int(t.epochs));
        m.insert("patience".into(), int(t.patience));
        m.insert("seed".into(), t.seed.into());
        let projection = match t.projection {
            ProjectionMode::Paper => "paper",
            ProjectionMode::Stable => "stable",
        };
        m.insert("projection".into(), projection.into());
        if let Some(v) = t.soft_weight {
            m.insert("soft_weight".into(), num(v));
        }
        let norm = match t.normalization {
            Normalization::Symmetric => "symmetric",
            Normalization::Row => "row",
        };
        m.insert("normalization".into(), norm.into());
        m.insert("per_node_form".into(), int(usize::from(t.per_node_form)));
        m.insert("out".into(), Value::String(self.out.display().to_string()));
        m
    }
}
