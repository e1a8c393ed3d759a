//! Extended-XYZ ingestion, dataset splits and run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{EqgatError, Result};
use crate::geometry::PointCloud;
use crate::model::EncoderConfig;

const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",
    "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce",
    "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir",
    "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm",
    "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc",
    "Lv", "Ts", "Og",
];

/// Atomic number of an element symbol (case-insensitive) or a numeric `Z`.
pub fn atomic_number(token: &str) -> Option<u32> {
    if let Ok(z) = token.parse::<u32>() {
        return (1..=ELEMENTS.len() as u32).contains(&z).then_some(z);
    }
    ELEMENTS
        .iter()
        .position(|s| s.eq_ignore_ascii_case(token))
        .map(|i| i as u32 + 1)
}

pub fn element_symbol(z: u32) -> Option<&'static str> {
    ELEMENTS.get((z as usize).checked_sub(1)?).copied()
}

/// One molecule and its labeled scalar properties.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeRecord {
    pub cloud: PointCloud,
    pub targets: IndexMap<String, f64>,
}

/// Parses concatenated XYZ blocks.
///
/// Each block is an atom count, a comment line whose numeric `key=value`
/// tokens become targets, and one `<symbol-or-Z> x y z` line per atom. Extra
/// columns on atom lines are ignored, as are blank lines between blocks.
pub fn parse_xyz(text: &str) -> Result<Vec<MoleculeRecord>> {
    let lines: Vec<&str> = text.lines().collect();
    let err = |line: usize, message: String| EqgatError::Parse {
        line: line + 1,
        message,
    };
    let mut records = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let header = i;
        let count: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| err(i, format!("expected an atom count, found {:?}", lines[i].trim())))?;
        if count == 0 {
            return Err(err(i, "a molecule needs at least one atom".into()));
        }
        i += 1;
        let Some(comment) = lines.get(i) else {
            return Err(err(header, "block ends before its comment line".into()));
        };
        let targets = parse_comment(comment);
        i += 1;

        let mut z = Vec::with_capacity(count);
        let mut positions = Vec::with_capacity(count);
        for k in 0..count {
            let line = lines.get(i).copied().unwrap_or("");
            let fields: Vec<&str> = line.split_whitespace().collect();
            if i >= lines.len() || fields.len() < 4 {
                return Err(err(
                    i.min(lines.len().saturating_sub(1)).max(header),
                    format!(
                        "block at line {} declares {count} atoms but atom {} is missing",
                        header + 1,
                        k + 1
                    ),
                ));
            }
            let atom = atomic_number(fields[0]).ok_or_else(|| err(i, format!("unknown element {:?}", fields[0])))?;
            let mut p = [0.0; 3];
            for (slot, field) in p.iter_mut().zip(&fields[1..4]) {
                *slot = field
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(i, format!("unparsable coordinate {field:?}")))?;
            }
            z.push(atom);
            positions.push(p);
            i += 1;
        }
        let cloud = PointCloud::new(z, positions).map_err(|e| err(header, e.to_string()))?;
        records.push(MoleculeRecord { cloud, targets });
    }
    Ok(records)
}

fn parse_comment(line: &str) -> IndexMap<String, f64> {
    line.split_whitespace()
        .filter_map(|tok| {
            let (k, v) = tok.split_once('=')?;
            let v = v.parse::<f64>().ok()?;
            (!k.is_empty()).then(|| (k.to_string(), v))
        })
        .collect()
}

/// Serializes records so that [`parse_xyz`] restores them exactly.
pub fn write_xyz(records: &[MoleculeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.cloud.len());
        let comment: Vec<String> = r.targets.iter().map(|(k, v)| format!("{k}={v:?}")).collect();
        let _ = writeln!(out, "{}", comment.join(" "));
        for (&z, p) in r.cloud.atomic_numbers().iter().zip(r.cloud.positions()) {
            let sym = element_symbol(z).map(str::to_string).unwrap_or_else(|| z.to_string());
            let _ = writeln!(out, "{sym} {:?} {:?} {:?}", p[0], p[1], p[2]);
        }
    }
    out
}

pub fn read_xyz(path: &Path) -> Result<Vec<MoleculeRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EqgatError::Dataset(format!("dataset not found or unreadable: {}: {e}", path.display())))?;
    parse_xyz(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by a contiguous partition.
///
/// Validation and test sizes round down. When the fractions sum to one, every
/// remaining record goes to training.
pub fn split_dataset<T: Clone>(records: &[T], fractions: [f64; 3], seed: u64) -> Result<Split<T>> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(EqgatError::Config(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(EqgatError::Config(format!(
            "split fractions sum to {total}, more than 1"
        )));
    }
    let n = records.len();
    let size = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let (n_val, n_test) = (size(fractions[1]), size(fractions[2]));
    let n_train = if (total - 1.0).abs() <= 1e-9 {
        n - n_val - n_test
    } else {
        size(fractions[0])
    };
    for (name, len) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if len == 0 {
            return Err(EqgatError::Dataset(format!("the {name} split of {n} records is empty")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| records[i].clone()).collect();
    Ok(Split {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n_train + n_val + n_test),
    })
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping_patience: usize,
    pub lr_patience: usize,
    pub lr_decay: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::qm9()
    }
}

impl TrainConfig {
    pub fn qm9() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 128,
            max_epochs: 300,
            early_stopping_patience: 20,
            lr_patience: 5,
            lr_decay: 0.75,
            split: [0.8, 0.1, 0.1],
        }
    }

    pub fn atom3d() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 20,
            early_stopping_patience: 10,
            lr_patience: 4,
            lr_decay: 0.5,
            split: [0.8, 0.1, 0.1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(EqgatError::Config(msg.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("train.lr must be positive");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return fail("train.max_epochs must be at least 1");
        }
        if self.early_stopping_patience == 0 {
            return fail("train.early_stopping_patience must be at least 1");
        }
        if self.lr_patience == 0 {
            return fail("train.lr_patience must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail("train.lr_decay must lie strictly between 0 and 1");
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || self.split.iter().sum::<f64>() > 1.0 + 1e-9 {
            return fail("train.split fractions must be positive and sum to at most 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Extended-XYZ file.
    pub path: PathBuf,
    /// Comment-line key holding the regression target.
    pub target: String,
    /// Unit label attached to predictions.
    #[serde(default)]
    pub units: String,
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| EqgatError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let config: Self = serde_json::from_value(value).map_err(|e| EqgatError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.target.is_empty() {
            return Err(EqgatError::Config("data.target must not be empty".into()));
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides, then re-validates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value)
    }
}

/// Sets each dotted `key.path=value` inside `target`. The value is read as
/// JSON when it parses and as a plain string otherwise; only existing keys
/// can be set.
pub fn apply_overrides<S: AsRef<str>>(target: &mut Value, overrides: &[S]) -> Result<()> {
    for item in overrides {
        let item = item.as_ref();
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| EqgatError::Config(format!("override {item:?} is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut *target;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| EqgatError::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = parsed;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EqgatError::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}
