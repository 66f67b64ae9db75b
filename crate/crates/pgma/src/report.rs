//! Evaluation reports and the cross-run ablation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use pgma_core::metrics::IouAccumulator;
use pgma_core::model::ModelConfig;
use pgma_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Name of the configuration a run belongs to in the ablation table.
pub fn variant_name(model: &ModelConfig, train: &TrainConfig) -> String {
    let base = if model.high_order { "full" } else { "param-free" };
    if train.channel_drop {
        base.to_string()
    } else {
        format!("{base}, no channel-drop")
    }
}

pub const BASELINE_VARIANT: &str = "clip prior only";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub fold: usize,
    pub mode: String,
    pub shots: usize,
    pub miou: f64,
    pub fbiou: f64,
    /// Per-class IoU in percent, keyed by class id.
    pub per_class: BTreeMap<usize, f64>,
    pub seed: u64,
    pub config_hash: String,
    pub episodes: usize,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(variant: &str, fold: usize, mode: &str, shots: usize, acc: &IouAccumulator, seed: u64, config_hash: &str) -> Self {
        Self {
            variant: variant.to_string(),
            fold,
            mode: mode.to_string(),
            shots,
            miou: acc.miou(),
            fbiou: acc.fbiou(),
            per_class: acc.per_class().into_iter().collect(),
            seed,
            config_hash: config_hash.to_string(),
            episodes: acc.episodes(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "variant     {}", self.variant).unwrap();
        writeln!(s, "mode        {} ({}-shot)", self.mode, self.shots).unwrap();
        writeln!(s, "fold        {}", self.fold).unwrap();
        writeln!(s, "episodes    {}", self.episodes).unwrap();
        writeln!(s, "seed        {}", self.seed).unwrap();
        writeln!(s, "config      {}", self.config_hash).unwrap();
        writeln!(s, "mIoU        {:.2}", self.miou).unwrap();
        writeln!(s, "FB-IoU      {:.2}", self.fbiou).unwrap();
        for (c, v) in &self.per_class {
            writeln!(s, "  class {c:>3}  {v:.2}").unwrap();
        }
        s
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn mode_rank(mode: &str) -> Key {
    let order = ["fss", "zss", "bbox", "coseg"];
    match order.iter().position(|m| *m == mode) {
        Some(i) => (i, String::new()),
        None if mode.starts_with("corrupt-mask") => (order.len(), mode.to_string()),
        None => (order.len() + 1, mode.to_string()),
    }
}

fn variant_rank(v: &str) -> Key {
    let order = [BASELINE_VARIANT, "param-free", "full", "full, no channel-drop"];
    (order.iter().position(|o| *o == v).unwrap_or(order.len()), v.to_string())
}

type Key = (usize, String);

/// One row per variant, one mIoU column per mode. Reports of the same
/// variant and mode from different folds are averaged.
pub fn ablation_table(reports: &[EvalReport]) -> String {
    let mut cells: BTreeMap<Key, BTreeMap<Key, Vec<f64>>> = BTreeMap::new();
    let mut modes: BTreeMap<Key, String> = BTreeMap::new();
    let mut names: BTreeMap<Key, String> = BTreeMap::new();
    for r in reports {
        let (vk, mk) = (variant_rank(&r.variant), mode_rank(&r.mode));
        names.insert(vk.clone(), r.variant.clone());
        modes.insert(mk.clone(), r.mode.clone());
        cells.entry(vk).or_default().entry(mk).or_default().push(r.miou);
    }
    let width = names.values().map(String::len).max().unwrap_or(0).max("variant".len());
    let cols: Vec<usize> = modes.values().map(|m| m.len().max(6)).collect();
    let mut out = String::new();
    write!(out, "| {:<width$} |", "variant").unwrap();
    for (m, w) in modes.values().zip(&cols) {
        write!(out, " {m:>w$} |").unwrap();
    }
    out.push('\n');
    write!(out, "|{}|", "-".repeat(width + 2)).unwrap();
    for w in &cols {
        write!(out, "{}:|", "-".repeat(w + 1)).unwrap();
    }
    out.push('\n');
    for (vk, row) in &cells {
        write!(out, "| {:<width$} |", names[vk]).unwrap();
        for (mk, w) in modes.keys().zip(&cols) {
            match row.get(mk) {
                Some(v) => write!(out, " {:>w$.2} |", v.iter().sum::<f64>() / v.len() as f64).unwrap(),
                None => write!(out, " {:>w$} |", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}
