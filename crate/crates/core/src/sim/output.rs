use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{run_experiment, ExperimentConfig, RunRecord};
use crate::attacks::AttackKind;
use crate::defenses::Defense;
use crate::error::{Error, Result};
use crate::eval::RoundMetrics;

pub const CSV_HEADER: [&str; 10] = [
    "round", "ma", "ba", "ra", "n_selected", "sel_tp", "sel_fp", "clip_c", "emp_kappa", "prop_err",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn row(m: &RoundMetrics) -> [String; 10] {
    [
        m.round.to_string(),
        opt(m.ma),
        opt(m.ba),
        opt(m.ra),
        m.n_selected.to_string(),
        m.selected_true_pos.to_string(),
        m.selected_false_pos.to_string(),
        opt(m.clip_threshold),
        opt(m.empirical_kappa),
        opt(m.prop_error),
    ]
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    Error::io(path, source)
}

/// Writes the evaluated rounds of a run, one row each.
pub fn write_metrics_csv(path: &Path, rounds: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for m in rounds.iter().filter(|m| m.ma.is_some()) {
        w.write_record(row(m)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn write_meta(dir: &Path, started: f64, wall: f64) -> Result<()> {
    let meta = serde_json::json!({
        "started_unix": started,
        "finished_unix": unix_now(),
        "wall_time_secs": wall,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_file(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta).expect("json"))
}

/// Runs an experiment and writes `metrics.csv`, `record.json` and `meta.json`
/// (timestamps live only in the last one).
pub fn run_to_dir(config: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = unix_now();
    let record = run_experiment(config)?;
    write_metrics_csv(&out.join("metrics.csv"), &record.rounds)?;
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    write_file(&out.join("record.json"), &json)?;
    write_meta(out, started, record.wall_time_secs)?;
    Ok(record)
}

/// One grid point of a sweep: attack, defense, Dirichlet beta and poison ratio r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub attack: AttackKind,
    pub defense: String,
    /// `None` is an IID split.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Poison ratio; defaults to the base config.
    #[serde(default)]
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub cells: Vec<SweepCell>,
    /// Seeds to repeat each cell with; defaults to the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: SweepConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(dir) = path.parent() {
            cfg.base.resolve_paths(dir);
        }
        cfg.base.validate()?;
        for cell in &cfg.cells {
            cfg.cell_config(cell, cfg.base.seed)?.validate()?;
        }
        Ok(cfg)
    }

    /// The base config with one cell's overrides applied.
    pub fn cell_config(&self, cell: &SweepCell, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        cfg.attack.kind = cell.attack;
        if cfg.defense.name() != cell.defense {
            cfg.defense = Defense::from_name(&cell.defense).map_err(|e| Error::Config(e.to_string()))?;
        }
        cfg.beta = cell.beta;
        if let Some(r) = cell.r {
            cfg.attack.poison_ratio = r;
        }
        cfg.seed = seed;
        Ok(cfg)
    }
}

/// Runs every cell (for every seed) and writes one combined `sweep.csv`
/// whose rows are prefixed with the cell coordinates.
pub fn sweep(config: &SweepConfig, out: &Path) -> Result<Vec<RunRecord>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("sweep.csv");
    let started = unix_now();
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["attack", "defense", "beta", "r", "seed"];
    header.extend(CSV_HEADER);
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    let seeds = if config.seeds.is_empty() {
        vec![config.base.seed]
    } else {
        config.seeds.clone()
    };
    let mut records = Vec::new();
    let mut wall = 0.0;
    for cell in &config.cells {
        for &seed in &seeds {
            let cfg = config.cell_config(cell, seed)?;
            let record = run_experiment(&cfg)?;
            wall += record.wall_time_secs;
            let prefix = [
                cell.attack.name().to_string(),
                cfg.defense.name().to_string(),
                opt(cfg.beta),
                cfg.attack.poison_ratio.to_string(),
                seed.to_string(),
            ];
            for m in record.rounds.iter().filter(|m| m.ma.is_some()) {
                let fields: Vec<String> = prefix.iter().cloned().chain(row(m)).collect();
                w.write_record(&fields).map_err(|e| csv_err(&path, e))?;
            }
            records.push(record);
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_meta(out, started, wall)?;
    Ok(records)
}
