//! Ensemble execution and artifact persistence.
//!
//! Replicas run in parallel on a bounded pool, but every artifact byte is
//! determined by (config, master_seed) alone: results are collected in
//! replica-index order before anything is written.

use crate::config::ExperimentConfig;
use crate::lattice::Site;
use crate::regen::{detect_offline, extract_subwalk, RegenIncrement};
use crate::stats::{summarize, EnsembleSummary, ReplicaRecord, SummarizeOptions};
use crate::walk;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Hill fraction used for the `analysis.tail` toggle.
const TAIL_FRACTION: f64 = 0.05;

pub const REPLICAS_FILE: &str = "replicas.jsonl";
pub const CHECKPOINTS_FILE: &str = "checkpoints.jsonl";
pub const REGEN_FILE: &str = "regen.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MSD_FILE: &str = "msd.csv";
pub const CONFIG_FILE: &str = "experiment.toml";

/// One line of replicas.jsonl. Key names and order are a stable external
/// contract; `ReplicaRecord` is the in-memory superset.
#[derive(Debug, Serialize, Deserialize)]
struct ReplicaRow {
    replica: u64,
    #[serde(rename = "final")]
    final_position: Site,
    returns: u64,
    last_return: u64,
    regens: Vec<u64>,
    censored_from: u64,
    #[serde(rename = "K_seq_digest")]
    k_seq_digest: String,
}

/// One line of checkpoints.jsonl.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRow {
    replica: u64,
    positions: Vec<(u64, Site)>,
}

/// One line of regen.jsonl. Increments are flat `[dt, dy...]` arrays.
#[derive(Debug, Serialize, Deserialize)]
struct RegenRow {
    replica: u64,
    increments: Vec<RegenIncrement>,
}

fn io_ctx(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Simulate one replica and reduce it to its persistent record. The stride-1
/// trajectory and K-sequence stay inside this call; only regeneration times
/// and increments survive when regen analysis is on.
pub fn simulate_replica(cfg: &ExperimentConfig, replica: u64) -> Result<ReplicaRecord> {
    let out = walk::run(&cfg.walk_config(replica))?;
    let summary = out.summary;
    let (regens, censored_from, increments) = if cfg.analysis.regen {
        let ks = summary
            .k_seq
            .as_ref()
            .ok_or_else(|| Error::Analysis("regen analysis needs the K-sequence".into()))?;
        let mut report = detect_offline(ks, &cfg.memory, &cfg.tolerances)?;
        extract_subwalk(&summary.stride_positions, &mut report)?;
        (report.regens, report.censored_from, report.increments)
    } else {
        // Nothing was assessed: every time is censored.
        (Vec::new(), 1, Vec::new())
    };
    let k_digest = summary
        .k_digest
        .ok_or_else(|| Error::Analysis("runner requires the K-sequence digest".into()))?;
    Ok(ReplicaRecord {
        replica,
        final_position: summary.final_position,
        returns: summary.origin_returns,
        last_return: summary.last_return,
        checkpoint_positions: summary.checkpoint_positions,
        regens,
        censored_from,
        increments,
        k_digest: Some(k_digest),
    })
}

fn summarize_options(cfg: &ExperimentConfig) -> SummarizeOptions {
    SummarizeOptions {
        late_cutoff: cfg.late_cutoff_value(),
        regen: cfg.analysis.regen,
        clt: cfg.analysis.clt,
        tail: cfg.analysis.tail.then_some(TAIL_FRACTION),
    }
}

/// Run the whole ensemble. `workers` overrides the config's pool size;
/// pool size never affects output bytes.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<EnsembleSummary> {
    cfg.validate()?;
    let threads = workers.or(cfg.workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Resource(format!("worker pool: {e}")))?;
    let records: Vec<ReplicaRecord> = pool.install(|| {
        (0..cfg.replicas)
            .into_par_iter()
            .map(|r| simulate_replica(cfg, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = summarize(records, &summarize_options(cfg))?;
    write_artifacts(cfg, out_dir, &summary)?;
    Ok(summary)
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_ctx(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| io_ctx(path, e))?;
    }
    w.flush().map_err(|e| io_ctx(path, e))
}

fn write_artifacts(cfg: &ExperimentConfig, dir: &Path, summary: &EnsembleSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_ctx(dir, e))?;

    let cfg_text = toml::to_string(cfg)
        .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg_text).map_err(|e| io_ctx(&cfg_path, e))?;

    write_lines(
        &dir.join(REPLICAS_FILE),
        summary.records.iter().map(|r| ReplicaRow {
            replica: r.replica,
            final_position: r.final_position.clone(),
            returns: r.returns,
            last_return: r.last_return,
            regens: r.regens.clone(),
            censored_from: r.censored_from,
            k_seq_digest: r.k_digest.clone().unwrap_or_default(),
        }),
    )?;

    if !cfg.checkpoints.is_empty() {
        write_lines(
            &dir.join(CHECKPOINTS_FILE),
            summary.records.iter().map(|r| CheckpointRow {
                replica: r.replica,
                positions: r.checkpoint_positions.clone(),
            }),
        )?;
    }

    if cfg.analysis.regen {
        write_lines(
            &dir.join(REGEN_FILE),
            summary.records.iter().map(|r| RegenRow {
                replica: r.replica,
                increments: r.increments.clone(),
            }),
        )?;
    }

    let json_path = dir.join(SUMMARY_FILE);
    let mut json = serde_json::to_string_pretty(&summary.pooled)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| io_ctx(&json_path, e))?;

    let csv_path = dir.join(MSD_FILE);
    fs::write(&csv_path, msd_csv(summary)).map_err(|e| io_ctx(&csv_path, e))?;
    Ok(())
}

/// The pooled MSD curve as CSV text.
pub fn msd_csv(summary: &EnsembleSummary) -> String {
    let mut out = String::from("checkpoint,msd_mean,msd_se\n");
    for p in &summary.pooled.msd {
        out.push_str(&format!("{},{},{}\n", p.checkpoint, p.mean, p.se));
    }
    out
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| io_ctx(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_ctx(path, e))?;
        if line.is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| {
            Error::Analysis(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(rows)
}

/// Re-derive the pooled summary from a run's artifacts without simulating.
/// Missing inputs are enumerated by name in one error.
pub fn analyze_dir(dir: &Path) -> Result<(ExperimentConfig, EnsembleSummary)> {
    let cfg_path = dir.join(CONFIG_FILE);
    let mut required: Vec<(&str, PathBuf)> =
        vec![(CONFIG_FILE, cfg_path.clone()), (REPLICAS_FILE, dir.join(REPLICAS_FILE))];
    // The config, when present, tells us which optional artifacts must exist.
    let cfg = if cfg_path.is_file() { Some(ExperimentConfig::from_path(&cfg_path)?) } else { None };
    if let Some(cfg) = &cfg {
        if !cfg.checkpoints.is_empty() {
            required.push((CHECKPOINTS_FILE, dir.join(CHECKPOINTS_FILE)));
        }
        if cfg.analysis.regen {
            required.push((REGEN_FILE, dir.join(REGEN_FILE)));
        }
    }
    let missing: Vec<&str> =
        required.iter().filter(|(_, p)| !p.is_file()).map(|(n, _)| *n).collect();
    if !missing.is_empty() {
        return Err(Error::Analysis(format!(
            "{}: missing artifacts: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let cfg = cfg.expect("config presence checked above");

    let rows: Vec<ReplicaRow> = read_lines(&dir.join(REPLICAS_FILE))?;
    let mut records: Vec<ReplicaRecord> = rows
        .into_iter()
        .map(|r| ReplicaRecord {
            replica: r.replica,
            final_position: r.final_position,
            returns: r.returns,
            last_return: r.last_return,
            checkpoint_positions: Vec::new(),
            regens: r.regens,
            censored_from: r.censored_from,
            increments: Vec::new(),
            k_digest: Some(r.k_seq_digest),
        })
        .collect();

    if !cfg.checkpoints.is_empty() {
        let rows: Vec<CheckpointRow> = read_lines(&dir.join(CHECKPOINTS_FILE))?;
        join_rows(&mut records, rows, CHECKPOINTS_FILE, |rec, row: CheckpointRow| {
            rec.checkpoint_positions = row.positions;
        })?;
    }
    if cfg.analysis.regen {
        let rows: Vec<RegenRow> = read_lines(&dir.join(REGEN_FILE))?;
        join_rows(&mut records, rows, REGEN_FILE, |rec, row: RegenRow| {
            rec.increments = row.increments;
        })?;
    }

    let summary = summarize(records, &summarize_options(&cfg))?;
    Ok((cfg, summary))
}

/// Match sidecar rows to records one-to-one by replica index.
fn join_rows<R: RowId>(
    records: &mut [ReplicaRecord],
    rows: Vec<R>,
    file: &str,
    mut apply: impl FnMut(&mut ReplicaRecord, R),
) -> Result<()> {
    if rows.len() != records.len() {
        return Err(Error::Analysis(format!(
            "{file}: {} rows for {} replicas",
            rows.len(),
            records.len()
        )));
    }
    let mut rows: Vec<R> = rows;
    rows.sort_by_key(|r| r.replica());
    for (rec, row) in records.iter_mut().zip(rows) {
        if rec.replica != row.replica() {
            return Err(Error::Analysis(format!(
                "{file}: no row for replica {}",
                rec.replica
            )));
        }
        apply(rec, row);
    }
    Ok(())
}

trait RowId {
    fn replica(&self) -> u64;
}
impl RowId for CheckpointRow {
    fn replica(&self) -> u64 {
        self.replica
    }
}
impl RowId for RegenRow {
    fn replica(&self) -> u64 {
        self.replica
    }
}
