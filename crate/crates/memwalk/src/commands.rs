//! The command layer: everything the binary can do, minus argument parsing.
//! Each command is an ordinary function so the behaviors are testable
//! without spawning processes.

use crate::config::{law_from_parts, ExperimentConfig, OutputFormat};
use crate::memory::MemoryLaw;
use crate::runner::{self, analyze_dir, run_experiment};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub format: Option<OutputFormat>,
}

/// `run <config>`: simulate the ensemble and persist artifacts.
pub fn cmd_run(config_path: &Path, out: Option<&Path>, ov: &Overrides) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    if let Some(seed) = ov.seed {
        cfg.master_seed = seed;
    }
    if let Some(format) = ov.format {
        cfg.format = format;
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.outputs.clone())
        .ok_or_else(|| {
            Error::Config("outputs: set a directory in the config or pass --out".into())
        })?;
    let summary = run_experiment(&cfg, &out_dir, ov.workers)?;
    println!(
        "wrote {} replicas (horizon {}, d = {}) to {}",
        summary.pooled.replicas,
        cfg.horizon,
        cfg.dimension,
        out_dir.display()
    );
    println!("summary: {}", out_dir.join(runner::SUMMARY_FILE).display());
    Ok(())
}

/// `analyze <dir>`: recompute pooled statistics from artifacts and print
/// them (JSON report or MSD CSV depending on the format).
pub fn cmd_analyze(dir: &Path, format: Option<OutputFormat>) -> Result<()> {
    let (cfg, summary) = analyze_dir(dir)?;
    match format.unwrap_or(cfg.format) {
        OutputFormat::Jsonl => {
            println!("{}", serde_json::to_string_pretty(&summary.pooled)?)
        }
        OutputFormat::Csv => print!("{}", runner::msd_csv(&summary)),
    }
    Ok(())
}

fn parse_params(params: Option<&str>) -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    let Some(params) = params else { return Ok(map) };
    for piece in params.split(',').filter(|p| !p.is_empty()) {
        let (key, val) = piece
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("params: expected key=value (got {piece})")))?;
        let val: f64 = val
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("params: {key}: not a number (got {val})")))?;
        if map.insert(key.trim().to_string(), val).is_some() {
            return Err(Error::Config(format!("params: duplicate key {key}")));
        }
    }
    Ok(map)
}

/// `exact --family F --params k=v,...`: closed-form renewal quantities.
pub fn cmd_exact(family: &str, params: Option<&str>) -> Result<()> {
    let law = law_from_parts(family, &parse_params(params)?)?;
    print!("{}", exact_report(&law)?);
    Ok(())
}

/// The text `exact` prints.
pub fn exact_report(law: &MemoryLaw) -> Result<String> {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(out, "law: {}", serde_json::to_string(law)?).unwrap();
    let mean = law.mean();
    if mean.is_infinite() {
        writeln!(out, "E[K] = inf").unwrap();
        writeln!(out, "diagnosis: P[tau_1 < infinity] = 0 regime (E[K] diverges)").unwrap();
        return Ok(out);
    }
    writeln!(out, "E[K] = {mean}").unwrap();
    let finite: Vec<String> = (1..=4)
        .map(|m| format!("m={m} {}", if law.moment_finite(m) { "yes" } else { "no" }))
        .collect();
    writeln!(out, "E[K^m] finite: {}", finite.join(", ")).unwrap();
    let p_star = law.prob_regen_at_fixed_time();
    writeln!(out, "P[tau_1 = 1] = {p_star}").unwrap();
    if p_star >= 1.0 {
        writeln!(out, "S_1 | S_1 < infinity: no failed candidates (P[tau_1 = 1] = 1)").unwrap();
        return Ok(out);
    }
    writeln!(out, "S_1 | S_1 < infinity:").unwrap();
    let mut cum = 0.0;
    for k in 0..=64u64 {
        let p = law.s1_conditional_pmf(k)?;
        cum += p;
        writeln!(out, "  k={k:<3} pmf={p:<22} cum={cum}").unwrap();
        if cum >= 1.0 - 1e-9 {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    /// Root directory; each cell gets a subdirectory.
    outputs: PathBuf,
    /// A complete experiment config all cells start from.
    base: toml::Table,
    /// Dotted-path key -> list of values; cells are the cartesian product.
    grid: toml::Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCell {
    pub label: String,
    pub params: BTreeMap<String, toml::Value>,
    pub dir: String,
    pub status: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: Vec<ManifestCell>,
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Set `table.path.to.key = value`, creating intermediate tables.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("grid: {path}: {part} is not a table in the base config"))
            })?;
    }
    unreachable!("split yields at least one part")
}

fn cell_dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            '=' => '-',
            ',' => '_',
            c if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' => c,
            _ => '-',
        })
        .collect()
}

#[derive(Debug)]
struct Cell {
    label: String,
    params: BTreeMap<String, toml::Value>,
    config: ExperimentConfig,
}

fn expand_grid(spec: &GridSpec) -> Result<Vec<Cell>> {
    let mut axes: Vec<(&String, &[toml::Value])> = Vec::new();
    for (key, vals) in &spec.grid {
        let arr = vals.as_array().ok_or_else(|| {
            Error::Config(format!("grid: {key}: expected an array of values"))
        })?;
        if arr.is_empty() {
            return Err(Error::Config(format!("grid: {key}: empty value list")));
        }
        axes.push((key, arr));
    }
    axes.sort_by_key(|(k, _)| k.as_str());
    if axes.is_empty() {
        return Err(Error::Config("grid: no axes".into()));
    }
    let mut cells = Vec::new();
    let mut index = vec![0usize; axes.len()];
    loop {
        let mut table = spec.base.clone();
        let mut params = BTreeMap::new();
        let mut label_parts = Vec::new();
        for (slot, &(key, vals)) in index.iter().zip(&axes) {
            let v = &vals[*slot];
            set_path(&mut table, key, v.clone())?;
            params.insert(key.clone(), v.clone());
            label_parts.push(format!("{key}={}", value_label(v)));
        }
        let label = label_parts.join(",");
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("grid cell {label}: {e}")))?;
        config.validate().map_err(|e| Error::Config(format!("grid cell {label}: {e}")))?;
        cells.push(Cell { label, params, config });
        // odometer
        let mut i = axes.len();
        loop {
            if i == 0 {
                return finish_cells(cells);
            }
            i -= 1;
            index[i] += 1;
            if index[i] < axes[i].1.len() {
                break;
            }
            index[i] = 0;
        }
    }
}

fn finish_cells(cells: Vec<Cell>) -> Result<Vec<Cell>> {
    let mut seen = HashSet::new();
    for c in &cells {
        if !seen.insert(c.label.clone()) {
            return Err(Error::Config(format!("grid: duplicate cell label {}", c.label)));
        }
    }
    Ok(cells)
}

/// `sweep <grid>`: run every cell, recording progress in a manifest so an
/// interrupted sweep resumes where it stopped. Returns the number of
/// failed cells.
pub fn cmd_sweep(grid_path: &Path, ov: &Overrides) -> Result<usize> {
    let text = fs::read_to_string(grid_path)
        .map_err(|e| Error::Config(format!("{}: {e}", grid_path.display())))?;
    let spec: GridSpec = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", grid_path.display())))?;
    let cells = expand_grid(&spec)?;

    fs::create_dir_all(&spec.outputs)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", spec.outputs.display()))))?;
    let manifest_path = spec.outputs.join("manifest.json");
    let previous: Manifest = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Analysis(format!("{}: {e}", manifest_path.display())))?
    } else {
        Manifest::default()
    };
    let done: HashSet<&str> = previous
        .cells
        .iter()
        .filter(|c| c.status == "done")
        .map(|c| c.label.as_str())
        .collect();

    let mut manifest = Manifest {
        cells: cells
            .iter()
            .map(|c| ManifestCell {
                label: c.label.clone(),
                params: c.params.clone(),
                dir: cell_dir_name(&c.label),
                status: if done.contains(c.label.as_str()) { "done" } else { "pending" }
                    .to_string(),
            })
            .collect(),
    };
    let write_manifest = |m: &Manifest| -> Result<()> {
        let mut json = serde_json::to_string_pretty(m)?;
        json.push('\n');
        fs::write(&manifest_path, json)?;
        Ok(())
    };
    write_manifest(&manifest)?;

    let mut failures = 0usize;
    for (i, cell) in cells.iter().enumerate() {
        if manifest.cells[i].status == "done" {
            println!("cell {}: done (skipped)", cell.label);
            continue;
        }
        let dir = spec.outputs.join(&manifest.cells[i].dir);
        let mut cfg = cell.config.clone();
        if let Some(seed) = ov.seed {
            cfg.master_seed = seed;
        }
        match run_experiment(&cfg, &dir, ov.workers) {
            Ok(_) => {
                manifest.cells[i].status = "done".into();
                println!("cell {}: done", cell.label);
            }
            Err(e) => {
                failures += 1;
                manifest.cells[i].status = format!("failed: {e}");
                println!("cell {}: failed: {e}", cell.label);
            }
        }
        write_manifest(&manifest)?;
    }
    println!(
        "sweep: {} cells, {} failed, manifest {}",
        cells.len(),
        failures,
        manifest_path.display()
    );
    Ok(failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_report_bernoulli_closed_forms() {
        let law = MemoryLaw::bernoulli(0.5).unwrap();
        let text = exact_report(&law).unwrap();
        assert!(text.contains("P[tau_1 = 1] = 0.5"), "{text}");
        // S_1 | finite is identically 0: one table row reaching cum = 1.
        assert!(text.contains("k=0   pmf=1"), "{text}");
        assert!(!text.contains("k=1 "), "{text}");
    }

    #[test]
    fn exact_report_geometric_value() {
        let law = MemoryLaw::geometric(0.5).unwrap();
        let text = exact_report(&law).unwrap();
        let p: f64 = text
            .lines()
            .find(|l| l.starts_with("P[tau_1 = 1]"))
            .and_then(|l| l.rsplit('=').next())
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        assert!((p - 0.288788).abs() < 1e-6, "{p}");
    }

    #[test]
    fn exact_report_diagnoses_infinite_mean() {
        let law = MemoryLaw::pareto(0.8).unwrap();
        let text = exact_report(&law).unwrap();
        assert!(text.contains("P[tau_1 < infinity] = 0 regime"), "{text}");
        assert!(!text.contains("S_1"), "{text}");
    }

    #[test]
    fn exact_report_degenerate_zero_has_no_failures() {
        let text = exact_report(&MemoryLaw::degenerate(0)).unwrap();
        assert!(text.contains("no failed candidates"), "{text}");
    }

    #[test]
    fn param_strings_parse_and_reject_garbage() {
        let m = parse_params(Some("alpha=2.5")).unwrap();
        assert_eq!(m["alpha"], 2.5);
        let m = parse_params(Some("p=0.5,k=3")).unwrap();
        assert_eq!(m.len(), 2);
        assert!(parse_params(Some("alpha")).is_err());
        assert!(parse_params(Some("alpha=x")).is_err());
        assert!(parse_params(Some("a=1,a=2")).is_err());
        assert!(parse_params(None).unwrap().is_empty());
    }

    #[test]
    fn grid_expansion_is_sorted_and_rejects_duplicates() {
        let spec: GridSpec = toml::from_str(
            r#"
outputs = "unused"
[base]
dimension = 3
delta = 1.0
horizon = 50
replicas = 2
master_seed = 9
[base.memory]
family = "geometric"
p = 0.5
[grid]
delta = [0.5, 2.0]
dimension = [3, 4]
"#,
        )
        .unwrap();
        let cells = expand_grid(&spec).unwrap();
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "delta=0.5,dimension=3",
                "delta=0.5,dimension=4",
                "delta=2.0,dimension=3",
                "delta=2.0,dimension=4"
            ]
        );
        assert_eq!(cells[2].config.delta, 2.0);
        assert_eq!(cells[1].config.dimension, 4);

        let mut dup = spec;
        dup.grid.insert("delta".into(), toml::Value::Array(vec![0.5.into(), 0.5.into()]));
        let err = expand_grid(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn grid_dotted_paths_reach_into_tables() {
        let spec: GridSpec = toml::from_str(
            r#"
outputs = "unused"
[base]
dimension = 3
delta = 1.0
horizon = 50
replicas = 2
master_seed = 9
[base.memory]
family = "geometric"
p = 0.5
[grid]
"memory.p" = [0.25, 0.75]
"#,
        )
        .unwrap();
        let cells = expand_grid(&spec).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].config.memory, MemoryLaw::geometric(0.25).unwrap());
        assert_eq!(cells[1].config.memory, MemoryLaw::geometric(0.75).unwrap());
    }

    #[test]
    fn cell_dir_names_are_path_safe() {
        assert_eq!(cell_dir_name("delta=0.5,dimension=3"), "delta-0.5_dimension-3");
        assert_eq!(cell_dir_name("memory.p=0.25"), "memory.p-0.25");
    }
}
