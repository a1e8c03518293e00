use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::dataset::Dataset;
use super::eval::{evaluate, mean, Cell, EvalReport};
use super::tune::{tune, Method, TuneConfig, TunedModel};
use crate::backbone::BackboneCheckpoint;
use crate::corruption::{CorruptionSpec, Family};
use crate::error::{Error, Result};

/// One table row: a (method, seed) run, or the across-seed mean when
/// `seed` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub method: Method,
    pub seed: Option<u64>,
    pub clean: f64,
    pub cells: Vec<Cell>,
}

impl AblationRow {
    fn from_report(method: Method, r: &EvalReport) -> Self {
        Self {
            method,
            seed: Some(r.seed),
            clean: r.clean,
            cells: r.cells.clone(),
        }
    }

    pub fn family_average(&self, family: Family) -> Option<f64> {
        mean(self.cells.iter().filter(|c| c.family == family).map(|c| c.accuracy))
    }

    pub fn seed_label(&self) -> String {
        self.seed.map_or_else(|| "mean".to_string(), |s| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub grid: Vec<CorruptionSpec>,
    pub rows: Vec<AblationRow>,
}

fn families_of(grid: &[CorruptionSpec]) -> Vec<Family> {
    let mut out: Vec<Family> = Vec::new();
    for s in grid {
        if !out.contains(&s.family) {
            out.push(s.family);
        }
    }
    out
}

fn mean_row(method: Method, rows: &[&AblationRow]) -> AblationRow {
    let clean = mean(rows.iter().map(|r| r.clean)).unwrap_or(0.0);
    let cells = rows[0]
        .cells
        .iter()
        .enumerate()
        .map(|(j, c)| Cell {
            accuracy: mean(rows.iter().map(|r| r.cells[j].accuracy)).unwrap_or(0.0),
            ..*c
        })
        .collect();
    AblationRow {
        method,
        seed: None,
        clean,
        cells,
    }
}

impl AblationReport {
    /// Builds per-seed rows plus one mean row per method.
    pub fn from_reports(grid: &[CorruptionSpec], runs: &[(Method, EvalReport)]) -> Self {
        let mut rows = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for (m, _) in runs {
            if !methods.contains(m) {
                methods.push(*m);
            }
        }
        for m in methods {
            let per_seed: Vec<AblationRow> = runs
                .iter()
                .filter(|(rm, _)| *rm == m)
                .map(|(_, r)| AblationRow::from_report(m, r))
                .collect();
            let refs: Vec<&AblationRow> = per_seed.iter().collect();
            let mean = mean_row(m, &refs);
            rows.extend(per_seed);
            rows.push(mean);
        }
        Self {
            grid: grid.to_vec(),
            rows,
        }
    }

    pub fn families(&self) -> Vec<Family> {
        families_of(&self.grid)
    }

    pub fn row(&self, method: Method, seed: Option<u64>) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method && r.seed == seed)
    }

    /// Column names in output order: identifiers, clean, then each family's
    /// cells followed by its average.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec!["method".to_string(), "seed".to_string(), "clean".to_string()];
        for f in self.families() {
            for s in self.grid.iter().filter(|s| s.family == f) {
                cols.push(format!("{f}:{}", s.intensity));
            }
            cols.push(format!("{f}:avg"));
        }
        cols
    }

    fn values(&self, row: &AblationRow) -> Vec<f64> {
        let mut out = vec![row.clean];
        for f in self.families() {
            out.extend(row.cells.iter().filter(|c| c.family == f).map(|c| c.accuracy));
            out.push(row.family_average(f).unwrap_or(0.0));
        }
        out
    }

    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns())
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
        for row in &self.rows {
            let mut rec = vec![row.method.name().to_string(), row.seed_label()];
            rec.extend(self.values(row).into_iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv: {e}")))
    }

    /// Fixed-width table in percent, mean rows only.
    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "method");
        for c in &cols[2..] {
            let _ = write!(out, " {:>18}", c);
        }
        out.push('\n');
        for row in self.rows.iter().filter(|r| r.seed.is_none()) {
            let _ = write!(out, "{:<12}", row.method.name());
            for v in self.values(row) {
                let _ = write!(out, " {:>18.2}", v * 100.0);
            }
            out.push('\n');
        }
        out
    }
}

/// Everything one ablation run produced.
pub struct AblationRun {
    pub report: AblationReport,
    pub models: Vec<TunedModel>,
    pub evals: Vec<(Method, EvalReport)>,
}

/// Tunes and evaluates every method for every seed, in method-major order.
pub fn run_ablation_suite(
    ckpt: &BackboneCheckpoint,
    train: &Dataset,
    test: &Dataset,
    base: &TuneConfig,
    methods: &[Method],
    seeds: &[u64],
    grid: &[CorruptionSpec],
) -> Result<AblationRun> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("ablation needs at least one method and one seed".into()));
    }
    let mut models = Vec::new();
    let mut evals = Vec::new();
    for &method in methods {
        for &seed in seeds {
            let cfg = TuneConfig {
                method,
                seed,
                ..base.clone()
            };
            let model = tune(ckpt, train, &cfg)?;
            evals.push((method, evaluate(&model, ckpt, test, grid)?));
            models.push(model);
        }
    }
    Ok(AblationRun {
        report: AblationReport::from_reports(grid, &evals),
        models,
        evals,
    })
}

/// Run manifest: the fully resolved configuration plus content hashes.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub hashes: BTreeMap<String, String>,
    pub overrides: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            config,
            hashes: BTreeMap::new(),
            overrides: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(seed: u64, base: f64) -> EvalReport {
        let grid = CorruptionSpec::default_grid(0);
        EvalReport {
            method: "vpt".into(),
            seed,
            config_hash: String::new(),
            clean: base,
            cells: grid
                .iter()
                .enumerate()
                .map(|(i, s)| Cell {
                    family: s.family,
                    intensity: s.intensity,
                    accuracy: base - 0.01 * i as f64,
                })
                .collect(),
        }
    }

    fn sample() -> AblationReport {
        let grid = CorruptionSpec::default_grid(0);
        let runs = vec![
            (Method::Vpt, report(1, 0.9)),
            (Method::Vpt, report(2, 0.7)),
            (Method::SpikeNvpt, report(1, 0.8)),
        ];
        AblationReport::from_reports(&grid, &runs)
    }

    #[test]
    fn layout_matches_table_structure() {
        let r = sample();
        let cols = r.columns();
        assert_eq!(cols.len(), 2 + 1 + 16 + 4);
        assert_eq!(cols[3], "gaussian_noise:0.1");
        assert_eq!(cols[7], "gaussian_noise:avg");
        assert_eq!(r.rows.len(), 5);
        assert!(r.row(Method::Vpt, None).is_some());
    }

    #[test]
    fn mean_row_averages_seeds() {
        let r = sample();
        let m = r.row(Method::Vpt, None).unwrap();
        assert_eq!(m.clean, (0.9 + 0.7) / 2.0);
        let avg = m.family_average(Family::Jpeg).unwrap();
        let cells: Vec<f64> = m.cells.iter().filter(|c| c.family == Family::Jpeg).map(|c| c.accuracy).collect();
        assert_eq!(avg, cells.iter().sum::<f64>() / 4.0);
    }

    #[test]
    fn csv_values_round_trip_exactly() {
        let r = sample();
        let csv_text = r.to_csv().unwrap();
        let mut rd = csv::Reader::from_reader(csv_text.as_bytes());
        for (rec, row) in rd.records().zip(&r.rows) {
            let rec = rec.unwrap();
            let clean: f64 = rec[2].parse().unwrap();
            assert_eq!(clean, row.clean);
        }
        assert_eq!(csv_text, sample().to_csv().unwrap());
        assert!(r.to_text().contains("spike_nvpt"));
    }

    #[test]
    fn manifest_serializes() {
        let mut m = RunManifest::new("tune", BTreeMap::from([("lr".to_string(), "0.05".to_string())]));
        m.hashes.insert("dataset".into(), "abc".into());
        let j = m.to_json().unwrap();
        assert!(j.contains("\"command\": \"tune\""));
    }
}
