//! Aggregation of prompt records into per-cell and per-(method, budget) rows.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use veil_core::gating::Mode;

use crate::run::{Cell, HarnessError, Method, PromptRecord, Status};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModeHistogram {
    pub cloud: usize,
    pub collab: usize,
    pub local: usize,
}

impl ModeHistogram {
    fn add(&mut self, mode: Mode) {
        match mode {
            Mode::Cloud => self.cloud += 1,
            Mode::Collab => self.collab += 1,
            Mode::Local => self.local += 1,
        }
    }
}

/// PASS iff no flagged original surface reached a cloud payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LeakageAudit {
    pub flagged_prompts: usize,
    pub leaking_prompts: usize,
    pub leaked_surfaces: usize,
    pub pass: bool,
}

impl LeakageAudit {
    pub fn of(records: &[PromptRecord]) -> Self {
        let leaking = records.iter().filter(|r| r.leaked_surfaces > 0).count();
        Self {
            flagged_prompts: records.iter().filter(|r| r.flagged_entities > 0).count(),
            leaking_prompts: leaking,
            leaked_surfaces: records.iter().map(|r| r.leaked_surfaces).sum(),
            pass: leaking == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: Method,
    pub epsilon_total: f64,
    pub seed: u64,
    pub prompts: usize,
    pub served: usize,
    pub backend_errors: usize,
    pub privacy_faults: usize,
    pub other_errors: usize,
    /// Routed modes; adaptive only.
    pub modes: Option<ModeHistogram>,
    pub cloud_calls: usize,
    pub edge_calls: usize,
    /// Means over served prompts.
    pub mean_latency_ms: f64,
    pub mean_cloud_tokens: f64,
    pub mean_edge_tokens: f64,
    pub mean_total_tokens: f64,
    pub leakage: LeakageAudit,
    /// Agreement of routed mode with `expected_mode`; adaptive only.
    pub routing_accuracy: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (n, sum) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl CellSummary {
    pub fn of(cell: Cell, records: &[PromptRecord]) -> Self {
        let served: Vec<&PromptRecord> =
            records.iter().filter(|r| r.status == Status::Ok).collect();
        let count = |s: Status| records.iter().filter(|r| r.status == s).count();
        let adaptive = cell.method == Method::Adaptive;
        let modes = adaptive.then(|| {
            let mut h = ModeHistogram::default();
            records.iter().filter_map(|r| r.mode).for_each(|m| h.add(m));
            h
        });
        let routing_accuracy = adaptive
            .then(|| {
                let labelled: Vec<_> = records
                    .iter()
                    .filter(|r| r.expected_mode.is_some())
                    .collect();
                let hits = labelled
                    .iter()
                    .filter(|r| r.mode == r.expected_mode)
                    .count();
                (!labelled.is_empty()).then(|| hits as f64 / labelled.len() as f64)
            })
            .flatten();
        Self {
            method: cell.method,
            epsilon_total: cell.epsilon_total,
            seed: cell.seed,
            prompts: records.len(),
            served: served.len(),
            backend_errors: count(Status::BackendError),
            privacy_faults: count(Status::PrivacyFault),
            other_errors: count(Status::Error),
            modes,
            cloud_calls: records.iter().map(|r| r.cloud_calls).sum(),
            edge_calls: records.iter().map(|r| r.edge_calls).sum(),
            mean_latency_ms: mean(served.iter().map(|r| r.latency_ms)),
            mean_cloud_tokens: mean(served.iter().map(|r| r.cloud_tokens.total() as f64)),
            mean_edge_tokens: mean(served.iter().map(|r| r.edge_tokens.total() as f64)),
            mean_total_tokens: mean(served.iter().map(|r| r.total_tokens() as f64)),
            leakage: LeakageAudit::of(records),
            routing_accuracy,
        }
    }
}

/// One (method, budget) row aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub epsilon_total: f64,
    pub seeds: usize,
    pub prompts: usize,
    pub served_mean: f64,
    pub failed_mean: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_std: f64,
    pub cloud_tokens_mean: f64,
    pub edge_tokens_mean: f64,
    pub total_tokens_mean: f64,
    pub total_tokens_std: f64,
    pub mode_cloud: Option<f64>,
    pub mode_collab: Option<f64>,
    pub mode_local: Option<f64>,
    /// PASS only if every seed passed.
    pub leakage: &'static str,
    pub leaking_prompts: usize,
    pub routing_accuracy: Option<f64>,
}

impl SummaryRow {
    fn of(cells: &[&CellSummary]) -> Self {
        let first = cells[0];
        let lat: Vec<f64> = cells.iter().map(|c| c.mean_latency_ms).collect();
        let tok: Vec<f64> = cells.iter().map(|c| c.mean_total_tokens).collect();
        let over = |f: &dyn Fn(&CellSummary) -> f64| mean(cells.iter().map(|c| f(c)));
        let mode = |f: fn(&ModeHistogram) -> usize| {
            first
                .modes
                .map(|_| over(&|c| c.modes.as_ref().map_or(0.0, |h| f(h) as f64)))
        };
        Self {
            method: first.method,
            epsilon_total: first.epsilon_total,
            seeds: cells.len(),
            prompts: first.prompts,
            served_mean: over(&|c| c.served as f64),
            failed_mean: over(&|c| (c.prompts - c.served) as f64),
            latency_ms_mean: mean(lat.iter().copied()),
            latency_ms_std: stddev(&lat),
            cloud_tokens_mean: over(&|c| c.mean_cloud_tokens),
            edge_tokens_mean: over(&|c| c.mean_edge_tokens),
            total_tokens_mean: mean(tok.iter().copied()),
            total_tokens_std: stddev(&tok),
            mode_cloud: mode(|h| h.cloud),
            mode_collab: mode(|h| h.collab),
            mode_local: mode(|h| h.local),
            leakage: if cells.iter().all(|c| c.leakage.pass) {
                "PASS"
            } else {
                "FAIL"
            },
            leaking_prompts: cells.iter().map(|c| c.leakage.leaking_prompts).sum(),
            routing_accuracy: first
                .routing_accuracy
                .map(|_| over(&|c| c.routing_accuracy.unwrap_or(0.0))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub records: Vec<PromptRecord>,
    pub cells: Vec<CellSummary>,
    pub rows: Vec<SummaryRow>,
}

impl RunReport {
    /// Cells must arrive in grid order (seeds innermost).
    pub fn assemble(results: Vec<(Cell, Vec<PromptRecord>)>) -> Self {
        let cells: Vec<CellSummary> = results
            .iter()
            .map(|(c, r)| CellSummary::of(*c, r))
            .collect();
        let mut rows = Vec::new();
        let mut i = 0;
        while i < cells.len() {
            let key = (cells[i].method, cells[i].epsilon_total.to_bits());
            let group: Vec<&CellSummary> = cells[i..]
                .iter()
                .take_while(|c| (c.method, c.epsilon_total.to_bits()) == key)
                .collect();
            i += group.len();
            rows.push(SummaryRow::of(&group));
        }
        Self {
            records: results.into_iter().flat_map(|(_, r)| r).collect(),
            cells,
            rows,
        }
    }

    pub fn row(&self, method: Method, epsilon_total: f64) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.epsilon_total == epsilon_total)
    }

    pub fn records_jsonl(&self) -> String {
        jsonl(&self.records)
    }

    pub fn cells_jsonl(&self) -> String {
        jsonl(&self.cells)
    }

    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("row serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>5} {:>8} {:>11} {:>9} {:>17} {:>7} {:>8}",
            "method",
            "eps",
            "seeds",
            "served",
            "latency_ms",
            "tokens",
            "cloud/collab/local",
            "leak",
            "routing"
        );
        for r in &self.rows {
            let modes = match (r.mode_cloud, r.mode_collab, r.mode_local) {
                (Some(a), Some(b), Some(c)) => format!("{a:.0}/{b:.0}/{c:.0}"),
                _ => "-".into(),
            };
            let routing = r.routing_accuracy.map_or("-".into(), |a| format!("{a:.3}"));
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>5} {:>8.1} {:>11.1} {:>9.1} {:>17} {:>7} {:>8}",
                r.method.as_str(),
                r.epsilon_total,
                r.seeds,
                r.served_mean,
                r.latency_ms_mean,
                r.total_tokens_mean,
                modes,
                r.leakage,
                routing
            );
        }
        let _ = writeln!(
            s,
            "latency is backend time (simulated for mocks); tokens are the energy proxy"
        );
        s
    }

    /// Writes `records.jsonl`, `cells.jsonl`, `summary.csv` and `summary.txt`.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |e: std::io::Error| HarnessError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        for (name, body) in [
            ("records.jsonl", self.records_jsonl()),
            ("cells.jsonl", self.cells_jsonl()),
            ("summary.csv", self.summary_csv()),
            ("summary.txt", self.summary_text()),
        ] {
            std::fs::write(dir.join(name), body).map_err(io)?;
        }
        Ok(())
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("record serializes") + "\n")
        .collect()
}
