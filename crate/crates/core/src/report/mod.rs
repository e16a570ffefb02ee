// SPDX-License-Identifier: Apache-2.0

//! Per-cell MAE/MAPE, paired significance tests and the two result tables:
//! one row per (system, prompt) with Train/Validation × MAE/MAPE, and one
//! row per prompt for the cross-model ensemble.

pub mod metrics;
pub mod wilcoxon;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselinePrediction, CNN_SYSTEM, RF_SYSTEM};
use crate::cohort::{PatientSplit, PredictionWindow, Split, WindowId};
use crate::ensemble::EnsembleTable;
use crate::error::{Error, Result};
use crate::extract::Prediction;

pub use metrics::{mae, mape, MAPE_EPSILON};
pub use wilcoxon::{paired_test, signed_rank, Method, SignificanceResult, MIN_PAIRS};

pub const ENSEMBLE_LABEL: &str = "ensemble";
pub const NO_PROMPT: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub mae: Option<f64>,
    pub mape: Option<f64>,
    /// Windows that produced a value.
    pub n_windows: usize,
    /// Attempted windows without a value.
    pub n_failed: usize,
}

impl CellMetrics {
    pub fn attempted(&self) -> usize {
        self.n_windows + self.n_failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub system: String,
    pub prompt: String,
    pub train: CellMetrics,
    pub validation: CellMetrics,
}

impl TableRow {
    pub fn cell(&self, split: Split) -> &CellMetrics {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Baseline rows first, then prompts 1..=4 and "ensemble" per backend.
    pub model_table: Vec<TableRow>,
    /// One row per prompt, values from the cross-backend ensemble.
    pub ensemble_table: Vec<TableRow>,
    pub significance: Vec<SignificanceResult>,
}

/// Everything a report is computed from.
pub struct ReportInputs<'a> {
    pub windows: &'a [PredictionWindow],
    pub split: &'a PatientSplit,
    pub predictions: &'a [Prediction],
    pub ensembles: &'a EnsembleTable,
    pub baselines: &'a [BaselinePrediction],
    /// Backend ids in display order.
    pub backends: &'a [String],
    pub templates: &'a [u8],
}

/// Per-window outcome of one system: `None` marks an attempted window
/// with no usable value.
type Outcomes = BTreeMap<WindowId, Option<f64>>;

fn cell(outcomes: &Outcomes, truth: &BTreeMap<WindowId, (Split, f64)>, split: Split) -> Result<CellMetrics> {
    let mut actual = Vec::new();
    let mut predicted = Vec::new();
    let mut failed = 0;
    for (w, v) in outcomes {
        let Some(&(s, target)) = truth.get(w) else {
            return Err(Error::Report(format!("prediction for unknown window {w}")));
        };
        if s != split {
            continue;
        }
        match v {
            Some(v) => {
                actual.push(target);
                predicted.push(*v);
            }
            None => failed += 1,
        }
    }
    if actual.is_empty() {
        return Ok(CellMetrics {
            mae: None,
            mape: None,
            n_windows: 0,
            n_failed: failed,
        });
    }
    Ok(CellMetrics {
        mae: Some(mae(&actual, &predicted)?),
        mape: Some(mape(&actual, &predicted)?),
        n_windows: actual.len(),
        n_failed: failed,
    })
}

fn row(system: &str, prompt: &str, outcomes: &Outcomes, truth: &BTreeMap<WindowId, (Split, f64)>) -> Result<TableRow> {
    Ok(TableRow {
        system: system.into(),
        prompt: prompt.into(),
        train: cell(outcomes, truth, Split::Train)?,
        validation: cell(outcomes, truth, Split::Validation)?,
    })
}

pub fn build_report(inputs: &ReportInputs<'_>) -> Result<MetricsReport> {
    if inputs.predictions.is_empty() && inputs.baselines.is_empty() {
        return Err(Error::Report("no predictions to report".into()));
    }
    let mut truth = BTreeMap::new();
    for w in inputs.windows {
        let s = inputs
            .split
            .of(&w.patient_id)
            .ok_or_else(|| Error::Report(format!("patient {} is in neither split", w.patient_id)))?;
        truth.insert(w.id(), (s, w.target_egfr()));
    }

    // attempted windows per (backend, template)
    let mut attempted: BTreeMap<(&str, u8), BTreeSet<&WindowId>> = BTreeMap::new();
    for p in inputs.predictions {
        attempted.entry((&p.backend_id, p.template_id)).or_default().insert(&p.window_id);
    }
    let repeat: BTreeMap<(&str, u8, &WindowId), f64> = inputs
        .ensembles
        .repeat
        .iter()
        .map(|r| {
            (
                (r.backend_id.as_deref().unwrap_or_default(), r.template_id.unwrap_or_default(), &r.window_id),
                r.value,
            )
        })
        .collect();
    let prompt_ens: BTreeMap<(&str, &WindowId), f64> = inputs
        .ensembles
        .prompt
        .iter()
        .map(|r| ((r.backend_id.as_deref().unwrap_or_default(), &r.window_id), r.value))
        .collect();
    let model_ens: BTreeMap<(u8, &WindowId), f64> = inputs
        .ensembles
        .model
        .iter()
        .map(|r| ((r.template_id.unwrap_or_default(), &r.window_id), r.value))
        .collect();

    let mut systems: Vec<(String, Outcomes)> = Vec::new();
    let mut model_table = Vec::new();
    for name in [RF_SYSTEM, CNN_SYSTEM] {
        let outcomes: Outcomes = inputs
            .baselines
            .iter()
            .filter(|b| b.system == name)
            .map(|b| (b.window_id.clone(), Some(b.value)))
            .collect();
        if !outcomes.is_empty() {
            model_table.push(row(name, NO_PROMPT, &outcomes, &truth)?);
            systems.push((name.to_string(), outcomes));
        }
    }
    for backend in inputs.backends {
        let mut any: BTreeSet<&WindowId> = BTreeSet::new();
        for &t in inputs.templates {
            let windows = attempted.get(&(backend.as_str(), t)).cloned().unwrap_or_default();
            let outcomes: Outcomes = windows
                .iter()
                .map(|w| ((*w).clone(), repeat.get(&(backend.as_str(), t, *w)).copied()))
                .collect();
            model_table.push(row(backend, &t.to_string(), &outcomes, &truth)?);
            any.extend(windows);
        }
        let outcomes: Outcomes = any
            .iter()
            .map(|w| ((*w).clone(), prompt_ens.get(&(backend.as_str(), *w)).copied()))
            .collect();
        model_table.push(row(backend, ENSEMBLE_LABEL, &outcomes, &truth)?);
        systems.push((format!("{backend}/{ENSEMBLE_LABEL}"), outcomes));
    }

    let mut ensemble_table = Vec::new();
    for &t in inputs.templates {
        let windows: BTreeSet<&WindowId> = inputs
            .backends
            .iter()
            .flat_map(|b| attempted.get(&(b.as_str(), t)).into_iter().flatten().copied())
            .collect();
        let outcomes: Outcomes = windows
            .iter()
            .map(|w| ((*w).clone(), model_ens.get(&(t, *w)).copied()))
            .collect();
        ensemble_table.push(row(ENSEMBLE_LABEL, &format!("prompt {t}"), &outcomes, &truth)?);
    }

    let significance = significance_tests(&systems, &truth)?;
    Ok(MetricsReport {
        model_table,
        ensemble_table,
        significance,
    })
}

/// Pairwise tests between all systems, per split, over the windows both
/// systems scored. Pairs with fewer than [`MIN_PAIRS`] shared windows are skipped.
fn significance_tests(
    systems: &[(String, Outcomes)],
    truth: &BTreeMap<WindowId, (Split, f64)>,
) -> Result<Vec<SignificanceResult>> {
    let mut out = Vec::new();
    for split in Split::BOTH {
        for i in 0..systems.len() {
            for j in i + 1..systems.len() {
                let (na, a) = &systems[i];
                let (nb, b) = &systems[j];
                let mut ea = Vec::new();
                let mut eb = Vec::new();
                for (w, va) in a {
                    let (Some(va), Some(Some(vb))) = (va, b.get(w)) else { continue };
                    let (s, target) = truth[w];
                    if s == split {
                        ea.push((w.clone(), (va - target).abs()));
                        eb.push((w.clone(), (vb - target).abs()));
                    }
                }
                if ea.len() >= MIN_PAIRS {
                    out.push(paired_test(na, nb, split.label(), &ea, &eb)?);
                }
            }
        }
    }
    Ok(out)
}

fn num(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(format!("csv: {e}"))
}

fn table_csv(rows: &[TableRow], first: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        first,
        "prompt",
        "train_mae",
        "train_mape",
        "train_n",
        "train_failed",
        "validation_mae",
        "validation_mape",
        "validation_n",
        "validation_failed",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.system.clone(),
            r.prompt.clone(),
            num(r.train.mae),
            num(r.train.mape),
            r.train.n_windows.to_string(),
            r.train.n_failed.to_string(),
            num(r.validation.mae),
            num(r.validation.mape),
            r.validation.n_windows.to_string(),
            r.validation.n_failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

impl MetricsReport {
    pub fn model_table_csv(&self) -> Result<String> {
        table_csv(&self.model_table, "model")
    }

    pub fn ensemble_table_csv(&self) -> Result<String> {
        table_csv(&self.ensemble_table, "system")
    }

    pub fn significance_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "system_a", "system_b", "split", "test", "statistic", "p_value", "n_pairs", "n_nonzero", "method",
        ])
        .map_err(csv_err)?;
        for s in &self.significance {
            let method = match s.method {
                Method::Exact => "exact",
                Method::Normal => "normal",
                Method::NoDifference => "no-difference",
            };
            w.write_record([
                s.system_a.clone(),
                s.system_b.clone(),
                s.split.clone(),
                s.test.clone(),
                s.statistic.to_string(),
                s.p_value.to_string(),
                s.n_pairs.to_string(),
                s.n_nonzero.to_string(),
                method.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    /// Fixed-width text rendering of both tables.
    pub fn to_text(&self, decimals: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Model performance (MAE in mL/min/1.73m², MAPE in %)");
        text_table(&mut s, &self.model_table, "Model", "Prompt", true, decimals);
        let _ = writeln!(s);
        let _ = writeln!(s, "Cross-model ensemble");
        text_table(&mut s, &self.ensemble_table, "", "Prompt", false, decimals);
        if !self.significance.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "Paired Wilcoxon signed-rank tests on absolute errors");
            let _ = writeln!(
                s,
                "{:<28} {:<28} {:<10} {:>7} {:>10} {:>5}",
                "System A", "System B", "Split", "W", "p", "n"
            );
            for t in &self.significance {
                let _ = writeln!(
                    s,
                    "{:<28} {:<28} {:<10} {:>7} {:>10.3e} {:>5}",
                    t.system_a, t.system_b, t.split, t.statistic, t.p_value, t.n_nonzero
                );
            }
        }
        s
    }
}

fn fmt_cell(c: &CellMetrics, d: usize) -> (String, String) {
    match (c.mae, c.mape) {
        (Some(a), Some(p)) => (format!("{a:.d$}"), format!("{p:.d$}")),
        _ => (format!("n/a ({} failed)", c.n_failed), String::new()),
    }
}

fn text_table(s: &mut String, rows: &[TableRow], first: &str, second: &str, with_system: bool, decimals: usize) {
    let width = rows
        .iter()
        .map(|r| r.system.chars().count())
        .chain([first.len()])
        .max()
        .unwrap_or(0)
        .max(6);
    let pw = rows.iter().map(|r| r.prompt.len()).chain([second.len()]).max().unwrap_or(0);
    let lead = |a: &str, b: &str| {
        if with_system {
            format!("{a:<width$}  {b:<pw$}")
        } else {
            format!("{b:<pw$}")
        }
    };
    let _ = writeln!(s, "{}  {:<30}{:<30}", lead("", ""), "Train", "Validation");
    let _ = writeln!(
        s,
        "{}  {:<16}{:<14}{:<16}{:<14}",
        lead(first, second),
        "MAE",
        "MAPE(%)",
        "MAE",
        "MAPE(%)"
    );
    let mut last = "";
    for r in rows {
        let sys = if r.system == last { "" } else { r.system.as_str() };
        last = &r.system;
        let (ta, tp) = fmt_cell(&r.train, decimals);
        let (va, vp) = fmt_cell(&r.validation, decimals);
        let _ = writeln!(s, "{}  {ta:<16}{tp:<14}{va:<16}{vp:<14}", lead(sys, &r.prompt));
    }
}
