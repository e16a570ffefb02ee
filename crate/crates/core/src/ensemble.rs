// SPDX-License-Identifier: Apache-2.0

//! Repeat averaging, prompt ensembles (one backend, all templates) and model
//! ensembles (one template, all backends).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cohort::WindowId;
use crate::error::{Error, Result};
use crate::extract::Prediction;
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    RepeatAverage,
    PromptEnsemble,
    ModelEnsemble,
}

/// One contributing cell. `attempt_index` is set only for raw repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub backend_id: String,
    pub template_id: u8,
    pub attempt_index: Option<u32>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub window_id: WindowId,
    pub scope: Scope,
    /// Fixed backend (repeat average, prompt ensemble).
    pub backend_id: Option<String>,
    /// Fixed template (repeat average, model ensemble).
    pub template_id: Option<u8>,
    pub members: Vec<Member>,
    pub value: f64,
    pub member_count: usize,
}

/// Optional fixed per-backend weights for the model ensemble. Absent
/// backends weigh 1.
pub type BackendWeights = BTreeMap<String, f64>;

pub fn validate_weights(weights: &BackendWeights) -> Result<()> {
    for (b, w) in weights {
        if !(w.is_finite() && *w > 0.0) {
            return Err(Error::Config(format!("ensemble weight for `{b}` must be finite and > 0, got {w}")));
        }
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Mean over the successful repeats of one (window, template, backend) cell.
/// `None` when every repeat failed or the slice is empty.
pub fn average_repeats(predictions: &[&Prediction]) -> Result<Option<EnsembleResult>> {
    let Some(first) = predictions.first() else {
        return Ok(None);
    };
    if predictions.iter().any(|p| {
        p.window_id != first.window_id || p.template_id != first.template_id || p.backend_id != first.backend_id
    }) {
        return Err(Error::Validation("average_repeats needs predictions from a single cell".into()));
    }
    let mut members: Vec<Member> = predictions
        .iter()
        .filter_map(|p| {
            p.value.filter(|_| !p.is_failed()).map(|value| Member {
                backend_id: p.backend_id.clone(),
                template_id: p.template_id,
                attempt_index: Some(p.attempt_index),
                value,
            })
        })
        .collect();
    if members.is_empty() {
        return Ok(None);
    }
    members.sort_by_key(|m| m.attempt_index);
    Ok(Some(EnsembleResult {
        window_id: first.window_id.clone(),
        scope: Scope::RepeatAverage,
        backend_id: Some(first.backend_id.clone()),
        template_id: Some(first.template_id),
        value: mean(members.iter().map(|m| m.value)),
        member_count: members.len(),
        members,
    }))
}

fn cell_member(r: &EnsembleResult) -> Member {
    Member {
        backend_id: r.backend_id.clone().unwrap_or_default(),
        template_id: r.template_id.unwrap_or_default(),
        attempt_index: None,
        value: r.value,
    }
}

fn check_cells(cells: &[&EnsembleResult]) -> Result<()> {
    if cells.iter().any(|c| c.scope != Scope::RepeatAverage) {
        return Err(Error::Validation("ensembles combine repeat-averaged cells only".into()));
    }
    if cells.iter().any(|c| c.window_id != cells[0].window_id) {
        return Err(Error::Validation("ensemble members must share a window".into()));
    }
    Ok(())
}

/// Unweighted mean over the template cells of one (window, backend).
pub fn prompt_ensemble(cells: &[&EnsembleResult]) -> Result<Option<EnsembleResult>> {
    if cells.is_empty() {
        return Ok(None);
    }
    check_cells(cells)?;
    if cells.iter().any(|c| c.backend_id != cells[0].backend_id) {
        return Err(Error::Validation("prompt ensemble members must share a backend".into()));
    }
    let mut members: Vec<Member> = cells.iter().map(|c| cell_member(c)).collect();
    members.sort_by_key(|m| m.template_id);
    Ok(Some(EnsembleResult {
        window_id: cells[0].window_id.clone(),
        scope: Scope::PromptEnsemble,
        backend_id: cells[0].backend_id.clone(),
        template_id: None,
        value: mean(members.iter().map(|m| m.value)),
        member_count: members.len(),
        members,
    }))
}

/// Mean over the backend cells of one (window, template), weighted by
/// `weights` when given.
pub fn model_ensemble(cells: &[&EnsembleResult], weights: Option<&BackendWeights>) -> Result<Option<EnsembleResult>> {
    if cells.is_empty() {
        return Ok(None);
    }
    check_cells(cells)?;
    if cells.iter().any(|c| c.template_id != cells[0].template_id) {
        return Err(Error::Validation("model ensemble members must share a template".into()));
    }
    let mut members: Vec<Member> = cells.iter().map(|c| cell_member(c)).collect();
    members.sort_by(|a, b| a.backend_id.cmp(&b.backend_id));
    let value = match weights {
        None => mean(members.iter().map(|m| m.value)),
        Some(w) => {
            validate_weights(w)?;
            let (mut s, mut total) = (0.0, 0.0);
            for m in &members {
                let wi = w.get(&m.backend_id).copied().unwrap_or(1.0);
                s += wi * m.value;
                total += wi;
            }
            s / total
        }
    };
    Ok(Some(EnsembleResult {
        window_id: cells[0].window_id.clone(),
        scope: Scope::ModelEnsemble,
        backend_id: None,
        template_id: cells[0].template_id,
        value,
        member_count: members.len(),
        members,
    }))
}

/// All three ensemble levels for a prediction table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTable {
    pub repeat: Vec<EnsembleResult>,
    pub prompt: Vec<EnsembleResult>,
    pub model: Vec<EnsembleResult>,
}

impl EnsembleTable {
    pub fn repeat_value(&self, window: &WindowId, backend: &str, template: u8) -> Option<f64> {
        self.repeat
            .iter()
            .find(|r| &r.window_id == window && r.backend_id.as_deref() == Some(backend) && r.template_id == Some(template))
            .map(|r| r.value)
    }
}

type CellKey = (WindowId, String, u8);

pub fn build_ensembles(
    predictions: &[Prediction],
    weights: Option<&BackendWeights>,
    exec: Execution,
) -> Result<EnsembleTable> {
    let mut cells: BTreeMap<CellKey, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        cells
            .entry((p.window_id.clone(), p.backend_id.clone(), p.template_id))
            .or_default()
            .push(p);
    }
    let groups: Vec<&Vec<&Prediction>> = cells.values().collect();
    let repeat: Vec<EnsembleResult> = exec
        .try_map(&groups, |g| average_repeats(g))?
        .into_iter()
        .flatten()
        .collect();

    let mut by_backend: BTreeMap<(&WindowId, &str), Vec<&EnsembleResult>> = BTreeMap::new();
    let mut by_template: BTreeMap<(&WindowId, u8), Vec<&EnsembleResult>> = BTreeMap::new();
    for r in &repeat {
        let b = r.backend_id.as_deref().unwrap_or_default();
        let t = r.template_id.unwrap_or_default();
        by_backend.entry((&r.window_id, b)).or_default().push(r);
        by_template.entry((&r.window_id, t)).or_default().push(r);
    }
    let backend_groups: Vec<&Vec<&EnsembleResult>> = by_backend.values().collect();
    let template_groups: Vec<&Vec<&EnsembleResult>> = by_template.values().collect();
    let prompt = exec
        .try_map(&backend_groups, |g| prompt_ensemble(g))?
        .into_iter()
        .flatten()
        .collect();
    let model = exec
        .try_map(&template_groups, |g| model_ensemble(g, weights))?
        .into_iter()
        .flatten()
        .collect();
    Ok(EnsembleTable { repeat, prompt, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::ExtractionMethod;
    use approx::assert_relative_eq;

    fn pred(b: &str, t: u8, a: u32, v: Option<f64>) -> Prediction {
        Prediction {
            window_id: WindowId::new("P", 1),
            template_id: t,
            backend_id: b.into(),
            attempt_index: a,
            value: v,
            method: if v.is_some() { ExtractionMethod::Pattern } else { ExtractionMethod::Failed },
        }
    }

    fn repeat(b: &str, t: u8, v: f64) -> EnsembleResult {
        average_repeats(&[&pred(b, t, 1, Some(v))]).unwrap().unwrap()
    }

    #[test]
    fn repeat_examples() {
        let ps = [pred("m", 1, 1, Some(40.0)), pred("m", 1, 2, Some(42.0)), pred("m", 1, 3, Some(44.0))];
        let r = average_repeats(&ps.iter().collect::<Vec<_>>()).unwrap().unwrap();
        assert_eq!((r.value, r.member_count), (42.0, 3));
        assert_eq!(repeat("m", 1, 41.5).value, 41.5);
        let ps = [pred("m", 1, 1, Some(40.0)), pred("m", 1, 2, None), pred("m", 1, 3, Some(44.0))];
        let r = average_repeats(&ps.iter().collect::<Vec<_>>()).unwrap().unwrap();
        assert_eq!((r.value, r.member_count), (42.0, 2));
        let ps = [pred("m", 1, 1, None)];
        assert!(average_repeats(&ps.iter().collect::<Vec<_>>()).unwrap().is_none());
    }

    #[test]
    fn repeat_rejects_mixed_cells() {
        let ps = [pred("m", 1, 1, Some(1.0)), pred("m", 2, 1, Some(1.0))];
        assert!(average_repeats(&ps.iter().collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn prompt_examples() {
        let cells: Vec<_> = [50.0, 52.0, 54.0, 56.0]
            .iter()
            .enumerate()
            .map(|(i, v)| repeat("m", i as u8 + 1, *v))
            .collect();
        let r = prompt_ensemble(&cells.iter().collect::<Vec<_>>()).unwrap().unwrap();
        assert_eq!(r.value, 53.0);
        let r = prompt_ensemble(&cells[..3].iter().collect::<Vec<_>>()).unwrap().unwrap();
        assert_eq!((r.value, r.member_count), (52.0, 3));
    }

    #[test]
    fn model_examples_and_weights() {
        let cells: Vec<_> = ["a", "b", "c", "d"]
            .iter()
            .zip([45.0, 47.0, 49.0, 51.0])
            .map(|(b, v)| repeat(b, 2, v))
            .collect();
        let refs: Vec<_> = cells.iter().collect();
        assert_eq!(model_ensemble(&refs, None).unwrap().unwrap().value, 48.0);
        let rev: Vec<_> = cells.iter().rev().collect();
        assert_eq!(model_ensemble(&rev, None).unwrap().unwrap().value, 48.0);
        let w: BackendWeights = [("a".to_string(), 3.0)].into_iter().collect();
        // (3*45 + 47 + 49 + 51) / 6
        assert_relative_eq!(model_ensemble(&refs, Some(&w)).unwrap().unwrap().value, 47.0);
        let bad: BackendWeights = [("a".to_string(), 0.0)].into_iter().collect();
        assert!(model_ensemble(&refs, Some(&bad)).is_err());
    }

    #[test]
    fn build_table_levels() {
        let mut ps = Vec::new();
        for b in ["a", "b"] {
            for t in 1..=4u8 {
                for a in 1..=3 {
                    ps.push(pred(b, t, a, Some(40.0 + t as f64 + if b == "b" { 2.0 } else { 0.0 })));
                }
            }
        }
        // backend b fails every repeat of template 4
        for p in ps.iter_mut().filter(|p| p.backend_id == "b" && p.template_id == 4) {
            p.value = None;
            p.method = ExtractionMethod::Failed;
        }
        let t = build_ensembles(&ps, None, Execution::Parallel).unwrap();
        assert_eq!(t.repeat.len(), 7);
        assert_eq!(t.prompt.len(), 2);
        assert_eq!(t.model.len(), 4);
        let m4 = t.model.iter().find(|m| m.template_id == Some(4)).unwrap();
        assert_eq!((m4.value, m4.member_count), (44.0, 1));
        assert_eq!(t, build_ensembles(&ps, None, Execution::Sequential).unwrap());
    }
}
