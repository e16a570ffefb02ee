// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Cohort, VisitRecord};
use crate::error::{Error, Result};

/// Smallest chart: the prompts quote the latest three eGFR values.
pub const DEFAULT_INITIAL_WIDTH: usize = 3;

/// `<patient>_<m>`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WindowId(pub String);

impl WindowId {
    pub fn new(patient_id: &str, index: usize) -> Self {
        WindowId(format!("{patient_id}_{index}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for WindowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A prefix of one patient's visits and the visit right after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionWindow {
    pub patient_id: String,
    /// 1-based window index `m`.
    pub index: usize,
    pub observed: Vec<VisitRecord>,
    pub target: VisitRecord,
    /// Days from the last observed visit to the target.
    pub next_day_diff: i64,
}

impl PredictionWindow {
    pub fn id(&self) -> WindowId {
        WindowId::new(&self.patient_id, self.index)
    }

    pub fn last_observed(&self) -> &VisitRecord {
        self.observed.last().expect("window has observed visits")
    }

    pub fn target_egfr(&self) -> f64 {
        self.target.egfr
    }

    /// Observed eGFR values, oldest first.
    pub fn egfr_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.observed.iter().map(|v| v.egfr)
    }

    /// Day offsets of the observed visits relative to the first one.
    pub fn day_offsets(&self) -> Vec<f64> {
        let first = self.observed[0].date;
        self.observed
            .iter()
            .map(|v| (v.date - first).num_days() as f64)
            .collect()
    }
}

/// Emits `min(M, n_p − w0)` windows per patient; window `m` observes the
/// first `w0 + m − 1` visits and targets the next one.
pub fn generate_windows(cohort: &Cohort, initial_width: usize) -> Result<Vec<PredictionWindow>> {
    if initial_width < 2 {
        return Err(Error::Config(format!(
            "initial window width must be at least 2, got {initial_width}"
        )));
    }
    let m_cap = cohort.median_visit_count();
    let mut out = Vec::new();
    for (profile, visits) in cohort.iter() {
        let n = visits.len();
        let count = n.saturating_sub(initial_width).min(m_cap);
        for m in 1..=count {
            let observed_len = initial_width + m - 1;
            let observed = visits[..observed_len].to_vec();
            let target = visits[observed_len].clone();
            let next_day_diff = (target.date - observed[observed_len - 1].date).num_days();
            out.push(PredictionWindow {
                patient_id: profile.patient_id.clone(),
                index: m,
                observed,
                target,
                next_day_diff,
            });
        }
    }
    Ok(out)
}
