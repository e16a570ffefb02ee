// SPDX-License-Identifier: Apache-2.0

//! Longitudinal patient data: ingestion, exclusion rules, prediction windows,
//! patient-level splits and a synthetic cohort generator.

mod ingest;
mod preprocess;
mod split;
mod synthetic;
pub mod vocab;
mod windows;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use ingest::{ingest_cohort, ingest_files, write_profiles_csv, write_visits_csv};
pub use preprocess::{preprocess, write_audit_csv, AuditEntity, AuditReason, AuditRow, MAX_GAP_DAYS, MIN_VISITS};
pub use split::{split_patients, PatientSplit, Split};
pub use synthetic::{generate_synthetic_cohort, SyntheticSpec, Trajectory, VisitCount};
pub use vocab::{Comorbidity, Drinking, Gender, Medication, Smoking};
pub use windows::{generate_windows, PredictionWindow, WindowId, DEFAULT_INITIAL_WIDTH};

/// One clinic visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    /// mL/min/1.73m²
    pub egfr: f64,
    /// mg/dL
    pub bun: Option<f64>,
    /// mg/dL
    pub phosphorus: Option<f64>,
    /// mg/g
    pub uacr: Option<f64>,
    pub in_hospitalization: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    pub gender: Gender,
    pub age_at_baseline: f64,
    pub ckd_cause: String,
    pub smoking: Smoking,
    pub drinking_frequency: Drinking,
    pub ckd_stage: u8,
    pub charlson_index: u32,
    pub comorbidities: BTreeSet<Comorbidity>,
    pub medications: BTreeSet<Medication>,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.ckd_stage) {
            return Err(Error::Validation(format!(
                "patient `{}`: ckd_stage {} outside 1..=5",
                self.patient_id, self.ckd_stage
            )));
        }
        if !self.age_at_baseline.is_finite() || self.age_at_baseline < 0.0 {
            return Err(Error::Validation(format!(
                "patient `{}`: invalid age {}",
                self.patient_id, self.age_at_baseline
            )));
        }
        Ok(())
    }
}

/// Immutable set of patients with their date-ordered visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    profiles: BTreeMap<String, PatientProfile>,
    visits: BTreeMap<String, Vec<VisitRecord>>,
    median_visit_count: usize,
}

impl Cohort {
    /// Builds a cohort, sorting each patient's visits by date.
    ///
    /// Every patient with visits needs a profile; profiles without visits are
    /// dropped. Duplicate (patient, date) pairs are rejected.
    pub fn new(profiles: Vec<PatientProfile>, visits: Vec<VisitRecord>) -> Result<Self> {
        let mut by_patient: BTreeMap<String, Vec<VisitRecord>> = BTreeMap::new();
        for v in visits {
            if !(v.egfr.is_finite() && v.egfr > 0.0) {
                return Err(Error::Validation(format!(
                    "patient `{}` on {}: egfr must be positive, got {}",
                    v.patient_id, v.date, v.egfr
                )));
            }
            by_patient.entry(v.patient_id.clone()).or_default().push(v);
        }
        for (pid, vs) in by_patient.iter_mut() {
            vs.sort_by_key(|v| v.date);
            if let Some(w) = vs.windows(2).find(|w| w[0].date == w[1].date) {
                return Err(Error::DuplicateVisit {
                    patient_id: pid.clone(),
                    date: w[0].date.to_string(),
                });
            }
        }
        let mut profile_map = BTreeMap::new();
        for p in profiles {
            p.validate()?;
            if profile_map.contains_key(&p.patient_id) {
                return Err(Error::Validation(format!("duplicate profile for patient `{}`", p.patient_id)));
            }
            profile_map.insert(p.patient_id.clone(), p);
        }
        if let Some(pid) = by_patient.keys().find(|pid| !profile_map.contains_key(*pid)) {
            return Err(Error::Validation(format!("patient `{pid}` has visits but no profile")));
        }
        profile_map.retain(|pid, _| by_patient.contains_key(pid));
        Self::from_sorted(profile_map, by_patient)
    }

    pub(crate) fn from_sorted(
        profiles: BTreeMap<String, PatientProfile>,
        visits: BTreeMap<String, Vec<VisitRecord>>,
    ) -> Result<Self> {
        if visits.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let median_visit_count = lower_median(visits.values().map(Vec::len));
        Ok(Cohort {
            profiles,
            visits,
            median_visit_count,
        })
    }

    /// N
    pub fn patient_count(&self) -> usize {
        self.visits.len()
    }

    /// M: lower median of per-patient visit counts.
    pub fn median_visit_count(&self) -> usize {
        self.median_visit_count
    }

    pub fn total_visits(&self) -> usize {
        self.visits.values().map(Vec::len).sum()
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &str> {
        self.visits.keys().map(String::as_str)
    }

    pub fn visits(&self, patient_id: &str) -> Option<&[VisitRecord]> {
        self.visits.get(patient_id).map(Vec::as_slice)
    }

    pub fn profile(&self, patient_id: &str) -> Option<&PatientProfile> {
        self.profiles.get(patient_id)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &PatientProfile> {
        self.profiles.values()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PatientProfile, &[VisitRecord])> {
        self.visits
            .iter()
            .map(|(pid, vs)| (&self.profiles[pid], vs.as_slice()))
    }

    /// Stable content digest (hex SHA-256 of the canonical JSON form).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("cohort serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cohort: N={} patients, {} visits, M={}",
            self.patient_count(),
            self.total_visits(),
            self.median_visit_count
        )
    }
}

pub(crate) fn lower_median(counts: impl Iterator<Item = usize>) -> usize {
    let mut v: Vec<usize> = counts.collect();
    if v.is_empty() {
        return 0;
    }
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn profile(pid: &str) -> PatientProfile {
        PatientProfile {
            patient_id: pid.to_string(),
            gender: Gender::Female,
            age_at_baseline: 63.1,
            ckd_cause: "diabetic nephropathy".to_string(),
            smoking: Smoking::Never,
            drinking_frequency: Drinking::Occasional,
            ckd_stage: 3,
            charlson_index: 2,
            comorbidities: [Comorbidity::DiabetesMellitus, Comorbidity::Hypertension]
                .into_iter()
                .collect(),
            medications: [Medication::Statins].into_iter().collect(),
        }
    }

    pub fn visit(pid: &str, date: NaiveDate, egfr: f64) -> VisitRecord {
        VisitRecord {
            patient_id: pid.to_string(),
            date,
            egfr,
            bun: Some(20.0),
            phosphorus: Some(4.0),
            uacr: Some(300.0),
            in_hospitalization: false,
        }
    }

    pub fn day(offset: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(offset)
    }

    /// Patient with visits at the given day offsets and a linear eGFR.
    pub fn patient_at_days(pid: &str, days: &[i64]) -> Vec<VisitRecord> {
        days.iter()
            .map(|&d| visit(pid, day(d), 60.0 - 0.01 * d as f64))
            .collect()
    }

    pub fn cohort_with_counts(counts: &[usize]) -> Cohort {
        let mut profiles = vec![];
        let mut visits = vec![];
        for (i, &n) in counts.iter().enumerate() {
            let pid = format!("P{i:02}");
            profiles.push(profile(&pid));
            let days: Vec<i64> = (0..n as i64).map(|k| k * 90).collect();
            visits.extend(patient_at_days(&pid, &days));
        }
        Cohort::new(profiles, visits).unwrap()
    }
}
