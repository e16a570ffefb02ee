// SPDX-License-Identifier: Apache-2.0

//! Tabular encoding of a prediction window. Only observed visits and the
//! patient profile are read; the target visit never is.

use serde::{Deserialize, Serialize};

use crate::cohort::{Comorbidity, Medication, PatientProfile, PredictionWindow, VisitRecord};
use crate::error::{Error, Result};

pub const LAST_EGFR: usize = 3;
const LABS: [&str; 3] = ["bun", "phosphorus", "uacr"];

/// Column names in encoding order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = (1..=LAST_EGFR).rev().map(|i| format!("egfr_lag{i}")).collect();
    for lab in LABS {
        names.push(lab.to_string());
        names.push(format!("{lab}_missing"));
    }
    names.extend(["next_day_diff", "age", "gender", "ckd_stage"].map(String::from));
    names.extend(Comorbidity::ALL.iter().map(|c| format!("comorbidity_{}", c.column())));
    names.extend(Medication::ALL.iter().map(|m| format!("medication_{}", m.column())));
    names.push("charlson_index".into());
    names
}

pub fn feature_dim() -> usize {
    LAST_EGFR + 2 * LABS.len() + 4 + Comorbidity::ALL.len() + Medication::ALL.len() + 1
}

fn labs(v: &VisitRecord) -> [Option<f64>; 3] {
    [v.bun, v.phosphorus, v.uacr]
}

/// Last `len` eGFR values, most recent last, left-padded with the earliest.
pub fn padded_history(window: &PredictionWindow, len: usize) -> Vec<f64> {
    let hist: Vec<f64> = window.egfr_history().collect();
    let first = hist[0];
    let take = hist.len().min(len);
    let mut out = vec![first; len - take];
    out.extend_from_slice(&hist[hist.len() - take..]);
    out
}

/// Encoder holding the training-split lab means used as missing sentinels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub lab_sentinels: [f64; 3],
}

impl FeatureEncoder {
    /// Lab means over the last observed visit of each training window.
    pub fn fit(train: &[&PredictionWindow]) -> Self {
        let mut sentinels = [0.0; 3];
        for (i, s) in sentinels.iter_mut().enumerate() {
            let vals: Vec<f64> = train.iter().filter_map(|w| labs(w.last_observed())[i]).collect();
            if !vals.is_empty() {
                *s = vals.iter().sum::<f64>() / vals.len() as f64;
            }
        }
        FeatureEncoder { lab_sentinels: sentinels }
    }

    pub fn encode(&self, window: &PredictionWindow, profile: &PatientProfile) -> Result<Vec<f64>> {
        if profile.patient_id != window.patient_id {
            return Err(Error::Validation(format!(
                "profile {} does not belong to window {}",
                profile.patient_id,
                window.id()
            )));
        }
        let mut f = padded_history(window, LAST_EGFR);
        for (lab, sentinel) in labs(window.last_observed()).into_iter().zip(self.lab_sentinels) {
            match lab {
                Some(v) => f.extend([v, 0.0]),
                None => f.extend([sentinel, 1.0]),
            }
        }
        f.push(window.next_day_diff as f64);
        f.push(profile.age_at_baseline);
        f.push(profile.gender.code());
        f.push(profile.ckd_stage as f64);
        f.extend(Comorbidity::ALL.iter().map(|c| profile.comorbidities.contains(c) as u8 as f64));
        f.extend(Medication::ALL.iter().map(|m| profile.medications.contains(m) as u8 as f64));
        f.push(profile.charlson_index as f64);
        debug_assert_eq!(f.len(), feature_dim());
        Ok(f)
    }
}
