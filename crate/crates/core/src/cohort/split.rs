// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Cohort;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub const BOTH: [Split; 2] = [Split::Train, Split::Validation];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Patient-level partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
}

impl PatientSplit {
    pub fn of(&self, patient_id: &str) -> Option<Split> {
        if self.train.contains(patient_id) {
            Some(Split::Train)
        } else if self.validation.contains(patient_id) {
            Some(Split::Validation)
        } else {
            None
        }
    }
}

/// Shuffles patient ids with a seeded ChaCha stream and takes
/// `round(train_fraction · N)` of them for training.
pub fn split_patients(cohort: &Cohort, train_fraction: f64, seed: u64) -> Result<PatientSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n = cohort.patient_count();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 patients to split, got {n}")));
    }
    let mut ids: Vec<String> = cohort.patient_ids().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (train_fraction * n as f64).round() as usize;
    let validation = ids.split_off(n_train);
    Ok(PatientSplit {
        train: ids.into_iter().collect(),
        validation: validation.into_iter().collect(),
    })
}
