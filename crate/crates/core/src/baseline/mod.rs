// SPDX-License-Identifier: Apache-2.0

//! Tabular baselines trained on the same windows as the chart prompts, but
//! from numbers only. Nothing in here touches rendered charts.

pub mod cnn;
pub mod features;
pub mod forest;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PatientSplit, PredictionWindow, Split, WindowId};
use crate::error::{Error, Result};
use crate::par::Execution;

pub use cnn::{Cnn, CnnConfig, RawSample};
pub use features::{feature_dim, feature_names, padded_history, FeatureEncoder};
pub use forest::{ForestParams, MaxFeatures, RandomForest};

pub const RF_SYSTEM: &str = "RF";
pub const CNN_SYSTEM: &str = "1D-CNN";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub forest: ForestParams,
    pub cnn: CnnConfig,
}

/// CNN input length: the longest observed history, capped.
pub fn sequence_length(initial_width: usize, median_visits: usize, cap: usize) -> usize {
    (initial_width + median_visits.saturating_sub(1)).min(cap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub system: String,
    pub window_id: WindowId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModels {
    pub encoder: FeatureEncoder,
    pub seq_len: usize,
    pub forest: RandomForest,
    pub cnn: Cnn,
}

impl BaselineModels {
    fn rows(&self, cohort: &Cohort, w: &PredictionWindow) -> Result<(Vec<f64>, Vec<f64>)> {
        let profile = cohort
            .profile(&w.patient_id)
            .ok_or_else(|| Error::Validation(format!("no profile for patient {}", w.patient_id)))?;
        Ok((self.encoder.encode(w, profile)?, padded_history(w, self.seq_len)))
    }

    pub fn predict(&self, cohort: &Cohort, windows: &[PredictionWindow], exec: Execution) -> Result<Vec<BaselinePrediction>> {
        let per_window = exec.try_map(windows, |w| -> Result<[BaselinePrediction; 2]> {
            let (x, seq) = self.rows(cohort, w)?;
            Ok([
                BaselinePrediction {
                    system: RF_SYSTEM.into(),
                    window_id: w.id(),
                    value: self.forest.predict(&x)?,
                },
                BaselinePrediction {
                    system: CNN_SYSTEM.into(),
                    window_id: w.id(),
                    value: self.cnn.predict(&seq, &x)?,
                },
            ])
        })?;
        let (mut rf, mut cnn): (Vec<_>, Vec<_>) = per_window.into_iter().map(|[a, b]| (a, b)).unzip();
        rf.append(&mut cnn);
        Ok(rf)
    }
}

/// Fits both baselines on training-split windows and predicts every window.
pub fn train_baselines(
    cohort: &Cohort,
    windows: &[PredictionWindow],
    split: &PatientSplit,
    initial_width: usize,
    config: &BaselineConfig,
    seed: u64,
    exec: Execution,
) -> Result<(BaselineModels, Vec<BaselinePrediction>)> {
    let train: Vec<&PredictionWindow> = windows
        .iter()
        .filter(|w| split.of(&w.patient_id) == Some(Split::Train))
        .collect();
    if train.is_empty() {
        return Err(Error::Training("no training windows".into()));
    }
    let seq_len = sequence_length(initial_width, cohort.median_visit_count(), config.cnn.max_seq_len);
    let encoder = FeatureEncoder::fit(&train);
    let mut x = Vec::with_capacity(train.len());
    let mut samples = Vec::with_capacity(train.len());
    for w in &train {
        let profile = cohort
            .profile(&w.patient_id)
            .ok_or_else(|| Error::Validation(format!("no profile for patient {}", w.patient_id)))?;
        let f = encoder.encode(w, profile)?;
        samples.push(RawSample {
            seq: padded_history(w, seq_len),
            stat: f.clone(),
            target: w.target_egfr(),
        });
        x.push(f);
    }
    let y: Vec<f64> = train.iter().map(|w| w.target_egfr()).collect();
    let (forest, cnn) = exec.join(
        || RandomForest::train(&x, &y, &config.forest, seed, exec),
        || Cnn::train(&samples, &config.cnn, seed),
    );
    let models = BaselineModels {
        encoder,
        seq_len,
        forest: forest?,
        cnn: cnn?,
    };
    let preds = models.predict(cohort, windows, exec)?;
    Ok((models, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, generate_windows, split_patients, SyntheticSpec, Trajectory};

    #[test]
    fn sequence_length_caps() {
        assert_eq!(sequence_length(3, 11, 12), 12);
        assert_eq!(sequence_length(3, 5, 12), 7);
    }

    #[test]
    fn exact_linear_cohort_cnn_within_five_percent() {
        let spec = SyntheticSpec {
            trajectory: Trajectory::Linear { slope_per_90_days: -1.0 },
            ..Default::default()
        };
        let cohort = generate_synthetic_cohort(&spec, 17).unwrap();
        let windows = generate_windows(&cohort, 3).unwrap();
        let split = split_patients(&cohort, 0.7, 5).unwrap();
        let cfg = BaselineConfig {
            forest: ForestParams { n_trees: 30, ..Default::default() },
            ..Default::default()
        };
        let (_, preds) = train_baselines(&cohort, &windows, &split, 3, &cfg, 9, Execution::Parallel).unwrap();
        let val: Vec<&PredictionWindow> = windows
            .iter()
            .filter(|w| split.of(&w.patient_id) == Some(Split::Validation))
            .collect();
        let mape = |system: &str| {
            val.iter()
                .map(|w| {
                    let p = preds.iter().find(|p| p.system == system && p.window_id == w.id()).unwrap();
                    (p.value - w.target_egfr()).abs() / w.target_egfr()
                })
                .sum::<f64>()
                / val.len() as f64
                * 100.0
        };
        assert!(mape(CNN_SYSTEM) <= 5.0, "cnn mape {}", mape(CNN_SYSTEM));
        assert!(mape(RF_SYSTEM).is_finite());
        assert_eq!(preds.len(), 2 * windows.len());
    }
}
