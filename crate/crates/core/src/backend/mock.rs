// SPDX-License-Identifier: Apache-2.0

//! Offline test doubles standing in for hosted multimodal models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::PredictionWindow;
use crate::error::{Error, Result};
use crate::prompt::TemplateKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum MockPolicy {
    /// Last observed eGFR.
    Persistence,
    /// Least-squares line through the observed visits, evaluated at the target date.
    Linear,
    /// `Linear` plus Gaussian noise seeded by (seed, window, template kind, attempt).
    Noisy { sigma: f64, seed: u64 },
    /// Prose without any number.
    Malformed,
    /// Always replies with the same text.
    Fixed { reply: String },
}

impl MockPolicy {
    /// Stable descriptor used as the "model name" in cache keys.
    pub fn descriptor(&self) -> String {
        match self {
            MockPolicy::Persistence => "mock:persistence".into(),
            MockPolicy::Linear => "mock:linear".into(),
            MockPolicy::Noisy { sigma, seed } => format!("mock:noisy(sigma={sigma},seed={seed})"),
            MockPolicy::Malformed => "mock:malformed".into(),
            MockPolicy::Fixed { reply } => {
                format!("mock:fixed({})", &hex::encode(Sha256::digest(reply.as_bytes()))[..16])
            }
        }
    }
}

pub const MALFORMED_REPLY: &str = "The trajectory shows a gradual decline in kidney function. \
Close monitoring is advisable, and the next measurement should be interpreted in clinical context.";

/// Sentence a numeric mock wraps its value in, one shape per template kind.
pub fn echo_sentence(kind: TemplateKind, days: i64, value: f64) -> String {
    match kind {
        TemplateKind::FillInBlank => {
            format!("The most likely predicted value for the next {days} days is {value} mL/min/1.73m².")
        }
        TemplateKind::Descriptive => format!(
            "Based on the plot, the most likely predicted value for the next {days} days is {value}mL/min/1.73m²."
        ),
        TemplateKind::OpenEnded => format!(
            "The eGFR has moved steadily across the recorded visits. Over the next {days} days, \
the patient's eGFR is expected to evolve to approximately {value} mL/min/1.73m²."
        ),
        TemplateKind::RolePlaying => format!(
            "As a nephrologist reviewing this trajectory, I predict the next {days} days point's eGFR value \
for this patient as {value}mL/min/1.73m²."
        ),
    }
}

/// Ordinary least squares over (day offset, eGFR), evaluated at the target offset.
pub fn linear_forecast(window: &PredictionWindow) -> Result<f64> {
    let n = window.observed.len();
    if n < 2 {
        return Err(Error::Policy(format!(
            "linear policy needs at least 2 observed visits, window {} has {n}",
            window.id()
        )));
    }
    let xs = window.day_offsets();
    let ys: Vec<f64> = window.egfr_history().collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    let target_x = xs[n - 1] + window.next_day_diff as f64;
    Ok(my + slope * (target_x - mx))
}

fn noise_rng(seed: u64, window: &PredictionWindow, kind: Option<TemplateKind>, attempt: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(window.id().as_str().as_bytes());
    h.update([kind.map_or(0, |k| k as u8 + 1)]);
    h.update(attempt.to_le_bytes());
    let d = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&d);
    ChaCha8Rng::from_seed(s)
}

/// Raw reply of a mock backend for one (window, template kind, attempt).
pub fn mock_predict(
    policy: &MockPolicy,
    window: Option<&PredictionWindow>,
    kind: Option<TemplateKind>,
    attempt: u32,
) -> Result<String> {
    let need_window = || {
        window.ok_or_else(|| Error::Policy(format!("{} needs a prediction window", policy.descriptor())))
    };
    let value = match policy {
        MockPolicy::Malformed => return Ok(MALFORMED_REPLY.to_string()),
        MockPolicy::Fixed { reply } => return Ok(reply.clone()),
        MockPolicy::Persistence => need_window()?.last_observed().egfr,
        MockPolicy::Linear => linear_forecast(need_window()?)?,
        MockPolicy::Noisy { sigma, seed } => {
            let w = need_window()?;
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| Error::Policy(format!("invalid noise sigma {sigma}: {e}")))?;
            linear_forecast(w)? + normal.sample(&mut noise_rng(*seed, w, kind, attempt))
        }
    };
    let w = need_window()?;
    Ok(echo_sentence(
        kind.unwrap_or(TemplateKind::FillInBlank),
        w.next_day_diff,
        value,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::test_support::*;
    use crate::cohort::{generate_windows, Cohort};

    fn window_from(days: &[i64], egfr: &[f64]) -> PredictionWindow {
        let mut visits = patient_at_days("A", days);
        for (v, e) in visits.iter_mut().zip(egfr) {
            v.egfr = *e;
        }
        let c = Cohort::new(vec![profile("A")], visits).unwrap();
        generate_windows(&c, days.len() - 1).unwrap().remove(0)
    }

    #[test]
    fn persistence_embeds_last_value() {
        let w = window_from(&[0, 90, 180, 270], &[50.0, 48.2, 47.1, 46.0]);
        let t = mock_predict(&MockPolicy::Persistence, Some(&w), Some(TemplateKind::FillInBlank), 1).unwrap();
        assert!(t.contains("47.1 mL/min/1.73m²"), "{t}");
    }

    #[test]
    fn linear_exact_fit() {
        // eGFR = 60 - 0.1 * day, observed at days 0, 30, 60; target at day 100
        let w = window_from(&[0, 30, 60, 100], &[60.0, 57.0, 54.0, 50.0]);
        let v = linear_forecast(&w).unwrap();
        assert!((v - 50.0).abs() < 1e-12, "{v}");
        let t = mock_predict(&MockPolicy::Linear, Some(&w), Some(TemplateKind::FillInBlank), 1).unwrap();
        assert!(t.contains("next 40 days is 50"), "{t}");
    }

    #[test]
    fn linear_needs_two_points() {
        let mut w = window_from(&[0, 30, 60], &[60.0, 57.0, 54.0]);
        w.observed.truncate(1);
        assert!(matches!(linear_forecast(&w), Err(Error::Policy(_))));
    }

    #[test]
    fn noisy_differs_by_attempt_and_is_reproducible() {
        let w = window_from(&[0, 30, 60, 100], &[60.0, 57.0, 54.0, 50.0]);
        let p = MockPolicy::Noisy { sigma: 2.0, seed: 9 };
        let a1 = mock_predict(&p, Some(&w), None, 1).unwrap();
        let a2 = mock_predict(&p, Some(&w), None, 2).unwrap();
        assert_ne!(a1, a2);
        assert_eq!(a1, mock_predict(&p, Some(&w), None, 1).unwrap());
        assert_ne!(a1, mock_predict(&p, Some(&w), Some(TemplateKind::OpenEnded), 1).unwrap());
        let other_seed = MockPolicy::Noisy { sigma: 2.0, seed: 10 };
        assert_ne!(a1, mock_predict(&other_seed, Some(&w), None, 1).unwrap());
    }

    #[test]
    fn malformed_has_no_digits() {
        let t = mock_predict(&MockPolicy::Malformed, None, None, 1).unwrap();
        assert!(!t.chars().any(|c| c.is_ascii_digit()));
    }

    #[test]
    fn numeric_policy_without_window_is_policy_error() {
        assert!(matches!(
            mock_predict(&MockPolicy::Persistence, None, None, 1),
            Err(Error::Policy(_))
        ));
    }
}
