// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};

/// Guard below which an actual value cannot be a MAPE denominator.
pub const MAPE_EPSILON: f64 = 1e-9;

fn check(actuals: &[f64], predictions: &[f64]) -> Result<()> {
    if actuals.is_empty() {
        return Err(Error::Metric("no values".into()));
    }
    if actuals.len() != predictions.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} actuals vs {} predictions",
            actuals.len(),
            predictions.len()
        )));
    }
    Ok(())
}

pub fn mae(actuals: &[f64], predictions: &[f64]) -> Result<f64> {
    check(actuals, predictions)?;
    let sum: f64 = actuals.iter().zip(predictions).map(|(a, p)| (a - p).abs()).sum();
    Ok(sum / actuals.len() as f64)
}

/// Mean absolute percentage error, in percent.
pub fn mape(actuals: &[f64], predictions: &[f64]) -> Result<f64> {
    check(actuals, predictions)?;
    if let Some(a) = actuals.iter().find(|a| !(**a >= MAPE_EPSILON)) {
        return Err(Error::Metric(format!("actual value {a} is below the MAPE guard {MAPE_EPSILON}")));
    }
    let sum: f64 = actuals.iter().zip(predictions).map(|(a, p)| (a - p).abs() / a).sum();
    Ok(100.0 * sum / actuals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(mae(&[10.0, 20.0], &[12.0, 17.0]).unwrap(), 2.5);
        assert_eq!(mape(&[10.0, 20.0], &[12.0, 17.0]).unwrap(), 17.5);
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mape(&[0.0], &[1.0]).is_err());
        assert!(mape(&[f64::NAN], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn mae_symmetric_and_bounded(pairs in proptest::collection::vec((0.0f64..200.0, 0.0f64..200.0), 1..40)) {
            let (a, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = mae(&a, &p).unwrap();
            prop_assert_eq!(m, mae(&p, &a).unwrap());
            let worst = a.iter().zip(&p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(m >= 0.0 && m <= worst + 1e-12);
        }

        #[test]
        fn mape_scale_invariant(pairs in proptest::collection::vec((1.0f64..200.0, 0.0f64..200.0), 1..40), k in 0.01f64..100.0) {
            let (a, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let ka: Vec<f64> = a.iter().map(|v| v * k).collect();
            let kp: Vec<f64> = p.iter().map(|v| v * k).collect();
            assert_relative_eq!(mape(&a, &p).unwrap(), mape(&ka, &kp).unwrap(), max_relative = 1e-9, epsilon = 1e-9);
        }
    }
}
