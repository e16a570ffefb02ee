// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic cohorts standing in for protected patient data.

use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{Cohort, Comorbidity, Drinking, Gender, Medication, PatientProfile, Smoking, VisitRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Trajectory {
    /// eGFR falls exactly on a line in calendar days.
    Linear { slope_per_90_days: f64 },
    /// Two linear pieces joined at a random interior visit.
    Piecewise {
        slope_before_per_90_days: f64,
        slope_after_per_90_days: f64,
    },
    /// Linear plus i.i.d. Gaussian noise.
    Noisy { slope_per_90_days: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitCount {
    /// Distribute exactly this many visits as evenly as possible.
    Total(usize),
    /// Uniform per-patient count in `[min, max]`.
    Range { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub patients: usize,
    pub visits: VisitCount,
    pub trajectory: Trajectory,
    pub baseline_min: f64,
    pub baseline_max: f64,
    /// Trajectories never drop below this value.
    pub egfr_floor: f64,
    pub interval_min_days: i64,
    pub interval_max_days: i64,
    pub missing_lab_rate: f64,
    pub hospitalization_rate: f64,
    pub start_date: NaiveDate,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            patients: 50,
            visits: VisitCount::Total(564),
            trajectory: Trajectory::Linear {
                slope_per_90_days: -1.0,
            },
            baseline_min: 2.44,
            baseline_max: 171.85,
            egfr_floor: 2.0,
            interval_min_days: 60,
            interval_max_days: 120,
            missing_lab_rate: 0.05,
            hospitalization_rate: 0.0,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date"),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patients == 0 {
            return fail("synthetic cohort needs at least one patient".into());
        }
        match self.visits {
            VisitCount::Total(t) if t < self.patients => {
                return fail(format!("total visits {t} is fewer than one per patient"));
            }
            VisitCount::Range { min, max } if min == 0 || min > max => {
                return fail(format!("invalid visit range [{min}, {max}]"));
            }
            _ => {}
        }
        if !(self.baseline_min > 0.0 && self.baseline_min <= self.baseline_max) {
            return fail(format!(
                "invalid baseline range [{}, {}]",
                self.baseline_min, self.baseline_max
            ));
        }
        if !(self.egfr_floor > 0.0) {
            return fail("egfr_floor must be positive".into());
        }
        if self.interval_min_days < 1 || self.interval_min_days > self.interval_max_days {
            return fail(format!(
                "invalid visit interval [{}, {}]",
                self.interval_min_days, self.interval_max_days
            ));
        }
        for (name, rate) in [
            ("missing_lab_rate", self.missing_lab_rate),
            ("hospitalization_rate", self.hospitalization_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return fail(format!("{name} must lie in [0, 1], got {rate}"));
            }
        }
        if let Trajectory::Noisy { sigma, .. } = self.trajectory {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return fail(format!("noise sigma must be non-negative, got {sigma}"));
            }
        }
        Ok(())
    }
}

const CKD_CAUSES: [&str; 5] = [
    "diabetic nephropathy",
    "hypertensive nephrosclerosis",
    "chronic glomerulonephritis",
    "polycystic kidney disease",
    "unknown",
];

fn stage_for(egfr: f64) -> u8 {
    match egfr {
        e if e >= 90.0 => 1,
        e if e >= 60.0 => 2,
        e if e >= 30.0 => 3,
        e if e >= 15.0 => 4,
        _ => 5,
    }
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn visit_counts(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match spec.visits {
        VisitCount::Total(total) => {
            let base = total / spec.patients;
            let extra = total % spec.patients;
            let mut counts = vec![base; spec.patients];
            for i in sample(rng, spec.patients, extra) {
                counts[i] += 1;
            }
            counts
        }
        VisitCount::Range { min, max } => (0..spec.patients).map(|_| rng.random_range(min..=max)).collect(),
    }
}

fn draw_baseline(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> f64 {
    // Right-skewed around 40, like the observed clinic population.
    let dist = LogNormal::new(40f64.ln(), 0.7).expect("valid lognormal");
    for _ in 0..100 {
        let b = dist.sample(rng);
        if (spec.baseline_min..=spec.baseline_max).contains(&b) {
            return b;
        }
    }
    rng.random_range(spec.baseline_min..=spec.baseline_max)
}

fn draw_profile(pid: String, baseline: f64, rng: &mut ChaCha8Rng) -> PatientProfile {
    let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
    let smoking = [Smoking::Never, Smoking::Former, Smoking::Current][rng.random_range(0..3)];
    let drinking = [Drinking::Never, Drinking::Occasional, Drinking::Frequent][rng.random_range(0..3)];
    let mut comorbidities = BTreeSet::new();
    for &c in Comorbidity::ALL {
        let p = match c {
            Comorbidity::Hypertension => 0.7,
            Comorbidity::DiabetesMellitus => 0.45,
            Comorbidity::Hyperlipidemia => 0.4,
            _ => 0.1,
        };
        if rng.random_bool(p) {
            comorbidities.insert(c);
        }
    }
    let mut medications = BTreeSet::new();
    for &m in Medication::ALL {
        if rng.random_bool(0.2) {
            medications.insert(m);
        }
    }
    PatientProfile {
        patient_id: pid,
        gender,
        age_at_baseline: round1(rng.random_range(19.5..=87.6)),
        ckd_cause: CKD_CAUSES[rng.random_range(0..CKD_CAUSES.len())].to_string(),
        smoking,
        drinking_frequency: drinking,
        ckd_stage: stage_for(baseline),
        charlson_index: rng.random_range(0..=8),
        comorbidities,
        medications,
    }
}

/// Slope (per day) clamped so the line stays at or above `floor` over `span` days.
fn clamp_slope(slope_per_day: f64, baseline: f64, span: f64, floor: f64) -> f64 {
    if span <= 0.0 || baseline + slope_per_day * span >= floor {
        slope_per_day
    } else if baseline <= floor {
        0.0
    } else {
        (floor - baseline) / span
    }
}

pub fn generate_synthetic_cohort(spec: &SyntheticSpec, seed: u64) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = visit_counts(spec, &mut rng);
    let width = (spec.patients.max(1) as f64).log10().floor() as usize + 1;
    let mut profiles = Vec::with_capacity(spec.patients);
    let mut visits = Vec::new();

    for (i, &n) in counts.iter().enumerate() {
        let pid = format!("S{:0width$}", i + 1, width = width.max(3));
        let baseline = draw_baseline(spec, &mut rng);
        profiles.push(draw_profile(pid.clone(), baseline, &mut rng));

        let start = spec.start_date + Duration::days(rng.random_range(0..365));
        let mut offsets = vec![0i64];
        for _ in 1..n {
            let step = rng.random_range(spec.interval_min_days..=spec.interval_max_days);
            offsets.push(offsets.last().unwrap() + step);
        }
        let span = *offsets.last().unwrap() as f64;

        let values: Vec<f64> = match spec.trajectory {
            Trajectory::Linear { slope_per_90_days } => {
                let s = clamp_slope(slope_per_90_days / 90.0, baseline, span, spec.egfr_floor);
                offsets.iter().map(|&d| baseline + s * d as f64).collect()
            }
            Trajectory::Piecewise {
                slope_before_per_90_days,
                slope_after_per_90_days,
            } => {
                let bp = if n > 2 { rng.random_range(1..n - 1) } else { 0 };
                let bp_day = offsets[bp] as f64;
                let s1 = clamp_slope(slope_before_per_90_days / 90.0, baseline, bp_day, spec.egfr_floor);
                let at_bp = baseline + s1 * bp_day;
                let s2 = clamp_slope(slope_after_per_90_days / 90.0, at_bp, span - bp_day, spec.egfr_floor);
                offsets
                    .iter()
                    .map(|&d| {
                        let d = d as f64;
                        if d <= bp_day {
                            baseline + s1 * d
                        } else {
                            at_bp + s2 * (d - bp_day)
                        }
                    })
                    .collect()
            }
            Trajectory::Noisy {
                slope_per_90_days,
                sigma,
            } => {
                let s = clamp_slope(slope_per_90_days / 90.0, baseline, span, spec.egfr_floor);
                let noise = Normal::new(0.0, sigma).expect("sigma validated");
                offsets
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| {
                        let clean = baseline + s * d as f64;
                        // first visit stays at the drawn baseline
                        if k == 0 {
                            clean
                        } else {
                            (clean + noise.sample(&mut rng)).max(spec.egfr_floor)
                        }
                    })
                    .collect()
            }
        };

        let lab_noise = Normal::new(0.0, 0.1).expect("valid normal");
        for (k, (&d, &egfr)) in offsets.iter().zip(&values).enumerate() {
            let mut lab = |value: f64| -> Option<f64> {
                if rng.random_bool(spec.missing_lab_rate) {
                    None
                } else {
                    Some(round1((value * (1.0 + lab_noise.sample(&mut rng))).max(0.0)))
                }
            };
            let bun = lab(8.0 + 700.0 / egfr);
            let phosphorus = lab(3.2 + 25.0 / egfr);
            let uacr = lab(30.0 * 90.0 / egfr);
            // never hospitalize the first visit so the baseline stays observable
            let in_hospitalization = k > 0 && rng.random_bool(spec.hospitalization_rate);
            visits.push(VisitRecord {
                patient_id: pid.clone(),
                date: start + Duration::days(d),
                egfr,
                bun,
                phosphorus,
                uacr,
                in_hospitalization,
            });
        }
    }
    Cohort::new(profiles, visits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scale_visit_total() {
        let c = generate_synthetic_cohort(&SyntheticSpec::default(), 7).unwrap();
        assert_eq!(c.patient_count(), 50);
        assert_eq!(c.total_visits(), 564);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_cohort(&spec, 3).unwrap();
        let b = generate_synthetic_cohort(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_cohort(&spec, 4).unwrap());
    }

    #[test]
    fn default_baselines_in_range() {
        let spec = SyntheticSpec {
            patients: 500,
            visits: VisitCount::Range { min: 5, max: 6 },
            ..Default::default()
        };
        let c = generate_synthetic_cohort(&spec, 11).unwrap();
        for (_, v) in c.iter() {
            assert!((2.44..=171.85).contains(&v[0].egfr), "{}", v[0].egfr);
        }
    }

    #[test]
    fn linear_family_is_exactly_linear() {
        let c = generate_synthetic_cohort(&SyntheticSpec::default(), 5).unwrap();
        for (_, v) in c.iter() {
            let d0 = v[0].date;
            let slope = (v[1].egfr - v[0].egfr) / (v[1].date - d0).num_days() as f64;
            for x in v {
                let expect = v[0].egfr + slope * (x.date - d0).num_days() as f64;
                assert!((x.egfr - expect).abs() < 1e-9);
                assert!(x.egfr >= 2.0 - 1e-9);
            }
        }
    }

    #[test]
    fn fixed_slope_on_high_baseline() {
        let spec = SyntheticSpec {
            patients: 3,
            visits: VisitCount::Total(15),
            baseline_min: 100.0,
            baseline_max: 120.0,
            ..Default::default()
        };
        let c = generate_synthetic_cohort(&spec, 1).unwrap();
        for (_, v) in c.iter() {
            let days = (v[4].date - v[0].date).num_days() as f64;
            assert!((v[4].egfr - (v[0].egfr - days / 90.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_patients_is_config_error() {
        let spec = SyntheticSpec {
            patients: 0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_cohort(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn gaps_and_counts_survive_preprocessing() {
        let spec = SyntheticSpec {
            trajectory: Trajectory::Noisy {
                slope_per_90_days: -1.5,
                sigma: 2.0,
            },
            ..Default::default()
        };
        let c = generate_synthetic_cohort(&spec, 9).unwrap();
        let (clean, audit) = super::super::preprocess(&c).unwrap();
        assert!(audit.is_empty());
        assert_eq!(clean, c);
    }
}
