// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Cohort, VisitRecord};
use crate::error::{Error, Result};

/// Longest admissible gap between consecutive visits ("one year", leap-safe).
pub const MAX_GAP_DAYS: i64 = 366;
/// Minimum visits a patient must keep.
pub const MIN_VISITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditEntity {
    Visit,
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditReason {
    #[serde(rename = "hospitalization")]
    Hospitalization,
    #[serde(rename = "gap-over-366-days")]
    GapExclusion,
    #[serde(rename = "fewer-than-five")]
    FewerThanFive,
}

impl AuditReason {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditReason::Hospitalization => "hospitalization",
            AuditReason::GapExclusion => "gap-over-366-days",
            AuditReason::FewerThanFive => "fewer-than-five",
        }
    }
}

impl fmt::Display for AuditEntity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuditEntity::Visit => "visit",
            AuditEntity::Patient => "patient",
        })
    }
}

/// One dropped visit (`id` = `<patient>@<date>`) or patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub entity: AuditEntity,
    pub id: String,
    pub reason: AuditReason,
}

impl AuditRow {
    fn visit(v: &VisitRecord, reason: AuditReason) -> Self {
        AuditRow {
            entity: AuditEntity::Visit,
            id: format!("{}@{}", v.patient_id, v.date),
            reason,
        }
    }
}

/// Longest run of consecutive visits whose gaps are all ≤ [`MAX_GAP_DAYS`];
/// the earliest run wins ties. Returns the half-open index range.
fn longest_contiguous_run(visits: &[VisitRecord]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut start = 0;
    for i in 0..=visits.len() {
        let breaks = i == visits.len()
            || (i > start && (visits[i].date - visits[i - 1].date).num_days() > MAX_GAP_DAYS);
        if breaks {
            if i - start > best.1 - best.0 {
                best = (start, i);
            }
            start = i;
        }
    }
    best
}

/// Applies the exclusion rules in order: hospitalization visits, gap
/// splitting, then the five-visit minimum.
pub fn preprocess(cohort: &Cohort) -> Result<(Cohort, Vec<AuditRow>)> {
    let mut audit = Vec::new();
    let mut kept_visits = BTreeMap::new();
    let mut kept_profiles = BTreeMap::new();

    for (profile, visits) in cohort.iter() {
        let mut remaining = Vec::with_capacity(visits.len());
        for v in visits {
            if v.in_hospitalization {
                audit.push(AuditRow::visit(v, AuditReason::Hospitalization));
            } else {
                remaining.push(v.clone());
            }
        }

        let (lo, hi) = longest_contiguous_run(&remaining);
        for (i, v) in remaining.iter().enumerate() {
            if i < lo || i >= hi {
                audit.push(AuditRow::visit(v, AuditReason::GapExclusion));
            }
        }
        let run: Vec<VisitRecord> = remaining.drain(lo..hi).collect();

        if run.len() < MIN_VISITS {
            audit.push(AuditRow {
                entity: AuditEntity::Patient,
                id: profile.patient_id.clone(),
                reason: AuditReason::FewerThanFive,
            });
            continue;
        }
        kept_profiles.insert(profile.patient_id.clone(), profile.clone());
        kept_visits.insert(profile.patient_id.clone(), run);
    }

    let cleaned = Cohort::from_sorted(kept_profiles, kept_visits)?;
    Ok((cleaned, audit))
}

/// Writes the audit as delimited text with columns `entity,id,reason`.
pub fn write_audit_csv<W: Write>(audit: &[AuditRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let werr = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(["entity", "id", "reason"]).map_err(werr)?;
    for row in audit {
        w.write_record([row.entity.to_string().as_str(), row.id.as_str(), row.reason.as_str()])
            .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    fn single(pid: &str, visits: Vec<VisitRecord>) -> Cohort {
        Cohort::new(vec![profile(pid)], visits).unwrap()
    }

    #[test]
    fn four_visits_drop_patient() {
        let c = Cohort::new(
            vec![profile("A"), profile("B")],
            [patient_at_days("A", &[0, 90, 180, 270]), patient_at_days("B", &[0, 90, 180, 270, 360])].concat(),
        )
        .unwrap();
        let (out, audit) = preprocess(&c).unwrap();
        assert_eq!(out.patient_count(), 1);
        assert_eq!(
            audit,
            vec![AuditRow {
                entity: AuditEntity::Patient,
                id: "A".into(),
                reason: AuditReason::FewerThanFive
            }]
        );
    }

    #[test]
    fn gap_split_keeps_longest_run_then_drops_short_patient() {
        // Runs: {0,100} (2 visits) and {600,700,800,900} (4 visits).
        let c = single("A", patient_at_days("A", &[0, 100, 600, 700, 800, 900]));
        let err = preprocess(&c).unwrap_err();
        assert!(matches!(err, Error::EmptyCohort));

        let c = Cohort::new(
            vec![profile("A"), profile("B")],
            [
                patient_at_days("A", &[0, 100, 600, 700, 800, 900]),
                patient_at_days("B", &[0, 90, 180, 270, 360]),
            ]
            .concat(),
        )
        .unwrap();
        let (out, audit) = preprocess(&c).unwrap();
        assert!(out.visits("A").is_none());
        let reasons: Vec<_> = audit.iter().map(|r| (r.entity, r.reason)).collect();
        assert_eq!(
            reasons,
            vec![
                (AuditEntity::Visit, AuditReason::GapExclusion),
                (AuditEntity::Visit, AuditReason::GapExclusion),
                (AuditEntity::Patient, AuditReason::FewerThanFive),
            ]
        );
        assert_eq!(audit[0].id, format!("A@{}", day(0)));
    }

    #[test]
    fn gap_of_exactly_366_days_is_kept() {
        let c = single("A", patient_at_days("A", &[0, 366, 732, 1098, 1464]));
        let (out, audit) = preprocess(&c).unwrap();
        assert_eq!(out.total_visits(), 5);
        assert!(audit.is_empty());
        let c = single("A", patient_at_days("A", &[0, 367, 457, 547, 637, 727]));
        let (out, audit) = preprocess(&c).unwrap();
        assert_eq!(out.total_visits(), 5);
        assert_eq!(audit.len(), 1);
    }

    #[test]
    fn earliest_run_wins_ties() {
        let days = [0, 90, 180, 270, 360, 1000, 1090, 1180, 1270, 1360];
        let c = single("A", patient_at_days("A", &days));
        let (out, _) = preprocess(&c).unwrap();
        assert_eq!(out.visits("A").unwrap()[0].date, day(0));
        assert_eq!(out.visits("A").unwrap().len(), 5);
    }

    #[test]
    fn hospitalization_removed_before_gap_analysis() {
        // Without the hospitalized visit at day 300 the gap 200 -> 500 is
        // still <= 366, so only the hospital visit is dropped.
        let mut visits = patient_at_days("A", &[0, 100, 200, 300, 500, 600]);
        visits[3].in_hospitalization = true;
        let c = single("A", visits);
        let (out, audit) = preprocess(&c).unwrap();
        assert_eq!(out.total_visits(), 5);
        assert_eq!(
            audit,
            vec![AuditRow {
                entity: AuditEntity::Visit,
                id: format!("A@{}", day(300)),
                reason: AuditReason::Hospitalization
            }]
        );
    }

    #[test]
    fn idempotent() {
        let mut visits = patient_at_days("A", &[0, 100, 200, 300, 500, 600, 1200, 1300]);
        visits[1].in_hospitalization = true;
        let c = Cohort::new(
            vec![profile("A"), profile("B")],
            [visits, patient_at_days("B", &[0, 10, 20])].concat(),
        )
        .unwrap();
        let (once, _) = preprocess(&c).unwrap();
        let (twice, audit) = preprocess(&once).unwrap();
        assert_eq!(once, twice);
        assert!(audit.is_empty());
    }

    #[test]
    fn audit_csv_layout() {
        let rows = vec![AuditRow {
            entity: AuditEntity::Patient,
            id: "A".into(),
            reason: AuditReason::FewerThanFive,
        }];
        let mut buf = Vec::new();
        write_audit_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "entity,id,reason\npatient,A,fewer-than-five\n");
    }
}
