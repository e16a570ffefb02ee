// SPDX-License-Identifier: Apache-2.0

//! Delimited-text readers and writers for visits and profiles.
//!
//! Visit columns: `patient_id, date, egfr, bun, phosphorus, uacr,
//! in_hospitalization`. Missing labs are empty fields; dates are ISO-8601.
//!
//! Profile columns: `patient_id, gender, age, ckd_cause, smoking,
//! drinking_frequency, ckd_stage, charlson_index`, followed by any subset of
//! the comorbidity and medication flag columns (0/1). Absent flag columns
//! read as 0; unknown columns are rejected.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{Cohort, Comorbidity, Drinking, Gender, Medication, PatientProfile, Smoking, VisitRecord};
use crate::error::{Error, Result};

const VISIT_COLUMNS: [&str; 7] = [
    "patient_id",
    "date",
    "egfr",
    "bun",
    "phosphorus",
    "uacr",
    "in_hospitalization",
];

const PROFILE_COLUMNS: [&str; 8] = [
    "patient_id",
    "gender",
    "age",
    "ckd_cause",
    "smoking",
    "drinking_frequency",
    "ckd_stage",
    "charlson_index",
];

fn parse_err(row: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        field: field.to_string(),
        message: message.into(),
    }
}

struct Header {
    names: Vec<String>,
}

impl Header {
    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn read_header<R: Read>(rdr: &mut csv::Reader<R>) -> Result<Header> {
    let names = rdr
        .headers()
        .map_err(|e| parse_err(1, "header", e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    Ok(Header { names })
}

fn require(header: &Header, name: &str) -> Result<usize> {
    header
        .index(name)
        .ok_or_else(|| parse_err(1, name, "missing required column"))
}

fn opt_nonneg(raw: &str, row: usize, field: &str) -> Result<Option<f64>> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(row, field, format!("not a number: `{raw}`")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(parse_err(row, field, format!("must be a non-negative number, got {raw}")));
    }
    Ok(Some(v))
}

fn parse_bool(raw: &str, row: usize, field: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "0" | "false" | "no" | "" => Ok(false),
        "1" | "true" | "yes" => Ok(true),
        other => Err(parse_err(row, field, format!("expected 0/1, got `{other}`"))),
    }
}

fn parse_visits<R: Read>(source: R) -> Result<Vec<VisitRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header = read_header(&mut rdr)?;
    let idx: Vec<usize> = VISIT_COLUMNS
        .iter()
        .map(|c| require(&header, c))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(row, "record", e.to_string())
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let patient_id = field(0).to_string();
        if patient_id.is_empty() {
            return Err(parse_err(row, "patient_id", "empty"));
        }
        let date = NaiveDate::parse_from_str(field(1), "%Y-%m-%d")
            .map_err(|e| parse_err(row, "date", format!("`{}`: {e}", field(1))))?;
        let egfr: f64 = field(2)
            .parse()
            .map_err(|_| parse_err(row, "egfr", format!("not a number: `{}`", field(2))))?;
        if !(egfr.is_finite() && egfr > 0.0) {
            return Err(parse_err(row, "egfr", format!("must be positive, got {}", field(2))));
        }
        out.push(VisitRecord {
            patient_id,
            date,
            egfr,
            bun: opt_nonneg(field(3), row, "bun")?,
            phosphorus: opt_nonneg(field(4), row, "phosphorus")?,
            uacr: opt_nonneg(field(5), row, "uacr")?,
            in_hospitalization: parse_bool(field(6), row, "in_hospitalization")?,
        });
    }
    Ok(out)
}

fn parse_profiles<R: Read>(source: R) -> Result<Vec<PatientProfile>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header = read_header(&mut rdr)?;
    let idx: Vec<usize> = PROFILE_COLUMNS
        .iter()
        .map(|c| require(&header, c))
        .collect::<Result<_>>()?;
    let mut comorbidity_cols = Vec::new();
    let mut medication_cols = Vec::new();
    for (i, name) in header.names.iter().enumerate() {
        if PROFILE_COLUMNS.contains(&name.as_str()) {
            continue;
        }
        if let Some(c) = Comorbidity::from_column(name) {
            comorbidity_cols.push((i, c));
        } else if let Some(m) = Medication::from_column(name) {
            medication_cols.push((i, m));
        } else {
            return Err(parse_err(1, name, "unknown profile column"));
        }
    }

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(row, "record", e.to_string())
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let patient_id = field(0).to_string();
        if patient_id.is_empty() {
            return Err(parse_err(row, "patient_id", "empty"));
        }
        let gender =
            Gender::parse(field(1)).ok_or_else(|| parse_err(row, "gender", format!("unknown value `{}`", field(1))))?;
        let age_at_baseline: f64 = field(2)
            .parse()
            .map_err(|_| parse_err(row, "age", format!("not a number: `{}`", field(2))))?;
        let smoking = Smoking::parse(field(4))
            .ok_or_else(|| parse_err(row, "smoking", format!("unknown value `{}`", field(4))))?;
        let drinking_frequency = Drinking::parse(field(5))
            .ok_or_else(|| parse_err(row, "drinking_frequency", format!("unknown value `{}`", field(5))))?;
        let ckd_stage: u8 = field(6)
            .parse()
            .ok()
            .filter(|s| (1..=5).contains(s))
            .ok_or_else(|| parse_err(row, "ckd_stage", format!("expected 1-5, got `{}`", field(6))))?;
        let charlson_index: u32 = field(7)
            .parse()
            .map_err(|_| parse_err(row, "charlson_index", format!("expected non-negative integer, got `{}`", field(7))))?;

        let mut comorbidities = BTreeSet::new();
        for &(i, c) in &comorbidity_cols {
            if parse_bool(rec.get(i).unwrap_or(""), row, c.column())? {
                comorbidities.insert(c);
            }
        }
        let mut medications = BTreeSet::new();
        for &(i, m) in &medication_cols {
            if parse_bool(rec.get(i).unwrap_or(""), row, m.column())? {
                medications.insert(m);
            }
        }
        out.push(PatientProfile {
            patient_id,
            gender,
            age_at_baseline,
            ckd_cause: field(3).to_string(),
            smoking,
            drinking_frequency,
            ckd_stage,
            charlson_index,
            comorbidities,
            medications,
        });
    }
    Ok(out)
}

/// Reads a raw cohort from visit and profile streams.
pub fn ingest_cohort<V: Read, P: Read>(visits: V, profiles: P) -> Result<Cohort> {
    let visits = parse_visits(visits)?;
    let profiles = parse_profiles(profiles)?;
    Cohort::new(profiles, visits)
}

pub fn ingest_files(visits: &Path, profiles: &Path) -> Result<Cohort> {
    let v = File::open(visits).map_err(|e| Error::io(visits, e))?;
    let p = File::open(profiles).map_err(|e| Error::io(profiles, e))?;
    ingest_cohort(v, p)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_visits_csv<W: Write>(cohort: &Cohort, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let werr = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(VISIT_COLUMNS).map_err(werr)?;
    for (_, visits) in cohort.iter() {
        for v in visits {
            w.write_record([
                v.patient_id.clone(),
                v.date.to_string(),
                v.egfr.to_string(),
                fmt_opt(v.bun),
                fmt_opt(v.phosphorus),
                fmt_opt(v.uacr),
                u8::from(v.in_hospitalization).to_string(),
            ])
            .map_err(werr)?;
        }
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn write_profiles_csv<W: Write>(cohort: &Cohort, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let werr = |e: csv::Error| Error::Serde(e.to_string());
    let mut header: Vec<String> = PROFILE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(Comorbidity::ALL.iter().map(|c| c.column().to_string()));
    header.extend(Medication::ALL.iter().map(|m| m.column().to_string()));
    w.write_record(&header).map_err(werr)?;
    for p in cohort.profiles() {
        let mut row = vec![
            p.patient_id.clone(),
            p.gender.label().to_string(),
            p.age_at_baseline.to_string(),
            p.ckd_cause.clone(),
            p.smoking.label().to_string(),
            p.drinking_frequency.label().to_string(),
            p.ckd_stage.to_string(),
            p.charlson_index.to_string(),
        ];
        row.extend(
            Comorbidity::ALL
                .iter()
                .map(|c| u8::from(p.comorbidities.contains(c)).to_string()),
        );
        row.extend(
            Medication::ALL
                .iter()
                .map(|m| u8::from(p.medications.contains(m)).to_string()),
        );
        w.write_record(&row).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PROFILES: &str = "patient_id,gender,age,ckd_cause,smoking,drinking_frequency,ckd_stage,charlson_index,hypertension,statins\n\
        A,female,63.1,diabetic nephropathy,never,occasional,3,2,1,0\n\
        B,male,55,hypertensive nephropathy,former,never,4,1,1,1\n\
        C,male,70.5,glomerulonephritis,current,frequent,2,0,0,0\n";

    #[test]
    fn clean_file_yields_sorted_cohort() {
        let visits = "patient_id,date,egfr,bun,phosphorus,uacr,in_hospitalization\n\
            A,2020-03-01,48.2,20,4.1,,0\n\
            A,2020-01-01,50.0,19,4.0,300,0\n\
            B,2020-02-01,30.0,,,,0\n\
            C,2021-01-01,80.0,12,3.3,30,1\n\
            C,2020-06-01,82.0,12,3.3,30,0\n";
        let c = ingest_cohort(visits.as_bytes(), PROFILES.as_bytes()).unwrap();
        assert_eq!(c.patient_count(), 3);
        let a = c.visits("A").unwrap();
        assert!(a[0].date < a[1].date);
        assert_eq!(a[1].uacr, None);
        assert!(c.visits("C").unwrap()[1].in_hospitalization);
        let p = c.profile("B").unwrap();
        assert!(p.medications.contains(&Medication::Statins));
        assert!(p.comorbidities.contains(&Comorbidity::Hypertension));
    }

    #[test]
    fn negative_egfr_names_row_and_field() {
        let visits = "patient_id,date,egfr,bun,phosphorus,uacr,in_hospitalization\n\
            A,2020-01-01,50.0,19,4.0,300,0\n\
            A,2020-03-01,-5,20,4.1,,0\n";
        match ingest_cohort(visits.as_bytes(), PROFILES.as_bytes()).unwrap_err() {
            Error::Parse { row, field, .. } => {
                assert_eq!(row, 3);
                assert_eq!(field, "egfr");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn bad_date_is_parse_error() {
        let visits = "patient_id,date,egfr,bun,phosphorus,uacr,in_hospitalization\nA,2020-13-01,50.0,,,,0\n";
        let err = ingest_cohort(visits.as_bytes(), PROFILES.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, ref field, .. } if field == "date"));
    }

    #[test]
    fn duplicate_visit_is_rejected() {
        let visits = "patient_id,date,egfr,bun,phosphorus,uacr,in_hospitalization\n\
            A,2020-01-01,50.0,19,4.0,300,0\n\
            A,2020-01-01,49.0,19,4.0,300,0\n";
        let err = ingest_cohort(visits.as_bytes(), PROFILES.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DuplicateVisit { .. }), "{err}");
    }

    #[test]
    fn unknown_profile_column_is_rejected() {
        let profiles = "patient_id,gender,age,ckd_cause,smoking,drinking_frequency,ckd_stage,charlson_index,aspirin\n";
        let visits = "patient_id,date,egfr,bun,phosphorus,uacr,in_hospitalization\n";
        let err = ingest_cohort(visits.as_bytes(), profiles.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "aspirin"));
    }

    #[test]
    fn writers_round_trip() {
        let c = super::super::test_support::cohort_with_counts(&[5, 6]);
        let mut v = Vec::new();
        let mut p = Vec::new();
        write_visits_csv(&c, &mut v).unwrap();
        write_profiles_csv(&c, &mut p).unwrap();
        let back = ingest_cohort(v.as_slice(), p.as_slice()).unwrap();
        assert_eq!(back, c);
    }
}
