// SPDX-License-Identifier: Apache-2.0

//! Prompt templates and their instantiation against a prediction window.
//!
//! Placeholders: `{next_day_diff}` (forecast horizon in days), `{data_text}`
//! (name-value listing of the latest clinical data) and the literal
//! `{{eGFR}}` blank that the model is asked to fill.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chart::ChartImage;
use crate::cohort::{PatientProfile, PredictionWindow, WindowId};
use crate::error::{Error, Result};

pub const NEXT_DAY_DIFF: &str = "{next_day_diff}";
pub const DATA_TEXT: &str = "{data_text}";
pub const EGFR_BLANK: &str = "{{eGFR}}";

const FILL_IN_BLANK: &str = "Based on the provided plot, the x-axis represents the dates of each eGFR measurement, while the y-axis shows the eGFR values in units of mL/min/1.73m². This plot depicts the trajectory of a single patient’s kidney function, as measured by the estimated Glomerular Filtration Rate (eGFR). Please fill in the blank: The most likely predicted value for the next {next_day_diff} days is {{eGFR}}mL/min/1.73m². The latest data for the patient: {data_text}.";

const DESCRIPTIVE: &str = "The x-axis represents the dates of each eGFR measurement, while the y-axis shows the eGFR values in units of mL/min/1.73m². This plot depicts the trajectory of a single patient’s kidney function, as measured by the estimated Glomerular Filtration Rate (eGFR). Please provide the most likely predicted value for the next {next_day_diff} days as {{eGFR}}mL/min/1.73m². The latest data for the patient: {data_text}.";

const OPEN_ENDED: &str = "The plot you see maps out the progression of kidney function for a single patient, using estimated Glomerular Filtration Rate (eGFR) values measured over various dates. Each point on the x-axis represents the date of measurement, and the corresponding y-axis value reflects the eGFR in mL/min/1.73m². Given the latest data provided: {data_text}, could you explore potential trends and predict how the patient's eGFR might evolve over the next {next_day_diff} days?";

const ROLE_PLAYING: &str = "Imagine you are a nephrologist analyzing the patient’s estimated Glomerular Filtration Rate trajectory. Based on your expertise, please predict the next {next_day_diff} days point’s eGFR value in mL/min/1.73m² for this patient as {{eGFR}}mL/min/1.73m². Consider the trends and patterns observed in the plot, as well as any additional clinical information available. The latest data for the patient: {data_text}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    FillInBlank,
    Descriptive,
    OpenEnded,
    RolePlaying,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::FillInBlank,
        TemplateKind::Descriptive,
        TemplateKind::OpenEnded,
        TemplateKind::RolePlaying,
    ];

    pub fn has_blank(self) -> bool {
        self != TemplateKind::OpenEnded
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::FillInBlank => "fill-in-blank",
            TemplateKind::Descriptive => "descriptive",
            TemplateKind::OpenEnded => "open-ended",
            TemplateKind::RolePlaying => "role-playing",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: u8,
    pub kind: TemplateKind,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(id: u8, kind: TemplateKind, body: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate {
            id,
            kind,
            body: body.into(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Built-in template `id` ∈ 1..=4, in order fill-in-blank, descriptive,
    /// open-ended, role-playing.
    pub fn builtin(id: u8) -> Result<Self> {
        let (kind, body) = match id {
            1 => (TemplateKind::FillInBlank, FILL_IN_BLANK),
            2 => (TemplateKind::Descriptive, DESCRIPTIVE),
            3 => (TemplateKind::OpenEnded, OPEN_ENDED),
            4 => (TemplateKind::RolePlaying, ROLE_PLAYING),
            _ => return Err(Error::Template(format!("no built-in template {id}"))),
        };
        PromptTemplate::new(id, kind, body)
    }

    pub fn builtins() -> Vec<PromptTemplate> {
        (1..=4).map(|i| Self::builtin(i).expect("built-ins are valid")).collect()
    }

    pub fn from_file(id: u8, kind: TemplateKind, path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PromptTemplate::new(id, kind, body.trim_end().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        for ph in [NEXT_DAY_DIFF, DATA_TEXT] {
            let n = self.body.matches(ph).count();
            if n != 1 {
                return Err(Error::Template(format!(
                    "template {} must contain {ph} exactly once, found {n}",
                    self.id
                )));
            }
        }
        let has_blank = self.body.contains(EGFR_BLANK);
        if has_blank != self.kind.has_blank() {
            return Err(Error::Template(format!(
                "template {} ({}) {} the {EGFR_BLANK} blank",
                self.id,
                self.kind,
                if has_blank { "must not contain" } else { "must contain" }
            )));
        }
        Ok(())
    }
}

/// Which observed visit supplies the BUN / phosphorus / UACR values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabVisit {
    #[default]
    Latest,
    /// 1-based visit ordinal; falls back to the latest visit when the window
    /// is shorter.
    Ordinal(usize),
}

fn lab(v: Option<f64>, unit: &str) -> String {
    match v {
        Some(x) => format!("{x} {unit}"),
        None => "not available".to_string(),
    }
}

fn list_or_none<I: IntoIterator<Item = &'static str>>(items: I) -> String {
    let v: Vec<&str> = items.into_iter().collect();
    if v.is_empty() {
        "none".to_string()
    } else {
        v.join(", ")
    }
}

/// Name-value listing of the patient's latest data, in a fixed key order.
pub fn compose_data_text(window: &PredictionWindow, profile: &PatientProfile, lab_visit: LabVisit) -> String {
    let labs = match lab_visit {
        LabVisit::Ordinal(k) if k >= 1 && k <= window.observed.len() => &window.observed[k - 1],
        _ => window.last_observed(),
    };
    let n = window.observed.len();
    let recent = window.observed[n.saturating_sub(3)..]
        .iter()
        .map(|v| format!("{}: {}", v.date, v.egfr))
        .collect::<Vec<_>>()
        .join(", ");
    [
        format!("BUN: {}", lab(labs.bun, "mg/dL")),
        format!("Phosphorus: {}", lab(labs.phosphorus, "mg/dL")),
        format!("UACR: {}", lab(labs.uacr, "mg/g")),
        format!("eGFR in the latest 3 visits: {recent}"),
        format!("Age: {}", profile.age_at_baseline),
        format!("Gender: {}", profile.gender.label()),
        format!("CKD stage: {}", profile.ckd_stage),
        format!("CKD cause: {}", profile.ckd_cause),
        format!("Smoking: {}", profile.smoking.label()),
        format!("Drinking frequency: {}", profile.drinking_frequency.label()),
        format!("Charlson Comorbidity Index: {}", profile.charlson_index),
        format!(
            "Comorbidities: {}",
            list_or_none(profile.comorbidities.iter().map(|c| c.label()))
        ),
        format!(
            "Medications: {}",
            list_or_none(profile.medications.iter().map(|m| m.label()))
        ),
    ]
    .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub template_id: u8,
    pub kind: TemplateKind,
    pub window_id: WindowId,
    pub rendered_text: String,
    pub image_digest: String,
}

impl PromptInstance {
    pub fn text_digest(&self) -> String {
        hex::encode(Sha256::digest(self.rendered_text.as_bytes()))
    }
}

/// Finds a `{identifier}` placeholder outside the `{{eGFR}}` blank.
fn unresolved_placeholder(text: &str) -> Option<String> {
    let stripped = text.replace(EGFR_BLANK, "");
    let re = regex::Regex::new(r"\{[A-Za-z_][A-Za-z0-9_]*\}").expect("valid regex");
    re.find(&stripped).map(|m| m.as_str().to_string())
}

pub fn render_prompt(
    template: &PromptTemplate,
    window: &PredictionWindow,
    data_text: &str,
    image: &ChartImage,
) -> Result<PromptInstance> {
    template.validate()?;
    let rendered = template
        .body
        .replacen(NEXT_DAY_DIFF, &window.next_day_diff.to_string(), 1)
        .replacen(DATA_TEXT, data_text, 1);
    if let Some(ph) = unresolved_placeholder(&rendered) {
        return Err(Error::Template(format!(
            "template {} left placeholder {ph} unresolved",
            template.id
        )));
    }
    Ok(PromptInstance {
        template_id: template.id,
        kind: template.kind,
        window_id: window.id(),
        rendered_text: rendered,
        image_digest: image.digest.clone(),
    })
}
