// SPDX-License-Identifier: Apache-2.0

//! Recovers one numeric eGFR value from a free-text model reply.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Dispatcher, ModelResponse, QueryRequest};
use crate::cohort::WindowId;
use crate::error::{Error, Result};
use crate::par::Execution;

pub const SECONDARY_PROMPT_PREFIX: &str = "Return only the predicted eGFR number from this text: ";

const NUM: &str = r"(\d+(?:\.\d+)?)";

static UNIT_ADJACENT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i){NUM}\s*{UNIT}", UNIT = UNIT)).expect("valid regex")
});
static PREDICTED_IS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)predicted\s+(?:egfr\s+)?value\b.*?\bis\s*:?\s*(?:approximately\s+|about\s+|around\s+|roughly\s+)?{NUM}"
    ))
    .expect("valid regex")
});
static UNIT_ONLY: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!("(?i){UNIT}")).expect("valid regex"));
static ISO_DATE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d{4}-\d{2}-\d{2}").expect("valid regex"));
static ANY_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(NUM).expect("valid regex"));

const UNIT: &str = r"ml\s*/\s*min\s*(?:/|per)\s*1\.73\s*(?:m²|m2|m\^2|square\s+met(?:er|re)s?)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlausibleRange {
    pub min: f64,
    pub max: f64,
}

impl Default for PlausibleRange {
    fn default() -> Self {
        PlausibleRange { min: 1.0, max: 200.0 }
    }
}

impl PlausibleRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(Error::Config(format!(
                "plausible range [{}, {}] must be finite with min < max",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

fn last_in_range(candidates: impl Iterator<Item = f64>, range: PlausibleRange) -> Option<f64> {
    candidates.filter(|v| range.contains(*v)).last()
}

fn parse(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Deterministic pattern pass.
///
/// Tiers, first hit wins: a number directly before the eGFR unit; a number
/// right after "predicted value ... is"; any free-standing number. Within a
/// tier the last in-range candidate wins.
pub fn extract_pattern(raw_text: &str, range: PlausibleRange) -> Option<f64> {
    let tier1 = UNIT_ADJACENT.captures_iter(raw_text).filter_map(|c| parse(&c[1]));
    if let Some(v) = last_in_range(tier1, range) {
        return Some(v);
    }
    let tier2 = PREDICTED_IS.captures_iter(raw_text).filter_map(|c| parse(&c[1]));
    if let Some(v) = last_in_range(tier2, range) {
        return Some(v);
    }
    let stripped = UNIT_ONLY.replace_all(raw_text, " ");
    let stripped = ISO_DATE.replace_all(&stripped, " ");
    let tier3 = ANY_NUMBER.find_iter(&stripped).filter_map(|m| {
        let before = stripped[..m.start()].chars().next_back();
        let after = stripped[m.end()..].chars().next();
        // skip identifiers like "P12" or "v2" and ordinals like "3rd"
        if before.is_some_and(|c| c.is_alphabetic() || c == '_')
            || after.is_some_and(|c| c.is_alphabetic() && !c.is_uppercase() && c != 'm' && c != 'M')
        {
            return None;
        }
        parse(m.as_str())
    });
    last_in_range(tier3, range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMethod {
    Pattern,
    SecondaryModel,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub window_id: WindowId,
    pub template_id: u8,
    pub backend_id: String,
    pub attempt_index: u32,
    pub value: Option<f64>,
    pub method: ExtractionMethod,
}

impl Prediction {
    pub fn is_failed(&self) -> bool {
        self.method == ExtractionMethod::Failed
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    #[serde(default)]
    pub range: PlausibleRange,
    /// Backend used for the secondary pass; none disables it.
    #[serde(default)]
    pub secondary_backend: Option<String>,
}

/// Counts for one (backend, template) cell. `attempted = extracted + failed`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionCounts {
    pub attempted: usize,
    pub pattern: usize,
    pub secondary: usize,
    pub failed: usize,
}

impl ExtractionCounts {
    pub fn extracted(&self) -> usize {
        self.pattern + self.secondary
    }

    fn record(&mut self, method: ExtractionMethod) {
        self.attempted += 1;
        match method {
            ExtractionMethod::Pattern => self.pattern += 1,
            ExtractionMethod::SecondaryModel => self.secondary += 1,
            ExtractionMethod::Failed => self.failed += 1,
        }
    }
}

/// Audit keyed by `backend_id` then template id.
pub type ExtractionAudit = BTreeMap<String, BTreeMap<u8, ExtractionCounts>>;

pub fn audit(predictions: &[Prediction]) -> ExtractionAudit {
    let mut out = ExtractionAudit::new();
    for p in predictions {
        out.entry(p.backend_id.clone())
            .or_default()
            .entry(p.template_id)
            .or_default()
            .record(p.method);
    }
    out
}

pub fn secondary_prompt(raw_text: &str) -> String {
    format!("{SECONDARY_PROMPT_PREFIX}{raw_text}")
}

/// Secondary pass: ask `backend_id` to restate the number, then re-run the pattern pass.
pub fn extract_secondary(
    raw_text: &str,
    dispatcher: &Dispatcher,
    backend_id: &str,
    attempt_index: u32,
    range: PlausibleRange,
) -> Result<Option<f64>> {
    let prompt = secondary_prompt(raw_text);
    let reply = dispatcher.query(
        backend_id,
        &QueryRequest {
            prompt_text: &prompt,
            template_id: None,
            kind: None,
            image: None,
            window: None,
            attempt_index,
        },
    )?;
    Ok(extract_pattern(&reply.raw_text, range))
}

/// Extracts one prediction per response, falling back to the secondary pass
/// when a dispatcher and secondary backend are available.
pub fn extract_one(
    response: &ModelResponse,
    config: &ExtractionConfig,
    dispatcher: Option<&Dispatcher>,
) -> Result<Prediction> {
    let window_id = response
        .window_id
        .clone()
        .ok_or_else(|| Error::Validation(format!("response {} has no window id", response.cache_key)))?;
    let template_id = response
        .template_id
        .ok_or_else(|| Error::Validation(format!("response {} has no template id", response.cache_key)))?;
    let (value, method) = match extract_pattern(&response.raw_text, config.range) {
        Some(v) => (Some(v), ExtractionMethod::Pattern),
        None => match (dispatcher, config.secondary_backend.as_deref()) {
            (Some(d), Some(b)) => {
                match extract_secondary(&response.raw_text, d, b, response.attempt_index, config.range)? {
                    Some(v) => (Some(v), ExtractionMethod::SecondaryModel),
                    None => (None, ExtractionMethod::Failed),
                }
            }
            _ => (None, ExtractionMethod::Failed),
        },
    };
    Ok(Prediction {
        window_id,
        template_id,
        backend_id: response.backend_id.clone(),
        attempt_index: response.attempt_index,
        value,
        method,
    })
}

pub fn extract_all(
    responses: &[ModelResponse],
    config: &ExtractionConfig,
    dispatcher: Option<&Dispatcher>,
    exec: Execution,
) -> Result<Vec<Prediction>> {
    config.range.validate()?;
    exec.try_map(responses, |r| extract_one(r, config, dispatcher))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{echo_sentence, BackendConfig, MockPolicy, NetworkMode, TransportStatus};
    use crate::prompt::TemplateKind;
    use proptest::prelude::*;

    fn r() -> PlausibleRange {
        PlausibleRange::default()
    }

    #[test]
    fn unit_adjacent_sentence() {
        let t = "The most likely predicted value for the next 90 days is 42.5 mL/min/1.73m².";
        assert_eq!(extract_pattern(t, r()), Some(42.5));
    }

    #[test]
    fn unit_adjacent_beats_earlier_numbers() {
        let t = "Values ranged 30 to 35; I predict 33.0 mL/min/1.73m².";
        assert_eq!(extract_pattern(t, r()), Some(33.0));
    }

    #[test]
    fn no_digits_no_match() {
        assert_eq!(extract_pattern("The trajectory is concerning.", r()), None);
    }

    #[test]
    fn predicted_value_is_tier() {
        let t = "Looking at 2021-03-04 and 55 earlier, the predicted value for the next 120 days is 38 and stable.";
        assert_eq!(extract_pattern(t, r()), Some(38.0));
    }

    #[test]
    fn bare_numbers_take_last_in_range() {
        assert_eq!(extract_pattern("between 30 and 40", r()), Some(40.0));
        assert_eq!(extract_pattern("about 41, maybe 500", r()), Some(41.0));
        assert_eq!(extract_pattern("only 900 and 0.2", r()), None);
    }

    #[test]
    fn dates_and_unit_digits_are_ignored() {
        let t = "On 2024-05-01 the value will be near 37 (units: mL/min/1.73m2).";
        assert_eq!(extract_pattern(t, r()), Some(37.0));
    }

    #[test]
    fn unit_spelling_variants() {
        assert_eq!(extract_pattern("≈ 44.1 ml/min/1.73 m2", r()), Some(44.1));
        assert_eq!(extract_pattern("44.1mL/min/1.73m^2", r()), Some(44.1));
        assert_eq!(extract_pattern("44.1 mL/min per 1.73 m²", r()), Some(44.1));
    }

    #[test]
    fn out_of_range_unit_value_falls_through() {
        let t = "predicted 450 mL/min/1.73m² is impossible, so the predicted value is 45";
        assert_eq!(extract_pattern(t, r()), Some(45.0));
    }

    proptest! {
        #[test]
        fn template_echo_round_trip(v in 1.0f64..=200.0, k in 0usize..4, days in 1i64..2000) {
            let s = echo_sentence(TemplateKind::ALL[k], days, v);
            prop_assert_eq!(extract_pattern(&s, r()), Some(v));
        }

        #[test]
        fn deterministic(s in "\\PC{0,80}") {
            prop_assert_eq!(extract_pattern(&s, r()), extract_pattern(&s, r()));
        }

        #[test]
        fn result_always_in_range(s in "[a-z0-9 ./²-]{0,60}") {
            if let Some(v) = extract_pattern(&s, r()) {
                prop_assert!(r().contains(v));
            }
        }
    }

    fn response(backend: &str, text: &str, attempt: u32) -> ModelResponse {
        ModelResponse {
            backend_id: backend.into(),
            window_id: Some(WindowId::new("P00", 1)),
            template_id: Some(3),
            attempt_index: attempt,
            raw_text: text.into(),
            received_unix_ms: 0,
            status: TransportStatus::Ok,
            cache_key: "k".into(),
        }
    }

    fn dispatcher(reply: &str) -> Dispatcher {
        let mut d = Dispatcher::new(None, NetworkMode::Offline);
        d.register(BackendConfig::mock("x", MockPolicy::Fixed { reply: reply.into() }))
            .unwrap();
        d
    }

    #[test]
    fn secondary_pass_recovers_number() {
        let d = dispatcher("41");
        let cfg = ExtractionConfig {
            secondary_backend: Some("x".into()),
            ..Default::default()
        };
        let resp = response("m", "The function seems to decline slowly over time.", 1);
        let p = extract_one(&resp, &cfg, Some(&d)).unwrap();
        assert_eq!(p.value, Some(41.0));
        assert_eq!(p.method, ExtractionMethod::SecondaryModel);

        let d = dispatcher("between 30 and 40");
        let p = extract_one(&resp, &cfg, Some(&d)).unwrap();
        assert_eq!(p.value, Some(40.0));
        assert_eq!(p.method, ExtractionMethod::SecondaryModel);
    }

    #[test]
    fn malformed_end_to_end_fails_and_is_counted() {
        let mut d = Dispatcher::new(None, NetworkMode::Offline);
        d.register(BackendConfig::mock("x", MockPolicy::Malformed)).unwrap();
        let cfg = ExtractionConfig {
            secondary_backend: Some("x".into()),
            ..Default::default()
        };
        let rs = vec![
            response("m", crate::backend::MALFORMED_REPLY, 1),
            response("m", "42 mL/min/1.73m²", 2),
        ];
        let preds = extract_all(&rs, &cfg, Some(&d), Execution::Parallel).unwrap();
        assert!(preds[0].is_failed() && preds[0].value.is_none());
        let a = audit(&preds);
        let c = a["m"][&3];
        assert_eq!((c.attempted, c.extracted(), c.failed), (2, 1, 1));
    }
}
