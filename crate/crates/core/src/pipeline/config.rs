// SPDX-License-Identifier: Apache-2.0

//! Run configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendConfig, RawBackend};
use crate::baseline::{BaselineConfig, CnnConfig, ForestParams};
use crate::chart::ChartStyle;
use crate::cohort::{SyntheticSpec, DEFAULT_INITIAL_WIDTH};
use crate::ensemble::{validate_weights, BackendWeights};
use crate::error::{Error, Result};
use crate::extract::ExtractionConfig;
use crate::prompt::{LabVisit, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CohortSource {
    Files { visits: PathBuf, profiles: PathBuf },
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
}

/// Every random choice in a run draws from one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub synthetic: u64,
    pub mocks: u64,
    pub baselines: u64,
}

impl Seeds {
    pub fn set(&mut self, key: &str, value: u64) -> Result<()> {
        match key {
            "split" => self.split = value,
            "synthetic" => self.synthetic = value,
            "mocks" => self.mocks = value,
            "baselines" => self.baselines = value,
            other => {
                return Err(Error::Config(format!(
                    "unknown seed `{other}` (split, synthetic, mocks, baselines)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySettings {
    /// Concurrent requests in the query stage.
    pub parallelism: usize,
    /// Which observed visit supplies lab values in the prompt text.
    pub lab_visit: LabVisit,
    /// Backends asked for forecasts. Unset means every backend except the
    /// secondary extraction backend.
    pub backends: Option<Vec<String>>,
}

impl Default for QuerySettings {
    fn default() -> Self {
        QuerySettings {
            parallelism: 4,
            lab_visit: LabVisit::Latest,
            backends: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    /// Decimals in the text table.
    pub decimals: usize,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings { decimals: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub enabled: bool,
    pub forest: ForestParams,
    pub cnn: CnnConfig,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            enabled: true,
            forest: ForestParams::default(),
            cnn: CnnConfig::default(),
        }
    }
}

impl BaselineSettings {
    pub fn config(&self) -> BaselineConfig {
        BaselineConfig {
            forest: self.forest.clone(),
            cnn: self.cnn.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    /// Per-backend weights for the model ensemble; empty means uniform.
    pub weights: BackendWeights,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_run_id() -> String {
    "default".into()
}
fn default_initial_width() -> usize {
    DEFAULT_INITIAL_WIDTH
}
fn default_train_fraction() -> f64 {
    0.7
}
fn default_repeats() -> u32 {
    3
}
fn default_templates() -> Vec<u8> {
    vec![1, 2, 3, 4]
}

/// On-disk form. Backends stay raw so a noisy mock can inherit `seeds.mocks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default = "default_run_id")]
    run_id: String,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default)]
    cache_dir: Option<PathBuf>,
    #[serde(default = "default_initial_width")]
    initial_width: usize,
    #[serde(default = "default_train_fraction")]
    train_fraction: f64,
    #[serde(default = "default_repeats")]
    repeats: u32,
    #[serde(default = "default_templates")]
    templates: Vec<u8>,
    seeds: Seeds,
    cohort: CohortSource,
    #[serde(default)]
    chart: ChartStyle,
    #[serde(default)]
    query: QuerySettings,
    #[serde(default)]
    extraction: ExtractionConfig,
    #[serde(default)]
    ensemble: EnsembleSettings,
    #[serde(default)]
    baselines: BaselineSettings,
    #[serde(default)]
    report: ReportSettings,
    backends: Vec<RawBackend>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub initial_width: usize,
    pub train_fraction: f64,
    pub repeats: u32,
    pub templates: Vec<PromptTemplate>,
    pub seeds: Seeds,
    pub cohort: CohortSource,
    pub chart: ChartStyle,
    pub query: QuerySettings,
    pub extraction: ExtractionConfig,
    pub ensemble: EnsembleSettings,
    pub baselines: BaselineSettings,
    pub report: ReportSettings,
    pub backends: Vec<BackendConfig>,
}

/// A config problem, anchored to a 1-based line when one is known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map(|s| s.chars().count()).unwrap_or(0) + 1;
    (line, col)
}

/// First line assigning `key` (optionally with `value` on the same line).
fn find_key_line(text: &str, key: &str, value: Option<&str>) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        if key.starts_with('[') {
            return t.trim_end() == key;
        }
        t.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
            && value.is_none_or(|v| t.contains(v))
    })
    .map(|i| i + 1)
}

fn at(text: &str, key: &str, value: Option<&str>, message: String) -> Diagnostic {
    Diagnostic {
        line: find_key_line(text, key, value),
        column: None,
        message,
    }
}

impl RunConfig {
    /// Parses and validates, returning every problem found.
    pub fn parse(text: &str, base_dir: &Path) -> std::result::Result<Self, Vec<Diagnostic>> {
        Self::parse_with_seeds(text, base_dir, &[])
    }

    /// Like [`RunConfig::parse`], applying `KEY=VALUE` seed overrides before
    /// anything derives from the seeds.
    pub fn parse_with_seeds(
        text: &str,
        base_dir: &Path,
        seed_overrides: &[(String, u64)],
    ) -> std::result::Result<Self, Vec<Diagnostic>> {
        let mut raw: RawRunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map(|s| line_col(text, s.start)).unzip();
            vec![Diagnostic {
                line,
                column,
                message: e.message().to_string(),
            }]
        })?;
        let mut diags = Vec::new();
        for (k, v) in seed_overrides {
            if let Err(e) = raw.seeds.set(k, *v) {
                diags.push(Diagnostic { line: None, column: None, message: e.to_string() });
            }
        }
        let mut bad = |key: &str, value: Option<&str>, message: String| diags.push(at(text, key, value, message));

        if raw.run_id.is_empty() || raw.run_id.contains(['/', '\\']) || raw.run_id.starts_with('.') {
            bad("run_id", None, format!("run_id `{}` must be a plain directory name", raw.run_id));
        }
        if raw.initial_width < 2 {
            bad("initial_width", None, format!("initial_width must be >= 2, got {}", raw.initial_width));
        }
        if !(raw.train_fraction > 0.0 && raw.train_fraction < 1.0) {
            bad("train_fraction", None, format!("train_fraction must be in (0, 1), got {}", raw.train_fraction));
        }
        if raw.repeats < 1 {
            bad("repeats", None, "repeats must be >= 1".into());
        }
        if raw.query.parallelism < 1 {
            bad("parallelism", None, "query parallelism must be >= 1".into());
        }
        let mut templates = Vec::new();
        if raw.templates.is_empty() {
            bad("templates", None, "at least one template is required".into());
        }
        for &t in &raw.templates {
            match PromptTemplate::builtin(t) {
                Ok(tpl) if !templates.contains(&tpl) => templates.push(tpl),
                Ok(_) => bad("templates", None, format!("template {t} listed twice")),
                Err(e) => bad("templates", None, e.to_string()),
            }
        }
        if let Err(e) = raw.chart.validate() {
            bad("[chart]", None, e.to_string());
        }
        if let CohortSource::Synthetic { spec } = &raw.cohort {
            if let Err(e) = spec.validate() {
                bad("source", Some("synthetic"), e.to_string());
            }
        }
        if let Err(e) = raw.extraction.range.validate() {
            bad("min", None, e.to_string());
        }
        if let Err(e) = validate_weights(&raw.ensemble.weights) {
            bad("weights", None, e.to_string());
        }
        if let Err(e) = raw.baselines.forest.validate() {
            bad("n_trees", None, e.to_string());
        }
        if let Err(e) = raw.baselines.cnn.validate() {
            bad("epochs", None, e.to_string());
        }

        if raw.backends.is_empty() {
            bad("backends", None, "at least one backend is required".into());
        }
        let mut backends: Vec<BackendConfig> = Vec::new();
        for mut b in raw.backends {
            if b.kind == "mock" && b.policy.as_deref() == Some("noisy") && b.seed.is_none() {
                b.seed = Some(raw.seeds.mocks);
            }
            let id = b.id.clone();
            match BackendConfig::try_from(b) {
                Ok(c) if backends.iter().any(|x| x.id == c.id) => {
                    bad("id", Some(&format!("\"{id}\"")), format!("duplicate backend id `{id}`"))
                }
                Ok(c) => backends.push(c),
                Err(e) => bad("id", Some(&format!("\"{id}\"")), e.to_string()),
            }
        }
        if let Some(sec) = &raw.extraction.secondary_backend {
            if !backends.iter().any(|b| &b.id == sec) {
                bad("secondary_backend", None, format!("secondary_backend `{sec}` is not a configured backend"));
            }
        }
        if let Some(list) = &raw.query.backends {
            if list.is_empty() {
                bad("backends", Some("["), "query.backends must name at least one backend".into());
            }
            for id in list {
                if !backends.iter().any(|b| &b.id == id) {
                    bad("backends", Some("["), format!("query backend `{id}` is not a configured backend"));
                }
            }
        } else if !backends.is_empty()
            && backends.iter().all(|b| Some(&b.id) == raw.extraction.secondary_backend.as_ref())
        {
            bad(
                "secondary_backend",
                None,
                "the only backend is the secondary extraction backend; list it under query.backends to forecast with it"
                    .into(),
            );
        }
        for w in raw.ensemble.weights.keys() {
            if !backends.iter().any(|b| &b.id == w) {
                bad("weights", None, format!("weight given for unknown backend `{w}`"));
            }
        }
        if !diags.is_empty() {
            return Err(diags);
        }
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
        let output_dir = resolve(raw.output_dir);
        let cache_dir = raw.cache_dir.map(resolve).unwrap_or_else(|| output_dir.join("cache"));
        let cohort = match raw.cohort {
            CohortSource::Files { visits, profiles } => CohortSource::Files {
                visits: resolve(visits),
                profiles: resolve(profiles),
            },
            s => s,
        };
        Ok(RunConfig {
            run_id: raw.run_id,
            output_dir,
            cache_dir,
            initial_width: raw.initial_width,
            train_fraction: raw.train_fraction,
            repeats: raw.repeats,
            templates,
            seeds: raw.seeds,
            cohort,
            chart: raw.chart,
            query: raw.query,
            extraction: raw.extraction,
            ensemble: raw.ensemble,
            baselines: raw.baselines,
            report: raw.report,
            backends,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_file_with_seeds(path, &[])
    }

    pub fn from_file_with_seeds(path: &Path, seed_overrides: &[(String, u64)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with_seeds(&text, base, seed_overrides).map_err(|d| {
            Error::Config(format!(
                "{}:\n{}",
                path.display(),
                d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
            ))
        })
    }

    pub fn set_run_id(&mut self, run_id: &str) -> Result<()> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::Config(format!("run_id `{run_id}` must be a plain directory name")));
        }
        self.run_id = run_id.to_string();
        Ok(())
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends.iter().map(|b| b.id.clone()).collect()
    }

    /// Backends queried for forecasts, in config order.
    pub fn query_backend_ids(&self) -> Vec<String> {
        match &self.query.backends {
            Some(list) => self.backend_ids().into_iter().filter(|id| list.contains(id)).collect(),
            None => self
                .backend_ids()
                .into_iter()
                .filter(|id| Some(id) != self.extraction.secondary_backend.as_ref())
                .collect(),
        }
    }

    pub fn template_ids(&self) -> Vec<u8> {
        self.templates.iter().map(|t| t.id).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// SHA-256 of the canonical JSON form of the resolved config, with the
    /// run id and output locations left out.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            for k in ["run_id", "output_dir", "cache_dir"] {
                o.remove(k);
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn weights(&self) -> Option<&BackendWeights> {
        (!self.ensemble.weights.is_empty()).then_some(&self.ensemble.weights)
    }
}

/// Parses `KEY=VALUE` seed overrides.
pub fn parse_seed_override(s: &str) -> Result<(String, u64)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("seed override `{s}` must look like KEY=VALUE")))?;
    let v: u64 = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("seed override `{s}`: value must be a non-negative integer")))?;
    Ok((k.trim().to_string(), v))
}

/// Canonical mapping used by tests and docs.
pub fn example_config() -> &'static str {
    EXAMPLE
}

const EXAMPLE: &str = r#"run_id = "demo"
output_dir = "runs"
initial_width = 3
train_fraction = 0.7
repeats = 3
templates = [1, 2, 3, 4]

[seeds]
split = 7
synthetic = 11
mocks = 13
baselines = 17

[cohort]
source = "synthetic"

[cohort.spec]
patients = 50
trajectory = { family = "linear", slope_per_90_days = -1.0 }

[extraction]
secondary_backend = "extractor"

[baselines.forest]
n_trees = 100

[[backends]]
id = "linear"
kind = "mock"
policy = "linear"

[[backends]]
id = "persistence"
kind = "mock"
policy = "persistence"

[[backends]]
id = "noisy"
kind = "mock"
policy = "noisy"
sigma = 1.5

[[backends]]
id = "extractor"
kind = "mock"
policy = "fixed"
reply = "40"
"#;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendKind, MockPolicy};

    #[test]
    fn example_parses() {
        let c = RunConfig::parse(EXAMPLE, Path::new("/tmp/x")).unwrap();
        assert_eq!(c.templates.len(), 4);
        assert_eq!(c.output_dir, Path::new("/tmp/x/runs"));
        assert_eq!(c.cache_dir, Path::new("/tmp/x/runs/cache"));
        let noisy = c.backends.iter().find(|b| b.id == "noisy").unwrap();
        assert_eq!(noisy.kind, BackendKind::Mock(MockPolicy::Noisy { sigma: 1.5, seed: 13 }));
        assert_eq!(c.baselines.forest.n_trees, 100);
        assert_eq!(c.baselines.forest.min_leaf, 2);
        assert_eq!(c.query_backend_ids(), vec!["linear", "persistence", "noisy"]);
    }

    #[test]
    fn explicit_query_backends() {
        let text = EXAMPLE.replace("templates = [1, 2, 3, 4]\n", "templates = [1, 2, 3, 4]\n\n[query]\nbackends = [\"extractor\", \"linear\"]\n");
        let c = RunConfig::parse(&text, Path::new(".")).unwrap();
        assert_eq!(c.query_backend_ids(), vec!["linear", "extractor"]);
        let bad = EXAMPLE.replace("templates = [1, 2, 3, 4]\n", "templates = [1, 2, 3, 4]\n\n[query]\nbackends = [\"nope\"]\n");
        assert!(RunConfig::parse(&bad, Path::new(".")).is_err());
    }

    #[test]
    fn digest_ignores_run_id_but_not_seeds() {
        let a = RunConfig::parse(EXAMPLE, Path::new(".")).unwrap();
        let b = RunConfig::parse(&EXAMPLE.replace("run_id = \"demo\"", "run_id = \"other\""), Path::new(".")).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.seeds.split = 8;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn syntax_error_is_line_anchored() {
        let text = EXAMPLE.replace("repeats = 3", "repeats = = 3");
        let d = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(d[0].line, Some(5), "{d:?}");
    }

    #[test]
    fn semantic_errors_are_line_anchored() {
        let text = EXAMPLE.replace("repeats = 3", "repeats = 0").replace("train_fraction = 0.7", "train_fraction = 1.5");
        let d = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        let lines: Vec<_> = d.iter().map(|d| d.line).collect();
        assert!(lines.contains(&Some(4)) && lines.contains(&Some(5)), "{d:?}");
    }

    #[test]
    fn inline_api_key_rejected() {
        let text = format!(
            "{EXAMPLE}\n[[backends]]\nid = \"r\"\nkind = \"remote\"\nadapter = \"openai_chat\"\nendpoint = \"https://x\"\nmodel = \"m\"\napi_key = \"sk-1\"\n"
        );
        let d = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(d[0].message.contains("api_key"), "{d:?}");
        assert!(d[0].line.is_some());
    }

    #[test]
    fn missing_seeds_rejected() {
        let text = EXAMPLE.replace("baselines = 17\n", "");
        assert!(RunConfig::parse(&text, Path::new(".")).is_err());
    }

    #[test]
    fn bad_backend_reference() {
        let text = EXAMPLE.replace("secondary_backend = \"extractor\"", "secondary_backend = \"nope\"");
        let d = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(d[0].line, Some(22), "{d:?}");
    }

    #[test]
    fn seed_overrides() {
        assert_eq!(parse_seed_override("split=42").unwrap(), ("split".into(), 42));
        assert!(parse_seed_override("split").is_err());
        assert!(parse_seed_override("split=-1").is_err());
        let mut s = Seeds { split: 0, synthetic: 0, mocks: 0, baselines: 0 };
        assert!(s.set("bogus", 1).is_err());
    }
}
