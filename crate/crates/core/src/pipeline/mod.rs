// SPDX-License-Identifier: Apache-2.0

//! Staged, content-addressed runs.
//!
//! Stage `s` writes into `<output_dir>/<run_id>/<s>/` and finishes by writing
//! `stage.json`, which records a key derived from the config slice the stage
//! reads plus the keys of its upstream stages. A stage whose recorded key
//! matches is skipped; `manifest.json` at the run root is rewritten after
//! every stage and carries no timestamps.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{
    example_config, parse_seed_override, BaselineSettings, CohortSource, Diagnostic, EnsembleSettings, QuerySettings,
    ReportSettings, RunConfig, Seeds,
};

use crate::backend::{
    replay_run, Dispatcher, ModelResponse, NetworkMode, QueryRequest, RequestRecord, ResponseCache, Transport,
};
use crate::baseline::{train_baselines, BaselinePrediction};
use crate::chart::{chart_file_name, export_chart, read_chart, render_all};
use crate::cohort::{
    generate_synthetic_cohort, generate_windows, ingest_files, preprocess, split_patients, write_audit_csv,
    write_profiles_csv, write_visits_csv, AuditEntity, AuditRow, Cohort, PatientSplit, PredictionWindow,
};
use crate::ensemble::{build_ensembles, EnsembleTable};
use crate::error::{Error, Result};
use crate::extract::{audit, extract_all, ExtractionAudit, Prediction};
use crate::par::Execution;
use crate::prompt::{compose_data_text, render_prompt, PromptInstance};
use crate::report::{build_report, MetricsReport, ReportInputs};

/// Bumped whenever an artifact layout changes, invalidating old stages.
pub const ARTIFACT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Windows,
    Render,
    Query,
    Extract,
    Ensemble,
    Baselines,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Windows,
        Stage::Render,
        Stage::Query,
        Stage::Extract,
        Stage::Ensemble,
        Stage::Baselines,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Windows => "windows",
            Stage::Render => "render",
            Stage::Query => "query",
            Stage::Extract => "extract",
            Stage::Ensemble => "ensemble",
            Stage::Baselines => "baselines",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Windows => &[Stage::Ingest],
            Stage::Render => &[Stage::Windows],
            Stage::Query => &[Stage::Ingest, Stage::Windows, Stage::Render],
            Stage::Extract => &[Stage::Query],
            Stage::Ensemble => &[Stage::Extract],
            Stage::Baselines => &[Stage::Ingest, Stage::Windows],
            Stage::Report => &[Stage::Windows, Stage::Extract, Stage::Ensemble, Stage::Baselines],
        }
    }

    /// Artifacts that are byte-stable for a given key; their digests go into
    /// the manifest. Raw responses are left out since they carry transport
    /// status and receive times.
    fn stable_artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["cohort.json", "audit.csv", "summary.json"],
            Stage::Windows => &["windows.json", "split.json"],
            Stage::Render => &["charts.json"],
            Stage::Query => &["prompts.json", "requests.json"],
            Stage::Extract => &["predictions.json", "extraction_audit.json"],
            Stage::Ensemble => &["ensembles.json"],
            Stage::Baselines => &["predictions.json"],
            Stage::Report => &[
                "model_table.csv",
                "ensemble_table.csv",
                "significance.csv",
                "report.txt",
                "metrics.json",
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
            Error::Config(format!("unknown stage `{s}` (expected one of: {})", names.join(", ")))
        })
    }
}

/// Contents of `stage.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub config_digest: String,
    pub upstream: BTreeMap<Stage, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Executed,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub key: String,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub cohort_digest: String,
    pub patients: usize,
    pub visits: usize,
    pub median_visits: usize,
    pub dropped_visits: usize,
    pub dropped_patients: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartEntry {
    pub window_id: String,
    pub file: String,
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile<T> {
    format_version: u32,
    system: String,
    model: T,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Config slice each stage depends on. Paths never enter a key, only the
/// digests of the files they point at.
fn stage_params(config: &RunConfig, stage: Stage) -> Result<Value> {
    Ok(match stage {
        Stage::Ingest => match &config.cohort {
            CohortSource::Files { visits, profiles } => json!({
                "source": "files",
                "visits": file_digest(visits)?,
                "profiles": file_digest(profiles)?,
            }),
            CohortSource::Synthetic { spec } => json!({
                "source": "synthetic",
                "spec": spec,
                "seed": config.seeds.synthetic,
            }),
        },
        Stage::Windows => json!({
            "initial_width": config.initial_width,
            "train_fraction": config.train_fraction,
            "split_seed": config.seeds.split,
        }),
        Stage::Render => json!({ "chart": config.chart }),
        Stage::Query => json!({
            "templates": config.templates,
            "repeats": config.repeats,
            "lab_visit": config.query.lab_visit,
            "backends": backend_params(config, &config.query_backend_ids())?,
        }),
        Stage::Extract => json!({
            "extraction": config.extraction,
            "secondary": backend_params(config, config.extraction.secondary_backend.as_slice())?,
        }),
        Stage::Ensemble => json!({ "weights": config.ensemble.weights }),
        Stage::Baselines => json!({
            "baselines": config.baselines,
            "seed": config.seeds.baselines,
            "initial_width": config.initial_width,
        }),
        Stage::Report => json!({
            "report": config.report,
            "backends": config.query_backend_ids(),
            "templates": config.template_ids(),
        }),
    })
}

/// Answer-relevant settings of the named backends; transport knobs
/// (timeouts, retries, rate) are left out.
fn backend_params(config: &RunConfig, ids: &[String]) -> Result<Vec<Value>> {
    config
        .backends
        .iter()
        .filter(|b| ids.contains(&b.id))
        .map(|b| {
            let mut v = serde_json::to_value(b)?;
            if let Some(o) = v.as_object_mut() {
                for k in ["timeout_secs", "max_retries", "rate_limit_per_minute"] {
                    o.remove(k);
                }
            }
            Ok(v)
        })
        .collect()
}

/// Keys for every stage, in pipeline order.
pub fn stage_keys(config: &RunConfig) -> Result<BTreeMap<Stage, String>> {
    let mut keys = BTreeMap::new();
    for stage in Stage::ALL {
        let upstream: BTreeMap<&str, &String> = stage.upstream().iter().map(|u| (u.name(), &keys[u])).collect();
        let v = json!({
            "version": ARTIFACT_VERSION,
            "stage": stage.name(),
            "params": stage_params(config, stage)?,
            "upstream": upstream,
        });
        let key = sha256_hex(v.to_string().as_bytes());
        keys.insert(stage, key);
    }
    Ok(keys)
}

/// Runs stages of one configured run.
pub struct Pipeline {
    config: RunConfig,
    mode: NetworkMode,
    exec: Execution,
    keys: BTreeMap<Stage, String>,
    transports: BTreeMap<String, Arc<dyn Transport>>,
    remote_calls: AtomicU64,
}

impl Pipeline {
    pub fn new(config: RunConfig, mode: NetworkMode, exec: Execution) -> Result<Self> {
        let keys = stage_keys(&config)?;
        Ok(Pipeline {
            config,
            mode,
            exec,
            keys,
            transports: BTreeMap::new(),
            remote_calls: AtomicU64::new(0),
        })
    }

    /// Routes a remote backend through `transport` instead of HTTP.
    pub fn with_transport(mut self, backend_id: &str, transport: Arc<dyn Transport>) -> Self {
        self.transports.insert(backend_id.to_string(), transport);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.run_dir()
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir().join(stage.name())
    }

    pub fn models_dir(&self) -> PathBuf {
        self.run_dir().join("models")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir().join(MANIFEST_FILE)
    }

    pub fn stage_key(&self, stage: Stage) -> &str {
        &self.keys[&stage]
    }

    /// Remote calls issued by this pipeline so far (cache hits excluded).
    pub fn remote_calls(&self) -> u64 {
        self.remote_calls.load(Ordering::Relaxed)
    }

    fn record(&self, stage: Stage) -> Option<StageRecord> {
        read_json(&self.stage_dir(stage).join(STAGE_FILE)).ok()
    }

    /// True when the stage's artifacts exist and were built from the current config.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.record(stage).is_some_and(|r| r.key == self.keys[&stage])
    }

    fn check_upstream(&self, stage: Stage) -> Result<()> {
        for &up in stage.upstream() {
            match self.record(up) {
                None => {
                    return Err(Error::StageOrder(format!(
                        "stage `{stage}` needs artifacts from `{up}`, which has not run (run `{up}` first or use --all)"
                    )))
                }
                Some(r) if r.key != self.keys[&up] => {
                    return Err(Error::StageOrder(format!(
                        "stage `{stage}` needs `{up}`, whose artifacts are stale for this config (rerun `{up}` first or use --all)"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        self.check_upstream(stage)?;
        let key = self.keys[&stage].clone();
        if self.is_current(stage) {
            self.write_manifest()?;
            return Ok(StageOutcome {
                stage,
                key,
                status: StageStatus::UpToDate,
            });
        }
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match stage {
            Stage::Ingest => self.ingest(&dir)?,
            Stage::Windows => self.windows(&dir)?,
            Stage::Render => self.render(&dir)?,
            Stage::Query => self.query(&dir)?,
            Stage::Extract => self.extract(&dir)?,
            Stage::Ensemble => self.ensemble(&dir)?,
            Stage::Baselines => self.baselines(&dir)?,
            Stage::Report => self.report(&dir)?,
        }
        let record = StageRecord {
            stage,
            key: key.clone(),
            config_digest: self.config.digest(),
            upstream: stage.upstream().iter().map(|u| (*u, self.keys[u].clone())).collect(),
        };
        write_json(&dir.join(STAGE_FILE), &record)?;
        self.write_manifest()?;
        Ok(StageOutcome {
            stage,
            key,
            status: StageStatus::Executed,
        })
    }

    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn load<T: DeserializeOwned>(&self, stage: Stage, file: &str) -> Result<T> {
        read_json(&self.stage_dir(stage).join(file))
    }

    pub fn load_cohort(&self) -> Result<Cohort> {
        self.load(Stage::Ingest, "cohort.json")
    }

    pub fn load_windows(&self) -> Result<Vec<PredictionWindow>> {
        self.load(Stage::Windows, "windows.json")
    }

    pub fn load_split(&self) -> Result<PatientSplit> {
        self.load(Stage::Windows, "split.json")
    }

    pub fn load_responses(&self) -> Result<Vec<ModelResponse>> {
        self.load(Stage::Query, "responses.json")
    }

    pub fn load_predictions(&self) -> Result<Vec<Prediction>> {
        self.load(Stage::Extract, "predictions.json")
    }

    pub fn load_ensembles(&self) -> Result<EnsembleTable> {
        self.load(Stage::Ensemble, "ensembles.json")
    }

    pub fn load_baseline_predictions(&self) -> Result<Vec<BaselinePrediction>> {
        self.load(Stage::Baselines, "predictions.json")
    }

    pub fn load_report(&self) -> Result<MetricsReport> {
        self.load(Stage::Report, "metrics.json")
    }

    pub fn load_manifest(&self) -> Result<Value> {
        read_json(&self.manifest_path())
    }

    fn dispatcher(&self, ids: &[&str]) -> Result<Dispatcher> {
        let mut d = Dispatcher::new(Some(ResponseCache::new(&self.config.cache_dir)), self.mode);
        for b in self.config.backends.iter().filter(|b| ids.contains(&b.id.as_str())) {
            match self.transports.get(&b.id) {
                Some(t) => d.register_with_transport(b.clone(), Arc::clone(t)),
                None => d.register(b.clone())?,
            }
        }
        Ok(d)
    }

    fn ingest(&self, dir: &Path) -> Result<()> {
        let raw = match &self.config.cohort {
            CohortSource::Files { visits, profiles } => ingest_files(visits, profiles)?,
            CohortSource::Synthetic { spec } => generate_synthetic_cohort(spec, self.config.seeds.synthetic)?,
        };
        let (cohort, rows) = preprocess(&raw)?;
        write_json(&dir.join("cohort.json"), &cohort)?;
        write_bytes(&dir.join("audit.csv"), &csv_bytes(|b| write_audit_csv(&rows, b))?)?;
        write_bytes(&dir.join("visits.csv"), &csv_bytes(|b| write_visits_csv(&cohort, b))?)?;
        write_bytes(&dir.join("profiles.csv"), &csv_bytes(|b| write_profiles_csv(&cohort, b))?)?;
        let dropped_patients = rows.iter().filter(|r| r.entity == AuditEntity::Patient).count();
        write_json(
            &dir.join("summary.json"),
            &IngestSummary {
                cohort_digest: cohort.digest(),
                patients: cohort.patient_count(),
                visits: cohort.total_visits(),
                median_visits: cohort.median_visit_count(),
                dropped_visits: rows.len() - dropped_patients,
                dropped_patients,
            },
        )
    }

    fn windows(&self, dir: &Path) -> Result<()> {
        let cohort = self.load_cohort()?;
        let windows = generate_windows(&cohort, self.config.initial_width)?;
        let split = split_patients(&cohort, self.config.train_fraction, self.config.seeds.split)?;
        write_json(&dir.join("windows.json"), &windows)?;
        write_json(&dir.join("split.json"), &split)
    }

    fn render(&self, dir: &Path) -> Result<()> {
        let windows = self.load_windows()?;
        let charts = dir.join("charts");
        fs::create_dir_all(&charts).map_err(|e| Error::io(&charts, e))?;
        let images = render_all(&windows, &self.config.chart, self.exec)?;
        let entries = self.exec.try_map(&images, |img| -> Result<ChartEntry> {
            let file = chart_file_name(&img.window_id);
            export_chart(img, &charts.join(&file))?;
            Ok(ChartEntry {
                window_id: img.window_id.to_string(),
                file: format!("charts/{file}"),
                digest: img.digest.clone(),
            })
        })?;
        write_json(&dir.join("charts.json"), &entries)
    }

    fn query(&self, dir: &Path) -> Result<()> {
        let cohort = self.load_cohort()?;
        let windows = self.load_windows()?;
        let charts = self.stage_dir(Stage::Render).join("charts");
        let images = self
            .exec
            .try_map(&windows, |w| read_chart(&charts.join(chart_file_name(&w.id())), w.id()))?;
        let templates = &self.config.templates;
        let prompts: Vec<Vec<PromptInstance>> = self.exec.try_map_range(windows.len(), |wi| {
            let w = &windows[wi];
            let profile = cohort
                .profile(&w.patient_id)
                .ok_or_else(|| Error::Validation(format!("no profile for patient {}", w.patient_id)))?;
            let data_text = compose_data_text(w, profile, self.config.query.lab_visit);
            templates.iter().map(|t| render_prompt(t, w, &data_text, &images[wi])).collect()
        })?;

        let query_ids = self.config.query_backend_ids();
        let ids: Vec<&str> = query_ids.iter().map(String::as_str).collect();
        let dispatcher = self.dispatcher(&ids)?;
        let mut jobs = Vec::new();
        for wi in 0..windows.len() {
            for ti in 0..templates.len() {
                for bi in 0..ids.len() {
                    for attempt in 1..=self.config.repeats {
                        jobs.push((wi, ti, bi, attempt));
                    }
                }
            }
        }
        let result = self
            .exec
            .try_map_bounded(self.config.query.parallelism, &jobs, |&(wi, ti, bi, attempt)| {
                let t = &templates[ti];
                dispatcher.query(
                    ids[bi],
                    &QueryRequest {
                        prompt_text: &prompts[wi][ti].rendered_text,
                        template_id: Some(t.id),
                        kind: Some(t.kind),
                        image: Some(&images[wi]),
                        window: Some(&windows[wi]),
                        attempt_index: attempt,
                    },
                )
            });
        self.remote_calls.fetch_add(dispatcher.remote_calls(), Ordering::Relaxed);
        let responses = result?;
        let requests: Vec<RequestRecord> = responses.iter().map(request_record).collect();
        let flat: Vec<&PromptInstance> = prompts.iter().flatten().collect();
        write_json(&dir.join("prompts.json"), &flat)?;
        write_json(&dir.join("responses.json"), &responses)?;
        write_json(&dir.join("requests.json"), &requests)
    }

    fn extract_responses(&self, responses: &[ModelResponse]) -> Result<Vec<Prediction>> {
        let dispatcher = match self.config.extraction.secondary_backend.as_deref() {
            Some(b) => Some(self.dispatcher(&[b])?),
            None => None,
        };
        let result = extract_all(responses, &self.config.extraction, dispatcher.as_ref(), self.exec);
        if let Some(d) = &dispatcher {
            self.remote_calls.fetch_add(d.remote_calls(), Ordering::Relaxed);
        }
        result
    }

    fn extract(&self, dir: &Path) -> Result<()> {
        let predictions = self.extract_responses(&self.load_responses()?)?;
        write_json(&dir.join("predictions.json"), &predictions)?;
        write_json(&dir.join("extraction_audit.json"), &audit(&predictions))
    }

    fn ensemble(&self, dir: &Path) -> Result<()> {
        let table = build_ensembles(&self.load_predictions()?, self.config.weights(), self.exec)?;
        write_json(&dir.join("ensembles.json"), &table)
    }

    fn baselines(&self, dir: &Path) -> Result<()> {
        let models_dir = self.models_dir();
        if models_dir.exists() {
            fs::remove_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
        }
        if !self.config.baselines.enabled {
            return write_json(&dir.join("predictions.json"), &Vec::<BaselinePrediction>::new());
        }
        let cohort = self.load_cohort()?;
        let windows = self.load_windows()?;
        let split = self.load_split()?;
        let (models, predictions) = train_baselines(
            &cohort,
            &windows,
            &split,
            self.config.initial_width,
            &self.config.baselines.config(),
            self.config.seeds.baselines,
            self.exec,
        )?;
        fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
        write_json(
            &models_dir.join(format!("rf.v{MODEL_FORMAT_VERSION}.json")),
            &ModelFile {
                format_version: MODEL_FORMAT_VERSION,
                system: crate::baseline::RF_SYSTEM.into(),
                model: json!({ "encoder": models.encoder, "forest": models.forest }),
            },
        )?;
        write_json(
            &models_dir.join(format!("cnn.v{MODEL_FORMAT_VERSION}.json")),
            &ModelFile {
                format_version: MODEL_FORMAT_VERSION,
                system: crate::baseline::CNN_SYSTEM.into(),
                model: json!({ "encoder": models.encoder, "seq_len": models.seq_len, "cnn": models.cnn }),
            },
        )?;
        write_json(&dir.join("predictions.json"), &predictions)
    }

    fn build_metrics(
        &self,
        predictions: &[Prediction],
        ensembles: &EnsembleTable,
        baselines: &[BaselinePrediction],
    ) -> Result<MetricsReport> {
        let windows = self.load_windows()?;
        let split = self.load_split()?;
        build_report(&ReportInputs {
            windows: &windows,
            split: &split,
            predictions,
            ensembles,
            baselines,
            backends: &self.config.query_backend_ids(),
            templates: &self.config.template_ids(),
        })
    }

    fn report(&self, dir: &Path) -> Result<()> {
        let report = self.build_metrics(
            &self.load_predictions()?,
            &self.load_ensembles()?,
            &self.load_baseline_predictions()?,
        )?;
        write_bytes(&dir.join("model_table.csv"), report.model_table_csv()?.as_bytes())?;
        write_bytes(&dir.join("ensemble_table.csv"), report.ensemble_table_csv()?.as_bytes())?;
        write_bytes(&dir.join("significance.csv"), report.significance_csv()?.as_bytes())?;
        write_bytes(&dir.join("report.txt"), report.to_text(self.config.report.decimals).as_bytes())?;
        write_json(&dir.join("metrics.json"), &report)
    }

    /// Recomputes the metrics from cached responses alone, using the request
    /// list recorded in the manifest.
    pub fn replay_metrics(&self) -> Result<MetricsReport> {
        for s in [Stage::Query, Stage::Baselines] {
            if !self.is_current(s) {
                return Err(Error::StageOrder(format!("replay needs a completed `{s}` stage")));
            }
        }
        let manifest = self.load_manifest()?;
        let requests: Vec<RequestRecord> = serde_json::from_value(manifest["requests"].clone())?;
        let responses = replay_run(&ResponseCache::new(&self.config.cache_dir), &requests)?;
        let replayer = Pipeline {
            config: self.config.clone(),
            mode: NetworkMode::Replay,
            exec: self.exec,
            keys: self.keys.clone(),
            transports: BTreeMap::new(),
            remote_calls: AtomicU64::new(0),
        };
        let predictions = replayer.extract_responses(&responses)?;
        let ensembles = build_ensembles(&predictions, self.config.weights(), self.exec)?;
        self.build_metrics(&predictions, &ensembles, &self.load_baseline_predictions()?)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut stages = BTreeMap::new();
        let mut artifacts = BTreeMap::new();
        for stage in Stage::ALL.into_iter().filter(|s| self.is_current(*s)) {
            stages.insert(stage.name(), self.keys[&stage].clone());
            let dir = self.stage_dir(stage);
            for file in stage.stable_artifacts() {
                artifacts.insert(format!("{stage}/{file}"), file_digest(&dir.join(file))?);
            }
        }
        if self.is_current(Stage::Baselines) && self.models_dir().exists() {
            for system in ["rf", "cnn"] {
                let name = format!("{system}.v{MODEL_FORMAT_VERSION}.json");
                artifacts.insert(format!("models/{name}"), file_digest(&self.models_dir().join(name))?);
            }
        }
        let mut m = json!({
            "format_version": ARTIFACT_VERSION,
            "config_digest": self.config.digest(),
            "seeds": self.config.seeds,
            "stages": stages,
            "artifacts": artifacts,
        });
        if self.is_current(Stage::Ingest) {
            let s: IngestSummary = self.load(Stage::Ingest, "summary.json")?;
            m["cohort_digest"] = json!(s.cohort_digest);
            m["cohort"] = json!(s);
        }
        if self.is_current(Stage::Query) {
            let requests: Vec<RequestRecord> = self.load(Stage::Query, "requests.json")?;
            m["requests"] = json!(requests);
        }
        if self.is_current(Stage::Extract) {
            let a: ExtractionAudit = self.load(Stage::Extract, "extraction_audit.json")?;
            m["extraction_audit"] = json!(a);
        }
        if self.is_current(Stage::Report) {
            let r = self.load_report()?;
            let cells: Vec<Value> = r
                .model_table
                .iter()
                .map(|row| {
                    json!({
                        "system": row.system,
                        "prompt": row.prompt,
                        "train": { "windows": row.train.n_windows, "failed": row.train.n_failed },
                        "validation": { "windows": row.validation.n_windows, "failed": row.validation.n_failed },
                    })
                })
                .collect();
            m["cell_counts"] = json!(cells);
        }
        let dir = self.run_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&self.manifest_path(), &m)
    }

    /// Human-readable preprocessing and extraction audits.
    pub fn audit_summary(&self) -> Result<String> {
        use std::fmt::Write;
        let mut s = String::new();
        if !self.is_current(Stage::Ingest) {
            return Err(Error::StageOrder("no current `ingest` stage for this config".into()));
        }
        let summary: IngestSummary = self.load(Stage::Ingest, "summary.json")?;
        let path = self.stage_dir(Stage::Ingest).join("audit.csv");
        let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
        let mut by_reason: BTreeMap<String, usize> = BTreeMap::new();
        for rec in reader.deserialize::<AuditRow>() {
            let row = rec.map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
            *by_reason.entry(format!("{} {}", row.entity, row.reason.as_str())).or_default() += 1;
        }
        let _ = writeln!(s, "Preprocessing");
        let _ = writeln!(
            s,
            "  kept {} patients, {} visits (median {} per patient)",
            summary.patients, summary.visits, summary.median_visits
        );
        for (reason, n) in &by_reason {
            let _ = writeln!(s, "  dropped {n:>5} {reason}");
        }
        if self.is_current(Stage::Extract) {
            let a: ExtractionAudit = self.load(Stage::Extract, "extraction_audit.json")?;
            let _ = writeln!(s, "Extraction");
            let _ = writeln!(
                s,
                "  {:<20} {:>6} {:>9} {:>8} {:>9} {:>7}",
                "backend", "prompt", "attempted", "pattern", "secondary", "failed"
            );
            for (backend, cells) in &a {
                for (t, c) in cells {
                    let _ = writeln!(
                        s,
                        "  {backend:<20} {t:>6} {:>9} {:>8} {:>9} {:>7}",
                        c.attempted, c.pattern, c.secondary, c.failed
                    );
                }
            }
        }
        Ok(s)
    }
}

fn request_record(r: &ModelResponse) -> RequestRecord {
    RequestRecord {
        backend_id: r.backend_id.clone(),
        window_id: r.window_id.clone(),
        template_id: r.template_id,
        attempt_index: r.attempt_index,
        cache_key: r.cache_key.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        let text = example_config()
            .replace("patients = 50", "patients = 8\nvisits = { range = { min = 7, max = 7 } }")
            .replace("n_trees = 100", "n_trees = 5\n\n[baselines.cnn]\nepochs = 3");
        RunConfig::parse(&text, dir).unwrap()
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!(matches!("render2".parse::<Stage>(), Err(Error::Config(_))));
    }

    #[test]
    fn keys_chain_through_upstream() {
        let dir = tempfile::tempdir().unwrap();
        let a = small(dir.path());
        let mut b = a.clone();
        b.report.decimals = 3;
        let (ka, kb) = (stage_keys(&a).unwrap(), stage_keys(&b).unwrap());
        for s in Stage::ALL {
            assert_eq!(ka[&s] == kb[&s], s != Stage::Report, "{s}");
        }
        let mut c = a.clone();
        c.seeds.split = 99;
        let kc = stage_keys(&c).unwrap();
        assert_eq!(ka[&Stage::Ingest], kc[&Stage::Ingest]);
        assert_eq!(ka[&Stage::Render] == kc[&Stage::Render], false);
    }

    #[test]
    fn query_before_render_is_stage_order_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small(dir.path()), NetworkMode::Offline, Execution::Sequential).unwrap();
        p.run_stage(Stage::Ingest).unwrap();
        p.run_stage(Stage::Windows).unwrap();
        let e = p.run_stage(Stage::Query).unwrap_err();
        assert!(matches!(e, Error::StageOrder(_)), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn full_run_then_skip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small(dir.path()), NetworkMode::Offline, Execution::Parallel).unwrap();
        let first = p.run_all().unwrap();
        assert!(first.iter().all(|o| o.status == StageStatus::Executed));
        let second = p.run_all().unwrap();
        assert!(second.iter().all(|o| o.status == StageStatus::UpToDate));
        let m = p.load_manifest().unwrap();
        assert!(m["requests"].as_array().is_some_and(|r| !r.is_empty()));
        assert!(p.audit_summary().unwrap().contains("Extraction"));
    }
}
