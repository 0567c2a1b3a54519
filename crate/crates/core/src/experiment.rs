//! End-to-end runs driven by one TOML file: preprocess, train each model,
//! evaluate, rank, and record every artifact in a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{CganConfig, CvaeConfig};
use crate::data::{
    load_meter_csv, load_metadata_csv, preprocess, save_dataset, synth_corpus, CsvSchema, MetadataTable, PreprocessOptions,
    ProcessedDataset, SynthCorpusConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_generator, EvalReport, ExtractorInfo, FeatureExtractor, ProbeEvaluator};
use crate::models::ModelKind;
use crate::training::{train, write_epoch_curves, Checkpoint, DiffusionConfig, ModelConfig, TrainConfig, DEFAULT_PROBE_SIZE};

pub const MANIFEST_FORMAT: &str = "meterdiff-experiment";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where raw readings come from: CSV files or the built-in synthetic corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub meters: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    #[serde(default)]
    pub schema: CsvSchema,
    pub synthetic: Option<SynthCorpusConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub repetitions: usize,
    pub base_seed: u64,
    pub extractor_seed: u64,
    /// Conditions per split scored by the epoch hooks.
    pub probe_size: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self { repetitions: 30, base_seed: 1000, extractor_seed: 0, probe_size: DEFAULT_PROBE_SIZE }
    }
}

/// Overrides for one model; anything left out takes the per-kind default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub probe_size: Option<usize>,
    pub architecture: Option<toml::Table>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Default seed for every model section that does not set its own.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub preprocess: PreprocessOptions,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    pub models: BTreeMap<String, ModelSection>,
}

fn default_name() -> String {
    "experiment".into()
}

/// A model section resolved into concrete configs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPlan {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub probe_size: usize,
}

impl ExperimentConfig {
    /// The shipped desk-scale setup on the synthetic corpus.
    pub fn desk_preset() -> Self {
        let section = |epochs, eval_every| ModelSection { epochs: Some(epochs), eval_every: Some(eval_every), ..Default::default() };
        Self {
            name: "desk".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            data: DataSection {
                synthetic: Some(SynthCorpusConfig { meters: 200, ..Default::default() }),
                ..Default::default()
            },
            preprocess: PreprocessOptions { subsample_meters: Some(200), ..Default::default() },
            evaluation: EvaluationSettings { repetitions: 5, ..Default::default() },
            models: BTreeMap::from([
                ("cvae".to_string(), section(20, 5)),
                ("cgan".to_string(), section(300, 50)),
                ("diffusion".to_string(), ModelSection { probe_size: Some(8), ..section(60, 30) }),
            ]),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        cfg.data.meters.as_mut().map(rebase);
        cfg.data.metadata.as_mut().map(rebase);
        Ok(cfg)
    }

    /// Resolves model sections in the fixed order cvae, cgan, diffusion.
    pub fn plans(&self) -> Result<Vec<ModelPlan>> {
        let mut by_kind = BTreeMap::new();
        for (name, section) in &self.models {
            let kind: ModelKind = name.parse()?;
            if by_kind.insert(kind, section).is_some() {
                return Err(Error::Config(format!("model {kind} is configured twice")));
            }
        }
        let mut plans = Vec::new();
        for (kind, s) in by_kind {
            let mut train = TrainConfig::for_kind(kind);
            train.seed = s.seed.unwrap_or(self.seed);
            if let Some(v) = s.epochs {
                train.epochs = v;
            }
            if let Some(v) = s.learning_rate {
                train.learning_rate = v;
            }
            if let Some(v) = s.batch_size {
                train.batch_size = v;
            }
            if let Some(v) = s.eval_every {
                train.eval_every = v;
            }
            train.validate()?;
            let arch = s.architecture.clone().unwrap_or_default();
            let bad = |e: toml::de::Error| Error::Config(format!("[models.{kind}.architecture]: {e}"));
            let model = match kind {
                ModelKind::Cvae => ModelConfig::Cvae(arch.try_into::<CvaeConfig>().map_err(bad)?),
                ModelKind::Cgan => ModelConfig::Cgan(arch.try_into::<CganConfig>().map_err(bad)?),
                ModelKind::Diffusion => ModelConfig::Diffusion(arch.try_into::<DiffusionConfig>().map_err(bad)?),
            };
            let probe_size = s.probe_size.unwrap_or(self.evaluation.probe_size);
            plans.push(ModelPlan { train, model, probe_size });
        }
        Ok(plans)
    }

    /// Checks everything that can be checked without doing real work.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        for plan in self.plans()? {
            // Building the model validates its architecture.
            crate::training::Model::new(&plan.model, 0)?;
        }
        if self.evaluation.repetitions == 0 {
            return Err(Error::Config("evaluation.repetitions must be at least 1".into()));
        }
        let d = &self.data;
        match (&d.meters, &d.metadata, &d.synthetic) {
            (Some(m), Some(md), None) => {
                for p in [m, md] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
            (None, None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "[data] needs either both `meters` and `metadata` paths or a [data.synthetic] table".into(),
                ))
            }
        }
        Ok(())
    }

    /// Content-addressed hash of the settings that determine the results.
    ///
    /// The output directory is excluded and data files are represented by
    /// the hash of their contents, so moving a run does not change it.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["output_dir"] = serde_json::Value::Null;
        if let Some(p) = &self.data.meters {
            v["data"]["meters"] = file_sha256(p)?.into();
        }
        if let Some(p) = &self.data.metadata {
            v["data"]["metadata"] = file_sha256(p)?.into();
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_string(&v)?.as_bytes())))
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, with `/` separators.
    pub path: String,
    pub role: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub split_seed: u64,
    pub models: BTreeMap<ModelKind, u64>,
    pub evaluation_base_seed: u64,
    pub extractor_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub format: String,
    pub format_version: u32,
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub stages_completed: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

impl ExperimentManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("experiment manifest: {e}")))?;
        if m.format != MANIFEST_FORMAT || m.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest {} v{}", m.format, m.format_version)));
        }
        Ok(m)
    }

    pub fn artifact(&self, role: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.role == role)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub model: ModelKind,
    pub mean: Option<f64>,
    /// 1-based; tied values share a rank.
    pub rank: usize,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRanking {
    pub metric: String,
    pub higher_is_better: bool,
    pub entries: Vec<RankEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub slice: String,
    pub metrics: Vec<MetricRanking>,
}

impl Ranking {
    pub fn best(&self, metric: &str) -> Vec<ModelKind> {
        self.metrics
            .iter()
            .filter(|m| m.metric == metric)
            .flat_map(|m| m.entries.iter().filter(|e| e.best).map(|e| e.model))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["slice", "metric", "rank", "model", "mean", "best"])?;
        for m in &self.metrics {
            for e in &m.entries {
                w.write_record([
                    self.slice.as_str(),
                    &m.metric,
                    &e.rank.to_string(),
                    e.model.as_str(),
                    &e.mean.map(|v| v.to_string()).unwrap_or_default(),
                    if e.best { "true" } else { "false" },
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Ranks models on each metric of the overall slice.
///
/// FID, KL and RMSE are better when lower, R² when higher. Ties share a
/// rank and are listed by model name; every model tied for first is
/// flagged. A metric a model could not produce ranks last.
pub fn compare_models(reports: &[EvalReport]) -> Result<Ranking> {
    let first = reports.first().ok_or_else(|| Error::Incomparable("no reports to compare".into()))?;
    for r in &reports[1..] {
        if r.extractor != first.extractor {
            return Err(Error::Incomparable(format!(
                "{} used extractor {:?}, {} used {:?}",
                first.model, first.extractor, r.model, r.extractor
            )));
        }
        if r.test_fingerprint != first.test_fingerprint {
            return Err(Error::Incomparable(format!("{} and {} were evaluated on different test splits", first.model, r.model)));
        }
    }
    let mut metrics = Vec::new();
    for metric in crate::evaluation::METRICS {
        let higher = metric == "r2";
        let mut rows: Vec<(ModelKind, Option<f64>)> = reports.iter().map(|r| (r.model, r.mean("overall", metric))).collect();
        rows.sort_by(|a, b| a.0.as_str().cmp(b.0.as_str()));
        let key = |v: Option<f64>| match v {
            Some(x) if x.is_finite() => if higher { -x } else { x },
            _ => f64::INFINITY,
        };
        rows.sort_by(|a, b| key(a.1).total_cmp(&key(b.1)));
        let mut entries: Vec<RankEntry> = Vec::new();
        for (i, (model, mean)) in rows.iter().enumerate() {
            let rank = match entries.last() {
                Some(prev) if key(prev.mean) == key(*mean) => prev.rank,
                _ => i + 1,
            };
            entries.push(RankEntry { model: *model, mean: *mean, rank, best: rank == 1 && mean.is_some() });
        }
        metrics.push(MetricRanking { metric: metric.into(), higher_is_better: higher, entries });
    }
    Ok(Ranking { slice: "overall".into(), metrics })
}

/// Results of a completed run.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub manifest: ExperimentManifest,
    pub dataset: ProcessedDataset,
    pub reports: Vec<EvalReport>,
    pub ranking: Ranking,
}

struct Recorder {
    dir: PathBuf,
    manifest: ExperimentManifest,
}

impl Recorder {
    fn rel(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
    }

    fn record(&mut self, path: &Path, role: &str) -> Result<()> {
        let bytes = std::fs::metadata(path)?.len();
        let artifact = Artifact { path: self.rel(path), role: role.into(), sha256: file_sha256(path)?, bytes };
        self.manifest.artifacts.retain(|a| a.path != artifact.path);
        self.manifest.artifacts.push(artifact);
        Ok(())
    }

    /// Records every file under `dir`, in sorted order.
    fn record_tree(&mut self, dir: &Path, role: &str) -> Result<()> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        for f in files {
            self.record(&f, role)?;
        }
        Ok(())
    }

    fn write(&self) -> Result<()> {
        std::fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        match f(self) {
            Ok(v) => {
                self.manifest.stages_completed.push(name.into());
                self.write()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.failed_stage = Some(name.into());
                self.manifest.error = Some(e.to_string());
                self.write()?;
                Err(e.in_stage(name))
            }
        }
    }
}

/// Removes the artifacts of a previous run so nothing stale is left over.
fn prepare_output(dir: &Path) -> Result<()> {
    if dir.join(MANIFEST_FILE).is_file() {
        let old = ExperimentManifest::load(dir)?;
        for a in &old.artifacts {
            let p = dir.join(&a.path);
            if p.is_file() {
                std::fs::remove_file(p)?;
            }
        }
        std::fs::remove_file(dir.join(MANIFEST_FILE))?;
    } else if dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Config(format!(
            "output directory {} is not empty and holds no previous run",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<(Vec<crate::data::MeterSeries>, MetadataTable)> {
    if let Some(s) = &cfg.data.synthetic {
        let corpus = synth_corpus(s)?;
        return Ok((corpus.series, MetadataTable { entries: corpus.metadata, rejected: Vec::new() }));
    }
    let meters = cfg.data.meters.as_ref().expect("validated");
    let metadata = cfg.data.metadata.as_ref().expect("validated");
    Ok((load_meter_csv(meters, cfg.data.schema)?, load_metadata_csv(metadata)?))
}

/// Runs the whole protocol and writes artifacts under `config.output_dir`.
///
/// On failure the manifest records the failed stage and lists whatever
/// was completed, and the error names the stage.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let plans = config.plans()?;
    let dir = config.output_dir.clone();
    prepare_output(&dir)?;
    let seeds = SeedRecord {
        split_seed: config.preprocess.split_seed,
        models: plans.iter().map(|p| (p.train.model_kind, p.train.seed)).collect(),
        evaluation_base_seed: config.evaluation.base_seed,
        extractor_seed: config.evaluation.extractor_seed,
    };
    let mut rec = Recorder {
        dir: dir.clone(),
        manifest: ExperimentManifest {
            format: MANIFEST_FORMAT.into(),
            format_version: MANIFEST_VERSION,
            name: config.name.clone(),
            config_hash: config.config_hash()?,
            config: config.clone(),
            seeds,
            status: "running".into(),
            failed_stage: None,
            error: None,
            stages_completed: Vec::new(),
            artifacts: Vec::new(),
        },
    };
    rec.write()?;

    let dataset = rec.stage("preprocess", |rec| {
        let (series, metadata) = load_inputs(config)?;
        let (ds, summary) = preprocess(series, &metadata, &config.preprocess)?;
        let ds_dir = rec.dir.join("dataset");
        save_dataset(&ds, &ds_dir)?;
        rec.record_tree(&ds_dir, "dataset")?;
        let summary_path = rec.dir.join("preprocess_summary.json");
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
        rec.record(&summary_path, "preprocess_summary")?;
        Ok(ds)
    })?;

    let extractor = FeatureExtractor::seeded_random_conv(config.evaluation.extractor_seed);
    let mut reports = Vec::new();
    for plan in &plans {
        let kind = plan.train.model_kind;
        let checkpoint = rec.stage(&format!("train:{kind}"), |rec| {
            let mut probe = ProbeEvaluator::new(&dataset, &extractor, plan.probe_size, config.evaluation.base_seed);
            let ck = train(&dataset, &plan.train, &plan.model, Some(&mut probe))?;
            let ck_dir = rec.dir.join("checkpoints").join(kind.as_str());
            ck.save(&ck_dir)?;
            rec.record_tree(&ck_dir, &format!("checkpoint:{kind}"))?;
            let curves = rec.dir.join("curves");
            std::fs::create_dir_all(&curves)?;
            let loss_path = curves.join(format!("{kind}_loss.csv"));
            write_loss_csv(&loss_path, &ck)?;
            rec.record(&loss_path, &format!("loss:{kind}"))?;
            if plan.train.eval_every > 0 {
                let path = curves.join(format!("{kind}_epoch_curves.csv"));
                write_epoch_curves(&path, &ck.history().metrics)?;
                rec.record(&path, &format!("epoch_curves:{kind}"))?;
            }
            Ok(ck)
        })?;
        let report = rec.stage(&format!("evaluate:{kind}"), |rec| {
            let model = checkpoint.model()?;
            let report = evaluate_generator(
                model.as_generator(),
                &dataset,
                &extractor,
                config.evaluation.repetitions,
                config.evaluation.base_seed,
            )?;
            let reports_dir = rec.dir.join("reports");
            std::fs::create_dir_all(&reports_dir)?;
            let path = reports_dir.join(format!("{kind}.json"));
            report.write_json(&path)?;
            rec.record(&path, &format!("eval_report:{kind}"))?;
            Ok(report)
        })?;
        reports.push(report);
    }

    let ranking = rec.stage("report", |rec| {
        let reports_dir = rec.dir.join("reports");
        let csv_path = reports_dir.join("eval_report.csv");
        EvalReport::write_csv(&reports, &csv_path)?;
        rec.record(&csv_path, "eval_report_csv")?;
        let ranking = compare_models(&reports)?;
        let rank_path = reports_dir.join("ranking.csv");
        ranking.write_csv(&rank_path)?;
        rec.record(&rank_path, "ranking")?;
        let combined = CombinedReport {
            config_hash: rec.manifest.config_hash.clone(),
            extractor: ExtractorInfo::from(&extractor),
            reports: reports.clone(),
            ranking: ranking.clone(),
        };
        let json_path = reports_dir.join("eval_report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&combined)? + "\n")?;
        rec.record(&json_path, "eval_report")?;
        Ok(ranking)
    })?;

    rec.manifest.status = "complete".into();
    rec.write()?;
    Ok(ExperimentOutcome { dir, manifest: rec.manifest, dataset, reports, ranking })
}

/// All model reports of a run plus their ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub config_hash: String,
    pub extractor: ExtractorInfo,
    pub reports: Vec<EvalReport>,
    pub ranking: Ranking,
}

/// `epoch,loss,<extra terms>`, one row per epoch.
pub fn write_loss_csv(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let h = checkpoint.history();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "loss".to_string()];
    header.extend(h.terms.keys().cloned());
    w.write_record(&header)?;
    for (e, loss) in h.loss.iter().enumerate() {
        let mut row = vec![(e + 1).to_string(), loss.to_string()];
        row.extend(h.terms.values().map(|v| v.get(e).map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
