use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use meterdiff::data::{
    denormalize, encode_conditions, load_dataset, load_meter_csv, load_metadata_csv, preprocess, save_dataset, synth_corpus,
    write_long_csv, BuildingType, CsvSchema, MeterMetadata, MeterType, PreprocessOptions, ProcessedDataset, Split,
    SynthCorpusConfig,
};
use meterdiff::evaluation::{evaluate_all, EvalReport, FeatureExtractor, ProbeEvaluator};
use meterdiff::experiment::{run_experiment, ExperimentConfig, ExperimentManifest};
use meterdiff::models::ModelKind;
use meterdiff::plots::{render_plots, ConditionFilter, LabeledGrid, PlotData, PlotKind, PlotSpec};
use meterdiff::seeds::{derive_seed, name_key};
use meterdiff::training::{train, write_epoch_curves, Checkpoint, ModelConfig, TrainConfig, DEFAULT_PROBE_SIZE};

#[derive(Parser, Debug)]
#[command(name = "meterdiff", version, about = "Synthetic building-meter data from conditional generative models")]
struct Cli {
    /// Default directory for outputs when a command's --out is omitted.
    #[arg(long, global = true, env = "METERDIFF_OUT", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load raw meter and metadata CSVs and summarize them.
    Ingest(IngestArgs),
    /// Clean, filter, normalize and split raw data into a dataset directory.
    Preprocess(PreprocessArgs),
    /// Train one model on a processed dataset.
    Train(TrainArgs),
    /// Generate synthetic annual series for one set of conditions.
    Generate(GenerateArgs),
    /// Score a checkpoint against the test split.
    Evaluate(EvaluateArgs),
    /// Render figures from an experiment run or from individual artifacts.
    Report(ReportArgs),
    /// Run the full protocol from a TOML config.
    Experiment(ExperimentArgs),
    /// Write the built-in synthetic stand-in corpus as CSV files.
    SynthCorpus(SynthArgs),
}

#[derive(Args, Debug)]
struct RawInputs {
    /// Meter readings CSV.
    #[arg(long)]
    meters: PathBuf,
    /// Building metadata CSV.
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long, default_value = "wide")]
    schema: CsvSchema,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    inputs: RawInputs,
    /// Summary JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[command(flatten)]
    inputs: RawInputs,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long)]
    subsample_meters: Option<usize>,
    #[arg(long, default_value_t = 1.5)]
    iqr_multiplier: f64,
    #[arg(long, default_value_t = 0.05)]
    max_missing: f64,
    /// Dataset directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score probe conditions every this many epochs.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, default_value_t = DEFAULT_PROBE_SIZE)]
    probe_size: usize,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    /// TOML file with architecture overrides for the chosen model.
    #[arg(long)]
    architecture: Option<PathBuf>,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Checkpoint directory.
    #[arg(long, alias = "checkpoint")]
    model: PathBuf,
    #[arg(long)]
    meter_type: MeterType,
    #[arg(long)]
    building_type: BuildingType,
    #[arg(long, allow_negative_numbers = true)]
    lat: f64,
    #[arg(long, allow_negative_numbers = true)]
    lon: f64,
    #[arg(long)]
    year: i32,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rescale output to the range of this meter from --dataset.
    #[arg(long, requires = "dataset")]
    scale_like: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output CSV in the long schema.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, alias = "model")]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 30)]
    repetitions: usize,
    #[arg(long, default_value_t = 1000)]
    base_seed: u64,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    /// Report JSON path; a CSV is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Experiment output directory; supplies dataset, checkpoints and reports.
    #[arg(long, conflicts_with_all = ["dataset", "checkpoint", "eval_report"])]
    run: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    eval_report: Vec<PathBuf>,
    /// Figure kinds; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    kind: Vec<PlotKind>,
    #[arg(long)]
    meter_type: Option<MeterType>,
    #[arg(long)]
    building_type: Option<BuildingType>,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// Directory for figures.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the default model seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    meters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for meters.csv and metadata.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_path(explicit: &Option<PathBuf>, out_dir: &Path, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out_dir.join(default))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(serde::Serialize)]
struct IngestSummary {
    series: usize,
    meters: usize,
    years: Vec<i32>,
    mean_missing_fraction: f64,
    metadata_entries: usize,
    metadata_rejected: Vec<(String, String)>,
    meters_without_metadata: usize,
}

fn ingest(a: &IngestArgs, out_dir: &Path) -> Result<()> {
    let series = load_meter_csv(&a.inputs.meters, a.inputs.schema)?;
    let table = load_metadata_csv(&a.inputs.metadata)?;
    let ids = table.by_id();
    let mut meters: Vec<&str> = series.iter().map(|s| s.meter_id.as_str()).collect();
    meters.sort_unstable();
    meters.dedup();
    let mut years: Vec<i32> = series.iter().map(|s| s.year).collect();
    years.sort_unstable();
    years.dedup();
    let summary = IngestSummary {
        series: series.len(),
        meters: meters.len(),
        years,
        mean_missing_fraction: series.iter().map(|s| s.missing_fraction()).sum::<f64>() / series.len().max(1) as f64,
        metadata_entries: table.entries.len(),
        metadata_rejected: table.rejected.clone(),
        meters_without_metadata: meters.iter().filter(|m| !ids.contains_key(*m)).count(),
    };
    let path = out_path(&a.out, out_dir, "ingest_summary.json");
    write_json(&path, &summary)?;
    println!("{} series from {} meters; summary in {}", summary.series, summary.meters, path.display());
    Ok(())
}

fn preprocess_cmd(a: &PreprocessArgs, out_dir: &Path) -> Result<()> {
    let series = load_meter_csv(&a.inputs.meters, a.inputs.schema)?;
    let table = load_metadata_csv(&a.inputs.metadata)?;
    let opts = PreprocessOptions {
        iqr_multiplier: a.iqr_multiplier,
        max_missing_frac: a.max_missing,
        train_fraction: a.train_fraction,
        split_seed: a.split_seed,
        subsample_meters: a.subsample_meters,
    };
    let (ds, summary) = preprocess(series, &table, &opts)?;
    let dir = out_path(&a.out, out_dir, "dataset");
    save_dataset(&ds, &dir)?;
    write_json(&dir.join("preprocess_summary.json"), &summary)?;
    println!("{} meters retained ({} train, {} test) in {}", summary.retained, summary.train, summary.test, dir.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, out_dir: &Path) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let mut cfg = TrainConfig::for_kind(a.model);
    cfg.seed = a.seed;
    cfg.eval_every = a.eval_every;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    let model = match &a.architecture {
        None => ModelConfig::default_for(a.model),
        Some(p) => {
            let table: toml::Table = toml::from_str(&std::fs::read_to_string(p)?).context("architecture file")?;
            let value = serde_json::json!({ "kind": a.model.as_str(), "config": table });
            serde_json::from_value(value).context("architecture file")?
        }
    };
    let extractor = FeatureExtractor::seeded_random_conv(a.extractor_seed);
    let mut probe = ProbeEvaluator::new(&ds, &extractor, a.probe_size, a.seed);
    let ck = train(&ds, &cfg, &model, Some(&mut probe))?;
    let dir = out_path(&a.out, out_dir, &format!("checkpoint_{}", a.model));
    ck.save(&dir)?;
    if cfg.eval_every > 0 {
        write_epoch_curves(&dir.join("epoch_curves.csv"), &ck.history().metrics)?;
    }
    match ck.history().loss.last() {
        Some(l) => println!("trained {} for {} epochs, final loss {l:.6}; checkpoint in {}", a.model, cfg.epochs, dir.display()),
        None => println!("saved untrained {} checkpoint in {}", a.model, dir.display()),
    }
    Ok(())
}

fn generate(a: &GenerateArgs, out_dir: &Path) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let ck = Checkpoint::load(&a.model)?;
    let model = ck.model()?;
    let meta = MeterMetadata {
        meter_id: "synthetic".into(),
        building_id: String::new(),
        meter_type: a.meter_type,
        building_type: a.building_type,
        latitude: a.lat,
        longitude: a.lon,
    };
    let cond = encode_conditions(&meta, a.year, &ck.manifest.condition_schema.bounds)?;
    let seeds: Vec<u64> = (0..a.count as u64).map(|i| derive_seed(a.seed, &[i])).collect();
    let grids = model.as_generator().generate(&vec![cond; a.count], &seeds)?;
    let scale = match &a.scale_like {
        None => None,
        Some(id) => {
            let ds = load_dataset(a.dataset.as_ref().expect("clap enforces --dataset"))?;
            let i = ds.position(id).with_context(|| format!("meter {id} is not in the dataset"))?;
            let r = &ds.records[i];
            Some((r.norm_min, r.norm_max))
        }
    };
    let rows: Vec<(String, i32, Vec<f32>)> = grids
        .outer_iter()
        .enumerate()
        .map(|(i, g)| {
            let values: Vec<f32> = match scale {
                None => g.iter().copied().collect(),
                Some((lo, hi)) => {
                    denormalize(&g.iter().map(|v| *v as f64).collect::<Vec<_>>(), lo, hi).into_iter().map(|v| v as f32).collect()
                }
            };
            (format!("synthetic-{}-{i:03}", ck.kind()), a.year, values)
        })
        .collect();
    let path = out_path(&a.out, out_dir, "generated.csv");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_long_csv(&path, &rows)?;
    println!("wrote {} {} series to {}", a.count, ck.kind(), path.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs, out_dir: &Path) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let extractor = FeatureExtractor::seeded_random_conv(a.extractor_seed);
    let report = evaluate_all(&ck, &ds, &extractor, a.repetitions, a.base_seed)?;
    let path = out_path(&a.out, out_dir, &format!("eval_{}.json", ck.kind()));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    report.write_json(&path)?;
    EvalReport::write_csv(std::slice::from_ref(&report), &path.with_extension("csv"))?;
    for m in meterdiff::evaluation::METRICS {
        let stat = &report.slice("overall").expect("overall slice").metrics[m];
        match (stat.mean, stat.std) {
            (Some(mean), Some(sd)) => println!("{m:>5}: {mean:.4} ± {sd:.4}"),
            (Some(mean), None) => println!("{m:>5}: {mean:.4}"),
            _ => println!("{m:>5}: n/a"),
        }
    }
    Ok(())
}

fn labeled(ds: &ProcessedDataset, i: usize, grid: ndarray::Array2<f32>) -> LabeledGrid {
    let r = &ds.records[i];
    LabeledGrid { meter_type: r.meter_type, building_type: r.building_type, year: r.year, grid }
}

fn report(a: &ReportArgs, out_dir: &Path) -> Result<()> {
    let (dataset_dir, checkpoints, report_paths) = match &a.run {
        Some(run) => {
            let m = ExperimentManifest::load(run)?;
            let mut cks = Vec::new();
            let mut reps = Vec::new();
            for kind in ModelKind::ALL {
                if m.artifacts.iter().any(|x| x.role == format!("checkpoint:{kind}")) {
                    cks.push(run.join("checkpoints").join(kind.as_str()));
                }
                if let Some(x) = m.artifact(&format!("eval_report:{kind}")) {
                    reps.push(run.join(&x.path));
                }
            }
            (run.join("dataset"), cks, reps)
        }
        None => {
            let Some(ds) = &a.dataset else { bail!("report needs --run or --dataset") };
            (ds.clone(), a.checkpoint.clone(), a.eval_report.clone())
        }
    };
    let ds = load_dataset(&dataset_dir)?;
    let filter = ConditionFilter { meter_type: a.meter_type, building_type: a.building_type };
    let test = ds.indices(Split::Test);
    let pool: Vec<usize> = {
        let matching: Vec<usize> = test.iter().copied().filter(|&i| filter.matches(ds.records[i].meter_type, ds.records[i].building_type)).collect();
        if matching.is_empty() {
            // Fall back to every meter so small test splits still plot.
            (0..ds.len()).filter(|&i| filter.matches(ds.records[i].meter_type, ds.records[i].building_type)).collect()
        } else {
            matching
        }
    };
    let chosen: Vec<usize> = pool.iter().copied().take(a.samples).collect();
    let mut data = PlotData {
        real: chosen.iter().map(|&i| labeled(&ds, i, ds.image(i).to_owned())).collect(),
        ..Default::default()
    };
    for path in &checkpoints {
        let ck = Checkpoint::load(path)?;
        ck.check_dataset(&ds)?;
        let model = ck.model()?;
        let conds: Vec<_> = chosen.iter().map(|&i| ds.condition(i)).collect();
        let seeds: Vec<u64> = chosen.iter().map(|&i| derive_seed(a.seed, &[name_key(&ds.records[i].meter_id)])).collect();
        let grids = if conds.is_empty() { ndarray::Array3::zeros((0, 0, 0)) } else { model.as_generator().generate(&conds, &seeds)? };
        let synth = chosen.iter().zip(grids.outer_iter()).map(|(&i, g)| labeled(&ds, i, g.to_owned())).collect();
        data.synthetic.push((ck.kind().to_string(), synth));
        data.epoch_curves.push((ck.kind().to_string(), ck.history().metrics.clone()));
    }
    for p in &report_paths {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        data.reports.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    let kinds = if a.kind.is_empty() { PlotKind::ALL.to_vec() } else { a.kind.clone() };
    let dir = out_path(&a.out, out_dir, "figures");
    for kind in kinds {
        let spec = PlotSpec { kind, filter, samples: a.samples, output: dir.clone() };
        let path = render_plots(&spec, &data).with_context(|| format!("rendering {}", kind.as_str()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn experiment(a: &ExperimentArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let outcome = run_experiment(&cfg)?;
    for m in &outcome.ranking.metrics {
        let best: Vec<&str> = m.entries.iter().filter(|e| e.best).map(|e| e.model.as_str()).collect();
        println!("{:>5}: best {}", m.metric, best.join(", "));
    }
    println!("artifacts in {}", outcome.dir.display());
    Ok(())
}

fn synth(a: &SynthArgs, out_dir: &Path) -> Result<()> {
    let corpus = synth_corpus(&SynthCorpusConfig { meters: a.meters, seed: a.seed, ..Default::default() })?;
    let dir = out_path(&a.out, out_dir, "synth_corpus");
    corpus.write(&dir)?;
    println!("wrote {} meters to {}", corpus.metadata.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Preprocess(a) => preprocess_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Generate(a) => generate(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Report(a) => report(a, out),
        Command::Experiment(a) => experiment(a),
        Command::SynthCorpus(a) => synth(a, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
