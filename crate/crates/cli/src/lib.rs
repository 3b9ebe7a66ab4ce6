//! Subcommand implementations behind the `cchart` binary.
//!
//! Each `cmd_*` function takes a fully resolved [`RunConfig`] plus paths and
//! writes its artifacts; `main.rs` only parses arguments and maps errors to
//! exit codes.

pub mod config;
pub mod svg;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cchart::dataset::{read_dataset, write_dataset, Dataset};
use cchart::features::{extract_features, write_features_csv, FeatureVector};
use cchart::metrics::{evaluate, MetricsReport};
use cchart::model::{init_model, ChartModel};
use cchart::scenario::generate_dataset;
use cchart::selection::{select_inertial, select_triplets, InertialSelection, TripletSelection};
use cchart::train::{embed_dataset, train, write_loss_csv, EpochLoss};
use cchart::Error;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("run {name:?} failed: {source}")]
    Run { name: String, source: Box<CliError> },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 for numeric failures during a run, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Numeric(_)) => 2,
            CliError::Run { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Provenance record shared by all artifacts: full config, its hash, seeds.
pub fn provenance(cfg: &RunConfig, command: &str) -> Value {
    let settings: serde_json::Map<String, Value> = config::KEYS
        .iter()
        .map(|(k, _)| (k.to_string(), Value::String(cfg.get(k))))
        .collect();
    json!({
        "tool": "cchart",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_hash": cfg.hash(),
        "seeds": {
            "scenario": cfg.scenario.rng_seed,
            "selection": cfg.selection_seed,
            "model": cfg.model_seed,
            "train": cfg.train_seed,
            "eval": cfg.eval_seed,
        },
        "config": settings,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

pub struct GenerateSummary {
    pub n: usize,
    pub antennas: usize,
    pub subcarriers: usize,
    pub duration_s: f64,
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<GenerateSummary> {
    cfg.scenario.validate()?;
    let ds = generate_dataset(&cfg.scenario)?;
    write_dataset(&ds, out)?;
    let mut prov = provenance(cfg, "generate");
    prov["output"] = json!({ "path": out.display().to_string(), "sha256": sha256_file(out)? });
    write_json(&sidecar(out), &prov)?;
    let ts = ds.timestamps();
    Ok(GenerateSummary {
        n: ds.len(),
        antennas: ds.meta.antennas,
        subcarriers: ds.meta.subcarriers,
        duration_s: ts.last().copied().unwrap_or(0.0) - ts.first().copied().unwrap_or(0.0),
    })
}

pub fn cmd_featurize(data: &Path, out: &Path) -> Result<usize> {
    let ds = read_dataset(data)?;
    let feats = extract_features(&ds)?;
    write_features_csv(&feats, out)?;
    Ok(feats.first().map_or(0, |f| f.len()))
}

/// Everything a training run derives from the dataset before optimizing.
pub struct Prepared {
    pub ds: Dataset,
    pub features: Vec<FeatureVector>,
    pub triplets: TripletSelection,
    pub inertial: InertialSelection,
}

pub fn prepare(cfg: &RunConfig, ds: Dataset) -> Result<Prepared> {
    let features = extract_features(&ds)?;
    prepare_with_features(cfg, ds, features)
}

pub fn prepare_with_features(cfg: &RunConfig, ds: Dataset, features: Vec<FeatureVector>) -> Result<Prepared> {
    let sel = cfg.selection();
    let triplets = select_triplets(&ds, &features, &sel)?;
    let inertial = select_inertial(&ds, &triplets.triplets, &sel);
    Ok(Prepared {
        ds,
        features,
        triplets,
        inertial,
    })
}

pub struct TrainResult {
    pub model: ChartModel,
    pub history: Vec<EpochLoss>,
    pub steps: usize,
}

pub fn run_training(cfg: &RunConfig, prep: &Prepared) -> Result<TrainResult> {
    cfg.validate()?;
    let width = prep.features.first().map_or(0, |f| f.len());
    let model = init_model(width, cfg.grid()?, cfg.model_seed)?;
    let out = train(
        model,
        &prep.ds,
        &prep.features,
        &prep.triplets.triplets,
        &prep.inertial.triples,
        &cfg.train_config(),
    )?;
    Ok(TrainResult {
        model: out.model,
        history: out.history,
        steps: out.steps,
    })
}

fn selection_counts(prep: &Prepared) -> Value {
    json!({
        "samples": prep.ds.len(),
        "triplets": prep.triplets.triplets.len(),
        "skipped_anchors": prep.triplets.skipped_anchors,
        "reidentified": prep.triplets.reidentified,
        "feature_threshold": prep.triplets.threshold,
        "inertial_triples": prep.inertial.triples.len(),
        "inertial_skipped": prep.inertial.skipped,
    })
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub provenance: PathBuf,
    pub result: TrainResult,
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let prep = prepare(cfg, read_dataset(data)?)?;
    let result = run_training(cfg, &prep)?;
    ensure_dir(out_dir)?;
    let checkpoint = out_dir.join("model.ccm");
    let loss_csv = out_dir.join("loss.csv");
    let prov_path = out_dir.join("train.provenance.json");
    result.model.write_checkpoint(&checkpoint)?;
    write_loss_csv(&result.history, &loss_csv)?;
    let mut prov = provenance(cfg, "train");
    prov["input"] = json!({ "path": data.display().to_string(), "sha256": sha256_file(data)? });
    prov["selection"] = selection_counts(&prep);
    prov["training"] = json!({
        "steps": result.steps,
        "loss_reduction": "per-batch mean for optimization; loss.csv holds per-epoch means per term",
        "b_pos": cfg.loss_config().b_pos,
        "b_neg": cfg.loss_config().b_neg,
        "chart_extent": cfg.grid()?.extent,
    });
    prov["outputs"] = json!({
        "checkpoint": { "path": checkpoint.display().to_string(), "sha256": sha256_file(&checkpoint)? },
        "loss_csv": loss_csv.display().to_string(),
    });
    write_json(&prov_path, &prov)?;
    Ok(TrainArtifacts {
        checkpoint,
        loss_csv,
        provenance: prov_path,
        result,
    })
}

pub fn write_chart_csv(path: &Path, ds: &Dataset, chart: &[[f64; 2]]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let truth = ds.ground_truth();
    if truth.is_some() {
        writeln!(out, "index,timestamp,chart_x,chart_y,truth_x,truth_y")?;
    } else {
        writeln!(out, "index,timestamp,chart_x,chart_y")?;
    }
    for (i, (s, p)) in ds.samples.iter().zip(chart).enumerate() {
        write!(out, "{i},{},{},{}", s.timestamp, p[0], p[1])?;
        if let Some(t) = &truth {
            write!(out, ",{},{}", t[i][0], t[i][1])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub struct EvaluateArtifacts {
    pub chart_csv: PathBuf,
    pub chart_svg: PathBuf,
    pub metrics_json: Option<PathBuf>,
    pub report: Option<MetricsReport>,
}

pub fn evaluate_chart(cfg: &RunConfig, ds: &Dataset, chart: &[[f64; 2]]) -> Result<Option<MetricsReport>> {
    match ds.ground_truth() {
        Some(truth) => Ok(Some(evaluate(&truth, chart, &cfg.k_percents, cfg.max_eval, cfg.eval_seed)?)),
        None => Ok(None),
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out_dir: &Path) -> Result<EvaluateArtifacts> {
    let model = ChartModel::read_checkpoint(checkpoint)?;
    let ds = read_dataset(data)?;
    let features = extract_features(&ds)?;
    let chart = embed_dataset(&model, &features)?;
    ensure_dir(out_dir)?;
    let chart_csv = out_dir.join("chart.csv");
    let chart_svg = out_dir.join("chart.svg");
    write_chart_csv(&chart_csv, &ds, &chart)?;
    fs::write(&chart_svg, svg::chart_svg(&chart, ds.ground_truth().as_deref()))?;
    let report = evaluate_chart(cfg, &ds, &chart)?;
    let metrics_json = match &report {
        Some(r) => {
            let path = out_dir.join("metrics.json");
            write_json(&path, &serde_json::to_value(r).expect("report serializes"))?;
            Some(path)
        }
        None => None,
    };
    let mut prov = provenance(cfg, "evaluate");
    prov["inputs"] = json!({
        "checkpoint": { "path": checkpoint.display().to_string(), "sha256": sha256_file(checkpoint)? },
        "data": { "path": data.display().to_string(), "sha256": sha256_file(data)? },
    });
    prov["metrics"] = if report.is_some() { json!("metrics.json") } else { json!("omitted: dataset has no ground truth") };
    write_json(&out_dir.join("evaluate.provenance.json"), &prov)?;
    Ok(EvaluateArtifacts {
        chart_csv,
        chart_svg,
        metrics_json,
        report,
    })
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub loss: String,
    pub mu: f64,
    pub report: MetricsReport,
    pub config_hash: String,
}

impl CompareRow {
    /// TW/CT at the largest evaluated K.
    pub fn tw(&self) -> f64 {
        *self.report.tw.values().next_back().unwrap_or(&f64::NAN)
    }

    pub fn ct(&self) -> f64 {
        *self.report.ct.values().next_back().unwrap_or(&f64::NAN)
    }
}

/// Trains and evaluates every config on one shared dataset. Runs whose
/// selection settings agree share a single triplet draw.
pub fn compare_runs(runs: &[(String, RunConfig)], ds: &Dataset) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(Error::config("runs", format!("compare needs at least 2 configs, got {}", runs.len())).into());
    }
    let features = extract_features(ds)?;
    let mut prepared: BTreeMap<String, Prepared> = BTreeMap::new();
    let mut rows = Vec::with_capacity(runs.len());
    for (name, cfg) in runs {
        let wrap = |e: CliError| CliError::Run {
            name: name.clone(),
            source: Box::new(e),
        };
        cfg.validate().map_err(wrap)?;
        let key = format!("{:?}", cfg.selection());
        if !prepared.contains_key(&key) {
            let prep = prepare_with_features(cfg, ds.clone(), features.clone()).map_err(wrap)?;
            prepared.insert(key.clone(), prep);
        }
        let prep = &prepared[&key];
        let result = run_training(cfg, prep).map_err(wrap)?;
        let chart = embed_dataset(&result.model, &prep.features).map_err(|e| wrap(e.into()))?;
        let report = evaluate_chart(cfg, ds, &chart)
            .map_err(wrap)?
            .ok_or_else(|| wrap(CliError::Usage("compare needs a dataset with ground truth".into())))?;
        rows.push(CompareRow {
            name: name.clone(),
            loss: cfg.loss.name().to_string(),
            mu: cfg.mu,
            report,
            config_hash: cfg.hash(),
        });
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("method,loss,mu,ks,sr,tw,ct,k,config_hash\n");
    for r in rows {
        let k = r.report.tw.keys().next_back().copied().unwrap_or(0);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.loss,
            r.mu,
            r.report.ks,
            r.report.sr,
            r.tw(),
            r.ct(),
            k,
            r.config_hash
        ));
    }
    out
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let k = rows
        .first()
        .and_then(|r| r.report.tw.keys().next_back().copied())
        .unwrap_or(0);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "method",
        "KS",
        "SR",
        format!("TW({k})"),
        format!("CT({k})")
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}\n",
            r.name,
            r.report.ks,
            r.report.sr,
            r.tw(),
            r.ct()
        ));
    }
    out
}

pub fn cmd_compare(
    base: &RunConfig,
    runs: &[(String, RunConfig)],
    data: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(Error::config("runs", format!("compare needs at least 2 configs, got {}", runs.len())).into());
    }
    let ds = match data {
        Some(p) => read_dataset(p)?,
        None => {
            base.scenario.validate()?;
            generate_dataset(&base.scenario)?
        }
    };
    let rows = compare_runs(runs, &ds)?;
    ensure_dir(out_dir)?;
    fs::write(out_dir.join("compare.csv"), compare_csv(&rows))?;
    fs::write(out_dir.join("compare.txt"), compare_table(&rows))?;
    let mut prov = provenance(base, "compare");
    prov["runs"] = rows
        .iter()
        .zip(runs)
        .map(|(r, (_, cfg))| json!({ "name": r.name, "config_hash": r.config_hash, "config": provenance(cfg, "compare-run")["config"] }))
        .collect();
    write_json(&out_dir.join("compare.provenance.json"), &prov)?;
    Ok(rows)
}
