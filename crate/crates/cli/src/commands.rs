use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use inner_core::dataio::{
    self, BalancedEnsemble, CovariateSchema, CovariateSpec, DesignMatrix, EnsembleEnvelope, FittedTransform, ImputeMode,
    RawTable,
};
use inner_core::metrics::{self, MeanSe, MetricReport};
use inner_core::model::ModelEnvelope;
use inner_core::nn::NetworkSpec;
use inner_core::optim::{self, TrainConfig};
use inner_core::rng::{derive_indexed, derive_seed};
use inner_core::simgen::{self, GridSpec, SimConfig};
use inner_core::subgroup::{self, Level};
use inner_core::{Cohort, InnerModel, Scenario, TrainLog};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::experiment::{run_replication, ReplicationOutcome, ReplicationSpec};

/// Combines flags with an optional JSON config; config values win.
pub fn resolve(cli: Cli) -> CliResult<RunConfig> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let command = match (cli.command, &file) {
        (Some(c), _) => c,
        (None, Some(v)) if v.get("command").is_some() => {
            serde_json::from_value(v["command"].clone()).map_err(|e| CliError::validation(format!("config command: {e}")))?
        }
        _ => return Err(CliError::validation("no command given")),
    };
    let flags = RunConfig {
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
        command,
    };
    let Some(file) = file else {
        return Ok(flags);
    };
    let mut merged = serde_json::to_value(&flags).map_err(|e| CliError::validation(e.to_string()))?;
    merge(&mut merged, file);
    serde_json::from_value(merged).map_err(|e| CliError::validation(format!("config: {e}")))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // a different subcommand replaces the whole entry
                    Some(slot) if k == "command" && !same_keys(slot, &v) => *slot = v,
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn same_keys(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => a.keys().eq(b.keys()),
        _ => false,
    }
}

pub fn execute(cfg: &RunConfig) -> CliResult<()> {
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(CliError::validation("--threads must be positive"));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    write_json(&cfg.out.join("run_config.json"), cfg)?;
    match &cfg.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::Tune(a) => tune(cfg, a),
        Command::Benchmark(a) => benchmark(cfg, a),
        Command::Subgroup(a) => subgroup_report(cfg, a),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::validation(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> inner_core::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> CliResult<()> {
    let mut sim = SimConfig::new(a.scenario.into(), a.n, a.p, a.snr, cfg.seed).with_noise(a.noise);
    sim.coef_norm = a.coef_norm;
    sim.calib_sample_size = a.calib_size;
    let data = simgen::generate(&sim)?;
    write_bytes(&cfg.out.join("dataset.csv"), &csv_bytes(|b| data.write_csv(b))?)?;
    let mut truth = data.truth_json()?;
    truth.push('\n');
    write_bytes(&cfg.out.join("truth.json"), truth.as_bytes())?;
    println!(
        "simulated {} subjects, {} covariates, SNR {:.3} (target {})",
        a.n,
        sim.dim(),
        data.truth.achieved_snr,
        a.snr
    );
    Ok(())
}

/// Schema for files in the `simulate` layout: label `y`, pain `x`, the rest
/// continuous covariates.
fn infer_schema(path: &Path) -> CliResult<CovariateSchema> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::validation(format!("{}: {other:?}", path.display())),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if !cols.contains(&"y") || !cols.contains(&"x") {
        return Err(CliError::validation(format!(
            "{}: without --schema the file needs `y` and `x` columns",
            path.display()
        )));
    }
    let schema = CovariateSchema {
        covariates: cols
            .iter()
            .filter(|c| **c != "y" && **c != "x")
            .map(|c| CovariateSpec::continuous(c))
            .collect(),
        pain_column: "x".into(),
        label_column: "y".into(),
    };
    schema.validate()?;
    Ok(schema)
}

fn load_schema(data: &Path, schema: Option<&Path>) -> CliResult<CovariateSchema> {
    match schema {
        Some(p) => Ok(CovariateSchema::load(p)?),
        None => infer_schema(data),
    }
}

/// Imputation statistics and the schema they were fitted against; written
/// next to every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFile {
    pub schema: CovariateSchema,
    pub schema_hash: String,
    pub transform: FittedTransform,
}

struct Prepared {
    schema: CovariateSchema,
    transform: FittedTransform,
    fit: Cohort,
    validation: Cohort,
}

fn prepare(seed: u64, d: &DataArgs) -> CliResult<Prepared> {
    if !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
        return Err(CliError::validation("--validation-fraction must lie in (0, 1)"));
    }
    let schema = load_schema(&d.data, d.schema.as_deref())?;
    let table = dataio::load_cohort(&d.data, &schema)?;
    if table.labels.is_none() {
        return Err(CliError::validation(format!("{}: no `{}` column", d.data.display(), schema.label_column)));
    }
    let (fit_idx, val_idx) = dataio::split(table.len(), 1.0 - d.validation_fraction, derive_seed(seed, "split"))?;
    let (fit, val, transform) =
        dataio::prepare_split(&table.select(&fit_idx), &table.select(&val_idx), &schema, d.impute.into())?;
    Ok(Prepared {
        schema,
        transform,
        fit: fit.cohort()?,
        validation: val.cohort()?,
    })
}

fn architecture(p: usize, m: &ModelArgs) -> CliResult<Option<NetworkSpec>> {
    if m.baseline.is_some() {
        return Ok(None);
    }
    match m.arch.split_last() {
        Some((1, hidden)) => {
            let mut rates = vec![m.dropout; hidden.len()];
            rates.push(0.0);
            Ok(Some(NetworkSpec::relu_regressor(p, hidden).with_dropout(rates)?))
        }
        _ => Err(CliError::validation("--arch must end with a single output unit (1)")),
    }
}

fn model_factory(p: usize, m: &ModelArgs) -> CliResult<impl Fn(u64) -> inner_core::Result<InnerModel> + Sync> {
    let spec = architecture(p, m)?;
    let scheme = init_scheme(m.init, m.bias);
    Ok(move |seed: u64| match &spec {
        Some(s) => InnerModel::init(s, scheme, derive_seed(seed, "init")),
        None => InnerModel::logistic_baseline(p),
    })
}

fn train_config(seed: u64, t: &TrainingArgs) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: t.lr,
        batch_size: t.batch_size,
        max_epochs: t.epochs,
        gap_delta: if t.no_gap_stop { f64::INFINITY } else { t.gap_delta },
        optimizer: t.optimizer.into(),
        seed: derive_seed(seed, "train"),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A trained single model or balanced ensemble as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelFile {
    Ensemble(EnsembleEnvelope),
    Single(ModelEnvelope),
}

enum Predictor {
    Single(InnerModel),
    Ensemble(BalancedEnsemble),
}

impl Predictor {
    fn predict_cohort(&self, cohort: &Cohort) -> inner_core::Result<Vec<f64>> {
        match self {
            Predictor::Single(m) => m.predict_cohort(cohort),
            Predictor::Ensemble(e) => e.predict_cohort(cohort),
        }
    }
}

fn load_model(path: &Path) -> CliResult<(Predictor, Option<String>)> {
    Ok(match read_json::<ModelFile>(path)? {
        ModelFile::Single(env) => {
            let hash = env.covariate_schema_hash.clone();
            (Predictor::Single(env.into_model()?), hash)
        }
        ModelFile::Ensemble(env) => {
            let hash = env.members.first().and_then(|m| m.covariate_schema_hash.clone());
            (Predictor::Ensemble(env.into_ensemble()?), hash)
        }
    })
}

fn write_log(out: &Path, stem: &str, log: &TrainLog) -> CliResult<()> {
    write_bytes(&out.join(format!("{stem}.csv")), &csv_bytes(|b| log.write_csv(b))?)?;
    write_bytes(&out.join(format!("{stem}.svg")), log.to_svg().as_bytes())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    members: usize,
    parameters: usize,
    validation_c_statistic: f64,
    runs: Vec<RunSummary>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    epochs: usize,
    stop_reason: optim::StopReason,
    train_loss: f64,
    validation_loss: f64,
}

impl From<&TrainLog> for RunSummary {
    fn from(log: &TrainLog) -> Self {
        let last = log.last().copied();
        Self {
            epochs: last.map_or(0, |r| r.epoch),
            stop_reason: log.stop_reason,
            train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            validation_loss: last.map_or(f64::NAN, |r| r.validation_loss),
        }
    }
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> CliResult<()> {
    let data = prepare(cfg.seed, &a.data)?;
    let factory = model_factory(data.fit.dim(), &a.model)?;
    let tcfg = train_config(cfg.seed, &a.training)?;
    let hash = data.schema.hash();
    let (file, predictor, logs, parameters) = match a.ensemble {
        Some(k) => {
            let (ens, logs) = dataio::train_balanced_ensemble(&factory, &data.fit, &data.validation, &tcfg, k)?;
            let params = ens.models()[0].num_params();
            (ModelFile::Ensemble(ens.to_envelope(Some(hash.clone()))), Predictor::Ensemble(ens), logs, params)
        }
        None => {
            let model = factory(cfg.seed)?;
            let (trained, log) = optim::train(&model, &data.fit, &data.validation, &tcfg)?;
            let params = trained.num_params();
            (ModelFile::Single(trained.to_envelope(Some(hash.clone()))), Predictor::Single(trained), vec![log], params)
        }
    };
    write_json(&cfg.out.join("model.json"), &file)?;
    write_json(
        &cfg.out.join("transform.json"),
        &TransformFile {
            schema: data.schema.clone(),
            schema_hash: hash,
            transform: data.transform.clone(),
        },
    )?;
    if logs.len() == 1 {
        write_log(&cfg.out, "loss", &logs[0])?;
    } else {
        for (j, log) in logs.iter().enumerate() {
            write_log(&cfg.out, &format!("loss_{j}"), log)?;
        }
    }
    let probs = predictor.predict_cohort(&data.validation)?;
    let summary = TrainSummary {
        members: logs.len(),
        parameters,
        validation_c_statistic: metrics::c_statistic(&probs, data.validation.require_labels()?)?,
        runs: logs.iter().map(RunSummary::from).collect(),
    };
    write_json(&cfg.out.join("train_summary.json"), &summary)?;
    for (j, r) in summary.runs.iter().enumerate() {
        println!(
            "run {j}: {} epochs ({:?}), train loss {:.4}, validation loss {:.4}",
            r.epochs, r.stop_reason, r.train_loss, r.validation_loss
        );
    }
    println!("validation C-statistic {:.4}", summary.validation_c_statistic);
    Ok(())
}

fn sidecar_path(model: &Path, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| {
        model
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("transform.json")
    })
}

fn load_design(
    model_hash: Option<&str>,
    sidecar: &Path,
    data: &Path,
    mode: ImputeMode,
) -> CliResult<(RawTable, DesignMatrix)> {
    let tf: TransformFile = read_json(sidecar)?;
    if tf.schema.hash() != tf.schema_hash {
        return Err(CliError::validation(format!("{}: schema hash mismatch", sidecar.display())));
    }
    if let Some(h) = model_hash {
        if h != tf.schema_hash {
            return Err(CliError::validation("model was trained against a different covariate schema"));
        }
    }
    let table = dataio::load_cohort(data, &tf.schema)?;
    let transform = match mode {
        ImputeMode::TrainFitted => tf.transform,
        ImputeMode::PerSplit => tf.transform.refit_on(&table)?,
    };
    let design = transform.apply(&table)?;
    Ok((table, design))
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    subjects: usize,
    c_statistic: f64,
    thresholds: Vec<MetricReport>,
}

fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> CliResult<()> {
    if a.thresholds.is_empty() {
        return Err(CliError::validation("no thresholds given"));
    }
    let (predictor, hash) = load_model(&a.model)?;
    let sidecar = sidecar_path(&a.model, a.transform.as_deref());
    let (_, design) = load_design(hash.as_deref(), &sidecar, &a.data, a.impute.into())?;
    let cohort = design.cohort()?;
    let labels = cohort.require_labels()?;
    let probs = predictor.predict_cohort(&cohort)?;
    let reports = a
        .thresholds
        .iter()
        .map(|&t| metrics::classify_and_score(&probs, labels, t))
        .collect::<inner_core::Result<Vec<_>>>()?;
    let report = EvaluationReport {
        subjects: cohort.len(),
        c_statistic: reports[0].c_statistic,
        thresholds: reports,
    };
    write_json(&cfg.out.join("metrics.json"), &report)?;

    let header: Vec<String> = ["threshold", "accuracy", "sensitivity", "specificity", "balance accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = report
        .thresholds
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.threshold),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.sensitivity),
                format!("{:.4}", r.specificity),
                format!("{:.4}", r.balance_accuracy),
            ]
        })
        .collect();
    let text = format!(
        "C-statistic {:.4} on {} subjects\n\n{}",
        report.c_statistic,
        report.subjects,
        metrics::render_table(&header, &rows)
    );
    write_bytes(&cfg.out.join("metrics.txt"), text.as_bytes())?;
    print!("{text}");

    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Core(e.into());
    w.write_record(["row", "label", "probability"]).map_err(io)?;
    for (i, (p, y)) in probs.iter().zip(labels).enumerate() {
        w.write_record([i.to_string(), y.to_string(), p.to_string()]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::validation(e.to_string()))?;
    write_bytes(&cfg.out.join("predictions.csv"), &bytes)
}

fn tune(cfg: &RunConfig, a: &TuneArgs) -> CliResult<()> {
    let data = prepare(cfg.seed, &a.data)?;
    let factory = model_factory(data.fit.dim(), &a.model)?;
    let tcfg = train_config(cfg.seed, &a.training)?;
    let grid = if a.grid.is_empty() { optim::default_lr_grid() } else { a.grid.clone() };
    let outcome = optim::grid_search_lr(&factory, &data.fit, &data.validation, &grid, &tcfg)?;
    write_json(&cfg.out.join("tune.json"), &outcome)?;
    let header: Vec<String> = ["learning rate", "validation loss", "epochs"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = outcome
        .points
        .iter()
        .map(|p| {
            let mark = if p.learning_rate == outcome.best_learning_rate { " *" } else { "" };
            vec![
                format!("{}{mark}", p.learning_rate),
                p.validation_loss.map_or("diverged".into(), |l| format!("{l:.5}")),
                p.epochs.to_string(),
            ]
        })
        .collect();
    let text = format!(
        "best learning rate {}\n\n{}",
        outcome.best_learning_rate,
        metrics::render_table(&header, &rows)
    );
    write_bytes(&cfg.out.join("tune.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub p_signal: usize,
    pub p_noise: usize,
    pub n_samples: usize,
    pub snr_target: f64,
    pub inner: Option<MeanSe>,
    pub logistic: Option<MeanSe>,
    pub inner_values: Vec<f64>,
    pub logistic_values: Vec<f64>,
    pub achieved_snr: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: Scenario,
    pub repetitions: usize,
    pub cells: Vec<BenchmarkCell>,
}

impl BenchmarkReport {
    pub fn to_text(&self) -> String {
        let header: Vec<String> = ["p", "noise", "n", "SNR", "INNER", "logistic", "failed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let show = |m: &Option<MeanSe>| m.map_or("NA".to_string(), |m| m.display());
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.p_signal.to_string(),
                    c.p_noise.to_string(),
                    c.n_samples.to_string(),
                    c.snr_target.to_string(),
                    show(&c.inner),
                    show(&c.logistic),
                    c.failures.len().to_string(),
                ]
            })
            .collect();
        format!(
            "{:?}, {} replications per cell, C-statistic mean (SE)\n\n{}",
            self.scenario,
            self.repetitions,
            metrics::render_table(&header, &rows)
        )
    }
}

fn grid_cells(cfg: &RunConfig, a: &BenchmarkArgs) -> Vec<SimConfig> {
    let scenario: Scenario = a.scenario.into();
    let spec = match a.block {
        BlockArg::Cell => GridSpec {
            snr: Some(vec![a.snr]),
            noise: Some(vec![a.noise]),
            cells: Some(vec![(a.p, a.n)]),
            ..GridSpec::empty(scenario, cfg.seed)
        },
        BlockArg::Snr => GridSpec::snr_block(scenario, cfg.seed),
        BlockArg::Noise => GridSpec::noise_block(scenario, cfg.seed),
        BlockArg::Size => GridSpec::size_block(scenario, cfg.seed),
    };
    simgen::experiment_grid(&spec)
}

fn benchmark(cfg: &RunConfig, a: &BenchmarkArgs) -> CliResult<()> {
    if a.reps < 2 {
        return Err(CliError::validation("--reps must be at least 2"));
    }
    let cells = grid_cells(cfg, a);
    let train = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        gap_delta: a.gap_delta.unwrap_or(f64::INFINITY),
        optimizer: a.optimizer.into(),
        ..TrainConfig::default()
    };
    train.validate()?;
    let jobs: Vec<ReplicationSpec> = cells
        .iter()
        .flat_map(|cell| {
            (0..a.reps).map(|r| {
                let mut sim = cell.clone();
                sim.seed = derive_indexed(cell.seed, "replication", r as u64);
                sim.coef_norm = a.coef_norm;
                sim.calib_sample_size = a.calib_size;
                let mut spec = ReplicationSpec::simulation_default(sim);
                spec.hidden = a.hidden.clone();
                spec.init = init_scheme(a.init, a.bias);
                spec.train = train.clone();
                spec.fit_inner = !a.logistic_only;
                spec
            })
        })
        .collect();
    let outcomes: Vec<inner_core::Result<ReplicationOutcome>> = jobs.par_iter().map(run_replication).collect();

    let mut report = BenchmarkReport {
        scenario: a.scenario.into(),
        repetitions: a.reps,
        cells: Vec::with_capacity(cells.len()),
    };
    let mut failed = 0;
    for (cell, chunk) in cells.iter().zip(outcomes.chunks(a.reps)) {
        let mut c = BenchmarkCell {
            p_signal: cell.p_signal,
            p_noise: cell.p_noise,
            n_samples: cell.n_samples,
            snr_target: cell.snr_target,
            inner: None,
            logistic: None,
            inner_values: Vec::new(),
            logistic_values: Vec::new(),
            achieved_snr: Vec::new(),
            failures: Vec::new(),
        };
        for (r, out) in chunk.iter().enumerate() {
            match out {
                Ok(o) => {
                    c.inner_values.extend(o.inner_auc);
                    c.logistic_values.extend(o.logistic_auc);
                    c.achieved_snr.push(o.achieved_snr);
                }
                Err(e) => {
                    log::warn!("cell p={} n={} replication {r}: {e}", cell.p_signal, cell.n_samples);
                    c.failures.push(format!("replication {r}: {e}"));
                }
            }
        }
        failed += c.failures.len();
        c.inner = MeanSe::of(&c.inner_values).ok();
        c.logistic = MeanSe::of(&c.logistic_values).ok();
        report.cells.push(c);
    }
    write_json(&cfg.out.join("benchmark.json"), &report)?;
    let text = report.to_text();
    write_bytes(&cfg.out.join("benchmark.txt"), text.as_bytes())?;
    print!("{text}");
    if failed > 0 {
        return Err(inner_core::Error::Numeric(format!("{failed} of {} replications failed", jobs.len())).into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SubgroupSummary {
    q: f64,
    subjects: usize,
    groups: Vec<GroupSummary>,
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    name: String,
    size: usize,
    crossing_pain: Option<f64>,
}

const LEVELS: [Level; 3] = [Level::Low, Level::Normal, Level::High];

fn subgroup_report(cfg: &RunConfig, a: &SubgroupArgs) -> CliResult<()> {
    if !(a.q > 0.0 && a.q < 1.0) {
        return Err(CliError::validation("--q must lie in (0, 1)"));
    }
    let (predictor, hash) = load_model(&a.model)?;
    let Predictor::Single(model) = predictor else {
        return Err(CliError::validation("subgroup analysis needs a single model, not an ensemble"));
    };
    let sidecar = sidecar_path(&a.model, a.transform.as_deref());
    let (_, design) = load_design(hash.as_deref(), &sidecar, &a.data, ImputeMode::TrainFitted)?;
    let cohort = Cohort::new(design.matrix.clone(), Array1::from(design.pain.clone()), None)?;

    let scores = subgroup::score_cohort(&model, &cohort)?;
    let assignments = subgroup::assign_subgroups(&scores, a.q)?;
    write_bytes(
        &cfg.out.join("subgroups.csv"),
        &csv_bytes(|b| subgroup::write_assignments_csv(b, &assignments))?,
    )?;
    let curves = subgroup::risk_curves(&model, &cohort, &assignments)?;
    write_bytes(&cfg.out.join("risk_curves.csv"), &csv_bytes(|b| curves.write_csv(b))?)?;
    write_bytes(&cfg.out.join("risk_curves.svg"), curves.to_svg().as_bytes())?;
    let r2 = subgroup::covariate_r2(&scores, design.matrix.view(), &design.blocks)?;
    write_bytes(&cfg.out.join("r2.csv"), &csv_bytes(|b| subgroup::write_r2_csv(b, &r2))?)?;

    let mut groups = Vec::new();
    let mut lines = vec![format!("{} subjects, lfdr cutoff {}", cohort.len(), a.q)];
    for bot in LEVELS {
        for pot in LEVELS {
            let key = (bot, pot);
            let name = subgroup::group_name(key);
            let curve = curves.groups.iter().find(|g| g.group == key);
            let size = curve.map_or(0, |g| g.size);
            match curve {
                None => lines.push(format!("{name}: empty, omitted from curves")),
                Some(g) => lines.push(match g.crossing_pain {
                    Some(x) => format!("{name}: {size} subjects, risk reaches 0.5 at pain {x:.2}"),
                    None => format!("{name}: {size} subjects, risk stays below 0.5"),
                }),
            }
            groups.push(GroupSummary {
                name,
                size,
                crossing_pain: curve.and_then(|g| g.crossing_pain),
            });
        }
    }
    write_json(
        &cfg.out.join("subgroup_summary.json"),
        &SubgroupSummary {
            q: a.q,
            subjects: cohort.len(),
            groups,
        },
    )?;
    let text = lines.join("\n") + "\n";
    write_bytes(&cfg.out.join("subgroup_summary.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("inner").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn config_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 9, "command": {"simulate": {"n": 321}}}"#).unwrap();
        let cli = parse(&["--seed", "2", "--config", path.to_str().unwrap(), "simulate", "--p", "4"]);
        let cfg = resolve(cli).unwrap();
        assert_eq!(cfg.seed, 9);
        let Command::Simulate(s) = cfg.command else { panic!() };
        assert_eq!((s.n, s.p), (321, 4));
    }

    #[test]
    fn saved_config_replays_without_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(parse(&["--seed", "5", "simulate", "--n", "250"])).unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let again = resolve(parse(&["--config", path.to_str().unwrap()])).unwrap();
        assert_eq!(cfg, again);
        assert!(resolve(parse(&[])).is_err());
    }

    #[test]
    fn config_may_switch_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"command": {"subgroup": {"model": "m.json", "data": "d.csv", "q": 0.1}}}"#).unwrap();
        let cfg = resolve(parse(&["--config", path.to_str().unwrap(), "simulate"])).unwrap();
        assert!(matches!(cfg.command, Command::Subgroup(ref s) if s.q == 0.1));
    }

    #[test]
    fn arch_must_end_in_one() {
        let mut m = parse(&["train", "--data", "d.csv"]);
        let Some(Command::Train(t)) = m.command.take() else { panic!() };
        assert_eq!(t.model.arch, vec![250, 125, 1]);
        assert_eq!(architecture(4, &t.model).unwrap().unwrap().dims, vec![4, 250, 125, 1]);
        let mut bad = t.model.clone();
        bad.arch = vec![8, 2];
        assert!(architecture(4, &bad).is_err());
        bad.baseline = Some(BaselineArg::Logistic);
        assert!(architecture(4, &bad).unwrap().is_none());
    }

    #[test]
    fn ensemble_flag_defaults_to_five() {
        let m = parse(&["train", "--data", "d.csv", "--ensemble"]);
        let Some(Command::Train(t)) = m.command else { panic!() };
        assert_eq!(t.ensemble, Some(5));
    }
}
