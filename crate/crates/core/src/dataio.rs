//! Cohort ingestion from CSV, train/test splitting, imputation, encoding and
//! balanced-subsampling ensembles.

use std::collections::{BTreeSet, HashSet};
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Cohort, InnerModel, ModelEnvelope, Subject, PAIN_MAX, PAIN_MIN};
use crate::optim::{self, TrainConfig, TrainLog};
use crate::rng;
use crate::subgroup::CovariateBlock;
use crate::{Error, Result};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    /// Categorical levels in encoding order; inferred from training data
    /// (sorted) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl CovariateSpec {
    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Continuous,
            levels: None,
        }
    }

    pub fn categorical(name: &str, levels: Option<&[&str]>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Categorical,
            levels: levels.map(|l| l.iter().map(|s| s.to_string()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub covariates: Vec<CovariateSpec>,
    pub pain_column: String,
    pub label_column: String,
}

impl CovariateSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.covariates {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::config(format!("duplicate covariate `{}`", c.name)));
            }
            if c.kind == CovariateKind::Continuous && c.levels.is_some() {
                return Err(Error::config(format!("continuous covariate `{}` lists levels", c.name)));
            }
            if let Some(levels) = &c.levels {
                let unique: HashSet<&String> = levels.iter().collect();
                if levels.is_empty() || unique.len() != levels.len() {
                    return Err(Error::config(format!("covariate `{}` has empty or repeated levels", c.name)));
                }
            }
        }
        for col in [&self.pain_column, &self.label_column] {
            if seen.contains(col.as_str()) {
                return Err(Error::config(format!("`{col}` is both a covariate and the pain/label column")));
            }
        }
        if self.pain_column == self.label_column {
            return Err(Error::config("pain and label columns coincide"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn {
    Continuous(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl RawColumn {
    fn select(&self, idx: &[usize]) -> Self {
        match self {
            RawColumn::Continuous(v) => RawColumn::Continuous(idx.iter().map(|&i| v[i]).collect()),
            RawColumn::Categorical(v) => RawColumn::Categorical(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Parsed rows before imputation; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
    pub pain: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.pain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pain.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            columns: self.columns.iter().map(|c| c.select(idx)).collect(),
            pain: idx.iter().map(|&i| self.pain[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

/// Reads a cohort CSV. The label column is optional; every covariate and the
/// pain column must be present. Line numbers in errors count the header as 1.
pub fn read_table<R: Read>(input: R, schema: &CovariateSchema) -> Result<RawTable> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let locate = |name: &str| find(name).ok_or_else(|| Error::Parse {
        line: 1,
        message: format!("missing column `{name}`"),
    });
    let cov_idx: Vec<usize> = schema.covariates.iter().map(|c| locate(&c.name)).collect::<Result<_>>()?;
    let pain_idx = locate(&schema.pain_column)?;
    let label_idx = find(&schema.label_column);

    let mut columns: Vec<RawColumn> = schema
        .covariates
        .iter()
        .map(|c| match c.kind {
            CovariateKind::Continuous => RawColumn::Continuous(Vec::new()),
            CovariateKind::Categorical => RawColumn::Categorical(Vec::new()),
        })
        .collect();
    let mut pain = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut out_of_range = Vec::new();

    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let parse_err = |message: String| Error::Parse { line, message };
        for ((spec, &j), col) in schema.covariates.iter().zip(&cov_idx).zip(columns.iter_mut()) {
            let cell = record.get(j).unwrap_or("");
            match col {
                RawColumn::Continuous(v) => v.push(if is_missing(cell) {
                    None
                } else {
                    let x: f64 = cell
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(format!("`{}` is not a number in column `{}`", cell, spec.name)))?;
                    if !x.is_finite() {
                        return Err(parse_err(format!("non-finite value in column `{}`", spec.name)));
                    }
                    Some(x)
                }),
                RawColumn::Categorical(v) => v.push((!is_missing(cell)).then(|| cell.trim().to_string())),
            }
        }
        let cell = record.get(pain_idx).unwrap_or("");
        if is_missing(cell) {
            return Err(parse_err("missing pain score".into()));
        }
        let x: f64 = cell
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("pain score `{cell}` is not a number")))?;
        if !(PAIN_MIN..=PAIN_MAX).contains(&x) {
            out_of_range.push(line);
        }
        pain.push(x);
        if let (Some(j), Some(ls)) = (label_idx, labels.as_mut()) {
            let y = match record.get(j).map(str::trim) {
                Some("0") => 0,
                Some("1") => 1,
                other => return Err(parse_err(format!("label `{}` is not 0 or 1", other.unwrap_or("")))),
            };
            ls.push(y);
        }
    }
    if !out_of_range.is_empty() {
        return Err(Error::PainOutOfRange { lines: out_of_range });
    }
    Ok(RawTable { columns, pain, labels })
}

pub fn load_cohort(path: &Path, schema: &CovariateSchema) -> Result<RawTable> {
    read_table(std::fs::File::open(path)?, schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnTransform {
    Continuous { name: String, mean: f64, sd: f64 },
    Categorical { name: String, levels: Vec<String>, mode: String },
}

/// Imputation and encoding statistics fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTransform {
    pub columns: Vec<ColumnTransform>,
    pub standardize: bool,
}

fn fit_continuous(name: &str, v: &[Option<f64>], standardize: bool) -> Result<ColumnTransform> {
    let observed: Vec<f64> = v.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(Error::config(format!("covariate `{name}` has no observed values")));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let sd = if standardize && v.len() > 1 {
        // spread of the imputed column, so transformed data has unit sd
        let ss: f64 = observed.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (v.len() - 1) as f64).sqrt()
    } else {
        1.0
    };
    let sd = if sd > 0.0 {
        sd
    } else {
        log::warn!("covariate `{name}` is constant; centering without scaling");
        1.0
    };
    Ok(ColumnTransform::Continuous {
        name: name.into(),
        mean,
        sd,
    })
}

fn fit_categorical(name: &str, v: &[Option<String>], levels: Option<Vec<String>>) -> Result<ColumnTransform> {
    let levels = levels.unwrap_or_else(|| {
        v.iter()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    if levels.is_empty() {
        return Err(Error::config(format!("covariate `{name}` has no observed levels")));
    }
    let mut counts = vec![0usize; levels.len()];
    for s in v.iter().flatten() {
        if let Some(k) = levels.iter().position(|l| l == s) {
            counts[k] += 1;
        }
    }
    // ties go to the earlier level
    let best = counts
        .iter()
        .enumerate()
        .fold(0, |b, (k, &c)| if c > counts[b] { k } else { b });
    Ok(ColumnTransform::Categorical {
        name: name.into(),
        mode: levels[best].clone(),
        levels,
    })
}

/// Design matrix plus the per-covariate column blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: Array2<f64>,
    pub column_names: Vec<String>,
    pub blocks: Vec<CovariateBlock>,
    pub pain: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl DesignMatrix {
    pub fn cohort(&self) -> Result<Cohort> {
        Cohort::new(self.matrix.clone(), Array1::from(self.pain.clone()), self.labels.clone())
    }
}

impl FittedTransform {
    /// Mean/mode imputation statistics and standardization from `table`.
    pub fn fit(table: &RawTable, schema: &CovariateSchema) -> Result<Self> {
        Self::fit_with(table, schema, true)
    }

    pub fn fit_with(table: &RawTable, schema: &CovariateSchema, standardize: bool) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::config("cannot fit a transform on an empty table"));
        }
        if table.columns.len() != schema.covariates.len() {
            return Err(Error::contract("table and schema disagree on covariate count"));
        }
        let columns = schema
            .covariates
            .iter()
            .zip(&table.columns)
            .map(|(spec, col)| match col {
                RawColumn::Continuous(v) => fit_continuous(&spec.name, v, standardize),
                RawColumn::Categorical(v) => fit_categorical(&spec.name, v, spec.levels.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(Self { columns, standardize })
    }

    /// Fresh statistics from `table` that keep this transform's level lists,
    /// so the encoding width is unchanged.
    pub fn refit_on(&self, table: &RawTable) -> Result<Self> {
        if table.columns.len() != self.columns.len() {
            return Err(Error::contract("table and transform disagree on covariate count"));
        }
        let columns = self
            .columns
            .iter()
            .zip(&table.columns)
            .map(|(t, col)| match (t, col) {
                (ColumnTransform::Continuous { name, .. }, RawColumn::Continuous(v)) => {
                    fit_continuous(name, v, self.standardize)
                }
                (ColumnTransform::Categorical { name, levels, .. }, RawColumn::Categorical(v)) => {
                    fit_categorical(name, v, Some(levels.clone()))
                }
                _ => Err(Error::contract("column kinds differ")),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            columns,
            standardize: self.standardize,
        })
    }

    /// Number of encoded columns: one per continuous covariate and
    /// `levels - 1` per categorical one.
    pub fn width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnTransform::Continuous { .. } => 1,
                ColumnTransform::Categorical { levels, .. } => levels.len() - 1,
            })
            .sum()
    }

    /// Imputes, standardizes and one-hot encodes (first level dropped).
    /// Unseen categorical levels encode as all zeros.
    pub fn apply(&self, table: &RawTable) -> Result<DesignMatrix> {
        if table.columns.len() != self.columns.len() {
            return Err(Error::contract("table and transform disagree on covariate count"));
        }
        let n = table.len();
        let mut matrix = Array2::zeros((n, self.width()));
        let mut column_names = Vec::with_capacity(self.width());
        let mut blocks = Vec::with_capacity(self.columns.len());
        let mut j = 0;
        for (t, col) in self.columns.iter().zip(&table.columns) {
            match (t, col) {
                (ColumnTransform::Continuous { name, mean, sd }, RawColumn::Continuous(v)) => {
                    for (i, x) in v.iter().enumerate() {
                        matrix[[i, j]] = (x.unwrap_or(*mean) - mean) / sd;
                    }
                    column_names.push(name.clone());
                    blocks.push(CovariateBlock {
                        name: name.clone(),
                        columns: vec![j],
                    });
                    j += 1;
                }
                (ColumnTransform::Categorical { name, levels, mode }, RawColumn::Categorical(v)) => {
                    let width = levels.len() - 1;
                    for (i, s) in v.iter().enumerate() {
                        let s = s.as_ref().unwrap_or(mode);
                        match levels.iter().position(|l| l == s) {
                            Some(0) => {}
                            Some(k) => matrix[[i, j + k - 1]] = 1.0,
                            None => log::warn!("unseen level `{s}` of `{name}` encoded as reference"),
                        }
                    }
                    column_names.extend(levels[1..].iter().map(|l| format!("{name}={l}")));
                    blocks.push(CovariateBlock {
                        name: name.clone(),
                        columns: (j..j + width).collect(),
                    });
                    j += width;
                }
                _ => return Err(Error::contract("column kinds differ")),
            }
        }
        Ok(DesignMatrix {
            matrix,
            column_names,
            blocks,
            pain: table.pain.clone(),
            labels: table.labels.clone(),
        })
    }
}

/// Where imputation statistics for the test split come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    /// Training statistics for both splits.
    #[default]
    TrainFitted,
    /// Each split imputed and standardized with its own statistics.
    PerSplit,
}

/// Encodes a train/test pair; returns the training transform alongside.
pub fn prepare_split(
    train: &RawTable,
    test: &RawTable,
    schema: &CovariateSchema,
    mode: ImputeMode,
) -> Result<(DesignMatrix, DesignMatrix, FittedTransform)> {
    let t = FittedTransform::fit(train, schema)?;
    let test_t = match mode {
        ImputeMode::TrainFitted => t.clone(),
        ImputeMode::PerSplit => t.refit_on(test)?,
    };
    Ok((t.apply(train)?, test_t.apply(test)?, t))
}

/// Random partition of `0..n`: `ceil(fraction * n)` training indices and the
/// rest, each sorted.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n_train = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// All cases plus an equal number of controls drawn without replacement,
/// as sorted indices.
pub fn balanced_subsample(labels: &[u8], seed: u64) -> Result<Vec<usize>> {
    let cases: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let controls: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::config("balanced subsampling needs both classes"));
    }
    if cases.len() > controls.len() {
        return Err(Error::config(format!(
            "{} cases exceed {} controls",
            cases.len(),
            controls.len()
        )));
    }
    let mut r = rng::stream(seed, "balance");
    let mut picked: Vec<usize> = cases;
    picked.extend(index::sample(&mut r, controls.len(), picked.len()).into_iter().map(|k| controls[k]));
    picked.sort_unstable();
    Ok(picked)
}

/// Models trained on balanced subsamples; predictions are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedEnsemble {
    models: Vec<InnerModel>,
    subsamples: Vec<Vec<usize>>,
}

impl BalancedEnsemble {
    pub fn new(models: Vec<InnerModel>, subsamples: Vec<Vec<usize>>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::config("ensemble has no models"));
        }
        if subsamples.len() != models.len() {
            return Err(Error::contract("one subsample per model required"));
        }
        let p = models[0].input_dim();
        if models.iter().any(|m| m.input_dim() != p) {
            return Err(Error::contract("ensemble members take different covariates"));
        }
        Ok(Self { models, subsamples })
    }

    pub fn models(&self) -> &[InnerModel] {
        &self.models
    }

    pub fn subsamples(&self) -> &[Vec<usize>] {
        &self.subsamples
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn ensemble_predict(&self, subject: &Subject) -> Result<f64> {
        let mut sum = 0.0;
        for m in &self.models {
            sum += m.predict(subject)?;
        }
        Ok(sum / self.models.len() as f64)
    }

    pub fn predict_cohort(&self, cohort: &Cohort) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; cohort.len()];
        for m in &self.models {
            for (a, p) in acc.iter_mut().zip(m.predict_cohort(cohort)?) {
                *a += p;
            }
        }
        let k = self.models.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    }

    pub fn to_envelope(&self, covariate_schema_hash: Option<String>) -> EnsembleEnvelope {
        EnsembleEnvelope {
            members: self
                .models
                .iter()
                .map(|m| m.to_envelope(covariate_schema_hash.clone()))
                .collect(),
            subsamples: self.subsamples.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEnvelope {
    pub members: Vec<ModelEnvelope>,
    pub subsamples: Vec<Vec<usize>>,
}

impl EnsembleEnvelope {
    pub fn into_ensemble(self) -> Result<BalancedEnsemble> {
        let models = self
            .members
            .into_iter()
            .map(ModelEnvelope::into_model)
            .collect::<Result<_>>()?;
        BalancedEnsemble::new(models, self.subsamples)
    }
}

/// Trains `k` models, each on a fresh balanced subsample of `train_set`.
/// Member `j` uses a seed derived from `cfg.seed` for its subsample,
/// initialization (through `model_factory`) and training.
pub fn train_balanced_ensemble<F>(
    model_factory: F,
    train_set: &Cohort,
    validation_set: &Cohort,
    cfg: &TrainConfig,
    k: usize,
) -> Result<(BalancedEnsemble, Vec<TrainLog>)>
where
    F: Fn(u64) -> Result<InnerModel> + Sync,
{
    if k == 0 {
        return Err(Error::config("ensemble size must be positive"));
    }
    let labels = train_set.require_labels()?;
    let runs: Vec<Result<(InnerModel, Vec<usize>, TrainLog)>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let seed = rng::derive_indexed(cfg.seed, "ensemble", j as u64);
            let idx = balanced_subsample(labels, seed)?;
            let model = model_factory(seed)?;
            let member_cfg = TrainConfig { seed, ..cfg.clone() };
            let (trained, log) = optim::train(&model, &train_set.select(&idx), validation_set, &member_cfg)?;
            Ok((trained, idx, log))
        })
        .collect();
    let mut models = Vec::with_capacity(k);
    let mut subsamples = Vec::with_capacity(k);
    let mut logs = Vec::with_capacity(k);
    for run in runs {
        let (m, idx, log) = run?;
        models.push(m);
        subsamples.push(idx);
        logs.push(log);
    }
    Ok((BalancedEnsemble::new(models, subsamples)?, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn schema() -> CovariateSchema {
        CovariateSchema {
            covariates: vec![
                CovariateSpec::continuous("bmi"),
                CovariateSpec::categorical("sex", None),
                CovariateSpec::categorical("site", Some(&["a", "b", "c"])),
            ],
            pain_column: "pain".into(),
            label_column: "opioid".into(),
        }
    }

    const CSV: &str = "opioid,pain,bmi,sex,site,extra\n1,3,22.5,F,a,x\n0,0,NA,M,b,y\n1,10,30,,c,z\n0,7.5,27.5,F,,w\n";

    #[test]
    fn reads_rows_with_missing_markers() {
        let t = read_table(CSV.as_bytes(), &schema()).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.pain, vec![3.0, 0.0, 10.0, 7.5]);
        assert_eq!(t.labels, Some(vec![1, 0, 1, 0]));
        assert_eq!(t.columns[0], RawColumn::Continuous(vec![Some(22.5), None, Some(30.0), Some(27.5)]));
        match &t.columns[1] {
            RawColumn::Categorical(v) => assert_eq!(v[2], None),
            _ => panic!(),
        }
    }

    #[test]
    fn pain_range_and_malformed_rows() {
        let bad = "opioid,pain,bmi,sex,site\n1,3,1,F,a\n0,12,1,F,a\n0,-1,1,F,a\n";
        match read_table(bad.as_bytes(), &schema()) {
            Err(Error::PainOutOfRange { lines }) => assert_eq!(lines, vec![3, 4]),
            other => panic!("{other:?}"),
        }
        let bad = "opioid,pain,bmi,sex,site\n1,3,abc,F,a\n";
        assert!(matches!(read_table(bad.as_bytes(), &schema()), Err(Error::Parse { line: 2, .. })));
        let bad = "opioid,pain,bmi,sex,site\n1,3,1,F,a\n1,3,1\n";
        assert!(matches!(read_table(bad.as_bytes(), &schema()), Err(Error::Parse { line: 3, .. })));
        let bad = "opioid,pain,sex,site\n1,3,F,a\n";
        assert!(matches!(read_table(bad.as_bytes(), &schema()), Err(Error::Parse { line: 1, .. })));
        let bad = "opioid,pain,bmi,sex,site\n2,3,1,F,a\n";
        assert!(read_table(bad.as_bytes(), &schema()).is_err());
        let unlabeled = "pain,bmi,sex,site\n3,1,F,a\n";
        assert_eq!(read_table(unlabeled.as_bytes(), &schema()).unwrap().labels, None);
    }

    #[test]
    fn schema_validation_and_hash() {
        let mut s = schema();
        assert!(s.validate().is_ok());
        let h = s.hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, schema().hash());
        s.covariates.push(CovariateSpec::continuous("bmi"));
        assert!(s.validate().is_err());
        let mut s = schema();
        s.pain_column = "bmi".into();
        assert!(s.validate().is_err());
        let json = serde_json::to_string(&schema()).unwrap();
        assert_eq!(CovariateSchema::from_json(&json).unwrap(), schema());
        let s = CovariateSchema::from_json(
            r#"{"covariates":[{"name":"age","kind":"continuous"},{"name":"race","kind":"categorical","levels":["w","b"]}],"pain_column":"p","label_column":"y"}"#,
        )
        .unwrap();
        assert_eq!(s.covariates[1].levels.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn imputation_and_encoding() {
        let t = read_table(CSV.as_bytes(), &schema()).unwrap();
        let f = FittedTransform::fit(&t, &schema()).unwrap();
        match &f.columns[0] {
            ColumnTransform::Continuous { mean, .. } => assert_relative_eq!(*mean, 80.0 / 3.0),
            _ => panic!(),
        }
        match &f.columns[1] {
            ColumnTransform::Categorical { mode, levels, .. } => {
                assert_eq!(mode, "F");
                assert_eq!(levels, &["F", "M"]);
            }
            _ => panic!(),
        }
        let d = f.apply(&t).unwrap();
        assert_eq!(d.matrix.ncols(), 1 + 1 + 2);
        assert_eq!(d.column_names, vec!["bmi", "sex=M", "site=b", "site=c"]);
        assert_eq!(d.blocks[2].columns, vec![2, 3]);
        // missing sex imputed to F (reference), missing site imputed to a (mode by order)
        assert_eq!(d.matrix.row(2).to_vec()[1], 0.0);
        assert_eq!(d.matrix.row(3).to_vec()[2..], [0.0, 0.0]);
        let col = d.matrix.column(0);
        let mean = col.sum() / 4.0;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
        assert_eq!(d.matrix[[1, 0]], 0.0); // imputed to the mean
    }

    #[test]
    fn simple_imputation_examples() {
        let s = CovariateSchema {
            covariates: vec![CovariateSpec::continuous("v"), CovariateSpec::categorical("c", None)],
            pain_column: "x".into(),
            label_column: "y".into(),
        };
        let t = read_table("x,v,c\n1,1,A\n1,2,A\n1,,B\n1,3,\n".as_bytes(), &s).unwrap();
        let f = FittedTransform::fit_with(&t, &s, false).unwrap();
        assert_eq!(
            f.columns[0],
            ColumnTransform::Continuous {
                name: "v".into(),
                mean: 2.0,
                sd: 1.0
            }
        );
        match &f.columns[1] {
            ColumnTransform::Categorical { mode, .. } => assert_eq!(mode, "A"),
            _ => panic!(),
        }
        let d = f.apply(&t).unwrap();
        assert_eq!(d.matrix.column(0).to_vec(), vec![-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unseen_level_is_all_zero_and_no_leakage() {
        let t = read_table(CSV.as_bytes(), &schema()).unwrap();
        let (tr, te) = (t.select(&[0, 1, 2]), t.select(&[3]));
        let f = FittedTransform::fit(&tr, &schema()).unwrap();
        let mut perturbed = te.clone();
        perturbed.columns[0] = RawColumn::Continuous(vec![Some(1e6)]);
        perturbed.columns[1] = RawColumn::Categorical(vec![Some("X".into())]);
        let (_, d_te, f2) = prepare_split(&tr, &perturbed, &schema(), ImputeMode::TrainFitted).unwrap();
        assert_eq!(f, f2);
        assert_eq!(d_te.matrix[[0, 1]], 0.0);
        assert_eq!(d_te.matrix.ncols(), f.width());
    }

    #[test]
    fn per_split_mode_uses_test_statistics_with_train_levels() {
        let t = read_table(CSV.as_bytes(), &schema()).unwrap();
        let (tr, te) = (t.select(&[0, 1]), t.select(&[2, 3]));
        let (d_tr, d_te, _) = prepare_split(&tr, &te, &schema(), ImputeMode::PerSplit).unwrap();
        assert_eq!(d_tr.matrix.ncols(), d_te.matrix.ncols());
        let col = d_te.matrix.column(0);
        assert_relative_eq!(col.sum(), 0.0, epsilon = 1e-12);
        let (_, d_te2, _) = prepare_split(&tr, &te, &schema(), ImputeMode::TrainFitted).unwrap();
        assert_ne!(d_te.matrix, d_te2.matrix);
    }

    #[test]
    fn split_sizes_partition_and_determinism() {
        let (a, b) = split(10, 0.7, 1).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(10, 0.7, 1).unwrap(), (a, b));
        assert_eq!(split(5, 0.8, 3).unwrap().0.len(), 4);
        assert!(split(10, 1.0, 1).is_err());
    }

    #[test]
    fn balanced_subsample_contract() {
        let mut labels = vec![0u8; 400];
        labels[..100].fill(1);
        let a = balanced_subsample(&labels, 1).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.iter().filter(|&&i| labels[i] == 1).count(), 100);
        let b = balanced_subsample(&labels, 2).unwrap();
        let cases = |v: &[usize]| v.iter().copied().filter(|&i| labels[i] == 1).collect::<Vec<_>>();
        assert_eq!(cases(&a), cases(&b));
        assert_ne!(a, b);
        assert_eq!(balanced_subsample(&[1, 0], 0).unwrap(), vec![0, 1]);
        assert!(balanced_subsample(&[1, 1, 0], 0).is_err());
        assert!(balanced_subsample(&[0, 0], 0).is_err());
    }

    #[test]
    fn ensemble_averaging() {
        let m = InnerModel::logistic_with(&[0.3], -0.2, &[0.1], 0.05).unwrap();
        let s = Subject::new(4.0, vec![1.5], None).unwrap();
        let e = BalancedEnsemble::new(vec![m.clone(); 5], vec![vec![]; 5]).unwrap();
        assert!((e.ensemble_predict(&s).unwrap() - m.predict(&s).unwrap()).abs() < 1e-12);
        // logit(0.2) and logit(0.6) as intercepts
        let lo = InnerModel::logistic_with(&[0.0], (0.2f64 / 0.8).ln(), &[0.0], 0.0).unwrap();
        let hi = InnerModel::logistic_with(&[0.0], (0.6f64 / 0.4).ln(), &[0.0], 0.0).unwrap();
        let e = BalancedEnsemble::new(vec![lo, hi], vec![vec![], vec![]]).unwrap();
        assert_relative_eq!(e.ensemble_predict(&s).unwrap(), 0.4, epsilon = 1e-12);
        assert!(BalancedEnsemble::new(vec![], vec![]).is_err());
        let env = e.to_envelope(Some("h".into()));
        let json = serde_json::to_string(&env).unwrap();
        let back: EnsembleEnvelope = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_ensemble().unwrap(), e);
    }
}
