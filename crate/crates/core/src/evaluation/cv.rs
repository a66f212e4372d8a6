use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    accuracy, accuracy_reject_curve, balanced_accuracy, brier, chance_test, hard_decisions,
    ChanceTest, CurvePoint,
};
use super::weights::{weight_posterior_summary, WeightSummary};
use crate::data::{make_folds, normalize_split, Dataset, NormalizeScope};
use crate::diagnostics::summarize;
use crate::error::{Error, Result};
use crate::kernels::{cross_gram, GramSet};
use crate::model::{ModelContext, PriorConfig};
use crate::prediction::{mc_predict, DEFAULT_N2};
use crate::rng::derive_seed;
use crate::samplers::{first_abort, run_chains, ChainTrace, HyperSampler, SamplerConfig};

/// Which reference models to fit next to the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Baselines {
    /// One model per data source.
    pub single_source: bool,
    /// All weights fixed at one.
    pub unweighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
    /// Root seed for folds, chains and prediction draws.
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub prior: PriorConfig,
    pub n2: usize,
    pub normalize_scope: NormalizeScope,
    pub baselines: Baselines,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 4,
            seed: 0,
            sampler: SamplerConfig::default(),
            prior: PriorConfig::default(),
            n2: DEFAULT_N2,
            normalize_scope: NormalizeScope::default(),
            baselines: Baselines::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub brier: f64,
    /// R-hat below threshold for every variable.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub fold: usize,
    pub label: usize,
    pub probs: Vec<f64>,
    pub se: Vec<f64>,
}

/// Summary of a pooled metric and its range over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub value: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub sources: Vec<String>,
    pub folds: Vec<FoldScore>,
    pub balanced_accuracy: Option<Pooled>,
    pub accuracy: Option<Pooled>,
    pub brier: Option<Pooled>,
    pub chance: Option<ChanceTest>,
    pub curve: Vec<CurvePoint>,
    /// Pooled over folds and chains.
    pub weights: Option<WeightSummary>,
    pub predictions: Vec<SubjectPrediction>,
    /// First fold failure; metrics then cover the completed folds only.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub k: usize,
    pub seed: u64,
    pub classes: Vec<String>,
    pub fold_of: Vec<usize>,
    pub config: CvConfig,
    pub models: Vec<ModelReport>,
}

impl EvaluationReport {
    pub fn aborted(&self) -> Option<&str> {
        self.models.iter().find_map(|m| m.aborted.as_deref())
    }

    pub fn all_converged(&self) -> bool {
        self.models
            .iter()
            .all(|m| m.folds.iter().all(|f| f.converged))
    }

    /// Writes `evaluation.json`, `evaluation.txt`, `curve.csv`, `weights.csv`
    /// and `predictions.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("evaluation.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("evaluation.txt");
        fs::write(&txt, self.to_string()).map_err(|e| Error::io(&txt, e))?;

        let curve = dir.join("curve.csv");
        let mut w = csv::Writer::from_path(&curve)?;
        w.write_record(["model", "threshold", "rejection_rate", "balanced_accuracy", "accuracy"])?;
        for m in &self.models {
            for p in &m.curve {
                w.write_record([
                    m.name.clone(),
                    format!("{:.2}", p.threshold),
                    p.rejection_rate.to_string(),
                    opt(p.balanced_accuracy),
                    opt(p.accuracy),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&curve, e))?;

        let weights = dir.join("weights.csv");
        let mut w = csv::Writer::from_path(&weights)?;
        w.write_record([
            "model", "class", "source", "q25", "median", "q75", "mean", "prob_above_others",
        ])?;
        for m in &self.models {
            let Some(ws) = &m.weights else { continue };
            for e in &ws.weights {
                w.write_record([
                    m.name.clone(),
                    self.classes[e.class].clone(),
                    ws.sources[e.source].clone(),
                    e.q25.to_string(),
                    e.median.to_string(),
                    e.q75.to_string(),
                    e.mean.to_string(),
                    opt(e.prob_above_others),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&weights, e))?;

        let preds = dir.join("predictions.csv");
        let mut w = csv::Writer::from_path(&preds)?;
        let mut header = vec!["model".to_owned(), "subject_id".into(), "fold".into(), "label".into()];
        header.extend(self.classes.iter().map(|c| format!("p_{c}")));
        header.extend(self.classes.iter().map(|c| format!("se_{c}")));
        w.write_record(&header)?;
        for m in &self.models {
            for p in &m.predictions {
                let mut row = vec![
                    m.name.clone(),
                    p.subject_id.clone(),
                    p.fold.to_string(),
                    self.classes[p.label].clone(),
                ];
                row.extend(p.probs.iter().chain(&p.se).map(f64::to_string));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io(&preds, e))?;
        Ok(vec![json, txt, curve, weights, preds])
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn fmt_pooled(p: Option<Pooled>) -> String {
    match p {
        Some(p) => format!("{:.3} ({:.2}, {:.2})", p.value, p.min, p.max),
        None => "NA".into(),
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}-fold cross-validation, {} models, seed {}",
            self.k,
            self.models.len(),
            self.seed
        )?;
        writeln!(
            f,
            "{:<24} {:>24} {:>24} {:>10} {:>10}",
            "model", "balanced acc. (min, max)", "Brier (min, max)", "chi2 p", "converged"
        )?;
        for m in &self.models {
            let p = m
                .chance
                .as_ref()
                .map(|c| format!("{:.2e}", c.p_value))
                .unwrap_or_else(|| "NA".into());
            let conv = m.folds.iter().filter(|s| s.converged).count();
            writeln!(
                f,
                "{:<24} {:>24} {:>24} {:>10} {:>10}",
                m.name,
                fmt_pooled(m.balanced_accuracy),
                fmt_pooled(m.brier),
                p,
                format!("{conv}/{}", m.folds.len())
            )?;
            if let Some(reason) = &m.aborted {
                writeln!(f, "  aborted: {reason}")?;
            }
        }
        for m in &self.models {
            let Some(ws) = &m.weights else { continue };
            if ws.sources.len() < 2 {
                continue;
            }
            let mut line = String::new();
            writeln!(f, "\nweights of {} (median [q25, q75])", m.name)?;
            for c in 0..self.classes.len() {
                line.clear();
                write!(line, "  {:<12}", self.classes[c])?;
                for e in ws.weights.iter().filter(|e| e.class == c) {
                    write!(
                        line,
                        " {}={:.3} [{:.3}, {:.3}]",
                        ws.sources[e.source], e.median, e.q25, e.q75
                    )?;
                }
                writeln!(f, "{line}")?;
            }
            if let Some(a) = &ws.concentration {
                writeln!(
                    f,
                    "  alpha IQR [{:.2}, {:.2}] (prior [{:.2}, {:.2}])",
                    a.q25, a.q75, a.prior_q25, a.prior_q75
                )?;
            }
        }
        Ok(())
    }
}

/// One model specification within the experiment.
struct Variant {
    name: String,
    sources: Vec<String>,
    sampler: SamplerConfig,
    prior: PriorConfig,
}

fn variants(dataset: &Dataset, config: &CvConfig) -> Vec<Variant> {
    let all: Vec<String> = dataset.modalities.iter().map(|m| m.id.clone()).collect();
    let mut out = vec![Variant {
        name: "weighted sum".into(),
        sources: all.clone(),
        sampler: config.sampler.clone(),
        prior: config.prior,
    }];
    if config.baselines.unweighted && all.len() > 1 {
        out.push(Variant {
            name: "unweighted sum".into(),
            sources: all.clone(),
            sampler: SamplerConfig {
                hyper: Some(HyperSampler::Fixed),
                ..config.sampler.clone()
            },
            prior: PriorConfig::default(),
        });
    }
    if config.baselines.single_source && all.len() > 1 {
        for id in &all {
            let mut sampler = config.sampler.clone();
            // a one-point simplex leaves nothing to sample
            if config.prior.is_dirichlet() {
                sampler.hyper = Some(HyperSampler::Fixed);
            }
            out.push(Variant {
                name: format!("single: {id}"),
                sources: vec![id.clone()],
                sampler,
                prior: config.prior,
            });
        }
    }
    out
}

struct FoldOutcome {
    score: FoldScore,
    probs: DMatrix<f64>,
    se: DMatrix<f64>,
    test_rows: Vec<usize>,
    traces: Vec<ChainTrace>,
}

fn run_fold(
    data: &Dataset,
    variant: &Variant,
    config: &CvConfig,
    train_rows: &[usize],
    test_rows: &[usize],
    fold: usize,
) -> Result<FoldOutcome> {
    let train = data.select_rows(train_rows);
    let test = data.select_rows(test_rows);
    let train_labels = train.labels()?;
    let test_labels = test.labels()?;
    let (train_x, test_x) = normalize_split(&train.modalities, &test.modalities, config.normalize_scope)?;
    let grams = Arc::new(GramSet::from_modalities(&train_x));
    let cross = cross_gram(&train_x, &test_x)?;
    let ctx = ModelContext::new(grams, train_labels, variant.prior)?;

    let sampler = SamplerConfig {
        seed: derive_seed(config.seed, "fold-chains", fold as u64),
        store_f: true,
        ..variant.sampler.clone()
    };
    let mut traces = run_chains(&ctx, &sampler)?;
    if let Some(e) = first_abort(&traces) {
        return Err(e);
    }
    let pred = mc_predict(
        &traces,
        &ctx,
        &cross,
        config.n2,
        derive_seed(config.seed, "fold-predict", fold as u64),
    )?;
    let converged = summarize(&traces).map(|d| d.converged).unwrap_or(false);
    for t in &mut traces {
        t.f = Vec::new();
    }

    let labels = test_labels.indices();
    let decisions = hard_decisions(&pred.probs);
    let m = ctx.m();
    let score = FoldScore {
        fold,
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        balanced_accuracy: balanced_accuracy(&decisions, labels, m)?,
        accuracy: accuracy(&decisions, labels)?,
        brier: brier(&pred.probs, labels)?,
        converged,
    };
    Ok(FoldOutcome {
        score,
        probs: pred.probs,
        se: pred.se,
        test_rows: test_rows.to_vec(),
        traces,
    })
}

fn pooled(values: &[f64], value: f64) -> Pooled {
    Pooled {
        value,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn assemble(
    variant: &Variant,
    outcomes: Vec<Result<FoldOutcome>>,
    data: &Dataset,
    class_priors: &[f64],
) -> Result<ModelReport> {
    let labels = data.labels()?;
    let m = labels.n_classes();
    let mut folds = Vec::new();
    let mut predictions = Vec::new();
    let mut traces = Vec::new();
    let mut aborted = None;
    for (fold, outcome) in outcomes.into_iter().enumerate() {
        let o = match outcome {
            Ok(o) => o,
            Err(e) => {
                aborted.get_or_insert_with(|| format!("fold {fold}: {e}"));
                continue;
            }
        };
        for (r, &row) in o.test_rows.iter().enumerate() {
            predictions.push(SubjectPrediction {
                subject_id: data.subject_ids[row].clone(),
                fold,
                label: labels.class_of(row),
                probs: o.probs.row(r).iter().copied().collect(),
                se: o.se.row(r).iter().copied().collect(),
            });
        }
        folds.push(o.score);
        traces.extend(o.traces);
    }

    let (mut bal, mut acc, mut bri, mut chance, mut curve) = (None, None, None, None, Vec::new());
    if !predictions.is_empty() {
        let probs = DMatrix::from_fn(predictions.len(), m, |i, c| predictions[i].probs[c]);
        let y: Vec<usize> = predictions.iter().map(|p| p.label).collect();
        let decisions = hard_decisions(&probs);
        let per = |f: fn(&FoldScore) -> f64| folds.iter().map(f).collect::<Vec<_>>();
        bal = Some(pooled(&per(|s| s.balanced_accuracy), balanced_accuracy(&decisions, &y, m)?));
        acc = Some(pooled(&per(|s| s.accuracy), accuracy(&decisions, &y)?));
        bri = Some(pooled(&per(|s| s.brier), brier(&probs, &y)?));
        chance = Some(chance_test(&decisions, &y, class_priors)?);
        curve = accuracy_reject_curve(&probs, &y);
    }
    let weights = if traces.is_empty() {
        None
    } else {
        weight_posterior_summary(&traces, &variant.prior).ok()
    };
    Ok(ModelReport {
        name: variant.name.clone(),
        sources: variant.sources.clone(),
        folds,
        balanced_accuracy: bal,
        accuracy: acc,
        brier: bri,
        chance,
        curve,
        weights,
        predictions,
        aborted,
    })
}

/// Stratified k-fold cross-validation of the weighted-sum model and any
/// configured baselines.
///
/// Every fold normalizes features within its own split, fits fresh chains
/// on the training rows and predicts the held-out rows. Pooled metrics use
/// the concatenated held-out predictions, decided without rejection; the
/// chance test compares against the full-cohort class frequencies. A failing
/// fold is recorded in `ModelReport::aborted` and the remaining folds are
/// still reported.
pub fn run_cv_experiment(dataset: &Dataset, config: &CvConfig) -> Result<EvaluationReport> {
    let labels = dataset.labels()?;
    config.sampler.validate()?;
    config.prior.validate()?;
    if config.n2 == 0 {
        return Err(Error::InvalidArgument("N2 must be at least 1".into()));
    }
    let folds = make_folds(labels, config.k, config.seed)?;
    let class_priors = labels.frequencies();

    let mut models = Vec::new();
    for variant in variants(dataset, config) {
        let data = dataset.select_sources(&variant.sources)?;
        let outcomes: Vec<Result<FoldOutcome>> = (0..config.k)
            .into_par_iter()
            .map(|k| {
                let test = folds.test_rows(k);
                if test.is_empty() {
                    return Err(Error::EmptySet);
                }
                run_fold(&data, &variant, config, &folds.train_rows(k), &test, k)
            })
            .collect();
        log::info!("finished model {:?}", variant.name);
        models.push(assemble(&variant, outcomes, &data, &class_priors)?);
    }
    Ok(EvaluationReport {
        k: config.k,
        seed: config.seed,
        classes: labels.classes().to_vec(),
        fold_of: folds.fold_of().to_vec(),
        config: config.clone(),
        models,
    })
}
