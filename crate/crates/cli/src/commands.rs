use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use mkgp::data::{
    generate_synthetic, load_dataset, normalize_features, normalize_split, save_dataset, Dataset,
    NormalizeScope, SyntheticSpec,
};
use mkgp::diagnostics::summarize;
use mkgp::evaluation::{balanced_accuracy, brier, hard_decisions, run_cv_experiment};
use mkgp::kernels::{cross_gram, GramSet};
use mkgp::model::{ModelContext, PriorConfig};
use mkgp::prediction::mc_predict;
use mkgp::rng::derive_seed;
use mkgp::samplers::{first_abort, read_trace, run_chains, write_trace, ChainTrace};
use serde::Serialize;

use crate::settings::Settings;
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load(s: &Settings) -> Result<Dataset, CliError> {
    let data = load_dataset(s.required(&s.data, "data")?)?;
    Ok(match &s.use_sources {
        Some(ids) => data.select_sources(ids)?,
        None => data,
    })
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    spec: &'a SyntheticSpec,
    /// `m × q` log-weights, one row per class.
    theta: Vec<Vec<f64>>,
    alpha: Option<f64>,
    /// Latent values, class blocks concatenated.
    f: Vec<f64>,
}

pub fn generate(s: &Settings) -> Result<(), CliError> {
    let out = s.required(&s.out, "out")?;
    let mut spec = SyntheticSpec::new(
        s.subjects.unwrap_or(62),
        s.classes.unwrap_or(4),
        s.sources.unwrap_or(5),
        s.features.unwrap_or(20),
        s.seed.unwrap_or(0),
    );
    spec.prior = s.prior()?;
    if let Some(v) = s.shared_factor {
        spec.shared_factor = v;
    }
    let syn = generate_synthetic(&spec)?;
    let manifest = save_dataset(out, &syn.dataset)?;
    let truth = GroundTruth {
        spec: &spec,
        theta: syn
            .hyper
            .theta
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        alpha: syn.hyper.alpha,
        f: syn.f.iter().copied().collect(),
    };
    write_json(&out.join("truth.json"), &truth)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn context(data: &Dataset, s: &Settings) -> Result<ModelContext, CliError> {
    let normalized = data
        .modalities
        .iter()
        .map(normalize_features)
        .collect::<mkgp::Result<Vec<_>>>()?;
    let grams = Arc::new(GramSet::from_modalities(&normalized));
    Ok(ModelContext::new(grams, data.labels()?, s.prior()?)?)
}

/// Diagnostics for `traces`, written to `dir`; aborts and non-convergence
/// map to exit codes after everything is on disk.
fn report(traces: &[ChainTrace], dir: &Path, s: &Settings) -> Result<(), CliError> {
    let diag = summarize(traces)?;
    diag.write(dir)?;
    print!("{diag}");
    if let Some(e) = first_abort(traces) {
        return Err(e.into());
    }
    if !diag.converged && !s.allow_nonconverged {
        return Err(CliError::NotConverged(format!(
            "R-hat flags non-convergence; see {}",
            dir.display()
        )));
    }
    Ok(())
}

pub fn fit(s: &Settings) -> Result<(), CliError> {
    let out = s.required(&s.out, "out")?.to_path_buf();
    let data = load(s)?;
    let ctx = context(&data, s)?;
    let config = s.sampler()?;
    info!("fitting n={} m={} q={} with scheme {}", ctx.n(), ctx.m(), ctx.q(), config.scheme.label());
    let traces = run_chains(&ctx, &config)?;
    let trace_dir = out.join("traces");
    for t in &traces {
        write_trace(&trace_dir, t)?;
    }
    report(&traces, &out, s)
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("chain_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no chain_*.csv in {}", dir.display())));
    }
    Ok(files)
}

fn read_traces(s: &Settings) -> Result<Vec<ChainTrace>, CliError> {
    trace_files(s.required(&s.traces, "traces")?)?
        .iter()
        .map(|p| read_trace(p).map_err(CliError::from))
        .collect()
}

pub fn diagnose(s: &Settings) -> Result<(), CliError> {
    let out = s.required(&s.out, "out")?;
    let traces = read_traces(s)?;
    report(&traces, out, s)
}

#[derive(Serialize)]
struct PredictionScores {
    n_test: usize,
    balanced_accuracy: f64,
    brier: f64,
}

/// Predicts the `--test` subjects from traces fitted on `--data`. Feature
/// statistics always come from the training rows, matching how `fit`
/// built the training kernels.
pub fn predict(s: &Settings) -> Result<(), CliError> {
    let out = s.required(&s.out, "out")?;
    let train = load(s)?;
    let test = load_dataset(s.required(&s.test, "test")?)?;
    let test = match &s.use_sources {
        Some(ids) => test.select_sources(ids)?,
        None => test,
    };
    let traces = read_traces(s)?;
    let (tr, te) = normalize_split(&train.modalities, &test.modalities, NormalizeScope::Train)?;
    let ctx = ModelContext::new(
        Arc::new(GramSet::from_modalities(&tr)),
        train.labels()?,
        // only the weights enter prediction, so the prior's parameters are moot
        if traces[0].meta.dirichlet {
            PriorConfig::dirichlet()
        } else {
            PriorConfig::default()
        },
    )?;
    let cross = cross_gram(&tr, &te)?;
    let seed = derive_seed(s.seed.unwrap_or(0), "cli-predict", 0);
    let pred = mc_predict(&traces, &ctx, &cross, s.n2.unwrap_or(mkgp::prediction::DEFAULT_N2), seed)?;
    let threshold = s.reject_threshold.unwrap_or(0.0);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    pred.write_csv(
        &out.join("predictions.csv"),
        &test.subject_ids,
        train.labels()?.classes(),
        threshold,
    )?;
    if let Some(labels) = &test.labels {
        // test classes may be a subset, so map by name onto the training order
        let classes = train.labels()?.classes();
        let truth = (0..labels.n_subjects())
            .map(|i| {
                let name = &labels.classes()[labels.class_of(i)];
                classes.iter().position(|c| c == name).ok_or_else(|| {
                    CliError::Usage(format!("test class {name:?} absent from training data"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scores = PredictionScores {
            n_test: truth.len(),
            balanced_accuracy: balanced_accuracy(&hard_decisions(&pred.probs), &truth, ctx.m())?,
            brier: brier(&pred.probs, &truth)?,
        };
        println!(
            "balanced accuracy {:.3}, Brier {:.3} on {} subjects",
            scores.balanced_accuracy, scores.brier, scores.n_test
        );
        write_json(&out.join("scores.json"), &scores)?;
    }
    Ok(())
}

pub fn evaluate(s: &Settings) -> Result<(), CliError> {
    let out = s.required(&s.out, "out")?;
    let data = load(s)?;
    let report = run_cv_experiment(&data, &s.cv()?)?;
    report.write(out)?;
    print!("{report}");
    if let Some(reason) = report.aborted() {
        return Err(CliError::Numerical(reason.to_owned()));
    }
    if !report.all_converged() && !s.allow_nonconverged {
        return Err(CliError::NotConverged(
            "R-hat flags non-convergence in at least one fold".into(),
        ));
    }
    Ok(())
}
