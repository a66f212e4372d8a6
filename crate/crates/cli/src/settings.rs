//! Run settings shared by every subcommand. Each can come from a flag or
//! from a TOML file given with `--config`; flags win.

use std::path::{Path, PathBuf};

use clap::Args;
use mkgp::data::NormalizeScope;
use mkgp::evaluation::{Baselines, CvConfig};
use mkgp::model::PriorConfig;
use mkgp::samplers::{SamplerConfig, Scheme};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// TOML file with any of these settings (keys in kebab-case).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Dataset manifest (training data for `predict`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Manifest of the subjects to predict.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Directory holding `chain_<k>.csv` traces.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,

    // synthetic data
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub shared_factor: Option<f64>,

    /// Sampling scheme, a to f.
    #[arg(long)]
    pub scheme: Option<String>,
    /// gamma or dirichlet.
    #[arg(long)]
    pub prior: Option<String>,
    #[arg(long)]
    pub prior_shape: Option<f64>,
    #[arg(long)]
    pub prior_rate: Option<f64>,
    #[arg(long)]
    pub alpha_rate: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub step_size_f: Option<f64>,
    #[arg(long)]
    pub step_size_theta: Option<f64>,
    #[arg(long)]
    pub leapfrog_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub k_folds: Option<usize>,
    #[arg(long)]
    pub n2: Option<usize>,
    #[arg(long)]
    pub reject_threshold: Option<f64>,
    /// train or all.
    #[arg(long)]
    pub normalize_scope: Option<String>,
    /// Restrict to these data sources (comma separated).
    #[arg(long = "use-sources", value_delimiter = ',')]
    pub use_sources: Option<Vec<String>>,
    /// Extra models to score: single, unweighted (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub baselines: Option<Vec<String>>,

    /// Worker threads for chains and folds (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Exit 0 even when R-hat flags non-convergence.
    #[arg(long)]
    #[serde(default)]
    pub allow_nonconverged: bool,
}

macro_rules! prefer_flags {
    ($flags:ident, $file:ident; $($field:ident),* $(,)?) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field; } )*
    };
}

impl Settings {
    /// Fills every unset flag from the `--config` file, if one was given.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let file: Settings = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        prefer_flags!(self, file;
            data, test, traces, out, subjects, classes, sources, features, shared_factor,
            scheme, prior, prior_shape, prior_rate, alpha_rate, iterations, burn_in, thin,
            chains, step_size_f, step_size_theta, leapfrog_steps, seed, k_folds, n2,
            reject_threshold, normalize_scope, use_sources, baselines, jobs);
        self.allow_nonconverged |= file.allow_nonconverged;
        Ok(self)
    }

    pub fn required<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }

    pub fn prior(&self) -> Result<PriorConfig, CliError> {
        let prior = match self.prior.as_deref().unwrap_or("gamma") {
            "gamma" => {
                let PriorConfig::Gamma { shape, rate } = PriorConfig::default() else {
                    unreachable!()
                };
                PriorConfig::Gamma {
                    shape: self.prior_shape.unwrap_or(shape),
                    rate: self.prior_rate.unwrap_or(rate),
                }
            }
            "dirichlet" => PriorConfig::Dirichlet {
                alpha_rate: self.alpha_rate.unwrap_or(1.0),
            },
            other => return Err(CliError::Usage(format!("unknown prior {other:?}"))),
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        let mut s = SamplerConfig::default();
        if let Some(v) = &self.scheme {
            s.scheme = Scheme::parse(v)?;
        }
        if let Some(v) = self.iterations {
            s.n_iterations = v;
            // keep the default burn-in fraction when only the length changes
            if self.burn_in.is_none() {
                s.burn_in = v / 2;
            }
        }
        s.burn_in = self.burn_in.unwrap_or(s.burn_in);
        s.thin = self.thin.unwrap_or(s.thin);
        s.n_chains = self.chains.unwrap_or(s.n_chains);
        s.step_size_f = self.step_size_f.unwrap_or(s.step_size_f);
        s.step_size_theta = self.step_size_theta.unwrap_or(s.step_size_theta);
        s.leapfrog_steps = self.leapfrog_steps.unwrap_or(s.leapfrog_steps);
        s.seed = self.seed.unwrap_or(s.seed);
        s.validate()?;
        Ok(s)
    }

    pub fn normalize_scope(&self) -> Result<NormalizeScope, CliError> {
        match self.normalize_scope.as_deref().unwrap_or("train") {
            "train" => Ok(NormalizeScope::Train),
            "all" => Ok(NormalizeScope::All),
            other => Err(CliError::Usage(format!("unknown normalize scope {other:?}"))),
        }
    }

    pub fn cv(&self) -> Result<CvConfig, CliError> {
        let mut baselines = Baselines::default();
        for b in self.baselines.iter().flatten().filter(|b| !b.is_empty()) {
            match b.as_str() {
                "single" => baselines.single_source = true,
                "unweighted" => baselines.unweighted = true,
                other => return Err(CliError::Usage(format!("unknown baseline {other:?}"))),
            }
        }
        let defaults = CvConfig::default();
        Ok(CvConfig {
            k: self.k_folds.unwrap_or(defaults.k),
            seed: self.seed.unwrap_or(defaults.seed),
            sampler: self.sampler()?,
            prior: self.prior()?,
            n2: self.n2.unwrap_or(defaults.n2),
            normalize_scope: self.normalize_scope()?,
            baselines,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "scheme = \"b\"\nchains = 3\nseed = 9\n").unwrap();
        let flags = Settings {
            config: Some(path),
            seed: Some(1),
            ..Settings::default()
        };
        let s = flags.resolve().unwrap();
        assert_eq!(s.seed, Some(1));
        assert_eq!(s.chains, Some(3));
        assert_eq!(s.sampler().unwrap().scheme, Scheme::B);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "chians = 3\n").unwrap();
        let flags = Settings {
            config: Some(path),
            ..Settings::default()
        };
        assert!(matches!(flags.resolve(), Err(CliError::Usage(_))));
    }

    #[test]
    fn iterations_alone_keep_half_as_burn_in() {
        let s = Settings {
            iterations: Some(300),
            ..Settings::default()
        };
        let c = s.sampler().unwrap();
        assert_eq!((c.n_iterations, c.burn_in), (300, 150));
    }
}
