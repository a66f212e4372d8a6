//! Convergence and efficiency measures over chain traces.

mod geweke;

pub use geweke::{geweke_test, GewekeConfig, GewekeReport, GewekeStatistic};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::{BlockStats, ChainTrace};

/// R-hat below this for every variable counts as converged.
pub const RHAT_THRESHOLD: f64 = 1.1;

/// Above this length autocovariances are computed by FFT.
const DIRECT_MAX_LEN: usize = 10_000;

/// Shortest series for which [`ess`] returns an estimate.
const MIN_ESS_LEN: usize = 4;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Split-chain potential scale reduction factor.
///
/// Each chain is cut into halves (dropping the middle draw of an odd-length
/// chain) and the classic between/within formula is applied to the halves.
/// Identical constant chains give 1.
pub fn rhat(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument("R-hat needs at least two chains".into()));
    }
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if len < 10 {
        return Err(Error::InvalidArgument(format!(
            "R-hat needs chains of length at least 10, got {len}"
        )));
    }
    let half = len / 2;
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..len];
        parts.push(&c[..half]);
        parts.push(&c[len - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let w = parts
        .iter()
        .zip(&means)
        .map(|(p, &m)| sample_var(p, m))
        .sum::<f64>()
        / parts.len() as f64;
    let b = n * sample_var(&means, mean(&means));
    // relative to the scale of the draws, so that the rule is affine invariant
    let scale = parts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tiny = (1e-14 * scale).powi(2);
    if w <= tiny {
        return Ok(if b <= tiny { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Biased autocovariances `γ_k = (1/N) Σ (x_t − x̄)(x_{t+k} − x̄)` for
/// `k < max_lag`, by direct summation.
pub fn autocovariance_direct(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..max_lag.min(n))
        .map(|k| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Same as [`autocovariance_direct`] via a zero-padded FFT.
pub fn autocovariance_fft(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for z in buf.iter_mut() {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf.iter()
        .take(max_lag.min(n))
        .map(|z| z.re / (size as f64 * n as f64))
        .collect()
}

/// Effective sample size with Geyer's initial monotone sequence estimator,
/// capped at the series length. A constant series has ESS equal to its length.
pub fn ess(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < MIN_ESS_LEN {
        return Err(Error::InvalidArgument(format!(
            "ESS needs at least {MIN_ESS_LEN} draws, got {n}"
        )));
    }
    let acov = if n <= DIRECT_MAX_LEN {
        autocovariance_direct(x, n)
    } else {
        autocovariance_fft(x, n)
    };
    let g0 = acov[0];
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if g0 <= (1e-14 * scale).powi(2) {
        return Ok(n as f64);
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = (acov[k] + acov[k + 1]) / g0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0);
    Ok(n as f64 / tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Latent,
    Theta,
    Alpha,
}

impl Block {
    fn label(self) -> &'static str {
        match self {
            Block::Latent => "f",
            Block::Theta => "theta",
            Block::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDiagnostics {
    pub name: String,
    pub block: Block,
    /// Absent for single-chain input.
    pub rhat: Option<f64>,
    /// Summed over chains.
    pub ess: f64,
    /// ESS as a percentage of all pooled draws.
    pub ess_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: Block,
    pub variables: usize,
    pub ess_pct_min: f64,
    pub ess_pct_mean: f64,
    pub ess_pct_max: f64,
    pub rhat_max: Option<f64>,
    pub acceptance: f64,
    pub divergent: u64,
    pub nonconverged: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rhat_method: String,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// False when any R-hat is at or above [`RHAT_THRESHOLD`], or when R-hat
    /// could not be computed at all.
    pub converged: bool,
    pub rhat_available: bool,
    pub variables: Vec<VariableDiagnostics>,
    pub blocks: Vec<BlockSummary>,
    pub max_jitter: f64,
    pub jitter_escalations: u64,
    pub aborted_chains: Vec<usize>,
    pub notes: Vec<String>,
    pub geweke: Option<GewekeReport>,
}

/// Per-variable R-hat and ESS for every sampled quantity, aggregated by block.
pub fn summarize(traces: &[ChainTrace]) -> Result<DiagnosticsReport> {
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    if traces.is_empty() || len == 0 {
        return Err(Error::EmptyTrace);
    }
    let meta = &traces[0].meta;
    let (m, n, q) = (meta.m, meta.n, meta.q);
    let mut series: Vec<(String, Block, Vec<Vec<f64>>)> = Vec::new();
    let column = |get: &dyn Fn(&ChainTrace) -> Vec<f64>| -> Vec<Vec<f64>> {
        traces.iter().map(|t| get(t)[..len].to_vec()).collect()
    };
    if traces.iter().all(|t| t.f.len() >= len) {
        for c in 0..m {
            for i in 0..n {
                let k = c * n + i;
                series.push((format!("f_{c}_{i}"), Block::Latent, column(&|t| t.f_series(k))));
            }
        }
    }
    for c in 0..m {
        for s in 0..q {
            series.push((
                format!("theta_{c}_{s}"),
                Block::Theta,
                column(&|t| t.theta_series(c, s)),
            ));
        }
    }
    if traces.iter().all(|t| t.alpha.len() >= len) {
        series.push(("alpha".into(), Block::Alpha, column(&|t| t.alpha.clone())));
    }

    let multi = traces.len() >= 2 && len >= 10;
    let pooled = (traces.len() * len) as f64;
    let mut variables = Vec::with_capacity(series.len());
    for (name, block, chains) in series {
        let rhat = if multi {
            let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
            Some(rhat(&refs)?)
        } else {
            None
        };
        let ess_total = if len >= MIN_ESS_LEN {
            chains.iter().map(|c| ess(c)).sum::<Result<f64>>()?
        } else {
            pooled
        };
        variables.push(VariableDiagnostics {
            name,
            block,
            rhat,
            ess: ess_total,
            ess_pct: 100.0 * ess_total / pooled,
        });
    }

    let stats_for = |block: Block| -> BlockStats {
        let mut total = BlockStats::default();
        for t in traces {
            total.merge(match block {
                Block::Latent => &t.meta.latent,
                Block::Theta => &t.meta.hyper,
                Block::Alpha => &t.meta.alpha,
            });
        }
        total
    };
    let mut blocks = Vec::new();
    for block in [Block::Latent, Block::Theta, Block::Alpha] {
        let vars: Vec<&VariableDiagnostics> =
            variables.iter().filter(|v| v.block == block).collect();
        if vars.is_empty() {
            continue;
        }
        let pct: Vec<f64> = vars.iter().map(|v| v.ess_pct).collect();
        let stats = stats_for(block);
        blocks.push(BlockSummary {
            block,
            variables: vars.len(),
            ess_pct_min: pct.iter().copied().fold(f64::INFINITY, f64::min),
            ess_pct_mean: mean(&pct),
            ess_pct_max: pct.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            rhat_max: vars
                .iter()
                .filter_map(|v| v.rhat)
                .fold(None, |a: Option<f64>, r| Some(a.map_or(r, |a| a.max(r)))),
            acceptance: stats.rate(),
            divergent: stats.divergent,
            nonconverged: stats.nonconverged,
        });
    }

    let mut notes = Vec::new();
    if !multi {
        notes.push("R-hat not computed: needs at least two chains of length 10".into());
    }
    if let Some(note) = &meta.hyper_mass {
        notes.push(format!("weight-block mass: {note}"));
    }
    let converged = multi
        && variables
            .iter()
            .all(|v| v.rhat.is_some_and(|r| r < RHAT_THRESHOLD));
    Ok(DiagnosticsReport {
        rhat_method: "split".into(),
        chains: traces.len(),
        draws_per_chain: len,
        converged,
        rhat_available: multi,
        variables,
        blocks,
        max_jitter: traces.iter().map(|t| t.meta.max_jitter).fold(0.0, f64::max),
        jitter_escalations: traces.iter().map(|t| t.meta.jitter_escalations).sum(),
        aborted_chains: traces
            .iter()
            .filter(|t| t.meta.aborted.is_some())
            .map(|t| t.meta.chain)
            .collect(),
        notes,
        geweke: None,
    })
}

impl DiagnosticsReport {
    pub fn block(&self, block: Block) -> Option<&BlockSummary> {
        self.blocks.iter().find(|b| b.block == block)
    }

    /// Writes `diagnostics.csv` (one row per variable), `diagnostics.json`
    /// and `diagnostics.txt`. Returns the JSON path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("diagnostics.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["variable", "block", "rhat", "ess", "ess_pct"])?;
        for v in &self.variables {
            w.write_record([
                v.name.clone(),
                v.block.label().to_owned(),
                v.rhat.map_or_else(|| "NA".into(), |r| r.to_string()),
                v.ess.to_string(),
                v.ess_pct.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("diagnostics.json");
        fs::write(&json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json_path, e))?;
        let txt_path = dir.join("diagnostics.txt");
        fs::write(&txt_path, self.to_string()).map_err(|e| Error::io(&txt_path, e))?;
        Ok(json_path)
    }
}

impl fmt::Display for DiagnosticsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "chains: {}  draws/chain: {}  R-hat: {}",
            self.chains,
            self.draws_per_chain,
            if self.rhat_available { &self.rhat_method } else { "n/a" }
        )?;
        writeln!(f, "converged: {}", self.converged)?;
        writeln!(
            f,
            "{:<6} {:>5} {:>26} {:>9} {:>8} {:>6} {:>6}",
            "block", "vars", "mean %ESS (min, max)", "max R-hat", "accept", "div", "nonconv"
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "{:<6} {:>5} {:>26} {:>9} {:>8.3} {:>6} {:>6}",
                b.block.label(),
                b.variables,
                format!("{:.2} ({:.2}, {:.2})", b.ess_pct_mean, b.ess_pct_min, b.ess_pct_max),
                b.rhat_max.map_or_else(|| "NA".into(), |r| format!("{r:.3}")),
                b.acceptance,
                b.divergent,
                b.nonconverged
            )?;
        }
        if self.jitter_escalations > 0 {
            writeln!(
                f,
                "jitter escalations: {} (max relative jitter {:e})",
                self.jitter_escalations, self.max_jitter
            )?;
        }
        if !self.aborted_chains.is_empty() {
            writeln!(f, "aborted chains: {:?}", self.aborted_chains)?;
        }
        for note in &self.notes {
            writeln!(f, "note: {note}")?;
        }
        if let Some(g) = &self.geweke {
            writeln!(
                f,
                "Geweke: {}/{} |z| < 3, max |z| = {:.2}",
                g.within(3.0),
                g.statistics.len(),
                g.max_abs_z()
            )?;
        }
        Ok(())
    }
}
