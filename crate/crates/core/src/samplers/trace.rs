use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::gibbs::{BlockStats, ChainState, ScanFlags};
use super::{HyperSampler, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::ModelContext;

/// Everything about a chain except the samples themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub chain: usize,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub modality_ids: Vec<String>,
    pub dirichlet: bool,
    pub config: SamplerConfig,
    /// How the weight-block mass was chosen, when one is used.
    pub hyper_mass: Option<String>,
    pub latent: BlockStats,
    pub hyper: BlockStats,
    pub alpha: BlockStats,
    pub max_jitter: f64,
    pub jitter_escalations: u64,
    pub aborted: Option<String>,
}

impl TraceMeta {
    pub(crate) fn new(ctx: &ModelContext, config: &SamplerConfig, chain: usize, seed: u64) -> Self {
        let hyper_mass = (config.parts().1 == HyperSampler::MetricHmc && !ctx.prior.is_dirichlet())
            .then(|| {
                "weight metric plus prior curvature at an anchor computed from f by \
                 Fisher scoring; constant within each weight update"
                    .to_owned()
            });
        Self {
            chain,
            seed,
            n: ctx.n(),
            m: ctx.m(),
            q: ctx.q(),
            modality_ids: ctx.grams.ids().to_vec(),
            dirichlet: ctx.prior.is_dirichlet(),
            config: config.clone(),
            hyper_mass,
            latent: BlockStats::default(),
            hyper: BlockStats::default(),
            alpha: BlockStats::default(),
            max_jitter: 0.0,
            jitter_escalations: 0,
            aborted: None,
        }
    }

    pub fn divergences(&self) -> u64 {
        self.latent.divergent + self.hyper.divergent + self.alpha.divergent
    }
}

/// Thinned post-burn-in samples of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub meta: TraceMeta,
    pub iterations: Vec<usize>,
    pub flags: Vec<ScanFlags>,
    /// Log-joint at each kept sample.
    pub log_joint: Vec<f64>,
    /// Log-joint at every iteration, burn-in included.
    pub log_joint_all: Vec<f64>,
    /// Row-major flattened `θ` per sample.
    pub theta: Vec<DVector<f64>>,
    /// Empty unless the Dirichlet prior is used.
    pub alpha: Vec<f64>,
    /// Empty unless latent samples are stored.
    pub f: Vec<DVector<f64>>,
}

impl ChainTrace {
    pub fn new(meta: TraceMeta) -> Self {
        Self {
            meta,
            iterations: Vec::new(),
            flags: Vec::new(),
            log_joint: Vec::new(),
            log_joint_all: Vec::new(),
            theta: Vec::new(),
            alpha: Vec::new(),
            f: Vec::new(),
        }
    }

    pub(crate) fn push(
        &mut self,
        iteration: usize,
        flags: ScanFlags,
        log_joint: f64,
        state: &ChainState,
        store_f: bool,
    ) {
        self.iterations.push(iteration);
        self.flags.push(flags);
        self.log_joint.push(log_joint);
        self.theta.push(state.hyper.flat_theta());
        if let Some(a) = state.hyper.alpha {
            self.alpha.push(a);
        }
        if store_f {
            self.f.push(state.latent.f.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Samples of `θ_cs`.
    pub fn theta_series(&self, c: usize, s: usize) -> Vec<f64> {
        let k = c * self.meta.q + s;
        self.theta.iter().map(|t| t[k]).collect()
    }

    /// Samples of latent coordinate `k` (class-major index).
    pub fn f_series(&self, k: usize) -> Vec<f64> {
        self.f.iter().map(|f| f[k]).collect()
    }
}

/// The reason the first failed chain stopped, if any did.
pub fn first_abort(traces: &[ChainTrace]) -> Option<Error> {
    traces.iter().find_map(|t| {
        t.meta.aborted.as_ref().map(|reason| Error::ChainAborted {
            chain: t.meta.chain,
            reason: reason.clone(),
        })
    })
}

fn stem(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain_{chain}"))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    meta: TraceMeta,
    log_joint_all: Vec<f64>,
}

/// Writes `chain_<k>.csv` (one row per kept sample) and `chain_<k>.json`
/// (metadata and the full log-joint history). Returns the CSV path.
pub fn write_trace(dir: &Path, trace: &ChainTrace) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = stem(dir, trace.meta.chain);
    let csv_path = base.with_extension("csv");
    let (m, q, n) = (trace.meta.m, trace.meta.q, trace.meta.n);
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header: Vec<String> = ["iteration", "acc_latent", "acc_hyper", "acc_alpha", "log_joint"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in 0..m {
        for s in 0..q {
            header.push(format!("theta_{c}_{s}"));
        }
    }
    let has_alpha = !trace.alpha.is_empty();
    let has_f = !trace.f.is_empty();
    if has_alpha {
        header.push("alpha".into());
    }
    if has_f {
        for c in 0..m {
            for i in 0..n {
                header.push(format!("f_{c}_{i}"));
            }
        }
    }
    w.write_record(&header)?;
    for k in 0..trace.len() {
        let fl = trace.flags[k];
        let mut row = vec![
            trace.iterations[k].to_string(),
            (fl.latent as u8).to_string(),
            (fl.hyper as u8).to_string(),
            (fl.alpha as u8).to_string(),
            trace.log_joint[k].to_string(),
        ];
        row.extend(trace.theta[k].iter().map(|v| v.to_string()));
        if has_alpha {
            row.push(trace.alpha[k].to_string());
        }
        if has_f {
            row.extend(trace.f[k].iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = base.with_extension("json");
    let sidecar = Sidecar {
        meta: trace.meta.clone(),
        log_joint_all: trace.log_joint_all.clone(),
    };
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(csv_path)
}

/// Reads a trace written by [`write_trace`], given its CSV path.
pub fn read_trace(csv_path: &Path) -> Result<ChainTrace> {
    let json_path = csv_path.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let mut trace = ChainTrace::new(sidecar.meta);
    trace.log_joint_all = sidecar.log_joint_all;
    let (m, q, n) = (trace.meta.m, trace.meta.q, trace.meta.n);
    let mut reader = csv::Reader::from_path(csv_path)?;
    let header = reader.headers()?.clone();
    let has_alpha = header.iter().any(|h| h == "alpha");
    let has_f = header.iter().any(|h| h.starts_with("f_"));
    let bad = |line: usize, msg: String| Error::Parse {
        path: csv_path.to_path_buf(),
        line,
        msg,
    };
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .ok_or_else(|| bad(line, format!("missing column {j}")))?
                .parse::<f64>()
                .map_err(|e| bad(line, e.to_string()))
        };
        let flag = |j: usize| -> Result<bool> { Ok(num(j)? != 0.0) };
        trace.iterations.push(num(0)? as usize);
        trace.flags.push(ScanFlags {
            latent: flag(1)?,
            hyper: flag(2)?,
            alpha: flag(3)?,
        });
        trace.log_joint.push(num(4)?);
        let mut col = 5;
        let theta = (0..m * q)
            .map(|j| num(col + j))
            .collect::<Result<Vec<_>>>()?;
        col += m * q;
        trace.theta.push(DVector::from_vec(theta));
        if has_alpha {
            trace.alpha.push(num(col)?);
            col += 1;
        }
        if has_f {
            let f = (0..m * n).map(|j| num(col + j)).collect::<Result<Vec<_>>>()?;
            trace.f.push(DVector::from_vec(f));
        }
    }
    Ok(trace)
}
