//! Linear Gram matrices and their weighted per-class combinations.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::data::ModalityMatrix;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, CholeskyFactor, JitterPolicy};

/// `X Xᵀ`, made exactly symmetric.
pub fn gram(x: &ModalityMatrix) -> DMatrix<f64> {
    let mut c = &x.values * x.values.transpose();
    symmetrize(&mut c);
    c
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

/// One Gram matrix per modality over a common set of subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    ids: Vec<String>,
    grams: Vec<DMatrix<f64>>,
}

impl GramSet {
    pub fn from_modalities(modalities: &[ModalityMatrix]) -> Self {
        Self {
            ids: modalities.iter().map(|m| m.id.clone()).collect(),
            grams: modalities.iter().map(gram).collect(),
        }
    }

    /// Wraps precomputed matrices, checking shape and symmetry.
    pub fn from_matrices(ids: Vec<String>, grams: Vec<DMatrix<f64>>) -> Result<Self> {
        if grams.is_empty() || ids.len() != grams.len() {
            return Err(Error::Dimension(format!(
                "{} ids for {} Gram matrices",
                ids.len(),
                grams.len()
            )));
        }
        let n = grams[0].nrows();
        for (id, c) in ids.iter().zip(&grams) {
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::Dimension(format!(
                    "Gram {id} is {}x{}, expected {n}x{n}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            let scale = c.amax().max(1.0);
            if crate::linalg::asymmetry(c) > 1e-10 * scale {
                return Err(Error::InvalidArgument(format!("Gram {id} is not symmetric")));
            }
        }
        Ok(Self { ids, grams })
    }

    pub fn n(&self) -> usize {
        self.grams[0].nrows()
    }

    pub fn q(&self) -> usize {
        self.grams.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, s: usize) -> &DMatrix<f64> {
        &self.grams[s]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.grams.iter()
    }

    /// `Σ_s w_s C_s`
    pub fn combine(&self, weights: &[f64]) -> DMatrix<f64> {
        assert_eq!(weights.len(), self.q(), "one weight per modality");
        let mut k = DMatrix::zeros(self.n(), self.n());
        for (w, c) in weights.iter().zip(&self.grams) {
            k += c * *w;
        }
        k
    }

    pub fn mean_diag(&self, s: usize) -> f64 {
        let c = &self.grams[s];
        c.diagonal().sum() / c.nrows() as f64
    }

    /// Restriction to a subset of subjects.
    pub fn select(&self, rows: &[usize]) -> GramSet {
        GramSet {
            ids: self.ids.clone(),
            grams: self
                .grams
                .iter()
                .map(|c| c.select_rows(rows.iter()).select_columns(rows.iter()))
                .collect(),
        }
    }
}

/// `K_c = Σ_s exp(θ_cs) C_s` and its jittered factor.
#[derive(Debug, Clone)]
pub struct ClassCovariance {
    /// Weighted sum without jitter.
    pub k: DMatrix<f64>,
    pub factor: CholeskyFactor,
    pub weights: Vec<f64>,
    /// Jitter as a fraction of `mean(diag K)`.
    pub relative_jitter: f64,
}

impl ClassCovariance {
    pub fn jitter_used(&self) -> f64 {
        self.factor.jitter()
    }
}

/// Builds the covariance for one class from its log-weights.
pub fn class_covariance(
    theta_c: &[f64],
    grams: &GramSet,
    policy: &JitterPolicy,
) -> Result<ClassCovariance> {
    if theta_c.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("non-finite log-weight".into()));
    }
    let weights: Vec<f64> = theta_c.iter().map(|t| t.exp()).collect();
    weighted_covariance(weights, grams, policy)
}

pub(crate) fn weighted_covariance(
    weights: Vec<f64>,
    grams: &GramSet,
    policy: &JitterPolicy,
) -> Result<ClassCovariance> {
    let k = grams.combine(&weights);
    let factor = cholesky_with_jitter(&k, policy)?;
    let mean_diag = k.diagonal().sum() / k.nrows() as f64;
    let relative_jitter = if mean_diag > 0.0 {
        factor.jitter() / mean_diag
    } else {
        0.0
    };
    Ok(ClassCovariance {
        k,
        factor,
        weights,
        relative_jitter,
    })
}

/// Covariances for every row of an `m × q` log-weight matrix.
pub fn class_covariances(
    theta: &DMatrix<f64>,
    grams: &GramSet,
    policy: &JitterPolicy,
) -> Result<Vec<ClassCovariance>> {
    (0..theta.nrows())
        .map(|c| {
            let row: Vec<f64> = theta.row(c).iter().copied().collect();
            class_covariance(&row, grams, policy)
        })
        .collect()
}

/// `Σ_s C_s`, the same for every class.
pub fn unweighted_sum_covariance(grams: &GramSet, policy: &JitterPolicy) -> Result<ClassCovariance> {
    weighted_covariance(vec![1.0; grams.q()], grams, policy)
}

/// Inner products between test rows and training rows, one matrix per modality.
#[derive(Debug, Clone)]
pub struct CrossGram {
    /// `n_test × n_train` per modality.
    pub cross: Vec<DMatrix<f64>>,
    /// `‖x*‖²` per modality and test subject.
    pub self_norms: Vec<Vec<f64>>,
}

pub fn cross_gram(train: &[ModalityMatrix], test: &[ModalityMatrix]) -> Result<CrossGram> {
    if train.len() != test.len() {
        return Err(Error::Dimension(format!(
            "{} training modalities vs {} test modalities",
            train.len(),
            test.len()
        )));
    }
    let mut cross = Vec::with_capacity(train.len());
    let mut self_norms = Vec::with_capacity(train.len());
    for (tr, te) in train.iter().zip(test) {
        if tr.n_features() != te.n_features() {
            return Err(Error::Dimension(format!(
                "modality {}: {} training features vs {} test features",
                tr.id,
                tr.n_features(),
                te.n_features()
            )));
        }
        cross.push(&te.values * tr.values.transpose());
        self_norms.push(te.values.row_iter().map(|r| r.norm_squared()).collect());
    }
    Ok(CrossGram { cross, self_norms })
}

const CACHE_MAGIC: &[u8; 8] = b"MKGPGRAM";

/// Content hash of a set of normalized modalities.
pub fn content_key(modalities: &[ModalityMatrix]) -> String {
    let mut h = Sha256::new();
    for m in modalities {
        h.update((m.id.len() as u64).to_le_bytes());
        h.update(m.id.as_bytes());
        h.update((m.n_subjects() as u64).to_le_bytes());
        h.update((m.n_features() as u64).to_le_bytes());
        for v in m.values.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// On-disk store of Gram matrices keyed by the content hash of their inputs.
#[derive(Debug, Clone)]
pub struct GramCache {
    dir: PathBuf,
}

impl GramCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.gram"))
    }

    pub fn load_or_compute(&self, modalities: &[ModalityMatrix]) -> Result<GramSet> {
        let path = self.path_for(&content_key(modalities));
        if path.exists() {
            match read_grams(&path) {
                Ok(g) => return Ok(g),
                Err(e) => log::warn!("ignoring unreadable Gram cache {}: {e}", path.display()),
            }
        }
        let grams = GramSet::from_modalities(modalities);
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_grams(&path, &grams)?;
        Ok(grams)
    }
}

fn write_grams(path: &Path, grams: &GramSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(grams.q() as u64).to_le_bytes());
    buf.extend_from_slice(&(grams.n() as u64).to_le_bytes());
    for (id, c) in grams.ids.iter().zip(&grams.grams) {
        buf.extend_from_slice(&(id.len() as u64).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for v in c.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_grams(path: &Path) -> Result<GramSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "truncated or corrupt Gram cache".into(),
    };
    let mut pos = 0usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        let out = bytes.get(pos..pos + len).ok_or_else(bad)?;
        pos += len;
        Ok(out)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(bad());
    }
    let read_u64 = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
    let q = read_u64(take(8)?);
    let n = read_u64(take(8)?);
    let mut ids = Vec::with_capacity(q);
    let mut mats = Vec::with_capacity(q);
    for _ in 0..q {
        let len = read_u64(take(8)?);
        ids.push(String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?);
        let raw = take(n * n * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        mats.push(DMatrix::from_vec(n, n, vals));
    }
    GramSet::from_matrices(ids, mats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::SeedableRng;

    fn random_modality(n: usize, d: usize, seed: u64) -> ModalityMatrix {
        let mut r = rng::SimRng::seed_from_u64(seed);
        ModalityMatrix::new("x", DMatrix::from_fn(n, d, |_, _| rng::standard_normal(&mut r)))
            .unwrap()
    }

    fn eye_set(q: usize, n: usize) -> GramSet {
        GramSet::from_matrices(
            (0..q).map(|s| format!("m{s}")).collect(),
            vec![DMatrix::identity(n, n); q],
        )
        .unwrap()
    }

    #[test]
    fn gram_of_identity_is_identity() {
        let x = ModalityMatrix::new("a", DMatrix::identity(2, 2)).unwrap();
        assert_eq!(gram(&x), DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn gram_matches_row_dot_products() {
        let x = random_modality(4, 2, 1);
        let c = gram(&x);
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for k in 0..2 {
                    dot += x.values[(i, k)] * x.values[(j, k)];
                }
                assert!((c[(i, j)] - dot).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicate_rows_share_entries() {
        let mut x = random_modality(3, 4, 2);
        let row = x.values.row(0).clone_owned();
        x.values.set_row(2, &row);
        let c = gram(&x);
        assert!((c[(0, 0)] - c[(2, 2)]).abs() < 1e-14);
        assert!((c[(0, 0)] - c[(0, 2)]).abs() < 1e-14);
    }

    #[test]
    fn zero_log_weight_gives_the_gram() {
        let g = GramSet::from_modalities(&[random_modality(5, 3, 3)]);
        let cov = class_covariance(&[0.0], &g, &JitterPolicy::default()).unwrap();
        assert_eq!(cov.k, *g.get(0));
    }

    #[test]
    fn identity_grams_add_weights() {
        let g = eye_set(2, 3);
        let cov =
            class_covariance(&[2f64.ln(), 3f64.ln()], &g, &JitterPolicy::default()).unwrap();
        assert!((cov.k.clone() - DMatrix::<f64>::identity(3, 3) * 5.0).amax() < 1e-14);
    }

    #[test]
    fn weighted_covariance_is_psd() {
        let mods: Vec<_> = (0..3).map(|s| random_modality(6, 2, 10 + s)).collect();
        let g = GramSet::from_modalities(&mods);
        let cov = class_covariance(&[0.3, -1.2, 0.8], &g, &JitterPolicy::default()).unwrap();
        let min_eig = cov.k.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= -1e-8 * cov.k.diagonal().max());
    }

    #[test]
    fn unweighted_sum_matches_direct_sum() {
        let mods: Vec<_> = (0..3).map(|s| random_modality(5, 4, 20 + s)).collect();
        let g = GramSet::from_modalities(&mods);
        let policy = JitterPolicy::default();
        let sum = unweighted_sum_covariance(&g, &policy).unwrap();
        let zero = class_covariance(&[0.0; 3], &g, &policy).unwrap();
        assert_eq!(sum.k, zero.k);
        let mut direct = DMatrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                direct[(i, j)] = (0..3).map(|s| g.get(s)[(i, j)]).sum::<f64>();
            }
        }
        assert!((sum.k.clone() - direct).amax() < 1e-14);

        let same = GramSet::from_modalities(&[mods[0].clone(), mods[0].clone(), mods[0].clone()]);
        let tripled = unweighted_sum_covariance(&same, &policy).unwrap();
        assert!((tripled.k - same.get(0) * 3.0).amax() < 1e-14);
    }

    #[test]
    fn covariance_derivative_is_weighted_gram() {
        let mods: Vec<_> = (0..2).map(|s| random_modality(4, 3, 30 + s)).collect();
        let g = GramSet::from_modalities(&mods);
        let policy = JitterPolicy::default();
        let theta = [0.4, -0.7];
        for s in 0..2 {
            let h = 1e-5;
            let mut up = theta;
            let mut down = theta;
            up[s] += h;
            down[s] -= h;
            let fd = (class_covariance(&up, &g, &policy).unwrap().k
                - class_covariance(&down, &g, &policy).unwrap().k)
                / (2.0 * h);
            let exact = g.get(s) * theta[s].exp();
            assert!((fd - &exact).amax() <= 1e-6 * exact.amax());
        }
    }

    #[test]
    fn cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mods = vec![random_modality(4, 3, 40), random_modality(4, 2, 41)];
        let cache = GramCache::new(dir.path());
        let first = cache.load_or_compute(&mods).unwrap();
        let second = cache.load_or_compute(&mods).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
