//! Multi-source tabular data: ingestion, normalization, synthetic cohorts and
//! stratified folds.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GramSet;
use crate::linalg::JitterPolicy;
use crate::model::{softmax_probs, HyperState, PriorConfig};
use crate::rng;

/// One data source: `n` subjects by `d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMatrix {
    pub id: String,
    pub values: DMatrix<f64>,
}

impl ModalityMatrix {
    pub fn new(id: impl Into<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "modality needs at least one feature".into(),
            ));
        }
        if values.nrows() == 0 {
            return Err(Error::TooFewSubjects { need: 1, got: 0 });
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            let n = values.nrows();
            return Err(Error::NonFinite {
                row: idx % n,
                col: idx / n,
            });
        }
        Ok(Self {
            id: id.into(),
            values,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> ModalityMatrix {
        ModalityMatrix {
            id: self.id.clone(),
            values: self.values.select_rows(rows.iter()),
        }
    }
}

/// Class membership in 1-of-m coding, stored as per-subject class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    classes: Vec<String>,
    index: Vec<usize>,
}

impl LabelSet {
    pub fn new(classes: Vec<String>, index: Vec<usize>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= classes.len()) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {} classes",
                classes.len()
            )));
        }
        let labels = Self { classes, index };
        for (c, &count) in labels.counts().iter().enumerate() {
            if count == 0 {
                log::warn!("class {:?} has no members", labels.classes[c]);
            }
        }
        Ok(labels)
    }

    /// Labels with generated class names `c0`, `c1`, ...
    pub fn from_indices(index: Vec<usize>, m: usize) -> Result<Self> {
        Self::new((0..m).map(|c| format!("c{c}")).collect(), index)
    }

    pub fn n_subjects(&self) -> usize {
        self.index.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn indices(&self) -> &[usize] {
        &self.index
    }

    pub fn class_of(&self, subject: usize) -> usize {
        self.index[subject]
    }

    pub fn onehot(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.n_subjects(), self.n_classes());
        for (i, &c) in self.index.iter().enumerate() {
            y[(i, c)] = 1.0;
        }
        y
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &c in &self.index {
            counts[c] += 1;
        }
        counts
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.n_subjects().max(1) as f64;
        self.counts().iter().map(|&c| c as f64 / n).collect()
    }

    pub fn select(&self, rows: &[usize]) -> LabelSet {
        LabelSet {
            classes: self.classes.clone(),
            index: rows.iter().map(|&r| self.index[r]).collect(),
        }
    }

    pub fn with_indices(&self, index: Vec<usize>) -> Result<LabelSet> {
        LabelSet::new(self.classes.clone(), index)
    }
}

/// Per-subject fold index in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }
}

/// Whether column statistics come from the training rows only or from all rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeScope {
    #[default]
    Train,
    All,
}

/// Column statistics computed after row normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    /// Zero marks a constant column, which maps to all zeros.
    pub sds: Vec<f64>,
}

fn row_normalized(x: &ModalityMatrix) -> Result<DMatrix<f64>> {
    let mut out = x.values.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            if !out[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
        let norm = out.row(i).norm();
        if norm == 0.0 {
            return Err(Error::ZeroNormRow(i));
        }
        out.row_mut(i).scale_mut(1.0 / norm);
    }
    Ok(out)
}

impl Normalizer {
    /// Fits column statistics on `x` (row-normalized first).
    pub fn fit(x: &ModalityMatrix) -> Result<Self> {
        let n = x.n_subjects();
        if n < 2 {
            return Err(Error::TooFewSubjects { need: 2, got: n });
        }
        let rows = row_normalized(x)?;
        let mut means = Vec::with_capacity(rows.ncols());
        let mut sds = Vec::with_capacity(rows.ncols());
        for col in rows.column_iter() {
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let floor = 1e-12 * mean.abs().max(1.0);
            means.push(mean);
            sds.push(if var.sqrt() <= floor { 0.0 } else { var.sqrt() });
        }
        Ok(Self { means, sds })
    }

    pub fn apply(&self, x: &ModalityMatrix) -> Result<ModalityMatrix> {
        if x.n_features() != self.means.len() {
            return Err(Error::Dimension(format!(
                "modality {} has {} features, normalizer expects {}",
                x.id,
                x.n_features(),
                self.means.len()
            )));
        }
        let mut rows = row_normalized(x)?;
        for (j, mut col) in rows.column_iter_mut().enumerate() {
            let (mean, sd) = (self.means[j], self.sds[j]);
            for v in col.iter_mut() {
                *v = if sd == 0.0 { 0.0 } else { (*v - mean) / sd };
            }
        }
        ModalityMatrix::new(x.id.clone(), rows)
    }
}

/// Unit-norm rows, then zero-mean unit-variance columns.
pub fn normalize_features(x: &ModalityMatrix) -> Result<ModalityMatrix> {
    Normalizer::fit(x)?.apply(x)
}

/// Normalizes each modality of a train/test split according to `scope`.
pub fn normalize_split(
    train: &[ModalityMatrix],
    test: &[ModalityMatrix],
    scope: NormalizeScope,
) -> Result<(Vec<ModalityMatrix>, Vec<ModalityMatrix>)> {
    let mut out_train = Vec::with_capacity(train.len());
    let mut out_test = Vec::with_capacity(test.len());
    for (tr, te) in train.iter().zip(test) {
        let normalizer = match scope {
            NormalizeScope::Train => Normalizer::fit(tr)?,
            NormalizeScope::All => {
                let stacked = ModalityMatrix::new(
                    tr.id.clone(),
                    DMatrix::from_fn(tr.n_subjects() + te.n_subjects(), tr.n_features(), |i, j| {
                        if i < tr.n_subjects() {
                            tr.values[(i, j)]
                        } else {
                            te.values[(i - tr.n_subjects(), j)]
                        }
                    }),
                )?;
                Normalizer::fit(&stacked)?
            }
        };
        out_train.push(normalizer.apply(tr)?);
        out_test.push(normalizer.apply(te)?);
    }
    Ok((out_train, out_test))
}

/// Stratified assignment of subjects to `k` folds.
///
/// Each class's members are shuffled and dealt round-robin, continuing the
/// deal across classes, so per-fold class counts are `floor` or `ceil` of
/// `count / k` and fold sizes differ by at most one.
pub fn make_folds(labels: &LabelSet, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::BadK(k));
    }
    let mut rng = rng::stream(seed, "folds", 0);
    let counts = labels.counts();
    for (c, &count) in counts.iter().enumerate() {
        if count < k {
            log::warn!(
                "class {:?} has {count} members for {k} folds; some folds will lack it",
                labels.classes()[c]
            );
        }
    }
    let mut fold_ids: Vec<usize> = (0..k).collect();
    fold_ids.shuffle(&mut rng);
    let mut fold_of = vec![0; labels.n_subjects()];
    let mut position = 0usize;
    for c in 0..labels.n_classes() {
        let mut members: Vec<usize> = (0..labels.n_subjects())
            .filter(|&i| labels.class_of(i) == c)
            .collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = fold_ids[position % k];
            position += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Row-aligned modalities and labels for one cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subject_ids: Vec<String>,
    pub modalities: Vec<ModalityMatrix>,
    pub labels: Option<LabelSet>,
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn labels(&self) -> Result<&LabelSet> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            subject_ids: rows.iter().map(|&r| self.subject_ids[r].clone()).collect(),
            modalities: self.modalities.iter().map(|m| m.select_rows(rows)).collect(),
            labels: self.labels.as_ref().map(|l| l.select(rows)),
        }
    }

    /// Keeps only the named modalities, in the given order.
    pub fn select_sources(&self, ids: &[String]) -> Result<Dataset> {
        let mut modalities = Vec::with_capacity(ids.len());
        for id in ids {
            let m = self
                .modalities
                .iter()
                .find(|m| &m.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {id:?}")))?;
            modalities.push(m.clone());
        }
        Ok(Dataset {
            subject_ids: self.subject_ids.clone(),
            modalities,
            labels: self.labels.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
}

/// Dataset description: modality files plus an optional label file.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// Declared class order; when absent, classes are numbered by first appearance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub modalities: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        ids.push(record[0].to_owned());
        rows.push(record.iter().skip(1).map(str::to_owned).collect());
    }
    Ok((header, ids, rows))
}

fn read_modality(id: &str, path: &Path) -> Result<(Vec<String>, ModalityMatrix)> {
    let (header, ids, rows) = read_table(path)?;
    if header.len() < 2 {
        return Err(parse_err(path, 1, "expected subject id plus at least one feature"));
    }
    let d = header.len() - 1;
    let mut values = DMatrix::zeros(rows.len(), d);
    for (i, row) in rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            values[(i, j)] = cell
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(path, i + 2, format!("column {}: {e}", j + 2)))?;
        }
    }
    Ok((ids, ModalityMatrix::new(id, values)?))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every modality named in the manifest, aligned to the label file's
/// subject order (or the first modality's order when there is no label file).
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.modalities.is_empty() {
        return Err(Error::InvalidArgument("manifest lists no modalities".into()));
    }

    let mut subject_ids: Option<Vec<String>> = None;
    let mut labels = None;
    if let Some(label_rel) = &manifest.labels {
        let path = resolve(base, label_rel);
        let (_, ids, rows) = read_table(&path)?;
        let mut classes: Vec<String> = manifest.classes.clone().unwrap_or_default();
        let fixed = manifest.classes.is_some();
        let mut index = Vec::with_capacity(rows.len());
        for (k, row) in rows.iter().enumerate() {
            let name = row
                .first()
                .ok_or_else(|| parse_err(&path, k + 2, "missing label column"))?
                .trim()
                .to_owned();
            let c = match classes.iter().position(|c| *c == name) {
                Some(c) => c,
                None if fixed => {
                    return Err(Error::UnknownLabel {
                        label: name,
                        line: k + 2,
                    })
                }
                None => {
                    classes.push(name);
                    classes.len() - 1
                }
            };
            index.push(c);
        }
        labels = Some(LabelSet::new(classes, index)?);
        subject_ids = Some(ids);
    }

    let mut modalities = Vec::with_capacity(manifest.modalities.len());
    for entry in &manifest.modalities {
        let path = resolve(base, &entry.path);
        let (ids, matrix) = read_modality(&entry.id, &path)?;
        let order = match &subject_ids {
            None => {
                subject_ids = Some(ids.clone());
                (0..ids.len()).collect::<Vec<_>>()
            }
            Some(reference) => {
                if reference.len() != ids.len() {
                    return Err(Error::RowMismatch(format!(
                        "modality {} has {} rows, expected {}",
                        entry.id,
                        ids.len(),
                        reference.len()
                    )));
                }
                let lookup: HashMap<&str, usize> =
                    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
                reference
                    .iter()
                    .map(|s| {
                        lookup.get(s.as_str()).copied().ok_or_else(|| {
                            Error::RowMismatch(format!(
                                "subject {s:?} missing from modality {}",
                                entry.id
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        modalities.push(matrix.select_rows(&order));
    }

    Ok(Dataset {
        subject_ids: subject_ids.unwrap_or_default(),
        modalities,
        labels,
    })
}

/// Writes one CSV per modality, a label CSV and `manifest.toml` into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for m in &dataset.modalities {
        let file = format!("{}.csv", m.id);
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["subject_id".to_owned()];
        header.extend((0..m.n_features()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (i, sid) in dataset.subject_ids.iter().enumerate() {
            let mut rec = vec![sid.clone()];
            rec.extend(m.values.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: m.id.clone(),
            path: file,
        });
    }
    let mut manifest = Manifest {
        labels: None,
        classes: None,
        modalities: entries,
    };
    if let Some(labels) = &dataset.labels {
        let path = dir.join("labels.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["subject_id", "label"])?;
        for (i, sid) in dataset.subject_ids.iter().enumerate() {
            w.write_record([sid.as_str(), labels.classes()[labels.class_of(i)].as_str()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.labels = Some("labels.csv".into());
        manifest.classes = Some(labels.classes().to_vec());
    }
    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("cannot serialize manifest: {e}")))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Prior-predictive simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    /// Features per modality.
    pub d: usize,
    pub seed: u64,
    #[serde(default)]
    pub prior: PriorConfig,
    /// Weight of a factor shared by all modalities, in `[0, 1]`.
    #[serde(default = "default_shared")]
    pub shared_factor: f64,
}

fn default_shared() -> f64 {
    0.5
}

impl SyntheticSpec {
    pub fn new(n: usize, m: usize, q: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            m,
            q,
            d,
            seed,
            prior: PriorConfig::default(),
            shared_factor: default_shared(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::TooFewSubjects {
                need: 2,
                got: self.n,
            });
        }
        if self.m < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.m
            )));
        }
        if self.q < 1 || self.d < 1 {
            return Err(Error::InvalidArgument(
                "need at least one modality and one feature".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_factor) {
            return Err(Error::InvalidArgument(
                "shared_factor must lie in [0, 1]".into(),
            ));
        }
        self.prior.validate()
    }
}

/// A simulated cohort with its generating parameters.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub hyper: HyperState,
    /// Latent values, class blocks concatenated.
    pub f: DVector<f64>,
}

/// Draws one label per subject from the softmax of its latent values.
pub fn draw_labels<R: Rng + ?Sized>(f: &DVector<f64>, m: usize, rng: &mut R) -> Vec<usize> {
    let probs = softmax_probs(f, m);
    (0..probs.nrows())
        .map(|i| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for c in 0..m {
                acc += probs[(i, c)];
                if u < acc {
                    return c;
                }
            }
            m - 1
        })
        .collect()
}

/// Simulates features, weights, latent functions and labels from the model.
///
/// Raw features mix a factor shared across modalities with modality-specific
/// noise; the Gram matrices used to draw the latent functions are built from
/// the normalized features, as a fit on the whole cohort would see them.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "synthetic", 0);
    let shared = DMatrix::from_fn(spec.n, spec.d, |_, _| rng::standard_normal(&mut rng));
    let (ws, wn) = (spec.shared_factor.sqrt(), (1.0 - spec.shared_factor).sqrt());
    let mut modalities = Vec::with_capacity(spec.q);
    for s in 0..spec.q {
        let noise = DMatrix::from_fn(spec.n, spec.d, |_, _| rng::standard_normal(&mut rng));
        modalities.push(ModalityMatrix::new(
            format!("m{s}"),
            &shared * ws + noise * wn,
        )?);
    }
    let normalized = modalities
        .iter()
        .map(normalize_features)
        .collect::<Result<Vec<_>>>()?;
    let grams = GramSet::from_modalities(&normalized);

    let hyper = spec.prior.sample(spec.m, spec.q, &mut rng);
    let covs = crate::kernels::class_covariances(&hyper.theta, &grams, &JitterPolicy::default())?;
    let mut f = DVector::zeros(spec.m * spec.n);
    for (c, cov) in covs.iter().enumerate() {
        let z = rng::standard_normal_vec(&mut rng, spec.n);
        f.rows_mut(c * spec.n, spec.n).copy_from(&cov.factor.mul_lower(&z));
    }
    let index = draw_labels(&f, spec.m, &mut rng);
    let labels = LabelSet::from_indices(index, spec.m)?;
    let width = format!("{}", spec.n - 1).len();
    let subject_ids = (0..spec.n).map(|i| format!("s{i:0width$}")).collect();
    Ok(SyntheticDataset {
        dataset: Dataset {
            subject_ids,
            modalities,
            labels: Some(labels),
        },
        hyper,
        f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::SimRng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng::standard_normal(&mut rng) + 0.3)
    }

    #[test]
    fn single_row_cannot_be_standardized() {
        let x = ModalityMatrix::new("a", DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(
            normalize_features(&x),
            Err(Error::TooFewSubjects { need: 2, got: 1 })
        ));
    }

    #[test]
    fn identical_rows_give_zero_columns() {
        let x = ModalityMatrix::new("a", DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 3.0, 4.0]))
            .unwrap();
        let rows = row_normalized(&x).unwrap();
        assert!((rows[(0, 0)] - 0.6).abs() < 1e-15 && (rows[(1, 1)] - 0.8).abs() < 1e-15);
        let out = normalize_features(&x).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_columns_have_unit_moments() {
        let x = ModalityMatrix::new("a", random_matrix(6, 3, 5)).unwrap();
        let out = normalize_features(&x).unwrap();
        for col in out.values.column_iter() {
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_and_nonfinite_are_rejected() {
        let x = ModalityMatrix::new("a", DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 2.0]))
            .unwrap();
        assert!(matches!(normalize_features(&x), Err(Error::ZeroNormRow(0))));
        let bad = ModalityMatrix::new("a", DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 1.0, 2.0]));
        assert!(matches!(bad, Err(Error::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn row_stage_is_idempotent_on_unit_rows() {
        let x = ModalityMatrix::new("a", random_matrix(5, 4, 2)).unwrap();
        let once = row_normalized(&x).unwrap();
        let twice = row_normalized(&ModalityMatrix::new("a", once.clone()).unwrap()).unwrap();
        assert!((once - twice).amax() < 1e-10);
    }

    #[test]
    fn balanced_eight_subjects_one_per_class_per_fold() {
        let labels = LabelSet::from_indices(vec![0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let folds = make_folds(&labels, 4, 9).unwrap();
        for k in 0..4 {
            let rows = folds.test_rows(k);
            assert_eq!(rows.len(), 2);
            let classes: Vec<usize> = rows.iter().map(|&r| labels.class_of(r)).collect();
            assert!(classes.contains(&0) && classes.contains(&1));
        }
    }

    #[test]
    fn cohort_shaped_folds_are_stratified() {
        let mut index = Vec::new();
        for (c, &count) in [18usize, 16, 14, 14].iter().enumerate() {
            index.extend(std::iter::repeat_n(c, count));
        }
        let labels = LabelSet::from_indices(index, 4).unwrap();
        let folds = make_folds(&labels, 4, 3).unwrap();
        let counts = labels.counts();
        for k in 0..4 {
            let rows = folds.test_rows(k);
            assert!(rows.len() == 15 || rows.len() == 16, "fold size {}", rows.len());
            let fold_labels = labels.select(&rows);
            for (c, &fc) in fold_labels.counts().iter().enumerate() {
                let expected = counts[c] as f64 / 4.0;
                assert!((fc as f64 - expected).abs() <= 1.0);
            }
        }
        assert_eq!(folds, make_folds(&labels, 4, 3).unwrap());
        assert!(matches!(make_folds(&labels, 1, 3), Err(Error::BadK(1))));
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec::new(12, 3, 2, 4, 17);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.f, b.f);
        assert_eq!(a.hyper, b.hyper);
    }

    #[test]
    fn synthetic_rejects_single_class() {
        let spec = SyntheticSpec::new(12, 1, 2, 4, 17);
        assert!(generate_synthetic(&spec).is_err());
    }
}
