//! Vector classification datasets: synthetic generators, CSV ingestion,
//! stratified splits and train-split normalization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-feature statistics of the train split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero train spread, left unscaled.
    pub degenerate: Vec<usize>,
}

/// Rows of one split, borrowed from a dataset.
#[derive(Debug, Clone)]
pub struct Samples<'a> {
    pub xs: Vec<&'a [f64]>,
    pub labels: Vec<usize>,
}

impl Samples<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    feature_names: Vec<String>,
    features: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    n_classes: usize,
    norm: Option<NormStats>,
}

impl VectorDataset {
    /// All rows start in the train split.
    pub fn new(feature_names: Vec<String>, rows: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 {
            return Err(Error::Config("dataset needs at least one feature".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::LengthMismatch(format!("{} rows, {} labels", rows.len(), labels.len())));
        }
        let mut features = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::ShapeMismatch(format!("row {i} has {} features, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("row {i} has a non-finite feature")));
            }
            features.extend_from_slice(row);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidLabel { label, n_classes });
        }
        Ok(Self {
            feature_names,
            features,
            splits: vec![Split::Train; labels.len()],
            labels,
            n_classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d_x();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn samples(&self, split: Split) -> Samples<'_> {
        let idx = self.indices(split);
        Samples {
            xs: idx.iter().map(|&i| self.row(i)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Like [`samples`](Self::samples) but fails on an empty split.
    pub fn nonempty_samples(&self, split: Split) -> Result<Samples<'_>> {
        let s = self.samples(split);
        if s.is_empty() {
            return Err(Error::EmptySplit(split.name()));
        }
        Ok(s)
    }

    /// Writes features and labels (no split column) with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header = self.feature_names.clone();
        header.push("label".into());
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    Ok(())
}

fn check_noise(noise_std: f64) -> Result<Normal<f64>> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
    }
    Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Two interleaved planar spirals of one and a half turns. Class 0 follows
/// `s (cos 3 pi s, sin 3 pi s)` for `s` uniform on `[0.1, 1]`, class 1 is its
/// point reflection; every coordinate gets `N(0, noise_std^2)` noise.
pub fn gen_two_spirals(n_per_class: usize, noise_std: f64, seed: u64) -> Result<VectorDataset> {
    check_count(n_per_class)?;
    let noise = check_noise(noise_std)?;
    let mut rng = stream(seed, 0);
    let mut rows = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        let s = 0.1 + 0.9 * rng.random::<f64>();
        let angle = 3.0 * std::f64::consts::PI * s;
        let (x, y) = (s * angle.cos(), s * angle.sin());
        for (label, sign) in [(0, 1.0), (1, -1.0)] {
            rows.push(vec![sign * x + noise.sample(&mut rng), sign * y + noise.sample(&mut rng)]);
            labels.push(label);
        }
    }
    VectorDataset::new(names(2), rows, labels, 2)
}

/// Cluster centres with pairwise (or, on the circle layout, adjacent)
/// distance `separation * noise_std`.
fn blob_centres(k: usize, d_x: usize, dist: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut v = vec![0.0; d_x];
            if k <= d_x {
                v[c] = dist / std::f64::consts::SQRT_2;
            } else if d_x >= 2 {
                let radius = dist / (2.0 * (std::f64::consts::PI / k as f64).sin());
                let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                v[0] = radius * a.cos();
                v[1] = radius * a.sin();
            } else {
                v[0] = dist * c as f64;
            }
            v
        })
        .collect()
}

/// `k` spherical Gaussian clusters with standard deviation `noise_std`.
/// For `k = 2` the Bayes-optimal accuracy is `Phi(separation / 2)`.
pub fn gen_gaussian_blobs(
    k: usize,
    d_x: usize,
    separation: f64,
    noise_std: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<VectorDataset> {
    check_count(n_per_class)?;
    if k < 2 || d_x == 0 {
        return Err(Error::Config("blobs need k >= 2 and d_x >= 1".into()));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Config(format!("separation must be >= 0, got {separation}")));
    }
    let noise = check_noise(noise_std)?;
    let centres = blob_centres(k, d_x, separation * noise_std);
    let mut rng = stream(seed, 0);
    let mut rows = Vec::with_capacity(k * n_per_class);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for _ in 0..n_per_class {
        for (label, c) in centres.iter().enumerate() {
            rows.push(c.iter().map(|&m| m + noise.sample(&mut rng)).collect());
            labels.push(label);
        }
    }
    VectorDataset::new(names(d_x), rows, labels, k)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Bayes-optimal accuracy of two equal-weight spherical blobs.
pub fn two_blob_bayes_accuracy(separation: f64) -> f64 {
    normal_cdf(separation / 2.0)
}

/// Reads a header row of feature names plus a `label` column.
pub fn load_csv(path: &Path) -> Result<VectorDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_io)?;
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::MissingColumn("label".into()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        let mut row = Vec::with_capacity(feature_names.len());
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                labels.push(
                    field
                        .parse::<usize>()
                        .map_err(|_| parse_err(format!("label {field:?} is not a nonnegative integer")))?,
                );
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(format!("feature {field:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("feature {field:?} is not finite")));
                }
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_classes = (labels.iter().copied().max().unwrap_or(0) + 1).max(2);
    VectorDataset::new(feature_names, rows, labels, n_classes)
}

/// Stratified train/val/test assignment. Within each label the rows are
/// shuffled, `floor(f_val * n)` go to val, `floor(f_test * n)` to test and the
/// remainder to train.
pub fn split(dataset: &VectorDataset, fractions: [f64; 3], seed: u64) -> Result<VectorDataset> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut out = dataset.clone();
    let mut rng = stream(seed, 1);
    for class in 0..dataset.n_classes {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_val = (fractions[1] * n).floor() as usize;
        let n_test = (fractions[2] * n).floor() as usize;
        for (k, &i) in idx.iter().enumerate() {
            out.splits[i] = if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    out.norm = None;
    Ok(out)
}

/// Standardizes every feature with the train split's mean and population
/// standard deviation. Features with zero train spread are left unchanged.
pub fn normalize(dataset: &VectorDataset) -> Result<VectorDataset> {
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let d = dataset.d_x();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        mean.iter_mut().zip(dataset.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in &train {
        for (j, v) in dataset.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let mut std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let mut degenerate = Vec::new();
    for j in 0..d {
        if std[j] <= 1e-12 * mean[j].abs().max(1.0) {
            log::warn!("feature {} is constant on the train split; left unscaled", dataset.feature_names[j]);
            degenerate.push(j);
            mean[j] = 0.0;
            std[j] = 1.0;
        }
    }
    let mut out = dataset.clone();
    for row in out.features.chunks_exact_mut(d) {
        for j in 0..d {
            if !degenerate.contains(&j) {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
    }
    out.norm = Some(NormStats { mean, std, degenerate });
    Ok(out)
}

/// The usual 70/15/15 split followed by normalization.
pub fn prepare(dataset: &VectorDataset, seed: u64) -> Result<VectorDataset> {
    normalize(&split(dataset, [0.7, 0.15, 0.15], seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_two_spirals(50, 0.1, 3).unwrap(), gen_two_spirals(50, 0.1, 3).unwrap());
        assert_ne!(gen_two_spirals(50, 0.1, 3).unwrap(), gen_two_spirals(50, 0.1, 4).unwrap());
        assert_eq!(
            gen_gaussian_blobs(3, 4, 2.0, 1.0, 20, 1).unwrap(),
            gen_gaussian_blobs(3, 4, 2.0, 1.0, 20, 1).unwrap()
        );
    }

    #[test]
    fn generator_errors() {
        assert!(matches!(gen_two_spirals(0, 0.1, 0), Err(Error::Config(_))));
        assert!(matches!(gen_two_spirals(5, -1.0, 0), Err(Error::Config(_))));
        assert!(matches!(gen_gaussian_blobs(1, 2, 1.0, 1.0, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn spirals_shape_and_symmetry() {
        let ds = gen_two_spirals(100, 0.0, 0).unwrap();
        assert_eq!((ds.len(), ds.d_x(), ds.n_classes()), (200, 2, 2));
        for i in (0..200).step_by(2) {
            assert_eq!(ds.row(i)[0], -ds.row(i + 1)[0]);
            assert_eq!((ds.label(i), ds.label(i + 1)), (0, 1));
            let r = ds.row(i)[0].hypot(ds.row(i)[1]);
            assert!((0.1 - 1e-12..=1.0).contains(&r));
        }
    }

    #[test]
    fn blob_centres_have_requested_spacing() {
        for (k, d) in [(2, 2), (3, 5), (5, 2), (3, 1)] {
            let c = blob_centres(k, d, 3.0);
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!((dist(&c[0], &c[1]) - 3.0).abs() < 1e-12, "k={k} d={d}");
        }
    }

    #[test]
    fn bayes_accuracy_matches_simulation() {
        assert!((two_blob_bayes_accuracy(4.0) - 0.977_249_868).abs() < 1e-8);
        assert_eq!(two_blob_bayes_accuracy(0.0), 0.5);
        // the Bayes rule for equal spherical blobs is the nearer centre
        let ds = gen_gaussian_blobs(2, 2, 2.0, 0.5, 50_000, 9).unwrap();
        let c = blob_centres(2, 2, 1.0);
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.row(i);
                let d0: f64 = x.iter().zip(&c[0]).map(|(a, b)| (a - b).powi(2)).sum();
                let d1: f64 = x.iter().zip(&c[1]).map(|(a, b)| (a - b).powi(2)).sum();
                (if d0 <= d1 { 0 } else { 1 }) == ds.label(i)
            })
            .count();
        let acc = correct as f64 / ds.len() as f64;
        let p = two_blob_bayes_accuracy(2.0);
        let se = (p * (1.0 - p) / ds.len() as f64).sqrt();
        assert!((acc - p).abs() < 4.0 * se, "{acc} vs {p}");
    }

    #[test]
    fn stratified_split_counts() {
        let ds = gen_gaussian_blobs(2, 2, 1.0, 1.0, 50, 0).unwrap();
        let s = split(&ds, [0.7, 0.15, 0.15], 5).unwrap();
        for class in 0..2 {
            let count = |sp| (0..s.len()).filter(|&i| s.label(i) == class && s.split_of(i) == sp).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (36, 7, 7));
        }
        assert_eq!(s, split(&ds, [0.7, 0.15, 0.15], 5).unwrap());
        assert!(split(&ds, [0.7, 0.2, 0.2], 5).is_err());
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let ds = split(&gen_gaussian_blobs(2, 3, 2.0, 1.5, 100, 2).unwrap(), [0.7, 0.15, 0.15], 0).unwrap();
        let n = normalize(&ds).unwrap();
        let train = n.samples(Split::Train);
        for j in 0..3 {
            let vals: Vec<f64> = train.xs.iter().map(|x| x[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
        // changing a test row leaves the statistics alone
        let mut altered = ds.clone();
        let t = altered.indices(Split::Test)[0];
        altered.features[t * 3] += 100.0;
        assert_eq!(normalize(&altered).unwrap().norm_stats(), n.norm_stats());
    }

    #[test]
    fn constant_feature_passes_through() {
        let rows = (0..10).map(|i| vec![i as f64, 4.0]).collect();
        let ds = VectorDataset::new(names(2), rows, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let n = normalize(&ds).unwrap();
        assert_eq!(n.norm_stats().unwrap().degenerate, vec![1]);
        assert!((0..10).all(|i| n.row(i)[1] == 4.0));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_gaussian_blobs(3, 2, 2.0, 1.0, 4, 0).unwrap();
        ds.write_csv(&path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), ds);

        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a,b\n1,2").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::MissingColumn(_))));

        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a,label\n1.0,0\n2.0,1\nthree,0").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a,label\n1.0,-1").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_split_is_reported() {
        let ds = gen_two_spirals(3, 0.0, 0).unwrap();
        assert!(matches!(ds.nonempty_samples(Split::Val), Err(Error::EmptySplit("val"))));
    }
}
