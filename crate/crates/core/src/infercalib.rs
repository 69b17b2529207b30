//! Monte-Carlo inference over indicator paths and calibration metrics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::netcore::{softmax, DenseMat};
use crate::stream::{derive_seed, stream};

pub const DEFAULT_N_MC: usize = 5;
pub const N_BINS: usize = 10;

/// Sample mean and unbiased sample covariance of terminal latents.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    covariance: Option<DenseMat>,
    pub n_mc: usize,
}

impl PredictiveDistribution {
    /// Moments of `samples`, summed in the given order.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        let d = samples.first().ok_or(Error::EmptyInput)?.len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::ShapeMismatch("latent samples differ in length".into()));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let covariance = (n >= 2).then(|| {
            let mut c = DenseMat::zeros(d, d);
            for s in samples {
                let dev: Vec<f64> = s.iter().zip(&mean).map(|(v, m)| v - m).collect();
                for i in 0..d {
                    for j in i..d {
                        c.set(i, j, c.get(i, j) + dev[i] * dev[j]);
                    }
                }
            }
            for i in 0..d {
                for j in i..d {
                    let v = c.get(i, j) / (n - 1) as f64;
                    c.set(i, j, v);
                    c.set(j, i, v);
                }
            }
            c
        });
        Ok(Self { mean, covariance, n_mc: n })
    }

    pub fn covariance(&self) -> Result<&DenseMat> {
        self.covariance.as_ref().ok_or(Error::InsufficientSamples(self.n_mc))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub distribution: PredictiveDistribution,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Draws `n_mc` indicator paths (replicate `j` uses `stream(seed, j)`),
/// averages the terminal latents and classifies the mean once.
pub fn mc_predict(model: &Model, params: &ModelParams, x: &[f64], n_mc: usize, seed: u64) -> Result<McPrediction> {
    if !model.is_continuum() {
        return Err(Error::WrongMode("Monte-Carlo inference needs a continuum model"));
    }
    if n_mc == 0 {
        return Err(Error::InsufficientSamples(0));
    }
    let latents = (0..n_mc)
        .into_par_iter()
        .map(|j| {
            let draw = model.draw(&mut stream(seed, j as u64))?;
            model.terminal_latent(params, x, &draw)
        })
        .collect::<Result<Vec<_>>>()?;
    let distribution = PredictiveDistribution::from_samples(&latents)?;
    let logits = model.classify(params, &distribution.mean)?;
    let probs = softmax(&logits);
    Ok(McPrediction {
        distribution,
        logits,
        probs,
    })
}

/// Logits for every sample: Monte-Carlo for continuum models (sample `i`
/// seeded by `derive_seed(seed, i)`), deterministic evaluation otherwise.
pub fn predict_logits(
    model: &Model,
    params: &ModelParams,
    samples: &Samples<'_>,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    samples
        .xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            if model.is_continuum() {
                Ok(mc_predict(model, params, x, n_mc, derive_seed(seed, i as u64))?.logits)
            } else {
                model.forward_eval(params, x)
            }
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    /// Mean confidence of the bin's predictions (0 when empty).
    pub conf: f64,
    /// Fraction correct (0 when empty).
    pub acc: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Bins predictions by maximum probability into ten equal-width bins;
/// confidence `c` lands in bin `min(floor(10 c), 9)`.
pub fn reliability_bins(probs: &[Vec<f64>], labels: &[usize]) -> Result<ReliabilityBins> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut conf_sum = [0.0; N_BINS];
    let mut correct = [0usize; N_BINS];
    let mut count = [0usize; N_BINS];
    for (p, &label) in probs.iter().zip(labels) {
        let pred = argmax(p);
        let c = p[pred];
        let b = ((c * N_BINS as f64).floor() as usize).min(N_BINS - 1);
        conf_sum[b] += c;
        count[b] += 1;
        correct[b] += (pred == label) as usize;
    }
    let bins = (0..N_BINS)
        .map(|b| {
            let n = count[b].max(1) as f64;
            Bin {
                low: b as f64 / N_BINS as f64,
                high: (b + 1) as f64 / N_BINS as f64,
                conf: conf_sum[b] / n,
                acc: correct[b] as f64 / n,
                count: count[b],
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EceReport {
    pub ece: f64,
    /// `|acc - conf|` per bin.
    pub gaps: Vec<f64>,
    pub total: usize,
}

/// Count-weighted mean of `|acc - conf|`.
pub fn ece(bins: &ReliabilityBins) -> Result<EceReport> {
    let total = bins.total();
    if total == 0 {
        return Err(Error::ZeroCount);
    }
    let gaps: Vec<f64> = bins.bins.iter().map(|b| (b.acc - b.conf).abs()).collect();
    let ece = bins
        .bins
        .iter()
        .zip(&gaps)
        .map(|(b, g)| b.count as f64 / total as f64 * g)
        .sum();
    Ok(EceReport { ece, gaps, total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_mc: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Accuracy for each seed, in seed order.
    pub accuracies: Vec<f64>,
}

pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    correct as f64 / labels.len() as f64
}

/// Sample mean and `n - 1` standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Median (mean of the middle pair for even lengths); NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Accuracy on `samples` for every `n_mc` and seed.
pub fn mc_sweep(
    model: &Model,
    params: &ModelParams,
    samples: &Samples<'_>,
    n_mc_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    if seeds.is_empty() {
        return Err(Error::Config("mc sweep needs at least one seed".into()));
    }
    n_mc_list
        .iter()
        .map(|&n_mc| {
            let accuracies = seeds
                .iter()
                .map(|&s| Ok(accuracy(&predict_logits(model, params, samples, n_mc, s)?, &samples.labels)))
                .collect::<Result<Vec<_>>>()?;
            let (mean_acc, std_acc) = mean_std(&accuracies);
            Ok(SweepRow {
                n_mc,
                mean_acc,
                std_acc,
                accuracies,
            })
        })
        .collect()
}

/// Writes a CSV table preceded by `# key=value` comment lines.
pub fn write_commented_csv(
    path: &Path,
    comments: &[(String, String)],
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = Vec::new();
    for (k, v) in comments {
        writeln!(out, "# {k}={v}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in rows {
            w.write_record(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_reliability_csv(bins: &ReliabilityBins, path: &Path, comments: &[(String, String)]) -> Result<()> {
    let rows: Vec<Vec<String>> = bins
        .bins
        .iter()
        .map(|b| {
            vec![
                format!("{:.1}", b.low),
                format!("{:.1}", b.high),
                b.conf.to_string(),
                b.acc.to_string(),
                b.count.to_string(),
            ]
        })
        .collect();
    write_commented_csv(path, comments, &["bin_low", "bin_high", "conf", "acc", "count"], &rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path, comments: &[(String, String)]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.n_mc.to_string(), r.mean_acc.to_string(), r.std_acc.to_string()])
        .collect();
    write_commented_csv(path, comments, &["n_mc", "mean_acc", "std_acc"], &body)
}
