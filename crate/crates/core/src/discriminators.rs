//! Decision rules: argmax over TPP outputs, per-class Gaussian likelihoods on
//! filtered features, and the FGDA pipelines built from them.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;

use crate::datamodel::{HeterodyneRecord, LabeledDataset};
use crate::error::{Result, TppError};
use crate::filters::one_vs_all_filter;
use crate::rng::keyed_stream;
use crate::training::TrainedTpp;

/// True and predicted class indices for a set of evaluated shots.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Predictions {
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl Predictions {
    pub fn agreement(&self, other: &Predictions) -> f64 {
        let same = self
            .predicted
            .iter()
            .zip(&other.predicted)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.predicted.len().max(1) as f64
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax_lowest(y: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in y.iter().enumerate().skip(1) {
        if v > y[best] {
            best = k;
        }
    }
    best
}

pub fn classify_argmax(model: &TrainedTpp, record: &HeterodyneRecord) -> Result<usize> {
    Ok(argmax_lowest(model.predict_flat(record.as_slice())?.as_slice()))
}

pub fn classify_dataset_argmax(model: &TrainedTpp, dataset: &LabeledDataset) -> Result<Predictions> {
    classify_all(dataset, |r| classify_argmax(model, r))
}

fn classify_all<F>(dataset: &LabeledDataset, f: F) -> Result<Predictions>
where
    F: Fn(&HeterodyneRecord) -> Result<usize> + Sync,
{
    let pairs: Vec<(usize, &HeterodyneRecord)> = dataset.labeled_iter().collect();
    let predicted = pairs
        .par_iter()
        .map(|(_, r)| f(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Predictions {
        truth: pairs.iter().map(|(c, _)| *c).collect(),
        predicted,
    })
}

#[derive(Debug, Clone)]
struct ClassDensity {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    half_log_det: f64,
}

/// Per-class Gaussian densities in feature space with equal priors.
#[derive(Debug, Clone)]
pub struct GaussianDiscriminator {
    classes: Vec<ClassDensity>,
    dim: usize,
}

impl GaussianDiscriminator {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, class: usize) -> &DVector<f64> {
        &self.classes[class].mean
    }

    /// Covariance including the jitter used to make it positive definite.
    pub fn covariance(&self, class: usize) -> DMatrix<f64> {
        let l = self.classes[class].chol.l();
        &l * l.transpose()
    }

    /// `-1/2 (x-mu)^T Lambda^{-1} (x-mu) - 1/2 log det Lambda` for each class.
    pub fn log_likelihoods(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(TppError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let x = DVector::from_column_slice(x);
        Ok(self
            .classes
            .iter()
            .map(|c| {
                let z = c
                    .chol
                    .l_dirty()
                    .solve_lower_triangular(&(&x - &c.mean))
                    .expect("positive Cholesky diagonal");
                -0.5 * z.norm_squared() - c.half_log_det
            })
            .collect())
    }
}

/// Fit a mean and biased (1/N) full covariance per class.
pub fn fit_gaussian(features: &[Vec<Vec<f64>>]) -> Result<GaussianDiscriminator> {
    let dim = features
        .iter()
        .flat_map(|c| c.first())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let mut classes = Vec::with_capacity(features.len());
    for (k, samples) in features.iter().enumerate() {
        if samples.len() < 2 {
            return Err(TppError::TooFewShots {
                class: format!("#{k}"),
                found: samples.len(),
                needed: 2,
            });
        }
        if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
            return Err(TppError::DimensionMismatch { expected: dim, got: bad.len() });
        }
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(dim);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(dim, dim);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov.ger(1.0 / n, &c, &c, 1.0);
        }
        crate::linalg::symmetrize(&mut cov);
        let chol = jittered_cholesky(cov)?;
        let half_log_det = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        classes.push(ClassDensity { mean, chol, half_log_det });
    }
    Ok(GaussianDiscriminator { classes, dim })
}

fn jittered_cholesky(cov: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = cov.nrows();
    let tr = cov.trace();
    let mut jitter = if tr > 0.0 { 1e-12 * tr / n as f64 } else { 1e-12 };
    for _ in 0..30 {
        let shifted = &cov + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(TppError::NotPsd { min_eigenvalue: crate::linalg::min_eigenvalue(&cov) })
}

/// Maximum-likelihood class, ties to the lowest index.
pub fn classify_gaussian(disc: &GaussianDiscriminator, feature: &[f64]) -> Result<usize> {
    Ok(argmax_lowest(&disc.log_likelihoods(feature)?))
}

/// One scalar per observable, `sum_i h[m, i] x[m, i]`, for each filter in
/// turn.
pub fn filtered_features(filters: &[Vec<f64>], record: &HeterodyneRecord) -> Result<Vec<f64>> {
    let (n_obs, n_time) = (record.n_obs(), record.n_time());
    let x = record.as_slice();
    let mut out = Vec::with_capacity(filters.len() * n_obs);
    for h in filters {
        if h.len() != x.len() {
            return Err(TppError::DimensionMismatch { expected: x.len(), got: h.len() });
        }
        for m in 0..n_obs {
            let r = m * n_time..(m + 1) * n_time;
            out.push(h[r.clone()].iter().zip(&x[r]).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

fn dataset_features<F>(dataset: &LabeledDataset, f: F) -> Result<Vec<Vec<Vec<f64>>>>
where
    F: Fn(&HeterodyneRecord) -> Result<Vec<f64>> + Sync,
{
    dataset
        .all_shots()
        .iter()
        .map(|shots| shots.par_iter().map(&f).collect())
        .collect()
}

/// Filtered Gaussian discriminant analysis: per-observable filter features,
/// Gaussian fit on `train`, labels for every shot of `eval`.
pub fn fgda_pipeline(
    filters: &[Vec<f64>],
    train: &LabeledDataset,
    eval: &LabeledDataset,
) -> Result<Predictions> {
    let disc = fit_gaussian(&dataset_features(train, |r| filtered_features(filters, r))?)?;
    classify_all(eval, |r| classify_gaussian(&disc, &filtered_features(filters, r)?))
}

/// Leading `C - 1` TPP outputs. The last output is redundant because the
/// outputs of an unregularised model sum to one.
pub fn tpp_features(model: &TrainedTpp, record: &HeterodyneRecord) -> Result<Vec<f64>> {
    let y = model.predict_flat(record.as_slice())?;
    Ok(y.as_slice()[..model.n_classes() - 1].to_vec())
}

/// Gaussian discriminator fitted to TPP outputs on a calibration set.
pub fn fit_tpp_gaussian(model: &TrainedTpp, calib: &LabeledDataset) -> Result<GaussianDiscriminator> {
    fit_gaussian(&dataset_features(calib, |r| tpp_features(model, r))?)
}

pub fn classify_tpp_gaussian(
    model: &TrainedTpp,
    disc: &GaussianDiscriminator,
    eval: &LabeledDataset,
) -> Result<Predictions> {
    classify_all(eval, |r| classify_gaussian(disc, &tpp_features(model, r)?))
}

/// Three-class scheme built from two binary one-vs-all FGDAs for classes `p`
/// and `q`. Each binary instance decides "is `p`" against the pooled other
/// classes; the verdicts combine as
///
/// | is p | is q | label     |
/// |------|------|-----------|
/// | yes  | no   | p         |
/// | no   | yes  | q         |
/// | no   | no   | remaining |
/// | yes  | yes  | random p or q, drawn from `seed` and the shot index |
pub fn multi_fgda(
    train: &LabeledDataset,
    eval: &LabeledDataset,
    scheme: (&str, &str),
    seed: u64,
) -> Result<Predictions> {
    if train.n_classes() != 3 {
        return Err(TppError::InvalidConfig(format!(
            "one-vs-all scheme needs exactly 3 classes, got {}",
            train.n_classes()
        )));
    }
    let p = train.class_index(scheme.0)?;
    let q = train.class_index(scheme.1)?;
    if p == q {
        return Err(TppError::InvalidConfig("scheme needs two different classes".into()));
    }
    eval.class_index(scheme.0)?;
    eval.class_index(scheme.1)?;
    let rest = 3 - p - q;

    let binary = |target: usize, name: &str| -> Result<(Vec<f64>, GaussianDiscriminator)> {
        let h = one_vs_all_filter(train, name)?;
        let filters = [h];
        let mut groups = vec![Vec::new(), Vec::new()];
        for (c, r) in train.labeled_iter() {
            groups[usize::from(c != target)].push(filtered_features(&filters, r)?);
        }
        let [h] = filters;
        Ok((h, fit_gaussian(&groups)?))
    };
    let (hp, dp) = binary(p, scheme.0)?;
    let (hq, dq) = binary(q, scheme.1)?;

    let pairs: Vec<(usize, &HeterodyneRecord)> = eval.labeled_iter().collect();
    let predicted = pairs
        .par_iter()
        .enumerate()
        .map(|(n, (_, r))| {
            let is_p = classify_gaussian(&dp, &filtered_features(std::slice::from_ref(&hp), r)?)? == 0;
            let is_q = classify_gaussian(&dq, &filtered_features(std::slice::from_ref(&hq), r)?)? == 0;
            Ok(match (is_p, is_q) {
                (true, false) => p,
                (false, true) => q,
                (false, false) => rest,
                (true, true) => {
                    if keyed_stream(seed, n as u64).random::<bool>() {
                        p
                    } else {
                        q
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Predictions {
        truth: pairs.iter().map(|(c, _)| *c).collect(),
        predicted,
    })
}
