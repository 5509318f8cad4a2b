//! Fidelity accounting, comparison metrics, noise spectra and the
//! cross-validation harness.

use nalgebra::{Complex, DMatrix};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::datamodel::LabeledDataset;
use crate::discriminators::{
    classify_dataset_argmax, classify_tpp_gaussian, fgda_pipeline, fit_tpp_gaussian, multi_fgda,
    Predictions,
};
use crate::error::{Result, TppError};
use crate::filters::{analytic_filters, boxcar_window, matched_filter, one_vs_all_filter};
use crate::rng::{derive_seed, keyed_stream};
use crate::training::{train, TrainingMethod, TrainingOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// Mean of the per-class accuracies.
    pub fidelity: f64,
    pub infidelity: f64,
    /// Fraction of all shots classified correctly.
    pub pooled_fidelity: f64,
    pub n_eval: usize,
    /// `sqrt(F (1 - F) / n_eval)`.
    pub binomial_se: f64,
}

/// Confusion matrix and balanced fidelity of a set of predictions.
pub fn fidelity(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<EvalReport> {
    if truth.len() != predicted.len() {
        return Err(TppError::LengthMismatch(truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(TppError::InvalidConfig("no shots to evaluate".into()));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(TppError::DimensionMismatch { expected: n_classes, got: t.max(p) + 1 });
        }
        confusion[t][p] += 1;
    }
    let per_class: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let fid = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let n = truth.len();
    Ok(EvalReport {
        confusion,
        fidelity: fid,
        infidelity: 1.0 - fid,
        pooled_fidelity: correct as f64 / n as f64,
        n_eval: n,
        binomial_se: (fid * (1.0 - fid) / n as f64).sqrt(),
    })
}

pub fn evaluate(p: &Predictions, n_classes: usize) -> Result<EvalReport> {
    fidelity(&p.truth, &p.predicted, n_classes)
}

/// Percentage fewer errors made by the first classifier,
/// `100 (F_tpp - F_fgda) / (1 - F_fgda)`.
pub fn e_metric(f_tpp: f64, f_fgda: f64) -> Result<f64> {
    if f_fgda >= 1.0 {
        return Err(TppError::DivideByZero("reference fidelity is 1"));
    }
    Ok(100.0 * (f_tpp - f_fgda) / (1.0 - f_fgda))
}

/// First-order standard error of [`e_metric`] for independent fidelity
/// estimates with standard errors `se_tpp` and `se_fgda`.
pub fn e_metric_se(f_tpp: f64, se_tpp: f64, f_fgda: f64, se_fgda: f64) -> f64 {
    let r = 1.0 - f_fgda;
    let d_tpp = 100.0 / r;
    let d_fgda = 100.0 * (f_tpp - 1.0) / (r * r);
    ((d_tpp * se_tpp).powi(2) + (d_fgda * se_fgda).powi(2)).sqrt()
}

/// Infidelity normalised by its value at the smallest amplitude. Input and
/// output are `(amplitude, value)` pairs in the input order.
pub fn n_metric(infidelities: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let base = infidelities
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or(TppError::InvalidConfig("empty infidelity curve".into()))?
        .1;
    if base <= 0.0 {
        return Err(TppError::DivideByZero("infidelity at the smallest amplitude is 0"));
    }
    Ok(infidelities.iter().map(|&(s, v)| (s, v / base)).collect())
}

/// One-sided frequency grid `k / (n dt)` for `k = 0..=n/2` with the spectrum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

fn observable_covariance(dataset: &LabeledDataset, class: usize, obs: usize) -> Result<DMatrix<f64>> {
    let shots = dataset.shots(class);
    if shots.len() < 2 {
        return Err(TppError::TooFewShots {
            class: dataset.classes()[class].clone(),
            found: shots.len(),
            needed: 2,
        });
    }
    if obs >= dataset.n_obs() {
        return Err(TppError::DimensionMismatch { expected: dataset.n_obs(), got: obs + 1 });
    }
    let t = dataset.n_time();
    let n = shots.len() as f64;
    let mut x = DMatrix::from_fn(shots.len(), t, |i, j| shots[i].observable(obs)[j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    Ok(x.tr_mul(&x) / n)
}

/// Noise power spectral density of one observable of one class, from the
/// estimated covariance:
/// `S[f] = (dt / N) [sum_j C_jj + 2 sum_{j>k} cos(2 pi f dt (j-k)) C_jk]`.
///
/// White noise of per-sample variance `1/dt` gives `S = 1`.
pub fn noise_psd(dataset: &LabeledDataset, class: usize, obs: usize) -> Result<Spectrum> {
    let cov = observable_covariance(dataset, class, obs)?;
    let n = cov.nrows();
    let dt = dataset.dt();
    // lag sums: r[l] = sum_{j-k=l} C_jk
    let mut lag = vec![0.0; n];
    for k in 0..n {
        for j in k..n {
            lag[j - k] += cov[(j, k)];
        }
    }
    let freqs: Vec<f64> = (0..=n / 2).map(|k| k as f64 / (n as f64 * dt)).collect();
    let power = freqs
        .iter()
        .map(|&f| {
            let off: f64 = (1..n)
                .map(|l| (2.0 * std::f64::consts::PI * f * dt * l as f64).cos() * lag[l])
                .sum();
            dt / n as f64 * (lag[0] + 2.0 * off)
        })
        .collect();
    Ok(Spectrum { freqs, power })
}

/// Same spectrum as [`noise_psd`] from the averaged periodogram of the
/// mean-subtracted shots.
pub fn noise_psd_fft(dataset: &LabeledDataset, class: usize, obs: usize) -> Result<Spectrum> {
    let shots = dataset.shots(class);
    if shots.len() < 2 {
        return Err(TppError::TooFewShots {
            class: dataset.classes()[class].clone(),
            found: shots.len(),
            needed: 2,
        });
    }
    if obs >= dataset.n_obs() {
        return Err(TppError::DimensionMismatch { expected: dataset.n_obs(), got: obs + 1 });
    }
    let n = dataset.n_time();
    let dt = dataset.dt();
    let mut mean = vec![0.0; n];
    for r in shots {
        mean.iter_mut().zip(r.observable(obs)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= shots.len() as f64);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut acc = vec![0.0; n / 2 + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for r in shots {
        for ((b, v), m) in buf.iter_mut().zip(r.observable(obs)).zip(&mean) {
            *b = Complex::new(v - m, 0.0);
        }
        fft.process(&mut buf);
        acc.iter_mut().zip(&buf).for_each(|(a, z)| *a += z.norm_sqr());
    }
    let scale = dt / (n as f64 * shots.len() as f64);
    Ok(Spectrum {
        freqs: (0..=n / 2).map(|k| k as f64 / (n as f64 * dt)).collect(),
        power: acc.into_iter().map(|a| a * scale).collect(),
    })
}

/// Rule used to turn TPP outputs into labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    Argmax,
    /// Gaussian discriminator fitted on the training shots' outputs.
    Gaussian,
}

/// Filters for the FGDA pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterChoice {
    /// `mean_a - mean_b`.
    Matched(String, String),
    /// Uniform weight on a range of sample indices.
    Boxcar(std::ops::Range<usize>),
    OneVsAll(String),
}

/// A train-then-classify recipe evaluated by [`cross_validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Pipeline {
    Tpp {
        lambda: f64,
        method: TrainingMethod,
        rule: DecisionRule,
    },
    /// Analytic filters from the training moments, classified by argmax.
    TppAnalytic { assume_white: bool },
    Fgda(FilterChoice),
    MultiFgda(String, String),
}

impl Pipeline {
    pub fn tpp() -> Self {
        Pipeline::Tpp {
            lambda: 0.0,
            method: TrainingMethod::NumericLsq,
            rule: DecisionRule::Argmax,
        }
    }

    pub fn run(&self, train_set: &LabeledDataset, eval: &LabeledDataset, seed: u64) -> Result<Predictions> {
        match self {
            Pipeline::Tpp { lambda, method, rule } => {
                let model = train(train_set, &TrainingOptions { lambda: *lambda, method: *method })?;
                match rule {
                    DecisionRule::Argmax => classify_dataset_argmax(&model, eval),
                    DecisionRule::Gaussian => {
                        let disc = fit_tpp_gaussian(&model, train_set)?;
                        classify_tpp_gaussian(&model, &disc, eval)
                    }
                }
            }
            Pipeline::TppAnalytic { assume_white } => {
                let moments = crate::datamodel::estimate_moments(train_set)?;
                let model = analytic_filters(&moments, *assume_white)?.to_model();
                classify_dataset_argmax(&model, eval)
            }
            Pipeline::Fgda(choice) => {
                let h = match choice {
                    FilterChoice::Matched(a, b) => matched_filter(train_set, a, b)?,
                    FilterChoice::Boxcar(w) => {
                        boxcar_window(train_set.n_obs(), train_set.n_time(), w.clone())
                    }
                    FilterChoice::OneVsAll(p) => one_vs_all_filter(train_set, p)?,
                };
                fgda_pipeline(&[h], train_set, eval)
            }
            Pipeline::MultiFgda(p, q) => multi_fgda(train_set, eval, (p, q), seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvOptions {
    pub train_frac: f64,
    pub n_iter: usize,
    pub seed: u64,
    pub label_flip_prob: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            train_frac: 0.8,
            n_iter: 10,
            seed: 0,
            label_flip_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub train_frac: f64,
    pub n_iter: usize,
    pub seed: u64,
    pub label_flip_prob: f64,
    pub mean_fidelity: f64,
    pub mean_infidelity: f64,
    /// Sample standard deviation of the fidelity over iterations.
    pub std_fidelity: f64,
    pub mean_pooled_fidelity: f64,
    /// Binomial standard error of a single iteration at the mean fidelity.
    pub binomial_se: f64,
    pub iterations: Vec<EvalReport>,
}

const SPLIT_TAG: u64 = 0x0053_504c_4954;
const FLIP_TAG: u64 = 0x464c_4950;
const RUN_TAG: u64 = 0x0052_554e;

/// Class-balanced train/eval split for one iteration. Depends only on the
/// seed, the iteration and the class sizes.
pub fn split_indices(counts: &[usize], train_frac: f64, seed: u64, iter: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let iter_seed = derive_seed(derive_seed(seed, SPLIT_TAG), iter as u64);
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut keyed_stream(iter_seed, c as u64));
            let n_train = ((n as f64) * train_frac).round() as usize;
            let eval = idx.split_off(n_train.min(n));
            (idx, eval)
        })
        .collect()
}

/// Repeated random-split evaluation of a pipeline. Training labels can be
/// corrupted: with probability `label_flip_prob` a training shot is moved to
/// a uniformly chosen other class. Evaluation labels are never touched.
pub fn cross_validate(dataset: &LabeledDataset, pipeline: &Pipeline, opts: &CvOptions) -> Result<CvReport> {
    if !(opts.train_frac > 0.0 && opts.train_frac < 1.0) {
        return Err(TppError::InvalidConfig(format!(
            "train_frac must be in (0, 1), got {}",
            opts.train_frac
        )));
    }
    if opts.n_iter == 0 {
        return Err(TppError::InvalidConfig("n_iter must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.label_flip_prob) {
        return Err(TppError::InvalidConfig(format!(
            "label_flip_prob must be in [0, 1], got {}",
            opts.label_flip_prob
        )));
    }
    let counts = dataset.shots_per_class();
    let c = dataset.n_classes();

    let iterations = (0..opts.n_iter)
        .into_par_iter()
        .map(|it| {
            let split = split_indices(&counts, opts.train_frac, opts.seed, it);
            for (k, (tr, ev)) in split.iter().enumerate() {
                if tr.is_empty() || ev.is_empty() {
                    return Err(TppError::TooFewShots {
                        class: dataset.classes()[k].clone(),
                        found: counts[k],
                        needed: 2,
                    });
                }
            }
            let flip_seed = derive_seed(derive_seed(opts.seed, FLIP_TAG), it as u64);
            let mut train_shots = vec![Vec::new(); c];
            let mut eval_shots = vec![Vec::new(); c];
            for (k, (tr, ev)) in split.iter().enumerate() {
                for (i, &s) in tr.iter().enumerate() {
                    let mut label = k;
                    if opts.label_flip_prob > 0.0 {
                        let mut rng = keyed_stream(flip_seed, ((k as u64) << 40) | i as u64);
                        if rng.random::<f64>() < opts.label_flip_prob {
                            let other = rng.random_range(0..c - 1);
                            label = if other >= k { other + 1 } else { other };
                        }
                    }
                    train_shots[label].push(dataset.shots(k)[s].clone());
                }
                eval_shots[k] = ev.iter().map(|&s| dataset.shots(k)[s].clone()).collect();
            }
            let train_set = dataset.with_shots(train_shots)?;
            let eval_set = dataset.with_shots(eval_shots)?;
            let pred = pipeline.run(&train_set, &eval_set, derive_seed(derive_seed(opts.seed, RUN_TAG), it as u64))?;
            evaluate(&pred, c)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = iterations.len() as f64;
    let mean = iterations.iter().map(|r| r.fidelity).sum::<f64>() / n;
    let var = if iterations.len() > 1 {
        iterations.iter().map(|r| (r.fidelity - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let n_eval = iterations[0].n_eval as f64;
    Ok(CvReport {
        train_frac: opts.train_frac,
        n_iter: opts.n_iter,
        seed: opts.seed,
        label_flip_prob: opts.label_flip_prob,
        mean_fidelity: mean,
        mean_infidelity: 1.0 - mean,
        std_fidelity: var.sqrt(),
        mean_pooled_fidelity: iterations.iter().map(|r| r.pooled_fidelity).sum::<f64>() / n,
        binomial_se: (mean * (1.0 - mean) / n_eval).sqrt(),
        iterations,
    })
}

/// Evaluation of `pipeline` with a single fixed split, convenient for
/// comparing methods on identical shots.
pub fn holdout(dataset: &LabeledDataset, pipeline: &Pipeline, train_frac: f64, seed: u64) -> Result<EvalReport> {
    let r = cross_validate(
        dataset,
        pipeline,
        &CvOptions { train_frac, n_iter: 1, seed, label_flip_prob: 0.0 },
    )?;
    Ok(r.iterations.into_iter().next().expect("one iteration"))
}
