//! Analytic optimal filters and the baseline filters they are compared with.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};

use crate::datamodel::{LabeledDataset, MomentSummary};
use crate::error::{Result, TppError};
use crate::linalg::min_eigenvalue;
use crate::simulator::CavityConfig;
use crate::training::{TrainedTpp, TrainingMethod};

/// Where a set of filters came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterProvenance {
    WhiteNoiseAnalytic,
    GeneralAnalytic,
    Numeric,
}

#[derive(Debug, Clone)]
pub struct FilterBank {
    pub filters: Vec<Vec<f64>>,
    /// `C_kp`, the weight of class mean `p` in filter `k` (after whitening).
    pub coefficients: Option<DMatrix<f64>>,
    pub provenance: FilterProvenance,
}

impl FilterBank {
    pub fn from_model(model: &TrainedTpp) -> Self {
        FilterBank {
            filters: (0..model.n_classes()).map(|k| model.filter(k)).collect(),
            coefficients: None,
            provenance: FilterProvenance::Numeric,
        }
    }

    /// `max|sum_k f_k|` relative to the largest filter entry.
    pub fn sum_residual(&self) -> f64 {
        let d = self.filters.first().map_or(0, Vec::len);
        let mut sum = vec![0.0; d];
        let mut scale = 0.0_f64;
        for f in &self.filters {
            for (s, v) in sum.iter_mut().zip(f) {
                *s += v;
                scale = scale.max(v.abs());
            }
        }
        let worst = sum.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }
}

/// Cholesky factor `V = K K^T` of a (possibly jittered) covariance.
#[derive(Debug, Clone)]
pub struct Whitening {
    chol: Cholesky<f64, Dyn>,
    /// Jitter that was added to the diagonal, zero if none was needed.
    pub jitter: f64,
}

impl Whitening {
    /// `L = K^{-1}`, lower triangular, with `L^T L = V^{-1}`.
    pub fn factor(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        let n = l.nrows();
        l.solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `V^{-1} x`.
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(x)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factor `V` for whitening. If the plain factorisation fails, a diagonal
/// jitter is added, starting at `lambda_v` (or `1e-10 tr(V)/dim` when zero)
/// and growing tenfold until it succeeds.
pub fn whitening(v: &DMatrix<f64>, lambda_v: f64) -> Result<Whitening> {
    let n = v.nrows();
    if n != v.ncols() {
        return Err(TppError::DimensionMismatch { expected: n, got: v.ncols() });
    }
    if let Some(chol) = Cholesky::new(v.clone()) {
        return Ok(Whitening { chol, jitter: 0.0 });
    }
    let min_eig = min_eigenvalue(v);
    if min_eig < -1e-8 * v.norm() {
        return Err(TppError::NotPsd { min_eigenvalue: min_eig });
    }
    let tr = v.trace();
    let mut jitter = if lambda_v > 0.0 {
        lambda_v
    } else if tr > 0.0 {
        1e-10 * tr / n as f64
    } else {
        1e-12
    };
    for _ in 0..40 {
        let shifted = v + DMatrix::identity(n, n) * jitter;
        if let Some(chol) = Cholesky::new(shifted) {
            log::debug!("covariance jittered by {jitter:e} before factorisation");
            return Ok(Whitening { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(TppError::NotPsd { min_eigenvalue: min_eig })
}

/// The `(C-1)`-dimensional system that fixes the filter coefficients in the
/// basis of consecutive class pairs `[p, p+1]`.
#[derive(Debug, Clone)]
pub struct QSystem {
    pub q: DMatrix<f64>,
    /// Diagonal of `T`.
    pub t: DVector<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// Mean overlaps `O_cc' = s_c'^T V^{-1} s_c`.
    pub overlaps: DMatrix<f64>,
}

impl QSystem {
    pub fn from_overlaps(overlaps: DMatrix<f64>) -> Self {
        let c = overlaps.nrows();
        let m = overlaps.map(|o| o + 1.0) + DMatrix::<f64>::identity(c, c);
        let last = c - 1;
        let pairs: Vec<_> = (0..last).map(|p| (p, p + 1)).collect();
        let q = DMatrix::from_fn(last, last, |p, j| {
            let (a, b) = pairs[p];
            (m[(a, j)] - m[(b, j)]) - (m[(a, last)] - m[(b, last)])
        });
        let t = DVector::from_fn(last, |p, _| {
            let (a, b) = pairs[p];
            m[(a, last)] - m[(b, last)]
        });
        QSystem { q, t, pairs, overlaps }
    }

    /// `Q^{-1}`, or `SingularQ` when two means are indistinguishable.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let sv = SVD::new(self.q.clone(), false, false).singular_values;
        let (hi, lo) = (sv.max(), sv.min());
        if lo.is_nan() || lo <= 0.0 || hi / lo > 1e12 {
            return Err(TppError::SingularQ);
        }
        self.q.clone().try_inverse().ok_or(TppError::SingularQ)
    }
}

/// Filters, biases and the intermediate system from [`analytic_filters`].
#[derive(Debug, Clone)]
pub struct AnalyticFilters {
    pub bank: FilterBank,
    pub biases: DVector<f64>,
    pub system: QSystem,
    pub classes: Vec<String>,
}

impl AnalyticFilters {
    pub fn to_model(&self) -> TrainedTpp {
        let c = self.bank.filters.len();
        let d = self.bank.filters[0].len();
        TrainedTpp {
            classes: self.classes.clone(),
            lambda: 0.0,
            method: match self.bank.provenance {
                FilterProvenance::WhiteNoiseAnalytic => TrainingMethod::WhiteNoiseAnalytic,
                _ => TrainingMethod::GeneralAnalytic,
            },
            w: DMatrix::from_row_iterator(c, d, self.bank.filters.iter().flatten().copied()),
            b: self.biases.clone(),
        }
    }
}

/// Optimal filters `f_k = sum_p C_kp V^{-1} s_p` from class moments.
///
/// With `assume_white`, `V` is replaced by the isotropic fit
/// `(tr V / dim) I`. The last filter and bias are fixed by
/// `sum_k f_k = 0` and `sum_k b_k = 1`.
pub fn analytic_filters(moments: &MomentSummary, assume_white: bool) -> Result<AnalyticFilters> {
    let c = moments.n_classes();
    if c < 2 {
        return Err(TppError::InvalidConfig("need at least 2 classes".into()));
    }
    let d = moments.dim();
    let vinv_s: Vec<DVector<f64>> = if assume_white {
        let var = moments.v.trace() / d as f64;
        if var.is_nan() || var <= 0.0 {
            return Err(TppError::DegenerateData("zero noise variance".into()));
        }
        moments.means.iter().map(|s| s / var).collect()
    } else {
        let w = whitening(&moments.v, 0.0)?;
        moments.means.iter().map(|s| w.solve(s)).collect()
    };

    let overlaps = DMatrix::from_fn(c, c, |a, b| moments.means[b].dot(&vinv_s[a]));
    let scale = overlaps.diagonal().amax();
    for a in 0..c {
        for b in (a + 1)..c {
            let dist = overlaps[(a, a)] + overlaps[(b, b)] - 2.0 * overlaps[(a, b)];
            if dist <= 1e-12 * scale {
                return Err(TppError::SingularQ);
            }
        }
    }
    let system = QSystem::from_overlaps(overlaps);
    let qinv = system.inverse()?;
    let last = c - 1;

    // C_kp: contribution of each class mean to filter k
    let mut coef = DMatrix::zeros(c, c);
    for k in 0..last {
        for p in 0..c {
            coef[(k, p)] = match p {
                0 => qinv[(k, 0)],
                p if p == last => -qinv[(k, last - 1)],
                p => qinv[(k, p)] - qinv[(k, p - 1)],
            };
        }
    }
    for p in 0..c {
        coef[(last, p)] = -(0..last).map(|k| coef[(k, p)]).sum::<f64>();
    }

    let mut biases = DVector::zeros(c);
    for k in 0..last {
        biases[k] = -(0..last).map(|p| qinv[(k, p)] * system.t[p]).sum::<f64>();
    }
    biases[last] = 1.0 - biases.rows(0, last).sum();

    let mut filters: Vec<Vec<f64>> = (0..last)
        .map(|k| {
            let f = (0..c).fold(DVector::zeros(d), |acc, p| acc + &vinv_s[p] * coef[(k, p)]);
            f.iter().copied().collect()
        })
        .collect();
    let mut closing = vec![0.0; d];
    for f in &filters {
        closing.iter_mut().zip(f).for_each(|(a, v)| *a -= v);
    }
    filters.push(closing);

    Ok(AnalyticFilters {
        bank: FilterBank {
            filters,
            coefficients: Some(coef),
            provenance: if assume_white {
                FilterProvenance::WhiteNoiseAnalytic
            } else {
                FilterProvenance::GeneralAnalytic
            },
        },
        biases,
        system,
        classes: moments.classes.clone(),
    })
}

pub(crate) fn class_mean(dataset: &LabeledDataset, class: usize) -> Vec<f64> {
    let shots = dataset.shots(class);
    let mut mean = vec![0.0; dataset.dim()];
    for r in shots {
        mean.iter_mut().zip(r.as_slice()).for_each(|(m, v)| *m += v);
    }
    let n = shots.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Empirical matched filter `mean_a - mean_b`.
pub fn matched_filter(dataset: &LabeledDataset, class_a: &str, class_b: &str) -> Result<Vec<f64>> {
    let (a, b) = (dataset.class_index(class_a)?, dataset.class_index(class_b)?);
    let (ma, mb) = (class_mean(dataset, a), class_mean(dataset, b));
    Ok(ma.iter().zip(&mb).map(|(x, y)| x - y).collect())
}

/// Uniform weight over the drive window for each of `n_obs` observables.
pub fn boxcar_window(n_obs: usize, n_time: usize, window: std::ops::Range<usize>) -> Vec<f64> {
    if window.is_empty() {
        log::warn!("boxcar window is empty; the filter is identically zero");
    }
    let one = (0..n_time).map(|i| if window.contains(&i) { 1.0 } else { 0.0 });
    one.cycle().take(n_obs * n_time).collect()
}

/// Boxcar filter over `t_on <= t < t_off` for an I/Q record.
pub fn boxcar_filter(cfg: &CavityConfig) -> Vec<f64> {
    boxcar_window(2, cfg.n_time(), cfg.drive_window())
}

/// `mean_p - (1 / (C - 1)) sum_{p' != p} mean_p'`.
pub fn one_vs_all_filter(dataset: &LabeledDataset, class_p: &str) -> Result<Vec<f64>> {
    let p = dataset.class_index(class_p)?;
    let c = dataset.n_classes();
    let means: Vec<_> = (0..c).map(|k| class_mean(dataset, k)).collect();
    let mut h = means[p].clone();
    let w = 1.0 / (c - 1) as f64;
    for (_, m) in means.iter().enumerate().filter(|(k, _)| *k != p) {
        h.iter_mut().zip(m).for_each(|(a, v)| *a -= w * v);
    }
    Ok(h)
}
