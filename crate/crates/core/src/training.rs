//! Least-squares training of the linear map `y = W x + b`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{HeterodyneRecord, LabeledDataset, MomentSummary};
use crate::error::{Result, TppError};
use crate::linalg::{solve_symmetric, SolvePath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMethod {
    NumericLsq,
    ClosedForm,
    WhiteNoiseAnalytic,
    GeneralAnalytic,
}

impl TrainingMethod {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMethod::NumericLsq => "numeric-lsq",
            TrainingMethod::ClosedForm => "closed-form",
            TrainingMethod::WhiteNoiseAnalytic => "white-noise-analytic",
            TrainingMethod::GeneralAnalytic => "general-analytic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingOptions {
    /// Ridge term added to the second-moment matrix. The moment matrix is
    /// normalised per class (divided by total shots / C), so `lambda` is on
    /// the same scale as the class covariances.
    pub lambda: f64,
    pub method: TrainingMethod,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        TrainingOptions {
            lambda: 0.0,
            method: TrainingMethod::NumericLsq,
        }
    }
}

impl TrainingOptions {
    fn check(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TppError::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Weights `W` (C x dim) and biases `b` (C). Row `k` of `W` is the temporal
/// filter for class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTpp {
    pub classes: Vec<String>,
    pub lambda: f64,
    pub method: TrainingMethod,
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl TrainedTpp {
    pub fn n_classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn filter(&self, k: usize) -> Vec<f64> {
        self.w.row(k).iter().copied().collect()
    }

    /// `y = W x + b` for a flattened record.
    pub fn predict_flat(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(TppError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(&self.w * DVector::from_column_slice(x) + &self.b)
    }

    /// Scaled residuals of the filter-sum constraint: `max|sum_k f_k|` over
    /// `max_k max|f_k|`, and `|sum_k b_k - 1|`.
    pub fn constraint_residuals(&self) -> (f64, f64) {
        filter_sum_residuals(&self.w, &self.b)
    }

    /// Stack `(W b)` as one matrix.
    pub fn augmented(&self) -> DMatrix<f64> {
        let (c, d) = self.w.shape();
        let mut m = DMatrix::zeros(c, d + 1);
        m.view_mut((0, 0), (c, d)).copy_from(&self.w);
        m.set_column(d, &self.b);
        m
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, &ModelFile::from(self))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: ModelFile = serde_json::from_reader(f)?;
        m.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelFile>(s)?.try_into()
    }
}

pub(crate) fn filter_sum_residuals(w: &DMatrix<f64>, b: &DVector<f64>) -> (f64, f64) {
    let sum = w.row_sum();
    let scale = w.amax();
    let rel = if scale > 0.0 { sum.amax() / scale } else { 0.0 };
    (rel, (b.sum() - 1.0).abs())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    classes: Vec<String>,
    lambda: f64,
    method: TrainingMethod,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl From<&TrainedTpp> for ModelFile {
    fn from(m: &TrainedTpp) -> Self {
        ModelFile {
            classes: m.classes.clone(),
            lambda: m.lambda,
            method: m.method,
            w: m.w.row_iter().map(|r| r.iter().copied().collect()).collect(),
            b: m.b.iter().copied().collect(),
        }
    }
}

impl TryFrom<ModelFile> for TrainedTpp {
    type Error = TppError;

    fn try_from(m: ModelFile) -> Result<Self> {
        let c = m.classes.len();
        if m.w.len() != c || m.b.len() != c {
            return Err(TppError::Format(format!(
                "model has {c} classes but {} weight rows and {} biases",
                m.w.len(),
                m.b.len()
            )));
        }
        let d = m.w.first().map_or(0, Vec::len);
        if d == 0 || m.w.iter().any(|r| r.len() != d) {
            return Err(TppError::Format("weight rows are empty or ragged".into()));
        }
        Ok(TrainedTpp {
            classes: m.classes,
            lambda: m.lambda,
            method: m.method,
            w: DMatrix::from_row_iterator(c, d, m.w.into_iter().flatten()),
            b: DVector::from_vec(m.b),
        })
    }
}

/// Train from shots by solving the regularised normal equations with a row
/// of ones appended to every shot for the bias.
pub fn train_numeric(dataset: &LabeledDataset, opts: &TrainingOptions) -> Result<TrainedTpp> {
    opts.check()?;
    for (c, n) in dataset.classes().iter().zip(dataset.shots_per_class()) {
        if n == 0 {
            return Err(TppError::DegenerateData(format!("class `{c}` has no shots")));
        }
    }
    let d = dataset.dim();
    let c = dataset.n_classes();
    let total = dataset.total_shots();
    if total < d + 1 {
        log::warn!("{total} shots for {} unknowns per class; solution is underdetermined", d + 1);
    }
    let n_ref = total as f64 / c as f64;

    let mut x = DMatrix::zeros(total, d + 1);
    let mut y = DMatrix::zeros(total, c);
    for (n, (label, rec)) in dataset.labeled_iter().enumerate() {
        x.view_mut((n, 0), (1, d)).copy_from_slice(rec.as_slice());
        x[(n, d)] = 1.0;
        y[(n, label)] = 1.0;
    }
    let mut a = x.tr_mul(&x) / n_ref;
    for i in 0..=d {
        a[(i, i)] += opts.lambda;
    }
    let rhs = x.tr_mul(&y) / n_ref;
    let sol = solve_symmetric(&a, &rhs);
    if sol.path == SolvePath::PseudoInverse {
        log::info!("second-moment matrix ill-conditioned; used minimum-norm pseudo-inverse");
    }
    Ok(split_augmented(
        dataset.classes().to_vec(),
        opts.lambda,
        TrainingMethod::NumericLsq,
        &sol.solution.transpose(),
    ))
}

/// Train directly from class means and covariances.
pub fn train_closed_form(moments: &MomentSummary, opts: &TrainingOptions) -> Result<TrainedTpp> {
    opts.check()?;
    let d = moments.dim();
    let c = moments.n_classes();
    let mut big_d = DMatrix::zeros(d + 1, d + 1);
    big_d.view_mut((0, 0), (d, d)).copy_from(&(&moments.g + &moments.v));
    let mean_sum = moments.means.iter().fold(DVector::zeros(d), |acc, s| acc + s);
    big_d.view_mut((0, d), (d, 1)).copy_from(&mean_sum);
    big_d.view_mut((d, 0), (1, d)).copy_from(&mean_sum.transpose());
    big_d[(d, d)] = c as f64;
    for i in 0..=d {
        big_d[(i, i)] += opts.lambda;
    }

    let mut m = DMatrix::zeros(c, d + 1);
    for (k, s) in moments.means.iter().enumerate() {
        m.view_mut((k, 0), (1, d)).copy_from(&s.transpose());
        m[(k, d)] = 1.0;
    }
    let sol = solve_symmetric(&big_d, &m.transpose());
    if sol.path == SolvePath::PseudoInverse && opts.lambda == 0.0 {
        return Err(TppError::SingularMoments);
    }
    Ok(split_augmented(
        moments.classes.clone(),
        opts.lambda,
        TrainingMethod::ClosedForm,
        &sol.solution.transpose(),
    ))
}

/// Dispatch on `opts.method` (numeric or closed form).
pub fn train(dataset: &LabeledDataset, opts: &TrainingOptions) -> Result<TrainedTpp> {
    match opts.method {
        TrainingMethod::NumericLsq => train_numeric(dataset, opts),
        TrainingMethod::ClosedForm => {
            train_closed_form(&crate::datamodel::estimate_moments(dataset)?, opts)
        }
        other => Err(TppError::InvalidConfig(format!(
            "`{}` models come from the filters module, not least-squares training",
            other.name()
        ))),
    }
}

fn split_augmented(
    classes: Vec<String>,
    lambda: f64,
    method: TrainingMethod,
    wb: &DMatrix<f64>,
) -> TrainedTpp {
    let d = wb.ncols() - 1;
    TrainedTpp {
        classes,
        lambda,
        method,
        w: wb.columns(0, d).into_owned(),
        b: wb.column(d).into_owned(),
    }
}

/// `y = W x + b`.
pub fn predict(model: &TrainedTpp, record: &HeterodyneRecord) -> Result<DVector<f64>> {
    model.predict_flat(record.as_slice())
}

/// Relative Frobenius distance between the augmented matrices `(W b)`.
pub fn relative_difference(a: &TrainedTpp, b: &TrainedTpp) -> f64 {
    let (x, y) = (a.augmented(), b.augmented());
    (&x - &y).norm() / x.norm().max(y.norm()).max(f64::MIN_POSITIVE)
}

/// Train with both least-squares routes and warn if they disagree by more
/// than 1e-6 relative, which signals poor conditioning.
pub fn train_both(dataset: &LabeledDataset, lambda: f64) -> Result<(TrainedTpp, TrainedTpp, f64)> {
    let numeric = train_numeric(
        dataset,
        &TrainingOptions {
            lambda,
            method: TrainingMethod::NumericLsq,
        },
    )?;
    let closed = train_closed_form(
        &crate::datamodel::estimate_moments(dataset)?,
        &TrainingOptions {
            lambda,
            method: TrainingMethod::ClosedForm,
        },
    )?;
    let diff = relative_difference(&numeric, &closed);
    if diff > 1e-6 {
        log::warn!("numeric and closed-form weights differ by {diff:e}; moments are ill-conditioned");
    }
    Ok((numeric, closed, diff))
}

/// Apply `x_J[i] = x[perm[i]]` to every shot.
pub fn permute_dataset(dataset: &LabeledDataset, perm: &[usize]) -> Result<LabeledDataset> {
    let shots = dataset
        .all_shots()
        .iter()
        .map(|s| {
            s.iter()
                .map(|r| {
                    let x = r.as_slice();
                    let data = perm.iter().map(|&p| x[p]).collect();
                    HeterodyneRecord::from_flat(r.n_obs(), r.n_time(), r.dt(), data)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    dataset.with_shots(shots)
}

/// Retrain on time-shuffled data and check that the weights are shuffled the
/// same way, `W_J[:, i] = W[:, perm[i]]`, with the biases unchanged.
///
/// `perm` permutes the flattened record. An extra trailing entry for the bias
/// row is accepted if it maps the bias to itself.
pub fn shuffle_equivariance_check(
    model: &TrainedTpp,
    dataset: &LabeledDataset,
    perm: &[usize],
) -> Result<bool> {
    Ok(shuffle_equivariance_error(model, dataset, perm)? <= 1e-9)
}

/// Relative Frobenius error behind [`shuffle_equivariance_check`].
pub fn shuffle_equivariance_error(
    model: &TrainedTpp,
    dataset: &LabeledDataset,
    perm: &[usize],
) -> Result<f64> {
    let d = dataset.dim();
    let perm = match perm.len() {
        n if n == d => perm,
        n if n == d + 1 && perm[d] == d => &perm[..d],
        n => return Err(TppError::DimensionMismatch { expected: d, got: n }),
    };
    let mut seen = vec![false; d];
    for &p in perm {
        if p >= d || std::mem::replace(&mut seen[p], true) {
            return Err(TppError::InvalidConfig("not a permutation".into()));
        }
    }
    let shuffled = permute_dataset(dataset, perm)?;
    let retrained = train_numeric(
        &shuffled,
        &TrainingOptions {
            lambda: model.lambda,
            method: TrainingMethod::NumericLsq,
        },
    )?;
    let mut expected = model.clone();
    for (i, &p) in perm.iter().enumerate() {
        expected.w.set_column(i, &model.w.column(p));
    }
    Ok(relative_difference(&expected, &retrained))
}
