//! Records, labelled datasets, moment estimates and the on-disk formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TppError};

const MAGIC: &[u8] = b"TPPD1\n";

/// One shot: `n_obs` observables sampled at `n_time` instants.
///
/// Samples are stored flattened, observable-major: all samples of observable
/// 0, then observable 1, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterodyneRecord {
    n_obs: usize,
    n_time: usize,
    dt: f64,
    data: Vec<f64>,
}

impl HeterodyneRecord {
    pub fn from_rows(rows: &[Vec<f64>], dt: f64) -> Result<Self> {
        let n_obs = rows.len();
        let n_time = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_time) {
            return Err(TppError::DimensionMismatch {
                expected: n_time,
                got: bad.len(),
            });
        }
        Self::from_flat(n_obs, n_time, dt, rows.concat())
    }

    /// Inverse of [`HeterodyneRecord::flatten`].
    pub fn from_flat(n_obs: usize, n_time: usize, dt: f64, data: Vec<f64>) -> Result<Self> {
        if n_obs == 0 || n_time == 0 {
            return Err(TppError::InvalidConfig(format!(
                "record shape {n_obs}x{n_time} must be at least 1x1"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(TppError::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        if data.len() != n_obs * n_time {
            return Err(TppError::DimensionMismatch {
                expected: n_obs * n_time,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TppError::InvalidConfig("record contains a non-finite sample".into()));
        }
        Ok(Self { n_obs, n_time, dt, data })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    /// Samples of observable `m`.
    pub fn observable(&self, m: usize) -> &[f64] {
        &self.data[m * self.n_time..(m + 1) * self.n_time]
    }

    pub fn value(&self, m: usize, i: usize) -> f64 {
        self.data[m * self.n_time + i]
    }

    /// Borrow the flattened vector without copying.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Concatenated vector `x`, element `m * n_time + i` is `values[m][i]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n_time).map(<[f64]>::to_vec).collect()
    }

    /// Keep only samples with time index in `range`.
    pub fn time_slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.n_time {
            return Err(TppError::InvalidConfig(format!(
                "time window {range:?} outside 0..{}",
                self.n_time
            )));
        }
        let data = (0..self.n_obs)
            .flat_map(|m| self.observable(m)[range.clone()].iter().copied())
            .collect();
        Ok(Self {
            n_obs: self.n_obs,
            n_time: range.len(),
            dt: self.dt,
            data,
        })
    }
}

/// Shots grouped by class, all with the same shape and sampling interval.
///
/// Class order fixes the one-hot index used everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    classes: Vec<String>,
    shots: Vec<Vec<HeterodyneRecord>>,
    n_obs: usize,
    n_time: usize,
    dt: f64,
}

impl LabeledDataset {
    pub fn new(
        classes: Vec<String>,
        shots: Vec<Vec<HeterodyneRecord>>,
        n_obs: usize,
        n_time: usize,
        dt: f64,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(TppError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        if classes.len() != shots.len() {
            return Err(TppError::LengthMismatch(classes.len(), shots.len()));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(TppError::InvalidConfig(format!("duplicate class name `{c}`")));
            }
        }
        if n_obs == 0 || n_time == 0 || !(dt > 0.0 && dt.is_finite()) {
            return Err(TppError::InvalidConfig(format!(
                "invalid dataset shape {n_obs}x{n_time} with dt {dt}"
            )));
        }
        for r in shots.iter().flatten() {
            if r.n_obs != n_obs || r.n_time != n_time {
                return Err(TppError::DimensionMismatch {
                    expected: n_obs * n_time,
                    got: r.dim(),
                });
            }
            if r.dt != dt {
                return Err(TppError::InvalidConfig(format!(
                    "record dt {} differs from dataset dt {dt}",
                    r.dt
                )));
            }
        }
        Ok(Self { classes, shots, n_obs, n_time, dt })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn dim(&self) -> usize {
        self.n_obs * self.n_time
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn shots(&self, class: usize) -> &[HeterodyneRecord] {
        &self.shots[class]
    }

    pub fn all_shots(&self) -> &[Vec<HeterodyneRecord>] {
        &self.shots
    }

    pub fn shots_per_class(&self) -> Vec<usize> {
        self.shots.iter().map(Vec::len).collect()
    }

    pub fn total_shots(&self) -> usize {
        self.shots.iter().map(Vec::len).sum()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TppError::UnknownClass(name.to_string()))
    }

    /// Fail with `TooFewShots` unless every class has at least `needed` shots.
    pub fn require_shots(&self, needed: usize) -> Result<()> {
        for (c, s) in self.classes.iter().zip(&self.shots) {
            if s.len() < needed {
                return Err(TppError::TooFewShots {
                    class: c.clone(),
                    found: s.len(),
                    needed,
                });
            }
        }
        Ok(())
    }

    /// `(class index, record)` pairs in class-major order.
    pub fn labeled_iter(&self) -> impl Iterator<Item = (usize, &HeterodyneRecord)> {
        self.shots
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.iter().map(move |r| (c, r)))
    }

    /// Same classes, new shot lists.
    pub fn with_shots(&self, shots: Vec<Vec<HeterodyneRecord>>) -> Result<Self> {
        Self::new(self.classes.clone(), shots, self.n_obs, self.n_time, self.dt)
    }

    /// Restrict every record to time indices in `range`.
    pub fn time_slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let shots = self
            .shots
            .iter()
            .map(|s| s.iter().map(|r| r.time_slice(range.clone())).collect())
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.classes.clone(), shots, self.n_obs, range.len(), self.dt)
    }

    /// Keep only the named classes, in the given order.
    pub fn select_classes(&self, names: &[&str]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| self.class_index(n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            idx.iter().map(|&i| self.shots[i].clone()).collect(),
            self.n_obs,
            self.n_time,
            self.dt,
        )
    }
}

/// Per-class means and covariances together with the pooled matrices used by
/// the closed-form and analytic constructions.
#[derive(Debug, Clone)]
pub struct MomentSummary {
    pub classes: Vec<String>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Sum of the class covariances.
    pub v: DMatrix<f64>,
    /// Gram matrix of the class means, `sum_p s_p s_p^T`.
    pub g: DMatrix<f64>,
    pub counts: Vec<usize>,
}

impl MomentSummary {
    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }
}

/// Class means and biased (1/N) covariances.
pub fn estimate_moments(dataset: &LabeledDataset) -> Result<MomentSummary> {
    dataset.require_shots(2)?;
    let d = dataset.dim();
    let per_class: Vec<(DVector<f64>, DMatrix<f64>)> = dataset
        .all_shots()
        .par_iter()
        .map(|shots| class_moments(shots, d))
        .collect();

    let mut v = DMatrix::zeros(d, d);
    let mut g = DMatrix::zeros(d, d);
    let mut means = Vec::with_capacity(per_class.len());
    let mut covariances = Vec::with_capacity(per_class.len());
    for (mean, cov) in per_class {
        v += &cov;
        g.ger(1.0, &mean, &mean, 1.0);
        means.push(mean);
        covariances.push(cov);
    }
    Ok(MomentSummary {
        classes: dataset.classes().to_vec(),
        means,
        covariances,
        v,
        g,
        counts: dataset.shots_per_class(),
    })
}

pub(crate) fn stack_rows(shots: &[HeterodyneRecord], d: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(shots.len(), d);
    for (n, r) in shots.iter().enumerate() {
        for (j, &v) in r.as_slice().iter().enumerate() {
            x[(n, j)] = v;
        }
    }
    x
}

fn class_moments(shots: &[HeterodyneRecord], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = shots.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in shots {
        for (j, &v) in r.as_slice().iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= n;
    let mut centered = stack_rows(shots, d);
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / n;
    crate::linalg::symmetrize(&mut cov);
    (mean, cov)
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_obs: usize,
    n_time: usize,
    dt: f64,
    classes: Vec<String>,
    shots_per_class: Vec<usize>,
}

pub fn write_dataset(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to(dataset: &LabeledDataset, w: &mut impl Write) -> Result<()> {
    let header = Header {
        n_obs: dataset.n_obs,
        n_time: dataset.n_time,
        dt: dataset.dt,
        classes: dataset.classes.clone(),
        shots_per_class: dataset.shots_per_class(),
    };
    w.write_all(MAGIC)?;
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for (_, r) in dataset.labeled_iter() {
        for v in r.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

pub fn read_dataset_from(mut r: impl BufRead) -> Result<LabeledDataset> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| TppError::Format("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(TppError::Format("bad magic, expected TPPD1".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(TppError::Format("missing header line".into()));
    }
    let h: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| TppError::Format(format!("bad header: {e}")))?;
    if h.classes.len() != h.shots_per_class.len() {
        return Err(TppError::Format(format!(
            "{} class names but {} shot counts",
            h.classes.len(),
            h.shots_per_class.len()
        )));
    }
    let d = h.n_obs * h.n_time;
    let total: usize = h.shots_per_class.iter().sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != total * d * 8 {
        return Err(TppError::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            total * d * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let mut shots = Vec::with_capacity(h.classes.len());
    for &n in &h.shots_per_class {
        let mut class = Vec::with_capacity(n);
        for _ in 0..n {
            let data: Vec<f64> = values.by_ref().take(d).collect();
            class.push(
                HeterodyneRecord::from_flat(h.n_obs, h.n_time, h.dt, data)
                    .map_err(|e| TppError::Format(e.to_string()))?,
            );
        }
        shots.push(class);
    }
    LabeledDataset::new(h.classes, shots, h.n_obs, h.n_time, h.dt)
        .map_err(|e| TppError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(rows: &[Vec<f64>]) -> HeterodyneRecord {
        HeterodyneRecord::from_rows(rows, 1.0).unwrap()
    }

    fn ds(classes: &[&str], shots: Vec<Vec<HeterodyneRecord>>) -> LabeledDataset {
        let (o, t) = (shots[0][0].n_obs(), shots[0][0].n_time());
        LabeledDataset::new(classes.iter().map(|s| s.to_string()).collect(), shots, o, t, 1.0)
            .unwrap()
    }

    #[test]
    fn flatten_is_observable_major() {
        assert_eq!(rec(&[vec![1.0, 2.0], vec![3.0, 4.0]]).flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rec(&[vec![0.0; 3]]).flatten(), vec![0.0; 3]);
        assert_eq!(rec(&[vec![2.5]]).flatten(), vec![2.5]);
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(HeterodyneRecord::from_rows(&[vec![f64::NAN]], 1.0).is_err());
    }

    #[test]
    fn identical_shots_have_zero_covariance() {
        let d = ds(
            &["a", "b"],
            vec![
                vec![rec(&[vec![1.0, 1.0]]), rec(&[vec![1.0, 1.0]])],
                vec![rec(&[vec![0.0, 0.0]]), rec(&[vec![2.0, 0.0]])],
            ],
        );
        let m = estimate_moments(&d).unwrap();
        assert_eq!(m.means[0].as_slice(), &[1.0, 1.0]);
        assert_eq!(m.covariances[0].norm(), 0.0);
    }

    #[test]
    fn biased_covariance_of_two_points() {
        let d = ds(
            &["a", "b"],
            vec![
                vec![rec(&[vec![0.0]]), rec(&[vec![2.0]])],
                vec![rec(&[vec![5.0]]), rec(&[vec![5.0]])],
            ],
        );
        let m = estimate_moments(&d).unwrap();
        assert_eq!(m.means[0][0], 1.0);
        assert_eq!(m.covariances[0][(0, 0)], 1.0);
        assert_eq!(m.g[(0, 0)], 1.0 + 25.0);
    }

    #[test]
    fn too_few_shots_is_reported() {
        let d = ds(&["a", "b"], vec![vec![rec(&[vec![0.0]])], vec![rec(&[vec![1.0]])]]);
        assert!(matches!(estimate_moments(&d), Err(TppError::TooFewShots { .. })));
    }

    #[test]
    fn duplicate_class_names_rejected() {
        let r = rec(&[vec![0.0]]);
        let e = LabeledDataset::new(
            vec!["a".into(), "a".into()],
            vec![vec![r.clone()], vec![r]],
            1,
            1,
            1.0,
        );
        assert!(e.is_err());
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let d = ds(&["a", "b"], vec![vec![rec(&[vec![1.0]])], vec![rec(&[vec![2.0]])]]);
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(read_dataset_from(&buf[..]), Err(TppError::Format(_))));

        let mut bad = b"TPPD2\n".to_vec();
        bad.extend_from_slice(&buf[6..]);
        assert!(matches!(read_dataset_from(&bad[..]), Err(TppError::Format(_))));
    }

    #[test]
    fn empty_classes_read_back_and_fail_at_use() {
        let d = LabeledDataset::new(vec!["a".into(), "b".into()], vec![vec![], vec![]], 2, 3, 0.5)
            .unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        let back = read_dataset_from(&buf[..]).unwrap();
        assert_eq!(back, d);
        assert!(matches!(estimate_moments(&back), Err(TppError::TooFewShots { .. })));
    }

    fn brute_force_v(d: &LabeledDataset) -> Vec<Vec<f64>> {
        let dim = d.dim();
        let mut v = vec![vec![0.0; dim]; dim];
        for shots in d.all_shots() {
            let n = shots.len() as f64;
            let mut mean = vec![0.0; dim];
            for r in shots {
                for j in 0..dim {
                    mean[j] += r.as_slice()[j] / n;
                }
            }
            for r in shots {
                for a in 0..dim {
                    for b in 0..dim {
                        v[a][b] += (r.as_slice()[a] - mean[a]) * (r.as_slice()[b] - mean[b]) / n;
                    }
                }
            }
        }
        v
    }

    fn small_dataset() -> impl Strategy<Value = LabeledDataset> {
        (1usize..=2, 1usize..=4, 2usize..=8).prop_flat_map(|(o, t, n)| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, o * t), 2 * n).prop_map(
                move |flat| {
                    let recs: Vec<_> = flat
                        .into_iter()
                        .map(|v| HeterodyneRecord::from_flat(o, t, 1e-3, v).unwrap())
                        .collect();
                    let (a, b) = recs.split_at(n);
                    LabeledDataset::new(
                        vec!["a".into(), "b".into()],
                        vec![a.to_vec(), b.to_vec()],
                        o,
                        t,
                        1e-3,
                    )
                    .unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(o in 1usize..4, t in 1usize..6, seed in prop::collection::vec(-1e3f64..1e3, 24)) {
            let data: Vec<f64> = seed.iter().cycle().take(o * t).copied().collect();
            let r = HeterodyneRecord::from_flat(o, t, 0.1, data.clone()).unwrap();
            let back = HeterodyneRecord::from_rows(&r.rows(), 0.1).unwrap();
            prop_assert_eq!(back.flatten(), data);
        }

        #[test]
        fn pooled_covariance_matches_double_loop(d in small_dataset()) {
            let m = estimate_moments(&d).unwrap();
            let oracle = brute_force_v(&d);
            let scale = 1.0 + m.v.amax();
            for a in 0..d.dim() {
                for b in 0..d.dim() {
                    prop_assert!((m.v[(a, b)] - oracle[a][b]).abs() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn moments_invariant_to_shot_order(d in small_dataset(), rot in 0usize..8) {
            let shots: Vec<Vec<_>> = d.all_shots().iter().map(|s| {
                let mut s = s.clone();
                let k = rot % s.len();
                s.rotate_left(k);
                s.reverse();
                s
            }).collect();
            let p = d.with_shots(shots).unwrap();
            let (a, b) = (estimate_moments(&d).unwrap(), estimate_moments(&p).unwrap());
            let scale = 1.0 + a.v.amax();
            prop_assert!((a.v - b.v).amax() <= 1e-12 * scale);
            for (x, y) in a.means.iter().zip(&b.means) {
                prop_assert!((x - y).amax() <= 1e-12 * (1.0 + x.amax()));
            }
        }

        #[test]
        fn file_roundtrip_is_bit_identical(d in small_dataset()) {
            let mut buf = Vec::new();
            write_dataset_to(&d, &mut buf).unwrap();
            let back = read_dataset_from(&buf[..]).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
