//! Synthetic heterodyne records from a driven dispersive cavity.
//!
//! Each class has a noiseless mean trace obtained by integrating the cavity
//! mean-field equation; shots add one of several structured noise models.
//! Samples are in units where vacuum noise has per-sample variance `1/dt`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::datamodel::{HeterodyneRecord, LabeledDataset};
use crate::error::{Result, TppError};
use crate::rng::shot_stream;

/// Cavity and drive parameters. Angular quantities are in rad/s, times in s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityConfig {
    pub kappa: f64,
    /// Dispersive shift for each class name.
    pub chi: BTreeMap<String, f64>,
    #[serde(default)]
    pub delta_da: f64,
    pub eta: f64,
    pub t_on: f64,
    pub t_off: f64,
    pub t_meas: f64,
    pub dt: f64,
}

impl CavityConfig {
    /// Transmon-like readout: `kappa/2pi = 1.54 MHz`, `chi/kappa = 0.195`,
    /// level shifts `{-chi, chi, -3chi, -5chi}` for `{e, g, f, h}`.
    pub fn transmon(eta: f64, t_on: f64, t_off: f64, t_meas: f64, dt: f64) -> Self {
        let kappa = 2.0 * std::f64::consts::PI * 1.54e6;
        let chi = 0.195 * kappa;
        let shifts = [("e", -chi), ("g", chi), ("f", -3.0 * chi), ("h", -5.0 * chi)];
        CavityConfig {
            kappa,
            chi: shifts.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            delta_da: 0.0,
            eta,
            t_on,
            t_off,
            t_meas,
            dt,
        }
    }

    pub fn n_time(&self) -> usize {
        (self.t_meas / self.dt).round() as usize
    }

    /// Index range of samples with `t_on <= t < t_off`.
    pub fn drive_window(&self) -> std::ops::Range<usize> {
        let first = |t: f64| ((t / self.dt) - 1e-9).ceil().max(0.0) as usize;
        let n = self.n_time();
        first(self.t_on).min(n)..first(self.t_off).min(n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TppError::InvalidConfig(m));
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        if !self.delta_da.is_finite() || self.chi.values().any(|c| !c.is_finite()) {
            return bad("chi and delta_da must be finite".into());
        }
        if !(0.0 <= self.t_on && self.t_on < self.t_off && self.t_off <= self.t_meas) {
            return bad(format!(
                "need 0 <= t_on < t_off <= t_meas, got {} {} {}",
                self.t_on, self.t_off, self.t_meas
            ));
        }
        let steps = self.t_meas / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps || steps.round() < 1.0 {
            return bad(format!("dt {} does not divide t_meas {}", self.dt, self.t_meas));
        }
        if self.kappa * self.dt > 0.1 {
            log::warn!(
                "kappa*dt = {:.3} exceeds 0.1; RK4 mean traces may be inaccurate",
                self.kappa * self.dt
            );
        }
        Ok(())
    }

    fn shift(&self, class: &str) -> Result<f64> {
        self.chi
            .get(class)
            .copied()
            .ok_or_else(|| TppError::UnknownClass(class.to_string()))
    }
}

/// Additive noise model applied on top of the mean traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Vacuum noise only.
    White {},
    /// Independent white noise with per-quadrature variance scales.
    IqVariances { sigma_i2: f64, sigma_q2: f64 },
    /// Phase-preserving amplifier followed by classical added noise. The
    /// amplitude response is one pole at `gamma / sqrt(gain_tr)` with DC gain
    /// `sqrt(gain_tr)` and unit gain far outside the band. Vacuum noise
    /// passes through the same response and the idler adds noise of
    /// low-frequency density `gain_tr - 1`.
    Amplifier {
        gain_tr: f64,
        gamma_over_kappa: f64,
        n_cl: f64,
    },
    /// Markov transitions between levels during the record. `rates[j][k]` is
    /// the rate (1/s) of the transition from `j` to `k`.
    Jumps {
        rates: BTreeMap<String, BTreeMap<String, f64>>,
    },
    /// Vacuum noise plus classical white and 1/f components, each of unit
    /// power before weighting.
    PinkMix { sigma_w: f64, sigma_p: f64 },
}

impl NoiseSpec {
    pub fn validate(&self, cfg: &CavityConfig) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TppError::InvalidConfig(format!("{name} must be >= 0, got {v}")))
            }
        };
        match self {
            NoiseSpec::White {} => Ok(()),
            NoiseSpec::IqVariances { sigma_i2, sigma_q2 } => {
                nonneg("sigma_i2", *sigma_i2)?;
                nonneg("sigma_q2", *sigma_q2)
            }
            NoiseSpec::Amplifier {
                gain_tr,
                gamma_over_kappa,
                n_cl,
            } => {
                if !(*gain_tr >= 1.0 && gain_tr.is_finite()) {
                    return Err(TppError::InvalidConfig(format!(
                        "gain_tr must be >= 1, got {gain_tr}"
                    )));
                }
                if !(*gamma_over_kappa > 0.0 && gamma_over_kappa.is_finite()) {
                    return Err(TppError::InvalidConfig(format!(
                        "gamma_over_kappa must be > 0, got {gamma_over_kappa}"
                    )));
                }
                nonneg("n_cl", *n_cl)
            }
            NoiseSpec::Jumps { rates } => {
                for (from, row) in rates {
                    cfg.shift(from)?;
                    for (to, &r) in row {
                        cfg.shift(to)?;
                        nonneg("jump rate", r)?;
                        if from == to && r != 0.0 {
                            return Err(TppError::InvalidConfig(format!(
                                "self-transition rate for `{from}` must be zero"
                            )));
                        }
                    }
                }
                Ok(())
            }
            NoiseSpec::PinkMix { sigma_w, sigma_p } => {
                nonneg("sigma_w", *sigma_w)?;
                nonneg("sigma_p", *sigma_p)
            }
        }
    }
}

/// Everything `simulate` needs apart from the seed; the JSON form of this is
/// what the command line reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub cavity: CavityConfig,
    pub noise: NoiseSpec,
    pub classes: Vec<String>,
    pub n_shots: usize,
}

type Cx = Complex<f64>;

fn cavity_rhs(alpha: Cx, chi: f64, cfg: &CavityConfig, drive_on: bool) -> Cx {
    let decay = Cx::new(cfg.kappa / 2.0, chi - cfg.delta_da);
    let drive = if drive_on { Cx::new(0.0, -cfg.eta) } else { Cx::new(0.0, 0.0) };
    -decay * alpha + drive
}

fn rk4(alpha: Cx, chi: f64, cfg: &CavityConfig, drive_on: bool, h: f64) -> Cx {
    let f = |a: Cx| cavity_rhs(a, chi, cfg, drive_on);
    let k1 = f(alpha);
    let k2 = f(alpha + k1 * (h / 2.0));
    let k3 = f(alpha + k2 * (h / 2.0));
    let k4 = f(alpha + k3 * h);
    alpha + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn drive_mask(cfg: &CavityConfig) -> Vec<bool> {
    let w = cfg.drive_window();
    (0..cfg.n_time()).map(|i| w.contains(&i)).collect()
}

fn quadratures(alpha: &[Cx], kappa: f64) -> (Vec<f64>, Vec<f64>) {
    let s = (2.0 * kappa).sqrt();
    (alpha.iter().map(|a| s * a.re).collect(), alpha.iter().map(|a| s * a.im).collect())
}

/// Cavity field with the dispersive shift switching at the given times.
/// `switches` holds `(time, chi)` pairs in increasing time order. Sample `i`
/// is the field at the end of step `i`; the drive is constant over a step.
fn integrate_field(cfg: &CavityConfig, chi0: f64, switches: &[(f64, f64)]) -> Vec<Cx> {
    let mask = drive_mask(cfg);
    let mut out = Vec::with_capacity(mask.len());
    let mut alpha = Cx::new(0.0, 0.0);
    let mut chi = chi0;
    let mut next = 0;
    for (i, &on) in mask.iter().enumerate() {
        let mut t = i as f64 * cfg.dt;
        let end = t + cfg.dt;
        while next < switches.len() && switches[next].0 < end {
            let ts = switches[next].0.max(t);
            if ts > t {
                alpha = rk4(alpha, chi, cfg, on, ts - t);
                t = ts;
            }
            chi = switches[next].1;
            next += 1;
        }
        alpha = rk4(alpha, chi, cfg, on, end - t);
        out.push(alpha);
    }
    out
}

/// Noiseless I/Q record for `class`: `sqrt(2 kappa)` times the real and
/// imaginary parts of the mean cavity field.
pub fn cavity_mean_trace(cfg: &CavityConfig, class: &str) -> Result<HeterodyneRecord> {
    cfg.validate()?;
    let alpha = integrate_field(cfg, cfg.shift(class)?, &[]);
    let (i, q) = quadratures(&alpha, cfg.kappa);
    HeterodyneRecord::from_rows(&[i, q], cfg.dt)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn add_white(trace: &mut [f64], var: f64, rng: &mut ChaCha8Rng) {
    if var > 0.0 {
        let s = var.sqrt();
        trace.iter_mut().for_each(|x| *x += s * gaussian(rng));
    }
}

/// One-pole low-pass with unit DC gain, `y_i = rho y_{i-1} + (1 - rho) x_i`.
fn low_pass(x: &[f64], rho: f64) -> Vec<f64> {
    let mut y = 0.0;
    x.iter()
        .map(|&v| {
            y = rho * y + (1.0 - rho) * v;
            y
        })
        .collect()
}

/// Adds `a w_i + b z_i` where `w` is white with variance `var` and `z` is its
/// one-pole low-pass, started from the stationary state so the sum carries
/// no turn-on transient.
fn add_filtered_white(trace: &mut [f64], var: f64, a: f64, b: f64, rho: f64, rng: &mut ChaCha8Rng) {
    if var <= 0.0 {
        return;
    }
    let s = var.sqrt();
    let mut z = s * ((1.0 - rho) / (1.0 + rho)).sqrt() * gaussian(rng);
    for x in trace.iter_mut() {
        let w = s * gaussian(rng);
        z = rho * z + (1.0 - rho) * w;
        *x += a * w + b * z;
    }
}

/// Gaussian noise with a 1/f spectrum over bins `1..=n/2` and expected
/// per-sample variance `var`.
struct PinkSynth {
    ifft: Arc<dyn Fft<f64>>,
    amps: Vec<f64>,
    n: usize,
}

impl PinkSynth {
    fn new(n: usize, var: f64) -> Self {
        let ifft = FftPlanner::new().plan_fft_inverse(n.max(1));
        let k_max = n / 2;
        let norm: f64 = (1..=k_max).map(|k| 1.0 / k as f64).sum();
        let amps = (0..=k_max)
            .map(|k| if k == 0 { 0.0 } else { (var / (k as f64 * norm)).sqrt() })
            .collect();
        PinkSynth { ifft, amps, n }
    }

    fn add(&self, trace: &mut [f64], weight: f64, rng: &mut ChaCha8Rng) {
        if weight == 0.0 || self.n < 2 {
            return;
        }
        let mut buf = vec![Cx::new(0.0, 0.0); self.n];
        for (k, &a) in self.amps.iter().enumerate().skip(1) {
            let (re, im) = (gaussian(rng), gaussian(rng));
            // the Nyquist bin has no sine component
            buf[k] = if 2 * k == self.n {
                Cx::new(a * re, 0.0)
            } else {
                Cx::new(a * re, -a * im)
            };
        }
        self.ifft.process(&mut buf);
        for (x, z) in trace.iter_mut().zip(&buf) {
            *x += weight * z.re;
        }
    }
}

/// Sample a jump trajectory starting in `start`; returns `(time, chi)` switches.
fn sample_jumps(
    cfg: &CavityConfig,
    rates: &BTreeMap<String, BTreeMap<String, f64>>,
    start: &str,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut state = start.to_string();
    let mut t = 0.0;
    loop {
        let row: Vec<(&String, f64)> = rates
            .get(&state)
            .map(|r| r.iter().filter(|(_, &v)| v > 0.0).map(|(k, &v)| (k, v)).collect())
            .unwrap_or_default();
        let total: f64 = row.iter().map(|(_, r)| r).sum();
        if total <= 0.0 {
            break;
        }
        t += Exp::new(total).expect("positive rate").sample(rng);
        if t >= cfg.t_meas {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut next = row[row.len() - 1].0;
        for (k, r) in &row {
            if u < *r {
                next = k;
                break;
            }
            u -= r;
        }
        state = next.clone();
        out.push((t, cfg.chi[&state]));
    }
    out
}

/// Generate `n_shots` records per requested class.
///
/// Shot `n` of the class at position `p` in `classes` draws all of its
/// randomness from the stream keyed by `(seed, p, n)`, so the output does not
/// depend on thread count or scheduling.
pub fn simulate(
    cfg: &CavityConfig,
    noise: &NoiseSpec,
    classes: &[String],
    n_shots: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    cfg.validate()?;
    noise.validate(cfg)?;
    let n_time = cfg.n_time();
    let dt = cfg.dt;
    let pink = match noise {
        NoiseSpec::PinkMix { .. } => Some(PinkSynth::new(n_time, 1.0 / dt)),
        _ => None,
    };

    let mut shots = Vec::with_capacity(classes.len());
    for (p, name) in classes.iter().enumerate() {
        let chi = cfg.shift(name)?;
        let mean = quadratures(&integrate_field(cfg, chi, &[]), cfg.kappa);
        let class_shots = (0..n_shots)
            .into_par_iter()
            .map(|n| {
                let mut rng = shot_stream(seed, p, n);
                let (mut i, mut q) = mean.clone();
                match noise {
                    NoiseSpec::White {} => {
                        add_white(&mut i, 1.0 / dt, &mut rng);
                        add_white(&mut q, 1.0 / dt, &mut rng);
                    }
                    NoiseSpec::IqVariances { sigma_i2, sigma_q2 } => {
                        add_white(&mut i, sigma_i2 / dt, &mut rng);
                        add_white(&mut q, sigma_q2 / dt, &mut rng);
                    }
                    NoiseSpec::Amplifier {
                        gain_tr,
                        gamma_over_kappa,
                        n_cl,
                    } => {
                        let rho = amplifier_pole(cfg, *gain_tr, *gamma_over_kappa);
                        let boost = gain_tr.sqrt() - 1.0;
                        let idler = (gain_tr - 1.0).sqrt();
                        for x in [&mut i, &mut q] {
                            let lp = low_pass(x, rho);
                            x.iter_mut().zip(&lp).for_each(|(v, l)| *v += boost * l);
                            add_filtered_white(x, 1.0 / dt, 1.0, boost, rho, &mut rng);
                            add_filtered_white(x, 1.0 / dt, 0.0, idler, rho, &mut rng);
                            add_white(x, n_cl / dt, &mut rng);
                        }
                    }
                    NoiseSpec::Jumps { rates } => {
                        let switches = sample_jumps(cfg, rates, name, &mut rng);
                        if !switches.is_empty() {
                            (i, q) = quadratures(&integrate_field(cfg, chi, &switches), cfg.kappa);
                        }
                        add_white(&mut i, 1.0 / dt, &mut rng);
                        add_white(&mut q, 1.0 / dt, &mut rng);
                    }
                    NoiseSpec::PinkMix { sigma_w, sigma_p } => {
                        let synth = pink.as_ref().expect("pink synthesiser");
                        for x in [&mut i, &mut q] {
                            add_white(x, (1.0 + sigma_w * sigma_w) / dt, &mut rng);
                            synth.add(x, *sigma_p, &mut rng);
                        }
                    }
                }
                HeterodyneRecord::from_rows(&[i, q], dt)
            })
            .collect::<Result<Vec<_>>>()?;
        shots.push(class_shots);
    }
    LabeledDataset::new(classes.to_vec(), shots, 2, n_time, dt)
}

/// Run a [`SimulationConfig`].
pub fn simulate_config(sim: &SimulationConfig, seed: u64) -> Result<LabeledDataset> {
    simulate(&sim.cavity, &sim.noise, &sim.classes, sim.n_shots, seed)
}

/// Lag-one correlation of the amplifier pole at `gamma_eff = gamma / sqrt(G)`.
pub fn amplifier_pole(cfg: &CavityConfig, gain_tr: f64, gamma_over_kappa: f64) -> f64 {
    let gamma_eff = gamma_over_kappa * cfg.kappa / gain_tr.sqrt();
    (-gamma_eff * cfg.dt).exp()
}

/// Exact noise spectral density of the amplifier model at frequency `f` (Hz),
/// in units where vacuum noise is 1.
pub fn amplifier_noise_spectrum(
    cfg: &CavityConfig,
    gain_tr: f64,
    gamma_over_kappa: f64,
    n_cl: f64,
    f: f64,
) -> f64 {
    let rho = amplifier_pole(cfg, gain_tr, gamma_over_kappa);
    let phase = Cx::from_polar(1.0, -2.0 * std::f64::consts::PI * f * cfg.dt);
    let lp = Cx::new(1.0 - rho, 0.0) / (Cx::new(1.0, 0.0) - phase * rho);
    let h = Cx::new(1.0, 0.0) + lp * (gain_tr.sqrt() - 1.0);
    h.norm_sqr() + (gain_tr - 1.0) * lp.norm_sqr() + n_cl
}
