//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (visible with `--nocapture`) before asserting.

use std::collections::BTreeMap;

use tpp_cli::repro::{run_recipe, ReproReport};
use tpp_core::datamodel::estimate_moments;
use tpp_core::filters::{analytic_filters, matched_filter};
use tpp_core::linalg::cosine_similarity;
use tpp_core::metrics::{cross_validate, noise_psd, noise_psd_fft, CvOptions, FilterChoice, Pipeline};
use tpp_core::rng::derive_seed;
use tpp_core::simulator::{simulate, CavityConfig, NoiseSpec};
use tpp_core::training::{
    relative_difference, shuffle_equivariance_error, train_closed_form, train_numeric,
};
use tpp_core::{HeterodyneRecord, LabeledDataset, TrainedTpp, TrainingMethod, TrainingOptions};

const DT: f64 = 10e-9;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id:>2} {}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn cavity(eta: f64, n_time: usize) -> CavityConfig {
    let t = n_time as f64 * DT;
    CavityConfig::transmon(eta, 0.1 * t, 0.6 * t, t, DT)
}

/// Uniform in [-0.5, 0.5) from a hashed counter.
fn unit(seed: u64, i: u64) -> f64 {
    (derive_seed(seed, i) >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (derive_seed(seed, i as u64) % (i as u64 + 1)) as usize;
        p.swap(i, j);
    }
    p
}

/// A spread of small simulated datasets covering every noise model.
fn constraint_datasets() -> Vec<(String, LabeledDataset)> {
    let rates = BTreeMap::from([("e".to_string(), BTreeMap::from([("g".to_string(), 5e5)]))]);
    let specs = [
        ("white, 2 classes", NoiseSpec::White {}, vec!["e", "g"]),
        ("white, 3 classes", NoiseSpec::White {}, vec!["e", "g", "f"]),
        ("iq variances", NoiseSpec::IqVariances { sigma_i2: 1.0, sigma_q2: 3.0 }, vec!["e", "g", "f"]),
        ("amplifier", NoiseSpec::Amplifier { gain_tr: 100.0, gamma_over_kappa: 5.0, n_cl: 30.0 }, vec!["e", "g"]),
        ("jumps", NoiseSpec::Jumps { rates }, vec!["e", "g", "f"]),
        ("pink mix", NoiseSpec::PinkMix { sigma_w: 1.0, sigma_p: 1.0 }, vec!["e", "g", "f", "h"]),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (label, noise, cls))| {
            let d = simulate(&cavity(1.2e7, 40), &noise, &names(&cls), 1500, 100 + i as u64).unwrap();
            (label.to_string(), d)
        })
        .collect()
}

fn constraint_residuals(m: &TrainedTpp) -> (f64, f64) {
    let d = m.dim();
    let scale = (0..m.n_classes())
        .flat_map(|k| m.filter(k))
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    let sum = (0..d)
        .map(|j| (0..m.n_classes()).map(|k| m.w[(k, j)]).sum::<f64>().abs())
        .fold(0.0_f64, f64::max);
    (sum / scale, (m.b.iter().sum::<f64>() - 1.0).abs())
}

#[test]
fn c01_matched_filter_equivalence() {
    let d = simulate(&cavity(1e6, 100), &NoiseSpec::White {}, &names(&["e", "g"]), 8000, 1).unwrap();
    let mf = matched_filter(&d, "e", "g").unwrap();
    let white = analytic_filters(&estimate_moments(&d).unwrap(), true).unwrap();
    let numeric = train_numeric(&d, &TrainingOptions::default()).unwrap();
    let c_white = cosine_similarity(&white.bank.filters[0], &mf);
    let c_num = cosine_similarity(&numeric.filter(0), &mf);
    verdict(
        1,
        "matched-filter equivalence",
        c_white >= 0.999 && c_num >= 0.99,
        &format!("cos(white analytic, MF) = {c_white:.6} (>= 0.999), cos(numeric, MF) = {c_num:.6} (>= 0.99)"),
    );
}

#[test]
fn c02_filter_sum_constraint() {
    let mut worst = (0.0_f64, 0.0_f64);
    let mut where_ = String::new();
    for (label, d) in constraint_datasets() {
        let moments = estimate_moments(&d).unwrap();
        let opts = TrainingOptions::default();
        let models = [
            ("numeric", train_numeric(&d, &opts).unwrap()),
            ("closed form", train_closed_form(&moments, &opts).unwrap()),
            ("white analytic", analytic_filters(&moments, true).unwrap().to_model()),
            ("general analytic", analytic_filters(&moments, false).unwrap().to_model()),
        ];
        for (method, m) in &models {
            let (s, b) = constraint_residuals(m);
            if s > worst.0 || b > worst.1 {
                where_ = format!("{label} / {method}");
            }
            worst = (worst.0.max(s), worst.1.max(b));
        }
    }
    verdict(
        2,
        "filter-sum constraint",
        worst.0 <= 1e-9 && worst.1 <= 1e-9,
        &format!(
            "max |sum f_k| / max |f_k| = {:.2e}, max |sum b_k - 1| = {:.2e} (<= 1e-9; worst at {where_})",
            worst.0, worst.1
        ),
    );
}

/// `(X^T X) beta = X^T Y` by Gauss-Jordan elimination with partial pivoting.
fn brute_force_normal_equations(d: &LabeledDataset) -> Vec<Vec<f64>> {
    let c = d.n_classes();
    let p = d.dim() + 1;
    let mut a = vec![vec![0.0; p + c]; p];
    for (label, r) in d.labeled_iter() {
        let mut x = r.as_slice().to_vec();
        x.push(1.0);
        for i in 0..p {
            for j in 0..p {
                a[i][j] += x[i] * x[j];
            }
            a[i][p + label] += x[i];
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let lead = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= lead);
        for row in 0..p {
            if row != col {
                let f = a[row][col];
                let src = a[col].clone();
                a[row].iter_mut().zip(&src).for_each(|(v, s)| *v -= f * s);
            }
        }
    }
    // beta is p x c; return it as c rows of (w, b)
    (0..c).map(|k| (0..p).map(|i| a[i][p + k]).collect()).collect()
}

fn tiny_dataset(seed: u64, n_classes: usize, n_time: usize, shots: usize) -> LabeledDataset {
    let mut counter = 0;
    let mut next = || {
        counter += 1;
        unit(seed, counter)
    };
    let classes: Vec<String> = (0..n_classes).map(|k| format!("s{k}")).collect();
    let data = (0..n_classes)
        .map(|k| {
            (0..shots)
                .map(|_| {
                    let v = (0..n_time).map(|t| next() + 0.3 * k as f64 * (t as f64 + 1.0).sqrt()).collect();
                    HeterodyneRecord::from_flat(1, n_time, 1.0, v).unwrap()
                })
                .collect()
        })
        .collect();
    LabeledDataset::new(classes, data, 1, n_time, 1.0).unwrap()
}

#[test]
fn c03_closed_form_matches_numeric_and_oracle() {
    let mut worst_pair = 0.0_f64;
    for (_, d) in constraint_datasets() {
        let opts = TrainingOptions::default();
        let numeric = train_numeric(&d, &opts).unwrap();
        let closed = train_closed_form(&estimate_moments(&d).unwrap(), &opts).unwrap();
        worst_pair = worst_pair.max(relative_difference(&numeric, &closed));
    }
    let mut worst_oracle = 0.0_f64;
    for seed in 0..20 {
        let d = tiny_dataset(seed, 2 + (seed as usize % 3), 3, 6);
        let oracle = brute_force_normal_equations(&d);
        let scale = oracle.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
        let opts = TrainingOptions::default();
        for m in [
            train_numeric(&d, &opts).unwrap(),
            train_closed_form(&estimate_moments(&d).unwrap(), &opts).unwrap(),
        ] {
            for (k, row) in oracle.iter().enumerate() {
                let got = m.augmented().row(k).iter().copied().collect::<Vec<_>>();
                let err = got.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
                worst_oracle = worst_oracle.max(err);
            }
        }
    }
    verdict(
        3,
        "closed form equals numeric",
        worst_pair <= 1e-8 && worst_oracle <= 1e-10,
        &format!(
            "closed vs numeric rel. Frobenius = {worst_pair:.2e} (<= 1e-8), vs brute-force normal equations = {worst_oracle:.2e} (<= 1e-10)"
        ),
    );
}

#[test]
fn c04_time_shuffle_equivariance() {
    let d = simulate(&cavity(1.2e7, 30), &NoiseSpec::White {}, &names(&["e", "g", "f"]), 600, 4).unwrap();
    let mut worst = 0.0_f64;
    for lambda in [0.0, 1e-6] {
        let model = train_numeric(&d, &TrainingOptions { lambda, method: TrainingMethod::NumericLsq }).unwrap();
        for i in 0..100 {
            let perm = permutation(d.dim(), derive_seed(lambda.to_bits(), i));
            worst = worst.max(shuffle_equivariance_error(&model, &d, &perm).unwrap());
        }
    }
    verdict(
        4,
        "time-shuffle equivariance",
        worst <= 1e-9,
        &format!("100 permutations x lambda in {{0, 1e-6}}: max rel. error = {worst:.2e} (<= 1e-9)"),
    );
}

fn col(r: &ReproReport, name: &str) -> Vec<f64> {
    r.column(name).unwrap_or_else(|| panic!("missing column {name}"))
}

fn show_checks(r: &ReproReport) -> String {
    r.assertions
        .iter()
        .map(|a| format!("[{}] {}: {}", if a.pass { "ok" } else { "x" }, a.name, a.detail))
        .collect::<Vec<_>>()
        .join("; ")
}

#[test]
fn c05_three_state_white_noise_ordering() {
    let r = run_recipe("fig2-white-noise-3state", 1).unwrap();
    let (tpp, tpp_se) = (col(&r, "tpp"), col(&r, "tpp_se"));
    let z = |b: &str, i: usize| {
        let (v, se) = (col(&r, b)[i], col(&r, &format!("{b}_se"))[i]);
        (tpp[i] - v) / tpp_se[i].hypot(se)
    };
    let ok = (0..tpp.len()).all(|i| {
        z("fgda_eg", i) <= 2.0 && z("fgda_ef", i) <= 2.0 && z("boxcar", i) <= 2.0 && z("fgda_gf", i).abs() <= 2.0
    });
    verdict(5, "three-state white-noise ordering", ok && r.passed, &show_checks(&r));
}

#[test]
fn c06_amplifier_correlated_noise() {
    let r = run_recipe("fig4-amplifier", 1).unwrap();
    let e = col(&r, "e_metric");
    let ratio = col(&r, "ratio");
    let x = &r.extras;
    let chance = |k: &str| (x[k] - 0.5).abs() <= 2.0 * x[&format!("{k}_se")];
    let ok = e.iter().all(|&v| v > 0.0)
        && e.windows(2).all(|w| w[1] > w[0])
        && *ratio.last().unwrap() >= 2.0
        && x["pre_segment_tpp"] >= 5.0 * x["pre_segment_white"]
        && chance("pre_window_tpp")
        && chance("pre_window_fgda");
    verdict(6, "amplifier correlated noise", ok && r.passed, &show_checks(&r));
}

#[test]
fn c07_jump_noise() {
    let r = run_recipe("fig5-jumps", 1).unwrap();
    let (e, se) = (col(&r, "e_metric"), col(&r, "e_metric_se"));
    let low = col(&r, "psd_e_low");
    let flat = col(&r, "psd_g_flatness");
    let ok = e[0].abs() <= 2.0 * se[0]
        && *e.last().unwrap() > 0.0
        && low.windows(2).all(|w| w[1] > w[0])
        && flat.iter().all(|&f| f <= 0.1);
    verdict(7, "jump noise", ok && r.passed, &show_checks(&r));
}

#[test]
fn c08_pink_noise_mix() {
    let r = run_recipe("pink-noise", 1).unwrap();
    let ratio2 = col(&r, "pink_to_white_power");
    let (e, se) = (col(&r, "e_metric"), col(&r, "e_metric_se"));
    let ok = ratio2.iter().zip(e.iter().zip(&se)).all(|(&q, (&v, &s))| {
        if q == 0.0 {
            v.abs() < 2.0 * s
        } else {
            q < 0.25 || v > 0.0
        }
    });
    verdict(8, "pink-noise mix", ok && r.passed, &show_checks(&r));
}

/// Frequency at which `excess` first drops to half its zero-frequency value,
/// linearly interpolated between bins.
fn half_width(freqs: &[f64], excess: &[f64]) -> f64 {
    let half = excess[0] / 2.0;
    let k = excess.iter().position(|&v| v < half).expect("spectrum falls below half");
    let t = (excess[k - 1] - half) / (excess[k - 1] - excess[k]);
    freqs[k - 1] + t * (freqs[k] - freqs[k - 1])
}

#[test]
fn c09_psd_estimator() {
    let d = simulate(&cavity(5e6, 100), &NoiseSpec::White {}, &names(&["e", "g"]), 4000, 9).unwrap();
    let mut worst_flat = 0.0_f64;
    let mut worst_paths = 0.0_f64;
    for c in 0..2 {
        for obs in 0..2 {
            let s = noise_psd(&d, c, obs).unwrap();
            let f = noise_psd_fft(&d, c, obs).unwrap();
            worst_flat = s.power.iter().map(|p| (p - 1.0).abs()).fold(worst_flat, f64::max);
            worst_paths = s.power.iter().zip(&f.power).map(|(a, b)| (a - b).abs()).fold(worst_paths, f64::max);
        }
    }

    let cfg = cavity(0.0, 400);
    let (gain, gk) = (25.0, 5.0);
    let noise = NoiseSpec::Amplifier { gain_tr: gain, gamma_over_kappa: gk, n_cl: 0.0 };
    let a = simulate(&cfg, &noise, &names(&["e", "g"]), 4000, 10).unwrap();
    let s = noise_psd(&a, 0, 0).unwrap();
    // vacuum floor sits under the Lorentzian
    let excess: Vec<f64> = s.power.iter().map(|p| p - 1.0).collect();
    let measured = half_width(&s.freqs, &excess);
    let analytic = gk * cfg.kappa / gain.sqrt() / (2.0 * std::f64::consts::PI);
    let width_err = (measured / analytic - 1.0).abs();

    verdict(
        9,
        "PSD estimator",
        worst_flat <= 0.1 && width_err <= 0.15 && worst_paths <= 1e-9,
        &format!(
            "white max |S - 1| = {worst_flat:.3} (<= 0.1); Lorentzian half-width {:.3} MHz vs {:.3} MHz, error {:.1}% (<= 15%); direct vs FFT max diff {worst_paths:.1e}",
            measured / 1e6,
            analytic / 1e6,
            100.0 * width_err
        ),
    );
}

#[test]
fn c10_cross_validation_harness() {
    let defaults = CvOptions::default();
    let d = simulate(&cavity(1e7, 100), &NoiseSpec::White {}, &names(&["e", "g"]), 10000, 11).unwrap();
    let tpp = Pipeline::tpp();
    let fgda = Pipeline::Fgda(FilterChoice::Matched("e".into(), "g".into()));
    let run = |p: &Pipeline, flip: f64| {
        cross_validate(&d, p, &CvOptions { seed: 7, label_flip_prob: flip, ..CvOptions::default() }).unwrap()
    };
    let clean_tpp = run(&tpp, 0.0);
    let deterministic = clean_tpp == run(&tpp, 0.0);
    let flip_tpp = run(&tpp, 0.35);
    let clean_fgda = run(&fgda, 0.0);
    let flip_fgda = run(&fgda, 0.35);
    let drop_tpp = flip_tpp.mean_infidelity - clean_tpp.mean_infidelity;
    let drop_fgda = flip_fgda.mean_infidelity - clean_fgda.mean_infidelity;
    // spread of each cross-validated mean is its sample std over splits
    let sigma = [&clean_tpp, &flip_tpp, &clean_fgda, &flip_fgda]
        .iter()
        .map(|r| r.std_fidelity.powi(2))
        .sum::<f64>()
        .sqrt();
    let z = (drop_tpp - drop_fgda) / sigma;
    let ok = defaults.train_frac == 0.8
        && defaults.n_iter == 10
        && clean_tpp.iterations.len() == 10
        && deterministic
        && drop_tpp > 0.0
        && drop_fgda > 0.0
        && z.abs() <= 2.0;
    verdict(
        10,
        "cross-validation harness",
        ok,
        &format!(
            "defaults {:.1}/{:.1} x {} splits, deterministic = {deterministic}; flip 0.35 raises infidelity by {drop_tpp:.4} (TPP) and {drop_fgda:.4} (FGDA), difference {:.2} sigma (<= 2)",
            defaults.train_frac,
            1.0 - defaults.train_frac,
            defaults.n_iter,
            z
        ),
    );
}
