//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::time::{Duration, Instant};

use gtn_calib::bayes::{
    fit_kde_prior, logit_inverse, logit_map, propagate_noise, tmcmc_sample, ConstantLikelihood, FnLikelihood,
    MeasurementNoise, PosteriorSampleSet, Prior, PriorSpec, RHAT_GATE,
};
use gtn_calib::config::ExperimentConfig;
use gtn_calib::features::{fit_fd_basis, flatten_field, pca_fit, Modality, Standardizer};
use gtn_calib::gp::{log_marginal_likelihood, ArdHyperparams, HyperBounds, TrainedGp};
use gtn_calib::gtn::{
    effective_void_fraction, gtn_yield, voce_flow_stress, yield_magnitude, FixedGtnConstants, GtnParams, ParamBox,
    VoceParams,
};
use gtn_calib::pipeline::{
    compare_orders, generate_design, reduce, run_orders, simulate_dataset, synthetic_observation, train_surrogates,
    validate_surrogates, NoiseModels, Order, SequenceResult,
};
use gtn_calib::TmcmcConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn report(id: usize, title: &'static str, budget_s: u64, elapsed: Duration, checks: Vec<(bool, String)>) -> Outcome {
    let pass = checks.iter().all(|c| c.0) && elapsed <= Duration::from_secs(budget_s);
    let detail = checks
        .iter()
        .map(|(ok, s)| if *ok { s.clone() } else { format!("[failed] {s}") })
        .collect::<Vec<_>>()
        .join("; ");
    let o = Outcome {
        id,
        title,
        pass,
        detail,
        elapsed,
        budget: Duration::from_secs(budget_s),
    };
    println!("{}", line(&o));
    o
}

fn line(o: &Outcome) -> String {
    let over = if o.elapsed > o.budget { " over budget" } else { "" };
    format!(
        "criterion {:>2} {}: {} ({:.1} s of {} s{over}) {}",
        o.id,
        o.title,
        if o.pass { "PASS" } else { "FAIL" },
        o.elapsed.as_secs_f64(),
        o.budget.as_secs(),
        o.detail
    )
}

// ---------------------------------------------------------------------------
// 1, 2

fn gtn_identities() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut vm = 0.0f64;
    let mut cont = 0.0f64;
    let mut ult = 0.0f64;
    for _ in 0..1000 {
        let q1 = rng.gen_range(1.0..2.0);
        let c = FixedGtnConstants {
            q1,
            q3: q1 * q1,
            ..Default::default()
        };
        let sy = rng.gen_range(50.0..500.0);
        let sm = rng.gen_range(-300.0..300.0);
        vm = vm.max(gtn_yield(&c, sy, sm, sy, 0.0).unwrap().abs());
        let seq = rng.gen_range(0.0..600.0);
        vm = vm.max((gtn_yield(&c, seq, sm, sy, 0.0).unwrap() - ((seq / sy).powi(2) - 1.0)).abs());
        vm = vm.max((yield_magnitude(&c, rng.gen_range(0.0..1.0), sy, 0.0) - sy).abs() / sy);

        let f_c = rng.gen_range(0.01..0.15);
        let f_f = rng.gen_range(f_c + 1e-3..0.6);
        let p = GtnParams::new(0.3, 0.02, f_c, f_f);
        let below = effective_void_fraction(&c, &p, f_c * (1.0 - f64::EPSILON)).unwrap();
        let at = effective_void_fraction(&c, &p, f_c).unwrap();
        cont = cont.max((below - f_c).abs()).max((at - f_c).abs());
        ult = ult.max((effective_void_fraction(&c, &p, f_f).unwrap() - 1.0 / q1).abs());
    }
    report(
        1,
        "GTN identities",
        1,
        t.elapsed(),
        vec![
            (vm <= 1e-10, format!("von Mises limit max dev {vm:.1e}")),
            (cont <= 1e-10, format!("f* jump at f_c {cont:.1e}")),
            (ult <= 1e-10, format!("|f*(f_f) - 1/q1| {ult:.1e}")),
        ],
    )
}

fn voce_anchor() -> Outcome {
    let t = Instant::now();
    let v = VoceParams::default();
    let s0 = voce_flow_stress(&v, 0.0).unwrap();
    let s_inf = voce_flow_stress(&v, 100.0).unwrap();
    report(
        2,
        "Voce anchor",
        1,
        t.elapsed(),
        vec![
            (s0 == 165.0, format!("sigma(0) = {s0}")),
            (
                s_inf == 301.0 && v.saturation_stress() == 301.0,
                format!("asymptote {s_inf}"),
            ),
        ],
    )
}

// ---------------------------------------------------------------------------
// 4

fn gp_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_grad = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(10..30);
        let x = DMatrix::from_fn(n, 4, |_, _| rng.gen::<f64>());
        let y: Vec<f64> = (0..n)
            .map(|i| (3.0 * x[(i, 0)]).sin() + x[(i, 1)] * x[(i, 2)] + rng.gen_range(-0.1..0.1))
            .collect();
        let z: Vec<f64> = vec![
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.5..0.5),
            rng.gen_range(-1.5..0.5),
            rng.gen_range(-1.5..0.5),
            rng.gen_range(-1.5..0.5),
            rng.gen_range(-7.0..-2.0),
        ];
        let (_, g) = log_marginal_likelihood(&x, &y, &ArdHyperparams::from_log(&z)).unwrap();
        let f = |v: &[f64]| log_marginal_likelihood(&x, &y, &ArdHyperparams::from_log(v)).unwrap().0;
        for (i, &gi) in g.iter().enumerate() {
            let fd = richardson(&f, &z, i, 1e-3);
            let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(1e-300);
            worst_grad = worst_grad.max(rel);
        }
    }

    // Interpolation with the nugget at its lower bound.
    let floor = HyperBounds::default().noise_variance[0];
    let n = 60;
    let x = DMatrix::from_fn(n, 4, |_, _| rng.gen::<f64>());
    let y: Vec<f64> = (0..n)
        .map(|i| (2.0 * x[(i, 0)]).sin() + (x[(i, 1)] - 0.5).powi(2) + 0.3 * x[(i, 3)])
        .collect();
    let h = ArdHyperparams {
        signal_variance: 1.0,
        length_scales: vec![0.6; 4],
        noise_variance: floor,
    };
    let gp = TrainedGp::fit(x.clone(), y.clone(), h).unwrap();
    let (mu, _) = gp.predict_batch(&x).unwrap();
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let interp = mu.iter().zip(&y).map(|(m, v)| (m - v).abs()).fold(0.0, f64::max) / ymax;

    // Two training points in 4-D against the 2×2 closed form.
    let xa = [0.1, 0.7, 0.3, 0.9];
    let xb = [0.6, 0.2, 0.5, 0.4];
    let xs = [0.35, 0.4, 0.45, 0.6];
    let (sf, ls, sn) = (1.7, [0.5, 0.9, 0.3, 1.4], 0.02);
    let k =
        |a: &[f64; 4], b: &[f64; 4]| sf * (-0.5 * (0..4).map(|d| ((a[d] - b[d]) / ls[d]).powi(2)).sum::<f64>()).exp();
    let (ya, yb) = (0.8, -1.1);
    let (a, b, c) = (k(&xa, &xa) + sn, k(&xa, &xb), k(&xb, &xb) + sn);
    let det = a * c - b * b;
    let ks = [k(&xs, &xa), k(&xs, &xb)];
    let w = [(c * ks[0] - b * ks[1]) / det, (a * ks[1] - b * ks[0]) / det];
    let mu_cf = w[0] * ya + w[1] * yb;
    let var_cf = sf + sn - (w[0] * ks[0] + w[1] * ks[1]);
    let gp2 = TrainedGp::fit(
        DMatrix::from_row_slice(2, 4, &[xa, xb].concat()),
        vec![ya, yb],
        ArdHyperparams {
            signal_variance: sf,
            length_scales: ls.to_vec(),
            noise_variance: sn,
        },
    )
    .unwrap();
    let (m2, v2) = gp2.predict(&xs).unwrap();
    let cf = (m2 - mu_cf).abs().max((v2 - var_cf).abs());

    report(
        4,
        "GP correctness",
        60,
        t.elapsed(),
        vec![
            (
                worst_grad < 1e-4,
                format!("gradient rel err max {worst_grad:.1e} over 50 instances"),
            ),
            (interp < 1e-5, format!("interpolation rel err {interp:.1e}")),
            (cf < 1e-10, format!("2-point closed form dev {cf:.1e}")),
        ],
    )
}

/// Central difference with one Richardson step.
fn richardson(f: &dyn Fn(&[f64]) -> f64, z: &[f64], i: usize, h: f64) -> f64 {
    let d = |h: f64| {
        let (mut p, mut m) = (z.to_vec(), z.to_vec());
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    };
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

// ---------------------------------------------------------------------------
// 6 (synthetic targets)

/// Asymptotic Kolmogorov survival function.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

fn ks_uniform(values: &[f64], lo: f64, hi: f64) -> f64 {
    let mut u: Vec<f64> = values.iter().map(|v| (v - lo) / (hi - lo)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    ks_p_value(d, u.len())
}

fn sampler_synthetic() -> (Vec<(bool, String)>, Duration) {
    let t = Instant::now();
    let b = ParamBox::default();
    let prior = PriorSpec::UniformBox(b);
    let cfg = TmcmcConfig {
        particles: 625,
        seed: 6,
        ..Default::default()
    };
    let post = tmcmc_sample(&prior, &ConstantLikelihood(0.0), &cfg).unwrap();
    let mut checks = Vec::new();
    let ps: Vec<f64> = (0..4)
        .map(|i| {
            ks_uniform(
                &post.samples.iter().map(|s| s[i]).collect::<Vec<_>>(),
                b.lower[i],
                b.upper[i],
            )
        })
        .collect();
    checks.push((
        post.len() == 5000 && ps.iter().all(|p| *p > 0.01),
        format!("prior recovery m={} KS p {}", post.len(), fmt4(&ps, 3)),
    ));

    // Flat prior times a Gaussian likelihood far from the box edges: the
    // posterior is that Gaussian.
    let mu = [0.3, 0.03, 0.08, 0.25];
    let sd = [0.02, 0.0015, 0.005, 0.008];
    let like = FnLikelihood(move |t: &[f64; 4]| (0..4).map(|i| -0.5 * ((t[i] - mu[i]) / sd[i]).powi(2)).sum::<f64>());
    let cfg = TmcmcConfig {
        seed: 7,
        ..Default::default()
    };
    let post = tmcmc_sample(&prior, &like, &cfg).unwrap();
    let n = post.len() as f64;
    let mut z_mean = [0.0; 4];
    let mut z_sd = [0.0; 4];
    for i in 0..4 {
        let m = post.samples.iter().map(|s| s[i]).sum::<f64>() / n;
        let s = (post.samples.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let ess = post.diagnostics.ess[i];
        z_mean[i] = (m - mu[i]) / (sd[i] / ess.sqrt());
        z_sd[i] = (s - sd[i]) / (sd[i] / (2.0 * ess).sqrt());
    }
    checks.push((
        z_mean.iter().chain(&z_sd).all(|z| z.abs() < 3.0),
        format!("Gaussian target mean z {} sd z {}", fmt4(&z_mean, 2), fmt4(&z_sd, 2)),
    ));
    (checks, t.elapsed())
}

fn fmt4(v: &[f64], digits: usize) -> String {
    format!(
        "[{}]",
        v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(", ")
    )
}

// ---------------------------------------------------------------------------
// 9

fn noise_propagation() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, p) = (40, 25);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let a: f64 = rng.gen_range(0.5..2.0);
            (0..p)
                .map(|j| a * (j as f64 * 0.3).sin() * 100.0 + rng.gen_range(-20.0..20.0) * (1.0 + j as f64))
                .collect()
        })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let basis = fit_fd_basis(&refs, 0.95, 1e-6).unwrap().truncated();
    let k = basis.retained;

    let l = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
    let sigma = &l * l.transpose() + DMatrix::identity(p, p) * 0.5;
    let a = DMatrix::from_diagonal(&DVector::from_vec(basis.preprocess_diagonal()));
    let phi = basis.components.columns(0, k).into_owned();
    let oracle = phi.transpose() * &a * &sigma * &a * &phi;
    let got = propagate_noise(&basis, &MeasurementNoise::Dense(sigma.clone())).unwrap();
    let dense_err = (0..k)
        .map(|c| (got[c] - oracle[(c, c)]).abs() / oracle[(c, c)])
        .fold(0.0, f64::max);

    let d: Vec<f64> = (0..p).map(|j| sigma[(j, j)]).collect();
    let oracle_d = phi.transpose() * &a * DMatrix::from_diagonal(&DVector::from_vec(d.clone())) * &a * &phi;
    let got_d = propagate_noise(&basis, &MeasurementNoise::Diagonal(d)).unwrap();
    let diag_err = (0..k)
        .map(|c| (got_d[c] - oracle_d[(c, c)]).abs() / oracle_d[(c, c)])
        .fold(0.0, f64::max);

    // Orthonormal components with identity preprocessing.
    let z = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
    let ident = Standardizer {
        mean: vec![0.0; p],
        std: vec![1.0; p],
        floored: Vec::new(),
    };
    let ortho = pca_fit(&z, ident, Modality::Fd, 1.0).unwrap();
    let s = 12.0;
    let iid = propagate_noise(&ortho, &MeasurementNoise::Iid(s)).unwrap();
    let iid_err = iid.iter().map(|v| (v - s * s).abs() / (s * s)).fold(0.0, f64::max);

    report(
        9,
        "noise propagation",
        1,
        t.elapsed(),
        vec![
            (dense_err < 1e-12, format!("dense rel err {dense_err:.1e}")),
            (diag_err < 1e-12, format!("diagonal rel err {diag_err:.1e}")),
            (
                iid_err < 1e-13,
                format!(
                    "orthonormal iid |v - s^2|/s^2 {iid_err:.1e} over {} components",
                    iid.len()
                ),
            ),
        ],
    )
}

// ---------------------------------------------------------------------------
// 10

/// Gauss–Legendre nodes and weights on [-1, 1] (Golub–Welsch).
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |i, k| {
        if i + 1 == k || k + 1 == i {
            let m = i.max(k) as f64;
            m / (4.0 * m * m - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let e = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (e.eigenvalues[i], 2.0 * e.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Composite Gauss–Legendre rule on `[lo, hi]`.
fn composite(lo: f64, hi: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let h = (hi - lo) / panels as f64;
    (0..panels)
        .flat_map(|p| {
            let a = lo + p as f64 * h;
            x.iter()
                .zip(&w)
                .map(move |(xi, wi)| (a + 0.5 * h * (xi + 1.0), 0.5 * h * wi))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn kde_prior_checks() -> Outcome {
    let t = Instant::now();
    let b = ParamBox::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    let mut round = 0.0f64;
    for _ in 0..10_000 {
        let i = rng.gen_range(0..4);
        let th = rng.gen_range(b.lower[i]..b.upper[i]);
        if th == b.lower[i] {
            continue;
        }
        let back = logit_inverse(logit_map(th, b.lower[i], b.upper[i]).unwrap(), b.lower[i], b.upper[i]);
        round = round.max((back - th).abs());
    }

    // Posterior-like cloud away from the f_c < f_f boundary.
    let centre = [0.5, 0.5, 0.45, 0.55];
    let cloud: Vec<[f64; 4]> = (0..400)
        .map(|_| {
            let u: [f64; 4] = std::array::from_fn(|i| {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                (centre[i] + 0.12 * n).clamp(0.02, 0.98)
            });
            b.from_unit(&u)
        })
        .collect();
    let kde = fit_kde_prior(&cloud, &b, 400).unwrap();
    let axes: Vec<Vec<(f64, f64)>> = (0..4).map(|i| composite(b.lower[i], b.upper[i], 5, 8)).collect();
    let mut mass = 0.0;
    for &(x0, w0) in &axes[0] {
        for &(x1, w1) in &axes[1] {
            for &(x2, w2) in &axes[2] {
                for &(x3, w3) in &axes[3] {
                    let d = kde.log_density(&[x0, x1, x2, x3]);
                    if d.is_finite() {
                        mass += w0 * w1 * w2 * w3 * d.exp();
                    }
                }
            }
        }
    }

    // Uniform samples: max/min of the density over the cell centres of a
    // 5^4 partition of the box minus a 5% margin.
    let prior = PriorSpec::UniformBox(b);
    let uni: Vec<[f64; 4]> = (0..10_000).map(|_| prior.sample(&mut rng)).collect();
    let kde_u = fit_kde_prior(&uni, &b, 10_000).unwrap();
    let vol: f64 = (0..4).map(|i| b.width(i)).product();
    let probes: Vec<f64> = (0..5).map(|j| 0.05 + 0.9 * (j as f64 + 0.5) / 5.0).collect();
    let mut ratios = Vec::new();
    for i in 0..625 {
        let u: [f64; 4] = std::array::from_fn(|k| probes[(i / 5usize.pow(k as u32)) % 5]);
        let th = b.from_unit(&u);
        if b.admits(&th) {
            ratios.push(kde_u.log_density(&th).exp() * vol);
        }
    }
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(*r), h.max(*r)));

    report(
        10,
        "KDE prior",
        30,
        t.elapsed(),
        vec![
            ((mass - 1.0).abs() <= 0.01, format!("quadrature mass {mass:.4}")),
            (round <= 1e-12, format!("logit round trip {round:.1e}")),
            (
                hi / lo < 3.0,
                format!(
                    "uniform-sample interior density / uniform in [{lo:.3}, {hi:.3}], max/min {:.3}",
                    hi / lo
                ),
            ),
        ],
    )
}

// ---------------------------------------------------------------------------
// Pipeline criteria: 3, 5, 6 (gates), 7, 8

fn pipeline_criteria(synthetic6: (Vec<(bool, String)>, Duration)) -> Vec<Outcome> {
    let cfg = ExperimentConfig::default();
    let mut out = Vec::new();

    let t_data = Instant::now();
    let design = generate_design(&cfg).unwrap();
    let data = simulate_dataset(&cfg, &design).unwrap();
    let data_time = t_data.elapsed();
    println!(
        "  dataset: {} rows, {} excluded, {} train / {} test in {:.1} s",
        data.set.rows.len(),
        data.set.exclusions.len(),
        data.train.len(),
        data.test.len(),
        data_time.as_secs_f64()
    );

    // 3
    let t = Instant::now();
    let rep = reduce(&cfg, &data).unwrap();
    let mut round = [0.0f64; 2];
    for (m, basis) in [&rep.fd_basis, &rep.field_basis].into_iter().enumerate() {
        let full = basis.with_retained(basis.components.ncols()).unwrap();
        for &i in &data.train {
            let row = &data.set.rows[i];
            let feats = match basis.modality {
                Modality::Fd => row.forces.clone(),
                Modality::Field => {
                    let [s11, s12] = basis.field_scaling.unwrap();
                    flatten_field(&row.snapshot, s11, s12).unwrap()
                }
            };
            let back = full
                .reconstruct_features(&full.project_features(&feats).unwrap())
                .unwrap();
            let scale = feats.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = feats.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            round[m] = round[m].max(err);
        }
    }
    let (rf, rd) = (rep.fd_basis.retained_ratio(), rep.field_basis.retained_ratio());
    out.push(report(
        3,
        "PCA contract",
        30,
        t.elapsed(),
        vec![
            (rf >= 0.99, format!("k_FD = {} explains {rf:.5}", rep.fd_basis.retained)),
            (
                rd >= 0.99,
                format!("k_FIELD = {} explains {rd:.5}", rep.field_basis.retained),
            ),
            (
                round[0] < 1e-8 && round[1] < 1e-8,
                format!("full-basis round trip FD {:.1e} field {:.1e}", round[0], round[1]),
            ),
        ],
    ));

    // 5
    let t = Instant::now();
    let surr = train_surrogates(&cfg, &data, &rep).unwrap();
    let train_time = t.elapsed();
    let v = validate_surrogates(&data, &rep, &surr).unwrap().report;
    let mut checks = vec![(
        v.curve_nmae.mean < 1.0,
        format!(
            "curve NMAE mean {:.3}% (p95 {:.3}%)",
            v.curve_nmae.mean, v.curve_nmae.p95
        ),
    )];
    for c in &v.field {
        checks.push((
            c.nmae.mean < 2.0,
            format!("{} NMAE mean {:.3}%", c.component, c.nmae.mean),
        ));
    }
    checks.push((
        true,
        format!(
            "d_f MAE {:.3} mm, training {:.1} s",
            v.failure_displacement_mae,
            train_time.as_secs_f64()
        ),
    ));
    out.push(report(5, "surrogate quality", 300, data_time + t.elapsed(), checks));

    // Sequences on five noisy replicates of the held-out specimen.
    let sigma_df = rep.sigma_df(&cfg, &data);
    let noise = NoiseModels::new(&cfg, &surr, sigma_df).unwrap();
    let repeats = cfg.experiment.repeats;
    let mut fd_first: Vec<Vec<SequenceResult>> = Vec::new();
    let mut dic_first: Vec<Vec<SequenceResult>> = Vec::new();
    let (mut t_fd, mut t_dic) = (Duration::ZERO, Duration::ZERO);
    for r in 0..repeats {
        let obs = synthetic_observation(&cfg, sigma_df, r).unwrap();
        let scores = obs.scores(&surr).unwrap();
        let tm = cfg.tmcmc_for(&format!("tmcmc-{r}"));
        let t = Instant::now();
        fd_first.push(
            run_orders(
                &[Order::FdDic, Order::FdOnly],
                &surr,
                &noise,
                &scores,
                &cfg.param_box,
                &tm,
                cfg.kde_centers,
            )
            .unwrap(),
        );
        t_fd += t.elapsed();
        let t = Instant::now();
        dic_first.push(
            run_orders(
                &[Order::DicFd, Order::DicOnly],
                &surr,
                &noise,
                &scores,
                &cfg.param_box,
                &tm,
                cfg.kde_centers,
            )
            .unwrap(),
        );
        t_dic += t.elapsed();
    }

    // 6: synthetic targets plus the diagnostics gates on every posterior of
    // the default configuration.
    let mut checks = synthetic6.0;
    let all: Vec<(&str, &PosteriorSampleSet)> = fd_first
        .iter()
        .chain(&dic_first)
        .flatten()
        .flat_map(|s| s.stages.iter().map(move |st| (s.order.token(), &st.posterior)))
        .collect();
    let max_rhat = all
        .iter()
        .flat_map(|(_, p)| p.diagnostics.split_rhat)
        .fold(0.0, f64::max);
    let (min_ess_order, min_ess) = all
        .iter()
        .map(|(o, p)| (*o, p.diagnostics.ess.iter().copied().fold(f64::INFINITY, f64::min)))
        .fold(("", f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    checks.push((
        max_rhat < RHAT_GATE,
        format!(
            "split-R̂ max {max_rhat:.4} over {} posteriors of {}x{}",
            all.len(),
            cfg.tmcmc.runs,
            cfg.tmcmc.particles
        ),
    ));
    checks.push((min_ess > 6500.0, format!("ESS min {min_ess:.0} ({min_ess_order})")));
    out.push(report(6, "sampler correctness", 180, synthetic6.1, checks));

    // 7
    let truth = cfg.experiment.truth;
    let hits: Vec<bool> = fd_first
        .iter()
        .map(|s| {
            let p = s[0].last();
            (0..4).all(|i| p.hpd[i][0] <= truth[i] && truth[i] <= p.hpd[i][1])
        })
        .collect();
    let n_hit = hits.iter().filter(|h| **h).count();
    out.push(report(
        7,
        "truth recovery",
        600,
        t_fd,
        vec![(
            n_hit >= 4,
            format!("theta* inside all four FD->DIC HPDs in {n_hit}/{repeats} repeats {hits:?}"),
        )],
    ));

    // 8
    fn pick(v: &[Vec<SequenceResult>], i: usize) -> Vec<&PosteriorSampleSet> {
        v.iter().map(|s| s[i].last()).collect()
    }
    let (fd_dic, fd_only) = (pick(&fd_first, 0), pick(&fd_first, 1));
    let (dic_fd, dic_only) = (pick(&dic_first, 0), pick(&dic_first, 1));
    let cmp = compare_orders(&fd_dic, &dic_fd, &fd_only, &dic_only, cfg.experiment.informativeness).unwrap();
    let med = |sets: &[&PosteriorSampleSet], i: usize| {
        gtn_calib::pipeline::median(&sets.iter().map(|p| p.hpd_widths()[i]).collect::<Vec<_>>())
    };
    let w_seq: Vec<f64> = (0..4).map(|i| med(&fd_dic, i)).collect();
    let w_dic: Vec<f64> = (0..4).map(|i| med(&dic_only, i)).collect();
    let w_fd: Vec<f64> = (0..4).map(|i| med(&fd_only, i)).collect();
    let w_rev: Vec<f64> = (0..4).map(|i| med(&dic_fd, i)).collect();
    let narrower = (0..4).all(|i| w_seq[i] <= w_dic[i]);
    out.push(report(
        8,
        "order sensitivity",
        900,
        t_fd + t_dic,
        vec![
            (
                narrower,
                format!(
                    "median widths FD->DIC {} <= DIC-only {}",
                    fmt4(&w_seq, 4),
                    fmt4(&w_dic, 4)
                ),
            ),
            (
                cmp.ranking.first() == Some(&Modality::Fd),
                format!(
                    "ranking {:?} (HPD products FD {:.2e}, DIC {:.2e})",
                    cmp.ranking, cmp.single_modality[0], cmp.single_modality[1]
                ),
            ),
            (true, format!("FD-only {} DIC->FD {}", fmt4(&w_fd, 4), fmt4(&w_rev, 4))),
        ],
    ));
    out
}

fn main() {
    // Cargo passes libtest flags; only `--list` needs an answer.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // ACCEPTANCE_ONLY=4,10 runs a subset; the pipeline criteria run together.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |ids: &[usize]| only.as_ref().is_none_or(|o| ids.iter().any(|i| o.contains(i)));
    let t = Instant::now();
    let mut all = Vec::new();
    let standalone: [(usize, fn() -> Outcome); 5] = [
        (1, gtn_identities),
        (2, voce_anchor),
        (4, gp_correctness),
        (9, noise_propagation),
        (10, kde_prior_checks),
    ];
    for (id, f) in standalone {
        if wanted(&[id]) {
            all.push(f());
        }
    }
    if wanted(&[3, 5, 6, 7, 8]) {
        let synthetic6 = sampler_synthetic();
        all.extend(pipeline_criteria(synthetic6));
    }
    all.sort_by_key(|o| o.id);

    println!("\nacceptance summary ({:.0} s)", t.elapsed().as_secs_f64());
    for o in &all {
        println!("{}", line(o));
    }
    let failed: Vec<usize> = all.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("all {} criteria PASS", all.len());
    } else {
        println!("FAILED criteria: {failed:?}");
        std::process::exit(1);
    }
}
