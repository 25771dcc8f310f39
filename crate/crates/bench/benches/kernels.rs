use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gtn_calib::bayes::{fit_kde_prior, tmcmc_sample, FnLikelihood, PriorSpec};
use gtn_calib::gp::{log_marginal_likelihood, TrainedGp};
use gtn_calib::gtn::{integrate_point, GtnParams, Material, MaterialPointState};
use gtn_calib::specimen::{simulate_specimen, LoadingProgram, SpecimenModel};
use gtn_calib::{ParamBox, TmcmcConfig};
use gtn_calib_bench::{box_samples, smooth_training_set, typical_hyperparams};

fn material_point(c: &mut Criterion) {
    let m = Material::default();
    let p = GtnParams::new(0.3, 0.02, 0.1, 0.25);
    c.bench_function("gtn/integrate_1000_increments", |b| {
        b.iter(|| {
            let mut s = MaterialPointState::virgin(&m.consts, &p, 0.6).unwrap();
            for _ in 0..1000 {
                s = integrate_point(&s, &m, &p, black_box(5e-5)).unwrap();
            }
            s
        })
    });
}

fn specimen(c: &mut Criterion) {
    let model = SpecimenModel::default();
    let program = LoadingProgram::default();
    let p = GtnParams::new(0.3, 0.019, 0.12, 0.23);
    let mut g = c.benchmark_group("specimen");
    g.sample_size(10);
    g.bench_function("simulate_default", |b| {
        b.iter(|| simulate_specimen(black_box(&p), &model, &program).unwrap())
    });
    g.finish();
}

fn gp(c: &mut Criterion) {
    let h = typical_hyperparams();
    let mut g = c.benchmark_group("gp");
    for n in [100, 300] {
        let (x, y) = smooth_training_set(n, 1);
        g.bench_with_input(BenchmarkId::new("lml_and_gradient", n), &n, |b, _| {
            b.iter(|| log_marginal_likelihood(&x, &y, &h).unwrap())
        });
        let gp = TrainedGp::fit(x.clone(), y.clone(), h.clone()).unwrap();
        let (q, _) = smooth_training_set(2000, 2);
        g.bench_with_input(BenchmarkId::new("predict_2000", n), &n, |b, _| {
            b.iter(|| gp.predict_batch(&q).unwrap())
        });
    }
    g.finish();
}

fn kde(c: &mut Criterion) {
    let b = ParamBox::default();
    let kde = fit_kde_prior(&box_samples(2000, 3), &b, 2000).unwrap();
    let q = box_samples(100, 4);
    c.bench_function("kde/log_density_100_points_2000_centres", |bch| {
        bch.iter(|| q.iter().map(|t| kde.log_density(t)).sum::<f64>())
    });
}

fn tmcmc(c: &mut Criterion) {
    let prior = PriorSpec::UniformBox(ParamBox::default());
    let like =
        FnLikelihood(|t: &[f64; 4]| -0.5 * ((t[0] - 0.3) / 0.02).powi(2) - 0.5 * ((t[1] - 0.02) / 0.002).powi(2));
    let cfg = TmcmcConfig {
        particles: 500,
        runs: 2,
        seed: 1,
        ..Default::default()
    };
    let mut g = c.benchmark_group("tmcmc");
    g.sample_size(10);
    g.bench_function("gaussian_2x500", |b| {
        b.iter(|| tmcmc_sample(&prior, &like, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, material_point, specimen, gp, kde, tmcmc);
criterion_main!(benches);
