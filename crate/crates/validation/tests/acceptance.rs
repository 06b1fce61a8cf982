use std::hint::black_box;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nmix::config::{Engine, ExperimentConfig};
use nmix::dataset::DatasetFile;
use nmix::experiment::{bias_experiment, median, spearman, BiasModel};
use nmix::fit_bayes::posterior_n_for_row;
use nmix::likelihood::{ln_poisson, truncation_point};
use nmix::{
    fit_laplace, fit_ml, posterior_n, row_loglik_bruteforce, row_loglik_recursive, sample_posterior, simulate,
    summarize_fit, FitOptions, FitResult, MixtureFamily, PriorSpec, RowLikelihoodInput, SimConfig, TruncationPolicy,
};
use nmix_validation::mallard;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use statrs::distribution::{Discrete, NegativeBinomial, Poisson as PoissonPmf};

const NB: MixtureFamily = MixtureFamily::NegBinomialBinomial;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn draw_abundance(rng: &mut ChaCha8Rng, lambda: f64, theta: Option<f64>) -> u64 {
    let rate = match theta {
        None => lambda,
        Some(t) => Gamma::new(t, lambda / t).unwrap().sample(rng),
    };
    if rate <= 0.0 {
        0
    } else {
        Poisson::new(rate).unwrap().sample(rng) as u64
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let trunc = TruncationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 1200;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let lambda = rng.random_range(0.1..=100.0);
        let j = rng.random_range(1..=3);
        let p: Vec<f64> = (0..j).map(|_| rng.random_range(0.01..=0.99)).collect();
        let theta = rng.random_bool(0.5).then(|| rng.random_range(0.5..=10.0));
        let n = draw_abundance(&mut rng, lambda, theta);
        let y: Vec<u32> = p
            .iter()
            .map(|&pj| Binomial::new(n, pj).unwrap().sample(&mut rng) as u32)
            .collect();
        let input = RowLikelihoodInput::new(&y, &p, lambda, theta).unwrap();
        let rec = row_loglik_recursive(&input, &trunc).unwrap();
        let brute = row_loglik_bruteforce(&input, input.y_max() + 10_000).unwrap();
        worst = worst.max((rec - brute).abs() / brute.abs().max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && secs < 10.0,
        format!("{cases} random rows, worst scaled difference {worst:.2e}, {secs:.2} s"),
    )
}

fn analytic_identities() -> Outcome {
    let trunc = TruncationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut pois, mut nb, mut zero) = (0.0f64, 0.0f64, 0.0f64);
    let mut sum_form_gap = 0.0f64;
    for _ in 0..500 {
        let lambda = rng.random_range(0.1..=100.0);
        let p = rng.random_range(0.01..=0.99);
        let theta = rng.random_range(0.5..=10.0);

        let y = Poisson::new(lambda * p).unwrap().sample(&mut rng) as u32;
        let rec = row_loglik_recursive(&RowLikelihoodInput::new(&[y], &[p], lambda, None).unwrap(), &trunc).unwrap();
        let exact = PoissonPmf::new(lambda * p).unwrap().ln_pmf(u64::from(y));
        pois = pois.max((rec - exact).abs());

        let y = draw_abundance(&mut rng, lambda * p, Some(theta)) as u32;
        let rec = row_loglik_recursive(&RowLikelihoodInput::new(&[y], &[p], lambda, Some(theta)).unwrap(), &trunc).unwrap();
        let mu = lambda * p;
        let exact = NegativeBinomial::new(theta, theta / (theta + mu)).unwrap().ln_pmf(u64::from(y));
        nb = nb.max((rec - exact).abs());

        let j = rng.random_range(1..=3);
        let ps: Vec<f64> = (0..j).map(|_| rng.random_range(0.01..=0.99)).collect();
        let ys = vec![0; j];
        let rec = row_loglik_recursive(&RowLikelihoodInput::new(&ys, &ps, lambda, None).unwrap(), &trunc).unwrap();
        // Σ_N Pois(N; λ) Π_j (1 - p_j)^N = exp(-λ (1 - Π_j (1 - p_j))), which is
        // exp(-λ p) for one survey.
        let exact = -lambda * (1.0 - ps.iter().map(|p| 1.0 - p).product::<f64>());
        zero = zero.max((rec - exact).abs() / exact.abs().max(1.0));
        if j > 1 {
            let sum_form = -lambda * ps.iter().sum::<f64>();
            sum_form_gap = sum_form_gap.max((rec - sum_form).abs() / sum_form.abs());
        }
    }
    // A log difference d is a relative probability difference of about d.
    outcome(
        pois < 1e-12 && nb < 1e-10 && zero < 1e-12,
        format!(
            "worst: Poisson thinning {pois:.1e}, NB thinning {nb:.1e}, all-zero rows {zero:.1e} \
             (the -λΣp form is off by up to {sum_form_gap:.2} relative when J > 1)"
        ),
    )
}

/// Direct summation of the marginal in linear space.
fn naive_linear_sum(y: &[u32], p: &[f64], lambda: f64, n_max: u32) -> f64 {
    let factorial = |n: u32| (1..=n).map(f64::from).product::<f64>();
    let y_max = *y.iter().max().unwrap();
    (y_max..=n_max)
        .map(|n| {
            let prior = (-lambda).exp() * lambda.powi(n as i32) / factorial(n);
            let obs: f64 = y
                .iter()
                .zip(p)
                .map(|(&yj, &pj)| {
                    factorial(n) / (factorial(yj) * factorial(n - yj)) * pj.powi(yj as i32) * (1.0 - pj).powi((n - yj) as i32)
                })
                .product();
            prior * obs
        })
        .sum()
}

fn recursion_speed_and_stability() -> Outcome {
    let trunc = TruncationPolicy::default();
    let y = [25, 24, 27];
    let p = [0.5; 3];
    let input = RowLikelihoodInput::new(&y, &p, 50.0, None).unwrap();
    let n_max = truncation_point(&input, &trunc).unwrap();
    let evals = 100_000;

    let start = Instant::now();
    let mut acc = 0.0;
    for _ in 0..evals {
        acc += row_loglik_recursive(black_box(&input), &trunc).unwrap();
    }
    let rec_time = start.elapsed().as_secs_f64();
    let rec_value = acc / evals as f64;

    let start = Instant::now();
    let mut acc = 0.0;
    for _ in 0..evals {
        acc += row_loglik_bruteforce(black_box(&input), n_max).unwrap();
    }
    let brute_time = start.elapsed().as_secs_f64();
    let brute_value = acc / evals as f64;
    let speedup = brute_time / rec_time;
    let same = (rec_value - brute_value).abs() < 1e-10 * brute_value.abs();

    let mut stable = true;
    let mut notes = Vec::new();
    for (yy, pp, lambda) in [
        (vec![1000u32], vec![0.5], 2000.0),
        (vec![1000, 980, 1010], vec![0.9, 0.9, 0.9], 1100.0),
    ] {
        let big = RowLikelihoodInput::new(&yy, &pp, lambda, None).unwrap();
        let rec = row_loglik_recursive(&big, &trunc).unwrap();
        let cap = truncation_point(&big, &trunc).unwrap();
        let brute = row_loglik_bruteforce(&big, cap).unwrap();
        let naive = naive_linear_sum(&yy, &pp, lambda, cap);
        let ok = rec.is_finite() && (rec - brute).abs() < 1e-10 * brute.abs() && !(naive.is_finite() && naive > 0.0);
        stable &= ok;
        notes.push(format!("y max {}: recursion {rec:.3}, naive sum {naive}", yy.iter().max().unwrap()));
    }
    outcome(
        speedup >= 3.0 && same && stable,
        format!(
            "recursion {:.2} us vs brute force {:.2} us at N_max {n_max} ({speedup:.1}x); {}",
            rec_time / evals as f64 * 1e6,
            brute_time / evals as f64 * 1e6,
            notes.join("; ")
        ),
    )
}

fn covers_truth(fit: &FitResult, truth: &[f64]) -> (bool, Vec<String>) {
    let se = fit.standard_errors().expect("covariance at the optimum");
    let mut misses = Vec::new();
    for (i, (est, t)) in fit.estimates.to_stacked().iter().zip(truth).enumerate() {
        if (est - t).abs() > 1.959_963_984_540_054 * se[i] {
            misses.push(format!("{} {est:.3}±{:.3} vs {t:.3}", fit.names[i], 1.96 * se[i]));
        }
    }
    (misses.is_empty(), misses)
}

fn example_one_recovery() -> Outcome {
    let sim = simulate(&SimConfig::default()).unwrap();
    let truth = [2.0, 2.0, -3.0, 1.0, 1.0, -2.0, 1.0, 3.0f64.ln()];
    let start = Instant::now();
    let ml = fit_ml(&sim.table_avg, &sim.designs_avg, NB, &FitOptions::default()).unwrap();
    let ml_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let bayes = fit_laplace(&sim.table_avg, &sim.designs_avg, NB, &PriorSpec::default(), &FitOptions::default()).unwrap();
    let bayes_secs = start.elapsed().as_secs_f64();
    let (ml_ok, ml_miss) = covers_truth(&ml, &truth);
    let (b_ok, b_miss) = covers_truth(&bayes, &truth);
    let mut detail = format!("ml {ml_secs:.2} s, laplace {bayes_secs:.2} s");
    for (label, miss) in [("ml", &ml_miss), ("laplace", &b_miss)] {
        if !miss.is_empty() {
            detail.push_str(&format!("; {label} misses {}", miss.join(", ")));
        }
    }
    outcome(
        ml_ok && b_ok && ml.converged && bayes.converged && ml_secs < 60.0 && bayes_secs < 60.0,
        detail,
    )
}

fn mallard_reproduction() -> Outcome {
    let path = mallard::data_path();
    let Ok(file) = DatasetFile::read(&path) else {
        return outcome(false, format!("mallard data not found at {} (see data/DATA.md)", path.display()));
    };

    let ml_cfg = ExperimentConfig {
        family: NB,
        engine: Engine::Ml,
        abundance: vec!["length".into(), "elev".into(), "forest".into()],
        detection: vec!["ivel".into(), "date".into(), "date.sq".into()],
        squares: vec![("date".into(), "date.sq".into())],
        ..ExperimentConfig::default()
    };
    let built = nmix::experiment::prepare_dataset(&ml_cfg, file.clone()).unwrap();
    let ml = fit_ml(&built.table, &built.designs, NB, &FitOptions::default()).unwrap();
    let ml_est = ml.estimates.to_stacked();
    let ml_se = ml.standard_errors().unwrap();
    let (ref_est, ref_se) = (mallard::ML_ESTIMATES, mallard::ML_STANDARD_ERRORS);
    let est_gap = ml_est.iter().zip(ref_est).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let se_gap = ml_se.iter().zip(ref_se).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let bayes_cfg = ExperimentConfig {
        family: NB,
        abundance: vec!["length".into(), "elev".into(), "forest".into()],
        detection: vec!["mean.ivel".into(), "mean.date".into(), "mean.date.sq".into()],
        site_means: vec![("ivel".into(), "mean.ivel".into()), ("date".into(), "mean.date".into())],
        squares: vec![("mean.date".into(), "mean.date.sq".into())],
        ..ExperimentConfig::default()
    };
    let built_avg = nmix::experiment::prepare_dataset(&bayes_cfg, file).unwrap();
    let bayes = fit_laplace(
        &built_avg.table,
        &built_avg.designs,
        NB,
        &PriorSpec::default(),
        &FitOptions::default(),
    )
    .unwrap();
    let ref_post = mallard::LAPLACE_ABUNDANCE;
    let post_gap = bayes.estimates.beta.iter().zip(ref_post).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let significant = |fit: &FitResult| -> Vec<bool> {
        summarize_fit(fit)
            .unwrap()
            .rows
            .iter()
            .take(8)
            .map(|r| {
                let (lo, hi) = r.interval95();
                lo > 0.0 || hi < 0.0
            })
            .collect()
    };
    let same_conclusion = significant(&ml) == significant(&bayes);
    outcome(
        est_gap < 0.05 && se_gap < 0.05 && post_gap < 0.1 && same_conclusion,
        format!(
            "ml max |estimate gap| {est_gap:.3}, max |SE gap| {se_gap:.3}; laplace max |abundance gap| {post_gap:.3}; \
             same significant set: {same_conclusion}"
        ),
    )
}

fn bias_property() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        runs: 50,
        seed: 12345,
        ..ExperimentConfig::default()
    };
    let records = bias_experiment(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed_runs = records.iter().filter(|r| r.failed).count() / 8;
    let mut pass = secs < 1800.0;
    let mut parts = Vec::new();
    for param in ["a0", "a1", "a4"] {
        let stats = |model: BiasModel| {
            let rows: Vec<_> = records
                .iter()
                .filter(|r| r.model == model && r.parameter == param && !r.failed)
                .collect();
            let mut strong: Vec<f64> = rows.iter().filter(|r| r.alpha4.abs() > 2.0).map(|r| r.bias.abs()).collect();
            let mut weak: Vec<f64> = rows.iter().filter(|r| r.alpha4.abs() < 1.0).map(|r| r.bias.abs()).collect();
            let a4: Vec<f64> = rows.iter().map(|r| r.alpha4).collect();
            let bias: Vec<f64> = rows.iter().map(|r| r.bias).collect();
            let ratio = median(&mut strong).unwrap_or(f64::NAN) / median(&mut weak).unwrap_or(f64::NAN);
            (ratio, spearman(&a4, &bias))
        };
        let (avg_ratio, avg_rho) = stats(BiasModel::Averaged);
        let (true_ratio, true_rho) = stats(BiasModel::True);
        pass &= avg_ratio >= 2.0 && true_rho.abs() < 0.3;
        parts.push(format!(
            "{param}: averaged {avg_ratio:.1}x (rho {avg_rho:+.2}), true {true_ratio:.1}x (rho {true_rho:+.2})"
        ));
    }
    outcome(
        pass,
        format!("{}; {failed_runs} failed fits; {secs:.1} s", parts.join("; ")),
    )
}

fn flat_prior_equivalence() -> Outcome {
    let sim = simulate(&SimConfig::default()).unwrap();
    let flat = PriorSpec {
        normal_precision: 1e-8,
        ..PriorSpec::default()
    };
    let ml = fit_ml(&sim.table_avg, &sim.designs_avg, NB, &FitOptions::default()).unwrap();
    let bayes = fit_laplace(&sim.table_avg, &sim.designs_avg, NB, &flat, &FitOptions::default()).unwrap();
    let gap = ml
        .estimates
        .to_stacked()
        .iter()
        .zip(bayes.estimates.to_stacked())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(gap < 1e-3, format!("max coordinate gap {gap:.2e}"))
}

fn posterior_n_properties() -> Outcome {
    let sim = simulate(&SimConfig::default()).unwrap();
    let fit = fit_laplace(&sim.table_avg, &sim.designs_avg, NB, &PriorSpec::default(), &FitOptions::default()).unwrap();
    let samples = sample_posterior(&fit, 500, 12345).unwrap();
    let mut sum_gap = 0.0f64;
    for row in (0..sim.table_avg.n_rows()).step_by(20) {
        let (_, probs) = posterior_n_for_row(&fit, &samples, &sim.table_avg, &sim.designs_avg, row, None).unwrap();
        sum_gap = sum_gap.max((probs.iter().sum::<f64>() - 1.0).abs());
    }

    let exact = posterior_n(&[4, 4, 4], &[vec![1.0; 3]], &[6.0], MixtureFamily::PoissonBinomial, None, 80).unwrap();
    let near = posterior_n(&[4, 4, 4], &[vec![1.0 - 1e-9; 3]], &[6.0], NB, Some(&[2.0]), 80).unwrap();
    let point_mass = exact[0] == 1.0 && near[0] > 1.0 - 1e-6;

    let grid = 60;
    let post = posterior_n(&[0], &[vec![0.5]], &[2.0], MixtureFamily::PoissonBinomial, None, grid).unwrap();
    let direct: Vec<f64> = (0..=grid).map(|n| (ln_poisson(n, 2.0) + f64::from(n) * 0.5f64.ln()).exp()).collect();
    let z: f64 = direct.iter().sum();
    let conj = post
        .iter()
        .zip(&direct)
        .enumerate()
        .map(|(n, (a, d))| (a - d / z).abs().max((a - ln_poisson(n as u32, 1.0).exp()).abs()))
        .fold(0.0, f64::max);
    outcome(
        sum_gap < 1e-12 && point_mass && conj < 1e-10,
        format!(
            "max |sum - 1| {sum_gap:.1e}; mass at max(y): {} (p = 1), {:.9} (p = 1 - 1e-9); conjugacy gap {conj:.1e}",
            exact[0], near[0]
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("recursion matches brute force", oracle_equivalence),
        ("analytic identities", analytic_identities),
        ("recursion speed and stability", recursion_speed_and_stability),
        ("simulated example recovery", example_one_recovery),
        ("mallard reproduction", mallard_reproduction),
        ("detection-averaging bias", bias_property),
        ("flat-prior mode equals MLE", flat_prior_equivalence),
        ("posterior of N", posterior_n_properties),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failures += 1;
        }
        println!(
            "criterion {} ({name}): {} - {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
