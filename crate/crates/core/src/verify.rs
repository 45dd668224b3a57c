//! Deterministic invariant suite behind the `verify` command.
//!
//! Every check runs on parameters and probes derived from the experiment
//! seed alone (no training), so the suite is fast and its CSV output is
//! byte-for-byte reproducible.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::datasets::{analytic_eps, Condition, GmmSpec};
use crate::denoiser::{self, init_params, interpolate, Architecture, ParamVector, TrainExample};
use crate::error::Result;
use crate::evaluation;
use crate::guidance::{GuidanceConfig, ModelPair, OracleModels};
use crate::io::{self, Csv};
use crate::linalg::{self, Vec2};
use crate::pipeline::Experiment;
use crate::rng::{standard_normal2, Rng, Stream};
use crate::sampler::{initial_state, make_schedule, ode_sample, Integrator};

/// A guidance probe: state, noise level and token condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub x: Vec2,
    pub sigma: f64,
    pub cond: Condition,
}

/// `n` probes with `x` uniform on `[-8, 8]^2`, `sigma` log-uniform on
/// `[0.01, 10]` and a uniformly chosen token condition of `arch`.
pub fn probes(arch: &Architecture, n: usize, seed: u64) -> Vec<Probe> {
    let stream = Stream::new(seed, "probes");
    (0..n)
        .map(|i| {
            let mut rng = stream.rng(i as u64);
            let x = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
            let sigma = (rng.random_range(0.01f64.ln()..10f64.ln())).exp();
            let cond = Condition::token(
                rng.random_range(0..arch.n_concepts as u32),
                rng.random_range(0..arch.n_attributes as u32),
            );
            Probe { x, sigma, cond }
        })
        .collect()
}

/// `theta` adds uniform jitter to a fresh init so no coordinate is trivially
/// zero; `theta_prime` moves every coordinate of `theta` by a further
/// `shift`-sized perturbation, standing in for a fine-tune.
pub fn random_pair(arch: &Architecture, seed: u64, shift: f64) -> Result<ModelPair> {
    let theta = jittered(&init_params(arch, seed)?, seed, "verify-theta", 0.1)?;
    let theta_prime = jittered(&theta, seed, "verify-theta-prime", shift)?;
    ModelPair::new(theta, theta_prime)
}

fn jittered(p: &ParamVector, seed: u64, name: &str, amount: f64) -> Result<ParamVector> {
    let mut rng = Stream::new(seed, name).rng(0);
    let values = p.values().iter().map(|v| v + amount * rng.random_range(-1.0..1.0)).collect();
    ParamVector::from_values(p.shape().clone(), values)
}

/// Denoising batch with states on `[-3, 3]^2`, one null condition in three.
pub fn random_batch(arch: &Architecture, n: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = Stream::new(seed, "verify-batch").rng(0);
    (0..n)
        .map(|i| TrainExample {
            x: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            cond: if i % 3 == 0 {
                Condition::Null
            } else {
                Condition::token(
                    rng.random_range(0..arch.n_concepts as u32),
                    rng.random_range(0..arch.n_attributes as u32),
                )
            },
            sigma: rng.random_range(0.05f64..5.0),
            noise: standard_normal2(&mut rng),
        })
        .collect()
}

/// Outcome of one invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub probes: usize,
    pub statistic: f64,
    pub threshold: f64,
    /// How `statistic` must compare with `threshold`: `<`, `<=`, `>` or `==`.
    pub relation: &'static str,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        let (s, t) = (self.statistic, self.threshold);
        match self.relation {
            "<" => s < t,
            "<=" => s <= t,
            ">" => s > t,
            "==" => s == t,
            _ => false,
        }
    }
}

/// Largest coordinate difference between two vectors.
pub fn max_abs_diff(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

pub const N_PROBES: usize = 1000;

/// Number of probes at which PG(ω=1) and CFG differ in any bit.
pub fn omega_one_mismatches(pair: &ModelPair, probes: &[Probe], lambda: f64) -> Result<usize> {
    let pg = pair.guided(GuidanceConfig::pg(lambda, 1.0))?;
    let cfg = pair.guided(GuidanceConfig::cfg(lambda))?;
    let mut bad = 0;
    for p in probes {
        let a = pg.eps(p.x, p.sigma, &p.cond)?;
        let b = cfg.eps(p.x, p.sigma, &p.cond)?;
        if a[0].to_bits() != b[0].to_bits() || a[1].to_bits() != b[1].to_bits() {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Largest deviation of any method at λ=1 from the fine-tuned conditional.
pub fn lambda_one_deviation(pair: &ModelPair, probes: &[Probe]) -> Result<f64> {
    let models = [
        pair.guided(GuidanceConfig::cfg(1.0))?,
        pair.guided(GuidanceConfig::ag(1.0))?,
        pair.guided(GuidanceConfig::pg(1.0, 0.0))?,
        pair.guided(GuidanceConfig::pg(1.0, 0.5))?,
    ];
    let mut worst: f64 = 0.0;
    for p in probes {
        let want = pair.finetuned().forward(p.x, p.sigma, &p.cond)?;
        for m in &models {
            worst = worst.max(max_abs_diff(m.eps(p.x, p.sigma, &p.cond)?, want));
        }
    }
    Ok(worst)
}

/// Largest deviation of PG-ω from `ω·CFG + (1-ω)·PG₀` over the probes,
/// cycling ω through a fixed interior grid.
pub fn output_interpolation_deviation(pair: &ModelPair, probes: &[Probe], lambda: f64) -> Result<f64> {
    let cfg = pair.guided(GuidanceConfig::cfg(lambda))?;
    let pg0 = pair.guided(GuidanceConfig::pg(lambda, 0.0))?;
    let omegas = [0.1, 0.25, 0.5, 0.75, 0.9];
    let models = omegas
        .iter()
        .map(|&w| pair.guided(GuidanceConfig::pg(lambda, w)))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for (i, p) in probes.iter().enumerate() {
        let k = i % omegas.len();
        let w = omegas[k];
        let got = models[k].eps(p.x, p.sigma, &p.cond)?;
        let a = cfg.eps(p.x, p.sigma, &p.cond)?;
        let b = pg0.eps(p.x, p.sigma, &p.cond)?;
        let want = [w * a[0] + (1.0 - w) * b[0], w * a[1] + (1.0 - w) * b[1]];
        worst = worst.max(max_abs_diff(got, want));
    }
    Ok(worst)
}

/// Worst finite-difference relative error over `draws` random parameter and
/// batch draws (batch of 4, step 1e-5).
pub fn gradient_error(arch: &Architecture, draws: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for d in 0..draws as u64 {
        let p = jittered(&init_params(arch, seed + d)?, seed + d, "verify-grad", 0.1)?;
        let batch = random_batch(arch, 4, seed + d);
        worst = worst.max(denoiser::max_fd_rel_error(&p, &batch, 1e-5)?);
    }
    Ok(worst)
}

fn cache_mismatches(pair: &ModelPair, probes: &[Probe], lambda: f64) -> Result<usize> {
    let mut bad = 0;
    for (i, p) in probes.iter().enumerate() {
        let g = GuidanceConfig::pg(lambda, (i % 11) as f64 / 10.0);
        let a = pair.guided(g)?.eps(p.x, p.sigma, &p.cond)?;
        let b = pair.guided_uncached(g)?.eps(p.x, p.sigma, &p.cond)?;
        if a != b {
            bad += 1;
        }
    }
    Ok(bad)
}

fn interpolation_asymmetry(pair: &ModelPair) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..=10 {
        let w = k as f64 / 10.0;
        let a = interpolate(pair.pretrained(), pair.finetuned(), w)?;
        let b = interpolate(pair.finetuned(), pair.pretrained(), 1.0 - w)?;
        for (x, y) in a.values().iter().zip(b.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

fn oracle_probes(spec: &GmmSpec, n: usize, seed: u64) -> Vec<(Vec2, f64)> {
    let lo = spec.components().iter().map(|c| c.mean[0].min(c.mean[1])).fold(f64::INFINITY, f64::min) - 3.0;
    let hi = spec.components().iter().map(|c| c.mean[0].max(c.mean[1])).fold(f64::NEG_INFINITY, f64::max) + 3.0;
    let mut rng = Stream::new(seed, "verify-oracle").rng(0);
    (0..n)
        .map(|_| {
            let x = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
            (x, rng.random_range(0.2f64..3.0))
        })
        .collect()
}

/// Worst gap between the null oracle and the posterior-weighted token oracles.
fn bayes_gap(spec: &GmmSpec, points: &[(Vec2, f64)]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &(x, sigma) in points {
        let mut mix = [0.0, 0.0];
        for (c, w) in spec.condition_posterior(x, sigma)? {
            mix = linalg::add(mix, linalg::scale(analytic_eps(spec, x, sigma, &c)?, w));
        }
        worst = worst.max(linalg::norm(linalg::sub(mix, analytic_eps(spec, x, sigma, &Condition::Null)?)));
    }
    Ok(worst)
}

/// Worst relative error of the oracle against `-sigma` times a central
/// difference of the exact log-density (denominator floored at 1e-3).
fn oracle_fd_error(spec: &GmmSpec, points: &[(Vec2, f64)]) -> Result<f64> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(x, sigma) in points {
        for cond in [Condition::Null, spec.components()[0].condition] {
            let mut g = [0.0; 2];
            for i in 0..2 {
                let (mut xp, mut xm) = (x, x);
                xp[i] += h;
                xm[i] -= h;
                g[i] = (spec.log_density(xp, sigma, &cond)? - spec.log_density(xm, sigma, &cond)?) / (2.0 * h);
            }
            let fd = linalg::scale(g, -sigma);
            let e = analytic_eps(spec, x, sigma, &cond)?;
            worst = worst.max(linalg::norm(linalg::sub(e, fd)) / linalg::norm(fd).max(1e-3));
        }
    }
    Ok(worst)
}

/// Everything `verify` produces.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub invariants_csv: String,
    pub guided_csv: String,
    pub oracle_samples_csv: String,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_atomic(&dir.join("invariants.csv"), self.invariants_csv.as_bytes())?;
        io::write_atomic(&dir.join("guided_probes.csv"), self.guided_csv.as_bytes())?;
        io::write_atomic(&dir.join("oracle_samples.csv"), self.oracle_samples_csv.as_bytes())
    }
}

pub fn run(config: &ExperimentConfig) -> Result<VerifyReport> {
    let exp = Experiment::new(config.clone())?;
    let seed = config.seed;
    let arch = config.architecture();
    let linear = Architecture::linear(arch.n_concepts, arch.n_attributes);
    let lambda = config.guidance.cfg_lambda;
    let pair = random_pair(&arch, seed, 0.05)?;
    let linear_pair = random_pair(&linear, seed, 0.05)?;
    let ps = probes(&arch, N_PROBES, seed);

    let mut checks = Vec::new();
    let mut add = |name, probes, statistic, threshold, relation| {
        checks.push(CheckResult {
            name,
            probes,
            statistic,
            threshold,
            relation,
        })
    };
    add("omega_one_equals_cfg_bitwise", N_PROBES, omega_one_mismatches(&pair, &ps, lambda)? as f64, 0.0, "==");
    add("lambda_one_reduces_to_finetuned", N_PROBES, lambda_one_deviation(&pair, &ps)?, 1e-15, "<=");
    add(
        "linear_arch_output_interpolation",
        N_PROBES,
        output_interpolation_deviation(&linear_pair, &ps, lambda)?,
        1e-12,
        "<=",
    );
    add(
        "nonlinear_arch_breaks_output_interpolation",
        N_PROBES,
        output_interpolation_deviation(&pair, &ps, lambda)?,
        1e-6,
        ">",
    );
    add("gradient_matches_finite_differences", 20, gradient_error(&arch, 20, seed)?, 1e-4, "<");
    add("omega_cache_transparent", 200, cache_mismatches(&pair, &ps[..200], lambda)? as f64, 0.0, "==");
    add("interpolation_symmetric", 11, interpolation_asymmetry(&pair)?, 1e-15, "<=");
    let pts = oracle_probes(&exp.pretrain_spec, 100, seed);
    add("oracle_null_is_posterior_mixture", 100, bayes_gap(&exp.pretrain_spec, &pts)?, 1e-10, "<=");
    add("oracle_matches_log_density_gradient", 100, oracle_fd_error(&exp.pretrain_spec, &pts)?, 1e-5, "<");

    let schedule = make_schedule(20, config.sampling.sigma_max, config.sampling.sigma_min, config.sampling.rho)?;
    let zero = |_: Vec2, _: f64, _: &Condition| Ok([0.0, 0.0]);
    let run = ode_sample(&zero, &schedule, Integrator::Euler, 100, &exp.requested(), seed, false)?;
    let moved = run
        .samples
        .iter()
        .enumerate()
        .filter(|(i, x)| **x != initial_state(seed, *i, schedule.sigma_max()))
        .count();
    add("zero_field_keeps_initial_noise", 100, moved as f64, 0.0, "==");

    let oracle = OracleModels::new(&exp.pretrain_spec, &exp.target_spec)?;
    let bound = oracle.bind(GuidanceConfig::pg(lambda, 0.0));
    let s1 = ode_sample(&bound, &schedule, Integrator::Euler, 200, &exp.requested(), seed, false)?;
    let s2 = ode_sample(&bound, &schedule, Integrator::Euler, 200, &exp.requested(), seed, false)?;
    add("sampler_deterministic", 200, (s1.samples != s2.samples) as u8 as f64, 0.0, "==");
    add(
        "energy_distance_of_identical_sets",
        200,
        evaluation::energy_distance(&s1.samples, &s1.samples)?,
        1e-12,
        "<=",
    );

    let mut inv = Csv::with_header(&["check", "probes", "statistic", "threshold", "relation", "passed"]);
    for c in &checks {
        inv.row([
            c.name.to_string(),
            c.probes.to_string(),
            format!("{:e}", c.statistic),
            format!("{:e}", c.threshold),
            c.relation.to_string(),
            c.passed().to_string(),
        ]);
    }

    let mut guided = Csv::with_header(&[
        "probe", "x0", "x1", "sigma", "concept", "attribute", "method", "lambda", "omega", "eps0", "eps1",
    ]);
    let configs = [
        GuidanceConfig::cfg(lambda),
        GuidanceConfig::ag(config.guidance.ag_lambda),
        GuidanceConfig::pg(lambda, 0.0),
        GuidanceConfig::pg(lambda, 0.5),
    ];
    for (i, p) in ps.iter().take(25).enumerate() {
        for g in &configs {
            let e = pair.guided_eps(*g, p.x, p.sigma, &p.cond)?;
            guided.row([
                i.to_string(),
                p.x[0].to_string(),
                p.x[1].to_string(),
                p.sigma.to_string(),
                p.cond.concept().unwrap_or_default().to_string(),
                p.cond.attribute().unwrap_or_default().to_string(),
                g.method.to_string(),
                g.lambda.to_string(),
                g.omega.to_string(),
                e[0].to_string(),
                e[1].to_string(),
            ]);
        }
    }

    let tag = crate::sampler::SampleTag {
        cond: exp.requested(),
        guidance: Some(GuidanceConfig::pg(lambda, 0.0)),
        seed,
    };
    Ok(VerifyReport {
        checks,
        invariants_csv: inv.into_string(),
        guided_csv: guided.into_string(),
        oracle_samples_csv: crate::sampler::samples_csv(&s1.samples, &tag),
    })
}
