//! Deterministic probability-flow ODE sampling.
//!
//! With `sigma(t) = t` the ODE reads `dx/dsigma = eps(x, sigma)`, so an Euler
//! step is `x <- x + (sigma_next - sigma_cur) * eps(x, sigma_cur)`. Samples
//! start from `sigma_max * N(0, I)` drawn from the `"noise"` stream, one
//! substream per sample index.

use std::fmt;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::datasets::Condition;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::io::Csv;
use crate::linalg::{is_finite, Vec2};
use crate::rng::{standard_normal2, Stream};

/// Anything that predicts noise: a guided network pair, an oracle, a closure.
pub trait NoiseModel: Sync {
    fn eps(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2>;

    fn describe(&self) -> String {
        "custom".to_string()
    }
}

impl<F> NoiseModel for F
where
    F: Fn(Vec2, f64, &Condition) -> Result<Vec2> + Sync,
{
    fn eps(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        self(x, sigma, cond)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    levels: Vec<f64>,
}

impl SigmaSchedule {
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 3 {
            return Err(Error::InvalidArgument("a schedule needs at least 2 steps".into()));
        }
        if levels.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("noise levels must be positive and finite".into()));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("noise levels must be strictly decreasing".into()));
        }
        Ok(SigmaSchedule { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.levels[0]
    }

    pub fn sigma_min(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }
}

/// Power schedule `(a + i/n * (b - a))^rho` with `a = sigma_max^(1/rho)`,
/// `b = sigma_min^(1/rho)`; `rho = 1` spaces levels linearly.
pub fn make_schedule(n_steps: usize, sigma_max: f64, sigma_min: f64, rho: f64) -> Result<SigmaSchedule> {
    if n_steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 steps, got {n_steps}")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let a = sigma_max.powf(1.0 / rho);
    let b = sigma_min.powf(1.0 / rho);
    let mut levels: Vec<f64> = (0..=n_steps)
        .map(|i| (a + i as f64 / n_steps as f64 * (b - a)).powf(rho))
        .collect();
    levels[0] = sigma_max;
    levels[n_steps] = sigma_min;
    SigmaSchedule::from_levels(levels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    /// Euler predictor plus trapezoidal corrector; two evaluations per step.
    Heun,
}

fn default_rho() -> f64 {
    7.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub integrator: Integrator,
    pub n_samples: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            sigma_max: 10.0,
            sigma_min: 0.01,
            rho: 7.0,
            integrator: Integrator::Euler,
            n_samples: 2000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::config(format!("{prefix}.steps"), "need at least 2 steps"));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::config(format!("{prefix}.sigma_min"), "must be positive"));
        }
        if !(self.sigma_max > self.sigma_min) || !self.sigma_max.is_finite() {
            return Err(Error::config(format!("{prefix}.sigma_max"), "must exceed sigma_min"));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::config(format!("{prefix}.rho"), "must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::config(format!("{prefix}.n_samples"), "must be at least 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<SigmaSchedule> {
        make_schedule(self.steps, self.sigma_max, self.sigma_min, self.rho)
    }
}

/// The path of one sample, from `sigma_max` down to `sigma_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(f64, Vec2)>,
    pub label: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub samples: Vec<Vec2>,
    /// Present when trajectories were requested.
    pub trajectories: Option<Vec<Trajectory>>,
}

/// Initial state of sample `index`.
pub fn initial_state(seed: u64, index: usize, sigma_max: f64) -> Vec2 {
    let z = standard_normal2(&mut Stream::new(seed, "noise").rng(index as u64));
    [sigma_max * z[0], sigma_max * z[1]]
}

fn integrate<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &SigmaSchedule,
    integrator: Integrator,
    cond: &Condition,
    mut x: Vec2,
    mut path: Option<&mut Vec<(f64, Vec2)>>,
) -> Result<Vec2> {
    let levels = schedule.levels();
    if let Some(p) = path.as_deref_mut() {
        p.push((levels[0], x));
    }
    for step in 0..schedule.steps() {
        let (s, s_next) = (levels[step], levels[step + 1]);
        let h = s_next - s;
        let d = model.eps(x, s, cond)?;
        let mut next = [x[0] + h * d[0], x[1] + h * d[1]];
        if integrator == Integrator::Heun {
            let d2 = model.eps(next, s_next, cond)?;
            next = [x[0] + h * 0.5 * (d[0] + d2[0]), x[1] + h * 0.5 * (d[1] + d2[1])];
        }
        if !is_finite(next) {
            return Err(Error::NonFiniteState {
                step,
                context: format!("{} at sigma {s}", model.describe()),
            });
        }
        x = next;
        if let Some(p) = path.as_deref_mut() {
            p.push((s_next, x));
        }
    }
    Ok(x)
}

fn worker_count(n: usize) -> usize {
    let hw = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    hw.min(n.div_ceil(64)).max(1)
}

/// Integrates `n` samples. Output order follows sample index whatever the
/// thread count.
pub fn ode_sample<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &SigmaSchedule,
    integrator: Integrator,
    n: usize,
    cond: &Condition,
    seed: u64,
    record_trajectories: bool,
) -> Result<SampleRun> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let label = model.describe();
    let run_one = |i: usize| -> Result<(Vec2, Option<Trajectory>)> {
        let x0 = initial_state(seed, i, schedule.sigma_max());
        if record_trajectories {
            let mut states = Vec::with_capacity(schedule.steps() + 1);
            let x = integrate(model, schedule, integrator, cond, x0, Some(&mut states)).map_err(|e| tag(e, i))?;
            let t = Trajectory {
                states,
                label: label.clone(),
                seed,
            };
            Ok((x, Some(t)))
        } else {
            Ok((integrate(model, schedule, integrator, cond, x0, None).map_err(|e| tag(e, i))?, None))
        }
    };

    let workers = worker_count(n);
    let results: Vec<Result<(Vec2, Option<Trajectory>)>> = if workers == 1 {
        (0..n).map(run_one).collect()
    } else {
        let chunk = n.div_ceil(workers);
        thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_one = &run_one;
                    scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(run_one).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sampling worker panicked"))
                .collect()
        })
    };

    let mut samples = Vec::with_capacity(n);
    let mut trajectories = record_trajectories.then(|| Vec::with_capacity(n));
    for r in results {
        let (x, t) = r?;
        samples.push(x);
        if let (Some(ts), Some(t)) = (trajectories.as_mut(), t) {
            ts.push(t);
        }
    }
    Ok(SampleRun { samples, trajectories })
}

fn tag(e: Error, sample: usize) -> Error {
    match e {
        Error::NonFiniteState { step, context } => Error::NonFiniteState {
            step,
            context: format!("sample {sample}, {context}"),
        },
        other => other,
    }
}

/// Guidance columns for sample CSVs; `None` means an unguided or oracle field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTag {
    pub cond: Condition,
    pub guidance: Option<GuidanceConfig>,
    pub seed: u64,
}

impl fmt::Display for SampleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.guidance {
            Some(g) => write!(f, "{} {} seed={}", self.cond, g, self.seed),
            None => write!(f, "{} unguided seed={}", self.cond, self.seed),
        }
    }
}

fn tag_fields(tag: &SampleTag) -> [String; 6] {
    let (concept, attribute) = match tag.cond {
        Condition::Null => ("null".to_string(), "null".to_string()),
        Condition::Token { concept, attribute } => (concept.to_string(), attribute.to_string()),
    };
    let (method, lambda, omega) = match tag.guidance {
        Some(g) => (g.method.to_string(), g.lambda.to_string(), g.omega.to_string()),
        None => ("none".to_string(), "1".to_string(), "".to_string()),
    };
    [concept, attribute, method, lambda, omega, tag.seed.to_string()]
}

pub const SAMPLE_CSV_HEADER: [&str; 9] = ["sample_id", "x0", "x1", "concept", "attribute", "method", "lambda", "omega", "seed"];

pub fn samples_csv(samples: &[Vec2], tag: &SampleTag) -> String {
    let mut csv = Csv::with_header(&SAMPLE_CSV_HEADER);
    let t = tag_fields(tag);
    for (i, x) in samples.iter().enumerate() {
        let mut row = vec![i.to_string(), x[0].to_string(), x[1].to_string()];
        row.extend(t.iter().cloned());
        csv.row(row);
    }
    csv.into_string()
}

pub fn trajectories_csv(trajectories: &[Trajectory]) -> String {
    let mut csv = Csv::with_header(&["sample_id", "step", "sigma", "x0", "x1"]);
    for (i, t) in trajectories.iter().enumerate() {
        for (k, (s, x)) in t.states.iter().enumerate() {
            csv.row([i.to_string(), k.to_string(), s.to_string(), x[0].to_string(), x[1].to_string()]);
        }
    }
    csv.into_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{analytic_eps, Component, GmmSpec};
    use crate::linalg::Mat2;
    use proptest::prelude::*;

    fn gaussian(mean: Vec2, var: f64) -> GmmSpec {
        GmmSpec::new(vec![Component {
            weight: 1.0,
            mean,
            covariance: Mat2::scaled_identity(var),
            condition: Condition::token(0, 0),
        }])
        .unwrap()
    }

    #[test]
    fn schedule_endpoints_and_reference_values() {
        let s = make_schedule(2, 10.0, 0.01, 1.0).unwrap();
        assert_eq!(s.levels(), &[10.0, 5.005, 0.01]);
        // Frozen from scripts/oracles.py.
        let s = make_schedule(50, 10.0, 0.01, 7.0).unwrap();
        assert_eq!(s.levels().len(), 51);
        assert_eq!(s.sigma_max(), 10.0);
        assert_eq!(s.sigma_min(), 0.01);
        for (i, v) in [(1, 9.154228939441461), (25, 0.7177132302454148), (49, 0.012607415900376194)] {
            assert!((s.levels()[i] - v).abs() < 1e-12 * v, "level {i}");
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(1, 10.0, 0.01, 7.0).is_err());
        assert!(make_schedule(10, 0.01, 10.0, 7.0).is_err());
        assert!(make_schedule(10, 10.0, 0.0, 7.0).is_err());
        assert!(SigmaSchedule::from_levels(vec![3.0, 3.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_strictly_decreasing(n in 2usize..400, rho in 0.5f64..12.0, lo in 1e-3f64..0.5, span in 1.5f64..200.0) {
            let s = make_schedule(n, lo * span, lo, rho).unwrap();
            prop_assert!(s.levels().windows(2).all(|w| w[1] < w[0]));
            prop_assert_eq!(s.steps(), n);
        }
    }

    #[test]
    fn zero_field_returns_initial_noise() {
        let zero = |_x: Vec2, _s: f64, _c: &Condition| -> Result<Vec2> { Ok([0.0, 0.0]) };
        let sched = make_schedule(10, 10.0, 0.01, 7.0).unwrap();
        let run = ode_sample(&zero, &sched, Integrator::Euler, 100, &Condition::token(0, 0), 5, true).unwrap();
        for (i, x) in run.samples.iter().enumerate() {
            assert_eq!(*x, initial_state(5, i, 10.0));
        }
        let ts = run.trajectories.unwrap();
        assert_eq!(ts.len(), 100);
        assert_eq!(ts[0].states.len(), 11);
        assert_eq!(ts[0].states[0].0, 10.0);
    }

    #[test]
    fn deterministic_and_order_stable() {
        let spec = gaussian([1.0, -2.0], 0.5);
        let f = |x: Vec2, s: f64, c: &Condition| analytic_eps(&spec, x, s, c);
        let sched = make_schedule(20, 10.0, 0.01, 7.0).unwrap();
        let c = Condition::token(0, 0);
        let a = ode_sample(&f, &sched, Integrator::Heun, 300, &c, 9, false).unwrap();
        let b = ode_sample(&f, &sched, Integrator::Heun, 300, &c, 9, false).unwrap();
        assert_eq!(a, b);
        let head = ode_sample(&f, &sched, Integrator::Heun, 7, &c, 9, false).unwrap();
        assert_eq!(&a.samples[..7], &head.samples[..]);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let blow = |_x: Vec2, s: f64, _c: &Condition| -> Result<Vec2> { Ok(if s < 2.0 { [f64::NAN, 0.0] } else { [0.0, 0.0] }) };
        let sched = make_schedule(10, 10.0, 0.01, 1.0).unwrap();
        let err = ode_sample(&blow, &sched, Integrator::Euler, 3, &Condition::token(0, 0), 1, false).unwrap_err();
        match err {
            Error::NonFiniteState { step, context } => {
                assert_eq!(step, 9);
                assert!(context.starts_with("sample 0"));
            }
            other => panic!("{other}"),
        }
    }

    fn terminal_error(spec: &GmmSpec, n: usize, integrator: Integrator, seed: u64, count: usize) -> f64 {
        let f = |x: Vec2, s: f64, c: &Condition| analytic_eps(spec, x, s, c);
        let c = Condition::token(0, 0);
        let fine = ode_sample(&f, &make_schedule(n * 10, 10.0, 0.01, 7.0).unwrap(), Integrator::Euler, count, &c, seed, false).unwrap();
        let coarse = ode_sample(&f, &make_schedule(n, 10.0, 0.01, 7.0).unwrap(), integrator, count, &c, seed, false).unwrap();
        let mut total = 0.0;
        for (a, b) in fine.samples.iter().zip(&coarse.samples) {
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        }
        total / count as f64
    }

    #[test]
    fn euler_first_order_convergence() {
        let spec = gaussian([1.0, 0.5], 0.8);
        let f = |x: Vec2, s: f64, c: &Condition| analytic_eps(&spec, x, s, c);
        let c = Condition::token(0, 0);
        let reference = ode_sample(&f, &make_schedule(4000, 10.0, 0.01, 7.0).unwrap(), Integrator::Heun, 64, &c, 3, false).unwrap();
        let err = |n: usize| {
            let run = ode_sample(&f, &make_schedule(n, 10.0, 0.01, 7.0).unwrap(), Integrator::Euler, 64, &c, 3, false).unwrap();
            run.samples
                .iter()
                .zip(&reference.samples)
                .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .sum::<f64>()
                / 64.0
        };
        let (e1, e2) = (err(40), err(80));
        assert!(e1 / e2 >= 1.7, "ratio {}", e1 / e2);
    }

    #[test]
    fn heun_beats_euler() {
        let spec = gaussian([-1.0, 2.0], 0.3);
        let wins = (0..10)
            .filter(|&seed| {
                terminal_error(&spec, 20, Integrator::Heun, seed, 20) < terminal_error(&spec, 20, Integrator::Euler, seed, 20)
            })
            .count();
        assert!(wins >= 9, "{wins}/10");
    }

    #[test]
    fn sample_csv_layout() {
        let tag = SampleTag {
            cond: Condition::token(7, 1),
            guidance: Some(GuidanceConfig::pg(7.5, 0.3)),
            seed: 4,
        };
        let text = samples_csv(&[[0.5, -1.0]], &tag);
        assert_eq!(text, "sample_id,x0,x1,concept,attribute,method,lambda,omega,seed\n0,0.5,-1,7,1,pg,7.5,0.3,4\n");
    }
}
