//! Fidelity metrics and the ω / λ sweep protocols.
//!
//! * subject fidelity: mean log-density of samples under the target
//!   component for the requested attribute, i.e. `log N(x - t_a; mu*, Sigma*)`;
//! * attribute fidelity: fraction of samples whose most probable attribute,
//!   under the exact posterior of the target mixture, is the requested one;
//! * energy distance to fresh draws from the requested target component.

use serde::{Deserialize, Serialize};

use crate::datasets::{Condition, GmmSpec};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, ModelPair};
use crate::io::Csv;
use crate::linalg::{self, Gaussian, Vec2};
use crate::rng::{Rng, Stream};
use crate::sampler::{ode_sample, NoiseModel, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject_fidelity: f64,
    pub attribute_fidelity: f64,
    pub energy_distance: f64,
    pub n: usize,
    pub seed: u64,
    pub guidance: Option<GuidanceConfig>,
}

/// Everything [`evaluate`] needs besides the samples.
#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub target_spec: GmmSpec,
    pub requested: Condition,
    subject: Gaussian,
    attributes: Vec<(u32, f64, Gaussian)>,
}

impl EvalTarget {
    pub fn new(target_spec: &GmmSpec, requested: Condition) -> Result<Self> {
        let (Some(concept), Some(attribute)) = (requested.concept(), requested.attribute()) else {
            return Err(Error::NullGuidanceCondition);
        };
        let comps = target_spec.components();
        let idx = target_spec
            .matching(&requested)
            .map_err(|_| Error::InvalidArgument(format!("unknown attribute id {attribute} for concept {concept}")))?;
        if idx.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "target spec has {} components for {requested}, expected 1",
                idx.len()
            )));
        }
        let c = &comps[idx[0]];
        let attributes = comps
            .iter()
            .filter(|k| k.condition.concept() == Some(concept))
            .map(|k| {
                (
                    k.condition.attribute().expect("token"),
                    k.weight.ln(),
                    Gaussian::new(k.mean, k.covariance),
                )
            })
            .collect();
        Ok(EvalTarget {
            target_spec: target_spec.clone(),
            requested,
            subject: Gaussian::new(c.mean, c.covariance),
            attributes,
        })
    }

    pub fn subject_log_density(&self, x: Vec2) -> f64 {
        self.subject.log_pdf(x)
    }

    /// Most probable attribute of `x`; ties go to the lower id.
    pub fn map_attribute(&self, x: Vec2) -> u32 {
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        for (a, lw, g) in &self.attributes {
            let l = lw + g.log_pdf(x);
            if l > best.0 || (l == best.0 && *a < best.1) {
                best = (l, *a);
            }
        }
        best.1
    }

    /// `n` i.i.d. draws from the requested component, stream `(seed, "eval")`.
    pub fn reference_draws(&self, n: usize, seed: u64) -> Result<Vec<Vec2>> {
        let drawer = self.target_spec.drawer(Some(&self.requested))?;
        let stream = Stream::new(seed, "eval");
        Ok((0..n).map(|i| drawer.draw(&mut stream.rng(i as u64)).0).collect())
    }
}

/// Metrics for `samples` against `target`. Reference draws for the energy
/// distance come from `seed`, so reports sharing a seed are comparable.
pub fn evaluate(samples: &[Vec2], target: &EvalTarget, seed: u64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let requested = target.requested.attribute().expect("token");
    let mut ll = 0.0;
    let mut hits = 0usize;
    for &x in samples {
        if !linalg::is_finite(x) {
            return Err(Error::InvalidArgument("non-finite sample".into()));
        }
        ll += target.subject_log_density(x);
        if target.map_attribute(x) == requested {
            hits += 1;
        }
    }
    let reference = target.reference_draws(samples.len(), seed)?;
    Ok(EvalReport {
        subject_fidelity: ll / samples.len() as f64,
        attribute_fidelity: hits as f64 / samples.len() as f64,
        energy_distance: energy_distance(samples, &reference)?,
        n: samples.len(),
        seed,
        guidance: None,
    })
}

struct Pooled {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Pooled {
    fn new(a: &[Vec2], b: &[Vec2]) -> Self {
        let pts = a.iter().chain(b);
        Pooled {
            xs: pts.clone().map(|p| p[0]).collect(),
            ys: pts.map(|p| p[1]).collect(),
        }
    }

    /// Sums of `|z_i - z_j|` over pairs `i < j`: all pairs, and pairs with both
    /// labels equal to 1. `labels` holds 0.0 or 1.0.
    fn half_sums(&self, labels: &[f64]) -> (f64, f64, f64) {
        let n = self.xs.len();
        let (mut total, mut ones, mut zeros) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (xi, yi) = (self.xs[i], self.ys[i]);
            let mut d = [0.0f64; 4];
            let mut dl = [0.0f64; 4];
            let start = i + 1;
            let len = n - start;
            let body = start + len / 4 * 4;
            let mut j = start;
            while j < body {
                for k in 0..4 {
                    let dx = xi - self.xs[j + k];
                    let dy = yi - self.ys[j + k];
                    let r = (dx * dx + dy * dy).sqrt();
                    d[k] += r;
                    dl[k] += r * labels[j + k];
                }
                j += 4;
            }
            while j < n {
                let dx = xi - self.xs[j];
                let dy = yi - self.ys[j];
                let r = (dx * dx + dy * dy).sqrt();
                d[0] += r;
                dl[0] += r * labels[j];
                j += 1;
            }
            let row = (d[0] + d[1]) + (d[2] + d[3]);
            let row_ones = (dl[0] + dl[1]) + (dl[2] + dl[3]);
            total += row;
            ones += labels[i] * row_ones;
            zeros += (1.0 - labels[i]) * (row - row_ones);
        }
        (total, ones, zeros)
    }

    /// Per-point sums of distances to every other point, and their half-total
    /// (the sum over unordered pairs).
    fn row_sums(&self) -> (Vec<f64>, f64) {
        let n = self.xs.len();
        let mut rows = vec![0.0; n];
        for i in 0..n {
            let (xi, yi) = (self.xs[i], self.ys[i]);
            let mut acc = 0.0;
            for j in i + 1..n {
                let dx = xi - self.xs[j];
                let dy = yi - self.ys[j];
                let r = (dx * dx + dy * dy).sqrt();
                acc += r;
                rows[j] += r;
            }
            rows[i] += acc;
        }
        let total = rows.iter().sum::<f64>() / 2.0;
        (rows, total)
    }

    /// Sum of `|z_i - z_j|` over unordered pairs within `idx`.
    fn within(&self, idx: &[usize]) -> f64 {
        let xs: Vec<f64> = idx.iter().map(|&i| self.xs[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| self.ys[i]).collect();
        let n = xs.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (xi, yi) = (xs[i], ys[i]);
            let mut d = [0.0f64; 4];
            let mut j = i + 1;
            while j + 4 <= n {
                for k in 0..4 {
                    let dx = xi - xs[j + k];
                    let dy = yi - ys[j + k];
                    d[k] += (dx * dx + dy * dy).sqrt();
                }
                j += 4;
            }
            while j < n {
                let dx = xi - xs[j];
                let dy = yi - ys[j];
                d[0] += (dx * dx + dy * dy).sqrt();
                j += 1;
            }
            sum += (d[0] + d[1]) + (d[2] + d[3]);
        }
        sum
    }

    /// Statistic for the split where `order[..n_a]` is the first group.
    fn split_statistic(&self, rows: &[f64], total: f64, order: &[usize], n_a: usize) -> f64 {
        let (ga, gb) = order.split_at(n_a);
        let (small, large_first) = if ga.len() <= gb.len() { (ga, true) } else { (gb, false) };
        let w_small = self.within(small);
        let row_small: f64 = small.iter().map(|&i| rows[i]).sum();
        let cross = row_small - 2.0 * w_small;
        let w_large = total - w_small - cross;
        let (aa, bb) = if large_first { (w_small, w_large) } else { (w_large, w_small) };
        let (na, nb) = (n_a as f64, (order.len() - n_a) as f64);
        let e = 2.0 * cross / (na * nb) - 2.0 * aa / (na * na) - 2.0 * bb / (nb * nb);
        e.max(0.0)
    }

    fn statistic(&self, labels: &[f64], n_a: usize) -> f64 {
        let n_b = labels.len() - n_a;
        let (total, aa, bb) = self.half_sums(labels);
        let ab = total - aa - bb;
        let (na, nb) = (n_a as f64, n_b as f64);
        let e = 2.0 * ab / (na * nb) - 2.0 * aa / (na * na) - 2.0 * bb / (nb * nb);
        e.max(0.0)
    }
}

/// `2 E|A - B| - E|A - A'| - E|B - B'|` with all pairs included (V-statistic).
pub fn energy_distance(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("energy distance needs two nonempty sets".into()));
    }
    let pooled = Pooled::new(a, b);
    Ok(pooled.statistic(&labels_for(a.len(), b.len()), a.len()))
}

fn labels_for(n_a: usize, n_b: usize) -> Vec<f64> {
    let mut l = vec![1.0; n_a];
    l.resize(n_a + n_b, 0.0);
    l
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null: Vec<f64>,
    /// `(1 + #{null >= statistic}) / (1 + permutations)`.
    pub p_value: f64,
}

impl PermutationTest {
    pub fn rejects_at(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }

    /// Empirical `q`-quantile of the null (nearest rank).
    pub fn null_quantile(&self, q: f64) -> f64 {
        let mut v = self.null.clone();
        v.sort_by(f64::total_cmp);
        let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[k - 1]
    }
}

/// Energy-distance two-sample test with `permutations` label shuffles drawn
/// from stream `(seed, "permutation")`.
///
/// Pairwise row sums of the pooled sample are computed once; each labelling
/// then needs only the within-group sum of the smaller group, since the
/// cross and other within-group sums follow from the row sums. The observed
/// statistic goes through the same path, so it agrees with
/// [`energy_distance`] up to rounding.
pub fn permutation_test(a: &[Vec2], b: &[Vec2], permutations: usize, seed: u64) -> Result<PermutationTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("permutation test needs two nonempty sets".into()));
    }
    if permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let pooled = Pooled::new(a, b);
    let (rows, total) = pooled.row_sums();
    let (n_a, n) = (a.len(), a.len() + b.len());
    let mut order: Vec<usize> = (0..n).collect();
    let statistic = pooled.split_statistic(&rows, total, &order, n_a);
    let stream = Stream::new(seed, "permutation");
    let mut null = Vec::with_capacity(permutations);
    for p in 0..permutations {
        let mut rng = stream.rng(p as u64);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        null.push(pooled.split_statistic(&rows, total, &order, n_a));
    }
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest {
        statistic,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        null,
    })
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVariable {
    Omega,
    Lambda,
}

impl SweepVariable {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepVariable::Omega => "omega",
            SweepVariable::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub guidance: GuidanceConfig,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    pub sampler: SamplerConfig,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: [&str; 16] = [
    "swept",
    "value",
    "method",
    "lambda",
    "omega",
    "concept",
    "attribute",
    "steps",
    "sigma_max",
    "sigma_min",
    "rho",
    "integrator",
    "subject_fidelity",
    "attribute_fidelity",
    "energy_distance",
    "n",
];

impl SweepTable {
    pub fn column(&self, f: impl Fn(&EvalReport) -> f64) -> Vec<f64> {
        self.rows.iter().map(|r| f(&r.report)).collect()
    }

    pub fn to_csv(&self, requested: &Condition) -> String {
        let mut header: Vec<&str> = SWEEP_CSV_HEADER.to_vec();
        header.push("seed");
        let mut csv = Csv::with_header(&header);
        for r in &self.rows {
            csv.row(sweep_fields(self.variable.as_str(), r.value, &r.guidance, requested, &self.sampler, &r.report));
        }
        csv.into_string()
    }
}

pub(crate) fn sweep_fields(
    swept: &str,
    value: f64,
    g: &GuidanceConfig,
    requested: &Condition,
    s: &SamplerConfig,
    r: &EvalReport,
) -> Vec<String> {
    let integrator = match s.integrator {
        crate::sampler::Integrator::Euler => "euler",
        crate::sampler::Integrator::Heun => "heun",
    };
    vec![
        swept.to_string(),
        value.to_string(),
        g.method.to_string(),
        g.lambda.to_string(),
        g.omega.to_string(),
        requested.concept().map(|c| c.to_string()).unwrap_or_default(),
        requested.attribute().map(|a| a.to_string()).unwrap_or_default(),
        s.steps.to_string(),
        s.sigma_max.to_string(),
        s.sigma_min.to_string(),
        s.rho.to_string(),
        integrator.to_string(),
        r.subject_fidelity.to_string(),
        r.attribute_fidelity.to_string(),
        r.energy_distance.to_string(),
        r.n.to_string(),
        r.seed.to_string(),
    ]
}

/// Sampling and evaluation settings shared by every row of a sweep.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub target: EvalTarget,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

/// Samples with `model` and evaluates the result.
pub fn sample_and_evaluate<M: NoiseModel + ?Sized>(model: &M, inputs: &EvalInputs) -> Result<(Vec<Vec2>, EvalReport)> {
    let schedule = inputs.sampler.schedule()?;
    let run = ode_sample(
        model,
        &schedule,
        inputs.sampler.integrator,
        inputs.sampler.n_samples,
        &inputs.target.requested,
        inputs.seed,
        false,
    )?;
    let report = evaluate(&run.samples, &inputs.target, inputs.seed)?;
    Ok((run.samples, report))
}

/// One guided sample-and-evaluate cycle.
pub fn run_guided(pair: &ModelPair, guidance: GuidanceConfig, inputs: &EvalInputs) -> Result<EvalReport> {
    let model = pair.guided(guidance)?;
    let (_, mut report) = sample_and_evaluate(&model, inputs)?;
    report.guidance = Some(guidance);
    Ok(report)
}

fn check_increasing(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("sweep grid must be strictly increasing".into()));
    }
    Ok(())
}

/// PG at fixed `lambda` over interpolation scales.
pub fn sweep_omega(pair: &ModelPair, lambda: f64, grid: &[f64], inputs: &EvalInputs) -> Result<SweepTable> {
    check_increasing(grid)?;
    let rows = grid
        .iter()
        .map(|&w| {
            let g = GuidanceConfig::pg(lambda, w);
            Ok(SweepRow {
                value: w,
                guidance: g,
                report: run_guided(pair, g, inputs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        variable: SweepVariable::Omega,
        grid: grid.to_vec(),
        sampler: inputs.sampler.clone(),
        rows,
    })
}

/// One method at fixed `omega` over guidance scales.
pub fn sweep_lambda(pair: &ModelPair, method: crate::guidance::MethodSpec, grid: &[f64], inputs: &EvalInputs) -> Result<SweepTable> {
    check_increasing(grid)?;
    let rows = grid
        .iter()
        .map(|&l| {
            let g = method.with_lambda(l);
            Ok(SweepRow {
                value: l,
                guidance: g,
                report: run_guided(pair, g, inputs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        variable: SweepVariable::Lambda,
        grid: grid.to_vec(),
        sampler: inputs.sampler.clone(),
        rows,
    })
}

/// The ω with the highest subject fidelity; ties prefer the larger ω.
pub fn select_omega(table: &SweepTable) -> Result<f64> {
    if table.variable != SweepVariable::Omega || table.rows.is_empty() {
        return Err(Error::InvalidArgument("select_omega needs a nonempty omega sweep".into()));
    }
    let mut best = &table.rows[0];
    for r in &table.rows[1..] {
        if r.report.subject_fidelity >= best.report.subject_fidelity {
            best = r;
        }
    }
    Ok(best.value)
}

/// Grid box covering the noisy support of `cond`: every selected component's
/// mean plus or minus three noisy standard deviations per axis.
pub fn support_box(spec: &GmmSpec, cond: &Condition, sigma: f64) -> Result<[(f64, f64); 2]> {
    let mut b = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    for i in spec.matching(cond)? {
        let c = &spec.components()[i];
        for k in 0..2 {
            let half = 3.0 * (c.covariance.0[k][k] + sigma * sigma).sqrt();
            b[k].0 = b[k].0.min(c.mean[k] - half);
            b[k].1 = b[k].1.max(c.mean[k] + half);
        }
    }
    Ok(b)
}

/// Per-coordinate mean squared error between `params` and the exact noise
/// oracle of `spec` at noise level `sigma`, on an `n x n` grid over the
/// support box of each condition (every token plus null), averaged over
/// conditions.
pub fn score_fit_mse(params: &crate::denoiser::ParamVector, spec: &GmmSpec, sigma: f64, n: usize) -> Result<Vec2> {
    if n < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 points per axis".into()));
    }
    let conds: Vec<Condition> = spec.conditions().into_iter().chain([Condition::Null]).collect();
    let mut total = [0.0; 2];
    for cond in &conds {
        let b = support_box(spec, cond, sigma)?;
        let mut acc = [0.0; 2];
        for i in 0..n {
            for j in 0..n {
                let x = [
                    b[0].0 + (b[0].1 - b[0].0) * i as f64 / (n - 1) as f64,
                    b[1].0 + (b[1].1 - b[1].0) * j as f64 / (n - 1) as f64,
                ];
                let got = params.forward(x, sigma, cond)?;
                let want = crate::datasets::analytic_eps(spec, x, sigma, cond)?;
                acc[0] += (got[0] - want[0]).powi(2);
                acc[1] += (got[1] - want[1]).powi(2);
            }
        }
        let m = (n * n) as f64;
        total[0] += acc[0] / m;
        total[1] += acc[1] / m;
    }
    let k = conds.len() as f64;
    Ok([total[0] / k, total[1] / k])
}
