//! Conditional Gaussian mixtures in two dimensions.
//!
//! A [`GmmSpec`] describes a data distribution exactly, so the same value
//! is used to draw training data and as an oracle for the noisy-marginal
//! score. Under the forward process `x_t = x_0 + sigma * n` every component
//! `N(mu, S)` becomes `N(mu, S + sigma^2 I)`, which gives closed forms for
//! the density and the ideal noise prediction `-sigma * grad log p`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::linalg::{self, Gaussian, Mat2, Vec2};
use crate::rng::{standard_normal2, Rng, Stream};

/// Conditioning token: a (concept, attribute) pair or the null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Null,
    Token { concept: u32, attribute: u32 },
}

impl Condition {
    pub fn token(concept: u32, attribute: u32) -> Self {
        Condition::Token { concept, attribute }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }

    pub fn concept(&self) -> Option<u32> {
        match self {
            Condition::Token { concept, .. } => Some(*concept),
            Condition::Null => None,
        }
    }

    pub fn attribute(&self) -> Option<u32> {
        match self {
            Condition::Token { attribute, .. } => Some(*attribute),
            Condition::Null => None,
        }
    }

    /// Whether data labeled `label` belongs to the distribution selected by `self`.
    pub fn selects(&self, label: &Condition) -> bool {
        match self {
            Condition::Null => true,
            token => token == label,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Null => write!(f, "null"),
            Condition::Token { concept, attribute } => write!(f, "({concept},{attribute})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec2,
    pub covariance: Mat2,
    pub condition: Condition,
}

/// Conditional Gaussian mixture with validated weights and covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct GmmSpec {
    components: Vec<Component>,
    chol: Vec<Mat2>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    components: Vec<Component>,
}

impl TryFrom<RawSpec> for GmmSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        GmmSpec::new(raw.components)
    }
}

impl From<GmmSpec> for RawSpec {
    fn from(spec: GmmSpec) -> Self {
        RawSpec {
            components: spec.components,
        }
    }
}

impl GmmSpec {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture has no components".into()));
        }
        let mut chol = Vec::with_capacity(components.len());
        for (i, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "component {i} has non-positive weight {}",
                    c.weight
                )));
            }
            if !linalg::is_finite(c.mean) {
                return Err(Error::InvalidArgument(format!("component {i} has a non-finite mean")));
            }
            chol.push(c.covariance.cholesky().ok_or(Error::NotSpd { index: i })?);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, expected 1")));
        }
        Ok(GmmSpec { components, chol })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Distinct token conditions in first-appearance order.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out: Vec<Condition> = Vec::new();
        for c in &self.components {
            if !out.contains(&c.condition) {
                out.push(c.condition);
            }
        }
        out
    }

    /// Indices of the components selected by `cond`.
    pub fn matching(&self, cond: &Condition) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.components.len())
            .filter(|&i| cond.selects(&self.components[i].condition))
            .collect();
        if idx.is_empty() {
            return Err(Error::NoMatchingComponent(cond.to_string()));
        }
        Ok(idx)
    }

    pub fn mean(&self) -> Vec2 {
        self.components
            .iter()
            .fold([0.0, 0.0], |acc, c| linalg::add(acc, linalg::scale(c.mean, c.weight)))
    }

    /// Mixture of `self` (mass `1 - other_mass`) and `other` (mass `other_mass`).
    pub fn merged(&self, other: &GmmSpec, other_mass: f64) -> Result<GmmSpec> {
        if !(other_mass > 0.0 && other_mass < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "merge mass must lie in (0, 1), got {other_mass}"
            )));
        }
        let mut comps: Vec<Component> = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight * (1.0 - other_mass),
                ..c.clone()
            })
            .collect();
        comps.extend(other.components.iter().map(|c| Component {
            weight: c.weight * other_mass,
            ..c.clone()
        }));
        renormalize(&mut comps);
        GmmSpec::new(comps)
    }

    fn noisy(&self, idx: &[usize], sigma: f64) -> Vec<(f64, Gaussian)> {
        let s2 = sigma * sigma;
        idx.iter()
            .map(|&i| {
                let c = &self.components[i];
                (c.weight.ln(), Gaussian::new(c.mean, c.covariance.add_identity(s2)))
            })
            .collect()
    }

    /// `log p_sigma(x | cond)`, the exact noisy density restricted to `cond`.
    ///
    /// A token condition renormalizes the weights of its components, so the
    /// result is a conditional density.
    pub fn log_density(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<f64> {
        check_sigma(sigma)?;
        let idx = self.matching(cond)?;
        let terms: Vec<f64> = self
            .noisy(&idx, sigma)
            .iter()
            .map(|(lw, g)| lw + g.log_pdf(x))
            .collect();
        let mass: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        Ok(linalg::log_sum_exp(&terms) - mass.ln())
    }

    /// Posterior over the distinct token conditions given a noisy point.
    pub fn condition_posterior(&self, x: Vec2, sigma: f64) -> Result<Vec<(Condition, f64)>> {
        check_sigma(sigma)?;
        let conds = self.conditions();
        let mut logs = Vec::with_capacity(conds.len());
        for c in &conds {
            let idx = self.matching(c)?;
            let mass: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
            logs.push(mass.ln() + self.log_density(x, sigma, c)?);
        }
        let z = linalg::log_sum_exp(&logs);
        Ok(conds.into_iter().zip(logs.iter().map(|l| (l - z).exp())).collect())
    }

    pub(crate) fn draw_from<R: Rng + ?Sized>(&self, idx: &[usize], total: f64, rng: &mut R) -> (Vec2, Condition) {
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = idx[idx.len() - 1];
        for &i in idx {
            acc += self.components[i].weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = &self.components[pick];
        let z = standard_normal2(rng);
        (linalg::add(c.mean, self.chol[pick].mul_vec(z)), c.condition)
    }

    /// Sampler over the components selected by `filter` (all when `None`).
    pub fn drawer(&self, filter: Option<&Condition>) -> Result<Drawer<'_>> {
        let idx = match filter {
            Some(c) => self.matching(c)?,
            None => (0..self.components.len()).collect(),
        };
        let total = idx.iter().map(|&i| self.components[i].weight).sum();
        Ok(Drawer { spec: self, idx, total })
    }
}

/// Draws i.i.d. points from a (possibly filtered) mixture.
pub struct Drawer<'a> {
    spec: &'a GmmSpec,
    idx: Vec<usize>,
    total: f64,
}

impl Drawer<'_> {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec2, Condition) {
        self.spec.draw_from(&self.idx, self.total, rng)
    }
}

fn renormalize(comps: &mut [Component]) {
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    for c in comps.iter_mut() {
        c.weight /= total;
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Labeled draws from a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSamples {
    pub points: Vec<Vec2>,
    pub conditions: Vec<Condition>,
    pub seed: u64,
}

impl LabeledSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_cov(path: &str, cov: &Mat2) -> Result<()> {
    if cov.cholesky().is_none() {
        return Err(Error::config(path, "covariance is not symmetric positive definite"));
    }
    Ok(())
}

/// Pretraining distribution: one equal-weight component per (concept, attribute).
///
/// Component `(c, a)` is centred at `concept_mean[c] + attribute_shift[a]` with
/// the concept's covariance.
pub fn make_pretrain_spec(config: &DataConfig) -> Result<GmmSpec> {
    let n_c = config.concepts.len();
    let n_a = config.attribute_shifts.len();
    if n_c < 2 {
        return Err(Error::config("data.concepts", "need at least 2 concepts"));
    }
    if n_a < 2 {
        return Err(Error::config("data.attribute_shifts", "need at least 2 attributes"));
    }
    let weight = 1.0 / (n_c * n_a) as f64;
    let mut comps = Vec::with_capacity(n_c * n_a);
    for (c, concept) in config.concepts.iter().enumerate() {
        check_cov(&format!("data.concepts[{c}].covariance"), &concept.covariance)?;
        for (a, shift) in config.attribute_shifts.iter().enumerate() {
            comps.push(Component {
                weight,
                mean: linalg::add(concept.mean, *shift),
                covariance: concept.covariance,
                condition: Condition::token(c as u32, a as u32),
            });
        }
    }
    renormalize(&mut comps);
    GmmSpec::new(comps)
}

/// Target ("novel concept") distribution: the target concept under every attribute.
///
/// Fine-tuning data is drawn from the base-attribute component only; the
/// other components define what a faithful attribute edit would look like.
pub fn make_target_spec(config: &DataConfig) -> Result<GmmSpec> {
    let t = &config.target;
    let n_a = config.attribute_shifts.len();
    if (t.concept as usize) < config.concepts.len() {
        return Err(Error::config(
            "data.target.concept",
            format!("concept id {} collides with a pretraining concept", t.concept),
        ));
    }
    if t.base_attribute as usize >= n_a {
        return Err(Error::config("data.target.base_attribute", "attribute id out of range"));
    }
    check_cov("data.target.covariance", &t.covariance)?;
    for (c, concept) in config.concepts.iter().enumerate() {
        for shift in &config.attribute_shifts {
            let mu = linalg::add(concept.mean, *shift);
            let d = linalg::mahalanobis(t.mean, mu, &concept.covariance)
                .min(linalg::mahalanobis(t.mean, mu, &t.covariance));
            if d <= 2.0 {
                return Err(Error::config(
                    "data.target.mean",
                    format!("target mean is within Mahalanobis distance {d:.3} of concept {c}"),
                ));
            }
        }
    }
    let weight = 1.0 / n_a as f64;
    let comps = config
        .attribute_shifts
        .iter()
        .enumerate()
        .map(|(a, shift)| Component {
            weight,
            mean: linalg::add(t.mean, *shift),
            covariance: t.covariance,
            condition: Condition::token(t.concept, a as u32),
        })
        .collect::<Vec<_>>();
    let mut comps = comps;
    renormalize(&mut comps);
    GmmSpec::new(comps)
}

/// I.i.d. labeled draws; sample `i` uses substream `i` of `(seed, "dataset")`.
pub fn sample_dataset(
    spec: &GmmSpec,
    n: usize,
    seed: u64,
    condition_filter: Option<&Condition>,
) -> Result<LabeledSamples> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let drawer = spec.drawer(condition_filter)?;
    let stream = Stream::new(seed, "dataset");
    let (points, conditions) = (0..n)
        .map(|i| drawer.draw(&mut stream.rng(i as u64)))
        .unzip();
    Ok(LabeledSamples {
        points,
        conditions,
        seed,
    })
}

/// Ideal noise prediction `-sigma * grad_x log p_sigma(x | cond)`.
pub fn analytic_eps(spec: &GmmSpec, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
    check_sigma(sigma)?;
    let idx = spec.matching(cond)?;
    Ok(eps_over(spec, &idx, x, sigma))
}

pub(crate) fn eps_over(spec: &GmmSpec, idx: &[usize], x: Vec2, sigma: f64) -> Vec2 {
    let comps = spec.noisy(idx, sigma);
    if comps.len() == 1 {
        return linalg::scale(comps[0].1.grad_log_pdf(x), -sigma);
    }
    let logs: Vec<f64> = comps.iter().map(|(lw, g)| lw + g.log_pdf(x)).collect();
    let z = linalg::log_sum_exp(&logs);
    let mut grad = [0.0, 0.0];
    for ((_, g), l) in comps.iter().zip(&logs) {
        grad = linalg::add(grad, linalg::scale(g.grad_log_pdf(x), (l - z).exp()));
    }
    linalg::scale(grad, -sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ConceptConfig, DataConfig, TargetConfig};

    fn small_config() -> DataConfig {
        DataConfig {
            concepts: vec![
                ConceptConfig {
                    mean: [-3.0, 0.0],
                    covariance: Mat2::IDENTITY,
                },
                ConceptConfig {
                    mean: [3.0, 0.0],
                    covariance: Mat2::IDENTITY,
                },
            ],
            attribute_shifts: vec![[0.0, 0.0], [0.0, 4.0]],
            target: TargetConfig {
                concept: 7,
                mean: [0.0, -3.0],
                covariance: Mat2::IDENTITY,
                n_points: 6,
                base_attribute: 0,
            },
        }
    }

    fn single(mean: Vec2, cov: Mat2) -> GmmSpec {
        GmmSpec::new(vec![Component {
            weight: 1.0,
            mean,
            covariance: cov,
            condition: Condition::token(0, 0),
        }])
        .unwrap()
    }

    #[test]
    fn pretrain_spec_has_one_component_per_pair() {
        let spec = make_pretrain_spec(&small_config()).unwrap();
        assert_eq!(spec.components().len(), 4);
        for c in spec.components() {
            assert_eq!(c.weight, 0.25);
        }
        assert_eq!(spec.components()[1].mean, [-3.0, 4.0]);
        assert_eq!(spec.components()[1].condition, Condition::token(0, 1));
    }

    #[test]
    fn pretrain_spec_rejects_single_attribute() {
        let mut cfg = small_config();
        cfg.attribute_shifts.truncate(1);
        let err = make_pretrain_spec(&cfg).unwrap_err().to_string();
        assert!(err.contains("need at least 2 attributes"), "{err}");
        let mut cfg = small_config();
        cfg.concepts.truncate(1);
        assert!(make_pretrain_spec(&cfg).is_err());
    }

    #[test]
    fn pretrain_spec_rejects_non_spd() {
        let mut cfg = small_config();
        cfg.concepts[0].covariance = Mat2([[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(make_pretrain_spec(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn target_spec_shifts_base_mean() {
        let spec = make_target_spec(&small_config()).unwrap();
        let means: Vec<Vec2> = spec.components().iter().map(|c| c.mean).collect();
        assert_eq!(means, vec![[0.0, -3.0], [0.0, 1.0]]);
        assert!(spec.components().iter().all(|c| c.condition.concept() == Some(7)));
    }

    #[test]
    fn target_spec_rejects_colliding_concept() {
        let mut cfg = small_config();
        cfg.target.concept = 0;
        assert!(make_target_spec(&cfg).is_err());
        let mut cfg = small_config();
        cfg.target.mean = [-3.0, 0.5];
        assert!(make_target_spec(&cfg).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = Component {
            weight: 0.4,
            mean: [0.0, 0.0],
            covariance: Mat2::IDENTITY,
            condition: Condition::token(0, 0),
        };
        assert!(GmmSpec::new(vec![c.clone(), c]).is_err());
    }

    #[test]
    fn sample_moments_single_gaussian() {
        let spec = single([0.0, 0.0], Mat2::IDENTITY);
        let s = sample_dataset(&spec, 1000, 11, None).unwrap();
        let n = s.len() as f64;
        let m = s.points.iter().fold([0.0, 0.0], |a, p| linalg::add(a, *p));
        let m = linalg::scale(m, 1.0 / n);
        // 4 standard errors of the mean at n = 1000 is 0.126 per coordinate;
        // the bound of 0.1 holds for this seed.
        assert!(linalg::norm(m) < 0.1, "{m:?}");
        let mut cov = [[0.0; 2]; 2];
        for p in &s.points {
            let d = linalg::sub(*p, m);
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j] / (n - 1.0);
                }
            }
        }
        let fro = ((cov[0][0] - 1.0).powi(2) + 2.0 * cov[0][1].powi(2) + (cov[1][1] - 1.0).powi(2)).sqrt();
        assert!(fro < 0.15, "{cov:?}");
    }

    #[test]
    fn sampling_is_deterministic_and_filterable() {
        let spec = make_pretrain_spec(&small_config()).unwrap();
        let a = sample_dataset(&spec, 50, 3, None).unwrap();
        let b = sample_dataset(&spec, 50, 3, None).unwrap();
        assert_eq!(a, b);
        let only = Condition::token(1, 1);
        let f = sample_dataset(&spec, 50, 3, Some(&only)).unwrap();
        assert!(f.conditions.iter().all(|c| *c == only));
        assert!(sample_dataset(&spec, 5, 3, Some(&Condition::token(5, 0))).is_err());
        assert!(sample_dataset(&spec, 0, 3, None).is_err());
    }

    #[test]
    fn eps_isotropic_closed_form() {
        let spec = single([0.0, 0.0], Mat2::IDENTITY);
        let e = analytic_eps(&spec, [1.0, 0.0], 1.0, &Condition::Null).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-15 && e[1] == 0.0, "{e:?}");
    }

    #[test]
    fn eps_vanishes_at_isolated_mode() {
        let comp = |mean: Vec2| Component {
            weight: 0.5,
            mean,
            covariance: Mat2::IDENTITY,
            condition: Condition::token(0, 0),
        };
        let spec = GmmSpec::new(vec![comp([0.0, 0.0]), comp([20.0, 0.0])]).unwrap();
        let e = analytic_eps(&spec, [20.0, 0.0], 1e-3, &Condition::Null).unwrap();
        assert!(linalg::norm(e) < 1e-6, "{e:?}");
    }

    #[test]
    fn eps_rejects_unknown_token_and_bad_sigma() {
        let spec = make_pretrain_spec(&small_config()).unwrap();
        assert!(analytic_eps(&spec, [0.0, 0.0], 1.0, &Condition::token(9, 0)).is_err());
        assert!(analytic_eps(&spec, [0.0, 0.0], 0.0, &Condition::Null).is_err());
    }

    fn fd_eps(spec: &GmmSpec, x: Vec2, sigma: f64, cond: &Condition) -> Vec2 {
        let h = 1e-5;
        let mut g = [0.0; 2];
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            g[i] = (spec.log_density(xp, sigma, cond).unwrap() - spec.log_density(xm, sigma, cond).unwrap())
                / (2.0 * h);
        }
        linalg::scale(g, -sigma)
    }

    fn rel_err(a: Vec2, b: Vec2) -> f64 {
        linalg::norm(linalg::sub(a, b)) / linalg::norm(b).max(1e-3)
    }

    #[test]
    fn eps_matches_finite_differences_two_components() {
        let spec = GmmSpec::new(vec![
            Component {
                weight: 0.3,
                mean: [-1.0, 0.5],
                covariance: Mat2([[0.6, 0.2], [0.2, 0.4]]),
                condition: Condition::token(0, 0),
            },
            Component {
                weight: 0.7,
                mean: [1.5, -0.5],
                covariance: Mat2([[0.3, -0.1], [-0.1, 0.9]]),
                condition: Condition::token(1, 0),
            },
        ])
        .unwrap();
        for x in [[0.2, 0.1], [-2.0, 1.0], [3.0, -2.5]] {
            let e = analytic_eps(&spec, x, 0.7, &Condition::Null).unwrap();
            let fd = fd_eps(&spec, x, 0.7, &Condition::Null);
            assert!(rel_err(e, fd) < 1e-5, "{x:?}: {e:?} vs {fd:?}");
        }
    }

    #[test]
    fn eps_matches_finite_differences_random_points() {
        use rand::Rng;
        let spec = make_pretrain_spec(&small_config()).unwrap();
        let mut rng = Stream::new(5, "fd").rng(0);
        for _ in 0..100 {
            let x = [rng.random_range(-7.0..7.0), rng.random_range(-4.0..8.0)];
            let sigma = rng.random_range(0.2f64..3.0);
            let conds = [Condition::Null, Condition::token(1, 1)];
            for cond in &conds {
                let e = analytic_eps(&spec, x, sigma, cond).unwrap();
                let fd = fd_eps(&spec, x, sigma, cond);
                assert!(rel_err(e, fd) < 1e-5, "{x:?} {sigma}: {e:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn null_eps_is_posterior_weighted_token_eps() {
        let spec = make_pretrain_spec(&small_config()).unwrap();
        for (x, sigma) in [([0.3, 1.7], 0.8), ([-2.0, 3.0], 2.5), ([4.0, -1.0], 0.3)] {
            let post = spec.condition_posterior(x, sigma).unwrap();
            let mut mix = [0.0, 0.0];
            for (c, p) in &post {
                mix = linalg::add(mix, linalg::scale(analytic_eps(&spec, x, sigma, c).unwrap(), *p));
            }
            let null = analytic_eps(&spec, x, sigma, &Condition::Null).unwrap();
            assert!(linalg::norm(linalg::sub(mix, null)) < 1e-10);
        }
    }

    #[test]
    fn merged_keeps_both_specs() {
        let cfg = small_config();
        let pre = make_pretrain_spec(&cfg).unwrap();
        let tgt = make_target_spec(&cfg).unwrap();
        let m = pre.merged(&tgt, 0.5).unwrap();
        assert_eq!(m.components().len(), 6);
        let w: f64 = m.components().iter().map(|c| c.weight).sum();
        assert!((w - 1.0).abs() < 1e-12);
        assert!(pre.merged(&tgt, 1.0).is_err());
    }

    #[test]
    fn spec_serializes_to_toml() {
        let spec = make_pretrain_spec(&small_config()).unwrap();
        let text = toml::to_string(&spec).unwrap();
        let back: GmmSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
