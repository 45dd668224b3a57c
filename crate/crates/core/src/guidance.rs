//! Guided noise estimates.
//!
//! Every method combines a strong estimate, always the fine-tuned model
//! under the requested condition, with a weak estimate:
//!
//! | method | weak parameters | weak condition |
//! |--------|-----------------|----------------|
//! | CFG    | fine-tuned      | null           |
//! | AG     | pretrained      | requested      |
//! | PG     | interpolated    | null           |
//!
//! and returns `weak + lambda * (strong - weak)`. It is evaluated as
//! `strong + (lambda - 1) * (strong - weak)`, which is the same affine map but
//! returns the strong estimate exactly at `lambda = 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::datasets::{self, Condition, GmmSpec};
use crate::denoiser::{interpolate, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::sampler::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cfg,
    Ag,
    Pg,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cfg => "cfg",
            Method::Ag => "ag",
            Method::Pg => "pg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cfg" => Ok(Method::Cfg),
            "ag" => Ok(Method::Ag),
            "pg" => Ok(Method::Pg),
            other => Err(Error::InvalidArgument(format!("unknown guidance method `{other}`"))),
        }
    }
}

/// Method, guidance scale and interpolation scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub method: Method,
    pub lambda: f64,
    /// Only read by PG; CFG behaves as PG at `omega = 1`.
    pub omega: f64,
}

impl GuidanceConfig {
    pub fn cfg(lambda: f64) -> Self {
        GuidanceConfig {
            method: Method::Cfg,
            lambda,
            omega: 1.0,
        }
    }

    pub fn ag(lambda: f64) -> Self {
        GuidanceConfig {
            method: Method::Ag,
            lambda,
            omega: 0.0,
        }
    }

    pub fn pg(lambda: f64, omega: f64) -> Self {
        GuidanceConfig {
            method: Method::Pg,
            lambda,
            omega,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be >= 1, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument(format!(
                "interpolation scale must lie in [0, 1], got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

impl fmt::Display for GuidanceConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(lambda={},omega={})", self.method, self.lambda, self.omega)
    }
}

/// Method plus interpolation scale, written `cfg`, `ag`, `pg` or `pg@0.3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSpec {
    pub method: Method,
    pub omega: f64,
}

impl MethodSpec {
    pub fn with_lambda(self, lambda: f64) -> GuidanceConfig {
        GuidanceConfig {
            method: self.method,
            lambda,
            omega: self.omega,
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, omega) = match s.split_once('@') {
            Some((n, w)) => (
                n,
                Some(
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad omega in `{s}`")))?,
                ),
            ),
            None => (s, None),
        };
        let method: Method = name.trim().parse()?;
        let omega = match (method, omega) {
            (Method::Pg, Some(w)) if (0.0..=1.0).contains(&w) => w,
            (Method::Pg, Some(w)) => {
                return Err(Error::InvalidArgument(format!("omega {w} outside [0, 1]")));
            }
            (Method::Pg, None) => 0.0,
            (Method::Cfg, None) => 1.0,
            (Method::Ag, None) => 0.0,
            (_, Some(_)) => {
                return Err(Error::InvalidArgument(format!("only pg takes an omega: `{s}`")));
            }
        };
        Ok(MethodSpec { method, omega })
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.to_string()
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            Method::Pg => write!(f, "pg@{}", self.omega),
            m => write!(f, "{m}"),
        }
    }
}

#[inline]
fn combine(weak: Vec2, strong: Vec2, lambda: f64) -> Vec2 {
    let k = lambda - 1.0;
    [
        strong[0] + k * (strong[0] - weak[0]),
        strong[1] + k * (strong[1] - weak[1]),
    ]
}

/// Pretrained and fine-tuned parameters plus interpolated weak models.
#[derive(Debug)]
pub struct ModelPair {
    pretrained: Arc<ParamVector>,
    finetuned: Arc<ParamVector>,
    cache: RwLock<BTreeMap<u64, Arc<ParamVector>>>,
}

impl ModelPair {
    pub fn new(pretrained: ParamVector, finetuned: ParamVector) -> Result<Self> {
        pretrained.ensure_same_arch(&finetuned)?;
        Ok(ModelPair {
            pretrained: Arc::new(pretrained),
            finetuned: Arc::new(finetuned),
            cache: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn pretrained(&self) -> &Arc<ParamVector> {
        &self.pretrained
    }

    pub fn finetuned(&self) -> &Arc<ParamVector> {
        &self.finetuned
    }

    /// `theta_omega`, computed once per distinct `omega`.
    pub fn interpolated(&self, omega: f64) -> Result<Arc<ParamVector>> {
        let key = omega.to_bits();
        if let Some(p) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let fresh = Arc::new(self.interpolated_uncached(omega)?);
        let mut cache = self.cache.write().expect("cache lock");
        Ok(cache.entry(key).or_insert(fresh).clone())
    }

    pub fn interpolated_uncached(&self, omega: f64) -> Result<ParamVector> {
        interpolate(&self.pretrained, &self.finetuned, omega)
    }

    pub fn cached_omegas(&self) -> Vec<f64> {
        self.cache
            .read()
            .expect("cache lock")
            .keys()
            .map(|k| f64::from_bits(*k))
            .collect()
    }

    /// Weak branch of interpolated guidance, `eps_{theta_omega}(x | cond)`.
    pub fn weak_eps(&self, omega: f64, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        self.interpolated(omega)?.forward(x, sigma, cond)
    }

    /// Resolves the parameters used by `cfg` once, for repeated evaluation.
    pub fn guided(&self, cfg: GuidanceConfig) -> Result<GuidedModel> {
        self.resolve(cfg, true)
    }

    /// As [`guided`](Self::guided) but bypassing the interpolation cache.
    pub fn guided_uncached(&self, cfg: GuidanceConfig) -> Result<GuidedModel> {
        self.resolve(cfg, false)
    }

    fn resolve(&self, cfg: GuidanceConfig, cached: bool) -> Result<GuidedModel> {
        cfg.validate()?;
        let (weak, weak_null) = match cfg.method {
            Method::Cfg => (self.finetuned.clone(), true),
            Method::Ag => (self.pretrained.clone(), false),
            Method::Pg if cached => (self.interpolated(cfg.omega)?, true),
            Method::Pg => (Arc::new(self.interpolated_uncached(cfg.omega)?), true),
        };
        Ok(GuidedModel {
            strong: self.finetuned.clone(),
            weak,
            weak_null,
            cfg,
        })
    }

    pub fn guided_eps(&self, cfg: GuidanceConfig, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        self.guided(cfg)?.eps(x, sigma, cond)
    }
}

/// A guidance method bound to concrete weak and strong parameters.
#[derive(Debug, Clone)]
pub struct GuidedModel {
    strong: Arc<ParamVector>,
    weak: Arc<ParamVector>,
    weak_null: bool,
    cfg: GuidanceConfig,
}

impl GuidedModel {
    pub fn config(&self) -> GuidanceConfig {
        self.cfg
    }

    /// Exactly two denoiser evaluations.
    pub fn eps(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        if cond.is_null() {
            return Err(Error::NullGuidanceCondition);
        }
        let strong = self.strong.forward(x, sigma, cond)?;
        let weak_cond = if self.weak_null { Condition::Null } else { *cond };
        let weak = self.weak.forward(x, sigma, &weak_cond)?;
        Ok(combine(weak, strong, self.cfg.lambda))
    }
}

impl NoiseModel for GuidedModel {
    fn eps(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        GuidedModel::eps(self, x, sigma, cond)
    }

    fn describe(&self) -> String {
        self.cfg.to_string()
    }
}

/// Share of the adapted oracle's mass given to the target components.
pub const ORACLE_TARGET_MASS: f64 = 0.5;

/// Closed-form stand-ins for the two networks.
///
/// The pretrained model is `pretrain_spec`; the fine-tuned model is the
/// pretraining mixture merged with the target spec. A token whose concept the
/// pretrained spec has never seen is answered with the attribute marginal,
/// the way an untrained concept embedding leaves only the attribute signal.
/// There is no parameter vector between two mixtures, so PG's weak branch
/// is the output-space blend `omega * adapted(null) + (1 - omega) * pretrained(null)`.
#[derive(Debug, Clone)]
pub struct OracleModels {
    pretrained: GmmSpec,
    adapted: GmmSpec,
}

impl OracleModels {
    pub fn new(pretrain_spec: &GmmSpec, target_spec: &GmmSpec) -> Result<Self> {
        Ok(OracleModels {
            pretrained: pretrain_spec.clone(),
            adapted: pretrain_spec.merged(target_spec, ORACLE_TARGET_MASS)?,
        })
    }

    pub fn adapted(&self) -> &GmmSpec {
        &self.adapted
    }

    fn pretrained_eps(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        match datasets::analytic_eps(&self.pretrained, x, sigma, cond) {
            Err(Error::NoMatchingComponent(_)) if cond.attribute().is_some() => {
                let attr = cond.attribute();
                let idx: Vec<usize> = (0..self.pretrained.components().len())
                    .filter(|&i| self.pretrained.components()[i].condition.attribute() == attr)
                    .collect();
                if idx.is_empty() {
                    return Err(Error::NoMatchingComponent(cond.to_string()));
                }
                Ok(datasets::eps_over(&self.pretrained, &idx, x, sigma))
            }
            other => other,
        }
    }

    pub fn guided_eps(&self, cfg: GuidanceConfig, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        cfg.validate()?;
        if cond.is_null() {
            return Err(Error::NullGuidanceCondition);
        }
        let strong = datasets::analytic_eps(&self.adapted, x, sigma, cond)?;
        let weak = match cfg.method {
            Method::Cfg => datasets::analytic_eps(&self.adapted, x, sigma, &Condition::Null)?,
            Method::Ag => self.pretrained_eps(x, sigma, cond)?,
            Method::Pg => {
                let a = datasets::analytic_eps(&self.adapted, x, sigma, &Condition::Null)?;
                let p = datasets::analytic_eps(&self.pretrained, x, sigma, &Condition::Null)?;
                let w = cfg.omega;
                [w * a[0] + (1.0 - w) * p[0], w * a[1] + (1.0 - w) * p[1]]
            }
        };
        Ok(combine(weak, strong, cfg.lambda))
    }

    pub fn bind(&self, cfg: GuidanceConfig) -> BoundOracle<'_> {
        BoundOracle { models: self, cfg }
    }
}

/// Analytic guided estimate with models resolved from the two specs.
pub fn oracle_guided_eps(
    pretrain_spec: &GmmSpec,
    target_spec: &GmmSpec,
    cfg: GuidanceConfig,
    x: Vec2,
    sigma: f64,
    cond: &Condition,
) -> Result<Vec2> {
    OracleModels::new(pretrain_spec, target_spec)?.guided_eps(cfg, x, sigma, cond)
}

/// [`OracleModels`] bound to one guidance config.
pub struct BoundOracle<'a> {
    models: &'a OracleModels,
    cfg: GuidanceConfig,
}

impl NoiseModel for BoundOracle<'_> {
    fn eps(&self, x: Vec2, sigma: f64, cond: &Condition) -> Result<Vec2> {
        self.models.guided_eps(self.cfg, x, sigma, cond)
    }

    fn describe(&self) -> String {
        format!("oracle-{}", self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Component;
    use crate::denoiser::{init_params, Architecture};
    use crate::linalg::Mat2;
    use crate::rng::{Rng, Stream};

    fn pair(arch: &Architecture) -> ModelPair {
        ModelPair::new(init_params(arch, 1).unwrap(), init_params(arch, 2).unwrap()).unwrap()
    }

    fn probes(n: usize, seed: u64) -> Vec<(Vec2, f64, Condition)> {
        let mut rng = Stream::new(seed, "probes").rng(0);
        (0..n)
            .map(|_| {
                (
                    [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                    rng.random_range(0.01f64..10.0),
                    Condition::token(rng.random_range(0..3), rng.random_range(0..2)),
                )
            })
            .collect()
    }

    #[test]
    fn method_spec_parsing() {
        assert_eq!("pg@0.3".parse::<MethodSpec>().unwrap(), MethodSpec { method: Method::Pg, omega: 0.3 });
        assert_eq!("CFG".parse::<MethodSpec>().unwrap().omega, 1.0);
        assert!("ag@0.3".parse::<MethodSpec>().is_err());
        assert!("pg@1.3".parse::<MethodSpec>().is_err());
        assert!("xyz".parse::<MethodSpec>().is_err());
        let s = MethodSpec { method: Method::Pg, omega: 0.5 };
        assert_eq!(s.to_string().parse::<MethodSpec>().unwrap(), s);
    }

    #[test]
    fn lambda_one_returns_finetuned_conditional() {
        let p = pair(&Architecture::standard(3, 2));
        for (x, s, c) in probes(50, 1) {
            let expect = p.finetuned().forward(x, s, &c).unwrap();
            for cfg in [GuidanceConfig::cfg(1.0), GuidanceConfig::ag(1.0), GuidanceConfig::pg(1.0, 0.4)] {
                assert_eq!(p.guided_eps(cfg, x, s, &c).unwrap(), expect);
            }
        }
    }

    #[test]
    fn pg_at_omega_one_is_cfg_bitwise() {
        let p = pair(&Architecture::standard(3, 2));
        for (x, s, c) in probes(50, 2) {
            let a = p.guided_eps(GuidanceConfig::pg(7.5, 1.0), x, s, &c).unwrap();
            let b = p.guided_eps(GuidanceConfig::cfg(7.5), x, s, &c).unwrap();
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
    }

    #[test]
    fn ag_without_finetuning_is_plain_conditional() {
        let theta = init_params(&Architecture::standard(3, 2), 1).unwrap();
        let p = ModelPair::new(theta.clone(), theta.clone()).unwrap();
        for (x, s, c) in probes(20, 3) {
            let out = p.guided_eps(GuidanceConfig::ag(4.0), x, s, &c).unwrap();
            assert_eq!(out, theta.forward(x, s, &c).unwrap());
        }
    }

    #[test]
    fn weak_eps_endpoints_and_linear_identity() {
        let p = pair(&Architecture::standard(3, 2));
        let lin = pair(&Architecture::linear(3, 2));
        for (x, s, c) in probes(20, 4) {
            assert_eq!(p.weak_eps(0.0, x, s, &c).unwrap(), p.pretrained().forward(x, s, &c).unwrap());
            assert_eq!(p.weak_eps(1.0, x, s, &c).unwrap(), p.finetuned().forward(x, s, &c).unwrap());
            let w = 0.37;
            let a = lin.weak_eps(w, x, s, &c).unwrap();
            let e1 = lin.finetuned().forward(x, s, &c).unwrap();
            let e0 = lin.pretrained().forward(x, s, &c).unwrap();
            for k in 0..2 {
                assert!((a[k] - (w * e1[k] + (1.0 - w) * e0[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn guided_output_is_affine_in_lambda() {
        let p = pair(&Architecture::standard(3, 2));
        for (x, s, c) in probes(30, 5) {
            for method in [Method::Cfg, Method::Ag, Method::Pg] {
                let at = |l: f64| p.guided_eps(GuidanceConfig { method, lambda: l, omega: 0.3 }, x, s, &c).unwrap();
                let (a, b, z) = (at(2.0), at(5.0), at(11.0));
                for k in 0..2 {
                    let extrap = a[k] + (11.0 - 2.0) / (5.0 - 2.0) * (b[k] - a[k]);
                    assert!((extrap - z[k]).abs() <= 1e-12 * z[k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn cache_is_transparent() {
        let p = pair(&Architecture::standard(3, 2));
        for (x, s, c) in probes(20, 6) {
            let cfg = GuidanceConfig::pg(3.0, 0.6);
            let a = p.guided(cfg).unwrap().eps(x, s, &c).unwrap();
            let b = p.guided_uncached(cfg).unwrap().eps(x, s, &c).unwrap();
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
        assert_eq!(p.cached_omegas(), vec![0.6]);
        assert!(Arc::ptr_eq(&p.interpolated(0.6).unwrap(), &p.interpolated(0.6).unwrap()));
    }

    #[test]
    fn guidance_errors() {
        let p = pair(&Architecture::standard(3, 2));
        assert!(matches!(
            p.guided_eps(GuidanceConfig::cfg(2.0), [0.0, 0.0], 1.0, &Condition::Null),
            Err(Error::NullGuidanceCondition)
        ));
        assert!(p.guided(GuidanceConfig::cfg(0.5)).is_err());
        assert!(p.guided(GuidanceConfig::pg(2.0, 1.5)).is_err());
        let other = init_params(&Architecture::linear(3, 2), 1).unwrap();
        assert!(ModelPair::new(init_params(&Architecture::standard(3, 2), 1).unwrap(), other).is_err());
    }

    fn comp(w: f64, mean: Vec2, cov: f64, c: Condition) -> Component {
        Component {
            weight: w,
            mean,
            covariance: Mat2::scaled_identity(cov),
            condition: c,
        }
    }

    fn oracle_specs() -> (GmmSpec, GmmSpec) {
        let pre = GmmSpec::new(vec![
            comp(0.5, [-2.0, 0.0], 1.0, Condition::token(0, 0)),
            comp(0.5, [2.0, 0.0], 1.0, Condition::token(1, 0)),
        ])
        .unwrap();
        let tgt = GmmSpec::new(vec![comp(1.0, [0.0, 3.0], 0.5, Condition::token(7, 0))]).unwrap();
        (pre, tgt)
    }

    #[test]
    fn oracle_matches_closed_form_values() {
        // Frozen from scripts/oracles.py (numpy), x = (0.5, 1), sigma = 1, lambda = 3.
        let (pre, tgt) = oracle_specs();
        let c = Condition::token(7, 0);
        let x = [0.5, 1.0];
        let cases = [
            (GuidanceConfig::cfg(3.0), [0.8614985879386642, -3.1085686360335223]),
            (GuidanceConfig::pg(3.0, 0.0), [1.4242343145200194, -5.0]),
            (GuidanceConfig::ag(3.0), [1.4242343145200194, -5.0]),
            (GuidanceConfig::pg(3.0, 0.3), [1.2554135965456128, -4.432570590810056]),
        ];
        for (cfg, expect) in cases {
            let got = oracle_guided_eps(&pre, &tgt, cfg, x, 1.0, &c).unwrap();
            for k in 0..2 {
                assert!((got[k] - expect[k]).abs() < 1e-12, "{cfg}: {got:?} vs {expect:?}");
            }
        }
    }

    #[test]
    fn oracle_lambda_one_is_adapted_conditional() {
        let (pre, tgt) = oracle_specs();
        let models = OracleModels::new(&pre, &tgt).unwrap();
        let c = Condition::token(7, 0);
        let direct = datasets::analytic_eps(models.adapted(), [1.0, 2.0], 0.6, &c).unwrap();
        for cfg in [GuidanceConfig::cfg(1.0), GuidanceConfig::ag(1.0), GuidanceConfig::pg(1.0, 0.5)] {
            assert_eq!(models.guided_eps(cfg, [1.0, 2.0], 0.6, &c).unwrap(), direct);
        }
    }

    #[test]
    fn oracle_cfg_zero_gap_fixed_point() {
        // a single condition owns all the mass, so conditional and marginal scores agree
        let spec = GmmSpec::new(vec![
            comp(0.4, [-1.0, 0.0], 1.0, Condition::token(3, 0)),
            comp(0.6, [1.5, 0.5], 0.5, Condition::token(3, 0)),
        ])
        .unwrap();
        let c = Condition::token(3, 0);
        let models = OracleModels::new(&spec, &spec).unwrap();
        for x in [[0.0, 0.0], [2.0, -1.0]] {
            let cond = datasets::analytic_eps(models.adapted(), x, 0.8, &c).unwrap();
            for lambda in [1.0, 3.0, 9.0] {
                let out = models.guided_eps(GuidanceConfig::cfg(lambda), x, 0.8, &c).unwrap();
                for k in 0..2 {
                    assert!((out[k] - cond[k]).abs() < 1e-12);
                }
            }
        }
    }
}
