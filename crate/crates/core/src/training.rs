//! Denoiser pretraining with condition dropout and personalization fine-tuning.
//!
//! Both loops minimise the denoising loss on freshly drawn batches:
//! `x_t = x + sigma * n` with `n ~ N(0, I)` and `sigma` log-uniform on
//! `[sigma_min, sigma_max]`; the network regresses `n`. Every step draws from
//! its own indexed substream so the result is a pure function of the seed.

use serde::{Deserialize, Serialize};

use crate::datasets::{Condition, GmmSpec, LabeledSamples};
use crate::denoiser::adapter::Adapter;
use crate::denoiser::{init_params, Architecture, ParamVector, TrainExample};
use crate::error::{Error, Result};
use crate::rng::{standard_normal2, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Full,
    /// Train only a rank-`r` delta per weight matrix.
    Adapter(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub p_drop: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Overridden by the experiment seed when run from a pipeline.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 128,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            p_drop: 0.1,
            sigma_min: 0.01,
            sigma_max: 10.0,
            mode: TrainMode::Full,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }

    pub fn finetune_default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 32,
            p_drop: 0.0,
            ..TrainConfig::pretrain_default()
        }
    }

    /// Checks the invariants and reports the offending field under `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::config(format!("{prefix}.{f}"), m));
        if self.steps == 0 {
            return err("steps", "must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return err("lr", "must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1", "Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return err("eps", "must be positive");
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return err("p_drop", "must lie in [0, 1)");
        }
        if !(self.sigma_min > 0.0) || !(self.sigma_max > self.sigma_min) || !self.sigma_max.is_finite() {
            return err("sigma_min", "need 0 < sigma_min < sigma_max");
        }
        if let TrainMode::Adapter(0) = self.mode {
            return err("mode", "adapter rank must be at least 1");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / self.steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        (lo + rng.random::<f64>() * (hi - lo)).exp()
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update in place. Coordinates whose update is exactly
/// zero keep their bits.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(params.len(), grad.len(), "adam: parameter/gradient length");
    assert_eq!(params.len(), state.m.len(), "adam: state length");
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(state.t.min(i32::MAX as u64) as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let update = lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        if update != 0.0 {
            *p -= update;
        }
    }
}

/// Trained parameters and the per-step minibatch loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut csv = crate::io::Csv::with_header(&["step", "loss"]);
        for (i, l) in self.losses.iter().enumerate() {
            csv.row([i.to_string(), l.to_string()]);
        }
        csv.into_string()
    }
}

/// Trains `theta` from scratch on `spec` with condition dropout.
pub fn pretrain(spec: &GmmSpec, arch: &Architecture, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate("pretrain")?;
    if spec.conditions().len() < 2 {
        return Err(Error::InvalidArgument("pretraining needs at least 2 conditions".into()));
    }
    for c in spec.conditions() {
        arch.check_condition(&c)?;
    }
    let params = init_params(arch, config.seed)?;
    let drawer = spec.drawer(None)?;
    let stream = Stream::new(config.seed, "pretrain");
    optimize(params, config, |step, batch| {
        let mut rng = stream.rng(step as u64);
        batch.clear();
        for _ in 0..config.batch_size {
            let (x, cond) = drawer.draw(&mut rng);
            batch.push(noisy_example(config, &mut rng, x, cond));
        }
    })
}

/// Fine-tunes `theta` on a handful of labeled target points.
pub fn finetune(theta: &ParamVector, target: &LabeledSamples, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate("finetune")?;
    if target.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning set is empty".into()));
    }
    if target.points.len() != target.conditions.len() {
        return Err(Error::InvalidArgument("points and conditions differ in length".into()));
    }
    for c in &target.conditions {
        if c.is_null() {
            return Err(Error::InvalidArgument("fine-tuning labels must be tokens".into()));
        }
        theta.arch().check_condition(c).map_err(|e| Error::ArchitectureMismatch(e.to_string()))?;
    }
    let stream = Stream::new(config.seed, "finetune");
    let n = target.len();
    optimize(theta.clone(), config, |step, batch| {
        let mut rng = stream.rng(step as u64);
        batch.clear();
        for _ in 0..config.batch_size {
            let i = rng.random_range(0..n);
            batch.push(noisy_example(config, &mut rng, target.points[i], target.conditions[i]));
        }
    })
}

fn noisy_example<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R, x: [f64; 2], cond: Condition) -> TrainExample {
    let drop = config.p_drop > 0.0 && rng.random::<f64>() < config.p_drop;
    let sigma = config.sample_sigma(rng);
    TrainExample {
        x,
        cond: if drop { Condition::Null } else { cond },
        sigma,
        noise: standard_normal2(rng),
    }
}

fn optimize<F>(start: ParamVector, config: &TrainConfig, mut fill_batch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &mut Vec<TrainExample>),
{
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut losses = Vec::with_capacity(config.steps);
    let mut grad = vec![0.0; start.len()];
    match config.mode {
        TrainMode::Full => {
            let mut params = start;
            let mut adam = AdamState::new(params.len(), config.beta1, config.beta2, config.eps);
            for step in 0..config.steps {
                fill_batch(step, &mut batch);
                let loss = params
                    .loss_and_grad_into(&batch, &mut grad)
                    .map_err(|e| diverged(step, e))?;
                check_loss(step, loss)?;
                losses.push(loss);
                adam_step(&mut adam, params.values_mut(), &grad, config.lr_at(step));
            }
            Ok(TrainOutcome { params, losses })
        }
        TrainMode::Adapter(rank) => {
            let mut adapter = Adapter::new(start, rank, config.seed)?;
            let mut adam = AdamState::new(adapter.factors().len(), config.beta1, config.beta2, config.eps);
            let mut fgrad = vec![0.0; adapter.factors().len()];
            for step in 0..config.steps {
                fill_batch(step, &mut batch);
                let current = adapter.materialize();
                let loss = current
                    .loss_and_grad_into(&batch, &mut grad)
                    .map_err(|e| diverged(step, e))?;
                check_loss(step, loss)?;
                losses.push(loss);
                adapter.project_grad(&grad, &mut fgrad);
                adam_step(&mut adam, adapter.factors_mut(), &fgrad, config.lr_at(step));
            }
            Ok(TrainOutcome {
                params: adapter.materialize(),
                losses,
            })
        }
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteBatch { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

/// Fixed Monte Carlo estimate of the denoising loss on a labeled set.
///
/// Every point gets `draws` (sigma, noise) pairs from substream `i` of
/// `(seed, "target-loss")`, so different parameter vectors are compared on
/// identical noise.
pub fn target_loss(
    params: &ParamVector,
    target: &LabeledSamples,
    sigma_range: (f64, f64),
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let batch = target_loss_batch(target, sigma_range, draws, seed)?;
    params.loss(&batch)
}

pub fn target_loss_batch(
    target: &LabeledSamples,
    sigma_range: (f64, f64),
    draws: usize,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    if target.is_empty() || draws == 0 {
        return Err(Error::InvalidArgument("need at least one point and one draw".into()));
    }
    let cfg = TrainConfig {
        sigma_min: sigma_range.0,
        sigma_max: sigma_range.1,
        p_drop: 0.0,
        ..TrainConfig::finetune_default()
    };
    cfg.validate("target_loss")?;
    let stream = Stream::new(seed, "target-loss");
    let mut batch = Vec::with_capacity(target.len() * draws);
    for (i, (x, c)) in target.points.iter().zip(&target.conditions).enumerate() {
        let mut rng = stream.rng(i as u64);
        for _ in 0..draws {
            batch.push(noisy_example(&cfg, &mut rng, *x, *c));
        }
    }
    Ok(batch)
}

/// Non-overlapping block means of the second half of a loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrend {
    pub block_means: Vec<f64>,
    pub block_std_errors: Vec<f64>,
}

impl LossTrend {
    pub fn second_half(losses: &[f64], window: usize) -> Self {
        let half = &losses[losses.len() / 2..];
        let mut block_means = Vec::new();
        let mut block_std_errors = Vec::new();
        for block in half.chunks_exact(window.max(2)) {
            let n = block.len() as f64;
            let mean = block.iter().sum::<f64>() / n;
            let var = block.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
            block_means.push(mean);
            block_std_errors.push((var / n).sqrt());
        }
        LossTrend {
            block_means,
            block_std_errors,
        }
    }

    /// Largest block-to-block increase measured in standard errors of the
    /// difference; `<= 0` means the block means never increase.
    pub fn max_increase_in_se(&self) -> f64 {
        self.block_means
            .windows(2)
            .zip(self.block_std_errors.windows(2))
            .map(|(m, s)| (m[1] - m[0]) / (s[0] * s[0] + s[1] * s[1]).sqrt().max(1e-300))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_pretrain_spec, make_target_spec, sample_dataset};
    use crate::test_support::{small_data_config, tiny_arch};

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut st = AdamState::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut st, &mut p, &[0.0; 3], 0.1);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_formula() {
        let g = [0.3, -2.0, 1e-9];
        let mut st = AdamState::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0; 3];
        adam_step(&mut st, &mut p, &g, 0.01);
        for i in 0..3 {
            // bias-corrected moments after one step are g and g^2
            let expect = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() <= 1e-15, "{} vs {expect}", p[i]);
        }
    }

    #[test]
    fn adam_constant_grad_update_tends_to_lr() {
        let mut st = AdamState::new(1, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam_step(&mut st, &mut p, &[0.37], 1e-3);
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::pretrain_default();
        c.steps = 0;
        let e = c.validate("pretrain").unwrap_err();
        assert!(e.to_string().contains("pretrain.steps"), "{e}");
        let mut c = TrainConfig::pretrain_default();
        c.p_drop = 1.0;
        assert!(c.validate("x").is_err());
        let mut c = TrainConfig::pretrain_default();
        c.sigma_min = 20.0;
        assert!(c.validate("x").is_err());
    }

    #[test]
    fn pretrain_rejects_zero_steps_and_is_deterministic() {
        let data = small_data_config();
        let spec = make_pretrain_spec(&data).unwrap();
        let arch = tiny_arch(&data);
        let mut cfg = TrainConfig::pretrain_default();
        cfg.steps = 0;
        assert!(pretrain(&spec, &arch, &cfg).is_err());
        cfg.steps = 40;
        cfg.batch_size = 16;
        cfg.seed = 3;
        let a = pretrain(&spec, &arch, &cfg).unwrap();
        let b = pretrain(&spec, &arch, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 40);
    }

    fn setup() -> (ParamVector, LabeledSamples, TrainConfig) {
        let data = small_data_config();
        let spec = make_pretrain_spec(&data).unwrap();
        let arch = tiny_arch(&data);
        let mut cfg = TrainConfig::pretrain_default();
        cfg.steps = 300;
        cfg.batch_size = 32;
        cfg.seed = 1;
        let theta = pretrain(&spec, &arch, &cfg).unwrap().params;
        let tspec = make_target_spec(&data).unwrap();
        let base = Condition::token(data.target.concept, 0);
        let target = sample_dataset(&tspec, 6, 9, Some(&base)).unwrap();
        let mut ft = TrainConfig::finetune_default();
        ft.seed = 2;
        (theta, target, ft)
    }

    #[test]
    fn finetune_with_zero_lr_is_noop() {
        let (theta, target, mut ft) = setup();
        ft.lr = 0.0;
        ft.steps = 20;
        assert_eq!(finetune(&theta, &target, &ft).unwrap().params, theta);
        ft.mode = TrainMode::Adapter(4);
        assert_eq!(finetune(&theta, &target, &ft).unwrap().params, theta);
    }

    #[test]
    fn finetune_reduces_target_loss() {
        let (theta, target, ft) = setup();
        let out = finetune(&theta, &target, &ft).unwrap();
        let head: f64 = out.losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = out.losses[out.losses.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{head} -> {tail}");
        let range = (ft.sigma_min, ft.sigma_max);
        let before = target_loss(&theta, &target, range, 64, 77).unwrap();
        let after = target_loss(&out.params, &target, range, 64, 77).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn adapter_finetune_reduces_target_loss() {
        let (theta, target, mut ft) = setup();
        ft.mode = TrainMode::Adapter(4);
        let out = finetune(&theta, &target, &ft).unwrap();
        assert_eq!(out.params.arch(), theta.arch());
        let range = (ft.sigma_min, ft.sigma_max);
        let before = target_loss(&theta, &target, range, 64, 77).unwrap();
        let after = target_loss(&out.params, &target, range, 64, 77).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn finetune_rejects_bad_inputs() {
        let (theta, mut target, ft) = setup();
        let empty = LabeledSamples {
            points: vec![],
            conditions: vec![],
            seed: 0,
        };
        assert!(finetune(&theta, &empty, &ft).is_err());
        target.conditions[0] = Condition::token(99, 0);
        assert!(matches!(finetune(&theta, &target, &ft), Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn loss_trend_blocks() {
        let losses: Vec<f64> = (0..4000).map(|i| 1.0 / (1.0 + i as f64) + 0.01 * ((i % 7) as f64)).collect();
        let t = LossTrend::second_half(&losses, 500);
        assert_eq!(t.block_means.len(), 4);
        assert!(t.max_increase_in_se() < 3.0);
    }
}
