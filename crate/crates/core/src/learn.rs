//! Gradient-ascent parameter learning with pluggable gradient sources.
//!
//! One filter pass per epoch; the gradient of the log-normalizer steps
//! the parameters. The optimizer works in unconstrained coordinates (see
//! [`ParamTransform`]) and the trace records natural parameters.

use alloc::vec;
use alloc::vec::Vec;

use crate::estimators::fisher_score;
use crate::filter::{run_filter, FilterConfig, FilterError, Wrt};
use crate::math;
use crate::rng::{derive_seed, streams};
use crate::ssm::{Dataset, StateSpaceModel};

/// Wall-clock source; the core is freestanding, so timing is injected.
pub trait Clock {
    fn now_secs(&self) -> f64;
}

/// Clock that always reads zero (for environments without a timer).
pub struct NoClock;

impl Clock for NoClock {
    fn now_secs(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

/// First-order ascent state. Adam uses the usual bias-corrected moments.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64, dim: usize) -> Self {
        assert!(learning_rate > 0.0);
        OptimizerState {
            kind: OptKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn adam(learning_rate: f64, dim: usize) -> Self {
        OptimizerState { kind: OptKind::Adam, ..OptimizerState::sgd(learning_rate, dim) }
    }

    /// Ascent step: params += direction(grad).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step_count += 1;
        match self.kind {
            OptKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.learning_rate * g;
                }
            }
            OptKind::Adam => {
                let t = self.step_count as f64;
                let bc1 = 1.0 - math::powf(self.beta1, t);
                let bc2 = 1.0 - math::powf(self.beta2, t);
                for k in 0..params.len() {
                    self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
                    self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
                    let mhat = self.m[k] / bc1;
                    let vhat = self.v[k] / bc2;
                    params[k] += self.learning_rate * mhat / (math::sqrt(vhat) + self.eps);
                }
            }
        }
    }
}

/// Which estimate drives the ascent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradSource {
    /// Differentiate the run's objective on the tape.
    Ad,
    /// The Fisher-identity oracle at the run's realized lineages (mapped
    /// through the transform's Jacobian when one is active).
    FisherOracle,
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Natural-parameter estimate after this epoch's step.
    pub theta: Vec<f64>,
    pub train_logz: f64,
    pub test_logz: f64,
    pub grad_norm: f64,
    /// L1 distance to the generating parameters (NaN when unknown).
    pub l1_error: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn final_theta(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.theta.as_slice())
    }
}

#[derive(Debug)]
pub enum LearnError {
    Filter(FilterError),
    /// Parameters or gradients left the finite region; carries the trace
    /// accumulated so far.
    Diverged { epoch: usize, trace: TrainTrace },
}

impl From<FilterError> for LearnError {
    fn from(e: FilterError) -> Self {
        LearnError::Filter(e)
    }
}

impl core::fmt::Display for LearnError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LearnError::Filter(e) => write!(f, "filter failure: {e}"),
            LearnError::Diverged { epoch, .. } => write!(f, "training diverged at epoch {epoch}"),
        }
    }
}

/// Everything a training loop needs besides the optimizer.
pub struct TrainSetup<'a> {
    pub model: &'a dyn StateSpaceModel,
    pub train: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub cfg: FilterConfig,
    pub grad_source: GradSource,
    /// Reference parameters for the error column (natural space).
    pub true_theta: Option<Vec<f64>>,
    /// Fix the filter randomness across epochs instead of drawing a new
    /// substream per epoch (debugging aid).
    pub fixed_noise: bool,
    pub epochs: usize,
}

/// Gradient ascent on the filter's log-normalizer estimate.
///
/// `theta0` is given in natural space; the optimizer runs in the
/// transform's unconstrained coordinates. Deterministic given the config
/// seed.
pub fn train(
    setup: &TrainSetup<'_>,
    opt: &mut OptimizerState,
    theta0: &[f64],
    clock: &dyn Clock,
) -> Result<TrainTrace, LearnError> {
    let transform = setup.cfg.transform;
    let mut u = transform.from_natural(theta0);
    let mut trace = TrainTrace::default();

    let start = clock.now_secs();
    for epoch in 0..setup.epochs {
        let mut cfg = setup.cfg.clone();
        if !setup.fixed_noise {
            cfg.seed = derive_seed(setup.cfg.seed, &[streams::EPOCH, epoch as u64]);
        }
        let run = run_filter(setup.model, setup.train, &u, &[], &cfg)?;
        let grad = match setup.grad_source {
            GradSource::Ad => run.logzhat_gradient(Wrt::Theta)?,
            GradSource::FisherOracle => {
                let nat = fisher_score(&run, setup.model, &setup.train.y)?;
                let jac = transform.jacobian_diag(&u);
                nat.iter().zip(&jac)
                    .map(|(g, j)| g * j)
                    .collect()
            }
        };
        let grad_norm = math::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        let train_logz = run.logzhat_value();
        if !grad_norm.is_finite() {
            return Err(LearnError::Diverged { epoch, trace });
        }
        opt.step(&mut u, &grad);
        if u.iter().any(|p| !p.is_finite() || math::abs(*p) > 1e6) {
            return Err(LearnError::Diverged { epoch, trace });
        }

        let theta_nat = transform.to_natural(&u);
        let test_logz = match setup.test {
            Some(test) => {
                let mut test_cfg = setup.cfg.clone();
                // one fixed evaluation seed keeps the test column's noise
                // constant across epochs
                test_cfg.seed = derive_seed(setup.cfg.seed, &[streams::EVAL]);
                run_filter(setup.model, test, &u, &[], &test_cfg)?.logzhat_value()
            }
            None => f64::NAN,
        };
        let l1_error = match &setup.true_theta {
            Some(truth) => truth.iter().zip(&theta_nat).map(|(a, b)| math::abs(a - b)).sum(),
            None => f64::NAN,
        };
        trace.records.push(EpochRecord {
            epoch,
            theta: theta_nat,
            train_logz,
            test_logz,
            grad_norm,
            l1_error,
            seconds: clock.now_secs() - start,
        });
    }
    Ok(trace)
}

/// Replicate-averaged log-normalizer estimate with its standard error.
pub fn evaluate(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    theta: &[f64],
    cfg: &FilterConfig,
    replicates: usize,
) -> Result<(f64, f64), LearnError> {
    assert!(replicates >= 1);
    let mut samples = Vec::with_capacity(replicates);
    for rep in 0..replicates {
        let mut rep_cfg = cfg.clone();
        rep_cfg.seed = derive_seed(cfg.seed, &[streams::REPLICATE, rep as u64]);
        samples.push(run_filter(model, data, theta, &[], &rep_cfg)?.logzhat_value());
    }
    Ok(math::mean_se(&samples))
}
