//! State-space models with reparameterized sampling and tape-built
//! log-densities.
//!
//! A model supplies three log-densities (initial, transition, observation)
//! as tape expressions, plus value-level and tape-level samplers for the
//! same distributions. The tape-level samplers are the reparameterization
//! path: a sample is a deterministic function of the noise and the
//! parameters, so gradients can flow through it when a filter chooses to
//! keep that path alive.

mod kalman;
mod lgssm;
mod sv;

pub use kalman::{kalman_filter, kalman_loglik, KalmanStep};
pub use lgssm::{LgssmModel, LgssmParams};
pub use sv::{SvModel, SvParams};

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::ad::{Tape, Var};
use crate::rng::{streams, CounterRng};

#[derive(Debug)]
pub enum ModelError {
    /// Parameter outside its admissible region.
    BadParameter(&'static str),
    /// Observation sequence empty or containing non-finite values.
    BadData(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadParameter(s) => write!(f, "bad parameter: {s}"),
            ModelError::BadData(s) => write!(f, "bad data: {s}"),
        }
    }
}

/// A univariate state-space model with differentiable densities.
///
/// `theta` is passed as tape nodes so every density is differentiable in
/// the parameters; states enter as nodes too, which may be constants
/// (detached) or live reparameterized samples depending on the caller.
/// Models are immutable after construction and shared across replicate
/// workers (`Sync`); per-run state (tape, generators) stays thread-local.
pub trait StateSpaceModel: Sync {
    fn dim_theta(&self) -> usize;
    fn name(&self) -> &'static str;

    fn init_logpdf(&self, tape: &Tape, x0: Var, theta: &[Var]) -> Var;
    fn transition_logpdf(&self, tape: &Tape, x: Var, x_prev: Var, theta: &[Var]) -> Var;
    fn observation_logpdf(&self, tape: &Tape, y: f64, x: Var, theta: &[Var]) -> Var;

    /// x0 as a deterministic function of eps ~ N(0,1).
    fn init_sample(&self, eps: f64, theta: &[f64]) -> f64;
    /// Tape-level init sample (reparameterization path).
    fn init_sample_node(&self, tape: &Tape, eps: f64, theta: &[Var]) -> Var;

    /// x_t as a deterministic function of eps ~ N(0,1) and x_{t-1}.
    fn transition_sample(&self, eps: f64, x_prev: f64, theta: &[f64]) -> f64;
    /// Tape-level transition sample (reparameterization path).
    fn transition_sample_node(&self, tape: &Tape, eps: f64, x_prev: Var, theta: &[Var]) -> Var;

    /// y_t as a deterministic function of eps ~ N(0,1) and x_t.
    fn observation_sample(&self, eps: f64, x: f64, theta: &[f64]) -> f64;

    /// True iff the initial distribution depends on theta (decides whether
    /// filters must attach an initial-density score term).
    fn init_depends_on_theta(&self) -> bool;
}

/// Observation record, optionally tagged with how it was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub generating_model: Option<String>,
    pub generating_theta: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(y: Vec<f64>) -> Result<Self, ModelError> {
        if y.is_empty() {
            return Err(ModelError::BadData("empty observation sequence"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::BadData("non-finite observation"));
        }
        Ok(Dataset { y, generating_model: None, generating_theta: None, seed: None })
    }

    pub fn t_count(&self) -> usize {
        self.y.len()
    }
}

/// Forward-simulate a synthetic dataset; deterministic given the seed.
pub fn simulate(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    t_count: usize,
    seed: u64,
) -> Result<Dataset, ModelError> {
    if t_count == 0 {
        return Err(ModelError::BadData("t_count must be at least 1"));
    }
    let (xs, ys) = simulate_paths(model, theta, t_count, seed);
    let _ = xs;
    let mut data = Dataset::new(ys)?;
    data.generating_model = Some(String::from(model.name()));
    data.generating_theta = Some(theta.to_vec());
    data.seed = Some(seed);
    Ok(data)
}

/// Latent path and observations of a forward simulation.
pub fn simulate_paths(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    t_count: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut state_rng = CounterRng::new(seed, streams::SIM_STATE);
    let mut obs_rng = CounterRng::new(seed, streams::SIM_OBS);
    let mut xs = Vec::with_capacity(t_count + 1);
    let mut ys = Vec::with_capacity(t_count);
    let mut x = model.init_sample(state_rng.normal(), theta);
    xs.push(x);
    for _ in 0..t_count {
        x = model.transition_sample(state_rng.normal(), x, theta);
        xs.push(x);
        ys.push(model.observation_sample(obs_rng.normal(), x, theta));
    }
    (xs, ys)
}

/// Separately parameterized Gaussian proposal
/// `q(x_t | x_{t-1}, y_t) = N(a x_{t-1} + b y_t, exp(2c))` with
/// `phi = (a, b, c)`. Used to exercise proposal-parameter gradients with
/// the reparameterization path through the whole ancestral lineage.
#[derive(Clone, Copy, Debug, Default)]
pub struct GaussianProposal;

impl GaussianProposal {
    pub const DIM_PHI: usize = 3;

    pub fn sample(&self, eps: f64, x_prev: f64, y: f64, phi: &[f64]) -> f64 {
        phi[0] * x_prev + phi[1] * y + crate::math::exp(phi[2]) * eps
    }

    /// Tape-level sample: differentiable in phi and in x_prev.
    pub fn sample_node(&self, tape: &Tape, eps: f64, x_prev: Var, y: f64, phi: &[Var]) -> Var {
        let ax = tape.mul(phi[0], x_prev);
        let by = tape.scale(phi[1], y);
        let mean = tape.add(ax, by);
        let sd = tape.exp(phi[2]);
        let noise = tape.scale(sd, eps);
        tape.add(mean, noise)
    }

    pub fn logpdf(&self, tape: &Tape, x: Var, x_prev: Var, y: f64, phi: &[Var]) -> Var {
        let ax = tape.mul(phi[0], x_prev);
        let by = tape.scale(phi[1], y);
        let mean = tape.add(ax, by);
        let two_c = tape.scale(phi[2], 2.0);
        let variance = tape.exp(two_c);
        tape.gauss_logpdf(x, mean, variance)
    }
}
