//! Stochastic volatility model.
//!
//! x_0 ~ N(0, sigma_x^2 / (1 - phi^2))
//! x_{t+1} = mu (1 - phi) + phi x_t + sigma_x eta_t
//! y_t = eps_t exp(x_t / 2), equivalently y_t | x_t ~ N(0, exp(x_t)).
//!
//! theta = (mu, phi, sigma_x); the initial distribution is the stationary
//! one, so it depends on theta and filters must account for its score.

use crate::ad::{Tape, Var};
use crate::math;
use crate::ssm::{ModelError, StateSpaceModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvParams {
    pub mu: f64,
    pub phi: f64,
    pub sigma_x: f64,
}

impl SvParams {
    pub fn new(mu: f64, phi: f64, sigma_x: f64) -> Result<Self, ModelError> {
        if !(phi.abs() < 1.0) {
            return Err(ModelError::BadParameter("|phi| must be < 1"));
        }
        if !(sigma_x > 0.0) {
            return Err(ModelError::BadParameter("sigma_x must be > 0"));
        }
        Ok(SvParams { mu, phi, sigma_x })
    }

    pub fn to_vec(self) -> alloc::vec::Vec<f64> {
        alloc::vec![self.mu, self.phi, self.sigma_x]
    }

    /// Stationary variance sigma_x^2 / (1 - phi^2).
    pub fn stationary_var(&self) -> f64 {
        self.sigma_x * self.sigma_x / (1.0 - self.phi * self.phi)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SvModel;

impl SvModel {
    fn stationary_var_node(&self, tape: &Tape, theta: &[Var]) -> Var {
        let sig2 = tape.mul(theta[2], theta[2]);
        let phi2 = tape.mul(theta[1], theta[1]);
        let neg = tape.neg(phi2);
        let one_minus = tape.add_const(neg, 1.0);
        tape.div(sig2, one_minus)
    }

    fn transition_mean_node(&self, tape: &Tape, x_prev: Var, theta: &[Var]) -> Var {
        // mu (1 - phi) + phi x_prev
        let neg_phi = tape.neg(theta[1]);
        let one_minus = tape.add_const(neg_phi, 1.0);
        let level = tape.mul(theta[0], one_minus);
        let pull = tape.mul(theta[1], x_prev);
        tape.add(level, pull)
    }
}

impl StateSpaceModel for SvModel {
    fn dim_theta(&self) -> usize {
        3
    }

    fn name(&self) -> &'static str {
        "sv"
    }

    fn init_logpdf(&self, tape: &Tape, x0: Var, theta: &[Var]) -> Var {
        let mean = tape.constant(0.0);
        let var = self.stationary_var_node(tape, theta);
        tape.gauss_logpdf(x0, mean, var)
    }

    fn transition_logpdf(&self, tape: &Tape, x: Var, x_prev: Var, theta: &[Var]) -> Var {
        let mean = self.transition_mean_node(tape, x_prev, theta);
        let var = tape.mul(theta[2], theta[2]);
        tape.gauss_logpdf(x, mean, var)
    }

    fn observation_logpdf(&self, tape: &Tape, y: f64, x: Var, _theta: &[Var]) -> Var {
        let yv = tape.constant(y);
        let mean = tape.constant(0.0);
        let var = tape.exp(x);
        tape.gauss_logpdf(yv, mean, var)
    }

    fn init_sample(&self, eps: f64, theta: &[f64]) -> f64 {
        let var = theta[2] * theta[2] / (1.0 - theta[1] * theta[1]);
        math::sqrt(var) * eps
    }

    fn init_sample_node(&self, tape: &Tape, eps: f64, theta: &[Var]) -> Var {
        let var = self.stationary_var_node(tape, theta);
        let sd = tape.sqrt(var);
        tape.scale(sd, eps)
    }

    fn transition_sample(&self, eps: f64, x_prev: f64, theta: &[f64]) -> f64 {
        theta[0] * (1.0 - theta[1]) + theta[1] * x_prev + theta[2] * eps
    }

    fn transition_sample_node(&self, tape: &Tape, eps: f64, x_prev: Var, theta: &[Var]) -> Var {
        let mean = self.transition_mean_node(tape, x_prev, theta);
        let noise = tape.scale(theta[2], eps);
        tape.add(mean, noise)
    }

    fn observation_sample(&self, eps: f64, x: f64, _theta: &[f64]) -> f64 {
        eps * math::exp(x / 2.0)
    }

    fn init_depends_on_theta(&self) -> bool {
        true
    }
}
