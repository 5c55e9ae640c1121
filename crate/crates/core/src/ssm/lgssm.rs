//! Linear-Gaussian state-space model with two learnable multipliers.
//!
//! x_0 ~ N(0, init_var), x_t = theta1 x_{t-1} + w_t, y_t = theta2 x_t + v_t
//! with fixed noise variances. The linear-Gaussian structure admits an
//! exact Kalman evaluation of log p(y_{1:T}), which every Monte-Carlo
//! claim in this crate is checked against.

use crate::ad::{Tape, Var};
use crate::math;
use crate::ssm::{ModelError, StateSpaceModel};

/// Learnable parameters: transition and emission multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LgssmParams {
    pub theta1: f64,
    pub theta2: f64,
}

impl LgssmParams {
    pub fn to_vec(self) -> alloc::vec::Vec<f64> {
        alloc::vec![self.theta1, self.theta2]
    }
}

/// The model with its fixed (non-learned) noise variances.
#[derive(Clone, Copy, Debug)]
pub struct LgssmModel {
    pub trans_var: f64,
    pub obs_var: f64,
    pub init_var: f64,
}

impl Default for LgssmModel {
    fn default() -> Self {
        LgssmModel { trans_var: 1.0, obs_var: 1.0, init_var: 1.0 }
    }
}

impl LgssmModel {
    pub fn new(trans_var: f64, obs_var: f64, init_var: f64) -> Result<Self, ModelError> {
        if trans_var <= 0.0 || obs_var <= 0.0 || init_var <= 0.0 {
            return Err(ModelError::BadParameter("variances must be positive"));
        }
        Ok(LgssmModel { trans_var, obs_var, init_var })
    }
}

impl StateSpaceModel for LgssmModel {
    fn dim_theta(&self) -> usize {
        2
    }

    fn name(&self) -> &'static str {
        "lgssm"
    }

    fn init_logpdf(&self, tape: &Tape, x0: Var, _theta: &[Var]) -> Var {
        let mean = tape.constant(0.0);
        let var = tape.constant(self.init_var);
        tape.gauss_logpdf(x0, mean, var)
    }

    fn transition_logpdf(&self, tape: &Tape, x: Var, x_prev: Var, theta: &[Var]) -> Var {
        let mean = tape.mul(theta[0], x_prev);
        let var = tape.constant(self.trans_var);
        tape.gauss_logpdf(x, mean, var)
    }

    fn observation_logpdf(&self, tape: &Tape, y: f64, x: Var, theta: &[Var]) -> Var {
        let yv = tape.constant(y);
        let mean = tape.mul(theta[1], x);
        let var = tape.constant(self.obs_var);
        tape.gauss_logpdf(yv, mean, var)
    }

    fn init_sample(&self, eps: f64, _theta: &[f64]) -> f64 {
        math::sqrt(self.init_var) * eps
    }

    fn init_sample_node(&self, tape: &Tape, eps: f64, _theta: &[Var]) -> Var {
        tape.constant(math::sqrt(self.init_var) * eps)
    }

    fn transition_sample(&self, eps: f64, x_prev: f64, theta: &[f64]) -> f64 {
        theta[0] * x_prev + math::sqrt(self.trans_var) * eps
    }

    fn transition_sample_node(&self, tape: &Tape, eps: f64, x_prev: Var, theta: &[Var]) -> Var {
        let drift = tape.mul(theta[0], x_prev);
        let noise = tape.constant(math::sqrt(self.trans_var) * eps);
        tape.add(drift, noise)
    }

    fn observation_sample(&self, eps: f64, x: f64, theta: &[f64]) -> f64 {
        theta[1] * x + math::sqrt(self.obs_var) * eps
    }

    fn init_depends_on_theta(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_density_at_mode() {
        let tape = Tape::new();
        let model = LgssmModel::default();
        let theta = [tape.input(0.9), tape.input(1.0)];
        let x = tape.constant(0.0);
        let prev = tape.constant(0.0);
        let lp = model.transition_logpdf(&tape, x, prev, &theta);
        assert!((tape.value(lp) + 0.5 * math::LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn proposal_mean_is_reparam_at_zero_noise() {
        let model = LgssmModel::default();
        assert!((model.transition_sample(0.0, 2.0, &[0.9, 1.0]) - 1.8).abs() < 1e-15);
    }

    #[test]
    fn density_gradients_match_finite_differences() {
        let model = LgssmModel::default();
        let eval = |th: &[f64]| {
            let tape = Tape::new();
            let tv: alloc::vec::Vec<Var> = th.iter().map(|&v| tape.input(v)).collect();
            let x = tape.constant(0.4);
            let prev = tape.constant(-0.2);
            let lp1 = model.transition_logpdf(&tape, x, prev, &tv);
            let lp2 = model.observation_logpdf(&tape, 0.7, x, &tv);
            tape.value(tape.add(lp1, lp2))
        };
        let theta = [0.9, 1.1];
        let fd = crate::ad::finite_difference(eval, &theta, 1e-6).unwrap();

        let tape = Tape::new();
        let tv: alloc::vec::Vec<Var> = theta.iter().map(|&v| tape.input(v)).collect();
        let x = tape.constant(0.4);
        let prev = tape.constant(-0.2);
        let lp1 = model.transition_logpdf(&tape, x, prev, &tv);
        let lp2 = model.observation_logpdf(&tape, 0.7, x, &tv);
        let total = tape.add(lp1, lp2);
        let g = tape.grad_values(total, &tv).unwrap();
        for k in 0..2 {
            let denom = fd[k].abs().max(1.0);
            assert!((g[k] - fd[k]).abs() / denom < 1e-6, "coord {k}: {} vs {}", g[k], fd[k]);
        }
    }
}
