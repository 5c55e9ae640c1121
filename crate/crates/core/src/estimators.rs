//! Hand-implemented oracle estimators used to verify the tape's gradients.
//!
//! Every oracle recomputes densities on fresh tapes at the run's realized
//! (detached) states, so a bug in the filter's tape plumbing cannot hide
//! on both sides of a comparison. Gradients returned by oracles are with
//! respect to the *natural* model parameters.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::ad::{Tape, Var};
use crate::filter::{FilterError, FilterRun, Proposal, ThetaMode, Variant};
use crate::math;
use crate::rng::{streams, CounterRng};
use crate::ssm::{GaussianProposal, StateSpaceModel};

/// Where a reported estimate came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    AdPath,
    OracleFormula,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReportValue {
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl ReportValue {
    pub fn is_finite(&self) -> bool {
        match self {
            ReportValue::Vector(v) => v.iter().all(|x| x.is_finite()),
            ReportValue::Matrix(m) => m.iter().flatten().all(|x| x.is_finite()),
        }
    }

    /// Largest relative difference against another value of the same shape.
    pub fn max_rel_diff(&self, other: &ReportValue) -> f64 {
        fn rel(a: f64, b: f64) -> f64 {
            (a - b).abs() / a.abs().max(b.abs()).max(1.0)
        }
        match (self, other) {
            (ReportValue::Vector(a), ReportValue::Vector(b)) => {
                a.iter().zip(b).map(|(&x, &y)| rel(x, y)).fold(0.0, f64::max)
            }
            (ReportValue::Matrix(a), ReportValue::Matrix(b)) => a
                .iter()
                .flatten()
                .zip(b.iter().flatten())
                .map(|(&x, &y)| rel(x, y))
                .fold(0.0, f64::max),
            _ => f64::INFINITY,
        }
    }
}

/// A named gradient or Hessian estimate with its provenance.
#[derive(Clone, Debug)]
pub struct EstimatorReport {
    pub name: String,
    pub seed: u64,
    pub value: ReportValue,
    pub provenance: Provenance,
}

fn theta_nat_values(run: &FilterRun) -> Vec<f64> {
    run.tape.values(&run.theta_nat)
}

fn terminal_weights(run: &FilterRun) -> Vec<f64> {
    run.logw_norm_values[run.t_count()].iter().map(|&lw| math::exp(lw)).collect()
}

/// log p(x_path, y) on `tape` for one realized trajectory: initial,
/// transition and observation terms, states held constant.
fn lineage_logjoint(
    tape: &Tape,
    model: &dyn StateSpaceModel,
    theta: &[Var],
    states: &[f64],
    y: &[f64],
) -> Var {
    let x0 = tape.constant(states[0]);
    let mut total = model.init_logpdf(tape, x0, theta);
    let mut prev = x0;
    for (t, &yt) in y.iter().enumerate() {
        let x = tape.constant(states[t + 1]);
        let trans = model.transition_logpdf(tape, x, prev, theta);
        let obs = model.observation_logpdf(tape, yt, x, theta);
        let step = tape.add(trans, obs);
        total = tape.add(total, step);
        prev = x;
    }
    total
}

/// Score estimator from Fisher's identity: the weighted average over
/// surviving lineages of the full joint score at fixed states.
pub fn fisher_score(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
) -> Result<Vec<f64>, FilterError> {
    let n = run.n_particles();
    let theta_vals = theta_nat_values(run);
    let w = terminal_weights(run);
    let tape = Tape::new();
    let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
    let mut weighted = Vec::with_capacity(n);
    for i in 0..n {
        let states = run.lineage_states(i)?;
        let lj = lineage_logjoint(&tape, model, &theta, &states, y);
        weighted.push(tape.scale(lj, w[i]));
    }
    let total = tape.add_many(&weighted);
    Ok(tape.grad_values(total, &theta)?)
}

/// Per-lineage joint scores and Hessians at fixed states.
fn lineage_scores_hessians(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>), FilterError> {
    let n = run.n_particles();
    let theta_vals = theta_nat_values(run);
    let mut scores = Vec::with_capacity(n);
    let mut hessians = Vec::with_capacity(n);
    for i in 0..n {
        let states = run.lineage_states(i)?;
        let tape = Tape::new();
        let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
        let lj = lineage_logjoint(&tape, model, &theta, &states, y);
        let g = tape.grad(lj, &theta)?;
        scores.push(g.values(&tape));
        let mut h = Vec::with_capacity(theta.len());
        for &gk in &g.adjoints {
            h.push(tape.grad_values(gk, &theta)?);
        }
        hessians.push(h);
    }
    Ok((scores, hessians))
}

/// Louis'-identity Hessian estimator:
/// `-g_bar g_bar^T + sum_i w_i (H_i + g_i g_i^T)` over surviving
/// lineages, with `g_bar = sum_i w_i g_i`.
pub fn louis_hessian(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
) -> Result<Vec<Vec<f64>>, FilterError> {
    let d = run.theta_nat.len();
    let w = terminal_weights(run);
    let (scores, hessians) = lineage_scores_hessians(run, model, y)?;
    let mut gbar = vec![0.0; d];
    for (wi, gi) in w.iter().zip(&scores) {
        for k in 0..d {
            gbar[k] += wi * gi[k];
        }
    }
    let mut out = vec![vec![0.0; d]; d];
    for r in 0..d {
        for c in 0..d {
            let mut acc = -gbar[r] * gbar[c];
            for i in 0..w.len() {
                acc += w[i] * (hessians[i][r][c] + scores[i][r] * scores[i][c]);
            }
            out[r][c] = acc;
        }
    }
    Ok(out)
}

/// Which algebraic form of the mixture recursion to use; the two are
/// equal because the observation factor is common to every component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaForm {
    JointDensity,
    TransitionOnly,
}

/// Reduced-variance score estimator for marginal-filter runs: a running
/// per-particle score updated by mixture-weighted averaging.
pub fn alpha_recursion_score(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
    form: AlphaForm,
) -> Result<Vec<f64>, FilterError> {
    if !run.config.variant.is_marginal() {
        return Err(FilterError::Unsupported(
            "the alpha recursion applies to marginal-filter runs",
        ));
    }
    let n = run.n_particles();
    let d = run.theta_nat.len();
    let theta_vals = theta_nat_values(run);

    // alpha at generation 0: score of the initial density per particle
    let mut alpha: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            if model.init_depends_on_theta() {
                let tape = Tape::new();
                let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
                let x0 = tape.constant(run.states[0][i]);
                let lp = model.init_logpdf(&tape, x0, &theta);
                tape.grad_values(lp, &theta).unwrap_or_else(|_| vec![0.0; d])
            } else {
                vec![0.0; d]
            }
        })
        .collect();

    for (step, &yt) in y.iter().enumerate() {
        let t = step + 1;
        let prev_lw = &run.logw_norm_values[t - 1];
        let mut new_alpha = Vec::with_capacity(n);
        for i in 0..n {
            // per-pair densities and scores on one fresh tape per particle
            let tape = Tape::new();
            let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
            let x = tape.constant(run.states[t][i]);
            let obs = model.observation_logpdf(&tape, yt, x, &theta);
            let obs_val = tape.value(obs);
            let obs_grad = tape.grad_values(obs, &theta)?;
            let mut log_mix = Vec::with_capacity(n);
            let mut joint_scores = Vec::with_capacity(n);
            for j in 0..n {
                let prev = tape.constant(run.states[t - 1][j]);
                let trans = model.transition_logpdf(&tape, x, prev, &theta);
                let trans_grad = tape.grad_values(trans, &theta)?;
                let lm = match form {
                    AlphaForm::JointDensity => prev_lw[j] + tape.value(trans) + obs_val,
                    AlphaForm::TransitionOnly => prev_lw[j] + tape.value(trans),
                };
                log_mix.push(lm);
                joint_scores.push(
                    trans_grad.iter().zip(&obs_grad).map(|(a, b)| a + b).collect::<Vec<f64>>(),
                );
            }
            let lse = math::logsumexp(&log_mix);
            let mut acc = vec![0.0; d];
            for j in 0..n {
                let m = math::exp(log_mix[j] - lse);
                for k in 0..d {
                    acc[k] += m * (alpha[j][k] + joint_scores[j][k]);
                }
            }
            new_alpha.push(acc);
        }
        alpha = new_alpha;
    }

    let w = terminal_weights(run);
    let mut out = vec![0.0; d];
    for (wi, ai) in w.iter().zip(&alpha) {
        for k in 0..d {
            out[k] += wi * ai[k];
        }
    }
    Ok(out)
}

/// Proposal-parameter score through the lineage reparameterization:
/// rebuild each surviving trajectory as a deterministic function of its
/// noise history and phi, then differentiate the accumulated importance
/// weight `log p/q` along it.
pub fn phi_lineage_score(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
) -> Result<Vec<f64>, FilterError> {
    if run.config.proposal != Proposal::Learned {
        return Err(FilterError::Unsupported("phi gradients require the learned proposal"));
    }
    let n = run.n_particles();
    let theta_vals = theta_nat_values(run);
    let phi_vals = run.tape.values(&run.phi);
    let w = terminal_weights(run);
    let proposal = GaussianProposal;

    let tape = Tape::new();
    let phi: Vec<Var> = phi_vals.iter().map(|&v| tape.input(v)).collect();
    let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.constant(v)).collect();
    let mut weighted = Vec::with_capacity(n);
    for i in 0..n {
        let eps = run.lineage_eps(i)?;
        let path = run.lineage(i)?;
        let mut x_prev = tape.constant(run.states[0][path[0]]);
        let mut terms = Vec::new();
        for (step, &yt) in y.iter().enumerate() {
            let x = proposal.sample_node(&tape, eps[step + 1], x_prev, yt, &phi);
            let trans = model.transition_logpdf(&tape, x, x_prev, &theta);
            let obs = model.observation_logpdf(&tape, yt, x, &theta);
            let q = proposal.logpdf(&tape, x, x_prev, yt, &phi);
            let po = tape.add(trans, obs);
            terms.push(tape.sub(po, q));
            x_prev = x;
        }
        let ratio = tape.add_many(&terms);
        weighted.push(tape.scale(ratio, w[i]));
    }
    let total = tape.add_many(&weighted);
    Ok(tape.grad_values(total, &phi)?)
}

/// A differentiable function of one trajectory and theta, evaluable both
/// as a number and as a tape expression.
pub trait LineageFn {
    fn eval(&self, states: &[f64], theta: &[f64]) -> f64;
    fn build(&self, tape: &Tape, states: &[Var], theta: &[Var]) -> Var;
}

/// f(x) = x_T.
pub struct TerminalState;

impl LineageFn for TerminalState {
    fn eval(&self, states: &[f64], _theta: &[f64]) -> f64 {
        states[states.len() - 1]
    }
    fn build(&self, _tape: &Tape, states: &[Var], _theta: &[Var]) -> Var {
        states[states.len() - 1]
    }
}

/// f(x, theta) = theta_0 * x_T; exercises the partial-derivative term.
pub struct ScaledTerminalState;

impl LineageFn for ScaledTerminalState {
    fn eval(&self, states: &[f64], theta: &[f64]) -> f64 {
        theta[0] * states[states.len() - 1]
    }
    fn build(&self, tape: &Tape, states: &[Var], theta: &[Var]) -> Var {
        tape.mul(theta[0], states[states.len() - 1])
    }
}

/// f constant in both arguments.
pub struct ConstantFn(pub f64);

impl LineageFn for ConstantFn {
    fn eval(&self, _states: &[f64], _theta: &[f64]) -> f64 {
        self.0
    }
    fn build(&self, tape: &Tape, _states: &[Var], _theta: &[Var]) -> Var {
        tape.constant(self.0)
    }
}

/// Oracle gradients for posterior expectations of `f`.
pub struct PosteriorExpectation {
    /// Forward estimate sum_i w_i f(lineage_i).
    pub fbar: f64,
    /// Gradient of the normalized-posterior expectation, with the
    /// forward average as baseline.
    pub grad_normalized: Vec<f64>,
    /// Zhat times the expectation under the posterior.
    pub value_unnormalized: f64,
    /// Gradient of the unnormalized-posterior expectation
    /// `Zhat * sum_i w_i (f grad log p + grad f)`.
    pub grad_unnormalized: Vec<f64>,
}

/// Closed-form oracles for the two differentiable-filter expectation
/// gradients (normalized with baseline, and unnormalized).
pub fn posterior_expectation(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
    f: &dyn LineageFn,
) -> Result<PosteriorExpectation, FilterError> {
    let n = run.n_particles();
    let d = run.theta_nat.len();
    let theta_vals = theta_nat_values(run);
    let w = terminal_weights(run);
    let zhat = math::exp(run.logzhat_value());

    let mut f_vals = Vec::with_capacity(n);
    let mut f_grads = Vec::with_capacity(n);
    let mut joint_scores = Vec::with_capacity(n);
    for i in 0..n {
        let states = run.lineage_states(i)?;
        f_vals.push(f.eval(&states, &theta_vals));
        let tape = Tape::new();
        let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
        let state_nodes: Vec<Var> = states.iter().map(|&s| tape.constant(s)).collect();
        let fx = f.build(&tape, &state_nodes, &theta);
        f_grads.push(tape.grad_values(fx, &theta)?);
        let lj = lineage_logjoint(&tape, model, &theta, &states, y);
        joint_scores.push(tape.grad_values(lj, &theta)?);
    }
    let fbar: f64 = w.iter().zip(&f_vals).map(|(wi, fi)| wi * fi).sum();

    let mut grad_normalized = vec![0.0; d];
    let mut grad_unnormalized = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            grad_normalized[k] += w[i] * ((f_vals[i] - fbar) * joint_scores[i][k] + f_grads[i][k]);
            grad_unnormalized[k] += zhat * w[i] * (f_vals[i] * joint_scores[i][k] + f_grads[i][k]);
        }
    }
    Ok(PosteriorExpectation {
        fbar,
        grad_normalized,
        value_unnormalized: zhat * fbar,
        grad_unnormalized,
    })
}

/// AD counterpart of the normalized expectation: differentiate
/// `sum_i w_T^i f(lineage_i)` built on the run's own tape.
pub fn ad_expectation_normalized(run: &FilterRun, f: &dyn LineageFn) -> Result<Vec<f64>, FilterError> {
    let fx = build_expectation_node(run, f)?;
    Ok(run.tape.grad_values(fx, &run.theta)?)
}

/// AD counterpart of the unnormalized expectation: differentiate
/// `Zhat * sum_i w_T^i f(lineage_i)` on the run's tape.
pub fn ad_expectation_unnormalized(
    run: &FilterRun,
    f: &dyn LineageFn,
) -> Result<Vec<f64>, FilterError> {
    let fx = build_expectation_node(run, f)?;
    let zhat = run.tape.exp(run.logzhat);
    let obj = run.tape.mul(zhat, fx);
    Ok(run.tape.grad_values(obj, &run.theta)?)
}

fn build_expectation_node(run: &FilterRun, f: &dyn LineageFn) -> Result<Var, FilterError> {
    let tape = &run.tape;
    let n = run.n_particles();
    let t = run.t_count();
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let path = run.lineage(i)?;
        let state_nodes: Vec<Var> = (0..=t).map(|s| run.state_nodes[s][path[s]]).collect();
        let fx = f.build(tape, &state_nodes, &run.theta_nat);
        let wi = tape.exp(run.logw_norm_nodes[t][i]);
        terms.push(tape.mul(wi, fx));
    }
    Ok(tape.add_many(&terms))
}

/// Score-function-corrected expectation gradient for a plain-resampling
/// run: last-step credit only, plus the global correction
/// `fbar * sum_t sum_i grad log w_norm[t-1][ancestor]`.
pub fn pf_dice_expectation_gradient(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
    f: &dyn LineageFn,
) -> Result<Vec<f64>, FilterError> {
    if run.config.variant != Variant::Pf || run.resampled.iter().any(|r| !r) {
        return Err(FilterError::Unsupported(
            "the score-function expectation oracle expects an always-resampled plain run",
        ));
    }
    let n = run.n_particles();
    let t = run.t_count();
    let d = run.theta_nat.len();
    let theta_vals = theta_nat_values(run);
    let w = terminal_weights(run);

    let mut f_vals = Vec::with_capacity(n);
    let mut f_grads = Vec::with_capacity(n);
    for i in 0..n {
        let states = run.lineage_states(i)?;
        f_vals.push(f.eval(&states, &theta_vals));
        let tape = Tape::new();
        let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
        let state_nodes: Vec<Var> = states.iter().map(|&s| tape.constant(s)).collect();
        let fx = f.build(&tape, &state_nodes, &theta);
        f_grads.push(tape.grad_values(fx, &theta)?);
    }
    let fbar: f64 = w.iter().zip(&f_vals).map(|(wi, fi)| wi * fi).sum();

    // per-step per-particle scores of the incremental weights
    let step_scores = incremental_weight_scores(run, model, y)?;

    let mut out = vec![0.0; d];
    // last-step truncated term + partial-derivative term
    for i in 0..n {
        for k in 0..d {
            out[k] += w[i] * ((f_vals[i] - fbar) * step_scores[t - 1][i][k] + f_grads[i][k]);
        }
    }
    // global correction over every resampled step after the first
    for step in 2..=t {
        let prev = step - 1;
        let w_prev: Vec<f64> =
            run.logw_norm_values[prev].iter().map(|&lw| math::exp(lw)).collect();
        let mut mean_score = vec![0.0; d];
        for j in 0..n {
            for k in 0..d {
                mean_score[k] += w_prev[j] * step_scores[prev - 1][j][k];
            }
        }
        for i in 0..n {
            let a = run.ancestors[step - 1][i];
            for k in 0..d {
                out[k] += fbar * (step_scores[prev - 1][a][k] - mean_score[k]);
            }
        }
    }
    Ok(out)
}

/// AD counterpart of the score-function expectation: the expectation node
/// plus `stop(fbar) * sum dice(log w_norm[ancestor])` on the run's tape.
pub fn ad_expectation_pf_dice(run: &FilterRun, f: &dyn LineageFn) -> Result<Vec<f64>, FilterError> {
    if run.config.variant != Variant::Pf {
        return Err(FilterError::Unsupported("expected a plain-resampling run"));
    }
    let tape = &run.tape;
    let fx = build_expectation_node(run, f)?;
    let stopped_fbar = tape.stop_gradient(fx);
    let mut dices = Vec::new();
    for step_terms in &run.score_terms {
        for &l in step_terms {
            dices.push(tape.dice(l));
        }
    }
    let obj = if dices.is_empty() {
        fx
    } else {
        let total = tape.add_many(&dices);
        let corr = tape.mul(stopped_fbar, total);
        tape.add(fx, corr)
    };
    Ok(tape.grad_values(obj, &run.theta)?)
}

/// Scores of each step's incremental weight w.r.t. theta at fixed states:
/// `grad log [p(x_t, y_t | x_{t-1}) / q]` with the stopped proposal, plus
/// the initial-density score folded into step 1.
fn incremental_weight_scores(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>, FilterError> {
    let n = run.n_particles();
    let t_count = run.t_count();
    let theta_vals = theta_nat_values(run);
    let mut out = Vec::with_capacity(t_count);
    for (step, &yt) in y.iter().enumerate().take(t_count) {
        let t = step + 1;
        let mut per_particle = Vec::with_capacity(n);
        for i in 0..n {
            let a = run.ancestors[t - 1][i];
            let tape = Tape::new();
            let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
            let x = tape.constant(run.states[t][i]);
            let prev = tape.constant(run.states[t - 1][a]);
            let trans = model.transition_logpdf(&tape, x, prev, &theta);
            let obs = model.observation_logpdf(&tape, yt, x, &theta);
            let mut inc = tape.add(trans, obs);
            if t == 1 && model.init_depends_on_theta() {
                let init = model.init_logpdf(&tape, prev, &theta);
                inc = tape.add(inc, init);
            }
            per_particle.push(tape.grad_values(inc, &theta)?);
        }
        out.push(per_particle);
    }
    Ok(out)
}

/// Explicit backward messages for one always-resampled stop-gradient run
/// with the reparameterized bootstrap proposal. Terminal messages are
/// zero; everything else follows by the suffix recursions.
pub struct BackwardMessages {
    /// bx[t][i]: suffix gradient flowing into x_t^i from later steps.
    pub bx: Vec<Vec<f64>>,
    /// bw[t][i]: suffix adjoint of the normalized weight at t.
    pub bw: Vec<Vec<f64>>,
    /// bb[t][i]: suffix adjoint of the unnormalized weight through the
    /// normalization only.
    pub bb: Vec<Vec<f64>>,
    /// btheta[t][k]: suffix of theta contributions from steps after t.
    pub btheta: Vec<Vec<f64>>,
    /// The assembled gradient estimate of d Zhat / d theta.
    pub gradient: Vec<f64>,
}

/// Hand-rolled backward recursion reproducing what reverse-mode AD
/// computes for `grad_theta Zhat` on the stop-gradient-resampling tape,
/// built only from the run's realized values and local partials.
pub fn explicit_backward_gradient(
    run: &FilterRun,
    model: &dyn StateSpaceModel,
    y: &[f64],
) -> Result<BackwardMessages, FilterError> {
    if run.config.variant != Variant::DpfSgr
        || run.config.theta_mode != ThetaMode::Reparam
        || run.config.proposal != Proposal::Bootstrap
    {
        return Err(FilterError::Unsupported(
            "backward messages are defined for the reparameterized stop-gradient run",
        ));
    }
    if run.resampled.iter().any(|r| !r) {
        return Err(FilterError::Unsupported(
            "backward messages require resampling at every step",
        ));
    }
    let n = run.n_particles();
    let t_count = run.t_count();
    let d = run.theta_nat.len();
    let theta_vals = theta_nat_values(run);
    let fhat = run.fhat_suffix();

    // realized unnormalized weights and local partials per step
    let mut w_vals = vec![vec![0.0; n]; t_count + 1];
    let mut dwdx = vec![vec![0.0; n]; t_count + 1];
    let mut dwdth = vec![vec![vec![0.0; d]; n]; t_count + 1];
    let mut dxdx = vec![vec![0.0; n]; t_count + 1];
    let mut dxdth = vec![vec![vec![0.0; d]; n]; t_count + 1];
    for t in 1..=t_count {
        for i in 0..n {
            w_vals[t][i] = math::exp(run.logw_norm_values[t][i]) * run.w_values[t - 1];
            // weight as a function of (x_t, theta): w = (1/N) exp(obs lp)
            let tape = Tape::new();
            let x = tape.input(run.states[t][i]);
            let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
            let lp = model.observation_logpdf(&tape, y[t - 1], x, &theta);
            let ew = tape.exp(lp);
            let w = tape.scale(ew, 1.0 / n as f64);
            let mut leaves = vec![x];
            leaves.extend_from_slice(&theta);
            let g = tape.grad_values(w, &leaves)?;
            dwdx[t][i] = g[0];
            dwdth[t][i].copy_from_slice(&g[1..]);
            // sampler as a function of (x_prev, theta)
            let a = run.ancestors[t - 1][i];
            let tape = Tape::new();
            let xp = tape.input(run.states[t - 1][a]);
            let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
            let xn = model.transition_sample_node(&tape, run.eps[t][i], xp, &theta);
            let mut leaves = vec![xp];
            leaves.extend_from_slice(&theta);
            let g = tape.grad_values(xn, &leaves)?;
            dxdx[t][i] = g[0];
            dxdth[t][i].copy_from_slice(&g[1..]);
        }
    }
    // initial sampler partials w.r.t. theta
    let mut dx0dth = vec![vec![0.0; d]; n];
    for (i, row) in dx0dth.iter_mut().enumerate() {
        let tape = Tape::new();
        let theta: Vec<Var> = theta_vals.iter().map(|&v| tape.input(v)).collect();
        let x0 = model.init_sample_node(&tape, run.eps[0][i], &theta);
        row.copy_from_slice(&tape.grad_values(x0, &theta)?);
    }

    let wn = |t: usize, i: usize| math::exp(run.logw_norm_values[t][i]);

    // suffix messages, terminal all zero
    let mut bw = vec![vec![0.0; n]; t_count + 1];
    let mut bb = vec![vec![0.0; n]; t_count + 1];
    let mut bx = vec![vec![0.0; n]; t_count + 1];
    let mut btheta = vec![vec![0.0; d]; t_count + 1];

    for t in (0..t_count).rev() {
        let wt1 = run.w_values[t]; // W_{t+1}
        let f1 = fhat[t + 1];
        // bw and bx gather over offspring j with ancestor i
        for j in 0..n {
            let i = run.ancestors[t][j];
            let carry = f1 + wt1 * bb[t + 1][j];
            bw[t][i] += w_vals[t + 1][j] / wn(t, i) * carry;
            bx[t][i] += dxdx[t + 1][j] * (dwdx[t + 1][j] * carry + wt1 * bx[t + 1][j]);
        }
        // bb is the adjoint of the unnormalized weight through its own
        // generation's normalization, so it divides by W_t; generation 0
        // has constant weights and no normalization node.
        let mean_bw: f64 = (0..n).map(|i| wn(t, i) * bw[t][i]).sum();
        for i in 0..n {
            bb[t][i] = if t >= 1 { (bw[t][i] - mean_bw) / run.w_values[t - 1] } else { 0.0 };
        }
        for k in 0..d {
            let mut acc = wt1 * btheta[t + 1][k];
            for i in 0..n {
                let carry = f1 + wt1 * bb[t + 1][i];
                acc += dwdth[t + 1][i][k] * carry
                    + dxdth[t + 1][i][k] * (dwdx[t + 1][i] * carry + wt1 * bx[t + 1][i]);
            }
            btheta[t][k] = acc;
        }
    }

    let mut gradient = vec![0.0; d];
    for k in 0..d {
        let mut acc = btheta[0][k];
        for i in 0..n {
            acc += dx0dth[i][k] * bx[0][i];
        }
        gradient[k] = acc;
    }
    Ok(BackwardMessages { bx, bw, bb, btheta, gradient })
}

/// Single-step importance sampling (no resampling): the objective is
/// `log (1/N) sum_i p(x_i, y) / q(x_i)` with the proposal stopped on the
/// tape when it depends on theta.
pub struct IwaeRun {
    pub tape: Tape,
    pub theta: Vec<Var>,
    pub objective: Var,
    pub x: Vec<f64>,
    pub w_norm: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum IwaeProposal {
    /// Sample from the model's initial distribution (theta-dependent,
    /// stopped on the tape).
    PriorTheta,
    /// Fixed Gaussian, independent of theta.
    FixedGaussian { mean: f64, var: f64 },
}

/// One-timestep latent model: x ~ init, y | x ~ observation.
pub fn iwae_run(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    y: f64,
    n_samples: usize,
    proposal: IwaeProposal,
    seed: u64,
) -> Result<IwaeRun, FilterError> {
    let tape = Tape::new();
    let theta_leaves: Vec<Var> = theta.iter().map(|&v| tape.input(v)).collect();
    let mut rng = CounterRng::new(seed, streams::INIT);
    let mut logw = Vec::with_capacity(n_samples);
    let mut xs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let eps = rng.normal();
        let xv = match proposal {
            IwaeProposal::PriorTheta => model.init_sample(eps, theta),
            IwaeProposal::FixedGaussian { mean, var } => mean + math::sqrt(var) * eps,
        };
        xs.push(xv);
        let x = tape.constant(xv);
        let prior = model.init_logpdf(&tape, x, &theta_leaves);
        let obs = model.observation_logpdf(&tape, y, x, &theta_leaves);
        let joint = tape.add(prior, obs);
        let lq = match proposal {
            IwaeProposal::PriorTheta => tape.stop_gradient(prior),
            IwaeProposal::FixedGaussian { mean, var } => {
                let m = tape.constant(mean);
                let v = tape.constant(var);
                tape.gauss_logpdf(x, m, v)
            }
        };
        logw.push(tape.sub(joint, lq));
    }
    let lse = tape.logsumexp(&logw);
    let objective = tape.add_const(lse, -math::ln(n_samples as f64));
    let lse_val = tape.value(lse);
    let w_norm = logw.iter().map(|&lw| math::exp(tape.value(lw) - lse_val)).collect();
    Ok(IwaeRun { tape, theta: theta_leaves, objective, x: xs, w_norm })
}

/// Self-normalized Fisher oracle for the single-step model:
/// `sum_i w_i grad log p(x_i, y)` at fixed samples.
pub fn iwae_fisher(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    y: f64,
    run: &IwaeRun,
) -> Result<Vec<f64>, FilterError> {
    let tape = Tape::new();
    let theta_leaves: Vec<Var> = theta.iter().map(|&v| tape.input(v)).collect();
    let mut weighted = Vec::with_capacity(run.x.len());
    for (i, &xv) in run.x.iter().enumerate() {
        let x = tape.constant(xv);
        let prior = model.init_logpdf(&tape, x, &theta_leaves);
        let obs = model.observation_logpdf(&tape, y, x, &theta_leaves);
        let joint = tape.add(prior, obs);
        weighted.push(tape.scale(joint, run.w_norm[i]));
    }
    let total = tape.add_many(&weighted);
    Ok(tape.grad_values(total, &theta_leaves)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{run_filter, FilterConfig, Wrt};
    use crate::ssm::{simulate, LgssmModel, SvModel};

    #[test]
    fn report_value_comparisons() {
        let a = ReportValue::Vector(vec![1.0, 2.0]);
        let b = ReportValue::Vector(vec![1.0, 2.0 + 1e-10]);
        assert!(a.max_rel_diff(&b) < 1e-9);
        assert!(a.is_finite());
        assert!(!ReportValue::Vector(vec![f64::NAN]).is_finite());
    }

    #[test]
    fn alpha_recursion_single_step_base_case() {
        // T=1: the estimate coincides with differentiating the one-step
        // mixture normalizer directly
        let model = LgssmModel::default();
        let theta = [0.9, 1.0];
        let data = simulate(&model, &theta, 1, 5).unwrap();
        let cfg = FilterConfig::new(Variant::Dpf2, 4, 3);
        let run = run_filter(&model, &data, &theta, &[], &cfg).unwrap();
        let oracle = alpha_recursion_score(&run, &model, &data.y, AlphaForm::JointDensity).unwrap();
        let ad = run.logzhat_gradient(Wrt::Theta).unwrap();
        for k in 0..2 {
            assert!((oracle[k] - ad[k]).abs() < 1e-10, "{oracle:?} vs {ad:?}");
        }
    }

    #[test]
    fn alpha_recursion_rejects_plain_runs() {
        let model = LgssmModel::default();
        let data = simulate(&model, &[0.9, 1.0], 3, 5).unwrap();
        let cfg = FilterConfig::new(Variant::DpfSgr, 3, 3);
        let run = run_filter(&model, &data, &[0.9, 1.0], &[], &cfg).unwrap();
        assert!(alpha_recursion_score(&run, &model, &data.y, AlphaForm::JointDensity).is_err());
    }

    #[test]
    fn fisher_rejects_marginal_runs() {
        let model = LgssmModel::default();
        let data = simulate(&model, &[0.9, 1.0], 3, 5).unwrap();
        let cfg = FilterConfig::new(Variant::Dpf2, 3, 3);
        let run = run_filter(&model, &data, &[0.9, 1.0], &[], &cfg).unwrap();
        assert!(fisher_score(&run, &model, &data.y).is_err());
    }

    #[test]
    fn constant_f_collapses() {
        // f = 1: normalized gradient vanishes by baseline cancellation,
        // unnormalized gradient reduces to grad Zhat
        let model = SvModel;
        let theta = [2.0, 0.9, 1.0];
        let data = simulate(&model, &theta, 4, 9).unwrap();
        let cfg = FilterConfig::new(Variant::DpfSgr, 5, 21);
        let run = run_filter(&model, &data, &theta, &[], &cfg).unwrap();
        let pe = posterior_expectation(&run, &model, &data.y, &ConstantFn(1.0)).unwrap();
        assert!((pe.fbar - 1.0).abs() < 1e-12);
        for g in &pe.grad_normalized {
            assert!(g.abs() < 1e-12);
        }
        let zgrad = run.zhat_gradient().unwrap();
        for k in 0..3 {
            let denom = zgrad[k].abs().max(1e-12);
            assert!(
                (pe.grad_unnormalized[k] - zgrad[k]).abs() / denom < 1e-8,
                "{:?} vs {:?}",
                pe.grad_unnormalized,
                zgrad
            );
        }
    }

    #[test]
    fn iwae_identity_per_seed() {
        let model = LgssmModel::default();
        let theta = [0.9, 1.0];
        for seed in 0..10 {
            let run = iwae_run(&model, &theta, 0.7, 8, IwaeProposal::PriorTheta, seed).unwrap();
            let ad = run.tape.grad_values(run.objective, &run.theta).unwrap();
            let oracle = iwae_fisher(&model, &theta, 0.7, &run).unwrap();
            for k in 0..2 {
                assert!(
                    (ad[k] - oracle[k]).abs() < 1e-12 * oracle[k].abs().max(1.0),
                    "seed {seed}: {ad:?} vs {oracle:?}"
                );
            }
        }
    }

    #[test]
    fn iwae_single_sample_is_joint_score() {
        let model = LgssmModel::default();
        let theta = [0.9, 1.0];
        let run = iwae_run(&model, &theta, 0.7, 1, IwaeProposal::PriorTheta, 3).unwrap();
        let ad = run.tape.grad_values(run.objective, &run.theta).unwrap();
        let tape = Tape::new();
        let th: Vec<Var> = theta.iter().map(|&v| tape.input(v)).collect();
        let x = tape.constant(run.x[0]);
        let prior = model.init_logpdf(&tape, x, &th);
        let obs = model.observation_logpdf(&tape, 0.7, x, &th);
        let joint = tape.add(prior, obs);
        let oracle = tape.grad_values(joint, &th).unwrap();
        for k in 0..2 {
            assert!((ad[k] - oracle[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn iwae_fixed_proposal_paths_coincide() {
        // with a theta-free proposal the identity holds without stopping
        // anything: q contributes no score term
        let model = LgssmModel::default();
        let theta = [0.9, 1.0];
        let proposal = IwaeProposal::FixedGaussian { mean: 0.0, var: 2.0 };
        let run = iwae_run(&model, &theta, 0.7, 6, proposal, 11).unwrap();
        let ad = run.tape.grad_values(run.objective, &run.theta).unwrap();
        let oracle = iwae_fisher(&model, &theta, 0.7, &run).unwrap();
        for k in 0..2 {
            assert!((ad[k] - oracle[k]).abs() < 1e-12 * oracle[k].abs().max(1.0));
        }
    }
}
