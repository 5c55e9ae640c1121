//! Particle-filter variants sharing one loop skeleton.
//!
//! All variants run the same forward pass; they differ only in how the
//! resampling step is wired into the tape:
//!
//! - `Sis`: never resamples.
//! - `Pf`: resamples from detached weights, post-resampling weights are
//!   plain 1/N constants — the resampling step is invisible to gradients.
//! - `PfSf`: like `Pf`, plus a score-function surrogate added to the
//!   returned objective, so differentiating it recovers the classical
//!   high-variance correction terms.
//! - `DpfSgr`: stop-gradient resampling; post-resampling weights carry
//!   `w/stop(w)` corrections that are exactly 1/N on the forward pass.
//! - `Mpf`/`Dpf2`: the marginal particle filter, whose proposal is a
//!   weight mixture over the previous population (O(N^2) densities per
//!   step); `Dpf2` detaches the mixture weights in the sampling
//!   distribution and in the proposal-mixture denominator.
//!
//! With the same seed, `Pf`, `PfSf` and `DpfSgr` produce bit-identical
//! particles, weights, ancestors and normalizers; only the recorded tape
//! differs. The same holds between `Mpf` and `Dpf2`.

use alloc::vec::Vec;
use core::fmt;

use crate::ad::{AdError, Tape, Var};
use crate::math;
use crate::resample::{
    draw_ancestors, ess_from_log_weights, ResampleError, ResampleProbs, Scheme,
};
use crate::rng::{streams, CounterRng};
use crate::ssm::{Dataset, GaussianProposal, StateSpaceModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Sis,
    Pf,
    PfSf,
    DpfSgr,
    Mpf,
    Dpf2,
}

impl Variant {
    pub fn is_marginal(self) -> bool {
        matches!(self, Variant::Mpf | Variant::Dpf2)
    }

    /// Whether runs of this variant carry meaningful ancestral lineages.
    pub fn has_lineages(self) -> bool {
        !self.is_marginal()
    }
}

/// How the proposal treats the model parameters.
///
/// `Stopped` detaches both the sampled states and the proposal density
/// from theta, so gradients of the log-normalizer reproduce the
/// score-function estimators at fixed states. `Reparam` keeps the
/// pathwise derivative through the sampler alive instead (total
/// derivative of the normalizer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaMode {
    Stopped,
    Reparam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proposal {
    /// Proposal equals the model transition.
    Bootstrap,
    /// Separately parameterized Gaussian proposal with phi = (a, b, c).
    Learned,
}

/// Map from the optimizer's coordinates to natural model parameters,
/// applied on the tape so gradients flow through it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTransform {
    Identity,
    /// (mu, atanh phi, log sigma) -> (mu, phi, sigma); keeps |phi| < 1 and
    /// sigma > 0 without projection.
    SvUnconstrained,
}

impl ParamTransform {
    pub fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ParamTransform::Identity => u.to_vec(),
            ParamTransform::SvUnconstrained => {
                alloc::vec![u[0], math::tanh(u[1]), math::exp(u[2])]
            }
        }
    }

    pub fn from_natural(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            ParamTransform::Identity => theta.to_vec(),
            ParamTransform::SvUnconstrained => {
                alloc::vec![theta[0], math::atanh(theta[1]), math::ln(theta[2])]
            }
        }
    }

    /// Diagonal Jacobian d theta / d u at the given coordinates.
    pub fn jacobian_diag(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ParamTransform::Identity => u.iter().map(|_| 1.0).collect(),
            ParamTransform::SvUnconstrained => {
                let th = math::tanh(u[1]);
                alloc::vec![1.0, 1.0 - th * th, math::exp(u[2])]
            }
        }
    }

    fn build(&self, tape: &Tape, leaves: &[Var]) -> Vec<Var> {
        match self {
            ParamTransform::Identity => leaves.to_vec(),
            ParamTransform::SvUnconstrained => {
                alloc::vec![leaves[0], tape.tanh(leaves[1]), tape.exp(leaves[2])]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub variant: Variant,
    pub n_particles: usize,
    pub scheme: Scheme,
    /// Resample when ESS < threshold * N; 1.0 means every step, 0.0 never.
    pub ess_threshold: f64,
    pub seed: u64,
    pub proposal: Proposal,
    pub theta_mode: ThetaMode,
    pub transform: ParamTransform,
}

impl FilterConfig {
    pub fn new(variant: Variant, n_particles: usize, seed: u64) -> Self {
        FilterConfig {
            variant,
            n_particles,
            scheme: Scheme::Systematic,
            ess_threshold: 1.0,
            seed,
            proposal: Proposal::Bootstrap,
            theta_mode: ThetaMode::Stopped,
            transform: ParamTransform::Identity,
        }
    }

    fn validate(&self) -> Result<(), FilterError> {
        if self.n_particles == 0 {
            return Err(FilterError::BadConfig("n_particles must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(FilterError::BadConfig("ess_threshold must lie in [0, 1]"));
        }
        if self.proposal == Proposal::Learned && self.theta_mode == ThetaMode::Reparam {
            return Err(FilterError::BadConfig(
                "reparameterized theta only applies to the bootstrap proposal",
            ));
        }
        Ok(())
    }

    fn should_resample(&self, ess: f64) -> bool {
        match self.variant {
            Variant::Sis => false,
            _ => {
                if self.ess_threshold >= 1.0 {
                    true
                } else {
                    ess < self.ess_threshold * self.n_particles as f64
                }
            }
        }
    }
}

#[derive(Debug)]
pub enum FilterError {
    NonFiniteDensity { step: usize, particle: usize },
    AllZeroWeights { step: usize },
    BadConfig(&'static str),
    Resample(ResampleError),
    Ad(AdError),
    /// Requested data that this run does not carry (e.g. lineages of a
    /// marginal-filter run).
    Unsupported(&'static str),
}

impl fmt::Display for FilterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterError::NonFiniteDensity { step, particle } => {
                write!(f, "non-finite log-density at step {step}, particle {particle}")
            }
            FilterError::AllZeroWeights { step } => write!(f, "all weights zero at step {step}"),
            FilterError::BadConfig(s) => write!(f, "bad config: {s}"),
            FilterError::Resample(e) => write!(f, "resampling: {e}"),
            FilterError::Ad(e) => write!(f, "autodiff: {e}"),
            FilterError::Unsupported(s) => write!(f, "unsupported: {s}"),
        }
    }
}

impl From<ResampleError> for FilterError {
    fn from(e: ResampleError) -> Self {
        FilterError::Resample(e)
    }
}

impl From<AdError> for FilterError {
    fn from(e: AdError) -> Self {
        FilterError::Ad(e)
    }
}

/// Which parameter block to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Theta,
    Phi,
}

/// Complete record of one filter pass, including the live tape.
pub struct FilterRun {
    pub tape: Tape,
    pub config: FilterConfig,
    /// Parameter leaves in the optimizer's coordinates.
    pub theta: Vec<Var>,
    /// Natural-parameter nodes after the transform (identical to `theta`
    /// under the identity transform).
    pub theta_nat: Vec<Var>,
    pub phi: Vec<Var>,
    /// The differentiable objective: log Zhat, or the surrogate carrying
    /// extra score terms for `PfSf` (same forward value).
    pub logzhat: Var,
    /// Per-step log W_t nodes, t = 1..T.
    pub log_w_steps: Vec<Var>,
    pub w_values: Vec<f64>,
    /// ESS of the incoming weights at each step, t = 1..T.
    pub ess_trace: Vec<f64>,
    pub resampled: Vec<bool>,
    pub resample_count: usize,
    /// Resampling probabilities lifted off the zero floor (diagnostic).
    pub floored_probs: usize,
    /// ancestors[t-1][i]: index in generation t-1 of particle i at t.
    /// Identity when the step did not resample; mixture components for
    /// the marginal filter.
    pub ancestors: Vec<Vec<usize>>,
    /// states[t][i] for t = 0..T.
    pub states: Vec<Vec<f64>>,
    pub state_nodes: Vec<Vec<Var>>,
    /// eps[0][i] are init noises, eps[t][i] proposal noises at step t.
    pub eps: Vec<Vec<f64>>,
    /// Normalized log-weight nodes and values, t = 0..T.
    pub logw_norm_nodes: Vec<Vec<Var>>,
    pub logw_norm_values: Vec<Vec<f64>>,
    /// For each resampled step, the chosen ancestors' normalized
    /// log-weight nodes (raw material for score-function surrogates).
    pub score_terms: Vec<Vec<Var>>,
}

impl FilterRun {
    pub fn t_count(&self) -> usize {
        self.log_w_steps.len()
    }

    pub fn n_particles(&self) -> usize {
        self.config.n_particles
    }

    pub fn logzhat_value(&self) -> f64 {
        self.tape.value(self.logzhat)
    }

    /// Ancestral index path of final particle i: indices l_0..l_T with
    /// l_T = i and l_{t-1} = ancestors[t-1][l_t].
    pub fn lineage(&self, i: usize) -> Result<Vec<usize>, FilterError> {
        if !self.config.variant.has_lineages() {
            return Err(FilterError::Unsupported(
                "marginal-filter runs do not carry ancestral lineages",
            ));
        }
        let t = self.t_count();
        let mut path = alloc::vec![0usize; t + 1];
        path[t] = i;
        for s in (1..=t).rev() {
            path[s - 1] = self.ancestors[s - 1][path[s]];
        }
        Ok(path)
    }

    /// State values along the lineage of final particle i.
    pub fn lineage_states(&self, i: usize) -> Result<Vec<f64>, FilterError> {
        let path = self.lineage(i)?;
        Ok(path.iter().enumerate().map(|(t, &l)| self.states[t][l]).collect())
    }

    /// Proposal noises along the lineage of final particle i (init noise
    /// first).
    pub fn lineage_eps(&self, i: usize) -> Result<Vec<f64>, FilterError> {
        let path = self.lineage(i)?;
        Ok(path.iter().enumerate().map(|(t, &l)| self.eps[t][l]).collect())
    }

    /// Realized suffix products Fhat_t = prod_{s>t} W_s for t = 0..T.
    pub fn fhat_suffix(&self) -> Vec<f64> {
        let t = self.t_count();
        let mut fhat = alloc::vec![1.0; t + 1];
        for s in (0..t).rev() {
            fhat[s] = fhat[s + 1] * self.w_values[s];
        }
        fhat
    }

    /// Gradient of the objective w.r.t. theta leaves or phi leaves.
    pub fn logzhat_gradient(&self, wrt: Wrt) -> Result<Vec<f64>, FilterError> {
        let leaves = match wrt {
            Wrt::Theta => &self.theta,
            Wrt::Phi => &self.phi,
        };
        Ok(self.tape.grad_values(self.logzhat, leaves)?)
    }

    /// Gradient of Zhat = exp(log Zhat) w.r.t. theta leaves.
    pub fn zhat_gradient(&self) -> Result<Vec<f64>, FilterError> {
        let z = self.tape.exp(self.logzhat);
        Ok(self.tape.grad_values(z, &self.theta)?)
    }

    /// Hessian of the objective w.r.t. theta leaves.
    pub fn logzhat_hessian(&self) -> Result<Vec<Vec<f64>>, FilterError> {
        Ok(self.tape.grad_twice_values(self.logzhat, &self.theta)?)
    }
}

struct Streams {
    init: CounterRng,
    proposal: CounterRng,
    resample: CounterRng,
}

fn make_streams(seed: u64) -> Streams {
    Streams {
        init: CounterRng::new(seed, streams::INIT),
        proposal: CounterRng::new(seed, streams::PROPOSAL),
        resample: CounterRng::new(seed, streams::RESAMPLE),
    }
}

/// Run any filter variant. Marginal variants are dispatched to
/// [`run_mpf`]; everything else shares the single-loop skeleton.
pub fn run_filter(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    theta: &[f64],
    phi: &[f64],
    cfg: &FilterConfig,
) -> Result<FilterRun, FilterError> {
    cfg.validate()?;
    if cfg.variant.is_marginal() {
        return run_mpf(model, data, theta, phi, cfg);
    }
    let n = cfg.n_particles;
    let t_count = data.t_count();
    let tape = Tape::with_capacity(64 * n * (t_count + 1) + 64);
    let mut rng = make_streams(cfg.seed);

    let theta_leaves: Vec<Var> = theta.iter().map(|&v| tape.input(v)).collect();
    let theta_nat = cfg.transform.build(&tape, &theta_leaves);
    let theta_nat_vals = tape.values(&theta_nat);
    let phi_leaves: Vec<Var> = phi.iter().map(|&v| tape.input(v)).collect();
    let proposal = GaussianProposal;

    // generation 0
    let mut eps0 = Vec::with_capacity(n);
    let mut x0_nodes = Vec::with_capacity(n);
    let mut x0_vals = Vec::with_capacity(n);
    for _ in 0..n {
        let e = rng.init.normal();
        eps0.push(e);
        let node = match cfg.theta_mode {
            ThetaMode::Stopped => tape.constant(model.init_sample(e, &theta_nat_vals)),
            ThetaMode::Reparam => model.init_sample_node(&tape, e, &theta_nat),
        };
        x0_vals.push(tape.value(node));
        x0_nodes.push(node);
    }
    let log_n = math::ln(n as f64);
    let lw0: Vec<Var> = (0..n).map(|_| tape.constant(-log_n)).collect();

    let mut run = FilterRun {
        tape,
        config: cfg.clone(),
        theta: theta_leaves,
        theta_nat,
        phi: phi_leaves,
        logzhat: Var(0),
        log_w_steps: Vec::with_capacity(t_count),
        w_values: Vec::with_capacity(t_count),
        ess_trace: Vec::with_capacity(t_count),
        resampled: Vec::with_capacity(t_count),
        resample_count: 0,
        floored_probs: 0,
        ancestors: Vec::with_capacity(t_count),
        states: alloc::vec![x0_vals],
        state_nodes: alloc::vec![x0_nodes],
        eps: alloc::vec![eps0],
        logw_norm_nodes: alloc::vec![lw0.clone()],
        logw_norm_values: alloc::vec![alloc::vec![-log_n; n]],
        score_terms: Vec::new(),
    };
    let tape = &run.tape;

    for (step, &y) in data.y.iter().enumerate() {
        let t = step + 1;
        let prev_lw_nodes = run.logw_norm_nodes[t - 1].clone();
        let prev_lw_vals = run.logw_norm_values[t - 1].clone();
        let ess = ess_from_log_weights(&prev_lw_vals);
        run.ess_trace.push(ess);

        // resample or carry
        let resample = cfg.should_resample(ess);
        run.resampled.push(resample);
        let (ancestors, log_w_tilde) = if resample {
            run.resample_count += 1;
            let probs = ResampleProbs::from_log_weights(&prev_lw_vals);
            run.floored_probs += probs.floored;
            let ancestors = draw_ancestors(cfg.scheme, &probs, &mut rng.resample);
            let chosen: Vec<Var> = ancestors.iter().map(|&a| prev_lw_nodes[a]).collect();
            let log_w_tilde: Vec<Var> = match cfg.variant {
                Variant::DpfSgr => chosen
                    .iter()
                    .map(|&lw| {
                        let corr = tape.dice(lw);
                        tape.add_const(corr, -log_n)
                    })
                    .collect(),
                _ => (0..n).map(|_| tape.constant(-log_n)).collect(),
            };
            run.score_terms.push(chosen);
            (ancestors, log_w_tilde)
        } else {
            ((0..n).collect(), prev_lw_nodes.clone())
        };

        // propagate and weight
        let mut x_nodes = Vec::with_capacity(n);
        let mut x_vals = Vec::with_capacity(n);
        let mut logw = Vec::with_capacity(n);
        let mut eps_t = Vec::with_capacity(n);
        for i in 0..n {
            let a = ancestors[i];
            let x_prev_node = run.state_nodes[t - 1][a];
            let e = rng.proposal.normal();
            eps_t.push(e);
            let (x_node, inc) = match (cfg.proposal, cfg.theta_mode) {
                (Proposal::Bootstrap, ThetaMode::Stopped) => {
                    let xv = model.transition_sample(e, run.states[t - 1][a], &theta_nat_vals);
                    let x_node = tape.constant(xv);
                    let trans = model.transition_logpdf(tape, x_node, x_prev_node, &run.theta_nat);
                    let trans_score = tape.dice(trans);
                    let obs = model.observation_logpdf(tape, y, x_node, &run.theta_nat);
                    let mut inc = tape.add(trans_score, obs);
                    if t == 1 && model.init_depends_on_theta() {
                        let init_lp = model.init_logpdf(tape, x_prev_node, &run.theta_nat);
                        let init_score = tape.dice(init_lp);
                        inc = tape.add(inc, init_score);
                    }
                    (x_node, inc)
                }
                (Proposal::Bootstrap, ThetaMode::Reparam) => {
                    // transition and proposal densities cancel identically
                    let x_node = model.transition_sample_node(tape, e, x_prev_node, &run.theta_nat);
                    let inc = model.observation_logpdf(tape, y, x_node, &run.theta_nat);
                    (x_node, inc)
                }
                (Proposal::Learned, _) => {
                    let x_node = proposal.sample_node(tape, e, x_prev_node, y, &run.phi);
                    let trans = model.transition_logpdf(tape, x_node, x_prev_node, &run.theta_nat);
                    let obs = model.observation_logpdf(tape, y, x_node, &run.theta_nat);
                    let q = proposal.logpdf(tape, x_node, x_prev_node, y, &run.phi);
                    let po = tape.add(trans, obs);
                    let mut inc = tape.sub(po, q);
                    if t == 1 && model.init_depends_on_theta() {
                        let init_lp = model.init_logpdf(tape, x_prev_node, &run.theta_nat);
                        let init_score = tape.dice(init_lp);
                        inc = tape.add(inc, init_score);
                    }
                    (x_node, inc)
                }
            };
            let lw = tape.add(log_w_tilde[i], inc);
            if !tape.value(lw).is_finite() && tape.value(lw) != f64::NEG_INFINITY {
                return Err(FilterError::NonFiniteDensity { step: t, particle: i });
            }
            x_vals.push(tape.value(x_node));
            x_nodes.push(x_node);
            logw.push(lw);
        }

        let log_w_t = tape.logsumexp(&logw);
        let w_val = math::exp(tape.value(log_w_t));
        if !tape.value(log_w_t).is_finite() {
            return Err(FilterError::AllZeroWeights { step: t });
        }
        let lw_norm: Vec<Var> = logw.iter().map(|&lw| tape.sub(lw, log_w_t)).collect();
        run.logw_norm_values.push(tape.values(&lw_norm));
        run.logw_norm_nodes.push(lw_norm);
        run.log_w_steps.push(log_w_t);
        run.w_values.push(w_val);
        run.ancestors.push(ancestors);
        run.states.push(x_vals);
        run.state_nodes.push(x_nodes);
        run.eps.push(eps_t);
    }

    let logzhat = tape.add_many(&run.log_w_steps);
    run.logzhat = match cfg.variant {
        Variant::PfSf => {
            let stopped = tape.stop_gradient(logzhat);
            let mut dices = Vec::new();
            for step_terms in &run.score_terms {
                for &l in step_terms {
                    dices.push(tape.dice(l));
                }
            }
            if dices.is_empty() {
                logzhat
            } else {
                let total = tape.add_many(&dices);
                let corr = tape.mul(stopped, total);
                tape.add(logzhat, corr)
            }
        }
        _ => logzhat,
    };
    Ok(run)
}

/// Marginal particle filter (`Mpf`) and its differentiable variant
/// (`Dpf2`). The proposal is a mixture over the previous population with
/// detached mixture weights; `Dpf2` additionally detaches the whole
/// proposal-mixture denominator of the weight.
pub fn run_mpf(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    theta: &[f64],
    phi: &[f64],
    cfg: &FilterConfig,
) -> Result<FilterRun, FilterError> {
    cfg.validate()?;
    if !cfg.variant.is_marginal() {
        return Err(FilterError::BadConfig("run_mpf expects Mpf or Dpf2"));
    }
    if cfg.theta_mode == ThetaMode::Reparam {
        return Err(FilterError::BadConfig(
            "the marginal filter is implemented for stopped-theta proposals",
        ));
    }
    let n = cfg.n_particles;
    let t_count = data.t_count();
    let tape = Tape::with_capacity(48 * n * n * (t_count + 1) + 64);
    let mut rng = make_streams(cfg.seed);

    let theta_leaves: Vec<Var> = theta.iter().map(|&v| tape.input(v)).collect();
    let theta_nat = cfg.transform.build(&tape, &theta_leaves);
    let theta_nat_vals = tape.values(&theta_nat);
    let phi_leaves: Vec<Var> = phi.iter().map(|&v| tape.input(v)).collect();
    let proposal = GaussianProposal;

    let mut eps0 = Vec::with_capacity(n);
    let mut x0_nodes = Vec::with_capacity(n);
    let mut x0_vals = Vec::with_capacity(n);
    for _ in 0..n {
        let e = rng.init.normal();
        eps0.push(e);
        let xv = model.init_sample(e, &theta_nat_vals);
        x0_vals.push(xv);
        x0_nodes.push(tape.constant(xv));
    }
    // score attachments for a theta-dependent initial density, folded into
    // the first mixture numerator
    let init_scores: Option<Vec<Var>> = if model.init_depends_on_theta() {
        Some(
            x0_nodes
                .iter()
                .map(|&x0| {
                    let lp = model.init_logpdf(&tape, x0, &theta_nat);
                    tape.dice(lp)
                })
                .collect(),
        )
    } else {
        None
    };

    let log_n = math::ln(n as f64);
    let lw0: Vec<Var> = (0..n).map(|_| tape.constant(-log_n)).collect();

    let mut run = FilterRun {
        tape,
        config: cfg.clone(),
        theta: theta_leaves,
        theta_nat,
        phi: phi_leaves,
        logzhat: Var(0),
        log_w_steps: Vec::with_capacity(t_count),
        w_values: Vec::with_capacity(t_count),
        ess_trace: Vec::with_capacity(t_count),
        resampled: Vec::with_capacity(t_count),
        resample_count: 0,
        floored_probs: 0,
        ancestors: Vec::with_capacity(t_count),
        states: alloc::vec![x0_vals],
        state_nodes: alloc::vec![x0_nodes],
        eps: alloc::vec![eps0],
        logw_norm_nodes: alloc::vec![lw0.clone()],
        logw_norm_values: alloc::vec![alloc::vec![-log_n; n]],
        score_terms: Vec::new(),
    };
    let tape = &run.tape;

    for (step, &y) in data.y.iter().enumerate() {
        let t = step + 1;
        let prev_lw_nodes = run.logw_norm_nodes[t - 1].clone();
        let prev_lw_vals = run.logw_norm_values[t - 1].clone();
        run.ess_trace.push(ess_from_log_weights(&prev_lw_vals));
        run.resampled.push(true);
        run.resample_count += 1;

        // mixture components from the detached weights, one per particle
        let probs = ResampleProbs::from_log_weights(&prev_lw_vals);
        run.floored_probs += probs.floored;
        let components = draw_ancestors(Scheme::Multinomial, &probs, &mut rng.resample);

        let mut eps_t = Vec::with_capacity(n);
        let mut x_nodes = Vec::with_capacity(n);
        let mut x_vals = Vec::with_capacity(n);
        for &c in &components {
            let e = rng.proposal.normal();
            eps_t.push(e);
            let xv = match cfg.proposal {
                Proposal::Bootstrap => model.transition_sample(e, run.states[t - 1][c], &theta_nat_vals),
                Proposal::Learned => {
                    let phi_vals = tape.values(&run.phi);
                    proposal.sample(e, run.states[t - 1][c], y, &phi_vals)
                }
            };
            x_vals.push(xv);
            x_nodes.push(tape.constant(xv));
        }

        let mut logv = Vec::with_capacity(n);
        for (idx, &x_node) in x_nodes.iter().enumerate().take(n) {
            // the observation factor is common to every mixture component
            let obs = model.observation_logpdf(tape, y, x_node, &run.theta_nat);
            // numerator: live mixture of joint densities
            let mut num_terms = Vec::with_capacity(n);
            // denominator: proposal mixture (detached weights; fully
            // detached for Dpf2)
            let mut den_terms = Vec::with_capacity(n);
            for j in 0..n {
                let x_prev = run.state_nodes[t - 1][j];
                let trans = model.transition_logpdf(tape, x_node, x_prev, &run.theta_nat);
                let mut joint = tape.add(trans, obs);
                if t == 1 {
                    if let Some(scores) = &init_scores {
                        joint = tape.add(joint, scores[j]);
                    }
                }
                num_terms.push(tape.add(prev_lw_nodes[j], joint));

                let q = match cfg.proposal {
                    // stopped-theta proposal: density value, no theta path
                    Proposal::Bootstrap => tape.stop_gradient(trans),
                    Proposal::Learned => proposal.logpdf(tape, x_node, x_prev, y, &run.phi),
                };
                den_terms.push((prev_lw_nodes[j], q));
            }
            let lnum = tape.logsumexp(&num_terms);
            let lden = match cfg.variant {
                Variant::Dpf2 => {
                    let parts: Vec<Var> = den_terms
                        .iter()
                        .map(|&(lw, q)| {
                            let slw = tape.stop_gradient(lw);
                            tape.add(slw, q)
                        })
                        .collect();
                    let lse = tape.logsumexp(&parts);
                    tape.stop_gradient(lse)
                }
                _ => {
                    let parts: Vec<Var> =
                        den_terms.iter().map(|&(lw, q)| tape.add(lw, q)).collect();
                    tape.logsumexp(&parts)
                }
            };
            let ratio = tape.sub(lnum, lden);
            let lv = tape.add_const(ratio, -log_n);
            let v = tape.value(lv);
            if !v.is_finite() && v != f64::NEG_INFINITY {
                return Err(FilterError::NonFiniteDensity { step: t, particle: idx });
            }
            logv.push(lv);
        }

        let log_w_t = tape.logsumexp(&logv);
        if !tape.value(log_w_t).is_finite() {
            return Err(FilterError::AllZeroWeights { step: t });
        }
        let lw_norm: Vec<Var> = logv.iter().map(|&lv| tape.sub(lv, log_w_t)).collect();
        run.w_values.push(math::exp(tape.value(log_w_t)));
        run.logw_norm_values.push(tape.values(&lw_norm));
        run.logw_norm_nodes.push(lw_norm);
        run.log_w_steps.push(log_w_t);
        run.ancestors.push(components);
        run.states.push(x_vals);
        run.state_nodes.push(x_nodes);
        run.eps.push(eps_t);
    }

    run.logzhat = tape.add_many(&run.log_w_steps);
    Ok(run)
}
