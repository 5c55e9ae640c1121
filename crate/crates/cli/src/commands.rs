//! The five subcommand drivers.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sgrpf_core::estimators::{
    ad_expectation_normalized, ad_expectation_pf_dice, ad_expectation_unnormalized,
    alpha_recursion_score, explicit_backward_gradient, fisher_score, iwae_fisher, iwae_run,
    louis_hessian, pf_dice_expectation_gradient, phi_lineage_score, posterior_expectation,
    AlphaForm, IwaeProposal, ReportValue, TerminalState,
};
use sgrpf_core::learn::{train, GradSource, OptimizerState, TrainSetup};
use sgrpf_core::rng::{derive_seed, streams};
use sgrpf_core::ssm::kalman_loglik;
use sgrpf_core::{
    run_filter, Dataset, FilterConfig, LgssmModel, Proposal, StateSpaceModel, SvModel, SvParams,
    ThetaMode, Variant, Wrt,
};

use crate::args::{
    BenchArgs, Cli, Command, FilterArgs, GradcheckArgs, ModelKind, OptimizerArg, SimulateArgs,
    TrainArgs,
};
use crate::formats::{
    self, fmt_f64, BenchRow, DatasetMeta, GradCheckRow, RunManifest,
};
use crate::{sweep, CliError, SystemClock};

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args.merged()?),
        Command::Filter(args) => cmd_filter(args.merged()?),
        Command::Gradcheck(args) => cmd_gradcheck(args.merged()?),
        Command::Train(args) => cmd_train(args.merged()?),
        Command::Bench(args) => cmd_bench(args.merged()?),
    }
}

fn model_for(kind: ModelKind) -> Box<dyn StateSpaceModel> {
    match kind {
        ModelKind::Lgssm => Box::new(LgssmModel::default()),
        ModelKind::Sv => Box::new(SvModel),
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Sis => "sis",
        Variant::Pf => "pf",
        Variant::PfSf => "pf-sf",
        Variant::DpfSgr => "dpf-sgr",
        Variant::Mpf => "mpf",
        Variant::Dpf2 => "dpf2",
    }
}

fn scheme_name(s: sgrpf_core::Scheme) -> &'static str {
    match s {
        sgrpf_core::Scheme::Multinomial => "multinomial",
        sgrpf_core::Scheme::Stratified => "stratified",
        sgrpf_core::Scheme::Systematic => "systematic",
    }
}

fn require<T>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{what}")))
}

fn check_theta(kind: ModelKind, theta: &[f64]) -> Result<(), CliError> {
    if theta.len() != kind.dim_theta() {
        return Err(CliError::Usage(format!(
            "model {} expects {} parameters, got {}",
            kind.name(),
            kind.dim_theta(),
            theta.len()
        )));
    }
    if kind == ModelKind::Sv {
        SvParams::new(theta[0], theta[1], theta[2])
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

/// Model and parameters from flags, falling back to the dataset sidecar.
fn resolve_model_theta(
    data_path: &Path,
    model: Option<ModelKind>,
    theta: Option<Vec<f64>>,
) -> Result<(ModelKind, Vec<f64>), CliError> {
    let meta = formats::read_meta(&formats::meta_path_for(data_path));
    let kind = model
        .or_else(|| meta.as_ref().and_then(|m| ModelKind::from_name(&m.model)))
        .ok_or_else(|| {
            CliError::Usage("no --model given and no dataset sidecar found".to_string())
        })?;
    let theta = theta
        .or_else(|| meta.as_ref().map(|m| m.theta.clone()))
        .ok_or_else(|| {
            CliError::Usage("no --theta given and no dataset sidecar found".to_string())
        })?;
    check_theta(kind, &theta)?;
    Ok((kind, theta))
}

// ── simulate ────────────────────────────────────────────────────────────

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let kind = require(args.model, "model")?;
    let theta = require(args.theta.clone(), "theta")?.0;
    check_theta(kind, &theta)?;
    let t = require(args.t, "t")?;
    if t == 0 {
        return Err(CliError::Usage("--t must be at least 1".to_string()));
    }
    let seed = args.seed.unwrap_or(0);

    let manifest = RunManifest::new(
        "simulate",
        serde_json::to_value(&args).expect("args serialize"),
        &["data.csv", "data_meta.json"],
    );
    manifest.write(&args.out)?;

    let model = model_for(kind);
    let data = sgrpf_core::simulate(model.as_ref(), &theta, t, seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let csv_path = args.out.join("data.csv");
    formats::write_dataset_csv(&csv_path, &data)?;
    formats::write_meta(
        &args.out.join("data_meta.json"),
        &DatasetMeta { model: kind.name().to_string(), theta, seed, t },
    )?;
    println!("wrote {} ({} rows)", csv_path.display(), t);
    Ok(())
}

// ── filter ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ReplicateStats {
    count: usize,
    mean_logz: f64,
    se_logz: f64,
    mean_z: f64,
    se_z: f64,
}

#[derive(Serialize)]
struct KalmanRef {
    loglik: f64,
    z: f64,
}

#[derive(Serialize)]
struct FilterSummary {
    model: String,
    variant: String,
    n: usize,
    t: usize,
    seed: u64,
    scheme: String,
    ess_threshold: f64,
    logzhat: f64,
    resample_count: usize,
    floored_probs: usize,
    ess: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replicates: Option<ReplicateStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kalman: Option<KalmanRef>,
}

fn filter_config_from(args: &FilterArgs, seed: u64) -> FilterConfig {
    let mut cfg = FilterConfig::new(
        args.variant.map(Into::into).unwrap_or(Variant::DpfSgr),
        args.n.unwrap_or(10),
        seed,
    );
    if let Some(s) = args.scheme {
        cfg.scheme = s.into();
    }
    if let Some(e) = args.ess_threshold {
        cfg.ess_threshold = e;
    }
    cfg
}

fn cmd_filter(args: FilterArgs) -> Result<(), CliError> {
    let data_path = require(args.data.clone(), "data")?;
    let data = formats::read_dataset_csv(&data_path)?;
    let (kind, theta) = resolve_model_theta(&data_path, args.model, args.theta.clone().map(|l| l.0))?;
    let seed = args.seed.unwrap_or(0);
    let cfg = filter_config_from(&args, seed);

    let manifest = RunManifest::new(
        "filter",
        serde_json::to_value(&args).expect("args serialize"),
        &["filter_summary.json"],
    );
    manifest.write(&args.out)?;

    let model = model_for(kind);
    let run = run_filter(model.as_ref(), &data, &theta, &[], &cfg)?;

    let replicates = match args.replicates {
        Some(count) if count > 0 => {
            let logzs = sweep::indexed(count, args.jobs, |rep| {
                let mut rep_cfg = cfg.clone();
                rep_cfg.seed = derive_seed(seed, &[streams::REPLICATE, rep as u64]);
                run_filter(model.as_ref(), &data, &theta, &[], &rep_cfg)
                    .map(|r| r.logzhat_value())
            });
            let mut vals = Vec::with_capacity(count);
            for r in logzs {
                vals.push(r?);
            }
            let (mean_logz, se_logz) = sgrpf_core::math::mean_se(&vals);
            let zs: Vec<f64> = vals.iter().map(|&l| l.exp()).collect();
            let (mean_z, se_z) = sgrpf_core::math::mean_se(&zs);
            Some(ReplicateStats { count, mean_logz, se_logz, mean_z, se_z })
        }
        _ => None,
    };

    let kalman = match args.oracle.as_deref() {
        Some("kalman") => {
            if kind != ModelKind::Lgssm {
                return Err(CliError::Usage(
                    "--oracle kalman applies to the linear-Gaussian model only".to_string(),
                ));
            }
            let loglik = kalman_loglik(&LgssmModel::default(), &data, &theta);
            Some(KalmanRef { loglik, z: loglik.exp() })
        }
        Some(other) => {
            return Err(CliError::Usage(format!("unknown oracle {other:?}")));
        }
        None => None,
    };

    let summary = FilterSummary {
        model: kind.name().to_string(),
        variant: variant_name(cfg.variant).to_string(),
        n: cfg.n_particles,
        t: data.t_count(),
        seed,
        scheme: scheme_name(cfg.scheme).to_string(),
        ess_threshold: cfg.ess_threshold,
        logzhat: run.logzhat_value(),
        resample_count: run.resample_count,
        floored_probs: run.floored_probs,
        ess: run.ess_trace.clone(),
        replicates,
        kalman,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(args.out.join("filter_summary.json"), text.clone() + "\n")?;
    println!("{text}");
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

struct PairSpec {
    name_a: &'static str,
    name_b: &'static str,
    default_tol: f64,
    default_n: usize,
}

fn pair_spec(pair: &str) -> Result<PairSpec, CliError> {
    let spec = match pair {
        "ad-dpf:fisher" => PairSpec {
            name_a: "ad-dpf",
            name_b: "fisher",
            default_tol: 1e-8,
            default_n: 5,
        },
        "ad-dpf2:alpha" => PairSpec {
            name_a: "ad-dpf2",
            name_b: "alpha",
            default_tol: 1e-8,
            default_n: 4,
        },
        "ad2-dpf:louis" => PairSpec {
            name_a: "ad2-dpf",
            name_b: "louis",
            default_tol: 1e-8,
            default_n: 3,
        },
        "ad-dpf:backward" => PairSpec {
            name_a: "ad-dpf",
            name_b: "backward",
            default_tol: 1e-9,
            default_n: 3,
        },
        "ad-dpf:expect-norm" => PairSpec {
            name_a: "ad-dpf",
            name_b: "expect-norm",
            default_tol: 1e-8,
            default_n: 4,
        },
        "ad-dpf:expect-unnorm" => PairSpec {
            name_a: "ad-dpf",
            name_b: "expect-unnorm",
            default_tol: 1e-8,
            default_n: 4,
        },
        "ad-pf:expect-dice" => PairSpec {
            name_a: "ad-pf",
            name_b: "expect-dice",
            default_tol: 1e-8,
            default_n: 4,
        },
        "ad-dpf:phi-lineage" => PairSpec {
            name_a: "ad-dpf",
            name_b: "phi-lineage",
            default_tol: 1e-8,
            default_n: 4,
        },
        "ad-iwae:fisher" => PairSpec {
            name_a: "ad-iwae",
            name_b: "fisher",
            default_tol: 1e-12,
            default_n: 8,
        },
        "alpha-joint:alpha-trans" => PairSpec {
            name_a: "alpha-joint",
            name_b: "alpha-trans",
            default_tol: 1e-10,
            default_n: 4,
        },
        other => {
            return Err(CliError::Usage(format!(
                "unknown estimator pair {other:?}; see README for the supported list"
            )))
        }
    };
    Ok(spec)
}

fn compare_pair(
    pair: &str,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Result<(ReportValue, ReportValue), CliError> {
    let out = match pair {
        "ad-dpf:fisher" => {
            let cfg = FilterConfig::new(Variant::DpfSgr, n, seed);
            let run = run_filter(model, data, theta, &[], &cfg)?;
            (
                ReportValue::Vector(run.logzhat_gradient(Wrt::Theta)?),
                ReportValue::Vector(fisher_score(&run, model, &data.y)?),
            )
        }
        "ad-dpf2:alpha" => {
            let cfg = FilterConfig::new(Variant::Dpf2, n, seed);
            let run = run_filter(model, data, theta, &[], &cfg)?;
            (
                ReportValue::Vector(run.logzhat_gradient(Wrt::Theta)?),
                ReportValue::Vector(alpha_recursion_score(
                    &run,
                    model,
                    &data.y,
                    AlphaForm::JointDensity,
                )?),
            )
        }
        "ad2-dpf:louis" => {
            let cfg = FilterConfig::new(Variant::DpfSgr, n, seed);
            let run = run_filter(model, data, theta, &[], &cfg)?;
            (
                ReportValue::Matrix(run.logzhat_hessian()?),
                ReportValue::Matrix(louis_hessian(&run, model, &data.y)?),
            )
        }
        "ad-dpf:backward" => {
            let mut cfg = FilterConfig::new(Variant::DpfSgr, n, seed);
            cfg.theta_mode = ThetaMode::Reparam;
            let run = run_filter(model, data, theta, &[], &cfg)?;
            (
                ReportValue::Vector(run.zhat_gradient()?),
                ReportValue::Vector(explicit_backward_gradient(&run, model, &data.y)?.gradient),
            )
        }
        "ad-dpf:expect-norm" => {
            let cfg = FilterConfig::new(Variant::DpfSgr, n, seed);
            let run = run_filter(model, data, theta, &[], &cfg)?;
            let pe = posterior_expectation(&run, model, &data.y, &TerminalState)?;
            (
                ReportValue::Vector(ad_expectation_normalized(&run, &TerminalState)?),
                ReportValue::Vector(pe.grad_normalized),
            )
        }
        "ad-dpf:expect-unnorm" => {
            let cfg = FilterConfig::new(Variant::DpfSgr, n, seed);
            let run = run_filter(model, data, theta, &[], &cfg)?;
            let pe = posterior_expectation(&run, model, &data.y, &TerminalState)?;
            (
                ReportValue::Vector(ad_expectation_unnormalized(&run, &TerminalState)?),
                ReportValue::Vector(pe.grad_unnormalized),
            )
        }
        "ad-pf:expect-dice" => {
            let cfg = FilterConfig::new(Variant::Pf, n, seed);
            let run = run_filter(model, data, theta, &[], &cfg)?;
            (
                ReportValue::Vector(ad_expectation_pf_dice(&run, &TerminalState)?),
                ReportValue::Vector(pf_dice_expectation_gradient(
                    &run,
                    model,
                    &data.y,
                    &TerminalState,
                )?),
            )
        }
        "ad-dpf:phi-lineage" => {
            let mut cfg = FilterConfig::new(Variant::DpfSgr, n, seed);
            cfg.proposal = Proposal::Learned;
            let phi = [0.6, 0.3, -0.2];
            let run = run_filter(model, data, theta, &phi, &cfg)?;
            (
                ReportValue::Vector(run.logzhat_gradient(Wrt::Phi)?),
                ReportValue::Vector(phi_lineage_score(&run, model, &data.y)?),
            )
        }
        "ad-iwae:fisher" => {
            let run = iwae_run(model, theta, data.y[0], n, IwaeProposal::PriorTheta, seed)?;
            let ad = run
                .tape
                .grad_values(run.objective, &run.theta)
                .map_err(sgrpf_core::FilterError::from)?;
            (
                ReportValue::Vector(ad),
                ReportValue::Vector(iwae_fisher(model, theta, data.y[0], &run)?),
            )
        }
        "alpha-joint:alpha-trans" => {
            let cfg = FilterConfig::new(Variant::Dpf2, n, seed);
            let run = run_filter(model, data, theta, &[], &cfg)?;
            (
                ReportValue::Vector(alpha_recursion_score(
                    &run,
                    model,
                    &data.y,
                    AlphaForm::JointDensity,
                )?),
                ReportValue::Vector(alpha_recursion_score(
                    &run,
                    model,
                    &data.y,
                    AlphaForm::TransitionOnly,
                )?),
            )
        }
        other => return Err(CliError::Usage(format!("unknown estimator pair {other:?}"))),
    };
    Ok(out)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let data_path = require(args.data.clone(), "data")?;
    let data = formats::read_dataset_csv(&data_path)?;
    let (kind, theta) = resolve_model_theta(&data_path, args.model, args.theta.clone().map(|l| l.0))?;
    let pair = require(args.pair.clone(), "pair")?;
    let spec = pair_spec(&pair)?;
    let seeds = args.seeds.unwrap_or(50);
    let n = args.n.unwrap_or(spec.default_n);
    let tol = args.tol.unwrap_or(spec.default_tol);
    let base_seed = args.seed.unwrap_or(0);

    let manifest = RunManifest::new(
        "gradcheck",
        serde_json::to_value(&args).expect("args serialize"),
        &["gradcheck.csv"],
    );
    manifest.write(&args.out)?;

    let model = model_for(kind);
    let results = sweep::indexed(seeds as usize, args.jobs, |idx| {
        let seed = base_seed + idx as u64;
        compare_pair(&pair, model.as_ref(), &data, &theta, n, seed)
            .map(|(a, b)| (seed, a.max_rel_diff(&b), a.is_finite() && b.is_finite()))
    });

    let mut rows = Vec::with_capacity(seeds as usize);
    let mut failures = 0usize;
    for r in results {
        let (seed, diff, finite) = r?;
        let pass = finite && diff <= tol;
        if !pass {
            failures += 1;
        }
        rows.push(GradCheckRow {
            seed,
            estimator_a: spec.name_a.to_string(),
            estimator_b: spec.name_b.to_string(),
            max_rel_diff: diff,
            pass,
        });
    }
    formats::write_gradcheck_csv(&args.out.join("gradcheck.csv"), &rows)?;
    let worst = rows.iter().map(|r| r.max_rel_diff).fold(0.0, f64::max);
    println!(
        "pair {} over {} seeds: worst max_rel_diff {} (tol {}) -> {}",
        pair,
        seeds,
        fmt_f64(worst),
        fmt_f64(tol),
        if failures == 0 { "PASS" } else { "FAIL" }
    );
    if failures > 0 {
        return Err(CliError::Numeric(format!("{failures} of {seeds} seeds exceeded tolerance")));
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let data_path = require(args.data.clone(), "data")?;
    let data = formats::read_dataset_csv(&data_path)?;
    let (kind, true_theta) = resolve_model_theta(&data_path, args.model, None)
        .map(|(k, t)| (k, Some(t)))
        .or_else(|_| {
            args.model
                .map(|k| (k, None))
                .ok_or_else(|| CliError::Usage("cannot determine model".to_string()))
        })?;
    let test_data = match &args.test_data {
        Some(p) => Some(formats::read_dataset_csv(p)?),
        None => None,
    };

    let theta0 = args.theta0.clone().map(|l| l.0).unwrap_or_else(|| match kind {
        ModelKind::Lgssm => vec![0.3, 0.4],
        ModelKind::Sv => vec![0.5, 0.5, 0.5],
    });
    check_theta(kind, &theta0)?;
    let epochs = args.epochs.unwrap_or(500);
    if epochs == 0 {
        return Err(CliError::Usage("--epochs must be at least 1".to_string()));
    }
    let lr = args.lr.unwrap_or(0.01);
    let seed = args.seed.unwrap_or(0);

    let mut cfg = FilterConfig::new(
        args.variant.map(Into::into).unwrap_or(Variant::DpfSgr),
        args.n.unwrap_or(25),
        seed,
    );
    if let Some(s) = args.scheme {
        cfg.scheme = s.into();
    }
    cfg.ess_threshold = args.ess_threshold.unwrap_or(match kind {
        ModelKind::Lgssm => 1.0,
        ModelKind::Sv => 0.5,
    });
    cfg.transform = kind.train_transform();

    let manifest = RunManifest::new(
        "train",
        serde_json::to_value(&args).expect("args serialize"),
        &["train_trace.csv"],
    );
    manifest.write(&args.out)?;

    let model = model_for(kind);
    let setup = TrainSetup {
        model: model.as_ref(),
        train: &data,
        test: test_data.as_ref(),
        cfg,
        grad_source: GradSource::Ad,
        true_theta: true_theta.clone(),
        fixed_noise: false,
        epochs,
    };
    let mut opt = match args.optimizer.unwrap_or(OptimizerArg::Adam) {
        OptimizerArg::Adam => OptimizerState::adam(lr, kind.dim_theta()),
        OptimizerArg::Sgd => OptimizerState::sgd(lr, kind.dim_theta()),
    };
    if lr <= 0.0 {
        return Err(CliError::Usage("--lr must be positive".to_string()));
    }
    let clock = SystemClock::default();
    let trace_path = args.out.join("train_trace.csv");
    match train(&setup, &mut opt, &theta0, &clock) {
        Ok(trace) => {
            formats::write_trace_csv(&trace_path, &trace)?;
            let last = trace.records.last().expect("at least one epoch");
            let theta_str: Vec<String> = last.theta.iter().map(|&v| fmt_f64(v)).collect();
            println!("final theta: [{}]", theta_str.join(", "));
            println!("l1 error vs generating theta: {}", fmt_f64(last.l1_error));
            Ok(())
        }
        Err(sgrpf_core::learn::LearnError::Diverged { epoch, trace }) => {
            formats::write_trace_csv(&trace_path, &trace)?;
            Err(CliError::Divergence(format!(
                "training diverged at epoch {epoch}; partial trace written"
            )))
        }
        Err(sgrpf_core::learn::LearnError::Filter(e)) => Err(e.into()),
    }
}

// ── bench ───────────────────────────────────────────────────────────────

fn time_variant(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    theta: &[f64],
    cfg: &FilterConfig,
    warmup: usize,
    reps: usize,
) -> Result<(f64, f64), CliError> {
    let one_pass = |seed: u64| -> Result<f64, CliError> {
        let mut c = cfg.clone();
        c.seed = seed;
        let start = Instant::now();
        let run = run_filter(model, data, theta, &[], &c)?;
        let _ = run.logzhat_gradient(Wrt::Theta)?;
        Ok(start.elapsed().as_secs_f64())
    };
    for rep in 0..warmup {
        one_pass(derive_seed(cfg.seed, &[900, rep as u64]))?;
    }
    let mut times = Vec::with_capacity(reps);
    for rep in 0..reps {
        times.push(one_pass(derive_seed(cfg.seed, &[901, rep as u64]))?);
    }
    let (mean, se) = sgrpf_core::math::mean_se(&times);
    Ok((mean, se * (reps as f64).sqrt()))
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let kind = args.model.unwrap_or(ModelKind::Sv);
    let theta = args.theta.clone().map(|l| l.0).unwrap_or_else(|| match kind {
        ModelKind::Lgssm => vec![0.9, 1.0],
        ModelKind::Sv => vec![2.0, 0.9, 1.0],
    });
    check_theta(kind, &theta)?;
    let t = args.t.unwrap_or(100);
    let n = args.n.unwrap_or(25);
    let variants: Vec<Variant> = args
        .variants
        .clone()
        .map(|vs| vs.into_iter().map(Into::into).collect())
        .unwrap_or_else(|| vec![Variant::DpfSgr, Variant::Pf, Variant::PfSf, Variant::Sis]);
    let reps = args.reps.unwrap_or(10);
    let warmup = args.warmup.unwrap_or(3);
    let seed = args.seed.unwrap_or(0);
    let scaling = args.mpf_scaling.clone().map(|l| l.0).unwrap_or_else(|| vec![16, 64]);

    let manifest = RunManifest::new(
        "bench",
        serde_json::to_value(&args).expect("args serialize"),
        &["bench.csv"],
    );
    manifest.write(&args.out)?;

    let model = model_for(kind);
    let data = sgrpf_core::simulate(model.as_ref(), &theta, t, seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mut rows = Vec::new();
    let mut sgr_mean = None;
    let mut pf_mean = None;
    for variant in &variants {
        let mut cfg = FilterConfig::new(*variant, n, seed);
        if kind == ModelKind::Sv {
            cfg.ess_threshold = 0.5;
        }
        let (mean, sd) = time_variant(model.as_ref(), &data, &theta, &cfg, warmup, reps)?;
        if *variant == Variant::DpfSgr {
            sgr_mean = Some(mean);
        }
        if *variant == Variant::Pf {
            pf_mean = Some(mean);
        }
        rows.push(BenchRow {
            label: variant_name(*variant).to_string(),
            n,
            t,
            reps,
            mean_seconds: mean,
            sd_seconds: sd,
        });
    }
    // marginal-filter scaling in N (quadratic density work per step)
    let mut mpf_means = Vec::new();
    for &mpf_n in &scaling {
        let cfg = FilterConfig::new(Variant::Mpf, mpf_n, seed);
        let (mean, sd) = time_variant(model.as_ref(), &data, &theta, &cfg, warmup.min(1), reps)?;
        mpf_means.push(mean);
        rows.push(BenchRow {
            label: format!("mpf-n{mpf_n}"),
            n: mpf_n,
            t,
            reps,
            mean_seconds: mean,
            sd_seconds: sd,
        });
    }
    formats::write_bench_csv(&args.out.join("bench.csv"), &rows)?;

    if let (Some(sgr), Some(pf)) = (sgr_mean, pf_mean) {
        let ratio = sgr / pf;
        println!(
            "dpf-sgr / pf wall-clock ratio: {} ({})",
            fmt_f64(ratio),
            if ratio < 1.25 { "within 25% budget" } else { "over 25% budget" }
        );
    }
    if mpf_means.len() == 2 && scaling.len() == 2 {
        let ratio = mpf_means[1] / mpf_means[0];
        println!(
            "mpf time ratio n={} over n={}: {}",
            scaling[1],
            scaling[0],
            fmt_f64(ratio)
        );
    }
    for row in &rows {
        println!(
            "{label}: mean {mean}s sd {sd}s",
            label = row.label,
            mean = fmt_f64(row.mean_seconds),
            sd = fmt_f64(row.sd_seconds)
        );
    }
    Ok(())
}

// re-exported for integration tests
pub fn read_dataset(path: &PathBuf) -> Result<Dataset, CliError> {
    formats::read_dataset_csv(path)
}
