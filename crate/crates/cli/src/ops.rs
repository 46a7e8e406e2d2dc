//! Command implementations behind the CLI surface.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pce_core::bayes::{
    gelman_rubin, gibbs_model12, gibbs_model34, CategoricalModel, McmcConfig, PosteriorDraws,
    PriorSet, ProbitModel,
};
use pce_core::copula::{
    joint_equipercentile, joint_from_gaussian_copula, joint_from_monotonicity, tabular,
    JointStratumModel, Provenance, RhoSpec, MONOTONICITY_EPS,
};
use pce_core::dgp::{self, DgpId, DgpSpec};
use pce_core::discrete_id::{
    build_and_solve_general, build_system_constant_s0, pce_constant_s0, pce_from_laws,
    rank_diagnostic, OutcomeFunctional,
};
use pce_core::error::{Error, Result};
use pce_core::io;
use pce_core::model::{Dataset, PceEstimate, YKind};
use pce_core::mom;
use pce_core::numeric::quantile;
use pce_core::parametric::{
    constant_ratio_diagnostic, fit_ghat, fit_prop1_linear, fit_prop2_probit, fit_prop3_binary,
    fit_prop4_prop5, fit_prop_s1_discrete_w, ghat_dependence_check, linear_independence_diagnostic,
    poly_basis, BasisFn, Family, OutcomeModelSpec, ParametricFit,
};
use pce_core::scores::{
    fit_principal_score_constant_s0, fit_propensity, pce_weighting_constant_s0,
    pce_weighting_general,
};

use crate::manifest::{read_manifest, OutDir};
use crate::{Cli, Command, DiagnoseArgs, EstimateArgs, ReportArgs, SimulateArgs, SweepArgs};

/// Values from the optional JSON config file; explicit flags win.
struct Config(Option<serde_json::Value>);

impl Config {
    fn load(path: &Option<PathBuf>) -> Result<Config> {
        match path {
            None => Ok(Config(None)),
            Some(p) => {
                let body = fs::read_to_string(p)?;
                Ok(Config(Some(serde_json::from_str(&body)?)))
            }
        }
    }

    fn get<T: serde::de::DeserializeOwned>(&self, section: &str, key: &str) -> Option<T> {
        let root = self.0.as_ref()?;
        let v = if section.is_empty() {
            root.get(key)?
        } else {
            root.get(section)?.get(key)?
        };
        serde_json::from_value(v.clone()).ok()
    }
}

fn pick<T>(cli: Option<T>, cfg: Option<T>, default: T) -> T {
    cli.or(cfg).unwrap_or(default)
}

fn require<T>(cli: Option<T>, cfg: Option<T>, what: &str) -> Result<T> {
    cli.or(cfg)
        .ok_or_else(|| Error::BadParams(format!("missing required --{what}")))
}

pub fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    let cfg = Config::load(&cli.config)?;
    let seed = pick(cli.seed, cfg.get("", "seed"), 0);
    let out = pick(
        cli.out.clone(),
        cfg.get::<String>("", "out").map(PathBuf::from),
        PathBuf::from("out"),
    );
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args, &cfg, seed, &out, argv),
        Command::Estimate(args) => cmd_estimate(&args, &cfg, seed, &out, argv),
        Command::Diagnose(args) => cmd_diagnose(&args, &cfg, seed, &out, argv),
        Command::Sweep(args) => cmd_sweep(&args, &cfg, seed, &out, argv),
        Command::Report(args) => cmd_report(&args, &cfg, seed, &out, argv),
        Command::Rerun(args) => {
            let stored = read_manifest(&args.manifest)?;
            let mut argv = stored.command.clone();
            if let Some(dir) = cli.out {
                // Replace or append the output directory.
                if let Some(i) = argv.iter().position(|a| a == "--out") {
                    argv[i + 1] = dir.display().to_string();
                } else {
                    argv.push("--out".into());
                    argv.push(dir.display().to_string());
                }
            }
            let mut full = vec!["pce".to_string()];
            full.extend(argv.clone());
            let parsed = <Cli as clap::Parser>::try_parse_from(&full)
                .map_err(|e| Error::BadParams(format!("manifest command invalid: {e}")))?;
            dispatch(parsed, argv)
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(
    args: &SimulateArgs,
    cfg: &Config,
    seed: u64,
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    let dgp_name: String = require(args.dgp.clone(), cfg.get("simulate", "dgp"), "dgp")?;
    let id = match dgp_name.as_str() {
        "1" => DgpId::Dgp1,
        "2" => DgpId::Dgp2,
        "3" => DgpId::Dgp3,
        "4" => DgpId::Dgp4,
        "jobs" | "jobs-like" => DgpId::JobsLike,
        other => return Err(Error::BadParams(format!("unknown design `{other}`"))),
    };
    let population = args.population || cfg.get("simulate", "population").unwrap_or(false);
    let generated = if population {
        match id {
            DgpId::Dgp3 => dgp::population_dgp3(),
            DgpId::Dgp4 => dgp::population_dgp4(),
            _ => {
                return Err(Error::BadParams(
                    "--population is defined for designs 3 and 4".into(),
                ))
            }
        }
    } else {
        let n = pick(args.n, cfg.get("simulate", "n"), 1000);
        let mut spec = DgpSpec::new(id, n, seed);
        if let Some(rho) = args.rho_true.or_else(|| cfg.get("simulate", "rho_true")) {
            if id != DgpId::JobsLike {
                return Err(Error::BadParams(
                    "--rho-true applies to the jobs design".into(),
                ));
            }
            spec.params.insert("rho".into(), rho);
        }
        let mut overrides = BTreeMap::new();
        for kv in &args.params {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::BadParams(format!("bad --param `{kv}`, expected k=v")))?;
            let v: f64 = v
                .parse()
                .map_err(|e| Error::BadParams(format!("bad --param value `{kv}`: {e}")))?;
            overrides.insert(k.to_string(), v);
        }
        spec = spec.with_overrides(&overrides)?;
        dgp::generate(&spec)?
    };

    let mut dir = OutDir::create(out, argv, seed)?;
    io::write_dataset_csv(&generated.dataset, &dir.path("dataset.csv")?)?;
    io::write_schema_json(
        generated.dataset.schema(),
        &dir.path("dataset.schema.json")?,
    )?;
    write_json(&dir.path("truth.json")?, &generated.truth)?;
    // Latent strata go to a separate oracle file, never into the dataset.
    let mut oracle = BufWriter::new(fs::File::create(dir.path("oracle.csv")?)?);
    writeln!(oracle, "s1,s0")?;
    for lat in &generated.latent_strata {
        writeln!(oracle, "{},{}", lat.s1, lat.s0.unwrap_or(f64::NAN))?;
    }
    dir.finish()?;
    println!(
        "wrote {} units to {}",
        generated.dataset.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate

fn parse_basis(spec: &Option<String>) -> Result<Vec<BasisFn>> {
    let Some(spec) = spec else {
        return Ok(poly_basis(1));
    };
    if spec == "none" {
        return Ok(Vec::new());
    }
    if let Some(deg) = spec.strip_prefix("poly:") {
        let deg: u32 = deg
            .parse()
            .map_err(|e| Error::BadParams(format!("bad basis `{spec}`: {e}")))?;
        return Ok(poly_basis(deg));
    }
    if let Some(vals) = spec.strip_prefix("ind:") {
        return vals
            .split(',')
            .map(|v| {
                v.parse()
                    .map(BasisFn::Indicator)
                    .map_err(|e| Error::BadParams(format!("bad basis `{spec}`: {e}")))
            })
            .collect();
    }
    Err(Error::BadParams(format!(
        "unknown basis spec `{spec}` (poly:K, ind:v1,v2 or none)"
    )))
}

fn parse_joint(d: &Dataset, spec: &str) -> Result<JointStratumModel> {
    if spec == "mono" {
        return joint_from_monotonicity(d, MONOTONICITY_EPS);
    }
    if spec == "equi" {
        return joint_equipercentile(d);
    }
    if let Some(rho) = spec.strip_prefix("copula:") {
        let rho: f64 = rho
            .parse()
            .map_err(|e| Error::BadParams(format!("bad joint `{spec}`: {e}")))?;
        return joint_from_gaussian_copula(d, &RhoSpec::Constant(rho), Provenance::Copula(rho));
    }
    if let Some(rho) = spec.strip_prefix("sensitivity:") {
        let rho: f64 = rho
            .parse()
            .map_err(|e| Error::BadParams(format!("bad joint `{spec}`: {e}")))?;
        return joint_from_gaussian_copula(
            d,
            &RhoSpec::Constant(rho),
            Provenance::Sensitivity(rho),
        );
    }
    if let Some(path) = spec.strip_prefix("oracle:") {
        let truth: dgp::Truth = serde_json::from_str(&fs::read_to_string(path)?)?;
        let table = truth
            .stratum_table
            .ok_or_else(|| Error::BadParams("truth file has no stratum table".into()))?;
        return tabular(
            table.w_values,
            table.w_probs,
            table.strata,
            table.mass,
            Provenance::Oracle,
        );
    }
    Err(Error::BadParams(format!(
        "unknown joint `{spec}` (mono, equi, copula:RHO, sensitivity:RHO or oracle:FILE)"
    )))
}

fn parse_strata(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(';')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::BadParams(format!("bad stratum `{pair}`, expected s1:s0")))?;
            Ok((
                a.parse()
                    .map_err(|e| Error::BadParams(format!("bad stratum `{pair}`: {e}")))?,
                b.parse()
                    .map_err(|e| Error::BadParams(format!("bad stratum `{pair}`: {e}")))?,
            ))
        })
        .collect()
}

fn parse_f64_list(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e| Error::BadParams(format!("bad number `{v}`: {e}")))
        })
        .collect()
}

struct ResolvedEstimate {
    method: String,
    joint: Option<String>,
    rho: f64,
    f_basis: Vec<BasisFn>,
    h_basis: Vec<BasisFn>,
    g_degree: u32,
    s1_points: Option<Vec<f64>>,
    strata: Option<Vec<(f64, f64)>>,
}

struct MethodOutput {
    estimates: Vec<PceEstimate>,
    coefficients: Option<BTreeMap<String, f64>>,
    diagnostics: BTreeMap<String, serde_json::Value>,
    pce_plane: Option<[f64; 3]>,
}

/// Constant-control estimators assume the control-arm intermediate is
/// degenerate; if it visibly varies, the declared assumption is suspect and
/// the caller gets a warning rather than silence.
fn constant_control_note(d: &Dataset, diagnostics: &mut BTreeMap<String, serde_json::Value>) {
    let mut control = d.control().map(|u| u.s);
    let Some(first) = control.next() else { return };
    if control.any(|s| s != first) {
        diagnostics.insert(
            "constant_control_warning".into(),
            "control-arm intermediate varies; the constant-control assumption declared by \
             this method looks violated"
                .into(),
        );
    }
}

fn from_parametric(fit: ParametricFit, plane: bool) -> MethodOutput {
    let pce_plane = plane.then(|| {
        [
            fit.coef("y1.intercept") - fit.coef("y0.intercept"),
            fit.coef("y1.s1") - fit.coef("y0.s1"),
            fit.coef("y1.s0") - fit.coef("y0.s0"),
        ]
    });
    MethodOutput {
        estimates: fit.surface,
        coefficients: Some(fit.coef),
        diagnostics: fit.diagnostics,
        pce_plane,
    }
}

fn default_joint_strata(d: &Dataset, joint: &JointStratumModel) -> Result<Vec<(f64, f64)>> {
    match joint {
        JointStratumModel::Tabular { .. } => Ok(joint
            .marginal_mass()?
            .into_iter()
            .filter(|&(_, m)| m > 0.0)
            .map(|(u, _)| u)
            .collect()),
        JointStratumModel::Gaussian { .. } => mom::default_strata(d),
    }
}

fn run_method(d: &Dataset, r: &ResolvedEstimate) -> Result<MethodOutput> {
    match r.method.as_str() {
        "weighting" => {
            let pr = fit_propensity(d)?;
            if let Some(joint_spec) = &r.joint {
                let joint = parse_joint(d, joint_spec)?;
                let strata = match &r.strata {
                    Some(s) => s.clone(),
                    None => default_joint_strata(d, &joint)?,
                };
                let estimates = strata
                    .iter()
                    .map(|&(s1, s0)| {
                        pce_weighting_general(
                            d,
                            &joint,
                            &pr,
                            pce_core::model::PrincipalStratum::joint(s1, s0),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MethodOutput {
                    estimates,
                    coefficients: None,
                    diagnostics: BTreeMap::new(),
                    pce_plane: None,
                })
            } else {
                let ps = fit_principal_score_constant_s0(d)?;
                let points = match (&r.s1_points, ps.support()) {
                    (Some(p), _) => p.clone(),
                    (None, Some(support)) => support.to_vec(),
                    (None, None) => {
                        let s: Vec<f64> = d.treated().map(|u| u.s).collect();
                        [0.1, 0.3, 0.5, 0.7, 0.9]
                            .iter()
                            .map(|&q| quantile(&s, q))
                            .collect()
                    }
                };
                let estimates = points
                    .iter()
                    .map(|&s1| pce_weighting_constant_s0(d, &ps, &pr, s1))
                    .collect::<Result<Vec<_>>>()?;
                let mut diagnostics = BTreeMap::new();
                constant_control_note(d, &mut diagnostics);
                Ok(MethodOutput {
                    estimates,
                    coefficients: None,
                    diagnostics,
                    pce_plane: None,
                })
            }
        }
        "discrete-ai" => {
            if let Some(joint_spec) = &r.joint {
                let joint = parse_joint(d, joint_spec)?;
                let arm0 = build_and_solve_general(d, &joint, 0, OutcomeFunctional::Mean)?;
                let arm1 = build_and_solve_general(d, &joint, 1, OutcomeFunctional::Mean)?;
                let estimates = pce_from_laws(&arm1, &arm0, &joint)?;
                let mut diagnostics = BTreeMap::new();
                for solve in [&arm0, &arm1] {
                    for (label, diag) in &solve.rank_checks {
                        diagnostics.insert(
                            format!("rank[arm{} {}]", solve.arm, label),
                            serde_json::to_value(diag)?,
                        );
                    }
                    for (label, raw) in &solve.preclip {
                        diagnostics.insert(
                            format!("preclip[arm{} {}]", solve.arm, label),
                            (*raw).into(),
                        );
                    }
                }
                Ok(MethodOutput {
                    estimates,
                    coefficients: None,
                    diagnostics,
                    pce_plane: None,
                })
            } else {
                let estimates = pce_constant_s0(d)?;
                let sys = build_system_constant_s0(d, OutcomeFunctional::Mean)?;
                let mut diagnostics = BTreeMap::new();
                diagnostics.insert("rank".into(), serde_json::to_value(rank_diagnostic(&sys))?);
                constant_control_note(d, &mut diagnostics);
                Ok(MethodOutput {
                    estimates,
                    coefficients: None,
                    diagnostics,
                    pce_plane: None,
                })
            }
        }
        "prop1" | "prop2" => {
            let family = if r.method == "prop1" {
                Family::Linear
            } else {
                Family::Probit
            };
            let mut spec = OutcomeModelSpec::new(family, r.f_basis.clone());
            spec.g_degree = r.g_degree;
            let fit = match family {
                Family::Linear => fit_prop1_linear(d, &spec, r.s1_points.as_deref())?,
                Family::Probit => fit_prop2_probit(d, &spec, r.s1_points.as_deref())?,
            };
            Ok(from_parametric(fit, false))
        }
        "prop3" => Ok(from_parametric(fit_prop3_binary(d)?, true)),
        "prop45" => {
            let joint_spec = r.joint.as_ref().ok_or_else(|| {
                Error::BadParams("prop45 needs --joint (equi or copula:RHO)".into())
            })?;
            let joint = parse_joint(d, joint_spec)?;
            let family = if d.schema().y == YKind::Binary {
                Family::Probit
            } else {
                Family::Linear
            };
            let mut spec = OutcomeModelSpec::new(family, r.f_basis.clone());
            spec.h_basis = r.h_basis.clone();
            spec.g_degree = r.g_degree;
            let strata = match &r.strata {
                Some(s) => s.clone(),
                None => default_joint_strata(d, &joint)?,
            };
            let plane = family == Family::Linear && spec.f_basis.is_empty();
            Ok(from_parametric(
                fit_prop4_prop5(d, &joint, &spec, &strata)?,
                plane,
            ))
        }
        "propS1" | "props1" => {
            let joint_spec = r
                .joint
                .as_ref()
                .ok_or_else(|| Error::BadParams("propS1 needs --joint".into()))?;
            let joint = parse_joint(d, joint_spec)?;
            let strata = match &r.strata {
                Some(s) => s.clone(),
                None => default_joint_strata(d, &joint)?,
            };
            Ok(from_parametric(
                fit_prop_s1_discrete_w(d, &joint, &strata)?,
                true,
            ))
        }
        "mom" => {
            let fit = mom::mom_fit(d, r.rho)?;
            let strata = match &r.strata {
                Some(s) => s.clone(),
                None => mom::default_strata(d)?,
            };
            let estimates = mom::mom_estimate(d, r.rho, &strata)?;
            let mut coefficients = BTreeMap::new();
            for key in [
                "y1.intercept",
                "y1.s1",
                "y1.s0",
                "y0.intercept",
                "y0.s1",
                "y0.s0",
            ] {
                coefficients.insert(key.to_string(), fit.coef(key));
            }
            let mut diagnostics = BTreeMap::new();
            diagnostics.insert("rho".into(), r.rho.into());
            diagnostics.insert("joint_provisional".into(), true.into());
            Ok(MethodOutput {
                estimates,
                coefficients: Some(coefficients),
                diagnostics,
                pce_plane: Some([
                    fit.coef("y1.intercept") - fit.coef("y0.intercept"),
                    fit.coef("y1.s1") - fit.coef("y0.s1"),
                    fit.coef("y1.s0") - fit.coef("y0.s0"),
                ]),
            })
        }
        other => Err(Error::BadParams(format!("unknown method `{other}`"))),
    }
}

fn cmd_estimate(
    args: &EstimateArgs,
    cfg: &Config,
    seed: u64,
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    let data: PathBuf = require(
        args.data.clone(),
        cfg.get::<String>("estimate", "data").map(PathBuf::from),
        "data",
    )?;
    let schema = args
        .schema
        .clone()
        .or_else(|| cfg.get::<String>("estimate", "schema").map(PathBuf::from));
    let d = io::read_dataset(&data, schema.as_deref())?;
    d.require_both_arms()?;
    let method: String = require(args.method.clone(), cfg.get("estimate", "method"), "method")?;

    let mut dir = OutDir::create(out, argv, seed)?;
    dir.record_input(&data)?;
    if let Some(s) = &schema {
        dir.record_input(s)?;
    } else {
        dir.record_input(&data.with_extension("schema.json"))?;
    }

    if method == "bayes" {
        return cmd_estimate_bayes(args, cfg, seed, dir, &d);
    }

    let s1_points = match args.s1.clone().or_else(|| cfg.get("estimate", "s1")) {
        Some(spec) => Some(parse_f64_list(&spec)?),
        None => None,
    };
    let strata = match args
        .strata
        .clone()
        .or_else(|| cfg.get("estimate", "strata"))
    {
        Some(spec) => Some(parse_strata(&spec)?),
        None => None,
    };
    let f_basis = parse_basis(&args.basis.clone().or_else(|| cfg.get("estimate", "basis")))?;
    let h_spec = args
        .hbasis
        .clone()
        .or_else(|| cfg.get("estimate", "hbasis"));
    let h_basis = if h_spec.is_some() {
        parse_basis(&h_spec)?
    } else {
        f_basis.clone()
    };
    let resolved = ResolvedEstimate {
        method,
        joint: args.joint.clone().or_else(|| cfg.get("estimate", "joint")),
        rho: pick(args.rho, cfg.get("estimate", "rho"), 0.0),
        f_basis,
        h_basis,
        g_degree: pick(args.gdeg, cfg.get("estimate", "gdeg"), 3),
        s1_points,
        strata,
    };

    let mut output = run_method(&d, &resolved)?;
    for est in &mut output.estimates {
        est.seed = seed;
    }

    // Optional percentile intervals by rerunning the full method per
    // resample.
    let replicates = pick(args.bootstrap, cfg.get("estimate", "bootstrap"), 0);
    if replicates > 0 {
        let level = pick(args.level, cfg.get("estimate", "level"), 0.95);
        let runner = |dd: &Dataset| -> Result<Vec<(String, f64)>> {
            let o = run_method(dd, &resolved)?;
            Ok(o.estimates
                .iter()
                .map(|e| (e.stratum.label(), e.point))
                .collect())
        };
        let boot = mom::bootstrap_ci(&d, &runner, replicates, level, seed)?;
        for est in &mut output.estimates {
            if let Some(iv) = boot
                .intervals
                .iter()
                .find(|iv| iv.label == est.stratum.label())
            {
                *est = est.clone().with_interval(iv.lower, iv.upper, level);
            }
        }
        output
            .diagnostics
            .insert("bootstrap_failures".into(), (boot.failures as f64).into());
        output
            .diagnostics
            .insert("bootstrap_replicates".into(), (replicates as f64).into());
    }

    if let Some(note) = output.diagnostics.get("constant_control_warning") {
        eprintln!("warning: {}", note.as_str().unwrap_or_default());
    }
    write_json(&dir.path("estimates.json")?, &output.estimates)?;
    write_json(&dir.path("diagnostics.json")?, &output.diagnostics)?;
    if let Some(coef) = &output.coefficients {
        let s1s: Vec<f64> = d.treated().map(|u| u.s).collect();
        let s0s: Vec<f64> = d.control().map(|u| u.s).collect();
        let body = serde_json::json!({
            "method": resolved.method,
            "coef": coef,
            "pce_plane": output.pce_plane.map(|p| serde_json::json!({
                "intercept": p[0], "s1": p[1], "s0": p[2],
            })),
            "s1_range": [quantile(&s1s, 0.0), quantile(&s1s, 1.0)],
            "s0_range": [quantile(&s0s, 0.0), quantile(&s0s, 1.0)],
        });
        write_json(&dir.path("coefficients.json")?, &body)?;
    }
    dir.finish()?;
    for est in &output.estimates {
        println!("{} {} = {:.6}", est.method, est.stratum.label(), est.point);
    }
    Ok(())
}

fn cmd_estimate_bayes(
    args: &EstimateArgs,
    cfg: &Config,
    seed: u64,
    mut dir: OutDir,
    d: &Dataset,
) -> Result<()> {
    let model: u8 = require(args.model, cfg.get("estimate", "model"), "model")?;
    let prior_name: String = require(args.prior.clone(), cfg.get("estimate", "prior"), "prior")?;
    let mut mc = McmcConfig::new(seed, PriorSet::by_name(&prior_name)?);
    mc.iterations = pick(
        args.iterations,
        cfg.get("estimate", "iterations"),
        mc.iterations,
    );
    mc.burn_in = pick(args.burn_in, cfg.get("estimate", "burn_in"), mc.burn_in);
    mc.chains = pick(args.chains, cfg.get("estimate", "chains"), mc.chains);
    mc.thin = pick(args.thin, cfg.get("estimate", "thin"), mc.thin);

    let draws: PosteriorDraws = match model {
        1 => gibbs_model12(d, ProbitModel::M1, &mc)?,
        2 => gibbs_model12(d, ProbitModel::M2, &mc)?,
        3 => gibbs_model34(d, CategoricalModel::M3, &mc)?,
        4 => gibbs_model34(d, CategoricalModel::M4, &mc)?,
        other => return Err(Error::BadParams(format!("unknown sampler model `{other}`"))),
    };

    // One trace file per parameter per chain, plus a quantile summary.
    let mut summary = Vec::new();
    for name in draws.param_names() {
        let chains = draws.chains_for(name)?;
        for (k, chain) in chains.iter().enumerate() {
            let path = dir.path(&format!("traces/trace_{name}_chain{k}.csv"))?;
            let mut f = BufWriter::new(fs::File::create(path)?);
            writeln!(f, "value")?;
            for v in chain {
                writeln!(f, "{v}")?;
            }
        }
        let gr = gelman_rubin(&draws, name)?;
        summary.push(serde_json::json!({
            "parameter": name,
            "median": draws.median_of(name)?,
            "q025": draws.quantile_of(name, 0.025)?,
            "q975": draws.quantile_of(name, 0.975)?,
            "gelman_rubin": gr.value,
            "degenerate": gr.degenerate,
        }));
    }
    write_json(&dir.path("summary.json")?, &summary)?;
    write_json(
        &dir.path("diagnostics.json")?,
        &serde_json::json!({
            "meta": draws.meta,
            "pce_grid": draws.pce_grid,
        }),
    )?;
    dir.finish()?;
    println!("wrote {} parameter traces", summary.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose

fn cmd_diagnose(
    args: &DiagnoseArgs,
    cfg: &Config,
    seed: u64,
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    let data: PathBuf = require(
        args.data.clone(),
        cfg.get::<String>("diagnose", "data").map(PathBuf::from),
        "data",
    )?;
    let schema = args
        .schema
        .clone()
        .or_else(|| cfg.get::<String>("diagnose", "schema").map(PathBuf::from));
    let d = io::read_dataset(&data, schema.as_deref())?;
    let mut dir = OutDir::create(out, argv, seed)?;
    dir.record_input(&data)?;

    let mut checks: Vec<serde_json::Value> = Vec::new();
    let mut push = |name: &str, outcome: Result<serde_json::Value>| {
        let entry = match outcome {
            Ok(details) => serde_json::json!({
                "check": name, "applicable": true,
                "pass": details.get("pass").and_then(|p| p.as_bool()).unwrap_or(true),
                "details": details,
            }),
            Err(Error::BadParams(msg)) | Err(Error::SchemaViolation(msg)) => serde_json::json!({
                "check": name, "applicable": false, "pass": serde_json::Value::Null,
                "details": {"reason": msg},
            }),
            Err(e) => serde_json::json!({
                "check": name, "applicable": true, "pass": false,
                "details": {"condition": e.condition_name(), "error": e.to_string()},
            }),
        };
        checks.push(entry);
    };

    // Rank of the constant-control moment system (discrete S and W).
    push(
        "rank-constant-control",
        build_system_constant_s0(&d, OutcomeFunctional::Mean).map(|sys| {
            let diag = rank_diagnostic(&sys);
            serde_json::json!({
                "pass": diag.identifiable,
                "rank": diag.rank, "required": diag.required,
                "condition": diag.condition,
            })
        }),
    );

    // Monotonicity of a binary intermediate, and the rank checks of the
    // general route under it.
    let mono = joint_from_monotonicity(&d, MONOTONICITY_EPS);
    push(
        "monotonicity",
        mono.as_ref()
            .map(|_| serde_json::json!({"pass": true}))
            .map_err(|e| match e {
                Error::MonotonicityViolated {
                    w,
                    margin,
                    tolerance,
                } => Error::MonotonicityViolated {
                    w: *w,
                    margin: *margin,
                    tolerance: *tolerance,
                },
                Error::BadParams(m) => Error::BadParams(m.clone()),
                other => Error::BadParams(other.to_string()),
            }),
    );
    if let Ok(joint) = &mono {
        push(
            "rank-general",
            (|| {
                let arm0 = build_and_solve_general(&d, joint, 0, OutcomeFunctional::Mean)?;
                let arm1 = build_and_solve_general(&d, joint, 1, OutcomeFunctional::Mean)?;
                let mut all = serde_json::Map::new();
                let mut pass = true;
                for solve in [&arm0, &arm1] {
                    for (label, diag) in &solve.rank_checks {
                        pass &= diag.identifiable;
                        all.insert(
                            format!("arm{} {}", solve.arm, label),
                            serde_json::to_value(diag)?,
                        );
                    }
                }
                all.insert("pass".into(), pass.into());
                Ok(serde_json::Value::Object(all))
            })(),
        );
    }

    // Constant-ratio condition for the binary no-independence estimator.
    push(
        "constant-ratio",
        constant_ratio_diagnostic(&d).map(|(s1, s0)| {
            serde_json::json!({
                "pass": s1 >= 1e-8 && s0 >= 1e-8,
                "ratio_spread_treated": s1,
                "ratio_spread_control": s0,
            })
        }),
    );

    // Linear independence of {1, g(w), f_j(w)} for the constant-control
    // outcome-model estimators.
    let g_degree = pick(args.gdeg, cfg.get("diagnose", "gdeg"), 3);
    let f_basis = parse_basis(&args.basis.clone().or_else(|| cfg.get("diagnose", "basis")))?;
    push(
        "linear-independence",
        (|| {
            if d.schema().s.is_discrete() {
                return Err(Error::BadParams(
                    "applies to continuous intermediates".into(),
                ));
            }
            let (f_stat, extra) = match ghat_dependence_check(&d, &f_basis, g_degree) {
                Ok(v) => v,
                Err(Error::LinearDependence(msg)) => {
                    return Ok(serde_json::json!({"pass": false, "reason": msg}))
                }
                Err(e) => return Err(e),
            };
            let (ghat, _) = fit_ghat(&d, g_degree)?;
            let ws: Vec<f64> = d.units().iter().map(|u| u.w).collect();
            let mut cols = vec![ws
                .iter()
                .map(|&w| ghat.eval(w))
                .collect::<Result<Vec<f64>>>()?];
            for f in &f_basis {
                cols.push(ws.iter().map(|&w| f.eval(w)).collect());
            }
            let lin = linear_independence_diagnostic(&cols);
            Ok(serde_json::json!({
                "pass": true,
                "added_variable_f": f_stat,
                "extra_terms": extra,
                "min_singular": lin.min_singular,
            }))
        })(),
    );

    let report = serde_json::json!({"checks": checks});
    write_json(&dir.path("diagnostics.json")?, &report)?;
    dir.finish()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

fn cmd_sweep(
    args: &SweepArgs,
    cfg: &Config,
    seed: u64,
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    let data: PathBuf = require(
        args.data.clone(),
        cfg.get::<String>("sweep", "data").map(PathBuf::from),
        "data",
    )?;
    let schema = args
        .schema
        .clone()
        .or_else(|| cfg.get::<String>("sweep", "schema").map(PathBuf::from));
    let d = io::read_dataset(&data, schema.as_deref())?;
    let mut spec = mom::SweepSpec::new(seed);
    if let Some(rho) = args.rho.clone().or_else(|| cfg.get("sweep", "rho")) {
        spec.rho_values = parse_f64_list(&rho)?;
    }
    spec.bootstrap = pick(
        args.bootstrap,
        cfg.get("sweep", "bootstrap"),
        spec.bootstrap,
    );
    spec.level = pick(args.level, cfg.get("sweep", "level"), spec.level);
    if let Some(s) = args.strata.clone().or_else(|| cfg.get("sweep", "strata")) {
        spec.strata = Some(parse_strata(&s)?);
    }
    let table = mom::sensitivity_sweep(&d, &spec)?;

    let mut dir = OutDir::create(out, argv, seed)?;
    dir.record_input(&data)?;
    let mut f = BufWriter::new(fs::File::create(dir.path("sweep.csv")?)?);
    let mut header = String::from("s1,s0");
    for rho in &table.rho_values {
        for col in ["point", "lower", "upper", "excludes_zero"] {
            header.push_str(&format!(",{col}@rho={rho}"));
        }
    }
    writeln!(f, "{header}")?;
    for (si, &(s1, s0)) in table.strata.iter().enumerate() {
        let mut line = format!("{s1},{s0}");
        for cell in &table.cells[si] {
            line.push_str(&format!(
                ",{},{},{},{}",
                cell.point, cell.lower, cell.upper, cell.excludes_zero
            ));
        }
        writeln!(f, "{line}")?;
    }
    write_json(&dir.path("sweep.json")?, &table)?;
    dir.finish()?;
    println!(
        "sweep over {} rho values x {} strata written to {}",
        table.rho_values.len(),
        table.strata.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report

fn cmd_report(
    args: &ReportArgs,
    cfg: &Config,
    seed: u64,
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    let traces = args
        .traces
        .clone()
        .or_else(|| cfg.get::<String>("report", "traces").map(PathBuf::from));
    let coefficients = args.coefficients.clone().or_else(|| {
        cfg.get::<String>("report", "coefficients")
            .map(PathBuf::from)
    });
    if traces.is_none() && coefficients.is_none() {
        return Err(Error::BadParams(
            "report needs --traces and/or --coefficients".into(),
        ));
    }
    let mut dir = OutDir::create(out, argv, seed)?;
    let bins = pick(args.bins, cfg.get("report", "bins"), 40);

    if let Some(tr) = traces {
        let mut entries: Vec<PathBuf> = fs::read_dir(&tr)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("trace_") && n.ends_with(".csv"))
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::BadParams(format!(
                "no trace files in {}",
                tr.display()
            )));
        }
        for path in entries {
            dir.record_input(&path)?;
            let body = fs::read_to_string(&path)?;
            let values: Vec<f64> = body
                .lines()
                .skip(1)
                .filter_map(|l| l.trim().parse().ok())
                .collect();
            if values.is_empty() {
                continue;
            }
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = ((hi - lo) / bins as f64).max(1e-300);
            let mut counts = vec![0usize; bins];
            for v in &values {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            let hist = dir.path(&format!("histograms/{stem}.csv"))?;
            let mut f = BufWriter::new(fs::File::create(hist)?);
            writeln!(f, "bin_left,bin_right,count")?;
            for (b, c) in counts.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{}",
                    lo + b as f64 * width,
                    lo + (b + 1) as f64 * width,
                    c
                )?;
            }
        }
    }

    if let Some(cpath) = coefficients {
        dir.record_input(&cpath)?;
        let body: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cpath)?)?;
        let plane = body
            .get("pce_plane")
            .and_then(|p| p.as_object())
            .ok_or_else(|| Error::BadParams("coefficients file has no pce_plane".into()))?;
        let (c0, c1, c2) = (
            plane["intercept"].as_f64().unwrap_or(f64::NAN),
            plane["s1"].as_f64().unwrap_or(f64::NAN),
            plane["s0"].as_f64().unwrap_or(f64::NAN),
        );
        let grid_n = pick(args.grid, cfg.get("report", "grid"), 21);
        let parse_range = |key: &str| -> (f64, f64) {
            body.get(key)
                .and_then(|r| r.as_array())
                .map(|r| (r[0].as_f64().unwrap(), r[1].as_f64().unwrap()))
                .unwrap_or((0.0, 1.0))
        };
        let ((mut s1_lo, mut s1_hi), (mut s0_lo, mut s0_hi)) =
            (parse_range("s1_range"), parse_range("s0_range"));
        if let Some(b) = args.r#box.clone().or_else(|| cfg.get("report", "box")) {
            let v = parse_f64_list(&b.replace(':', ","))?;
            if v.len() != 4 {
                return Err(Error::BadParams("box needs s1min:s1max:s0min:s0max".into()));
            }
            (s1_lo, s1_hi, s0_lo, s0_hi) = (v[0], v[1], v[2], v[3]);
        }
        let surface = dir.path("surface.csv")?;
        let mut f = BufWriter::new(fs::File::create(surface)?);
        writeln!(f, "s1,s0,tau")?;
        for i in 0..grid_n {
            let s1 = s1_lo + (s1_hi - s1_lo) * i as f64 / (grid_n - 1).max(1) as f64;
            for j in 0..grid_n {
                let s0 = s0_lo + (s0_hi - s0_lo) * j as f64 / (grid_n - 1).max(1) as f64;
                writeln!(f, "{},{},{}", s1, s0, c0 + c1 * s1 + c2 * s0)?;
            }
        }
    }

    dir.finish()?;
    println!("report written to {}", out.display());
    Ok(())
}
