use std::path::Path;

use mglmm::asymptotics::{beta_standard_errors, godambe_blocks};
use mglmm::sim::{run_study, simulate_dataset, StudyOutput};
use mglmm::{
    fit_design, fit_laplace_design, unconditional_av, Dataset, Design, Error, FitOptions, FitResult, LaplaceOptions, Method,
    Mode, ModelSpec, SimConfig, StudyKind, StudyMethod,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::output::{real, Manifest, Outputs, Table};
use crate::{AsymptoticsArgs, FitArgs, ModeArg, SimulateArgs, Solver, StudyArgs};

/// Study configuration: the simulation settings plus what to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    #[serde(default = "default_kind")]
    pub kind: StudyKind,
    #[serde(default = "default_methods")]
    pub methods: Vec<StudyMethod>,
    #[serde(flatten)]
    pub sim: SimConfig,
}

fn default_kind() -> StudyKind {
    StudyKind::Normality
}

fn default_methods() -> Vec<StudyMethod> {
    vec![StudyMethod::Condinf]
}

impl StudyConfig {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.sim.check()?;
        Ok(c)
    }
}

/// Input problems exit with 1; numerical failure during fitting with 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Singular(_) | Error::NonConvergence(_) | Error::Domain(_) => 2,
        _ => 1,
    }
}

/// Runs `body`; on error, discards collected outputs and writes only the manifest.
fn run(dir: &Path, mut manifest: Manifest, body: impl FnOnce(&mut Outputs, &mut Manifest) -> Result<u8, Error>) -> u8 {
    let mut out = Outputs::new(dir);
    match body(&mut out, &mut manifest) {
        Ok(code) => out.finish(manifest, code),
        Err(e) => {
            eprintln!("error: {e}");
            manifest.error = Some(e.to_string());
            Outputs::new(dir).finish(manifest, exit_code(&e))
        }
    }
}

fn fit_options(s: &Solver) -> Result<FitOptions, Error> {
    let mut o = FitOptions::default();
    if let Some(t) = s.tol {
        o.outer_tol = t;
    }
    if let Some(m) = s.max_iter {
        o.max_outer = m;
    }
    o.check()?;
    Ok(o)
}

fn options_json(o: &FitOptions) -> serde_json::Value {
    json!({
        "outer_tol": o.outer_tol,
        "max_outer": o.max_outer,
        "inner_tol": o.inner_tol,
        "max_inner": o.max_inner,
        "step_halving_max": o.step_halving_max,
    })
}

fn load(config: &Path, data: &Path, manifest: &mut Manifest) -> Result<(ModelSpec, Design), Error> {
    let spec = ModelSpec::from_path(config)?;
    manifest.config = serde_json::to_value(&spec)?;
    let data = Dataset::from_csv_path(data)?;
    let design = Design::build(&spec, &data)?;
    Ok((spec, design))
}

fn convergence_json(fit: &FitResult, design: &Design) -> serde_json::Value {
    let comps = &design.clusters.components;
    let marginals: Vec<_> = fit
        .marginals
        .iter()
        .map(|m| {
            let degenerate: Vec<_> = m
                .degenerate
                .iter()
                .map(|d| json!({"component": comps[d.component].name, "cluster": comps[d.component].labels[d.cluster]}))
                .collect();
            json!({"name": m.name, "converged": m.converged, "iterations": m.iterations, "degenerate_clusters": degenerate})
        })
        .collect();
    let covariance = fit.covariance.as_ref().map(|c| {
        json!({"converged": c.converged, "boundary": c.boundary, "repaired": c.repaired, "grad_norm": c.grad_norm})
    });
    json!({"converged": fit.converged, "iterations": fit.iterations, "marginals": marginals, "covariance": covariance})
}

fn estimates_table(fit: &FitResult, ses: &[DVector<f64>]) -> Table {
    let mut t = Table::new(&["marginal", "parameter", "value", "std_error"]);
    for (m, se) in fit.marginals.iter().zip(ses) {
        for (c, name) in m.beta_names.iter().enumerate() {
            t.push(vec![m.name.clone(), name.clone(), real(m.beta[c]), real(se[c])]);
        }
        t.push(vec![m.name.clone(), "lambda".into(), real(m.lambda), String::new()]);
    }
    t
}

fn random_components_table(fit: &FitResult, design: &Design) -> Table {
    let mut t = Table::new(&["component", "cluster", "marginal", "value"]);
    for (comp, per_marginal) in design.clusters.components.iter().zip(&fit.b) {
        for (j, label) in comp.labels.iter().enumerate() {
            for (m, b) in design.marginals.iter().zip(per_marginal) {
                t.push(vec![comp.name.clone(), label.clone(), m.name.clone(), real(b[j])]);
            }
        }
    }
    t
}

fn covariance_table(fit: &FitResult, design: &Design) -> Table {
    let mut t = Table::new(&["component", "row", "column", "value"]);
    let Some(cov) = &fit.covariance else { return t };
    let comps = &design.clusters.components;
    let names: Vec<&str> = design.marginals.iter().map(|m| m.name.as_str()).collect();
    if cov.matrices.len() == 1 {
        let comp = &comps[fit.active[0]].name;
        let s = &cov.matrices[0];
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                t.push(vec![comp.clone(), names[i].into(), names[j].into(), real(s[(i, j)])]);
            }
        }
    } else {
        // One variance per component of a univariate model.
        for (comp, s) in comps.iter().zip(&cov.matrices) {
            t.push(vec![comp.name.clone(), names[0].into(), names[0].into(), real(s[(0, 0)])]);
        }
    }
    t
}

pub fn fit(a: &FitArgs) -> u8 {
    let manifest = Manifest::new("fit", &a.config).with_data(&a.data);
    run(&a.common.out, manifest, |out, manifest| {
        manifest.seed = a.seed;
        let opts = fit_options(&a.solver)?;
        let method = Method::from(a.method);
        let mut o = options_json(&opts);
        o["method"] = serde_json::to_value(method)?;
        manifest.options = o;
        let (_, design) = load(&a.config, &a.data, manifest)?;
        let (fit, ses) = match method {
            Method::Condinf => {
                let fit = fit_design(&design, &opts)?;
                let ses = beta_standard_errors(&fit, &design).unwrap_or_else(|e| {
                    eprintln!("warning: standard errors unavailable: {e}");
                    design.marginals.iter().map(|m| DVector::from_element(m.k(), f64::NAN)).collect()
                });
                (fit, ses)
            }
            Method::Laplace => {
                let lf = fit_laplace_design(&design, &opts, &LaplaceOptions::default())?;
                let ses = lf.beta_cov.iter().map(|c| c.diagonal().map(|v| v.max(0.0).sqrt())).collect();
                (lf.result, ses)
            }
        };
        manifest.convergence = convergence_json(&fit, &design);
        out.table("estimates.csv", &estimates_table(&fit, &ses));
        out.table("random_components.csv", &random_components_table(&fit, &design));
        out.table("covariance.csv", &covariance_table(&fit, &design));
        Ok(if fit.converged { 0 } else { 2 })
    })
}

pub fn simulate(a: &SimulateArgs) -> u8 {
    let manifest = Manifest::new("simulate", &a.config);
    run(&a.common.out, manifest, |out, manifest| {
        let mut cfg = StudyConfig::from_path(&a.config)?;
        if let Some(s) = a.seed {
            cfg.sim.seed = s;
        }
        let q = a.q.unwrap_or(cfg.sim.q);
        let reps = a.replicates.unwrap_or(1);
        if q < 2 || reps == 0 || !(a.constant > 0.0) {
            return Err(Error::Config("need q ≥ 2, at least one replicate and a positive constant".into()));
        }
        manifest.config = serde_json::to_value(&cfg)?;
        manifest.seed = Some(cfg.sim.seed);
        manifest.options = json!({"constant": a.constant, "q": q, "replicates": reps});
        let width = reps.to_string().len().max(4);
        for rep in 0..reps {
            let ds = simulate_dataset(&cfg.sim, a.constant, q, rep as u64)?;
            let mut bytes = Vec::new();
            ds.write_csv(&mut bytes)?;
            out.add(format!("data_{:0width$}.csv", rep + 1), bytes);
        }
        let mut model = serde_json::to_string_pretty(&cfg.sim.model())?;
        model.push('\n');
        out.add("model.json", model.into_bytes());
        Ok(0)
    })
}

fn study_tables(out: &mut Outputs, s: &StudyOutput) {
    let mut t = Table::new(&["constant", "q", "method", "replicate", "parameter", "value"]);
    for r in &s.estimates {
        t.push(vec![real(r.constant), r.q.to_string(), r.method.id().into(), (r.replicate + 1).to_string(), r.parameter.into(), real(r.value)]);
    }
    out.table("estimates.csv", &t);

    let mut t = Table::new(&["parameter", "q", "constant", "method", "truth", "bias", "se", "n"]);
    for r in &s.bias {
        t.push(vec![
            r.parameter.into(),
            r.q.to_string(),
            real(r.constant),
            r.method.id().into(),
            real(r.truth),
            real(r.bias),
            real(r.se),
            r.n.to_string(),
        ]);
    }
    out.table("bias.csv", &t);

    let mut t = Table::new(&["parameter", "constant", "method", "qq_correlation", "n"]);
    for r in &s.normality {
        t.push(vec![r.parameter.into(), real(r.constant), r.method.id().into(), real(r.qq_correlation), r.n.to_string()]);
    }
    out.table("normality.csv", &t);

    let mut t = Table::new(&["parameter", "constant", "method", "theoretical", "sample"]);
    for r in &s.qq {
        t.push(vec![r.parameter.into(), real(r.constant), r.method.id().into(), real(r.theoretical), real(r.sample)]);
    }
    out.table("qq.csv", &t);

    let mut t = Table::new(&["constant", "q", "method", "failures", "replicates", "flagged"]);
    for r in &s.failures {
        t.push(vec![real(r.constant), r.q.to_string(), r.method.id().into(), r.failures.to_string(), r.replicates.to_string(), r.flagged.to_string()]);
    }
    out.table("failures.csv", &t);
}

pub fn study(a: &StudyArgs) -> u8 {
    let manifest = Manifest::new("study", &a.config);
    run(&a.common.out, manifest, |out, manifest| {
        let mut cfg = StudyConfig::from_path(&a.config)?;
        if let Some(s) = a.seed {
            cfg.sim.seed = s;
        }
        if let Some(r) = a.replicates {
            cfg.sim.replicates = r;
        }
        if !a.method.is_empty() {
            cfg.methods = a.method.iter().map(|&m| m.into()).collect();
        }
        cfg.sim.check()?;
        manifest.config = serde_json::to_value(&cfg)?;
        manifest.seed = Some(cfg.sim.seed);
        manifest.options = json!({"replicates": a.replicates, "seed": a.seed, "methods": a.method.iter().map(|&m| StudyMethod::from(m).id()).collect::<Vec<_>>()});
        let s = run_study(cfg.kind, &cfg.sim, &cfg.methods)?;
        let flagged: Vec<_> = s.failures.iter().filter(|f| f.flagged).collect();
        manifest.convergence = json!({
            "failed_fits": s.failures.iter().map(|f| f.failures).sum::<usize>(),
            "flagged_cells": flagged.len(),
        });
        study_tables(out, &s);
        Ok(if flagged.is_empty() { 0 } else { 2 })
    })
}

fn push_matrix(t: &mut Table, marginal: &str, block: &str, rows: &[String], m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            t.push(vec![marginal.into(), block.into(), rows[i].clone(), rows[j].clone(), real(m[(i, j)])]);
        }
    }
}

pub fn asymptotics(a: &AsymptoticsArgs) -> u8 {
    let manifest = Manifest::new("asymptotics", &a.config).with_data(&a.data);
    run(&a.common.out, manifest, |out, manifest| {
        let opts = fit_options(&a.solver)?;
        let mut o = options_json(&opts);
        o["mode"] = json!(if a.mode == ModeArg::Empirical { "empirical" } else { "model_based" });
        o["replicates"] = json!(a.replicates);
        manifest.options = o;
        manifest.seed = Some(a.seed);
        let (_, design) = load(&a.config, &a.data, manifest)?;
        let fit = fit_design(&design, &opts)?;
        let mut conv = convergence_json(&fit, &design);
        let mode = if a.mode == ModeArg::Empirical { Mode::Empirical } else { Mode::ModelBased };
        let blocks = godambe_blocks(&fit, &design, mode)?;

        let comps: Vec<_> = fit.active.iter().map(|&r| &design.clusters.components[r]).collect();
        let b_names: Vec<String> =
            comps.iter().flat_map(|c| c.labels.iter().map(move |l| format!("{}:{l}", c.name))).collect();
        let mut t = Table::new(&["marginal", "block", "row", "column", "value"]);
        for (m, g) in design.marginals.iter().zip(&blocks) {
            push_matrix(&mut t, &m.name, "beta", &m.x_names, &g.blocks.j_inv_beta);
            push_matrix(&mut t, &m.name, "b", &b_names, &g.sigma_b());
        }
        out.table("sandwich.csv", &t);

        let mut code = if fit.converged { 0 } else { 2 };
        let av = match a.replicates {
            0 => None,
            n => match unconditional_av(&design, &fit, n, a.seed, &opts) {
                Ok(av) => Some(av),
                Err(Error::NonConvergence(msg)) => {
                    eprintln!("warning: unconditional variances skipped: {msg}");
                    conv["unconditional"] = json!({"error": msg});
                    code = 2;
                    None
                }
                Err(e) => return Err(e),
            },
        };
        if let Some(av) = av {
            conv["unconditional"] = json!({"used": av.n_used, "failed": av.n_failed});
            let mut t = Table::new(&["marginal", "block", "row", "column", "value"]);
            for (m, v) in design.marginals.iter().zip(&av.marginals) {
                for (name, mat) in [
                    ("mean_j_inv_beta", &v.mean_j_inv_beta),
                    ("var_beta_bar", &v.var_beta_bar),
                    ("var_beta_refit", &v.var_beta_refit),
                    ("av_beta", &v.av_beta),
                ] {
                    push_matrix(&mut t, &m.name, name, &m.x_names, mat);
                }
                for (name, mat) in [("mean_j_inv_b", &v.mean_j_inv_b), ("av_b", &v.av_b)] {
                    push_matrix(&mut t, &m.name, name, &b_names, mat);
                }
            }
            out.table("unconditional.csv", &t);
        }
        manifest.convergence = conv;
        Ok(code)
    })
}
