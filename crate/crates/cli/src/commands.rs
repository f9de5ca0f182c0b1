//! The seven commands.

use std::path::Path;
use std::time::Instant;

use boxcar_core::control::Control;
use boxcar_core::cost::evaluate;
use boxcar_core::ebt::{convergence_study, simulate, SaveOptions};
use boxcar_core::measure::{deltas_bound, flat_distance, rank_pairing};
use boxcar_core::optimizer::{minimize, refine, RefineLevel, RefinementCertificate};
use boxcar_core::sensitivity::check_gradient;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{num, read_measure, svg_chart, CsvTable, OutDir, Series};

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub seconds: f64,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    pub details: serde_json::Value,
}

struct Ctx {
    command: &'static str,
    hash: String,
    out: OutDir,
    warnings: Vec<String>,
    started: Instant,
}

impl Ctx {
    fn new(command: &'static str, hash: String, out: &Path) -> Result<Self, CliError> {
        Ok(Self {
            command,
            hash,
            out: OutDir::create(out)?,
            warnings: Vec::new(),
            started: Instant::now(),
        })
    }

    fn table(&self, header: &[&str]) -> Result<CsvTable, CliError> {
        CsvTable::new(&format!("boxcar {} config={}", self.command, self.hash), header)
    }

    fn finish(mut self, seed: Option<u64>, details: serde_json::Value) -> Result<RunReport, CliError> {
        for w in &self.warnings {
            log::warn!("{w}");
        }
        let mut outputs = self.out.written.clone();
        let report_path = "report.json";
        outputs.push(self.out.path_of(report_path));
        let report = RunReport {
            command: self.command.to_string(),
            config_hash: self.hash.clone(),
            seed,
            seconds: self.started.elapsed().as_secs_f64(),
            outputs,
            warnings: self.warnings.clone(),
            details,
        };
        self.out.json(report_path, &report)?;
        Ok(report)
    }
}

fn with_seed(mut config: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        config.optimizer.seed = s;
    }
    config
}

fn control_rows(table: &mut CsvTable, level: Option<usize>, control: &Control<f64>) -> Result<(), CliError> {
    let b = control.breakpoints();
    for (k, v) in control.values().iter().enumerate() {
        let mut row: Vec<String> = level.map(|l| l.to_string()).into_iter().collect();
        row.push(k.to_string());
        row.push(num(b[k]));
        row.push(num(b[k + 1]));
        row.extend(v.iter().map(|x| num(*x)));
        table.row(row)?;
    }
    Ok(())
}

fn control_header(level: bool, dims: usize) -> Vec<String> {
    let mut h: Vec<String> = level.then(|| "level".to_string()).into_iter().collect();
    h.extend(["piece", "t_start", "t_end"].map(String::from));
    h.extend((0..dims).map(|j| format!("u{j}")));
    h
}

fn policy_series(control: &Control<f64>) -> Vec<(f64, f64)> {
    let b = control.breakpoints();
    control
        .values()
        .iter()
        .enumerate()
        .flat_map(|(k, v)| [(b[k], v[0]), (b[k + 1], v[0])])
        .collect()
}

pub fn simulate_cmd(config: ExperimentConfig, out: &Path) -> Result<RunReport, CliError> {
    let mut ctx = Ctx::new("simulate", config.hash(), out)?;
    let r = config.resolve()?;
    ctx.warnings.extend(r.warnings.iter().cloned());
    let disc = config.discretization()?;
    let control = r.control(config.control.as_ref())?;
    let save = SaveOptions {
        every: config.output.save_every.max(1),
        dense_states: false,
    };
    let traj = simulate(&r.model, &r.datum, &control, r.horizon, &disc, save)?;
    if traj.overflow > 0.0 {
        ctx.warnings.push(format!(
            "initial mass {} beyond the last cell was added to it",
            num(traj.overflow)
        ));
    }
    let mut t = ctx.table(&["t", "i", "x", "m"])?;
    for s in &traj.snapshots {
        for (i, (x, m)) in s.positions.iter().zip(&s.masses).enumerate() {
            t.row([num(s.t), i.to_string(), num(*x), num(*m)])?;
        }
    }
    ctx.out.csv("trajectory.csv", t)?;
    let negative = traj.final_state.masses.iter().filter(|m| **m < 0.0).count();
    if negative > 0 {
        ctx.warnings.push(format!("{negative} cohorts with negative mass clipped in the exported measure"));
    }
    let final_measure = traj.final_state.as_measure();
    let mut t = ctx.table(&["x", "m"])?;
    for (x, m) in final_measure.atoms() {
        t.row([num(x), num(m)])?;
    }
    ctx.out.csv("final_measure.csv", t)?;
    let mass: Vec<(f64, f64)> = traj.dense.iter().map(|d| (d.t, d.total_mass)).collect();
    let svg = svg_chart(
        "Total mass",
        "t",
        "mass",
        &[Series {
            name: "total mass",
            points: mass,
        }],
        false,
    );
    ctx.out.write("mass.svg", svg.as_bytes())?;
    let details = json!({
        "cohorts": traj.final_state.cohorts(),
        "initial_mass": traj.initial.total_mass(),
        "final_mass": traj.final_state.total_mass(),
        "windows": disc.windows(r.horizon)?,
    });
    ctx.finish(None, details)
}

pub fn distance_cmd(a: &Path, b: &Path, out: Option<&Path>) -> Result<(RunReport, f64, f64), CliError> {
    let mu = read_measure(a)?;
    let nu = read_measure(b)?;
    let d = flat_distance(&mu, &nu);
    let bound = deltas_bound(&mu, &nu, &rank_pairing(&mu, &nu))?;
    let hash = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(std::fs::read(a)?);
        h.update(std::fs::read(b)?);
        hex::encode(h.finalize())
    };
    let report = match out {
        Some(dir) => {
            let mut ctx = Ctx::new("distance", hash, dir)?;
            let mut t = ctx.table(&["distance", "bound"])?;
            t.row([num(d), num(bound)])?;
            ctx.out.csv("distance.csv", t)?;
            ctx.finish(None, json!({ "distance": d, "bound": bound }))?
        }
        None => RunReport {
            command: "distance".into(),
            config_hash: hash,
            seed: None,
            seconds: 0.0,
            outputs: Vec::new(),
            warnings: Vec::new(),
            details: json!({ "distance": d, "bound": bound }),
        },
    };
    Ok((report, d, bound))
}

pub fn optimize_cmd(config: ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<RunReport, CliError> {
    let config = with_seed(config, seed);
    let mut ctx = Ctx::new("optimize", config.hash(), out)?;
    let r = config.resolve()?;
    ctx.warnings.extend(r.warnings.iter().cloned());
    let cost = r.cost()?;
    let disc = config.discretization()?;
    let pieces = config
        .pieces
        .ok_or_else(|| CliError::Config("`pieces` is required for optimize".into()))?;
    let res = minimize(
        &r.model,
        cost,
        &r.datum,
        &disc,
        r.horizon,
        pieces,
        &config.optimizer,
        config.control.as_ref(),
    )?;
    let header = control_header(false, res.control.dims());
    let mut t = ctx.table(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    control_rows(&mut t, None, &res.control)?;
    ctx.out.csv("control.csv", t)?;
    let mut t = ctx.table(&["iteration", "J", "stationarity"])?;
    for (k, j) in res.history.iter().enumerate() {
        let s = if k == 0 { String::new() } else { num(res.stationarity[k - 1]) };
        t.row([k.to_string(), num(*j), s])?;
    }
    ctx.out.csv("history.csv", t)?;
    let svg = svg_chart(
        "Optimal control",
        "t",
        "u",
        &[Series {
            name: "u0",
            points: policy_series(&res.control),
        }],
        false,
    );
    ctx.out.write("policy.svg", svg.as_bytes())?;
    if let Some(tb) = res.value.tail_bound {
        ctx.warnings.push(format!("discounted tail beyond the horizon is bounded by {}", num(tb)));
    }
    let details = json!({
        "cost": res.value,
        "termination": res.termination,
        "evaluations": res.evaluations,
        "start_index": res.start_index,
        "start_values": res.start_values,
    });
    ctx.finish(Some(config.optimizer.seed), details)
}

fn write_certificate(ctx: &mut Ctx, cert: &RefinementCertificate<f64>) -> Result<(), CliError> {
    let mut t = ctx.table(&["n", "dt", "M", "d0", "Jstar"])?;
    for row in &cert.rows {
        t.row([row.cells.to_string(), num(row.window), row.pieces.to_string(), num(row.d0), num(row.j_star)])?;
    }
    ctx.out.csv("certificate.csv", t)?;
    let dims = cert.rows[0].control.dims();
    let header = control_header(true, dims);
    let mut t = ctx.table(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for (k, row) in cert.rows.iter().enumerate() {
        control_rows(&mut t, Some(k + 1), &row.control)?;
    }
    ctx.out.csv("controls.csv", t)?;
    if !cert.non_monotone.is_empty() {
        ctx.warnings.push(format!(
            "optimal values change direction at levels {:?}; a local minimum may have been captured",
            cert.non_monotone.iter().map(|k| k + 1).collect::<Vec<_>>()
        ));
    }
    Ok(())
}

fn run_refine(
    ctx: &mut Ctx,
    config: &ExperimentConfig,
    schedule: &[RefineLevel<f64>],
) -> Result<(RefinementCertificate<f64>, serde_json::Value), CliError> {
    let r = config.resolve()?;
    ctx.warnings.extend(r.warnings.iter().cloned());
    let cost = r.cost()?;
    let cert = refine(
        &r.model,
        cost,
        &r.datum,
        r.horizon,
        schedule,
        &config.optimizer,
        config.control.as_ref(),
    )?;
    write_certificate(ctx, &cert)?;
    let last = cert.rows.last().expect("nonempty schedule");
    let level = schedule.last().expect("nonempty schedule");
    let value = evaluate(&r.model, &r.datum, &last.control, &level.disc, cost)?;
    if let Some(tb) = value.tail_bound {
        ctx.warnings.push(format!("discounted tail beyond the horizon is bounded by {}", num(tb)));
    }
    let details = json!({
        "levels": cert.rows.iter().map(|r| json!({
            "n": r.cells, "dt": r.window, "M": r.pieces, "d0": r.d0, "Jstar": r.j_star,
            "termination": r.termination,
        })).collect::<Vec<_>>(),
        "differences": cert.differences,
        "non_monotone_levels": cert.non_monotone,
        "final_cost": value,
    });
    Ok((cert, details))
}

pub fn refine_cmd(config: ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<RunReport, CliError> {
    let config = with_seed(config, seed);
    let mut ctx = Ctx::new("refine", config.hash(), out)?;
    if config.refine.is_empty() {
        return Err(CliError::Config("`refine` schedule is required".into()));
    }
    let (_, details) = run_refine(&mut ctx, &config, &config.refine)?;
    ctx.finish(Some(config.optimizer.seed), details)
}

pub fn welfare_demo_cmd(config: Option<ExperimentConfig>, out: &Path, seed: Option<u64>) -> Result<RunReport, CliError> {
    let mut config = config.unwrap_or_else(ExperimentConfig::welfare_demo);
    if config.refine.is_empty() {
        config.refine = ExperimentConfig::welfare_demo().refine;
    }
    let config = with_seed(config, seed);
    let mut ctx = Ctx::new("welfare-demo", config.hash(), out)?;
    let (cert, details) = run_refine(&mut ctx, &config, &config.refine)?;
    let last = cert.rows.last().expect("nonempty schedule");
    let header = control_header(false, last.control.dims());
    let mut t = ctx.table(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    control_rows(&mut t, None, &last.control)?;
    ctx.out.csv("policy.csv", t)?;
    let series: Vec<Series<'_>> = cert
        .rows
        .iter()
        .zip(["level 1", "level 2", "level 3", "level 4", "level 5", "level 6"].iter().cycle())
        .map(|(r, name)| Series {
            name,
            points: policy_series(&r.control),
        })
        .collect();
    let svg = svg_chart("Welfare policy", "t", "u", &series, false);
    ctx.out.write("policy.svg", svg.as_bytes())?;
    ctx.finish(Some(config.optimizer.seed), details)
}

pub fn convergence_cmd(config: ExperimentConfig, out: &Path) -> Result<RunReport, CliError> {
    let mut ctx = Ctx::new("convergence", config.hash(), out)?;
    let r = config.resolve()?;
    ctx.warnings.extend(r.warnings.iter().cloned());
    let conv = config
        .convergence
        .as_ref()
        .ok_or_else(|| CliError::Config("`convergence` section is required".into()))?;
    let control = r.control(config.control.as_ref())?;
    let table = convergence_study(&r.model, &r.datum, &control, r.horizon, &conv.schedule, &conv.reference)?;
    let mut t = ctx.table(&["dt", "n", "d0", "error", "constant"])?;
    for row in &table.rows {
        t.row([num(row.window), row.cells.to_string(), num(row.d0), num(row.error), num(row.constant)])?;
    }
    ctx.out.csv("convergence.csv", t)?;
    let fitted = table.fitted_constant;
    let svg = svg_chart(
        "EBT error against the reference",
        "dt",
        "error",
        &[
            Series {
                name: "measured",
                points: table.rows.iter().map(|r| (r.window, r.error)).collect(),
            },
            Series {
                name: "C (dt + d0)",
                points: table.rows.iter().map(|r| (r.window, fitted * (r.window + r.d0))).collect(),
            },
        ],
        true,
    );
    ctx.out.write("convergence.svg", svg.as_bytes())?;
    ctx.finish(None, serde_json::to_value(&table).map_err(|e| CliError::Io(e.to_string()))?)
}

pub fn gradient_check_cmd(config: ExperimentConfig, out: &Path) -> Result<RunReport, CliError> {
    let mut ctx = Ctx::new("gradient-check", config.hash(), out)?;
    let r = config.resolve()?;
    ctx.warnings.extend(r.warnings.iter().cloned());
    let disc = config.discretization()?;
    let control = r.control(config.control.as_ref())?;
    let report = check_gradient(&r.model, r.cost()?, &r.datum, &control, &disc, config.fd_step)?;
    let mut t = ctx.table(&["dof", "analytic", "fd", "abs_error"])?;
    for (d, ((a, f), e)) in report
        .analytic
        .iter()
        .zip(&report.finite_difference)
        .zip(&report.abs_errors)
        .enumerate()
    {
        t.row([d.to_string(), num(*a), num(*f), num(*e)])?;
    }
    ctx.out.csv("gradient.csv", t)?;
    let details = json!({
        "max_abs_error": report.max_abs_error,
        "max_rel_error": report.max_rel_error,
        "worst_dof": report.worst_dof,
        "fd_step": report.fd_step,
    });
    ctx.finish(None, details)
}
