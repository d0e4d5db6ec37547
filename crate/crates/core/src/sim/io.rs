//! Parameter files and output writers of the simulation harness.

use std::io::Write;

use thiserror::Error;

use crate::dynamics::Method;
use crate::reference::Trajectory;

use super::closed_loop::SimLog;
use super::SimSetup;

/// Version tag written on the first line of `log.csv`.
pub const LOG_SCHEMA: &str = "# nlmpc-simlog v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigFileError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {value}")]
    BadValue { line: usize, key: String, value: String },
}

fn parse_f64(line: usize, key: &str, value: &str) -> Result<f64, ConfigFileError> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ConfigFileError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        })
}

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize, ConfigFileError> {
    value.parse::<usize>().map_err(|_| ConfigFileError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

/// Applies flat `key=value` lines to `setup`. Blank lines and lines starting
/// with `#` are skipped. Angles are in radians.
pub fn apply_config(text: &str, setup: &mut SimSetup) -> Result<(), ConfigFileError> {
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or(ConfigFileError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        let f = || parse_f64(line, key, value);
        let u = || parse_usize(line, key, value);
        let c = &mut setup.controller;
        match key {
            "dt" => {
                let dt = f()?;
                c.dt = dt;
                c.integrator.dt = dt;
            }
            "Npar" => c.npar = u()?,
            "Nn" => {
                let nn = u()?;
                c.nn = nn;
                setup.circular.nn = nn;
            }
            "segsearch" => c.segsearch = u()?,
            "cuptime" => c.cuptime = f()?,
            "maxrefvelmod" => c.maxrefvelmod = f()?,
            "conpenalty" => c.conpenalty = f()?,
            "contolerance" => c.contolerance = f()?,
            "onesteppred" => {
                c.onesteppred = match value {
                    "0" => false,
                    "1" => true,
                    _ => {
                        return Err(ConfigFileError::BadValue {
                            line,
                            key: key.to_string(),
                            value: value.to_string(),
                        })
                    }
                }
            }
            "intmethod" => {
                c.integrator.method = value
                    .parse::<u32>()
                    .ok()
                    .and_then(Method::from_code)
                    .ok_or_else(|| ConfigFileError::BadValue {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                    })?
            }
            "supnds" => c.integrator.supnds = u()?,
            "maxit" => c.nas.maxit = u()?,
            "maxproj" => c.nas.maxproj = u()?,
            "dualtol" => c.nas.dualtol = f()?,
            "backtrack" => c.nas.backtrack = f()?,
            "decrease" => c.nas.decrease = f()?,
            "finitediff" => {
                let h = f()?;
                c.nas.finitediff = h;
                c.integrator.finitediff = h;
            }
            "v_still" => c.v_still = f()?,
            "vref" => {
                let v = f()?;
                setup.circular.vref = v;
                setup.parking.vref = v;
            }
            "pwidth" => {
                let w = f()?;
                setup.circular.pwidth = w;
                setup.parking.pwidth = w;
            }
            "Rad" => setup.circular.rad = f()?,
            "alpha" => setup.circular.alpha = f()?,
            "beta" => setup.circular.beta = f()?,
            "Oin" => setup.circular.oin = f()?,
            "Oout" => setup.circular.oout = f()?,
            "L1" => setup.parking.l1 = f()?,
            "R1" => setup.parking.r1 = f()?,
            "R2" => setup.parking.r2 = f()?,
            "L2" => setup.parking.l2 = f()?,
            "noise" => {
                let s = f()?;
                setup.noise = if s == 0.0 { Vec::new() } else { vec![s; 5] };
            }
            _ => {
                return Err(ConfigFileError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
    }
    Ok(())
}

fn termination_name(t: Option<crate::nas::Termination>) -> &'static str {
    use crate::nas::Termination::*;
    match t {
        Some(KktSatisfied) => "kkt",
        Some(MaxIterations) => "maxit",
        Some(NoProgress) => "noprogress",
        Some(Breakdown) => "breakdown",
        None => "",
    }
}

/// Writes the log as CSV preceded by the schema line.
pub fn write_log<W: Write>(log: &SimLog, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LOG_SCHEMA}")?;
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(log.state_names.iter().cloned());
    head.extend(log.input_names.iter().map(|s| format!("u_{s}")));
    for h in [
        "drivmode",
        "seg",
        "s",
        "dist",
        "lagging_time",
        "eps",
        "cost",
        "iterations",
        "termination",
        "fault",
        "solve_us",
    ] {
        head.push(h.to_string());
    }
    out.write_record(&head)?;
    for r in &log.rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.z.iter().map(f64::to_string));
        rec.extend(r.u0.iter().map(f64::to_string));
        rec.push(r.drivmode.code().to_string());
        rec.push(r.seg.to_string());
        for v in [r.s, r.dist, r.lagging_time, r.eps, r.cost] {
            rec.push(v.to_string());
        }
        rec.push(r.iterations.to_string());
        rec.push(termination_name(r.termination).to_string());
        rec.push(r.fault.map(|f| format!("{f:?}")).unwrap_or_default());
        rec.push(format!("{:.1}", r.solve_us));
        out.write_record(&rec)?;
    }
    out.flush()
}

/// Corridor boundary polylines (left, right) in global coordinates.
pub fn corridor_lines(traj: &Trajectory) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for i in 1..=traj.len() {
        let e = traj.segment(i);
        let (sn, cs) = (e.phi + traj.header.phi).sin_cos();
        let a = traj.start_of(i);
        for p in [traj.to_global(a.0, a.1), traj.to_global(e.x, e.y)] {
            left.push((p.0 - sn * e.d_left, p.1 + cs * e.d_left));
            right.push((p.0 + sn * e.d_right, p.1 - cs * e.d_right));
        }
    }
    (left, right)
}

/// Whitespace-separated x/y blocks: reference nodes, left and right corridor
/// boundary, driven path. Blocks are separated by two blank lines.
pub fn write_plot<W: Write>(traj: &Trajectory, log: &SimLog, mut w: W) -> std::io::Result<()> {
    writeln!(w, "# reference")?;
    let root = traj.to_global(0.0, 0.0);
    writeln!(w, "{} {}", root.0, root.1)?;
    for e in traj.segments() {
        let p = traj.to_global(e.x, e.y);
        writeln!(w, "{} {}", p.0, p.1)?;
    }
    let (left, right) = corridor_lines(traj);
    for (name, pts) in [("left", left), ("right", right)] {
        writeln!(w, "\n\n# {name}")?;
        for p in pts {
            writeln!(w, "{} {}", p.0, p.1)?;
        }
    }
    writeln!(w, "\n\n# path")?;
    for r in &log.rows {
        writeln!(w, "{} {}", r.z[0], r.z[1])?;
    }
    writeln!(w, "{} {}", log.final_state[0], log.final_state[1])?;
    Ok(())
}
