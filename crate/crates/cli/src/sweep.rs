//! Parameter sweeps: one CSV row per (point, policy, stream) plus a
//! vega-lite spec that plots the summed delay.

use std::io::Write;

use anyhow::bail;
use rayon::prelude::*;
use serde_json::json;

use crate::commands::{create_in, evaluate_policies, load_cache, PolicyRun, Session};
use crate::config::RunConfig;
use crate::{Axis, ConfigError, PolicyArg};

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::P0 => "p0",
        Axis::SigmaE2 => "sigma-e2",
        Axis::Antennas => "antennas",
    }
}

fn defaults(axis: Axis) -> (Vec<String>, Vec<PolicyArg>) {
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    match axis {
        Axis::P0 => (v(&["0", "5", "10", "15", "20", "25", "30"]), vec![PolicyArg::Full, PolicyArg::Decomposed]),
        Axis::SigmaE2 => (
            v(&["0", "0.1", "0.3", "0.5"]),
            vec![PolicyArg::Decomposed, PolicyArg::Csit, PolicyArg::Rr],
        ),
        Axis::Antennas => (v(&["2x2", "3x3", "4x4"]), vec![PolicyArg::Decomposed]),
    }
}

/// Configuration of one grid point.
fn point_config(base: &RunConfig, axis: Axis, value: &str) -> anyhow::Result<RunConfig> {
    let bad = || ConfigError(format!("bad {} value {value:?}", axis_name(axis)));
    let mut cfg = base.clone();
    match axis {
        Axis::P0 => {
            cfg.p0_db = Some(value.trim().parse().map_err(|_| bad())?);
            cfg.gamma = None;
        }
        Axis::SigmaE2 => cfg.phy.sigma_e2 = value.trim().parse().map_err(|_| bad())?,
        Axis::Antennas => {
            let (t, r) = value.trim().split_once(['x', 'X']).ok_or_else(bad)?;
            cfg.phy.n_tx = t.parse().map_err(|_| bad())?;
            cfg.phy.n_rx = r.parse().map_err(|_| bad())?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// `*_delay` is the mean queue length in packets; `*_sojourn` divides it by
/// the admitted arrival rate to give channel uses.
const HEADER: &str = "point,axis,value,policy,stream,gamma,target_power,analytic_delay,empirical_delay,\
analytic_sojourn,empirical_sojourn,analytic_power,empirical_power,status";

fn rows_ok(point: usize, axis: &str, value: &str, run: &PolicyRun) -> Vec<String> {
    let name = run.policy.name();
    let head = format!("{point},{axis},{value},{name}");
    let mid = format!("{},{}", opt(run.gamma), num(run.target_power));
    let aq = &run.steady.avg_queue;
    let eq = run.empirical_queue();
    let ad = run.steady.delay_channel_uses(&run.params);
    let ed = run.empirical_sojourn();
    let mut rows: Vec<String> = (0..aq.len())
        .map(|i| {
            format!(
                "{head},{i},{mid},{},{},{},{},,,ok",
                num(aq[i]),
                num(eq[i]),
                num(ad[i]),
                num(ed[i])
            )
        })
        .collect();
    rows.push(format!(
        "{head},sum,{mid},{},{},{},{},{},{},ok",
        num(aq.iter().sum()),
        num(eq.iter().sum()),
        num(ad.iter().sum()),
        num(ed.iter().sum()),
        num(run.steady.avg_power),
        num(run.empirical_power())
    ));
    rows
}

fn rows_failed(point: usize, axis: &str, value: &str, policies: &[PolicyArg], err: &anyhow::Error) -> Vec<String> {
    let msg: String = format!("failed: {err:#}")
        .chars()
        .map(|c| if c == ',' || c == '\n' || c == '"' { ';' } else { c })
        .collect();
    policies
        .iter()
        .map(|p| format!("{point},{axis},{value},{},sum,,,,,,,,,{msg}", p.name()))
        .collect()
}

/// Self-contained spec with the summed-delay rows inlined.
fn vega_spec(axis: Axis, points: &[serde_json::Value]) -> serde_json::Value {
    let x_title = match axis {
        Axis::P0 => "P0 (dB)",
        Axis::SigmaE2 => "CSIT error variance",
        Axis::Antennas => "antennas",
    };
    let x_type = if axis == Axis::Antennas { "ordinal" } else { "quantitative" };
    let x = json!({"field": "value", "type": x_type, "title": x_title});
    json!({
        "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
        "data": {"values": points},
        "layer": [
            {
                "mark": {"type": "line", "point": true},
                "encoding": {
                    "x": x,
                    "y": {"field": "empirical_delay", "type": "quantitative", "title": "sum average delay (packets)", "scale": {"type": "log"}},
                    "color": {"field": "policy", "type": "nominal"}
                }
            },
            {
                "mark": {"type": "point", "shape": "cross"},
                "encoding": {
                    "x": x,
                    "y": {"field": "analytic_delay", "type": "quantitative"},
                    "color": {"field": "policy", "type": "nominal"}
                }
            }
        ]
    })
}

pub fn run(s: &Session, axis: Axis, values: &[String], policies: &[PolicyArg]) -> anyhow::Result<()> {
    let (default_values, default_policies) = defaults(axis);
    let values = if values.is_empty() { default_values } else { values.to_vec() };
    let mut policies = if policies.is_empty() { default_policies } else { policies.to_vec() };
    policies.sort();
    policies.dedup();
    if axis == Axis::P0 && s.cfg.gamma.is_some() {
        bail!(ConfigError("a p0 sweep calibrates every point; drop the fixed gamma".into()));
    }
    let configs = values
        .iter()
        .map(|v| point_config(&s.cfg, axis, v))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let name = axis_name(axis);
    let mut results: Vec<(usize, Vec<String>)> = configs
        .par_iter()
        .enumerate()
        .map(|(k, cfg)| {
            let value = values[k].trim();
            let outcome =
                load_cache(cfg, s.cache_dir.as_deref()).and_then(|cache| evaluate_policies(cfg, &cache, &policies));
            let rows = match outcome {
                Ok(runs) => runs.iter().flat_map(|r| rows_ok(k, name, value, r)).collect(),
                Err(e) => {
                    eprintln!("point {k} ({name} = {value}) failed: {e:#}");
                    rows_failed(k, name, value, &policies, &e)
                }
            };
            (k, rows)
        })
        .collect();
    results.sort_by_key(|(k, _)| *k);
    let csv_name = format!("sweep-{name}.csv");
    let mut w = create_in(&s.cfg.out, &csv_name)?;
    writeln!(
        w,
        "# {},axis={name},slots={},seeds={:?}",
        s.cfg.provenance(),
        s.cfg.slots,
        s.cfg.seeds
    )?;
    writeln!(w, "{HEADER}")?;
    let mut failed = 0;
    let mut plot = Vec::new();
    for (_, rows) in &results {
        for r in rows {
            let f: Vec<&str> = r.split(',').collect();
            if !r.ends_with(",ok") {
                failed += 1;
            } else if f[4] == "sum" {
                plot.push(json!({
                    "value": if axis == Axis::Antennas { json!(f[2]) } else { json!(f[2].parse::<f64>().unwrap_or(f64::NAN)) },
                    "policy": f[3],
                    "analytic_delay": f[7].parse::<f64>().unwrap_or(f64::NAN),
                    "empirical_delay": f[8].parse::<f64>().unwrap_or(f64::NAN),
                }));
            }
            writeln!(w, "{r}")?;
        }
    }
    w.flush()?;
    let mut w = create_in(&s.cfg.out, &format!("sweep-{name}.vl.json"))?;
    serde_json::to_writer_pretty(&mut w, &vega_spec(axis, &plot))?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "{} points, {} policies, {failed} failed rows -> {}",
        values.len(),
        policies.len(),
        s.cfg.out.join(&csv_name).display()
    );
    Ok(())
}
