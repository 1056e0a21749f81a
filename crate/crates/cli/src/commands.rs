//! `solve`, `calibrate` and `simulate`, plus the pieces `sweep` reuses.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context as _};
use delay_mimo::io::{write_calibration_csv, write_steady_csv, SolutionFile};
use delay_mimo::simulator::{baseline_steady_state, csit_only_matched, round_robin_matched};
use delay_mimo::{
    calibrate_gamma, run_seeds, solve_decomposed, solve_rvi, steady_state_full, steady_state_per_stream, Cache64,
    CalibrationResult, ChainParams64, CsitModel, Error, PolicyHandle, SimReport, SolverMode, SteadyState64,
};
use serde::Serialize;

use crate::config::{RunConfig, Target};
use crate::{ConfigError, PolicyArg};

const DECOMPOSED_TOL: f64 = 1e-12;

pub struct Session {
    pub cfg: RunConfig,
    pub cache_dir: Option<PathBuf>,
}

impl Session {
    pub fn new(cfg: RunConfig, cache_dir: Option<PathBuf>) -> anyhow::Result<Self> {
        Ok(Self { cfg, cache_dir })
    }

    pub fn cache(&self) -> anyhow::Result<Cache64> {
        load_cache(&self.cfg, self.cache_dir.as_deref())
    }

    fn out_file(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        create_in(&self.cfg.out, name)
    }
}

pub fn create_in(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cache_file_name(cfg: &RunConfig) -> String {
    let model = match cfg.phy.csit_model {
        CsitModel::Scaled => "scaled",
        CsitModel::Unscaled => "unscaled",
    };
    format!(
        "eigen-{}x{}-l{}-sigma{:?}-{model}-m{}-seed{}.csv",
        cfg.phy.n_tx,
        cfg.phy.n_rx,
        cfg.streams.len(),
        cfg.phy.sigma_e2,
        cfg.cache.rows,
        cfg.cache.seed
    )
}

/// Eigenvalue cache for `cfg`. With a cache directory the cache is read back
/// when a matching file exists and written after generation otherwise.
pub fn load_cache(cfg: &RunConfig, dir: Option<&Path>) -> anyhow::Result<Cache64> {
    let phy = cfg.phy_config();
    let Some(dir) = dir else {
        return Ok(Cache64::generate(&phy, cfg.cache.rows, cfg.cache.seed)?);
    };
    let path = dir.join(cache_file_name(cfg));
    if let Ok(f) = File::open(&path) {
        let cached = Cache64::read_csv(std::io::BufReader::new(f))
            .with_context(|| format!("reading cache {}", path.display()))?;
        let fits = cached.n_rows() == cfg.cache.rows
            && cached.seed == cfg.cache.seed
            && cached.sigma_e2 == cfg.phy.sigma_e2
            && cached.n_streams() == cfg.streams.len()
            && cached.n_tx == cfg.phy.n_tx
            && cached.n_rx == cfg.phy.n_rx
            && cached.csit_model == cfg.phy.csit_model;
        if fits {
            return Ok(cached);
        }
    }
    let cache = Cache64::generate(&phy, cfg.cache.rows, cfg.cache.seed)?;
    fs::create_dir_all(dir).with_context(|| format!("creating cache directory {}", dir.display()))?;
    // write under a private name first so concurrent runs never read a partial file
    let tmp = dir.join(format!("{}.{}.tmp", cache_file_name(cfg), std::process::id()));
    {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        cache.write_csv(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, &path).with_context(|| format!("storing cache {}", path.display()))?;
    Ok(cache)
}

/// Price to solve at: the configured γ, or the calibrated one for a power budget.
pub fn resolve_gamma(
    cfg: &RunConfig,
    mode: SolverMode,
    cache: &Cache64,
) -> anyhow::Result<(f64, Option<CalibrationResult<f64>>)> {
    match cfg.target() {
        Target::Gamma(g) => Ok((g, None)),
        Target::Power(p0) => {
            let params = cfg.chain_params(1.0)?;
            let res = calibrate_gamma(
                p0,
                mode,
                &params,
                cache,
                cfg.calibration.mode,
                &cfg.calibration_options(),
            )
            .with_context(|| format!("calibrating γ for P0 = {:.4} dB", cfg.p0_db.unwrap_or_default()))?;
            Ok((res.gamma, Some(res)))
        }
    }
}

/// Solver output at a resolved price, with its stationary analysis.
pub struct Solved {
    pub mode: SolverMode,
    pub params: ChainParams64,
    pub file: SolutionFile<f64>,
    pub policy: PolicyHandle<f64>,
    pub steady: SteadyState64,
    pub calibration: Option<CalibrationResult<f64>>,
    pub elapsed: Duration,
    pub states: u128,
}

pub fn solve_mode(cfg: &RunConfig, mode: SolverMode, cache: &Cache64) -> anyhow::Result<Solved> {
    let states = cfg.chain_params(1.0)?.space().count_u128();
    if mode == SolverMode::Full {
        cfg.chain_params(1.0)?.space().check_cap(cfg.state_cap)?;
    }
    let (gamma, calibration) = resolve_gamma(cfg, mode, cache)?;
    let params = cfg.chain_params(gamma)?;
    let hash = cfg.hash();
    let start = Instant::now();
    let (file, policy, steady, elapsed) = match mode {
        SolverMode::Full => {
            let sol = solve_rvi(&params, cache, &cfg.rvi_options())?;
            let elapsed = start.elapsed();
            if !sol.converged {
                return Err(Error::Numeric(format!(
                    "value iteration stopped after {} iterations with span {:e}",
                    sol.iterations, sol.span_residual
                ))
                .into());
            }
            let steady = steady_state_full(&sol, &params, cache)?;
            (SolutionFile::full(sol.clone(), hash), PolicyHandle::Full(sol), steady, elapsed)
        }
        SolverMode::Decomposed => {
            let sol = solve_decomposed(&params, cache, DECOMPOSED_TOL)?;
            let elapsed = start.elapsed();
            let steady = steady_state_per_stream(&sol, &params, cache)?;
            (SolutionFile::decomposed(sol.clone(), hash), PolicyHandle::Decomposed(sol), steady, elapsed)
        }
    };
    Ok(Solved {
        mode,
        params,
        file,
        policy,
        steady,
        calibration,
        elapsed,
        states,
    })
}

pub fn mode_name(mode: SolverMode) -> &'static str {
    match mode {
        SolverMode::Full => "full",
        SolverMode::Decomposed => "decomposed",
    }
}

fn summary_text(cfg: &RunConfig, s: &Solved) -> String {
    let mut t = String::new();
    let p = &s.params;
    let _ = writeln!(t, "{}", cfg.provenance());
    let _ = writeln!(t, "mode            {}", mode_name(s.mode));
    let _ = writeln!(t, "streams         {}", p.n_streams());
    let _ = writeln!(t, "buffer N        {}", p.buffer);
    let _ = writeln!(t, "joint states    {} = ({}+1)^{}", s.states, p.buffer, p.n_streams());
    match &s.calibration {
        Some(c) => {
            let _ = writeln!(
                t,
                "gamma           {:.6e} (calibrated, {:?}, target P0 {:.6} = {:.3} dB)",
                p.gamma,
                c.mode,
                c.target_power,
                cfg.p0_db.unwrap_or_default()
            );
        }
        None => {
            let _ = writeln!(t, "gamma           {:.6e} (fixed)", p.gamma);
        }
    }
    let _ = writeln!(t, "theta           {:.9}", s.file.theta);
    let _ = writeln!(t, "solve time      {:.3} ms", s.elapsed.as_secs_f64() * 1e3);
    let _ = writeln!(t, "avg power       {:.6}", s.steady.avg_power);
    let _ = writeln!(t, "weighted delay  {:.6}", s.steady.weighted_delay(p));
    let _ = writeln!(t, "balance resid   {:.3e}", s.steady.balance_residual);
    let delay = s.steady.delay_channel_uses(p);
    let _ = writeln!(t, "\nstream  beta      avg_queue   sojourn(ch.uses)  drop_rate");
    for i in 0..p.n_streams() {
        let _ = writeln!(
            t,
            "{i:<7} {:<9} {:<11.6} {:<17.3} {:.3e}",
            p.streams[i].beta, s.steady.avg_queue[i], delay[i], s.steady.drop_rate[i]
        );
    }
    let _ = writeln!(t, "\nmarginal values dV");
    match &s.policy {
        PolicyHandle::Full(sol) => {
            let space = sol.space();
            for idx in 0..space.count() {
                let q = space.decode(idx).0;
                let dv: Vec<String> = sol.delta_v_at(idx).iter().map(|x| format!("{x:.6}")).collect();
                let _ = writeln!(t, "  q={q:?}  V={:.6}  dV=[{}]", sol.v[idx], dv.join(", "));
            }
        }
        PolicyHandle::Decomposed(sol) => {
            for st in &sol.streams {
                let dv: Vec<String> = st.delta_v.iter().map(|x| format!("{x:.6}")).collect();
                let _ = writeln!(
                    t,
                    "  stream {} rank {} theta {:.9}: [{}]",
                    st.stream,
                    st.rank,
                    st.theta,
                    dv.join(", ")
                );
            }
        }
        _ => {}
    }
    t
}

pub fn solve(s: &Session) -> anyhow::Result<()> {
    let cache = s.cache()?;
    let mode = s.cfg.solver;
    let solved = solve_mode(&s.cfg, mode, &cache)?;
    let name = mode_name(mode);
    let out = &s.cfg.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    solved.file.save(&out.join(format!("solution-{name}.json")))?;
    let text = summary_text(&s.cfg, &solved);
    let mut w = s.out_file(&format!("summary-{name}.txt"))?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    let mut w = s.out_file(&format!("steady-{name}.csv"))?;
    write_steady_csv(&solved.steady, &solved.params, &s.cfg.provenance(), &mut w)?;
    w.flush()?;
    if let Some(c) = &solved.calibration {
        let mut w = s.out_file(&format!("calibration-{name}.csv"))?;
        write_calibration_csv(c, &s.cfg.provenance(), &mut w)?;
        w.flush()?;
    }
    print!("{text}");
    Ok(())
}

pub fn calibrate(s: &Session) -> anyhow::Result<()> {
    if !matches!(s.cfg.target(), Target::Power(_)) {
        bail!(ConfigError("calibrate needs a power budget (--p0 or p0_db), not a fixed gamma".into()));
    }
    let cache = s.cache()?;
    let mode = s.cfg.solver;
    let (gamma, res) = resolve_gamma(&s.cfg, mode, &cache)?;
    let res = res.expect("power target calibrates");
    let mut w = s.out_file(&format!("calibration-{}.csv", mode_name(mode)))?;
    write_calibration_csv(&res, &s.cfg.provenance(), &mut w)?;
    w.flush()?;
    println!(
        "gamma={gamma:e} achieved_power={} target_power={} mode={:?} monotone={} evaluations={}",
        res.achieved_power,
        res.target_power,
        res.mode,
        res.monotone,
        res.table.len()
    );
    Ok(())
}

/// One policy analyzed and simulated at a common configuration.
pub struct PolicyRun {
    pub policy: PolicyArg,
    pub gamma: Option<f64>,
    pub target_power: f64,
    pub params: ChainParams64,
    pub handle: PolicyHandle<f64>,
    pub steady: SteadyState64,
    pub reports: Vec<SimReport>,
}

impl PolicyRun {
    pub fn empirical_queue(&self) -> Vec<f64> {
        let l = self.params.n_streams();
        let k = self.reports.len() as f64;
        (0..l)
            .map(|i| self.reports.iter().map(|r| r.avg_queue[i]).sum::<f64>() / k)
            .collect()
    }

    pub fn empirical_power(&self) -> f64 {
        self.reports.iter().map(|r| r.avg_power).sum::<f64>() / self.reports.len() as f64
    }

    /// Queue length over admitted traffic in channel uses, averaged over seeds.
    pub fn empirical_sojourn(&self) -> Vec<f64> {
        let l = self.params.n_streams();
        let k = self.reports.len() as f64;
        let tau = self.params.tau;
        (0..l)
            .map(|i| {
                self.reports
                    .iter()
                    .map(|r| {
                        let admitted = (r.arrivals[i] - r.drops[i]) as f64 / (r.slots as f64 * tau);
                        if admitted > 0.0 {
                            r.avg_queue[i] / admitted
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
                    / k
            })
            .collect()
    }
}

fn solver_of(p: PolicyArg) -> Option<SolverMode> {
    match p {
        PolicyArg::Full => Some(SolverMode::Full),
        PolicyArg::Decomposed => Some(SolverMode::Decomposed),
        _ => None,
    }
}

/// Solves, analyzes and simulates `policies` under `cfg`. Optimal policies
/// run at their own price; baselines are matched to the power budget, or
/// with a fixed γ to the long-run power of the first optimal policy.
pub fn evaluate_policies(cfg: &RunConfig, cache: &Cache64, policies: &[PolicyArg]) -> anyhow::Result<Vec<PolicyRun>> {
    let phy = cfg.phy_config();
    let mut solved: Vec<(PolicyArg, Solved)> = Vec::new();
    for &p in policies {
        if let Some(mode) = solver_of(p) {
            solved.push((p, solve_mode(cfg, mode, cache)?));
        }
    }
    let budget = match cfg.target() {
        Target::Power(p0) => p0,
        Target::Gamma(_) => match solved.first() {
            Some((_, s)) => s.steady.avg_power,
            None => solve_mode(cfg, cfg.solver, cache)?.steady.avg_power,
        },
    };
    let base = cfg.chain_params(1.0)?;
    let mut runs = Vec::with_capacity(policies.len());
    for &p in policies {
        let (gamma, params, handle, steady) = match solver_of(p) {
            Some(_) => {
                let k = solved.iter().position(|(q, _)| *q == p).expect("solved above");
                let s = solved.swap_remove(k).1;
                (Some(s.params.gamma), s.params, s.policy, s.steady)
            }
            None => {
                let handle = match p {
                    PolicyArg::Rr => round_robin_matched(&base, cache, cfg.rr_rule, budget)?,
                    _ => csit_only_matched(&base, cache, budget)?,
                };
                let steady = baseline_steady_state(&handle, &base, cache)?;
                (None, base.clone(), handle, steady)
            }
        };
        let reports = run_seeds(&handle, &params, &phy, cfg.slots, &cfg.seeds)?;
        runs.push(PolicyRun {
            policy: p,
            gamma,
            target_power: budget,
            params,
            handle,
            steady,
            reports,
        });
    }
    Ok(runs)
}

#[derive(Serialize)]
struct SimFile<'a> {
    provenance: String,
    policy: &'a str,
    gamma: Option<f64>,
    target_power: f64,
    analytic_queue: &'a [f64],
    analytic_power: f64,
    /// Water level or transmit power of a baseline.
    baseline: Option<&'a PolicyHandle<f64>>,
    reports: &'a [SimReport],
}

fn fmt_row(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

pub fn simulate(s: &Session, policies: &[PolicyArg]) -> anyhow::Result<()> {
    let mut policies = policies.to_vec();
    if policies.is_empty() {
        policies = vec![
            match s.cfg.solver {
                SolverMode::Full => PolicyArg::Full,
                SolverMode::Decomposed => PolicyArg::Decomposed,
            },
            PolicyArg::Csit,
            PolicyArg::Rr,
        ];
    }
    policies.sort();
    policies.dedup();
    let cache = s.cache()?;
    let runs = evaluate_policies(&s.cfg, &cache, &policies)?;
    let prov = s.cfg.provenance();
    let mut summary = s.out_file("sim-summary.csv")?;
    writeln!(summary, "# {prov},slots={},seeds={:?}", s.cfg.slots, s.cfg.seeds)?;
    writeln!(
        summary,
        "policy,stream,analytic_delay,empirical_delay,analytic_sojourn,empirical_sojourn,analytic_power,empirical_power"
    )?;
    println!("policy      analytic_power  empirical_power  analytic_wdelay  empirical_wdelay");
    for run in &runs {
        let name = run.policy.name();
        let json = SimFile {
            provenance: prov.clone(),
            policy: name,
            gamma: run.gamma,
            target_power: run.target_power,
            analytic_queue: &run.steady.avg_queue,
            analytic_power: run.steady.avg_power,
            baseline: run.gamma.is_none().then_some(&run.handle),
            reports: &run.reports,
        };
        let mut w = s.out_file(&format!("sim-{name}.json"))?;
        serde_json::to_writer_pretty(&mut w, &json)?;
        writeln!(w)?;
        w.flush()?;
        let mut w = s.out_file(&format!("sim-{name}.csv"))?;
        writeln!(w, "# {prov}")?;
        writeln!(
            w,
            "seed,stream,avg_queue,avg_power,weighted_delay,arrivals,departures,drops,clamped"
        )?;
        for r in &run.reports {
            for i in 0..r.avg_queue.len() {
                writeln!(
                    w,
                    "{},{i},{:?},{:?},{:?},{},{},{},{}",
                    r.seed, r.avg_queue[i], r.avg_power, r.weighted_delay, r.arrivals[i], r.departures[i], r.drops[i], r.clamped
                )?;
            }
        }
        w.flush()?;
        for r in &run.reports {
            let mut w = s.out_file(&format!("hist-{name}-seed{}.csv", r.seed))?;
            writeln!(w, "# {prov}")?;
            r.write_histogram(&mut w)?;
            w.flush()?;
        }
        let aq = &run.steady.avg_queue;
        let eq = run.empirical_queue();
        let ad = run.steady.delay_channel_uses(&run.params);
        let ed = run.empirical_sojourn();
        for i in 0..aq.len() {
            writeln!(summary, "{name},{i},{},,", fmt_row(&[aq[i], eq[i], ad[i], ed[i]]))?;
        }
        writeln!(
            summary,
            "{name},sum,{},{}",
            fmt_row(&[aq.iter().sum(), eq.iter().sum(), ad.iter().sum(), ed.iter().sum()]),
            fmt_row(&[run.steady.avg_power, run.empirical_power()])
        )?;
        let ew = run.reports.iter().map(|r| r.weighted_delay).sum::<f64>() / run.reports.len() as f64;
        println!(
            "{name:<11} {:<15.6} {:<16.6} {:<16.6} {:.6}",
            run.steady.avg_power,
            run.empirical_power(),
            run.steady.weighted_delay(&run.params),
            ew
        );
    }
    summary.flush()?;
    Ok(())
}
