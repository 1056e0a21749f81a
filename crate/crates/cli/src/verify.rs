//! Cross-module self-checks on the built-in two-stream scenario.
//!
//! Each check records which library operations it exercised; a final
//! `coverage` row fails if any operation of the six library modules was
//! never reached.
//!
//! Statistical checks widen with the eigenvalue cache size `M` and the
//! total simulated slots `S`:
//!
//! | check              | tolerance                        |
//! |--------------------|----------------------------------|
//! | `phy.trace`        | `max(0.01, 3/√M)` relative       |
//! | `sim.queue`        | `0.05 + 2/√M + 20/√S` relative   |
//! | `sim.tv`           | `0.01 + 1/√M + 5/√S`             |
//! | `baseline.power`   | `0.02 + 2/√M + 20/√S` relative   |
//!
//! Everything else is deterministic and held to fixed tolerances. The
//! suite is seeded, so a given `(cache_rows, slots, seed)` always produces
//! the same table.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;

use anyhow::anyhow;
use delay_mimo::mdp_decomposed::StreamProblem;
use delay_mimo::phy::{mse_matrix, rate_per_stream, sample_channel, service_rate, wiener_sinr, CMatrix};
use delay_mimo::simulator::{baseline_steady_state, csit_only_policy, round_robin_policy};
use delay_mimo::steady::Omega;
use delay_mimo::waterfill::{phi_1d, phi_by_rows};
use delay_mimo::{
    bellman_backup, calibrate_gamma, decomposed_policy, extract_action, phi, run_seeds, run_sim, solve_decomposed,
    solve_rvi, solve_theta, sort_assignment, steady_state_full, steady_state_per_stream, waterfill_power, Cache64,
    CalibrationMode, CalibrationOptions, ChainParams64, DecomposedSolution64, FullSolution64, JointState,
    PhyConfig64, PolicyHandle, RviOptions, SimReport, SolverMode, StreamProfile, WaterfillParams,
};
use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commands::create_in;
use crate::config::version;
use crate::VerifyFailure;

pub const DEFAULT_CACHE_ROWS: usize = 20_000;
pub const DEFAULT_SLOTS: u64 = 1_000_000;
const SIM_SEEDS: u64 = 3;
const CACHE_SEED: u64 = 7;
const SIM_GAMMA: f64 = 0.1;

/// Every operation of the library modules the suite must reach.
pub const OPERATIONS: [&str; 20] = [
    "sample_channel",
    "mse_matrix",
    "rate_per_stream",
    "service_rate",
    "waterfill_power",
    "sort_assignment",
    "phi",
    "phi_1d",
    "bellman_backup",
    "solve_rvi",
    "extract_action",
    "forward_recursion",
    "solve_theta",
    "decomposed_policy",
    "steady_state_full",
    "steady_state_per_stream",
    "calibrate_gamma",
    "run_sim",
    "round_robin_policy",
    "csit_only_policy",
];

pub struct VerifyOptions {
    pub inject_fault: bool,
    pub cache_rows: usize,
    pub slots: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Outcome of one check: measured value against its tolerance.
struct Measure {
    value: f64,
    tol: f64,
    detail: String,
}

impl Measure {
    fn new(value: f64, tol: f64) -> Self {
        Self {
            value,
            tol,
            detail: String::new(),
        }
    }

    fn with(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn passed(&self) -> bool {
        self.value <= self.tol
    }
}

struct Row {
    name: &'static str,
    ops: Vec<&'static str>,
    value: f64,
    tol: f64,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Suite {
    rows: Vec<Row>,
    covered: BTreeSet<&'static str>,
}

impl Suite {
    fn check(&mut self, name: &'static str, ops: &[&'static str], f: impl FnOnce() -> anyhow::Result<Measure>) {
        let row = match f() {
            Ok(m) => Row {
                name,
                ops: ops.to_vec(),
                value: m.value,
                tol: m.tol,
                pass: m.passed(),
                detail: m.detail,
            },
            Err(e) => Row {
                name,
                ops: ops.to_vec(),
                value: f64::NAN,
                tol: f64::NAN,
                pass: false,
                detail: format!("error: {e:#}"),
            },
        };
        self.covered.extend(ops.iter().copied());
        self.rows.push(row);
    }

    fn coverage(&mut self) {
        let missing: Vec<&str> = OPERATIONS.iter().copied().filter(|op| !self.covered.contains(op)).collect();
        self.rows.push(Row {
            name: "coverage",
            ops: Vec::new(),
            value: missing.len() as f64,
            tol: 0.0,
            pass: missing.is_empty(),
            detail: if missing.is_empty() {
                format!("{} of {} operations exercised", OPERATIONS.len(), OPERATIONS.len())
            } else {
                format!("never exercised: {}", missing.join(" "))
            },
        });
    }

    fn write<W: Write>(&self, mut w: W, header: &str) -> std::io::Result<()> {
        writeln!(w, "# {header}")?;
        writeln!(w, "check,status,value,tolerance,ops,detail")?;
        for r in &self.rows {
            let detail: String = r.detail.chars().map(|c| if c == ',' { ';' } else { c }).collect();
            writeln!(
                w,
                "{},{},{:e},{:e},{},{detail}",
                r.name,
                if r.pass { "PASS" } else { "FAIL" },
                r.value,
                r.tol,
                r.ops.join(" ")
            )?;
        }
        Ok(())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn random_cmatrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix<f64> {
    CMatrix::from_fn(rows, cols, |_, _| {
        Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

/// Seed reports merged into one, for pooled histograms.
fn pooled(reports: &[SimReport]) -> SimReport {
    let mut acc = reports[0].clone();
    for r in &reports[1..] {
        let (s0, s1) = (acc.slots as f64, r.slots as f64);
        for i in 0..acc.avg_queue.len() {
            acc.avg_queue[i] = (acc.avg_queue[i] * s0 + r.avg_queue[i] * s1) / (s0 + s1);
            acc.arrivals[i] += r.arrivals[i];
            acc.departures[i] += r.departures[i];
            acc.drops[i] += r.drops[i];
            for (a, b) in acc.hist[i].iter_mut().zip(&r.hist[i]) {
                *a += b;
            }
        }
        acc.avg_power = (acc.avg_power * s0 + r.avg_power * s1) / (s0 + s1);
        for (a, b) in acc.joint_hist.iter_mut().zip(&r.joint_hist) {
            *a += b;
        }
        acc.slots += r.slots;
        acc.clamped += r.clamped;
    }
    acc
}

struct Scenario {
    phy: PhyConfig64,
    cache: Cache64,
    params: ChainParams64,
    full: anyhow::Result<FullSolution64>,
    dec: anyhow::Result<DecomposedSolution64>,
}

impl Scenario {
    fn new(rows: usize, inject_fault: bool) -> anyhow::Result<Self> {
        let phy = PhyConfig64::two_by_two();
        let cache = Cache64::generate(&phy, rows, CACHE_SEED)?;
        let params = ChainParams64::two_stream_default([1.0, 10.0], SIM_GAMMA, phy.alpha());
        let full = solve_rvi(
            &params,
            &cache,
            &RviOptions {
                tol: 1e-10,
                ..RviOptions::default()
            },
        )
        .map(|mut sol| {
            if inject_fault {
                let idx = sol.space().index(&[2, 2]);
                sol.delta_v[idx * 2 + 1] *= 1.25;
            }
            sol
        })
        .map_err(Into::into);
        let dec = solve_decomposed(&params, &cache, 1e-12).map_err(Into::into);
        Ok(Self {
            phy,
            cache,
            params,
            full,
            dec,
        })
    }

    fn full(&self) -> anyhow::Result<&FullSolution64> {
        self.full.as_ref().map_err(|e| anyhow!("full solve failed: {e:#}"))
    }

    fn dec(&self) -> anyhow::Result<&DecomposedSolution64> {
        self.dec.as_ref().map_err(|e| anyhow!("decomposed solve failed: {e:#}"))
    }
}

fn phy_checks(suite: &mut Suite, sc: &Scenario, m: f64) {
    suite.check("phy.trace", &["sample_channel"], || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let draws = sc.cache.n_rows();
        let mean = (0..draws)
            .map(|_| sample_channel(&sc.phy, &mut rng).eigvals.iter().sum::<f64>())
            .sum::<f64>()
            / draws as f64;
        Ok(Measure::new(rel(mean, 4.0), (3.0 / m.sqrt()).max(0.01)).with(format!("mean eigenvalue sum {mean:.5}")))
    });
    suite.check("phy.mse_wiener", &["mse_matrix"], || {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut worst = 0.0f64;
        for k in 0..100 {
            let (n_r, n_t) = (1 + k % 4, 1 + (k / 4) % 4);
            let l = 1 + k % n_t.min(n_r);
            let h = random_cmatrix(&mut rng, n_r, n_t);
            let p = random_cmatrix(&mut rng, n_t, l);
            let e = mse_matrix(&p, &h)?;
            let sinr = wiener_sinr(&p, &h)?;
            for i in 0..l {
                worst = worst.max((1.0 / e[(i, i)].re - 1.0 - sinr[i]).abs() / (1.0 + sinr[i]));
            }
        }
        Ok(Measure::new(worst, 1e-8))
    });
    suite.check("phy.rate_service", &["rate_per_stream", "service_rate"], || {
        let alpha = sc.phy.alpha();
        let r = rate_per_stream(&[0.5, 1.0], &sc.phy)?;
        let s = service_rate(r[0], 200.0);
        let err = (r[0] - (1.0 + alpha).log2()).abs() + r[1].abs() + (s - r[0] / 200.0).abs();
        Ok(Measure::new(err, 1e-12).with(format!("alpha {alpha:.6}")))
    });
}

fn waterfill_checks(suite: &mut Suite, sc: &Scenario) {
    let alpha = sc.params.alpha;
    suite.check("waterfill.kkt", &["waterfill_power", "sort_assignment"], || {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let mut worst = 0.0f64;
        for _ in 0..500 {
            let eta = vec![rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)];
            let (a, b): (f64, f64) = (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
            let eig = [a.max(b), a.min(b)];
            let gamma = 10f64.powf(rng.random_range(-3.0..0.0));
            let wf = WaterfillParams::new(eta.clone(), vec![200.0; 2], gamma, alpha);
            let assign = sort_assignment(&eta);
            if eta[0] > eta[1] && assign[0] != 0 || eta[1] > eta[0] && assign[1] != 0 {
                return Ok(Measure::new(f64::INFINITY, 0.0).with("larger weight not on the stronger mode"));
            }
            let p = waterfill_power(&wf, &eig, &assign);
            for i in 0..2 {
                let xi = eig[assign[i]];
                let slope = eta[i] / 200.0 * alpha * xi / (std::f64::consts::LN_2 * (1.0 + alpha * p[i] * xi)) - gamma;
                let v = if p[i] > 0.0 { slope.abs() } else { slope.max(0.0) };
                worst = worst.max(v / (1.0 + gamma)).max(-p[i]);
            }
        }
        Ok(Measure::new(worst, 1e-9))
    });
    suite.check("waterfill.phi_forms", &["phi", "phi_1d"], || {
        let mut worst = 0.0f64;
        for eta in [[0.0, 0.0], [50.0, 400.0], [300.0, 20.0], [120.0, 120.0]] {
            let wf = WaterfillParams::new(eta.to_vec(), vec![200.0; 2], SIM_GAMMA, alpha);
            let a = phi(&wf, &sc.cache);
            let b = phi_by_rows(&wf, &sc.cache);
            worst = worst.max((a.value - b.value).abs() / (1.0 + a.value.abs()));
            let single = WaterfillParams::new(vec![eta[1]], vec![200.0], SIM_GAMMA, alpha);
            let c = phi(&single, &sc.cache.column_cache(0));
            let d = phi_1d(eta[1], 200.0, SIM_GAMMA, alpha, sc.cache.column(0));
            worst = worst.max((c.value - d.value).abs() / (1.0 + c.value.abs()));
        }
        Ok(Measure::new(worst, 1e-9))
    });
}

fn solver_checks(suite: &mut Suite, sc: &Scenario) {
    suite.check("decomposed.single_stream_vs_rvi", &["solve_theta", "solve_rvi"], || {
        let mut worst = 0.0f64;
        let col = sc.cache.column_cache(0);
        for &(beta, gamma) in &[(1.0, 0.01), (10.0, 0.1), (3.0, 1.0)] {
            let profile = StreamProfile::new(beta, 0.02, 200.0);
            let s = solve_theta(&profile, 4, gamma, sc.params.alpha, col.column(0), 1e-13)?;
            let p = ChainParams64::new(vec![profile], 4, 1.0, gamma, sc.params.alpha)?;
            let r = solve_rvi(
                &p,
                &col,
                &RviOptions {
                    tol: 1e-9 * s.theta,
                    ..RviOptions::default()
                },
            )?;
            worst = worst.max(rel(r.theta, s.theta));
        }
        Ok(Measure::new(worst, 1e-6))
    });
    suite.check("decomposed.boundary", &["forward_recursion"], || {
        let dec = sc.dec()?;
        let mut worst = 0.0f64;
        for (s, prof) in dec.streams.iter().zip(&sc.params.streams) {
            let problem = StreamProblem {
                profile: prof,
                buffer: sc.params.buffer,
                gamma: sc.params.gamma,
                alpha: sc.params.alpha,
                column: sc.cache.column(s.rank),
            };
            let dv = problem.forward_recursion(s.theta);
            worst = worst.max((problem.f_value(s.theta) - sc.params.buffer as f64).abs());
            worst = worst.max(dv.iter().zip(&s.delta_v[1..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            if dv.iter().any(|&x| x < 0.0) {
                return Ok(Measure::new(f64::INFINITY, 0.0).with("negative marginal value"));
            }
        }
        Ok(Measure::new(worst, 1e-6))
    });
    suite.check("full.bellman_residual", &["solve_rvi"], || {
        let full = sc.full()?;
        let r = full.bellman_residual(&sc.params, &sc.cache);
        Ok(Measure::new(r, 1e-6 * (1.0 + full.theta)).with(format!("theta {:.6}", full.theta)))
    });
    suite.check("full.backup_fixed_point", &["bellman_backup"], || {
        let full = sc.full()?;
        let (tv, theta) = bellman_backup(&full.v, &sc.params, &sc.cache)?;
        let drift = tv.iter().zip(&full.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok(Measure::new(drift.max((theta - full.theta).abs()), 1e-7 * (1.0 + full.theta)))
    });
    suite.check("full.value_monotone", &[], || {
        let full = sc.full()?;
        let bad = full.monotonicity_violations(1e-9) + full.delta_v.iter().filter(|&&d| d < 0.0).count();
        Ok(Measure::new(bad as f64, 0.0).with(format!("{} states", full.v.len())))
    });
    suite.check("full.theta_le_decomposed", &[], || {
        let (full, dec) = (sc.full()?, sc.dec()?);
        let gap = full.theta - dec.theta_total();
        Ok(Measure::new(gap, 1e-9).with(format!("full {:.6} decomposed {:.6}", full.theta, dec.theta_total())))
    });
    suite.check(
        "actions.rates_match_mse",
        &["extract_action", "decomposed_policy", "sample_channel", "mse_matrix", "rate_per_stream"],
        || {
            let (full, dec) = (sc.full()?, sc.dec()?);
            let mut rng = ChaCha8Rng::seed_from_u64(104);
            let space = sc.params.space();
            let mut worst = 0.0f64;
            for k in 0..60 {
                let ch = sample_channel(&sc.phy, &mut rng);
                let state: JointState = space.decode(k % space.count());
                for action in [
                    extract_action(full, &sc.params, &state, &ch),
                    decomposed_policy(dec, &sc.params, &state, &ch),
                ] {
                    let e = mse_matrix(&action.precoder, &ch.h_true)?;
                    let diag: Vec<f64> = (0..2).map(|i| e[(i, i)].re).collect();
                    let rates = rate_per_stream(&diag, &sc.phy)?;
                    for (a, b) in action.rates.iter().zip(&rates) {
                        worst = worst.max((a - b).abs());
                    }
                    if state.is_empty() {
                        worst = worst.max(action.allocation.total_power());
                    }
                }
            }
            Ok(Measure::new(worst, 1e-9))
        },
    );
}

fn steady_checks(suite: &mut Suite, sc: &Scenario) {
    match sc.full() {
        Ok(full) => {
            let st = steady_state_full(full, &sc.params, &sc.cache).map_err(anyhow::Error::from);
            let st = st.as_ref();
            suite.check("steady.full_balance", &["steady_state_full"], || {
                let st = st.map_err(|e| anyhow!("{e:#}"))?;
                Ok(Measure::new(st.balance_residual, 1e-10))
            });
            suite.check("steady.full_cost", &["steady_state_full"], || {
                let st = st.map_err(|e| anyhow!("{e:#}"))?;
                let j = st.lagrangian_cost(&sc.params);
                Ok(Measure::new(rel(j, full.theta), 1e-6).with(format!("J {j:.6} theta {:.6}", full.theta)))
            });
        }
        Err(e) => suite.check("steady.full_balance", &["steady_state_full"], || Err(e)),
    }
    suite.check("steady.per_stream", &["steady_state_per_stream"], || {
        let dec = sc.dec()?;
        let st = steady_state_per_stream(dec, &sc.params, &sc.cache)?;
        let j = st.lagrangian_cost(&sc.params);
        if st.balance_residual > 1e-10 {
            return Ok(Measure::new(f64::INFINITY, 0.0).with(format!("balance residual {:e}", st.balance_residual)));
        }
        Ok(Measure::new(rel(j, dec.theta_total()), 1e-9).with(format!("J {j:.6} theta {:.6}", dec.theta_total())))
    });
    suite.check("calibrate.round_trip", &["calibrate_gamma"], || {
        let base = sc.params.with_gamma(0.02);
        let sol = solve_decomposed(&base, &sc.cache, 1e-12)?;
        let power = steady_state_per_stream(&sol, &base, &sc.cache)?.avg_power;
        let opts = CalibrationOptions {
            rel_tol: 1e-8,
            ..CalibrationOptions::default()
        };
        let res = calibrate_gamma(
            power,
            SolverMode::Decomposed,
            &base,
            &sc.cache,
            CalibrationMode::RootFind,
            &opts,
        )?;
        let err = if res.monotone { rel(res.gamma, 0.02) } else { f64::INFINITY };
        Ok(Measure::new(err, 1e-4).with(format!("target power {power:.4} gamma {:.6e}", res.gamma)))
    });
}

fn sim_checks(suite: &mut Suite, sc: &Scenario, m: f64, slots: u64, seed: u64) {
    let seeds: Vec<u64> = (0..SIM_SEEDS).map(|k| seed + k).collect();
    let total = (slots * SIM_SEEDS) as f64;
    let queue_tol = 0.05 + 2.0 / m.sqrt() + 20.0 / total.sqrt();
    let tv_tol = 0.01 + 1.0 / m.sqrt() + 5.0 / total.sqrt();
    let sim = sc.dec().map_err(|e| anyhow!("{e:#}")).and_then(|dec| {
        let handle = PolicyHandle::Decomposed(dec.clone());
        run_sim(&handle, &sc.params, &sc.phy, slots, seeds[0])?;
        let reports = run_seeds(&handle, &sc.params, &sc.phy, slots, &seeds)?;
        let st = steady_state_per_stream(dec, &sc.params, &sc.cache)?;
        Ok((pooled(&reports), st))
    });
    let sim = sim.as_ref();
    suite.check("sim.queue", &["run_sim"], || {
        let (rep, st) = sim.map_err(|e| anyhow!("{e:#}"))?;
        let err = (0..2).map(|i| rel(rep.avg_queue[i], st.avg_queue[i])).fold(0.0, f64::max);
        Ok(Measure::new(err, queue_tol).with(format!(
            "empirical {:.4}/{:.4} analytic {:.4}/{:.4}",
            rep.avg_queue[0], rep.avg_queue[1], st.avg_queue[0], st.avg_queue[1]
        )))
    });
    suite.check("sim.tv", &["run_sim"], || {
        let (rep, st) = sim.map_err(|e| anyhow!("{e:#}"))?;
        if !matches!(st.omega, Omega::PerStream(_)) {
            return Err(anyhow!("unexpected joint law"));
        }
        Ok(Measure::new(rep.total_variation(st), tv_tol))
    });
    suite.check("baseline.power", &["round_robin_policy", "csit_only_policy", "run_sim"], || {
        let budget = 100.0;
        let mut worst = 0.0f64;
        let mut detail = Vec::new();
        for handle in [
            round_robin_policy(budget)?,
            csit_only_policy(&sc.params, &sc.cache, budget)?,
        ] {
            let analytic = baseline_steady_state(&handle, &sc.params, &sc.cache)?.avg_power;
            if !(analytic > 0.0 && analytic <= budget * (1.0 + 1e-9)) {
                return Ok(Measure::new(f64::INFINITY, 0.0).with(format!("{} power {analytic}", handle.name())));
            }
            let reports = run_seeds(&handle, &sc.params, &sc.phy, slots, &seeds)?;
            let empirical = pooled(&reports).avg_power;
            worst = worst.max(rel(empirical, analytic));
            detail.push(format!("{} {empirical:.3}/{analytic:.3}", handle.name()));
        }
        Ok(Measure::new(worst, 0.02 + 2.0 / m.sqrt() + 20.0 / total.sqrt()).with(detail.join(" ")))
    });
}

pub fn run(opts: &VerifyOptions) -> anyhow::Result<()> {
    if opts.cache_rows == 0 || opts.slots == 0 {
        return Err(crate::ConfigError("cache rows and slots must be positive".into()).into());
    }
    let m = opts.cache_rows as f64;
    let sc = Scenario::new(opts.cache_rows, opts.inject_fault)?;
    let mut suite = Suite::default();
    phy_checks(&mut suite, &sc, m);
    waterfill_checks(&mut suite, &sc);
    solver_checks(&mut suite, &sc);
    steady_checks(&mut suite, &sc);
    sim_checks(&mut suite, &sc, m, opts.slots, opts.seed);
    suite.coverage();

    let header = format!(
        "delay-mimo {} verify cache_rows={} cache_seed={CACHE_SEED} slots={} seeds={}..{} inject_fault={}",
        version(),
        opts.cache_rows,
        opts.slots,
        opts.seed,
        opts.seed + SIM_SEEDS - 1,
        opts.inject_fault
    );
    let mut stdout = std::io::stdout().lock();
    suite.write(&mut stdout, &header)?;
    stdout.flush()?;
    if let Some(dir) = &opts.out {
        let mut w = create_in(dir, "verify.csv")?;
        suite.write(&mut w, &header)?;
        w.flush()?;
    }
    let failed = suite.rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(VerifyFailure(failed).into());
    }
    Ok(())
}
