//! Stationary analysis of the controlled queue chains and calibration of
//! the power price γ against an average power budget.

use serde::{Deserialize, Serialize};

use crate::cache::EigenSampleCache;
use crate::error::{Error, Result};
use crate::mdp_decomposed::{solve_decomposed, DecomposedSolution};
use crate::mdp_full::{solve_rvi_from, FullSolution, RviOptions};
use crate::model::{ChainParams, StateSpace};
use crate::scalar::{compensated_sum, Real};
use crate::waterfill::phi_1d;

/// Sparse one-slot transition kernel, row `s` listing `(target, probability)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T> {
    pub rows: Vec<Vec<(usize, T)>>,
}

impl<T: Real> Kernel<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn bandwidth(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(s, row)| row.iter().map(move |&(t, _)| s.abs_diff(t)))
            .max()
            .unwrap_or(0)
    }

    /// `‖ωP - ω‖∞`.
    pub fn balance_residual(&self, omega: &[T]) -> T {
        let mut flow = vec![T::zero(); self.len()];
        for (s, row) in self.rows.iter().enumerate() {
            for &(t, p) in row {
                flow[t] += omega[s] * p;
            }
        }
        flow.iter()
            .zip(omega)
            .fold(T::zero(), |acc, (&f, &w)| acc.max((f - w).abs()))
    }

    /// States of the closed communicating class reached from `start`.
    ///
    /// Errors when more than one closed class is reachable, since the
    /// long-run law would then depend on the sample path.
    pub fn closed_class_from(&self, start: usize) -> Result<Vec<usize>> {
        let n = self.len();
        let edges = |s: usize| self.rows[s].iter().filter(|(_, p)| *p > T::zero()).map(|&(t, _)| t);
        let mut reach = vec![false; n];
        let mut stack = vec![start];
        reach[start] = true;
        while let Some(s) = stack.pop() {
            for t in edges(s) {
                if !reach[t] {
                    reach[t] = true;
                    stack.push(t);
                }
            }
        }
        // Kosaraju on the reachable subgraph: finishing order, then the
        // transposed graph in reverse finishing order.
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        for root in (0..n).filter(|&s| reach[s]) {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let mut frames: Vec<(usize, Vec<usize>)> = vec![(root, edges(root).collect())];
            while let Some((s, next)) = frames.last_mut() {
                if let Some(t) = next.pop() {
                    if !seen[t] {
                        seen[t] = true;
                        let out = edges(t).collect();
                        frames.push((t, out));
                    }
                } else {
                    order.push(*s);
                    frames.pop();
                }
            }
        }
        let mut rev: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in (0..n).filter(|&s| reach[s]) {
            for t in edges(s) {
                rev[t].push(s);
            }
        }
        let mut comp = vec![usize::MAX; n];
        let mut n_comp = 0;
        for &root in order.iter().rev() {
            if comp[root] != usize::MAX {
                continue;
            }
            comp[root] = n_comp;
            let mut stack = vec![root];
            while let Some(s) = stack.pop() {
                for &t in &rev[s] {
                    if comp[t] == usize::MAX {
                        comp[t] = n_comp;
                        stack.push(t);
                    }
                }
            }
            n_comp += 1;
        }
        let mut open = vec![false; n_comp];
        for s in (0..n).filter(|&s| reach[s]) {
            if edges(s).any(|t| comp[t] != comp[s]) {
                open[comp[s]] = true;
            }
        }
        let closed: Vec<usize> = (0..n_comp).filter(|&c| !open[c]).collect();
        if closed.len() != 1 {
            return Err(Error::Numeric(format!(
                "{} closed classes reachable from state {start}; long-run law is path dependent",
                closed.len()
            )));
        }
        Ok((0..n).filter(|&s| reach[s] && comp[s] == closed[0]).collect())
    }

    /// Long-run distribution of the chain started in state 0: the stationary
    /// law of the closed class it enters, zero elsewhere.
    pub fn stationary(&self) -> Result<Vec<T>> {
        let class = self.closed_class_from(0)?;
        if class.len() == self.len() {
            return self.stationary_irreducible();
        }
        let mut local = vec![usize::MAX; self.len()];
        for (k, &s) in class.iter().enumerate() {
            local[s] = k;
        }
        let sub = Kernel {
            rows: class
                .iter()
                .map(|&s| self.rows[s].iter().map(|&(t, p)| (local[t], p)).collect())
                .collect(),
        };
        let w = sub.stationary_irreducible()?;
        let mut out = vec![T::zero(); self.len()];
        for (k, &s) in class.iter().enumerate() {
            out[s] = w[k];
        }
        Ok(out)
    }

    /// Stationary distribution of an irreducible kernel.
    ///
    /// Grassmann–Taksar–Heyman state reduction on the band of the kernel.
    /// Only off-diagonal probabilities enter and nothing is subtracted, so
    /// nearly decomposable chains keep full relative accuracy.
    pub fn stationary_irreducible(&self) -> Result<Vec<T>> {
        let n = self.len();
        if n == 1 {
            return Ok(vec![T::one()]);
        }
        let b = self.bandwidth().max(1);
        let width = 2 * b + 1;
        let at = |i: usize, j: usize| i * width + (j + b - i);
        let mut band = vec![T::zero(); n * width];
        for (s, row) in self.rows.iter().enumerate() {
            for &(t, p) in row {
                if s != t {
                    band[at(s, t)] += p;
                }
            }
        }
        let mut outflow = vec![T::zero(); n];
        for k in (1..n).rev() {
            let lo = k.saturating_sub(b);
            let s = (lo..k).fold(T::zero(), |acc, j| acc + band[at(k, j)]);
            if !(s > T::zero()) {
                return Err(Error::Numeric(format!(
                    "state {k} has no path to lower states; chain is not irreducible"
                )));
            }
            outflow[k] = s;
            for i in lo..k {
                let f = band[at(i, k)] / s;
                if f == T::zero() {
                    continue;
                }
                for j in (lo..k).filter(|&j| j != i) {
                    let upd = f * band[at(k, j)];
                    band[at(i, j)] += upd;
                }
            }
        }
        let mut omega = vec![T::zero(); n];
        omega[0] = T::one();
        for k in 1..n {
            let lo = k.saturating_sub(b);
            let inflow = (lo..k).fold(T::zero(), |acc, i| acc + omega[i] * band[at(i, k)]);
            omega[k] = inflow / outflow[k];
        }
        let total = compensated_sum(omega.iter().copied());
        if !(total > T::zero()) || !total.is_finite() {
            return Err(Error::Numeric("stationary distribution could not be normalized".into()));
        }
        Ok(omega.into_iter().map(|w| w / total).collect())
    }
}

/// Stationary law of a finite birth–death chain from the product formula.
/// `up[q]` is the probability of `q → q+1` (`q = 0..N-1`), `down[q]` that of
/// `q+1 → q`.
pub fn birth_death_stationary<T: Real>(up: &[T], down: &[T]) -> Vec<T> {
    let n = up.len();
    let mut w = vec![T::zero(); n + 1];
    w[0] = T::one();
    for q in 0..n {
        if down[q] > T::zero() {
            w[q + 1] = w[q] * up[q] / down[q];
        } else if up[q] > T::zero() {
            // no way back down: everything below q+1 is transient
            for x in w.iter_mut().take(q + 1) {
                *x = T::zero();
            }
            w[q + 1] = T::one();
        }
    }
    let total = compensated_sum(w.iter().copied());
    w.into_iter().map(|x| x / total).collect()
}

/// Stationary distribution in the form the chain was analyzed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Omega<T> {
    /// Over joint states in lexicographic order.
    Joint(Vec<T>),
    /// Independent per-stream laws over `0..=N`.
    PerStream(Vec<Vec<T>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState<T> {
    pub omega: Omega<T>,
    /// Per-stream marginal law over `0..=N`.
    pub marginals: Vec<Vec<T>>,
    /// Mean queue length per stream, packets.
    pub avg_queue: Vec<T>,
    /// Long-run average transmit power.
    pub avg_power: T,
    /// Fraction of arrivals lost to a full buffer, per stream.
    pub drop_rate: Vec<T>,
    /// `‖ωP - ω‖∞` of the analyzed kernel.
    pub balance_residual: T,
}

impl<T: Real> SteadyState<T> {
    /// `Σ β_i T̄_i`.
    pub fn weighted_delay(&self, params: &ChainParams<T>) -> T {
        params
            .streams
            .iter()
            .zip(&self.avg_queue)
            .fold(T::zero(), |a, (s, &q)| a + s.beta * q)
    }

    /// `Σ β_i T̄_i + γ P̄`.
    pub fn lagrangian_cost(&self, params: &ChainParams<T>) -> T {
        self.weighted_delay(params) + params.gamma * self.avg_power
    }

    /// Mean queue length divided by the arrival rate, in channel uses
    /// (Little's law on admitted traffic).
    pub fn delay_channel_uses(&self, params: &ChainParams<T>) -> Vec<T> {
        params
            .streams
            .iter()
            .zip(&self.avg_queue)
            .zip(&self.drop_rate)
            .map(|((s, &q), &d)| {
                let admitted = s.lambda * (T::one() - d);
                if admitted > T::zero() {
                    q / admitted
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

/// Per-state mean departure probabilities and mean powers of a stationary
/// policy on the joint chain.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicyLaw<T> {
    pub space: StateSpace,
    /// `μ̄_i(q) τ`, row-major by state.
    pub departure: Vec<T>,
    pub power: Vec<T>,
}

impl<T: Real> JointPolicyLaw<T> {
    pub fn of_full(sol: &FullSolution<T>, params: &ChainParams<T>, cache: &EigenSampleCache<T>) -> Self {
        let space = sol.space();
        let nbar = params.nbars();
        let mut departure = Vec::with_capacity(space.count() * space.streams);
        let mut power = Vec::with_capacity(space.count());
        for idx in 0..space.count() {
            let res = sol.state_phi(idx, params, cache);
            departure.extend((0..space.streams).map(|i| res.mean_rate[i] / nbar[i] * params.tau));
            power.push(res.mean_power);
        }
        Self {
            space,
            departure,
            power,
        }
    }

    pub fn kernel(&self, params: &ChainParams<T>) -> Result<Kernel<T>> {
        let space = self.space;
        let arrivals = params.arrival_probs();
        let mut rows = Vec::with_capacity(space.count());
        for idx in 0..space.count() {
            let q = space.decode(idx).0;
            let mut row = Vec::with_capacity(2 * space.streams + 1);
            let mut stay = T::one();
            for i in 0..space.streams {
                // an arrival to a full buffer is lost and leaves the state unchanged
                if q[i] < space.buffer && arrivals[i] > T::zero() {
                    row.push((idx + space.stride(i), arrivals[i]));
                    stay -= arrivals[i];
                }
                let d = self.departure[idx * space.streams + i];
                if q[i] > 0 && d > T::zero() {
                    row.push((idx - space.stride(i), d));
                    stay -= d;
                }
            }
            if stay < -T::lit(1e-12) {
                return Err(Error::Config(format!(
                    "state {q:?}: transition probabilities sum above 1 by {}",
                    -stay
                )));
            }
            row.push((idx, stay.max(T::zero())));
            rows.push(row);
        }
        Ok(Kernel { rows })
    }
}

fn joint_summary<T: Real>(omega: Vec<T>, law: &JointPolicyLaw<T>, residual: T) -> SteadyState<T> {
    let space = law.space;
    let l = space.streams;
    let mut marginals = vec![vec![T::zero(); space.buffer + 1]; l];
    let mut power_terms = Vec::with_capacity(omega.len());
    for (idx, &w) in omega.iter().enumerate() {
        let q = space.decode(idx).0;
        for i in 0..l {
            marginals[i][q[i]] += w;
        }
        power_terms.push(w * law.power[idx]);
    }
    let avg_queue = marginals
        .iter()
        .map(|m| {
            compensated_sum(m.iter().enumerate().map(|(q, &w)| T::from_usize(q).unwrap() * w))
        })
        .collect();
    let drop_rate = marginals.iter().map(|m| m[space.buffer]).collect();
    SteadyState {
        omega: Omega::Joint(omega),
        marginals,
        avg_queue,
        avg_power: compensated_sum(power_terms),
        drop_rate,
        balance_residual: residual,
    }
}

/// Stationary analysis of the joint chain under the optimal full policy,
/// by global balance.
pub fn steady_state_full<T: Real>(
    sol: &FullSolution<T>,
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
) -> Result<SteadyState<T>> {
    let law = JointPolicyLaw::of_full(sol, params, cache);
    steady_state_joint(&law, params)
}

/// Global-balance analysis of any joint policy law.
pub fn steady_state_joint<T: Real>(law: &JointPolicyLaw<T>, params: &ChainParams<T>) -> Result<SteadyState<T>> {
    let kernel = law.kernel(params)?;
    let omega = kernel.stationary()?;
    let residual = kernel.balance_residual(&omega);
    Ok(joint_summary(omega, law, residual))
}

/// Per-stream birth–death laws: departure probability and mean power for
/// `q = 0..=N` of each stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPolicyLaw<T> {
    pub departure: Vec<Vec<T>>,
    pub power: Vec<Vec<T>>,
}

impl<T: Real> StreamPolicyLaw<T> {
    pub fn of_decomposed(sol: &DecomposedSolution<T>, params: &ChainParams<T>, cache: &EigenSampleCache<T>) -> Self {
        let mut departure = Vec::with_capacity(sol.streams.len());
        let mut power = Vec::with_capacity(sol.streams.len());
        for (s, prof) in sol.streams.iter().zip(&params.streams) {
            let col = cache.column(s.rank);
            let mut d = vec![T::zero(); params.buffer + 1];
            let mut p = vec![T::zero(); params.buffer + 1];
            for q in 1..=params.buffer {
                let res = phi_1d(s.delta_v[q], prof.nbar, params.gamma, params.alpha, col);
                d[q] = res.mean_rate[0] / prof.nbar * params.tau;
                p[q] = res.mean_power;
            }
            departure.push(d);
            power.push(p);
        }
        Self { departure, power }
    }
}

/// Product-form analysis of independent per-stream birth–death chains.
pub fn steady_state_streams<T: Real>(law: &StreamPolicyLaw<T>, params: &ChainParams<T>) -> Result<SteadyState<T>> {
    let n = params.buffer;
    let arrivals = params.arrival_probs();
    let mut marginals = Vec::with_capacity(law.departure.len());
    let mut avg_queue = Vec::new();
    let mut drop_rate = Vec::new();
    let mut power_terms = Vec::new();
    let mut residual = T::zero();
    for (i, (dep, pw)) in law.departure.iter().zip(&law.power).enumerate() {
        for q in 0..=n {
            if arrivals[i] * T::from_usize((q < n) as usize).unwrap() + dep[q] > T::one() + T::lit(1e-12) {
                return Err(Error::Config(format!(
                    "stream {i}, q = {q}: transition probabilities sum above 1"
                )));
            }
        }
        let up = vec![arrivals[i]; n];
        let down = dep[1..].to_vec();
        let omega = birth_death_stationary(&up, &down);
        // balance check on the explicit kernel
        let kernel = Kernel {
            rows: (0..=n)
                .map(|q| {
                    let mut row = Vec::new();
                    let mut stay = T::one();
                    if q < n {
                        row.push((q + 1, arrivals[i]));
                        stay -= arrivals[i];
                    }
                    if q > 0 {
                        row.push((q - 1, dep[q]));
                        stay -= dep[q];
                    }
                    row.push((q, stay));
                    row
                })
                .collect(),
        };
        residual = residual.max(kernel.balance_residual(&omega));
        avg_queue.push(compensated_sum(
            omega.iter().enumerate().map(|(q, &w)| T::from_usize(q).unwrap() * w),
        ));
        drop_rate.push(omega[n]);
        power_terms.extend(omega.iter().zip(pw).map(|(&w, &p)| w * p));
        marginals.push(omega);
    }
    Ok(SteadyState {
        omega: Omega::PerStream(marginals.clone()),
        marginals,
        avg_queue,
        avg_power: compensated_sum(power_terms),
        drop_rate,
        balance_residual: residual,
    })
}

/// Stationary analysis of the decomposed policy.
pub fn steady_state_per_stream<T: Real>(
    sol: &DecomposedSolution<T>,
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
) -> Result<SteadyState<T>> {
    steady_state_streams(&StreamPolicyLaw::of_decomposed(sol, params, cache), params)
}

/// Largest `|ω(q) λ_iτ - ω(q+e_i) μ̄_i(q+e_i)τ|` over all joint states; zero
/// for a reversible chain.
pub fn detailed_balance_gap<T: Real>(steady: &SteadyState<T>, law: &JointPolicyLaw<T>, params: &ChainParams<T>) -> T {
    let Omega::Joint(omega) = &steady.omega else {
        return T::zero();
    };
    let space = law.space;
    let arrivals = params.arrival_probs();
    let mut worst = T::zero();
    for idx in 0..space.count() {
        let q = space.decode(idx).0;
        for i in 0..space.streams {
            if q[i] < space.buffer {
                let up = idx + space.stride(i);
                let gap = omega[idx] * arrivals[i] - omega[up] * law.departure[up * space.streams + i];
                worst = worst.max(gap.abs());
            }
        }
    }
    worst
}

/// Same diagnostic for independent per-stream chains.
pub fn detailed_balance_gap_streams<T: Real>(steady: &SteadyState<T>, law: &StreamPolicyLaw<T>, params: &ChainParams<T>) -> T {
    let arrivals = params.arrival_probs();
    let mut worst = T::zero();
    for (i, omega) in steady.marginals.iter().enumerate() {
        for q in 0..params.buffer {
            let gap = omega[q] * arrivals[i] - omega[q + 1] * law.departure[i][q + 1];
            worst = worst.max(gap.abs());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    Full,
    Decomposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Evaluate the power curve on a log-spaced γ grid.
    Sweep,
    /// Bisect γ on the curve until the target power is met.
    RootFind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub points: usize,
    /// Relative power tolerance of the root-find.
    pub rel_tol: f64,
    pub max_bisections: usize,
    pub rvi: RviOptions,
    pub bisection_tol: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            gamma_min: 1e-3,
            gamma_max: 1e1,
            points: 20,
            rel_tol: 1e-3,
            max_bisections: 80,
            rvi: RviOptions::default(),
            bisection_tol: 1e-9,
        }
    }
}

impl CalibrationOptions {
    pub fn grid(&self) -> Vec<f64> {
        let n = self.points.max(2);
        let (a, b) = (self.gamma_min.ln(), self.gamma_max.ln());
        (0..n)
            .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint<T> {
    pub gamma: T,
    pub power: T,
    /// Optimal Lagrangian cost at this γ.
    pub theta: T,
    pub avg_queue: Vec<T>,
    pub drop_rate: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult<T> {
    pub gamma: T,
    pub achieved_power: T,
    pub target_power: T,
    pub mode: CalibrationMode,
    pub solver: SolverMode,
    /// Whether the evaluated power curve is non-increasing in γ.
    pub monotone: bool,
    /// Sweep points first, then root-find evaluations, in evaluation order.
    pub table: Vec<CalibrationPoint<T>>,
}

/// Solves the chosen MDP at `params.gamma` and analyzes its steady state.
/// `warm` carries the value table between full-mode evaluations.
pub fn evaluate_gamma<T: Real>(
    solver: SolverMode,
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    opts: &CalibrationOptions,
    warm: &mut Option<Vec<T>>,
) -> Result<CalibrationPoint<T>> {
    let (theta, steady) = match solver {
        SolverMode::Full => {
            let sol = solve_rvi_from(params, cache, &opts.rvi, warm.as_deref())?;
            if !sol.converged {
                return Err(Error::Numeric(format!(
                    "value iteration did not converge at gamma = {} (span {})",
                    params.gamma, sol.span_residual
                )));
            }
            let st = steady_state_full(&sol, params, cache)?;
            *warm = Some(sol.v.clone());
            (sol.theta, st)
        }
        SolverMode::Decomposed => {
            let sol = solve_decomposed(params, cache, T::lit(opts.bisection_tol))?;
            let st = steady_state_per_stream(&sol, params, cache)?;
            (sol.theta_total(), st)
        }
    };
    Ok(CalibrationPoint {
        gamma: params.gamma,
        power: steady.avg_power,
        theta,
        avg_queue: steady.avg_queue,
        drop_rate: steady.drop_rate,
    })
}

/// Power curve on the options' γ grid.
pub fn power_sweep<T: Real>(
    solver: SolverMode,
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    opts: &CalibrationOptions,
) -> Result<Vec<CalibrationPoint<T>>> {
    let mut warm = None;
    opts.grid()
        .into_iter()
        .map(|g| evaluate_gamma(solver, &params.with_gamma(T::lit(g)), cache, opts, &mut warm))
        .collect()
}

fn is_non_increasing<T: Real>(points: &[CalibrationPoint<T>]) -> bool {
    points
        .windows(2)
        .all(|w| w[1].power <= w[0].power * (T::one() + T::lit(1e-9)) + T::lit(1e-12))
}

/// Finds γ whose stationary average power meets `target`.
///
/// The sweep always runs first. Root-find then bisects (geometrically)
/// between the two sweep points that bracket the target; if the swept curve
/// is not non-increasing the result falls back to the nearest sweep point
/// and reports `mode = Sweep`.
pub fn calibrate_gamma<T: Real>(
    target: T,
    solver: SolverMode,
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    mode: CalibrationMode,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult<T>> {
    if !(target > T::zero()) {
        return Err(Error::Config(format!("target power {target} must be positive")));
    }
    let mut table = power_sweep(solver, params, cache, opts)?;
    let monotone = is_non_increasing(&table);
    let hi = table.iter().fold(T::zero(), |a, p| a.max(p.power));
    let lo = table.iter().fold(T::max_value().unwrap(), |a, p| a.min(p.power));
    if target > hi || target < lo {
        return Err(Error::Range {
            target: target.as_f64(),
            lo: lo.as_f64(),
            hi: hi.as_f64(),
            curve: table.iter().map(|p| (p.gamma.as_f64(), p.power.as_f64())).collect(),
        });
    }
    let nearest = |pts: &[CalibrationPoint<T>]| {
        pts.iter()
            .min_by(|a, b| {
                let da = (a.power - target).abs();
                let db = (b.power - target).abs();
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
            })
            .cloned()
            .expect("non-empty sweep")
    };
    if mode == CalibrationMode::Sweep || !monotone {
        let best = nearest(&table);
        return Ok(CalibrationResult {
            gamma: best.gamma,
            achieved_power: best.power,
            target_power: target,
            mode: CalibrationMode::Sweep,
            solver,
            monotone,
            table,
        });
    }
    let k = table
        .windows(2)
        .position(|w| w[0].power >= target && w[1].power <= target)
        .expect("target inside a monotone curve");
    let mut g_lo = table[k].gamma;
    let mut g_hi = table[k + 1].gamma;
    let mut best = nearest(&table[k..k + 2]);
    let rel = T::lit(opts.rel_tol);
    let mut warm = None;
    let mut steps = 0;
    while (best.power - target).abs() > rel * target && steps < opts.max_bisections {
        let g = (g_lo * g_hi).sqrt();
        let pt = evaluate_gamma(solver, &params.with_gamma(g), cache, opts, &mut warm)?;
        steps += 1;
        if pt.power >= target {
            g_lo = g;
        } else {
            g_hi = g;
        }
        if (pt.power - target).abs() < (best.power - target).abs() {
            best = pt.clone();
        }
        table.push(pt);
    }
    if (best.power - target).abs() > rel * target {
        return Err(Error::Numeric(format!(
            "root-find stalled at gamma = {} with power {} against target {target}",
            best.gamma, best.power
        )));
    }
    Ok(CalibrationResult {
        gamma: best.gamma,
        achieved_power: best.power,
        target_power: target,
        mode: CalibrationMode::RootFind,
        solver,
        monotone,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp_decomposed::StreamSolution;
    use crate::model::StreamProfile;
    use crate::phy::PhyConfig;

    #[test]
    fn hand_birth_death() {
        let w = birth_death_stationary(&[0.02f64, 0.02], &[0.04, 0.04]);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 7.0).abs() < 1e-15);
        assert!((w[2] - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn birth_death_without_service_piles_at_top() {
        let w = birth_death_stationary(&[0.02f64, 0.02, 0.02], &[0.0, 0.0, 0.0]);
        assert_eq!(w, vec![0.0, 0.0, 0.0, 1.0]);
        let w = birth_death_stationary(&[0.0f64, 0.0], &[0.1, 0.1]);
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn tiny_rates_keep_relative_accuracy() {
        let up = [1e-30f64; 4];
        let down = [0.5f64; 4];
        let exact = birth_death_stationary(&up, &down);
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        for q in 0..=4 {
            let mut row = Vec::new();
            let mut stay = 1.0;
            if q < 4 {
                row.push((q + 1, up[q]));
                stay -= up[q];
            }
            if q > 0 {
                row.push((q - 1, down[q - 1]));
                stay -= down[q - 1];
            }
            row.push((q, stay));
            rows.push(row);
        }
        let omega = Kernel { rows }.stationary().unwrap();
        for (a, b) in omega.iter().zip(&exact) {
            assert!((a / b - 1.0).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn band_reduction_matches_dense_solve() {
        // random irreducible kernel on a 3x3 lattice
        let space = StateSpace::new(2, 2);
        let params = ChainParams::new(
            vec![StreamProfile::new(1.0, 0.03, 200.0), StreamProfile::new(1.0, 0.05, 200.0)],
            2,
            1.0,
            0.1,
            0.28,
        )
        .unwrap();
        let departure: Vec<f64> = (0..space.count() * 2).map(|k| 0.01 + 0.007 * (k % 5) as f64).collect();
        let law = JointPolicyLaw {
            space,
            departure,
            power: vec![1.0; space.count()],
        };
        let kernel = law.kernel(&params).unwrap();
        let omega = kernel.stationary().unwrap();
        let n = kernel.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        for (s, row) in kernel.rows.iter().enumerate() {
            for &(t, p) in row {
                a[(t, s)] += p;
            }
        }
        for k in 0..n {
            a[(k, k)] -= 1.0;
        }
        for k in 0..n {
            a[(n - 1, k)] = 1.0;
        }
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let dense = a.lu().solve(&b).unwrap();
        for k in 0..n {
            assert!((dense[k] - omega[k]).abs() < 1e-13, "{k}: {} {}", dense[k], omega[k]);
        }
        assert!(kernel.balance_residual(&omega) < 1e-15);
    }

    #[test]
    fn absorbing_state_takes_all_mass() {
        // 0 -> 1 -> 2 with 2 absorbing; 1 can fall back to 0
        let k = Kernel {
            rows: vec![
                vec![(0, 0.9), (1, 0.1)],
                vec![(0, 0.2), (1, 0.7), (2, 0.1)],
                vec![(2, 1.0)],
            ],
        };
        assert_eq!(k.closed_class_from(0).unwrap(), vec![2]);
        assert_eq!(k.stationary().unwrap(), vec![0.0, 0.0, 1.0]);
        let two = Kernel {
            rows: vec![vec![(1, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![(2, 1.0)]],
        };
        assert!(matches!(two.stationary(), Err(Error::Numeric(_))));
    }

    fn constant_stream_solution(dv: f64) -> DecomposedSolution<f64> {
        DecomposedSolution {
            streams: vec![StreamSolution {
                stream: 0,
                rank: 0,
                theta: 0.0,
                delta_v: vec![0.0, dv, dv],
                gamma: 1.0,
                iterations: 0,
                residual: 0.0,
            }],
            ranks: vec![0],
            gamma: 1.0,
            buffer: 2,
        }
    }

    #[test]
    fn per_stream_matches_joint_on_one_stream() {
        let cache = EigenSampleCache::from_rows(&[vec![4.0f64], vec![1.0]], 0, 0.0).unwrap();
        let params = ChainParams::new(vec![StreamProfile::new(1.0, 0.02, 200.0)], 2, 1.0, 1.0, 0.28).unwrap();
        let sol = constant_stream_solution(2000.0);
        let a = steady_state_per_stream(&sol, &params, &cache).unwrap();
        let law = StreamPolicyLaw::of_decomposed(&sol, &params, &cache);
        let joint = JointPolicyLaw {
            space: StateSpace::new(1, 2),
            departure: law.departure[0].clone(),
            power: law.power[0].clone(),
        };
        let b = steady_state_joint(&joint, &params).unwrap();
        for q in 0..=2 {
            assert!((a.marginals[0][q] - b.marginals[0][q]).abs() < 1e-14);
        }
        assert!((a.avg_power - b.avg_power).abs() < 1e-12);
        assert!(detailed_balance_gap_streams(&a, &law, &params) < 1e-15);
    }

    #[test]
    fn no_traffic_concentrates_on_empty() {
        let cache = EigenSampleCache::generate(&PhyConfig::<f64>::two_by_two(), 500, 3).unwrap();
        let mut params = ChainParams::two_stream_default([1.0, 10.0], 0.1, 0.2831);
        for s in &mut params.streams {
            s.lambda = 0.0;
        }
        let sol = crate::mdp_full::solve_rvi(&params, &cache, &RviOptions::default()).unwrap();
        let st = steady_state_full(&sol, &params, &cache).unwrap();
        let Omega::Joint(w) = &st.omega else { panic!() };
        assert!((w[0] - 1.0).abs() < 1e-14);
        assert_eq!(st.avg_power, 0.0);
        assert!(st.avg_queue.iter().all(|&q| q.abs() < 1e-14));
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = CalibrationOptions::default().grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[19] - 10.0).abs() < 1e-12);
        let r = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-9));
    }
}
