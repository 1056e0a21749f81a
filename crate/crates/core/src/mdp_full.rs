//! Average-cost Bellman equation over the joint queue state `{0..N}^L`,
//! solved by relative value iteration with the water-filling inner step.

use serde::{Deserialize, Serialize};

use crate::cache::EigenSampleCache;
use crate::error::{Error, Result};
use crate::model::{Allocation, ChainParams, ControlAction, JointState, StateSpace};
use crate::phy::ChannelSample;
use crate::scalar::Real;
use crate::waterfill::{phi, sort_assignment, waterfill_power, PhiResult, WaterfillParams};

pub const DEFAULT_STATE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RviOptions {
    /// Stop once the span of `TV - V` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest joint state space the solver accepts.
    pub state_cap: usize,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100_000,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

/// Converged (or best-effort) relative value function and its marginal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullSolution<T> {
    pub n_streams: usize,
    pub buffer: usize,
    /// Optimal average cost per slot.
    pub theta: T,
    /// Relative value per state in lexicographic order, `v[0] = 0`.
    pub v: Vec<T>,
    /// `τ (V(q) - V(q - e_i))` per state and stream, row-major by state.
    pub delta_v: Vec<T>,
    pub gamma: T,
    pub converged: bool,
    pub iterations: usize,
    pub span_residual: T,
}

fn marginal_values<T: Real>(v: &[T], space: &StateSpace, idx: usize, q: &[usize], tau: T) -> Vec<T> {
    (0..space.streams)
        .map(|i| {
            if q[i] > 0 {
                tau * (v[idx] - v[idx - space.stride(i)])
            } else {
                T::zero()
            }
        })
        .collect()
}

/// `(TV)(q)` for every state, not re-pinned.
fn apply_operator<T: Real>(
    v: &[T],
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
) -> Result<Vec<T>> {
    let space = params.space();
    let nbar = params.nbars();
    let arrivals = params.arrival_probs();
    let mut out = Vec::with_capacity(v.len());
    for idx in 0..v.len() {
        let q = space.decode(idx).0;
        let eta = marginal_values(v, &space, idx, &q, params.tau);
        let wf = WaterfillParams::new(eta, nbar.clone(), params.gamma, params.alpha);
        let best = phi(&wf, cache);
        let mut stay = T::one();
        let mut drift = T::zero();
        for i in 0..space.streams {
            let depart = best.mean_rate[i] / nbar[i] * params.tau;
            stay -= arrivals[i] + depart;
            if q[i] < space.buffer {
                drift += arrivals[i] * (v[idx + space.stride(i)] - v[idx]);
            }
        }
        if stay < -T::lit(1e-12) {
            return Err(Error::Config(format!(
                "state {q:?}: arrival plus departure probability exceeds 1 by {}; reduce tau",
                -stay
            )));
        }
        out.push(v[idx] + params.holding_cost(&q) + drift - best.value);
    }
    Ok(out)
}

/// One Bellman backup. Returns the re-pinned table and the cost estimate
/// `(TV)(0)`.
pub fn bellman_backup<T: Real>(
    v: &[T],
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
) -> Result<(Vec<T>, T)> {
    params.validate()?;
    if v.len() != params.space().count() {
        return Err(Error::Config(format!(
            "value table has {} entries, state space has {}",
            v.len(),
            params.space().count()
        )));
    }
    let mut tv = apply_operator(v, params, cache)?;
    let theta = tv[0] - v[0];
    let pin = tv[0];
    for x in &mut tv {
        *x -= pin;
    }
    Ok((tv, theta))
}

pub fn solve_rvi<T: Real>(
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    opts: &RviOptions,
) -> Result<FullSolution<T>> {
    solve_rvi_from(params, cache, opts, None)
}

/// Relative value iteration, optionally warm-started from a previous table.
pub fn solve_rvi_from<T: Real>(
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    opts: &RviOptions,
    start: Option<&[T]>,
) -> Result<FullSolution<T>> {
    params.validate()?;
    if cache.n_streams() != params.n_streams() {
        return Err(Error::Config(format!(
            "cache has {} eigenvalue columns, chain has {} streams",
            cache.n_streams(),
            params.n_streams()
        )));
    }
    let space = params.space();
    let n = space.check_cap(opts.state_cap)?;
    let mut v = match start {
        Some(s) if s.len() == n => {
            let pin = s[0];
            s.iter().map(|&x| x - pin).collect()
        }
        _ => vec![T::zero(); n],
    };
    let tol = T::lit(opts.tol);
    let mut theta = T::zero();
    let mut span = T::max_value().unwrap();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let tv = apply_operator(&v, params, cache)?;
        iterations += 1;
        let (lo, hi) = tv.iter().zip(&v).fold(
            (T::max_value().unwrap(), T::min_value().unwrap()),
            |(lo, hi), (&a, &b)| (lo.min(a - b), hi.max(a - b)),
        );
        span = hi - lo;
        theta = (hi + lo) * T::lit(0.5);
        let pin = tv[0];
        v = tv.into_iter().map(|x| x - pin).collect();
        if !span.is_finite() {
            return Err(Error::Numeric(format!("value iteration diverged at iteration {iterations}")));
        }
        if span < tol {
            converged = true;
            break;
        }
    }
    let mut delta_v = Vec::with_capacity(n * space.streams);
    for idx in 0..n {
        let q = space.decode(idx).0;
        delta_v.extend(marginal_values(&v, &space, idx, &q, params.tau));
    }
    Ok(FullSolution {
        n_streams: space.streams,
        buffer: space.buffer,
        theta,
        v,
        delta_v,
        gamma: params.gamma,
        converged,
        iterations,
        span_residual: span,
    })
}

impl<T: Real> FullSolution<T> {
    pub fn space(&self) -> StateSpace {
        StateSpace::new(self.n_streams, self.buffer)
    }

    pub fn value(&self, q: &[usize]) -> T {
        self.v[self.space().index(q)]
    }

    pub fn delta_v_at(&self, idx: usize) -> &[T] {
        &self.delta_v[idx * self.n_streams..(idx + 1) * self.n_streams]
    }

    pub fn delta_v_of(&self, q: &[usize]) -> &[T] {
        self.delta_v_at(self.space().index(q))
    }

    /// Inner optimum at state `idx` using the stored marginal values.
    pub fn state_phi(&self, idx: usize, params: &ChainParams<T>, cache: &EigenSampleCache<T>) -> PhiResult<T> {
        let wf = WaterfillParams::new(self.delta_v_at(idx).to_vec(), params.nbars(), params.gamma, params.alpha);
        phi(&wf, cache)
    }

    /// Largest absolute residual of the marginal-value form of the Bellman
    /// equation, evaluated from the stored `θ` and `δV` table.
    pub fn bellman_residual(&self, params: &ChainParams<T>, cache: &EigenSampleCache<T>) -> T {
        let space = self.space();
        let mut worst = T::zero();
        for idx in 0..space.count() {
            let q = space.decode(idx).0;
            let mut lhs = params.holding_cost(&q) - self.state_phi(idx, params, cache).value;
            for (i, s) in params.streams.iter().enumerate() {
                if q[i] < space.buffer {
                    lhs += s.lambda * self.delta_v_at(idx + space.stride(i))[i];
                }
            }
            worst = worst.max((lhs - self.theta).abs());
        }
        worst
    }

    /// Number of `(q, i)` pairs with `V(q + e_i) < V(q) - slack`.
    pub fn monotonicity_violations(&self, slack: T) -> usize {
        let space = self.space();
        let mut bad = 0;
        for idx in 0..space.count() {
            let q = space.decode(idx).0;
            for i in 0..space.streams {
                if q[i] < space.buffer && self.v[idx + space.stride(i)] < self.v[idx] - slack {
                    bad += 1;
                }
            }
        }
        bad
    }

    /// Eigen-rank ordering and water-filling powers for queue state `q` on a
    /// channel with descending eigenvalues `eigvals`.
    pub fn allocation(&self, q: &[usize], eigvals: &[T], params: &ChainParams<T>) -> Allocation<T> {
        let dv = self.delta_v_of(q);
        if q.iter().all(|&x| x == 0) {
            return Allocation::idle(self.n_streams);
        }
        let assignment = sort_assignment(dv);
        let wf = WaterfillParams::new(dv.to_vec(), params.nbars(), params.gamma, params.alpha);
        let powers = waterfill_power(&wf, eigvals, &assignment);
        Allocation { assignment, powers }
    }
}

/// Precoder, powers and rates of the optimal policy at `state` on channel `ch`.
pub fn extract_action<T: Real>(
    sol: &FullSolution<T>,
    params: &ChainParams<T>,
    state: &JointState,
    ch: &ChannelSample<T>,
) -> ControlAction<T> {
    let alloc = sol.allocation(&state.0, ch.eigvals.as_slice(), params);
    ControlAction::build(alloc, ch, params.alpha)
}
