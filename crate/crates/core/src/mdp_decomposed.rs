//! Low-complexity solver: with the eigen-ranks fixed by the delay weights,
//! the joint problem splits into one birth–death MDP per stream, each
//! solved by a forward recursion on the marginal values and a bisection on
//! the per-stream average cost.

use serde::{Deserialize, Serialize};

use crate::cache::{ColumnStats, EigenSampleCache};
use crate::error::{Error, Result};
use crate::model::{Allocation, ChainParams, ControlAction, JointState, StreamProfile};
use crate::phy::ChannelSample;
use crate::scalar::Real;
use crate::waterfill::{phi_1d, sort_assignment, water_level};

pub const DEFAULT_BISECTION_TOL: f64 = 1e-9;
const MAX_BISECTIONS: usize = 200;
const MAX_EXPANSIONS: usize = 64;

/// Solution of one stream's subproblem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSolution<T> {
    pub stream: usize,
    /// Static eigen-rank of this stream (0 = strongest).
    pub rank: usize,
    /// Average cost per slot θ_i*.
    pub theta: T,
    /// `δV(q)` for `q = 0..=N`, with `δV(0) = 0`.
    pub delta_v: Vec<T>,
    pub gamma: T,
    pub iterations: usize,
    /// `|f(θ*) - N|` at the returned root.
    pub residual: T,
}

/// Everything a single stream's recursion needs.
#[derive(Debug, Clone, Copy)]
pub struct StreamProblem<'a, T: Real> {
    pub profile: &'a StreamProfile<T>,
    pub buffer: usize,
    pub gamma: T,
    pub alpha: T,
    pub column: &'a ColumnStats<T>,
}

impl<T: Real> StreamProblem<'_, T> {
    fn phi(&self, y: T) -> T {
        phi_1d(y, self.profile.nbar, self.gamma, self.alpha, self.column).value
    }

    /// `δV(1..=N)` for a trial cost `theta`.
    pub fn forward_recursion(&self, theta: T) -> Vec<T> {
        let lambda = self.profile.lambda;
        let mut out = Vec::with_capacity(self.buffer);
        let mut dv = theta / lambda;
        out.push(dv);
        for q in 1..self.buffer {
            let q = T::from_usize(q).unwrap();
            dv = (theta + self.phi(dv) - self.profile.beta * q) / lambda;
            out.push(dv);
        }
        out
    }

    /// `f(θ) = (φ̃(δV(N, θ)) + θ) / β`.
    pub fn f_value(&self, theta: T) -> T {
        let last = *self.forward_recursion(theta).last().expect("buffer >= 1");
        (self.phi(last) + theta) / self.profile.beta
    }

    fn check(&self) -> Result<()> {
        if !(self.profile.lambda > T::zero()) {
            return Err(Error::Config("decomposed solver needs a positive arrival rate".into()));
        }
        if self.buffer == 0 {
            return Err(Error::Config("buffer size must be at least 1".into()));
        }
        Ok(())
    }

    /// Bisection for `f(θ) = N` on `[0, βN]`, expanding upward if needed.
    pub fn solve(&self, tol: T) -> Result<(T, usize, T)> {
        let hi = self.profile.beta * T::from_usize(self.buffer).unwrap();
        self.solve_in(T::zero(), hi, tol)
    }

    /// Bisection from an explicit starting bracket.
    pub fn solve_in(&self, lo: T, hi: T, tol: T) -> Result<(T, usize, T)> {
        self.check()?;
        let target = T::from_usize(self.buffer).unwrap();
        let mut lo = lo.max(T::zero());
        let mut hi = hi.max(lo + T::eps());
        let mut f_lo = self.f_value(lo);
        if f_lo > target {
            // f(0) = 0, so the origin always lies below the root
            lo = T::zero();
            f_lo = T::zero();
        }
        let mut f_hi = self.f_value(hi);
        let mut grown = 0;
        while f_hi < target && grown < MAX_EXPANSIONS {
            hi *= T::lit(2.0);
            f_hi = self.f_value(hi);
            grown += 1;
        }
        if !(f_lo <= target && f_hi >= target) {
            return Err(Error::Config(format!(
                "f(theta) does not straddle N = {target} on [{lo}, {hi}] (f = {f_lo}, {f_hi})"
            )));
        }
        let mut best = if (f_lo - target).abs() <= (f_hi - target).abs() {
            (lo, (f_lo - target).abs())
        } else {
            (hi, (f_hi - target).abs())
        };
        let mut iterations = 0;
        while best.1 > tol && iterations < MAX_BISECTIONS {
            let mid = (lo + hi) * T::lit(0.5);
            if !(mid > lo && mid < hi) {
                break;
            }
            iterations += 1;
            let f = self.f_value(mid);
            let err = (f - target).abs();
            if err < best.1 {
                best = (mid, err);
            }
            if f < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((best.0, iterations, best.1))
    }

    /// Residuals of the one-dimensional Bellman equation in value form,
    /// `θ + V(q) = βq + γ p̄ + τλ V(q+1 ∧ N) + τμ̄ V((q-1)⁺) + (1 - τλ - τμ̄) V(q)`,
    /// for `q = 0..=N`, with `V` rebuilt from the marginal values.
    pub fn value_form_residuals(&self, theta: T, delta_v: &[T], tau: T) -> Vec<T> {
        let n = self.buffer;
        let mut v = vec![T::zero(); n + 1];
        for q in 1..=n {
            v[q] = v[q - 1] + delta_v[q] / tau;
        }
        let lambda = self.profile.lambda;
        (0..=n)
            .map(|q| {
                let res = phi_1d(delta_v[q], self.profile.nbar, self.gamma, self.alpha, self.column);
                let mu = if q > 0 { res.mean_rate[0] / self.profile.nbar } else { T::zero() };
                let power = if q > 0 { res.mean_power } else { T::zero() };
                let up = v[(q + 1).min(n)];
                let down = v[q.saturating_sub(1)];
                let rhs = self.profile.beta * T::from_usize(q).unwrap()
                    + self.gamma * power
                    + tau * lambda * up
                    + tau * mu * down
                    + (T::one() - tau * lambda - tau * mu) * v[q];
                (theta + v[q] - rhs).abs()
            })
            .collect()
    }
}

/// One-stream solve on an explicit eigenvalue column.
pub fn solve_theta<T: Real>(
    profile: &StreamProfile<T>,
    buffer: usize,
    gamma: T,
    alpha: T,
    column: &ColumnStats<T>,
    tol: T,
) -> Result<StreamSolution<T>> {
    let problem = StreamProblem {
        profile,
        buffer,
        gamma,
        alpha,
        column,
    };
    let (theta, iterations, residual) = problem.solve(tol)?;
    let mut delta_v = Vec::with_capacity(buffer + 1);
    delta_v.push(T::zero());
    delta_v.extend(problem.forward_recursion(theta));
    Ok(StreamSolution {
        stream: 0,
        rank: 0,
        theta,
        delta_v,
        gamma,
        iterations,
        residual,
    })
}

/// Per-stream solutions with the static rank assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedSolution<T> {
    pub streams: Vec<StreamSolution<T>>,
    /// Eigen-rank of each stream, ordered by delay weight.
    pub ranks: Vec<usize>,
    pub gamma: T,
    pub buffer: usize,
}

/// Solves all `L` subproblems; stream `i` uses the eigenvalue column of its
/// weight rank.
pub fn solve_decomposed<T: Real>(
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    tol: T,
) -> Result<DecomposedSolution<T>> {
    params.validate()?;
    if cache.n_streams() != params.n_streams() {
        return Err(Error::Config(format!(
            "cache has {} eigenvalue columns, chain has {} streams",
            cache.n_streams(),
            params.n_streams()
        )));
    }
    let ranks = sort_assignment(&params.betas());
    let streams = params
        .streams
        .iter()
        .enumerate()
        .map(|(i, profile)| {
            let mut s = solve_theta(profile, params.buffer, params.gamma, params.alpha, cache.column(ranks[i]), tol)?;
            s.stream = i;
            s.rank = ranks[i];
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecomposedSolution {
        streams,
        ranks,
        gamma: params.gamma,
        buffer: params.buffer,
    })
}

impl<T: Real> DecomposedSolution<T> {
    /// `Σ_i θ_i*`.
    pub fn theta_total(&self) -> T {
        self.streams.iter().fold(T::zero(), |a, s| a + s.theta)
    }

    /// Static ranks and `(δV_i(q_i)/(γ N̄_i) - 1/(α ξ_[rank(i)]))⁺` powers.
    pub fn allocation(&self, q: &[usize], eigvals: &[T], params: &ChainParams<T>) -> Allocation<T> {
        let powers = self
            .streams
            .iter()
            .zip(&params.streams)
            .map(|(s, prof)| {
                let qi = q[s.stream];
                let xi = eigvals[s.rank];
                if qi == 0 || !(xi > T::zero()) {
                    return T::zero();
                }
                let w = water_level(s.delta_v[qi], prof.nbar, params.gamma);
                (w - (params.alpha * xi).recip()).max(T::zero())
            })
            .collect();
        Allocation {
            assignment: self.ranks.clone(),
            powers,
        }
    }
}

pub fn decomposed_policy<T: Real>(
    sol: &DecomposedSolution<T>,
    params: &ChainParams<T>,
    state: &JointState,
    ch: &ChannelSample<T>,
) -> ControlAction<T> {
    let alloc = sol.allocation(&state.0, ch.eigvals.as_slice(), params);
    ControlAction::build(alloc, ch, params.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::PhyConfig;

    fn column() -> ColumnStats<f64> {
        let cache = EigenSampleCache::generate(&PhyConfig::two_by_two(), 3000, 5).unwrap();
        cache.column(0).clone()
    }

    fn problem<'a>(profile: &'a StreamProfile<f64>, col: &'a ColumnStats<f64>, buffer: usize) -> StreamProblem<'a, f64> {
        StreamProblem {
            profile,
            buffer,
            gamma: 0.05,
            alpha: 0.2831,
            column: col,
        }
    }

    #[test]
    fn recursion_at_zero_cost() {
        let col = column();
        let prof = StreamProfile::new(2.0, 0.02, 200.0);
        let p = problem(&prof, &col, 4);
        let dv = p.forward_recursion(0.0);
        assert_eq!(dv[0], 0.0);
        assert!((dv[1] - (-2.0 / 0.02)).abs() < 1e-9);
        assert_eq!(p.f_value(0.0), 0.0);
    }

    #[test]
    fn first_step_is_theta_over_lambda() {
        let col = column();
        let prof = StreamProfile::new(2.0, 0.02, 200.0);
        let p = problem(&prof, &col, 4);
        assert!((p.forward_recursion(0.04)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_identity_at_root() {
        let col = column();
        let prof = StreamProfile::new(10.0, 0.02, 200.0);
        let sol = solve_theta(&prof, 4, 0.05, 0.2831, &col, 1e-9).unwrap();
        assert!(sol.residual <= 1e-9);
        let phi_n = phi_1d(sol.delta_v[4], 200.0, 0.05, 0.2831, &col).value;
        assert!((10.0 * 4.0 - phi_n - sol.theta).abs() < 1e-8);
        // losses at a full buffer are free, so δV need not rise with q
        assert!(sol.delta_v.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn f_strictly_increasing() {
        let col = column();
        let prof = StreamProfile::new(1.0, 0.02, 200.0);
        let p = problem(&prof, &col, 4);
        let fs: Vec<f64> = (0..50).map(|k| p.f_value(0.1 * k as f64)).collect();
        assert!(fs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn different_brackets_same_root() {
        let col = column();
        let prof = StreamProfile::new(1.0, 0.02, 200.0);
        let p = problem(&prof, &col, 4);
        let (a, _, _) = p.solve(1e-9).unwrap();
        let (b, _, _) = p.solve_in(0.3, 0.31, 1e-9).unwrap();
        let (c, _, _) = p.solve_in(1e-3, 100.0, 1e-9).unwrap();
        assert!((a - b).abs() < 1e-8 && (a - c).abs() < 1e-8, "{a} {b} {c}");
    }

    #[test]
    fn value_form_holds_at_every_state() {
        let col = column();
        let prof = StreamProfile::new(10.0, 0.02, 200.0);
        let sol = solve_theta(&prof, 6, 0.05, 0.2831, &col, 1e-9).unwrap();
        let p = problem(&prof, &col, 6);
        let r = p.value_form_residuals(sol.theta, &sol.delta_v, 1.0);
        assert!(r.iter().all(|&x| x < 1e-7), "{r:?}");
    }

    #[test]
    fn zero_arrival_rate_rejected() {
        let col = column();
        let prof = StreamProfile::new(1.0, 0.0, 200.0);
        assert!(solve_theta(&prof, 4, 0.05, 0.28, &col, 1e-9).is_err());
    }

    #[test]
    fn policy_uses_weight_order() {
        let cache = EigenSampleCache::generate(&PhyConfig::two_by_two(), 2000, 5).unwrap();
        let params = ChainParams::two_stream_default([1.0, 10.0], 0.05, 0.2831);
        let sol = solve_decomposed(&params, &cache, 1e-9).unwrap();
        assert_eq!(sol.ranks, vec![1, 0]);
        let idle = sol.allocation(&[0, 0], &[3.0, 1.0], &params);
        assert_eq!(idle.powers, vec![0.0, 0.0]);
        for q in 1..=4 {
            let a = sol.allocation(&[q, q], &[3.0, 1.0], &params);
            let w: f64 = water_level(sol.streams[1].delta_v[q], 200.0, 0.05);
            assert!((a.powers[1] - (w - 1.0 / (0.2831 * 3.0)).max(0.0)).abs() < 1e-12);
            assert_eq!(a.assignment, vec![1, 0]);
        }
    }
}
