//! Slot-by-slot Monte Carlo of the controlled queues over i.i.d. fading,
//! with the optimal, decomposed and two baseline policies.
//!
//! Each slot draws a fresh channel, lets the policy pick powers from the
//! queue state and the channel, and then samples at most one event (one
//! arrival or one departure of one stream) with the probabilities of the
//! embedded chain. The channel and the event draws come from two separate
//! ChaCha streams of the same seed, so different policies run on common
//! random numbers.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::EigenSampleCache;
use crate::error::{Error, Result};
use crate::mdp_decomposed::DecomposedSolution;
use crate::mdp_full::FullSolution;
use crate::model::{ChainParams, StateSpace};
use crate::phy::{mode_rate, sample_eigvals, PhyConfig};
use crate::scalar::{compensated_sum, Real};
use crate::sort_assignment;
use crate::steady::{steady_state_streams, Kernel, Omega, SteadyState, StreamPolicyLaw};

/// Power rule of the Round-Robin baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RrRule {
    /// Constant power on the strongest eigenmode.
    #[default]
    StrongestMode,
    /// Water-filling of the served stream across all eigenmodes at a fixed
    /// water level.
    Waterfill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyHandle<T> {
    Full(FullSolution<T>),
    Decomposed(DecomposedSolution<T>),
    /// Slot `m` serves stream `m mod L` only. `level` is the transmit power
    /// for [`RrRule::StrongestMode`] and the water level for
    /// [`RrRule::Waterfill`].
    RoundRobin { level: T, rule: RrRule },
    /// Fixed water level on statically ranked eigenmodes; zero power for an
    /// empty queue.
    CsitOnly { water_level: T, ranks: Vec<usize> },
}

impl<T: Real> PolicyHandle<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Full(_) => "full",
            Self::Decomposed(_) => "decomposed",
            Self::RoundRobin { .. } => "rr",
            Self::CsitOnly { .. } => "csit",
        }
    }

    fn check(&self, params: &ChainParams<T>) -> Result<()> {
        let l = params.n_streams();
        let ok = match self {
            Self::Full(sol) => sol.n_streams == l && sol.buffer == params.buffer,
            Self::Decomposed(sol) => sol.streams.len() == l && sol.buffer == params.buffer,
            Self::RoundRobin { level, .. } => *level >= T::zero(),
            Self::CsitOnly { water_level, ranks } => {
                *water_level >= T::zero() && ranks.len() == l && ranks.iter().all(|&r| r < l)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{} policy does not fit the chain parameters", self.name())))
        }
    }

    /// Per-stream powers and rates (bits per symbol) for one slot.
    pub fn decide(&self, slot: u64, q: &[usize], eigvals: &[T], params: &ChainParams<T>, powers: &mut [T], rates: &mut [T]) {
        let alpha = params.alpha;
        let l = q.len();
        powers.fill(T::zero());
        rates.fill(T::zero());
        match self {
            Self::Full(sol) => {
                let a = sol.allocation(q, eigvals, params);
                for i in 0..l {
                    powers[i] = a.powers[i];
                    rates[i] = mode_rate(alpha, a.powers[i], eigvals[a.assignment[i]]);
                }
            }
            Self::Decomposed(sol) => {
                let a = sol.allocation(q, eigvals, params);
                for i in 0..l {
                    powers[i] = a.powers[i];
                    rates[i] = mode_rate(alpha, a.powers[i], eigvals[a.assignment[i]]);
                }
            }
            Self::RoundRobin { level, rule } => {
                let i = (slot % l as u64) as usize;
                if q[i] == 0 {
                    return;
                }
                match rule {
                    RrRule::StrongestMode => {
                        powers[i] = *level;
                        rates[i] = mode_rate(alpha, *level, eigvals[0]);
                    }
                    RrRule::Waterfill => {
                        for &xi in eigvals {
                            if xi > T::zero() {
                                let p = (*level - (alpha * xi).recip()).max(T::zero());
                                powers[i] += p;
                                rates[i] += mode_rate(alpha, p, xi);
                            }
                        }
                    }
                }
            }
            Self::CsitOnly { water_level, ranks } => {
                for i in 0..l {
                    let xi = eigvals[ranks[i]];
                    if q[i] > 0 && xi > T::zero() {
                        let p = (*water_level - (alpha * xi).recip()).max(T::zero());
                        powers[i] = p;
                        rates[i] = mode_rate(alpha, p, xi);
                    }
                }
            }
        }
    }
}

/// Empirical metrics of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    pub seed: u64,
    pub slots: u64,
    /// Time-average queue length per stream, sampled at slot start.
    pub avg_queue: Vec<f64>,
    pub avg_power: f64,
    /// `Σ β_i T̄_i`.
    pub weighted_delay: f64,
    pub arrivals: Vec<u64>,
    pub departures: Vec<u64>,
    /// Arrivals lost to a full buffer.
    pub drops: Vec<u64>,
    /// Slot-start occupancy counts, `hist[i][q]`.
    pub hist: Vec<Vec<u64>>,
    /// Joint occupancy counts in lexicographic state order; empty when the
    /// joint space is too large to tabulate.
    pub joint_hist: Vec<u64>,
    /// Slots whose event probabilities summed above one and were rescaled.
    pub clamped: u64,
}

const JOINT_HIST_CAP: usize = 1 << 20;

pub fn channel_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn event_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Simulates `slots` slots from empty queues.
pub fn run_sim<T: Real>(
    policy: &PolicyHandle<T>,
    params: &ChainParams<T>,
    phy: &PhyConfig<T>,
    slots: u64,
    seed: u64,
) -> Result<SimReport> {
    params.validate()?;
    phy.validate()?;
    policy.check(params)?;
    let l = params.n_streams();
    if phy.n_streams != l {
        return Err(Error::Config(format!(
            "physical layer carries {} streams, chain has {l}",
            phy.n_streams
        )));
    }
    let n = params.buffer;
    let space = StateSpace::new(l, n);
    let joint = space.count() <= JOINT_HIST_CAP;
    let arrive: Vec<f64> = params.arrival_probs().iter().map(|p| p.as_f64()).collect();
    let nbar: Vec<f64> = params.nbars().iter().map(|p| p.as_f64()).collect();
    let tau = params.tau.as_f64();

    let mut ch_rng = channel_rng(seed);
    let mut ev_rng = event_rng(seed);
    let mut q = vec![0usize; l];
    let mut powers = vec![T::zero(); l];
    let mut rates = vec![T::zero(); l];
    let mut depart = vec![0.0f64; l];
    let mut queue_sum = vec![0u64; l];
    let mut power_sum = 0.0f64;
    let mut power_comp = 0.0f64;
    let mut arrivals = vec![0u64; l];
    let mut departures = vec![0u64; l];
    let mut drops = vec![0u64; l];
    let mut hist = vec![vec![0u64; n + 1]; l];
    let mut joint_hist = if joint { vec![0u64; space.count()] } else { Vec::new() };
    let mut clamped = 0u64;

    for slot in 0..slots {
        for i in 0..l {
            queue_sum[i] += q[i] as u64;
            hist[i][q[i]] += 1;
        }
        if joint {
            joint_hist[space.index(&q)] += 1;
        }
        let eig = sample_eigvals(phy, &mut ch_rng);
        policy.decide(slot, &q, &eig, params, &mut powers, &mut rates);
        let p_slot = compensated_sum(powers.iter().copied()).as_f64();
        // Kahan accumulation keeps the long-run mean exact to rounding
        let y = p_slot - power_comp;
        let t = power_sum + y;
        power_comp = (t - power_sum) - y;
        power_sum = t;

        let mut total = 0.0;
        for i in 0..l {
            depart[i] = if q[i] > 0 { (rates[i].as_f64() / nbar[i] * tau).min(1.0) } else { 0.0 };
            total += arrive[i] + depart[i];
        }
        if total > 1.0 {
            clamped += 1;
            let room = (1.0 - arrive.iter().sum::<f64>()).max(0.0);
            let dsum: f64 = depart.iter().sum();
            for d in &mut depart {
                *d *= room / dsum;
            }
        }
        let mut u: f64 = ev_rng.random();
        for i in 0..l {
            if u < arrive[i] {
                arrivals[i] += 1;
                if q[i] < n {
                    q[i] += 1;
                } else {
                    drops[i] += 1;
                }
                break;
            }
            u -= arrive[i];
            if u < depart[i] {
                departures[i] += 1;
                q[i] -= 1;
                break;
            }
            u -= depart[i];
        }
    }

    let s = slots.max(1) as f64;
    let avg_queue: Vec<f64> = queue_sum.iter().map(|&x| x as f64 / s).collect();
    let weighted_delay = params
        .streams
        .iter()
        .zip(&avg_queue)
        .map(|(st, &x)| st.beta.as_f64() * x)
        .sum();
    Ok(SimReport {
        policy: policy.name().to_string(),
        seed,
        slots,
        avg_queue,
        avg_power: power_sum / s,
        weighted_delay,
        arrivals,
        departures,
        drops,
        hist,
        joint_hist,
        clamped,
    })
}

/// Independent replications, one per seed, in seed order.
pub fn run_seeds<T: Real>(
    policy: &PolicyHandle<T>,
    params: &ChainParams<T>,
    phy: &PhyConfig<T>,
    slots: u64,
    seeds: &[u64],
) -> Result<Vec<SimReport>> {
    seeds
        .par_iter()
        .map(|&seed| run_sim(policy, params, phy, slots, seed))
        .collect()
}

impl SimReport {
    /// Empirical joint law (or per-stream marginals when no joint table).
    pub fn empirical_joint(&self) -> Vec<f64> {
        let s = self.slots.max(1) as f64;
        self.joint_hist.iter().map(|&c| c as f64 / s).collect()
    }

    pub fn empirical_marginal(&self, stream: usize) -> Vec<f64> {
        let s = self.slots.max(1) as f64;
        self.hist[stream].iter().map(|&c| c as f64 / s).collect()
    }

    /// Total variation distance to an analytic steady state, over the joint
    /// law when available to both sides, else the worst per-stream marginal.
    pub fn total_variation<T: Real>(&self, steady: &SteadyState<T>) -> f64 {
        let tv = |a: &[f64], b: &[T]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y.as_f64()).abs()).sum::<f64>();
        match &steady.omega {
            Omega::Joint(w) if w.len() == self.joint_hist.len() => tv(&self.empirical_joint(), w),
            Omega::PerStream(ws) if !self.joint_hist.is_empty() => {
                // product form of independent marginals
                let l = ws.len();
                let n = ws[0].len() - 1;
                let space = StateSpace::new(l, n);
                let prod: Vec<T> = (0..space.count())
                    .map(|k| {
                        let q = space.decode(k).0;
                        (0..l).fold(T::one(), |a, i| a * ws[i][q[i]])
                    })
                    .collect();
                tv(&self.empirical_joint(), &prod)
            }
            _ => (0..self.hist.len())
                .map(|i| tv(&self.empirical_marginal(i), &steady.marginals[i]))
                .fold(0.0, f64::max),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per stream.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# policy={},seed={},slots={},clamped={}", self.policy, self.seed, self.slots, self.clamped)?;
        writeln!(w, "stream,avg_queue,avg_power,weighted_delay,arrivals,departures,drops")?;
        for i in 0..self.avg_queue.len() {
            writeln!(
                w,
                "{i},{:?},{:?},{:?},{},{},{}",
                self.avg_queue[i], self.avg_power, self.weighted_delay, self.arrivals[i], self.departures[i], self.drops[i]
            )?;
        }
        Ok(())
    }

    /// Occupancy histogram, one column per stream.
    pub fn write_histogram<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.hist.len()).map(|i| format!("stream{i}")).collect();
        writeln!(w, "q,{}", cols.join(","))?;
        for q in 0..self.hist.first().map_or(0, Vec::len) {
            let counts: Vec<String> = self.hist.iter().map(|h| h[q].to_string()).collect();
            writeln!(w, "{q},{}", counts.join(","))?;
        }
        Ok(())
    }
}

fn bisect_increasing<F: FnMut(f64) -> Result<f64>>(mut f: F, target: f64, what: &str) -> Result<f64> {
    let (mut lo, mut hi) = (1e-6f64, 1.0f64);
    let mut f_hi = f(hi)?;
    let mut grown = 0;
    while f_hi < target {
        hi *= 4.0;
        f_hi = f(hi)?;
        grown += 1;
        if grown > 40 {
            return Err(Error::Range {
                target,
                lo: 0.0,
                hi: f_hi,
                curve: vec![(hi, f_hi)],
            });
        }
    }
    while f(lo)? > target {
        lo *= 1e-3;
        if lo < 1e-300 {
            return Err(Error::Numeric(format!("{what}: target {target} below the reachable power")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    let got = f(x)?;
    if (got - target).abs() > 1e-6 * target {
        return Err(Error::Numeric(format!("{what}: reached {got} against target {target}")));
    }
    Ok(x)
}

/// Round-Robin at constant power `power_budget` on the strongest mode.
pub fn round_robin_policy<T: Real>(power_budget: T) -> Result<PolicyHandle<T>> {
    if !(power_budget > T::zero()) {
        return Err(Error::Config(format!("power budget {power_budget} must be positive")));
    }
    Ok(PolicyHandle::RoundRobin {
        level: power_budget,
        rule: RrRule::StrongestMode,
    })
}

/// Cache mean of `Σ_i (w - 1/(α ξ_[rank i]))⁺`, all queues nonempty.
fn csit_cache_power<T: Real>(w: T, alpha: T, cache: &EigenSampleCache<T>) -> T {
    (0..cache.n_streams()).fold(T::zero(), |a, r| a + cache.column(r).waterfill_moments(w, alpha).0)
}

/// CSIT-only baseline whose water level makes the cache-mean total power,
/// with every queue backlogged, equal to `power_budget`.
pub fn csit_only_policy<T: Real>(
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    power_budget: T,
) -> Result<PolicyHandle<T>> {
    if !(power_budget > T::zero()) {
        return Err(Error::Config(format!("power budget {power_budget} must be positive")));
    }
    if (0..cache.n_streams()).all(|r| !(cache.column(r).mean() > T::zero())) {
        return Err(Error::Range {
            target: power_budget.as_f64(),
            lo: 0.0,
            hi: 0.0,
            curve: Vec::new(),
        });
    }
    let w = bisect_increasing(
        |w| Ok(csit_cache_power(T::lit(w), params.alpha, cache).as_f64()),
        power_budget.as_f64(),
        "csit-only calibration",
    )?;
    Ok(PolicyHandle::CsitOnly {
        water_level: T::lit(w),
        ranks: sort_assignment(&params.betas()),
    })
}

/// Long-run queue law and power of a baseline policy, computed exactly from
/// its per-stream chains.
pub fn baseline_steady_state<T: Real>(
    policy: &PolicyHandle<T>,
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
) -> Result<SteadyState<T>> {
    policy.check(params)?;
    let l = params.n_streams();
    let n = params.buffer;
    match policy {
        PolicyHandle::CsitOnly { water_level, ranks } => {
            let mut law = StreamPolicyLaw {
                departure: Vec::with_capacity(l),
                power: Vec::with_capacity(l),
            };
            for (i, s) in params.streams.iter().enumerate() {
                let (p, r) = cache.column(ranks[i]).waterfill_moments(*water_level, params.alpha);
                let mut d = vec![r / s.nbar * params.tau; n + 1];
                let mut pw = vec![p; n + 1];
                d[0] = T::zero();
                pw[0] = T::zero();
                law.departure.push(d);
                law.power.push(pw);
            }
            steady_state_streams(&law, params)
        }
        PolicyHandle::RoundRobin { level, rule } => {
            let (p_serve, r_serve) = match rule {
                RrRule::StrongestMode => {
                    let col = cache.column(0);
                    let m = T::from_usize(col.len()).unwrap();
                    let rate = compensated_sum(cache.rows().map(|row| mode_rate(params.alpha, *level, row[0]))) / m;
                    (*level, rate)
                }
                RrRule::Waterfill => (0..l).fold((T::zero(), T::zero()), |(p, r), k| {
                    let (pk, rk) = cache.column(k).waterfill_moments(*level, params.alpha);
                    (p + pk, r + rk)
                }),
            };
            round_robin_chains(params, p_serve, r_serve)
        }
        _ => Err(Error::Config("baseline analysis applies to rr and csit policies".into())),
    }
}

/// Per-stream periodic chains of Round-Robin; stream `i` is served in phase
/// `i` of every `L`-slot cycle with mean rate `r_serve` and power `p_serve`
/// whenever nonempty.
fn round_robin_chains<T: Real>(params: &ChainParams<T>, p_serve: T, r_serve: T) -> Result<SteadyState<T>> {
    let l = params.n_streams();
    let n = params.buffer;
    let lf = T::from_usize(l).unwrap();
    let mut marginals = Vec::with_capacity(l);
    let mut avg_queue = Vec::with_capacity(l);
    let mut drop_rate = Vec::with_capacity(l);
    let mut power = T::zero();
    let mut residual = T::zero();
    for (i, s) in params.streams.iter().enumerate() {
        let a = s.lambda * params.tau;
        let d = r_serve / s.nbar * params.tau;
        if a + d > T::one() + T::lit(1e-12) {
            return Err(Error::Config(format!("stream {i}: arrival plus service probability exceeds 1")));
        }
        let step = |pi: &[T], served: bool| -> Vec<T> {
            let mut out = vec![T::zero(); n + 1];
            for q in 0..=n {
                let mut stay = T::one();
                if q < n {
                    out[q + 1] += pi[q] * a;
                    stay -= a;
                }
                if served && q > 0 {
                    out[q - 1] += pi[q] * d;
                    stay -= d;
                }
                out[q] += pi[q] * stay;
            }
            out
        };
        // cycle kernel from phase 0, row by row
        let rows = (0..=n)
            .map(|q| {
                let mut pi = vec![T::zero(); n + 1];
                pi[q] = T::one();
                for k in 0..l {
                    pi = step(&pi, k == i);
                }
                pi.into_iter().enumerate().filter(|(_, p)| *p > T::zero()).collect()
            })
            .collect();
        let kernel = Kernel { rows };
        let pi0 = if d > T::zero() && a > T::zero() {
            kernel.stationary()?
        } else {
            // one-directional chain: all mass at the absorbing end
            let mut e = vec![T::zero(); n + 1];
            e[if a > T::zero() { n } else { 0 }] = T::one();
            e
        };
        residual = residual.max(kernel.balance_residual(&pi0));
        let mut phase = pi0;
        let mut marginal = vec![T::zero(); n + 1];
        for k in 0..l {
            for q in 0..=n {
                marginal[q] += phase[q] / lf;
            }
            if k == i {
                power += p_serve * (T::one() - phase[0]) / lf;
            }
            phase = step(&phase, k == i);
        }
        avg_queue.push(compensated_sum(
            marginal.iter().enumerate().map(|(q, &w)| T::from_usize(q).unwrap() * w),
        ));
        drop_rate.push(marginal[n]);
        marginals.push(marginal);
    }
    Ok(SteadyState {
        omega: Omega::PerStream(marginals.clone()),
        marginals,
        avg_queue,
        avg_power: power,
        drop_rate,
        balance_residual: residual,
    })
}

/// Round-Robin whose long-run average power equals `target`.
pub fn round_robin_matched<T: Real>(
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    rule: RrRule,
    target: T,
) -> Result<PolicyHandle<T>> {
    if !(target > T::zero()) {
        return Err(Error::Config(format!("power target {target} must be positive")));
    }
    let level = bisect_increasing(
        |x| {
            let h = PolicyHandle::RoundRobin { level: T::lit(x), rule };
            Ok(baseline_steady_state(&h, params, cache)?.avg_power.as_f64())
        },
        target.as_f64(),
        "round-robin calibration",
    )?;
    Ok(PolicyHandle::RoundRobin {
        level: T::lit(level),
        rule,
    })
}

/// CSIT-only whose long-run average power equals `target`.
pub fn csit_only_matched<T: Real>(
    params: &ChainParams<T>,
    cache: &EigenSampleCache<T>,
    target: T,
) -> Result<PolicyHandle<T>> {
    if !(target > T::zero()) {
        return Err(Error::Config(format!("power target {target} must be positive")));
    }
    let ranks = sort_assignment(&params.betas());
    let w = bisect_increasing(
        |x| {
            let h = PolicyHandle::CsitOnly {
                water_level: T::lit(x),
                ranks: ranks.clone(),
            };
            Ok(baseline_steady_state(&h, params, cache)?.avg_power.as_f64())
        },
        target.as_f64(),
        "csit-only calibration",
    )?;
    Ok(PolicyHandle::CsitOnly {
        water_level: T::lit(w),
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ChainParams<f64> {
        ChainParams::two_stream_default([1.0, 10.0], 0.05, 0.2831)
    }

    #[test]
    fn zero_power_fills_buffers() {
        let p = params();
        let idle = PolicyHandle::CsitOnly {
            water_level: 0.0,
            ranks: vec![1, 0],
        };
        let r = run_sim(&idle, &p, &PhyConfig::two_by_two(), 20_000, 3).unwrap();
        assert_eq!(r.avg_power, 0.0);
        assert!(r.avg_queue.iter().all(|&x| x > 3.9 && x <= 4.0));
        assert_eq!(r.departures, vec![0, 0]);
        assert!(r.hist.iter().all(|h| h.iter().sum::<u64>() == 20_000));
    }

    #[test]
    fn same_seed_same_report() {
        let p = params();
        let rr = round_robin_policy(2.0).unwrap();
        let phy = PhyConfig::two_by_two();
        assert_eq!(run_sim(&rr, &p, &phy, 5000, 9).unwrap(), run_sim(&rr, &p, &phy, 5000, 9).unwrap());
        assert_ne!(run_sim(&rr, &p, &phy, 5000, 9).unwrap(), run_sim(&rr, &p, &phy, 5000, 10).unwrap());
    }

    #[test]
    fn round_robin_serves_in_turn() {
        let p = params();
        let rr = round_robin_policy(2.0f64).unwrap();
        let mut pw = [0.0; 2];
        let mut rt = [0.0; 2];
        rr.decide(0, &[1, 1], &[3.0, 1.0], &p, &mut pw, &mut rt);
        assert_eq!(pw, [2.0, 0.0]);
        rr.decide(1, &[1, 1], &[3.0, 1.0], &p, &mut pw, &mut rt);
        assert_eq!(pw, [0.0, 2.0]);
        rr.decide(2, &[0, 1], &[3.0, 1.0], &p, &mut pw, &mut rt);
        assert_eq!(pw, [0.0, 0.0]);
        assert!((rt[0] - 0.0).abs() == 0.0);
    }

    #[test]
    fn csit_only_single_mode() {
        let p = params();
        let csit = PolicyHandle::CsitOnly {
            water_level: 1.0,
            ranks: vec![0, 1],
        };
        let mut pw = [0.0; 2];
        let mut rt = [0.0; 2];
        csit.decide(0, &[2, 2], &[5.0, 0.0], &p, &mut pw, &mut rt);
        assert!(pw[0] > 0.0 && pw[1] == 0.0);
    }

    #[test]
    fn csit_only_calibration_identity() {
        let cache = EigenSampleCache::generate(&PhyConfig::two_by_two(), 5000, 2).unwrap();
        let p = params();
        let h = csit_only_policy(&p, &cache, 3.0).unwrap();
        let PolicyHandle::CsitOnly { water_level, .. } = h else { panic!() };
        assert!((csit_cache_power(water_level, p.alpha, &cache) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn round_robin_chain_matches_simulation() {
        let phy = PhyConfig::two_by_two();
        let cache = EigenSampleCache::generate(&phy, 20_000, 4).unwrap();
        let p = params();
        let rr = round_robin_policy(1.0).unwrap();
        let st = baseline_steady_state(&rr, &p, &cache).unwrap();
        let sim = run_sim(&rr, &p, &phy, 400_000, 1).unwrap();
        for i in 0..2 {
            let rel = (sim.avg_queue[i] - st.avg_queue[i]).abs() / st.avg_queue[i];
            assert!(rel < 0.08, "stream {i}: {} vs {}", sim.avg_queue[i], st.avg_queue[i]);
        }
        assert!((sim.avg_power - st.avg_power).abs() / st.avg_power < 0.08);
        assert!(sim.avg_power <= 1.0);
    }

    #[test]
    fn matched_baselines_hit_target() {
        let cache = EigenSampleCache::generate(&PhyConfig::two_by_two(), 5000, 2).unwrap();
        let p = params();
        for h in [
            round_robin_matched(&p, &cache, RrRule::StrongestMode, 0.5).unwrap(),
            round_robin_matched(&p, &cache, RrRule::Waterfill, 0.5).unwrap(),
            csit_only_matched(&p, &cache, 0.5).unwrap(),
        ] {
            let st = baseline_steady_state(&h, &p, &cache).unwrap();
            assert!((st.avg_power - 0.5).abs() < 1e-9, "{}", st.avg_power);
            assert!(st.balance_residual < 1e-12);
        }
    }
}
