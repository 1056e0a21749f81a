//! Closed-form water-filling over the eigenmodes and the expected per-state
//! value `φ(η)` of the inner power optimization.

use serde::{Deserialize, Serialize};

use crate::cache::{ColumnStats, EigenSampleCache};
use crate::phy::mode_rate;
use crate::scalar::{compensated_sum, Real};

/// Inputs of one water-filling problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterfillParams<T> {
    /// Marginal value of serving one packet of each stream.
    pub eta: Vec<T>,
    /// Mean packet size per stream, bits.
    pub nbar: Vec<T>,
    /// Power price.
    pub gamma: T,
    /// SINR gap factor.
    pub alpha: T,
}

impl<T: Real> WaterfillParams<T> {
    pub fn new(eta: Vec<T>, nbar: Vec<T>, gamma: T, alpha: T) -> Self {
        debug_assert_eq!(eta.len(), nbar.len());
        Self {
            eta,
            nbar,
            gamma,
            alpha,
        }
    }

    pub fn n_streams(&self) -> usize {
        self.eta.len()
    }

    /// `η_i / (N̄_i γ ln 2)`, with negative marginal values treated as zero.
    pub fn water_level(&self, stream: usize) -> T {
        water_level(self.eta[stream], self.nbar[stream], self.gamma)
    }
}

/// Water level of a mode whose objective is `η/N̄ log₂(1 + α p ξ) - γ p`;
/// the `ln 2` comes from differentiating the base-2 logarithm.
#[inline]
pub fn water_level<T: Real>(eta: T, nbar: T, gamma: T) -> T {
    eta.max(T::zero()) / (nbar * gamma * T::lit(std::f64::consts::LN_2))
}

/// Expected optimum of the per-state power problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiResult<T> {
    pub value: T,
    /// Expected total power at the optimizer.
    pub mean_power: T,
    /// Expected rate of each stream, bits per symbol.
    pub mean_rate: Vec<T>,
}

impl<T: Real> PhiResult<T> {
    /// `Σ_i mean_rate_i η_i / N̄_i - γ mean_power`.
    pub fn recompute_value(&self, params: &WaterfillParams<T>) -> T {
        let gain = (0..params.n_streams()).fold(T::zero(), |acc, i| {
            acc + self.mean_rate[i] * params.eta[i].max(T::zero()) / params.nbar[i]
        });
        gain - params.gamma * self.mean_power
    }

    /// Mean service rate of each stream in packets per channel use.
    pub fn service_rates(&self, nbar: &[T]) -> Vec<T> {
        self.mean_rate.iter().zip(nbar).map(|(&r, &n)| r / n).collect()
    }
}

/// Eigen-rank (0 = largest) given to each stream: the stream with the k-th
/// largest `η` receives rank k, equal values resolved by lower stream index.
pub fn sort_assignment<T: Real>(eta: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..eta.len()).collect();
    order.sort_by(|&a, &b| {
        eta[b]
            .partial_cmp(&eta[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rank = vec![0; eta.len()];
    for (r, &stream) in order.iter().enumerate() {
        rank[stream] = r;
    }
    rank
}

/// Per-stream power `(η_i/(N̄_i γ) - 1/(α ξ_[rank(i)]))⁺` for one channel.
pub fn waterfill_power<T: Real>(
    params: &WaterfillParams<T>,
    eigvals_sorted: &[T],
    assignment: &[usize],
) -> Vec<T> {
    (0..params.n_streams())
        .map(|i| {
            let xi = eigvals_sorted[assignment[i]];
            let w = params.water_level(i);
            if w > T::zero() && xi > T::zero() {
                (w - (params.alpha * xi).recip()).max(T::zero())
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Objective `Σ_i η_i/N̄_i log₂(1 + α p_i ξ_[rank(i)]) - γ p_i` for one channel.
pub fn row_objective<T: Real>(
    params: &WaterfillParams<T>,
    eigvals_sorted: &[T],
    assignment: &[usize],
    powers: &[T],
) -> T {
    (0..params.n_streams()).fold(T::zero(), |acc, i| {
        let r = mode_rate(params.alpha, powers[i], eigvals_sorted[assignment[i]]);
        acc + params.eta[i].max(T::zero()) / params.nbar[i] * r - params.gamma * powers[i]
    })
}

/// `φ(η)`: the optimum averaged over every cached channel, with the
/// same-order eigen assignment. The assignment is identical for all rows, so
/// each stream reduces to one column functional.
pub fn phi<T: Real>(params: &WaterfillParams<T>, cache: &EigenSampleCache<T>) -> PhiResult<T> {
    assert_eq!(params.n_streams(), cache.n_streams(), "cache dimension mismatch");
    let assignment = sort_assignment(&params.eta);
    let mut mean_rate = Vec::with_capacity(params.n_streams());
    let mut mean_power = T::zero();
    let mut value = T::zero();
    for (i, &rank) in assignment.iter().enumerate() {
        let (p, r) = cache
            .column(rank)
            .waterfill_moments(params.water_level(i), params.alpha);
        value += params.eta[i].max(T::zero()) / params.nbar[i] * r - params.gamma * p;
        mean_power += p;
        mean_rate.push(r);
    }
    PhiResult {
        value,
        mean_power,
        mean_rate,
    }
}

/// Row-by-row evaluation of `φ(η)`; slower reference for [`phi`].
pub fn phi_by_rows<T: Real>(params: &WaterfillParams<T>, cache: &EigenSampleCache<T>) -> PhiResult<T> {
    let l = params.n_streams();
    let assignment = sort_assignment(&params.eta);
    let m = T::from_usize(cache.n_rows()).unwrap();
    let per_row: Vec<(Vec<T>, T)> = cache
        .rows()
        .map(|row| {
            let p = waterfill_power(params, row, &assignment);
            let rates = (0..l)
                .map(|i| mode_rate(params.alpha, p[i], row[assignment[i]]))
                .collect();
            (rates, compensated_sum(p.iter().copied()))
        })
        .collect();
    let mean_power = compensated_sum(per_row.iter().map(|(_, p)| *p)) / m;
    let mean_rate: Vec<T> = (0..l)
        .map(|i| compensated_sum(per_row.iter().map(|(r, _)| r[i])) / m)
        .collect();
    let value = (0..l).fold(T::zero(), |acc, i| {
        acc + params.eta[i].max(T::zero()) / params.nbar[i] * mean_rate[i]
    }) - params.gamma * mean_power;
    PhiResult {
        value,
        mean_power,
        mean_rate,
    }
}

/// One-stream `φ̃(y)` on a fixed eigenvalue column; zero for `y ≤ 0`.
pub fn phi_1d<T: Real>(y: T, nbar: T, gamma: T, alpha: T, column: &ColumnStats<T>) -> PhiResult<T> {
    let (p, r) = column.waterfill_moments(water_level(y, nbar, gamma), alpha);
    PhiResult {
        value: y.max(T::zero()) / nbar * r - gamma * p,
        mean_power: p,
        mean_rate: vec![r],
    }
}
