//! Queue-side model shared by the solvers, the analysis and the simulator.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::{mode_rate, ChannelSample, CMatrix};
use crate::scalar::Real;

/// Traffic and weighting of one data stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamProfile<T> {
    /// Delay weight β.
    pub beta: T,
    /// Mean arrival rate, packets per channel use.
    pub lambda: T,
    /// Mean packet size, bits.
    pub nbar: T,
}

impl<T: Real> StreamProfile<T> {
    pub fn new(beta: T, lambda: T, nbar: T) -> Self {
        Self { beta, lambda, nbar }
    }
}

/// Lexicographic indexing of `{0..=N}^L`, first stream most significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    pub streams: usize,
    pub buffer: usize,
}

impl StateSpace {
    pub fn new(streams: usize, buffer: usize) -> Self {
        Self { streams, buffer }
    }

    /// `(N+1)^L`, saturating.
    pub fn count_u128(&self) -> u128 {
        (self.buffer as u128 + 1).saturating_pow(self.streams as u32)
    }

    pub fn count(&self) -> usize {
        usize::try_from(self.count_u128()).unwrap_or(usize::MAX)
    }

    pub fn check_cap(&self, cap: usize) -> Result<usize> {
        let states = self.count_u128();
        if states > cap as u128 {
            return Err(Error::StateCap { states, cap });
        }
        Ok(states as usize)
    }

    /// Index offset of a unit step in stream `i`.
    pub fn stride(&self, i: usize) -> usize {
        (self.buffer + 1).pow((self.streams - 1 - i) as u32)
    }

    pub fn index(&self, q: &[usize]) -> usize {
        q.iter().fold(0, |acc, &x| acc * (self.buffer + 1) + x)
    }

    pub fn decode(&self, mut idx: usize) -> JointState {
        let mut q = vec![0; self.streams];
        for slot in q.iter_mut().rev() {
            *slot = idx % (self.buffer + 1);
            idx /= self.buffer + 1;
        }
        JointState(q)
    }

    pub fn states(&self) -> impl Iterator<Item = JointState> + '_ {
        (0..self.count()).map(|k| self.decode(k))
    }
}

/// Joint queue lengths `(q_1, …, q_L)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointState(pub Vec<usize>);

impl JointState {
    pub fn empty(streams: usize) -> Self {
        Self(vec![0; streams])
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&q| q == 0)
    }
}

/// Parameters of the embedded queue chain and the Lagrangian cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams<T> {
    /// Channel uses per scheduling slot.
    pub tau: T,
    /// Buffer size N of every stream.
    pub buffer: usize,
    /// Power price γ.
    pub gamma: T,
    /// SINR gap factor α(ε).
    pub alpha: T,
    pub streams: Vec<StreamProfile<T>>,
}

impl<T: Real> ChainParams<T> {
    pub fn new(streams: Vec<StreamProfile<T>>, buffer: usize, tau: T, gamma: T, alpha: T) -> Result<Self> {
        let p = Self {
            tau,
            buffer,
            gamma,
            alpha,
            streams,
        };
        p.validate()?;
        Ok(p)
    }

    /// Two streams, N = 4, 200-bit packets, λτ = 0.02, τ = 1 channel use.
    pub fn two_stream_default(betas: [T; 2], gamma: T, alpha: T) -> Self {
        let streams = betas
            .iter()
            .map(|&b| StreamProfile::new(b, T::lit(0.02), T::lit(200.0)))
            .collect();
        Self {
            tau: T::one(),
            buffer: 4,
            gamma,
            alpha,
            streams,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams.is_empty() {
            return Err(Error::Config("at least one stream is required".into()));
        }
        if self.buffer == 0 {
            return Err(Error::Config("buffer size must be at least 1".into()));
        }
        if !(self.tau > T::zero()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(self.gamma > T::zero()) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        if !(self.alpha > T::zero()) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        let mut total = T::zero();
        for (i, s) in self.streams.iter().enumerate() {
            if !(s.beta > T::zero()) {
                return Err(Error::Config(format!("stream {i}: beta {} must be positive", s.beta)));
            }
            if !(s.nbar > T::zero()) {
                return Err(Error::Config(format!("stream {i}: nbar {} must be positive", s.nbar)));
            }
            let p = s.lambda * self.tau;
            if !(p >= T::zero() && p < T::one()) {
                return Err(Error::Config(format!(
                    "stream {i}: arrival probability lambda*tau = {p} outside [0, 1)"
                )));
            }
            total += p;
        }
        if !(total < T::one()) {
            return Err(Error::Config(format!(
                "total arrival probability {total} per slot leaves no room for departures"
            )));
        }
        Ok(())
    }

    pub fn n_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn space(&self) -> StateSpace {
        StateSpace::new(self.n_streams(), self.buffer)
    }

    pub fn betas(&self) -> Vec<T> {
        self.streams.iter().map(|s| s.beta).collect()
    }

    pub fn nbars(&self) -> Vec<T> {
        self.streams.iter().map(|s| s.nbar).collect()
    }

    pub fn arrival_probs(&self) -> Vec<T> {
        self.streams.iter().map(|s| s.lambda * self.tau).collect()
    }

    pub fn with_gamma(&self, gamma: T) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }

    /// One-stream chain for stream `i`.
    pub fn single_stream(&self, i: usize) -> Self {
        Self {
            streams: vec![self.streams[i].clone()],
            ..self.clone()
        }
    }

    /// `Σ β_i q_i`.
    pub fn holding_cost(&self, q: &[usize]) -> T {
        self.streams
            .iter()
            .zip(q)
            .fold(T::zero(), |acc, (s, &x)| acc + s.beta * T::from_usize(x).unwrap())
    }
}

/// Per-slot decision: eigen-rank and power of each stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation<T> {
    /// Eigen-rank held by each stream (0 = strongest mode).
    pub assignment: Vec<usize>,
    pub powers: Vec<T>,
}

impl<T: Real> Allocation<T> {
    pub fn idle(streams: usize) -> Self {
        Self {
            assignment: (0..streams).collect(),
            powers: vec![T::zero(); streams],
        }
    }

    pub fn total_power(&self) -> T {
        self.powers.iter().fold(T::zero(), |a, &b| a + b)
    }

    /// Stream served on each eigen-rank, or `None` for an unused rank.
    pub fn streams_by_rank(&self, ranks: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; ranks];
        for (stream, &r) in self.assignment.iter().enumerate() {
            if r < ranks {
                out[r] = Some(stream);
            }
        }
        out
    }

    /// `log₂(1 + α p_i ξ_[rank(i)])` per stream.
    pub fn rates(&self, eigvals: &[T], alpha: T) -> Vec<T> {
        self.assignment
            .iter()
            .zip(&self.powers)
            .map(|(&r, &p)| mode_rate(alpha, p, eigvals[r]))
            .collect()
    }
}

/// Allocation together with the precoder it induces on a concrete channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAction<T: Real> {
    pub allocation: Allocation<T>,
    /// `N_t × L`; column `i` is the eigenvector of rank `rank(i)` scaled by `√p_i`.
    pub precoder: CMatrix<T>,
    /// Bits per symbol of each stream.
    pub rates: Vec<T>,
}

impl<T: Real> ControlAction<T> {
    pub fn build(allocation: Allocation<T>, ch: &ChannelSample<T>, alpha: T) -> Self {
        let n_t = ch.eigvecs.nrows();
        let l = allocation.powers.len();
        let mut precoder = CMatrix::<T>::zeros(n_t, l);
        for i in 0..l {
            let scale = Complex::new(allocation.powers[i].sqrt(), T::zero());
            let col = ch.eigvecs.column(allocation.assignment[i]);
            for r in 0..n_t {
                precoder[(r, i)] = col[r] * scale;
            }
        }
        let rates = allocation.rates(ch.eigvals.as_slice(), alpha);
        Self {
            allocation,
            precoder,
            rates,
        }
    }
}
