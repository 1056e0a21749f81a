//! MIMO physical layer: channel draws (with optional CSIT error), the
//! eigen-structure used by the diagonalizing precoder, and the mappings from
//! precoder and power to MSE, SINR, rate and packet service rate.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type CMatrix<T> = DMatrix<Complex<T>>;

/// Which effective matrix supplies the precoder eigenvectors and the
/// per-mode gains when the transmitter only has an estimate of the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CsitModel {
    /// `Ĥ^H Ĥ + σ_e² N_r I`; reduces to `Ĥ^H Ĥ` at perfect CSIT.
    #[default]
    Scaled,
    /// `Ĥ^H Ĥ + N_r I` whenever `σ_e² > 0`.
    Unscaled,
}

/// Antenna, stream and link-adaptation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyConfig<T> {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_streams: usize,
    /// Target symbol error probability ε.
    pub target_ser: T,
    /// Constant of the QAM symbol error bound.
    pub kappa1: T,
    /// CSIT error variance σ_e².
    pub sigma_e2: T,
    #[serde(default)]
    pub csit_model: CsitModel,
    pub rng_seed: u64,
}

impl<T: Real> PhyConfig<T> {
    pub fn new(
        n_tx: usize,
        n_rx: usize,
        n_streams: usize,
        target_ser: T,
        kappa1: T,
        sigma_e2: T,
        rng_seed: u64,
    ) -> Result<Self> {
        let cfg = Self {
            n_tx,
            n_rx,
            n_streams,
            target_ser,
            kappa1,
            sigma_e2,
            csit_model: CsitModel::Scaled,
            rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 2×2 link with two streams, 1% target SER, κ₁ = 4 and perfect CSIT.
    pub fn two_by_two() -> Self {
        Self {
            n_tx: 2,
            n_rx: 2,
            n_streams: 2,
            target_ser: T::lit(0.01),
            kappa1: T::lit(4.0),
            sigma_e2: T::zero(),
            csit_model: CsitModel::Scaled,
            rng_seed: 1,
        }
    }

    pub fn with_sigma_e2(mut self, sigma_e2: T) -> Self {
        self.sigma_e2 = sigma_e2;
        self
    }

    pub fn with_antennas(mut self, n_tx: usize, n_rx: usize) -> Self {
        self.n_tx = n_tx;
        self.n_rx = n_rx;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_rx == 0 || self.n_streams == 0 {
            return Err(Error::Config("antenna and stream counts must be positive".into()));
        }
        if self.n_streams > self.n_tx.min(self.n_rx) {
            return Err(Error::Config(format!(
                "{} streams exceed min(n_tx, n_rx) = {}",
                self.n_streams,
                self.n_tx.min(self.n_rx)
            )));
        }
        if !(self.target_ser > T::zero() && self.target_ser < T::one()) {
            return Err(Error::Config(format!("target SER {} not in (0, 1)", self.target_ser)));
        }
        if !(self.sigma_e2 >= T::zero() && self.sigma_e2 < T::one()) {
            return Err(Error::Config(format!("sigma_e2 {} not in [0, 1)", self.sigma_e2)));
        }
        alpha(self.target_ser, self.kappa1).map(|_| ())
    }

    /// SINR gap factor α(ε).
    pub fn alpha(&self) -> T {
        alpha(self.target_ser, self.kappa1).expect("validated configuration")
    }
}

/// `α(ε) = 3 / (2 ln(κ₁ / (2ε)))`, the SINR scaling obtained by inverting
/// `P_e ≤ (κ₁/2) exp(-3 SINR / (2 (2^R - 1)))` at equality.
pub fn alpha<T: Real>(target_ser: T, kappa1: T) -> Result<T> {
    if !(kappa1 > T::zero()) {
        return Err(Error::Config(format!("kappa1 {kappa1} must be positive")));
    }
    let ratio = kappa1 / (T::lit(2.0) * target_ser);
    if !(ratio > T::one()) {
        return Err(Error::Config(format!(
            "kappa1/(2 eps) = {ratio} must exceed 1 for a positive alpha"
        )));
    }
    Ok(T::lit(3.0) / (T::lit(2.0) * ratio.ln()))
}

/// One channel realization together with the eigen-structure the precoder uses.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample<T: Real> {
    /// Transmitter-side estimate Ĥ (`N_r × N_t`).
    pub h_hat: CMatrix<T>,
    /// Actual channel H (`N_r × N_t`).
    pub h_true: CMatrix<T>,
    /// `L` largest eigenvalues of the effective matrix, descending.
    pub eigvals: DVector<T>,
    /// Matching unit-norm eigenvectors (`N_t × L`).
    pub eigvecs: CMatrix<T>,
}

fn complex_gaussian<T: Real, R: Rng + ?Sized>(rng: &mut R, variance: T) -> Complex<T> {
    let s = (variance / T::lit(2.0)).sqrt();
    let re = T::std_normal(rng);
    let im = T::std_normal(rng);
    Complex::new(re * s, im * s)
}

fn gaussian_matrix<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    variance: T,
) -> CMatrix<T> {
    // Column-major fill so the draw order is fixed by the shape alone.
    DMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng, variance))
}

/// Draws `(Ĥ, H)`. With `σ_e² = 0` both are the same unit-variance draw;
/// otherwise `Ĥ ~ CN(0, 1-σ_e²)`, `ΔH ~ CN(0, σ_e²)` independent and
/// `H = Ĥ - ΔH`.
pub fn sample_matrices<T: Real, R: Rng + ?Sized>(
    cfg: &PhyConfig<T>,
    rng: &mut R,
) -> (CMatrix<T>, CMatrix<T>) {
    if cfg.sigma_e2 == T::zero() {
        let h = gaussian_matrix(rng, cfg.n_rx, cfg.n_tx, T::one());
        (h.clone(), h)
    } else {
        let h_hat = gaussian_matrix(rng, cfg.n_rx, cfg.n_tx, T::one() - cfg.sigma_e2);
        let delta = gaussian_matrix(rng, cfg.n_rx, cfg.n_tx, cfg.sigma_e2);
        let h_true = &h_hat - delta;
        (h_hat, h_true)
    }
}

/// The `N_t × N_t` Hermitian matrix whose leading eigenpairs define the precoder.
pub fn effective_matrix<T: Real>(cfg: &PhyConfig<T>, h_hat: &CMatrix<T>) -> CMatrix<T> {
    let mut g = h_hat.adjoint() * h_hat;
    if cfg.sigma_e2 > T::zero() {
        let shift = match cfg.csit_model {
            CsitModel::Scaled => cfg.sigma_e2 * T::from_usize(cfg.n_rx).unwrap(),
            CsitModel::Unscaled => T::from_usize(cfg.n_rx).unwrap(),
        };
        for k in 0..g.nrows() {
            g[(k, k)] += Complex::new(shift, T::zero());
        }
    }
    g
}

/// Leading `l` eigenpairs of a Hermitian matrix, eigenvalues descending and
/// clamped at zero. Equal eigenvalues keep the solver's index order; each
/// eigenvector is rotated so its first non-negligible entry is real positive.
pub fn top_eigen<T: Real>(m: &CMatrix<T>, l: usize) -> (DVector<T>, CMatrix<T>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let tiny = T::lit(1e-12);
    let mut vals = DVector::zeros(l);
    let mut vecs = CMatrix::<T>::zeros(n, l);
    for (k, &src) in order.iter().take(l).enumerate() {
        vals[k] = eig.eigenvalues[src].max(T::zero());
        let col = eig.eigenvectors.column(src);
        let phase = col
            .iter()
            .find(|z| z.norm_sqr().sqrt() > tiny)
            .map(|z| z.conj() / Complex::new(z.norm_sqr().sqrt(), T::zero()))
            .unwrap_or_else(|| Complex::new(T::one(), T::zero()));
        for r in 0..n {
            vecs[(r, k)] = col[r] * phase;
        }
    }
    (vals, vecs)
}

/// Eigenvalues only, descending; closed form for 1×1 and 2×2.
pub fn top_eigenvalues<T: Real>(m: &CMatrix<T>, l: usize) -> Vec<T> {
    let n = m.nrows();
    let mut vals: Vec<T> = match n {
        1 => vec![m[(0, 0)].re],
        2 => {
            let a = m[(0, 0)].re;
            let d = m[(1, 1)].re;
            let b = m[(0, 1)];
            let half = T::lit(0.5);
            let mid = (a + d) * half;
            let diff = (a - d) * half;
            let rad = (diff * diff + b.norm_sqr()).sqrt();
            vec![mid + rad, mid - rad]
        }
        _ => {
            let mut v: Vec<T> = m.clone().symmetric_eigenvalues().iter().copied().collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            v
        }
    };
    vals.truncate(l);
    for v in &mut vals {
        *v = v.max(T::zero());
    }
    vals
}

/// One i.i.d. channel realization with its precoding eigen-structure.
pub fn sample_channel<T: Real, R: Rng + ?Sized>(cfg: &PhyConfig<T>, rng: &mut R) -> ChannelSample<T> {
    let (h_hat, h_true) = sample_matrices(cfg, rng);
    let g = effective_matrix(cfg, &h_hat);
    let (eigvals, eigvecs) = top_eigen(&g, cfg.n_streams);
    ChannelSample {
        h_hat,
        h_true,
        eigvals,
        eigvecs,
    }
}

/// Same random draws as [`sample_channel`], returning only the eigenvalues.
pub fn sample_eigvals<T: Real, R: Rng + ?Sized>(cfg: &PhyConfig<T>, rng: &mut R) -> Vec<T> {
    let (h_hat, _) = sample_matrices(cfg, rng);
    top_eigenvalues(&effective_matrix(cfg, &h_hat), cfg.n_streams)
}

const MAX_CONDITION: f64 = 1e12;

/// `E(P) = (I + P^H H^H H P)^{-1}`.
pub fn mse_matrix<T: Real>(p: &CMatrix<T>, h: &CMatrix<T>) -> Result<CMatrix<T>> {
    if h.ncols() != p.nrows() {
        return Err(Error::Domain(format!(
            "precoder has {} rows but channel has {} columns",
            p.nrows(),
            h.ncols()
        )));
    }
    let hp = h * p;
    let l = p.ncols();
    let m = CMatrix::<T>::identity(l, l) + hp.adjoint() * &hp;
    let ev = m.clone().symmetric_eigenvalues();
    let max = ev.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let min = ev.iter().copied().fold(T::max_value().unwrap(), |a, b| a.min(b));
    if !(min > T::zero()) || (max / min).as_f64() > MAX_CONDITION {
        return Err(Error::Numeric(format!(
            "MSE matrix condition number {:e} above {MAX_CONDITION:e}",
            (max / min).as_f64()
        )));
    }
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numeric("I + P^H H^H H P is not positive definite".into()))
}

/// Per-stream SINR after the Wiener equalizer, computed from the
/// interference-plus-noise covariance of each stream.
pub fn wiener_sinr<T: Real>(p: &CMatrix<T>, h: &CMatrix<T>) -> Result<Vec<T>> {
    let hp = h * p;
    let n_r = h.nrows();
    (0..p.ncols())
        .map(|i| {
            let mut a = CMatrix::<T>::identity(n_r, n_r);
            for j in (0..p.ncols()).filter(|&j| j != i) {
                let c = hp.column(j);
                a += &c * c.adjoint();
            }
            let inv = a
                .try_inverse()
                .ok_or_else(|| Error::Numeric("singular interference covariance".into()))?;
            let c = hp.column(i);
            Ok((c.adjoint() * inv * c)[(0, 0)].re)
        })
        .collect()
}

/// `R_i = log₂(1 + α (d_i^{-1} - 1))` in bits per symbol.
pub fn rate_from_mse<T: Real>(mse_diag: &[T], alpha: T) -> Result<Vec<T>> {
    mse_diag
        .iter()
        .map(|&d| {
            if !(d > T::zero() && d <= T::one()) {
                return Err(Error::Domain(format!("MSE {d} outside (0, 1]")));
            }
            Ok((T::one() + alpha * (d.recip() - T::one())).log2())
        })
        .collect()
}

pub fn rate_per_stream<T: Real>(mse_diag: &[T], cfg: &PhyConfig<T>) -> Result<Vec<T>> {
    rate_from_mse(mse_diag, cfg.alpha())
}

/// Rate of one eigenmode with power `p` and gain `xi`: `log₂(1 + α p ξ)`.
#[inline]
pub fn mode_rate<T: Real>(alpha: T, p: T, xi: T) -> T {
    (T::one() + alpha * p * xi).log2()
}

/// Packets per channel use for a rate in bits per symbol.
#[inline]
pub fn service_rate<T: Real>(rate: T, nbar: T) -> T {
    rate / nbar
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex<f64> {
        Complex::new(re, 0.0)
    }

    #[test]
    fn alpha_closed_form() {
        let a = alpha(0.01f64, 4.0).unwrap();
        assert!((a - 3.0 / (2.0 * 200f64.ln())).abs() < 1e-15);
        assert!((a - 0.2831).abs() < 1e-4);
        // inverting the SEP bound at the computed rate gives back eps
        let sinr = 10.0;
        let r = (1.0 + a * sinr).log2();
        let pe = 2.0 * (-3.0 * sinr / (2.0 * (2f64.powf(r) - 1.0))).exp();
        assert!((pe - 0.01).abs() < 1e-12);
    }

    #[test]
    fn alpha_rejects_large_target() {
        assert!(alpha(0.9f64, 1.0).is_err());
        assert!(PhyConfig::new(2, 2, 3, 0.01f64, 4.0, 0.0, 0).is_err());
        assert!(PhyConfig::new(2, 2, 2, 0.01f64, 4.0, 1.0, 0).is_err());
    }

    #[test]
    fn zero_precoder_gives_identity_mse() {
        let h = DMatrix::from_fn(2, 2, |r, k| Complex::new((r + k) as f64, 1.0));
        let p = CMatrix::<f64>::zeros(2, 2);
        let e = mse_matrix(&p, &h).unwrap();
        assert!((e - CMatrix::<f64>::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn diagonal_mse() {
        let h = CMatrix::<f64>::identity(2, 2);
        let s = 3f64.sqrt();
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![c(s), c(s)]));
        let e = mse_matrix(&p, &h).unwrap();
        assert!((e[(0, 0)].re - 0.25).abs() < 1e-14);
        assert!((e[(1, 1)].re - 0.25).abs() < 1e-14);
        assert!(e[(0, 1)].norm() < 1e-14);
    }

    #[test]
    fn mse_rejects_ill_conditioning() {
        let h = CMatrix::<f64>::identity(2, 2);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![c(1e7), c(0.0)]));
        assert!(matches!(mse_matrix(&p, &h), Err(Error::Numeric(_))));
    }

    #[test]
    fn mse_diagonal_matches_wiener_sinr() {
        let cfg = PhyConfig::<f64>::two_by_two().with_antennas(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (h, _) = sample_matrices(&cfg, &mut rng);
            let p = gaussian_matrix(&mut rng, 3, 2, 1.0);
            let e = mse_matrix(&p, &h).unwrap();
            let w = wiener_sinr(&p, &h).unwrap();
            for i in 0..2 {
                let s = e[(i, i)].re.recip() - 1.0;
                assert!((s - w[i]).abs() <= 1e-8 * w[i].max(1.0));
            }
        }
    }

    #[test]
    fn rate_examples() {
        let cfg = PhyConfig::<f64>::two_by_two();
        assert_eq!(rate_per_stream(&[1.0, 1.0], &cfg).unwrap(), vec![0.0, 0.0]);
        let r = rate_per_stream(&[0.25], &cfg).unwrap()[0];
        let a = cfg.alpha();
        assert!((r - (1.0 + 3.0 * a).log2()).abs() < 1e-15);
        assert!((r - 0.8870).abs() < 1e-4);
        assert!(rate_per_stream(&[0.0], &cfg).is_err());
        assert!(rate_per_stream(&[1.5], &cfg).is_err());
    }

    #[test]
    fn rate_strictly_decreasing_in_mse() {
        let cfg = PhyConfig::<f64>::two_by_two();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(1e-6..1.0);
            let b: f64 = rng.random_range(1e-6..1.0);
            if a == b {
                continue;
            }
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let r = rate_per_stream(&[lo, hi], &cfg).unwrap();
            assert!(r[0] > r[1]);
        }
    }

    #[test]
    fn service_rate_examples() {
        assert_eq!(service_rate(0.0f64, 200.0), 0.0);
        assert!((service_rate(2.0f64, 200.0) - 0.01).abs() < 1e-15);
        assert!((service_rate(2.0f64, 400.0) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn perfect_csit_estimate_is_exact() {
        let cfg = PhyConfig::<f64>::two_by_two();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = sample_channel(&cfg, &mut rng);
        assert_eq!(ch.h_hat, ch.h_true);
    }

    #[test]
    fn eigen_structure_is_consistent() {
        let cfg = PhyConfig::<f64>::two_by_two().with_antennas(4, 3).with_sigma_e2(0.2);
        let cfg = PhyConfig { n_streams: 3, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let ch = sample_channel(&cfg, &mut rng);
            let g = effective_matrix(&cfg, &ch.h_hat);
            let gram = ch.eigvecs.adjoint() * &ch.eigvecs;
            assert!((gram - CMatrix::<f64>::identity(3, 3)).norm() < 1e-10);
            for k in 0..3 {
                let v = ch.eigvecs.column(k);
                let resid = &g * v - v * Complex::new(ch.eigvals[k], 0.0);
                assert!(resid.norm() < 1e-8);
                assert!(v.iter().find(|z| z.norm() > 1e-12).unwrap().im.abs() < 1e-12);
            }
            assert!(ch.eigvals.as_slice().windows(2).all(|w| w[0] >= w[1]));
            let fast = top_eigenvalues(&g, 3);
            for k in 0..3 {
                assert!((fast[k] - ch.eigvals[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn closed_form_two_by_two_matches_solver() {
        let cfg = PhyConfig::<f64>::two_by_two();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let (h, _) = sample_matrices(&cfg, &mut rng);
            let g = effective_matrix(&cfg, &h);
            let (v, _) = top_eigen(&g, 2);
            let f = top_eigenvalues(&g, 2);
            assert!((v[0] - f[0]).abs() < 1e-10 && (v[1] - f[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn unscaled_variant_is_offset_by_n_rx() {
        let mut cfg = PhyConfig::<f64>::two_by_two().with_sigma_e2(0.3);
        let h = DMatrix::from_fn(2, 2, |r, k| Complex::new(r as f64, k as f64));
        let scaled = effective_matrix(&cfg, &h);
        cfg.csit_model = CsitModel::Unscaled;
        let unscaled = effective_matrix(&cfg, &h);
        let diff = unscaled - scaled;
        assert!((diff[(0, 0)].re - 2.0 * 0.7).abs() < 1e-14);
    }

    #[test]
    fn f32_channel_draws() {
        let cfg = PhyConfig::<f32>::two_by_two();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = sample_channel(&cfg, &mut rng);
        assert!(ch.eigvals[0] >= ch.eigvals[1] && ch.eigvals[1] >= 0.0);
    }
}
