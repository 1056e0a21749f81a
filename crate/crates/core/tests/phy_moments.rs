use delay_mimo::phy::{effective_matrix, mse_matrix, sample_channel, sample_matrices, wiener_sinr, CMatrix};
use delay_mimo::*;
use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 100_000;

#[test]
fn eigenvalue_sum_matches_trace_identity() {
    let cfg = PhyConfig64::two_by_two();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mean = (0..DRAWS)
        .map(|_| sample_channel(&cfg, &mut rng).eigvals.iter().sum::<f64>())
        .sum::<f64>()
        / DRAWS as f64;
    assert!((mean / 4.0 - 1.0).abs() < 0.02, "E[ξ₁+ξ₂] = {mean}");
}

#[test]
fn csit_error_moments() {
    let cfg = PhyConfig64::two_by_two().with_sigma_e2(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut var_hat, mut var_true, mut var_err) = (0.0, 0.0, 0.0);
    let mut cov = Complex::new(0.0, 0.0);
    let mut n = 0.0;
    for _ in 0..DRAWS / 4 {
        let (h_hat, h_true) = sample_matrices(&cfg, &mut rng);
        let err = &h_hat - &h_true;
        for k in 0..h_hat.len() {
            var_hat += h_hat[k].norm_sqr();
            var_true += h_true[k].norm_sqr();
            var_err += err[k].norm_sqr();
            cov += err[k] * h_hat[k].conj();
            n += 1.0;
        }
    }
    let (var_hat, var_true, var_err, cov) = (var_hat / n, var_true / n, var_err / n, cov.norm() / n);
    assert!((var_hat / 0.7 - 1.0).abs() < 0.02, "Var Ĥ = {var_hat}");
    assert!((var_true - 1.0).abs() < 0.02, "Var H = {var_true}");
    assert!((var_err / 0.3 - 1.0).abs() < 0.02, "Var ΔH = {var_err}");
    assert!(cov < 0.02 * (0.7f64 * 0.3).sqrt(), "|E[ΔH Ĥ*]| = {cov}");
}

#[test]
fn scaled_effective_matrix_keeps_mean_trace() {
    let cfg = PhyConfig64::two_by_two().with_sigma_e2(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mean = (0..DRAWS / 4)
        .map(|_| effective_matrix(&cfg, &sample_matrices(&cfg, &mut rng).0).trace().re)
        .sum::<f64>()
        / (DRAWS / 4) as f64;
    assert!((mean / 4.0 - 1.0).abs() < 0.02, "E[tr M] = {mean}");
}

#[test]
fn effective_matrix_is_continuous_at_perfect_csit() {
    let exact = PhyConfig64::two_by_two();
    let near = exact.clone().with_sigma_e2(1e-6);
    for seed in 0..50 {
        let h_hat = sample_matrices(&near, &mut ChaCha8Rng::seed_from_u64(seed)).0;
        let gram = h_hat.adjoint() * &h_hat;
        assert!((effective_matrix(&near, &h_hat) - &gram).norm() < 1e-4);
        assert_eq!(effective_matrix(&exact, &h_hat), gram);
        let h0 = sample_matrices(&exact, &mut ChaCha8Rng::seed_from_u64(seed)).0;
        assert!((effective_matrix(&near, &h_hat) - h0.adjoint() * &h0).norm() < 1e-4);
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> CMatrix<f64> {
    CMatrix::from_fn(rows, cols, |_, _| {
        Complex::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale))
    })
}

#[test]
fn mse_and_wiener_sinr_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for k in 0..200 {
        let n_r = 1 + k % 4;
        let n_t = 1 + (k / 4) % 4;
        let l = 1 + k % n_t.min(n_r);
        let h = random_matrix(&mut rng, n_r, n_t, 1.0);
        let p = random_matrix(&mut rng, n_t, l, 2.0);
        let e = mse_matrix(&p, &h).unwrap();
        let sinr = wiener_sinr(&p, &h).unwrap();
        for i in 0..l {
            let from_mse = 1.0 / e[(i, i)].re - 1.0;
            assert!(
                (from_mse - sinr[i]).abs() <= 1e-8 * (1.0 + sinr[i]),
                "{n_r}x{n_t}, L={l}: {from_mse} vs {}",
                sinr[i]
            );
        }
    }
}

#[test]
fn channel_streams_are_reproducible() {
    let cfg = PhyConfig64::two_by_two().with_sigma_e2(0.1);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| sample_channel(&cfg, &mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}
