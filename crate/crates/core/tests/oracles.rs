use delay_mimo::phy::{mse_matrix, rate_from_mse, sample_channel};
use delay_mimo::steady::{steady_state_joint, JointPolicyLaw};
use delay_mimo::waterfill::phi_1d;
use delay_mimo::*;
use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cache() -> Cache64 {
    Cache64::generate(&PhyConfig64::two_by_two(), 20_000, 31).unwrap()
}

/// With one stream and a one-packet buffer the Bellman equation collapses
/// to `β = φ̃(θ/λ) + θ`, solved here by plain bisection.
#[test]
fn single_packet_buffer_scalar_equation() {
    let cache = cache();
    let col = cache.column(0);
    let alpha = PhyConfig64::two_by_two().alpha();
    for &(beta, lam, gamma) in &[(1.0, 0.02, 0.01), (10.0, 0.05, 0.1), (0.5, 0.01, 0.001)] {
        let g = |theta: f64| phi_1d(theta / lam, 200.0, gamma, alpha, col).value + theta - beta;
        let (mut lo, mut hi) = (0.0, beta);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let params = ChainParams64::new(vec![StreamProfile::new(beta, lam, 200.0)], 1, 1.0, gamma, alpha).unwrap();
        let single = cache.column_cache(0);
        let rvi = solve_rvi(
            &params,
            &single,
            &RviOptions {
                tol: 1e-12,
                ..RviOptions::default()
            },
        )
        .unwrap();
        let dec = solve_decomposed(&params, &single, 1e-14).unwrap();
        assert!((rvi.theta - oracle).abs() <= 1e-6 * oracle, "rvi {} vs {oracle}", rvi.theta);
        assert!((dec.theta_total() - oracle).abs() <= 1e-6 * oracle, "dec {} vs {oracle}", dec.theta_total());
    }
}

/// Two streams with queue-independent service: the joint law is the product
/// of the birth–death marginals (4, 2, 1)/7 and (25, 5, 1)/31.
#[test]
fn independent_streams_have_product_form() {
    let params = ChainParams64::new(
        vec![StreamProfile::new(1.0, 0.02, 200.0), StreamProfile::new(1.0, 0.01, 200.0)],
        2,
        1.0,
        0.1,
        0.28,
    )
    .unwrap();
    let space = params.space();
    let departure = (0..space.count() * 2)
        .map(|k| {
            let q = space.decode(k / 2).0[k % 2];
            match (q, k % 2) {
                (0, _) => 0.0,
                (_, 0) => 0.04,
                _ => 0.05,
            }
        })
        .collect();
    let law = JointPolicyLaw {
        space,
        departure,
        power: vec![1.0; space.count()],
    };
    let st = steady_state_joint(&law, &params).unwrap();
    let a = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
    let b = [25.0 / 31.0, 5.0 / 31.0, 1.0 / 31.0];
    for (i, row) in st.marginals.iter().zip([a, b]) {
        for (x, y) in i.iter().zip(row) {
            assert_relative_eq!(*x, y, max_relative = 1e-12);
        }
    }
    assert_relative_eq!(st.avg_queue[0], 4.0 / 7.0, max_relative = 1e-12);
    assert_relative_eq!(st.avg_queue[1], 7.0 / 31.0, max_relative = 1e-12);
    assert_relative_eq!(st.drop_rate[0], 1.0 / 7.0, max_relative = 1e-12);
    assert!(st.balance_residual < 1e-15);
}

#[test]
fn calibration_recovers_the_price_behind_a_power() {
    let cache = cache();
    let params = ChainParams64::two_stream_default([1.0, 10.0], 0.02, PhyConfig64::two_by_two().alpha());
    let sol = solve_decomposed(&params, &cache, 1e-12).unwrap();
    let power = steady_state_per_stream(&sol, &params, &cache).unwrap().avg_power;
    let opts = CalibrationOptions {
        rel_tol: 1e-8,
        ..CalibrationOptions::default()
    };
    let res = calibrate_gamma(
        power,
        SolverMode::Decomposed,
        &params,
        &cache,
        CalibrationMode::RootFind,
        &opts,
    )
    .unwrap();
    assert_eq!(res.mode, CalibrationMode::RootFind);
    assert!(res.monotone);
    assert_relative_eq!(res.gamma, 0.02, max_relative = 1e-5);
    assert!(matches!(
        calibrate_gamma(1e9, SolverMode::Decomposed, &params, &cache, CalibrationMode::RootFind, &opts),
        Err(Error::Range { .. })
    ));
}

#[test]
fn action_rates_match_mse_recomputation() {
    let cache = cache();
    let phy = PhyConfig64::two_by_two();
    let params = ChainParams64::two_stream_default([1.0, 10.0], 0.01, phy.alpha());
    let full = solve_rvi(&params, &cache, &RviOptions::default()).unwrap();
    let dec = solve_decomposed(&params, &cache, 1e-10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..50 {
        let ch = sample_channel(&phy, &mut rng);
        let state = params.space().decode(k % params.space().count());
        for action in [
            extract_action(&full, &params, &state, &ch),
            decomposed_policy(&dec, &params, &state, &ch),
        ] {
            let e = mse_matrix(&action.precoder, &ch.h_true).unwrap();
            let diag: Vec<f64> = (0..2).map(|i| e[(i, i)].re).collect();
            let rates = rate_from_mse(&diag, phy.alpha()).unwrap();
            for (a, b) in action.rates.iter().zip(&rates) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            if state.is_empty() {
                assert_eq!(action.allocation.total_power(), 0.0);
            }
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let phy32 = PhyConfig32::two_by_two();
    let cache32 = Cache32::generate(&phy32, 20_000, 31).unwrap();
    let cache64 = cache();
    let p32 = ChainParams32::two_stream_default([1.0, 10.0], 0.05, phy32.alpha());
    let p64 = ChainParams64::two_stream_default([1.0, 10.0], 0.05, PhyConfig64::two_by_two().alpha());
    let t32 = solve_decomposed(&p32, &cache32, 1e-5).unwrap().theta_total() as f64;
    let t64 = solve_decomposed(&p64, &cache64, 1e-12).unwrap().theta_total();
    assert_relative_eq!(t32, t64, max_relative = 1e-3);
}
