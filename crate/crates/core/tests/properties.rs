use proptest::prelude::*;

use cfmimo::channel::{draw_channel, normalize, ChannelRealization, NormalizedChannel};
use cfmimo::consumption::{network_power, pa_consumed_power, NetworkParams};
use cfmimo::precoding::{
    optimal_precoder, per_antenna_powers, solve_antenna_powers, zf_precoder, zf_residual, AntennaPowerVector,
    FixedPointOptions,
};
use cfmimo::rmt::{pbar_map, rmt_induced_precoder, solve_pbar, RmtInput, RmtOptions};
use cfmimo::scenario::{realization_rng, CorrelationSet, Scenario, SystemConfig, TargetProfile};

fn draw(aps: usize, m: usize, k: usize, q: usize, seed: u64) -> (Scenario, ChannelRealization) {
    let cfg = SystemConfig::default().with_aps(aps, m).with_users(k).with_subcarriers(q);
    let mut rng = realization_rng(seed, 0);
    let sc = Scenario::draw(&cfg, &mut rng).unwrap();
    let ch = draw_channel(&sc.large_scale.beta, &sc.correlation, q, &mut rng).unwrap();
    (sc, ch)
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).cloned().fold(0.0, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_precoder_is_zero_forcing(aps in 1usize..4, m in 2usize..6, k in 1usize..6, q in 1usize..5, seed: u64) {
        prop_assume!(k < aps * m);
        let (sc, ch) = draw(aps, m, k, q, seed);
        let noise = sc.config.noise_power;
        let zf = zf_precoder(&ch, &sc.targets, noise).unwrap();
        prop_assert!(zf_residual(&ch, &zf, &sc.targets, noise) <= 1e-9);
        let nch = normalize(&ch, &sc.targets, noise).unwrap();
        let (p, _) = solve_antenna_powers(&nch, &FixedPointOptions::default()).unwrap();
        let opt = optimal_precoder(&ch, &sc.targets, noise, &p).unwrap();
        prop_assert!(zf_residual(&ch, &opt, &sc.targets, noise) <= 1e-9);
        let input = RmtInput::from_statistics(&sc.large_scale.beta, &sc.correlation, &sc.targets, noise).unwrap();
        let (p_ap, _) = solve_pbar(&input, &RmtOptions::default()).unwrap();
        let rmt = rmt_induced_precoder(&ch, &sc.targets, noise, &p_ap).unwrap();
        prop_assert!(zf_residual(&ch, &rmt, &sc.targets, noise) <= 1e-9);
    }

    #[test]
    fn consumption_ordering_of_the_three_methods(aps in 2usize..5, k in 1usize..5, q in 1usize..9, seed: u64) {
        let (sc, ch) = draw(aps, 4, k, q, seed);
        let noise = sc.config.noise_power;
        let pa = NetworkParams::from(&sc.config).pa;
        let conv = per_antenna_powers(&zf_precoder(&ch, &sc.targets, noise).unwrap());
        let nch = normalize(&ch, &sc.targets, noise).unwrap();
        let (p, rep) = solve_antenna_powers(&nch, &FixedPointOptions::default()).unwrap();
        prop_assume!(rep.converged);
        let opt = per_antenna_powers(&optimal_precoder(&ch, &sc.targets, noise, &p).unwrap());
        let input = RmtInput::from_statistics(&sc.large_scale.beta, &sc.correlation, &sc.targets, noise).unwrap();
        let (p_ap, _) = solve_pbar(&input, &RmtOptions::default()).unwrap();
        let rmt = per_antenna_powers(&rmt_induced_precoder(&ch, &sc.targets, noise, &p_ap).unwrap());

        let opt_pas = pa_consumed_power(&opt, &pa);
        prop_assert!(opt_pas <= pa_consumed_power(&conv, &pa) * (1.0 + 1e-6));
        prop_assert!(opt_pas <= pa_consumed_power(&rmt, &pa) * (1.0 + 1e-6));
        let tx = |p: &AntennaPowerVector| p.p.iter().sum::<f64>();
        prop_assert!(tx(&conv) <= tx(&opt) * (1.0 + 1e-9));
        prop_assert!(tx(&conv) <= tx(&rmt) * (1.0 + 1e-9));
    }

    #[test]
    fn fixed_point_objective_never_increases(aps in 1usize..4, k in 1usize..4, q in 1usize..6, seed: u64) {
        let (sc, ch) = draw(aps, 4, k, q, seed);
        let nch = normalize(&ch, &sc.targets, sc.config.noise_power).unwrap();
        let (_, rep) = solve_antenna_powers(&nch, &FixedPointOptions::default()).unwrap();
        for w in rep.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn powers_scale_with_targets_and_noise(alpha in 0.05f64..20.0, seed: u64) {
        let (sc, ch) = draw(2, 4, 3, 4, seed);
        let noise = sc.config.noise_power;
        let opts = FixedPointOptions { tolerance: 1e-11, max_iterations: 5000, ..Default::default() };
        let base = solve_antenna_powers(&normalize(&ch, &sc.targets, noise).unwrap(), &opts).unwrap();
        prop_assume!(base.1.converged);
        let scaled_t = TargetProfile::from_linear(sc.targets.gamma.iter().map(|g| alpha * g).collect(), 4).unwrap();
        let by_target = solve_antenna_powers(&normalize(&ch, &scaled_t, noise).unwrap(), &opts).unwrap();
        let by_noise = solve_antenna_powers(&normalize(&ch, &sc.targets, alpha * noise).unwrap(), &opts).unwrap();
        let expected: Vec<f64> = base.0.p.iter().map(|x| alpha * x).collect();
        prop_assert!(max_rel_diff(&by_target.0.p, &expected) <= 1e-6);
        prop_assert!(max_rel_diff(&by_noise.0.p, &expected) <= 1e-6);
    }

    #[test]
    fn antenna_permutation_permutes_powers(seed: u64, shift in 1usize..8) {
        let (sc, ch) = draw(2, 4, 3, 4, seed);
        let nch = normalize(&ch, &sc.targets, sc.config.noise_power).unwrap();
        let n = nch.total_antennas();
        let perm: Vec<usize> = (0..n).map(|i| (i * 3 + shift) % n).collect();
        let permuted = NormalizedChannel {
            h_tilde: nch.h_tilde.iter().map(|h| h.select_columns(perm.iter())).collect(),
            d_norm: nch.d_norm.clone(),
            antennas: vec![n],
        };
        let opts = FixedPointOptions { tolerance: 1e-10, max_iterations: 5000, ..Default::default() };
        let (a, ra) = solve_antenna_powers(&nch, &opts).unwrap();
        let (b, rb) = solve_antenna_powers(&permuted, &opts).unwrap();
        prop_assume!(ra.converged && rb.converged);
        let reordered: Vec<f64> = perm.iter().map(|&i| a.p[i]).collect();
        prop_assert!(max_rel_diff(&reordered, &b.p) <= 1e-6);
    }

    #[test]
    fn statistical_map_homogeneity(seed: u64, alpha in 0.01f64..100.0, c in 0.01f64..100.0) {
        let (sc, _) = draw(4, 6, 5, 8, seed);
        let input = RmtInput::from_statistics(&sc.large_scale.beta, &sc.correlation, &sc.targets, sc.config.noise_power).unwrap();
        let p = [0.2, 1.0, 3.0, 0.7];
        let base = pbar_map(&input, &p).unwrap();
        let scaled_p: Vec<f64> = p.iter().map(|x| alpha * x).collect();
        prop_assert!(max_rel_diff(&pbar_map(&input, &scaled_p).unwrap(), &base) <= 1e-11);

        // Scaling every d by c scales the powers by 1/c.
        let xi: Vec<Vec<f64>> = sc.correlation.eigenvalues.iter().map(|e| e.iter().copied().collect()).collect();
        let d: Vec<Vec<f64>> = input.d_norm.iter().map(|row| row.iter().map(|x| c * x).collect()).collect();
        let scaled = RmtInput::new(d, xi, input.q_count).unwrap();
        let expected: Vec<f64> = base.iter().map(|x| x / c).collect();
        prop_assert!(max_rel_diff(&pbar_map(&scaled, &p).unwrap(), &expected) <= 1e-10);
    }

    #[test]
    fn network_power_grows_with_overheads(p in proptest::collection::vec(0.0f64..2.0, 8), fix in 0.0f64..30.0, circuit in 0.0f64..2.0) {
        let cfg = SystemConfig::default();
        let mut params = NetworkParams::from(&cfg);
        let powers = AntennaPowerVector::new(p);
        params.p_fix = fix;
        params.p_circuit = circuit;
        let low = network_power(&powers, &[4, 4], &params).unwrap();
        params.p_fix = fix + 1.0;
        params.p_circuit = circuit + 0.5;
        let high = network_power(&powers, &[4, 4], &params).unwrap();
        prop_assert!(high.p_net >= low.p_net);
        prop_assert_eq!(high.p_pas, low.p_pas);
        prop_assert!(low.p_net >= low.p_pas);
    }

    #[test]
    fn config_toml_round_trip(aps in 1usize..10, m in 1usize..12, users in 1usize..8, q in 1usize..512, seed in 0..=i64::MAX as u64) {
        let mut cfg = SystemConfig::default().with_aps(aps, m).with_users(users).with_subcarriers(q);
        cfg.rng_seed = seed;
        prop_assume!(users <= aps * m);
        let back = SystemConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn seeds_beyond_toml_range_are_rejected() {
    let cfg = SystemConfig { rng_seed: u64::MAX, ..SystemConfig::default() };
    assert!(cfg.validate().is_err());
    assert!(cfg.to_toml_string().is_err());
}

#[test]
fn correlation_set_rejects_non_unit_diagonal() {
    let mut c = nalgebra::DMatrix::identity(3, 3);
    c[(1, 1)] = 2.0;
    assert!(CorrelationSet::from_matrices(vec![c]).is_err());
}
