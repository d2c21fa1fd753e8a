use proptest::prelude::*;
use qntk::classical::Dataset;
use qntk::rng::rng_from_seed;
use qntk::sim::{haar_unitary, haar_unitary_with, u00_fourth_moment_quadrature};
use qntk::theory;
use qntk::*;

fn context(n: usize, layers: usize, seed: u64) -> (ResidualContext, AngleVector) {
    let mut rng = rng_from_seed(seed);
    let ansatz = LayeredAnsatz::randomized_hwe(n, layers, seed ^ 0xabcd).unwrap();
    let theta = ansatz.random_angles(&mut rng);
    let psi0 = StateVector::random(n, &mut rng);
    (ResidualContext::new(ansatz, psi0, Observable::z_sum(n), 0.25).unwrap(), theta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn evolution_preserves_norm(n in 1usize..=5, layers in 1usize..=10, seed in any::<u64>()) {
        let (ctx, theta) = context(n, layers, seed);
        let psi = ctx.ansatz().evaluate(&theta, ctx.psi0()).unwrap();
        prop_assert!((psi.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_shift_rule(n in 1usize..=4, layers in 1usize..=10, seed in any::<u64>()) {
        let (ctx, theta) = context(n, layers, seed);
        let a = ctx.grad_analytic(&theta).unwrap();
        let s = ctx.grad_param_shift_all(&theta).unwrap();
        for (x, y) in a.as_slice().iter().zip(s.as_slice()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_is_squared_gradient_norm(n in 1usize..=4, layers in 1usize..=10, seed in any::<u64>()) {
        let (ctx, theta) = context(n, layers, seed);
        let k = ctx.qntk(&theta).unwrap();
        prop_assert!(k >= 0.0);
        prop_assert!((k - ctx.grad_analytic(&theta).unwrap().norm_sqr()).abs() < 1e-10);
    }

    #[test]
    fn expectation_is_bounded_by_spectrum(n in 1usize..=4, layers in 1usize..=8, seed in any::<u64>()) {
        let (ctx, theta) = context(n, layers, seed);
        prop_assert!(ctx.expectation(&theta).unwrap().abs() <= n as f64 + 1e-12);
    }

    #[test]
    fn haar_samples_are_unitary(n in 1usize..=4, seed in any::<u64>()) {
        prop_assert!(haar_unitary(n, seed).unwrap().unitarity_defect() < 1e-10);
    }

    #[test]
    fn averaged_kernel_is_nonnegative(n in 1usize..=4, layers in 1usize..=64) {
        let traces = Observable::z_sum(n).trace_powers().unwrap();
        let dim = 1usize << n;
        prop_assert!(theory::kbar_exact(layers, &traces, dim).unwrap() >= 0.0);
        prop_assert!(theory::kbar_large_n(layers, &traces, dim) >= 0.0);
    }

    #[test]
    fn crossover_time_balances(eta in 1e-4f64..0.05, k in 1.0f64..20.0, sigma in 1e-4f64..1e-2) {
        let t = theory::t_noise(1.0, eta, k, sigma);
        if t.valid {
            prop_assert!(theory::t_noise_balance_residual(1.0, eta, k, sigma, t.value) < 1e-9);
        }
    }
}

#[test]
fn quadrature_fourth_moment_is_one_third() {
    assert!((u00_fourth_moment_quadrature(400) - 1.0 / 3.0).abs() < 1e-10);
}

#[test]
fn sampled_fourth_moment_matches_quadrature() {
    let mut rng = rng_from_seed(99);
    let samples: Vec<f64> = (0..20_000).map(|_| haar_unitary_with(1, &mut rng).unwrap().matrix()[(0, 0)].norm_sqr().powi(2)).collect();
    let mean = qntk::stats::mean(&samples);
    let se = qntk::stats::std_error(&samples);
    assert!((mean - u00_fourth_moment_quadrature(400)).abs() < 4.0 * se, "mean {mean}, se {se}");
}

#[test]
fn classical_ntk_is_symmetric_and_psd() {
    let data = Dataset::synthetic(6, 4, 1).unwrap();
    for act in [Activation::Tanh, Activation::Linear] {
        let mlp = Mlp::equal_width(4, 32, 2, 2, act, 3).unwrap();
        let h = mlp.ntk(&data.inputs).unwrap();
        assert!(h.symmetry_defect() < 1e-10);
        assert!(h.is_psd());
    }
}
