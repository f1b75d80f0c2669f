mod common;

use common::Check;
use intact_core::ihdp::{bundled_covariates, outcomes_with_coefficients};

fn expect(c: Check) {
    match c {
        Ok(detail) => eprintln!("{detail}"),
        Err(detail) => panic!("{detail}"),
    }
}

#[test]
fn kl_matches_cross_entropy_route() {
    expect(common::kl_closed_form(10_000));
}

#[test]
fn elbo_matches_gauss_hermite() {
    expect(common::elbo_quadrature(10_000));
}

#[test]
fn elbo_is_a_lower_bound_in_the_linear_gaussian_case() {
    expect(common::elbo_below_marginal(10_000));
}

#[test]
fn gauss_hermite_integrates_moments() {
    let (x, w) = common::gauss_hermite(30);
    let pi = std::f64::consts::PI;
    let m0: f64 = w.iter().sum();
    let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
    let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
    assert!((m0 - pi.sqrt()).abs() < 1e-12);
    assert!((m2 - pi.sqrt() / 2.0).abs() < 1e-12);
    assert!((m4 - 0.75 * pi.sqrt()).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    expect(common::gradient_check());
}

#[test]
fn sinkhorn_matches_brute_force_assignment() {
    expect(common::sinkhorn_brute_force(0.01));
}

#[test]
fn linear_heads_give_analytic_cate() {
    expect(common::linear_decoder_identity());
}

#[test]
fn synthetic_invariants_hold() {
    expect(common::synthetic_invariants(10));
}

#[test]
fn sweeps_replay_bit_for_bit() {
    expect(common::end_to_end_determinism());
}

#[test]
fn ihdp_noise_has_unit_variance() {
    let (x, t) = bundled_covariates().unwrap();
    let a = vec![0.1; x.ncols()];
    let mut dev = Vec::new();
    for s in 0..134u64 {
        let g = outcomes_with_coefficients(&x, &t, a.clone(), s).unwrap();
        dev.extend((&g.y0 - &g.mu0).iter().copied());
        dev.extend((&g.y1 - &g.mu1).iter().copied());
    }
    let n = dev.len() as f64;
    let m = dev.iter().sum::<f64>() / n;
    let v = dev.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - 1.0);
    // sd of the sample variance of Gaussian noise is sqrt(2 / n)
    let se = (2.0 / n).sqrt();
    assert!(n >= 1e5);
    assert!((v - 1.0).abs() < 4.0 * se, "variance {v} over {n} draws");
    assert!(m.abs() < 4.0 / n.sqrt(), "mean {m}");
}
