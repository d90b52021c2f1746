use super::*;
use crate::instances::{abs_example_env, abs_example_penalty, random_instance, random_instance_seeded, Instance, InstanceSpec};
use crate::numeric::{fd, sym_min_eigenvalue};
use crate::oracle::pointwise_sup_value;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::f64::consts::{E, LN_2};

fn instances(seed: u64, n: usize) -> Vec<Instance> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| random_instance(&mut rng, &InstanceSpec::default()).unwrap()).collect()
}

fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-3)
}

fn abs_params(theta: f64) -> PolicyParams {
    PolicyParams::new(Vector::from_vec(vec![theta]), Vector::zeros(1), 10.0).unwrap()
}

#[test]
fn per_sample_loss_identities() {
    for inst in instances(1, 30) {
        let bound = LN_2 + 2.0 * inst.hyper.beta * inst.params.radius_d * inst.env.b_psi();
        for z in inst.env.triples() {
            let (l1, l0) = per_sample_losses(&inst.env, &inst.params, &inst.hyper, z);
            let h = crate::policy::pairwise_logit(&inst.env, &inst.params, z);
            assert!((l1 - l0 + inst.hyper.beta * h).abs() < 1e-10);
            assert!(l1 >= 0.0 && l0 >= 0.0 && l1 <= bound + 1e-12 && l0 <= bound + 1e-12);
        }
        let at_ref = inst.params.at(inst.params.theta_ref.clone());
        let z = inst.env.triples().next().unwrap();
        assert_eq!(per_sample_losses(&inst.env, &at_ref, &inst.hyper, z), (LN_2, LN_2));
    }
}

#[test]
fn sail_loss_at_reference_is_log_two() {
    for inst in instances(2, 20) {
        let at_ref = inst.params.at(inst.params.theta_ref.clone());
        let v = sail_loss_exact(&inst.env, &at_ref, &inst.oracle, &inst.hyper).unwrap();
        assert!((v - LN_2).abs() < 1e-14);
    }
}

#[test]
fn sail_loss_matches_monte_carlo() {
    let inst = random_instance_seeded(5, &InstanceSpec::default()).unwrap();
    let exact = sail_loss_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
    let state = PolicyState::new(&inst.env, &inst.params);
    let sampler = state.sampler();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let n = 100_000;
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let z = sampler.sample(&mut rng);
            let label = rng.random::<f64>() < inst.oracle.true_prob(z);
            sample_loss(&state, inst.hyper.beta, z, label)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - exact).abs() <= 4.0 * (var / n as f64).sqrt());
}

#[test]
fn sail_loss_is_invariant_to_per_prompt_reward_shift() {
    let inst = random_instance_seeded(6, &InstanceSpec::default()).unwrap();
    let shifted: Vec<Vec<f64>> = inst
        .oracle
        .reward_table()
        .into_iter()
        .enumerate()
        .map(|(x, row)| row.into_iter().map(|r| r + 3.0 * x as f64 - 1.5).collect())
        .collect();
    let other = TrueOracle::new(&inst.env, shifted).unwrap();
    let a = sail_loss_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
    let b = sail_loss_exact(&inst.env, &inst.params, &other, &inst.hyper).unwrap();
    assert!((a - b).abs() < 1e-13);
}

#[test]
fn penalty_on_abs_example() {
    let env = abs_example_env();
    assert_eq!(robust_penalty_exact(&env, &abs_params(0.0)).unwrap(), 0.0);
    for &t in &[0.5, 1.0, 2.0, -1.0] {
        let r = robust_penalty_exact(&env, &abs_params(t)).unwrap();
        let closed = 2.0 * t.abs() * t.exp() / (1.0 + t.exp()).powi(2);
        assert!((r - closed).abs() < 1e-12);
        assert!((r - abs_example_penalty(t)).abs() < 1e-15);
    }
    assert!((robust_penalty_exact(&env, &abs_params(1.0)).unwrap() - 0.393_223_9).abs() < 1e-7);
    let gap = robust_penalty_exact(&env, &abs_params(1.0)).unwrap() - robust_penalty_exact(&env, &abs_params(2.0)).unwrap() / 2.0;
    let witness = 2.0 * E * (E - 1.0) * (E.powi(3) - 1.0) / ((1.0 + E).powi(2) * (1.0 + E * E).powi(2));
    assert!((gap - witness).abs() < 1e-12);
    assert!(gap > 0.0);
}

#[test]
fn smoothed_penalty_sandwich_and_limit() {
    for inst in instances(3, 20) {
        let r = robust_penalty_exact(&inst.env, &inst.params).unwrap();
        for &eps in &[1e-2, 1e-6] {
            let re = robust_penalty_smoothed(&inst.env, &inst.params, eps).unwrap();
            assert!(re - r >= -1e-15 && re - r <= eps + 1e-15);
        }
        let at_ref = inst.params.at(inst.params.theta_ref.clone());
        assert!((robust_penalty_smoothed(&inst.env, &at_ref, 1e-3).unwrap() - 1e-3).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 1..=8 {
            let gap = robust_penalty_smoothed(&inst.env, &inst.params, 10f64.powi(-k)).unwrap() - r;
            assert!(gap <= prev + 1e-15);
            prev = gap;
        }
        assert!(prev <= 1e-8 + 1e-15);
    }
}

#[test]
fn decomposition_holds_on_random_instances() {
    for inst in instances(4, 100) {
        let closed = robust_objective_closed_form(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
        let worst = robust_objective_worstcase(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
        assert!((closed - worst).abs() <= 1e-10, "{closed} vs {worst}");
        if inst.hyper.rho == 0.0 {
            let sail = sail_loss_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
            assert_eq!(closed, sail);
        }
    }
}

#[test]
fn worst_case_expectation_equals_pointwise_sup_per_triple() {
    for inst in instances(5, 20) {
        let state = PolicyState::new(&inst.env, &inst.params);
        let cfg = inst.hyper.uncertainty();
        for z in inst.env.triples() {
            let h = state.log_ratio_logit(z);
            let (l1, l0) = (softplus(-inst.hyper.beta * h), softplus(inst.hyper.beta * h));
            let p = worst_case_prob(&inst.oracle, &cfg, &state, z).unwrap();
            let sup = pointwise_sup_value(inst.oracle.true_prob(z), cfg.rho, l1, l0).unwrap();
            assert!((p * l1 + (1.0 - p) * l0 - sup).abs() < 1e-12);
        }
    }
}

#[test]
fn robust_objective_on_abs_example_both_paths() {
    let env = abs_example_env();
    let oracle = TrueOracle::new(&env, vec![vec![0.0, 0.0]]).unwrap();
    let hyper = Hyperparams::for_objective(1.0, 0.05).unwrap();
    let params = abs_params(1.0);
    let closed = robust_objective_closed_form(&env, &params, &oracle, &hyper).unwrap();
    let worst = robust_objective_worstcase(&env, &params, &oracle, &hyper).unwrap();
    // off-diagonal mass 2 sigma(1) sigma(-1); diagonal triples have s = 0
    let off = 2.0 * sigmoid(1.0) * sigmoid(-1.0);
    let expected = (1.0 - off) * LN_2 + off * (0.5 * softplus(-1.0) + 0.5 * softplus(1.0)) + 0.05 * abs_example_penalty(1.0);
    assert!((closed - expected).abs() < 1e-14);
    assert!((closed - worst).abs() < 1e-14);
}

#[test]
fn rejects_inadmissible_radius() {
    let inst = random_instance_seeded(8, &InstanceSpec::default()).unwrap();
    let bad = inst.hyper.with_rho(inst.oracle.delta());
    assert!(matches!(
        robust_objective_closed_form(&inst.env, &inst.params, &inst.oracle, &bad),
        Err(Error::InadmissibleRadius { .. })
    ));
    assert!(robust_objective_worstcase(&inst.env, &inst.params, &inst.oracle, &bad).is_err());
}

#[test]
fn robust_objective_is_affine_and_monotone_in_rho() {
    for inst in instances(6, 20) {
        let r = robust_penalty_exact(&inst.env, &inst.params).unwrap();
        let sail = sail_loss_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..10 {
            let rho = inst.oracle.delta() * k as f64 / 10.0;
            let v = robust_objective_closed_form(&inst.env, &inst.params, &inst.oracle, &inst.hyper.with_rho(rho)).unwrap();
            assert!((v - sail - rho * inst.hyper.beta * r).abs() < 1e-12);
            assert!(v >= prev);
            prev = v;
        }
    }
}

#[test]
fn sail_gradient_matches_finite_differences() {
    for inst in instances(7, 50) {
        let g = sail_grad_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
        let fd = fd::gradient(
            |t| sail_loss_exact(&inst.env, &inst.params.at(t.clone()), &inst.oracle, &inst.hyper).unwrap(),
            &inst.params.theta,
            1e-5,
        );
        assert!(rel_err(&fd, &g) <= 1e-5, "rel err {}", rel_err(&fd, &g));
    }
}

#[test]
fn sail_gradient_norm_bound() {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    for inst in instances(8, 30) {
        let bound = 2.0 * inst.hyper.beta * inst.env.b_psi()
            + 4.0 * inst.env.b_psi() * (LN_2 + 2.0 * inst.hyper.beta * inst.params.radius_d * inst.env.b_psi());
        for _ in 0..10 {
            let t = crate::instances::uniform_on_sphere(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
            let g = sail_grad_exact(&inst.env, &inst.params.at(t), &inst.oracle, &inst.hyper).unwrap();
            assert!(g.norm() <= bound);
        }
    }
}

#[test]
fn sail_gradient_at_reference_with_indifferent_oracle() {
    let inst = random_instance_seeded(11, &InstanceSpec::default()).unwrap();
    let oracle = TrueOracle::new(&inst.env, vec![vec![0.0; inst.env.n_responses()]; inst.env.n_prompts()]).unwrap();
    let at_ref = inst.params.at(inst.params.theta_ref.clone());
    let g = sail_grad_exact(&inst.env, &at_ref, &oracle, &inst.hyper).unwrap();
    // d l/d s = beta (0.5 * 0.5 - 0.5 * 0.5) = 0 and l is constant, so both terms vanish
    assert!(g.norm() < 1e-14);
}

#[test]
fn smoothed_penalty_gradient_matches_finite_differences() {
    for inst in instances(9, 50) {
        let eps = 1e-6;
        let g = robust_penalty_smoothed_grad(&inst.env, &inst.params, eps).unwrap();
        let min_s = inst
            .env
            .triples()
            .filter(|z| z.y1 != z.y2)
            .map(|z| crate::policy::pairwise_logit(&inst.env, &inst.params, z).abs())
            .fold(f64::INFINITY, f64::min);
        // a central difference straddling a kink of width eps cannot resolve it
        if min_s < 1e-3 {
            continue;
        }
        let fd = fd::gradient(
            |t| robust_penalty_smoothed(&inst.env, &inst.params.at(t.clone()), eps).unwrap(),
            &inst.params.theta,
            1e-5,
        );
        assert!(rel_err(&fd, &g) <= 1e-5, "rel err {}", rel_err(&fd, &g));
    }
}

#[test]
fn subgradient_matches_smoothed_gradient_away_from_kinks() {
    let mut checked = 0;
    for inst in instances(10, 60) {
        let min_s = inst
            .env
            .triples()
            .filter(|z| z.y1 != z.y2)
            .map(|z| crate::policy::pairwise_logit(&inst.env, &inst.params, z).abs())
            .fold(f64::INFINITY, f64::min);
        if min_s < 1e-3 {
            continue;
        }
        checked += 1;
        let sub = penalty_subgrad_exact(&inst.env, &inst.params).unwrap();
        let smooth = robust_penalty_smoothed_grad(&inst.env, &inst.params, 1e-8).unwrap();
        assert!((sub - smooth).norm() <= 1e-6);
    }
    assert!(checked > 20);
}

#[test]
fn subgradient_bound_and_lipschitz_penalty() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    for inst in instances(11, 20) {
        let b = inst.env.b_psi();
        let g_sub = 2.0 * b + 8.0 * inst.params.radius_d * b * b;
        for _ in 0..10 {
            let a = crate::instances::uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
            let c = crate::instances::uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
            let pa = inst.params.at(a.clone());
            assert!(penalty_subgrad_exact(&inst.env, &pa).unwrap().norm() <= g_sub);
            let ra = robust_penalty_exact(&inst.env, &pa).unwrap();
            let rc = robust_penalty_exact(&inst.env, &inst.params.at(c.clone())).unwrap();
            assert!((ra - rc).abs() <= g_sub * (a - c).norm() + 1e-12);
        }
    }
}

#[test]
fn subgradient_is_zero_at_reference() {
    let inst = random_instance_seeded(12, &InstanceSpec::default()).unwrap();
    let at_ref = inst.params.at(inst.params.theta_ref.clone());
    assert_eq!(penalty_subgrad_exact(&inst.env, &at_ref).unwrap().norm(), 0.0);
}

#[test]
fn analytic_hessians_match_jacobians_of_gradients() {
    for inst in instances(13, 30) {
        let h = sail_hessian_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
        let j = fd::jacobian(
            |t| sail_grad_exact(&inst.env, &inst.params.at(t.clone()), &inst.oracle, &inst.hyper).unwrap(),
            &inst.params.theta,
            1e-5,
        );
        assert!((&h - &j).norm() <= 1e-5 * h.norm().max(1.0));
        assert!((&h - h.transpose()).norm() <= 1e-12 * h.norm().max(1.0));

        let eps = 1e-2;
        let h = robust_penalty_smoothed_hessian(&inst.env, &inst.params, eps).unwrap();
        let j = fd::jacobian(
            |t| robust_penalty_smoothed_grad(&inst.env, &inst.params.at(t.clone()), eps).unwrap(),
            &inst.params.theta,
            1e-6,
        );
        assert!((&h - &j).norm() <= 1e-4 * h.norm().max(1.0));
    }
}

#[test]
fn smoothed_objective_combines_terms() {
    for inst in instances(14, 20) {
        let eps = 1e-4;
        let hyper = Hyperparams { eps_smooth: eps, ..inst.hyper.clone() };
        let d = smoothed_objective_derivatives(&inst.env, &inst.params, &inst.oracle, &hyper, Order::Hessian).unwrap();
        let sail = sail_derivatives(&inst.env, &inst.params, &inst.oracle, &hyper, Order::Hessian).unwrap();
        let pen = smoothed_penalty_derivatives(&inst.env, &inst.params, eps, Order::Hessian).unwrap();
        let lam = hyper.lambda();
        assert!((d.value - sail.value - lam * pen.value).abs() < 1e-12);
        assert!((d.grad.unwrap() - sail.grad.unwrap() - pen.grad.unwrap() * lam).norm() < 1e-11);
        assert!((d.hessian.unwrap() - sail.hessian.unwrap() - pen.hessian.unwrap() * lam).norm() < 1e-8);
    }
}

#[test]
fn smoothed_hessian_curvature_bound() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    for inst in instances(15, 20) {
        let b = inst.env.b_psi();
        for &eps in &[1e-2, 1e-4] {
            let kappa_eps = 16.0 * b * b + 4.0 * inst.params.radius_d * b.powi(3) + 2.0 * b * b * eps;
            for _ in 0..5 {
                let t = crate::instances::uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
                let h = robust_penalty_smoothed_hessian(&inst.env, &inst.params.at(t), eps).unwrap();
                assert!(sym_min_eigenvalue(&h) >= -kappa_eps - 1e-6);
            }
        }
    }
}

fn secant_slack(f: impl Fn(&Vector) -> f64, a: &Vector, c: &Vector, t: f64, kappa: f64) -> f64 {
    let mid = a * t + c * (1.0 - t);
    t * f(a) + (1.0 - t) * f(c) + kappa * t * (1.0 - t) / 2.0 * (a - c).norm_squared() - f(&mid)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_is_weakly_convex_with_kappa_r(seed in 0u64..10_000, t in 0.01f64..0.99) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, &InstanceSpec::default()).unwrap();
        let a = crate::instances::uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
        let c = crate::instances::uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
        let b = inst.env.b_psi();
        let kappa_r = 16.0 * b * b + 4.0 * inst.params.radius_d * b.powi(3);
        let f = |v: &Vector| robust_penalty_exact(&inst.env, &inst.params.at(v.clone())).unwrap();
        prop_assert!(secant_slack(f, &a, &c, t, kappa_r) >= -1e-10);
    }

    #[test]
    fn penalty_subgradient_inequality(seed in 0u64..10_000) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, &InstanceSpec::default()).unwrap();
        let a = crate::instances::uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
        let c = crate::instances::uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d);
        let b = inst.env.b_psi();
        let kappa_r = 16.0 * b * b + 4.0 * inst.params.radius_d * b.powi(3);
        let pa = inst.params.at(a.clone());
        let v = penalty_subgrad_exact(&inst.env, &pa).unwrap();
        let ra = robust_penalty_exact(&inst.env, &pa).unwrap();
        let rc = robust_penalty_exact(&inst.env, &inst.params.at(c.clone())).unwrap();
        prop_assert!(rc >= ra + v.dot(&(&c - &a)) - kappa_r / 2.0 * (&c - &a).norm_squared() - 1e-10);
    }

    #[test]
    fn closed_form_and_worst_case_agree(seed in 0u64..100_000) {
        let inst = random_instance_seeded(seed, &InstanceSpec::default()).unwrap();
        let closed = robust_objective_closed_form(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
        let worst = robust_objective_worstcase(&inst.env, &inst.params, &inst.oracle, &inst.hyper).unwrap();
        prop_assert!((closed - worst).abs() <= 1e-10);
    }
}
