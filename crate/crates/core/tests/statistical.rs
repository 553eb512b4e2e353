use carmm::graph::{make_grid, morans_i};
use carmm::linalg;
use carmm::membership::simulate_membership_matrix;
use carmm::model::simulate::simulate_dataset;
use carmm::model::{Likelihood, ModelConfig, ModelSpec, ParamVector, Parameterisation, Spatial};
use carmm::rng::rng_from_seed;
use carmm::sampler::{run_chains, GaussianTarget, SamplerConfig, Target};
use carmm::sbc::{build_design, run_cell, sbc_replicate, SbcStudyConfig, Scenario};
use carmm::scoring::mixed_ppp;
use carmm::{CarParams, CarPrior};
use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn toy_spec(cfg: ModelConfig, m: usize, seed: u64) -> ModelSpec {
    let g = make_grid(3, 3).unwrap();
    let h = simulate_membership_matrix(&g, m, seed).unwrap();
    let x = DMatrix::from_fn(9, 2, |i, k| ((i + 3 * k) % 5) as f64 / 4.0);
    ModelSpec::new(cfg, g, h, x, vec![20.0; m]).unwrap()
}

#[test]
fn disjoint_seeds_agree_on_gaussian_means() {
    let prec = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 4.0]);
    let target = GaussianTarget::new(vec![1.0, -2.0, 0.5], prec).unwrap();
    let run = |seed| run_chains(&target, &SamplerConfig { chains: 4, iterations: 4000, seed, ..SamplerConfig::default() }).unwrap();
    let (a, b) = (run(100), run(900));
    let normal = Normal::standard();
    for k in 0..3 {
        let stats = |s: &carmm::PosteriorSamples| {
            let c = s.column(k);
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var / s.ess[k])
        };
        let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
        let z = (ma - mb) / (va + vb).sqrt();
        let p = 2.0 * (1.0 - normal.cdf(z.abs()));
        assert!(p > 0.01, "coordinate {k}: means {ma} vs {mb}, p = {p}");
    }
}

#[test]
fn accepted_states_have_finite_log_posterior() {
    for lik in [Likelihood::Poisson, Likelihood::NegBin] {
        let spec = toy_spec(ModelConfig { likelihood: lik, ..ModelConfig::default() }, 12, 4);
        let mut rng = rng_from_seed(5);
        let (_, y) = simulate_dataset(&spec, Parameterisation::Post, &mut rng).unwrap();
        let spec = spec.with_counts(y).unwrap();
        let s = run_chains(&spec, &SamplerConfig { chains: 2, iterations: 600, seed: 6, ..SamplerConfig::default() }).unwrap();
        let layout = spec.layout();
        for d in s.flat_draws() {
            let theta = layout.unflatten(d).unwrap();
            let (lp, _) = spec.log_posterior_unconstrained(&spec.unconstrain(&theta).unwrap()).unwrap();
            assert!(lp.is_finite());
            let (lp, _) = spec.log_density_grad(&spec.to_sampling(&theta).unwrap()).unwrap();
            assert!(lp.is_finite());
        }
    }
}

#[test]
fn post_and_inverse_differ_by_a_constant_at_square_h() {
    let post = toy_spec(ModelConfig::default(), 9, 8);
    let inv = toy_spec(ModelConfig { parameterisation: Parameterisation::Inverse, ..ModelConfig::default() }, 9, 8);
    let y: Vec<u64> = (0..9).map(|j| 15 + 2 * j as u64).collect();
    let (post, inv) = (post.with_counts(y.clone()).unwrap(), inv.with_counts(y).unwrap());
    let h = post.membership().weights().clone();
    let shift = -linalg::log_abs_det(&h);
    let mut rng = rng_from_seed(9);
    for _ in 0..20 {
        let phi: Vec<f64> = (0..9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let theta = ParamVector {
            gamma: rng.random_range(-0.3..0.3),
            beta: vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            phi: phi.clone(),
            alpha: Some(rng.random_range(0.05..0.95)),
            tau: Some(rng.random_range(0.5..5.0)),
            psi: None,
        };
        let theta_inv = ParamVector { phi: post.membership().apply(&phi), ..theta.clone() };
        let lp_post = post.log_posterior_unconstrained(&post.unconstrain(&theta).unwrap()).unwrap().0;
        let lp_inv = inv.log_posterior_unconstrained(&inv.unconstrain(&theta_inv).unwrap()).unwrap().0;
        assert!((lp_inv - lp_post - shift).abs() < 1e-8, "{lp_inv} - {lp_post} != {shift}");
    }
}

#[test]
fn car_draws_show_positive_spatial_autocorrelation() {
    let g = make_grid(6, 6).unwrap();
    let prior = CarPrior::new(g.clone());
    let p = CarParams::new(0.95, 1.0).unwrap();
    let mean_i: f64 = (0..200).map(|s| morans_i(&g, &prior.sample_prior(p, s)).unwrap()).sum::<f64>() / 200.0;
    let p0 = CarParams::new(0.0, 1.0).unwrap();
    let null_i: f64 = (0..200).map(|s| morans_i(&g, &prior.sample_prior(p0, s)).unwrap()).sum::<f64>() / 200.0;
    assert!(mean_i > 0.2, "{mean_i}");
    assert!((null_i + 1.0 / 35.0).abs() < 0.03, "{null_i}");
}

#[test]
fn mixed_ppp_is_a_probability() {
    let spec = toy_spec(ModelConfig::default(), 12, 10);
    let mut rng = rng_from_seed(11);
    let (_, y) = simulate_dataset(&spec, Parameterisation::Post, &mut rng).unwrap();
    let spec = spec.with_counts(y).unwrap();
    let s = run_chains(&spec, &SamplerConfig { chains: 2, iterations: 600, seed: 12, ..SamplerConfig::default() }).unwrap();
    let p = mixed_ppp(&spec, &s, 13).unwrap();
    assert_eq!(p.len(), 12);
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(p, mixed_ppp(&spec, &s, 13).unwrap());
}

#[test]
fn glm_mm_chains_converge_across_seeded_replications() {
    let cfg = SbcStudyConfig::default();
    let design = build_design(&cfg).unwrap();
    let (h, e) = design.memberships[&20].clone();
    let model = ModelConfig { spatial: Spatial::None, ..ModelConfig::default() };
    let spec = ModelSpec::new(model, design.graph.clone(), h, design.x.clone(), e).unwrap();
    let mut converged = 0;
    for r in 0..20 {
        let mut rng = rng_from_seed(500 + r);
        let (_, y) = simulate_dataset(&spec, Parameterisation::Post, &mut rng).unwrap();
        let fit = spec.clone().with_counts(y).unwrap();
        let s = run_chains(&fit, &SamplerConfig { seed: 600 + r, ..cfg.sampler }).unwrap();
        if s.max_rhat() <= 1.01 {
            converged += 1;
        }
    }
    assert!(converged >= 19, "{converged} of 20 replications reached R-hat <= 1.01");
}

fn tiny_study() -> SbcStudyConfig {
    SbcStudyConfig {
        rows: 2,
        cols: 3,
        membership_sizes: vec![4, 6],
        scenarios: vec![Scenario::POST_POST, Scenario::POST_INVERSE],
        replicates: 6,
        sampler: SamplerConfig { chains: 2, iterations: 400, thin: 4, ..SamplerConfig::default() },
        rhat_threshold: 10.0,
        ..SbcStudyConfig::default()
    }
}

#[test]
fn sbc_cells_replay_from_the_study_seed() {
    let cfg = tiny_study();
    let design = build_design(&cfg).unwrap();
    let a = run_cell(&cfg, &design, Scenario::POST_INVERSE, 4).unwrap();
    let b = run_cell(&cfg, &design, Scenario::POST_INVERSE, 4).unwrap();
    assert_eq!(a.ranks, b.ranks);
    assert_eq!(a.exclusions.replicates, 6);
    let c = run_cell(&SbcStudyConfig { seed: cfg.seed + 1, ..cfg.clone() }, &design, Scenario::POST_INVERSE, 4).unwrap();
    assert_ne!(a.ranks, c.ranks);
    for r in &a.ranks {
        assert!(r.rank <= r.b);
        assert_eq!(r.b, 100);
    }
}

#[test]
fn replicate_truth_is_shared_across_membership_sizes() {
    let cfg = tiny_study();
    let design = build_design(&cfg).unwrap();
    let spec = |m: usize| {
        let (h, e) = design.memberships[&m].clone();
        ModelSpec::new(ModelConfig::default(), design.graph.clone(), h, design.x.clone(), e).unwrap()
    };
    let a = sbc_replicate(&spec(4), Parameterisation::Post, &cfg.sampler, 77).unwrap();
    let b = sbc_replicate(&spec(6), Parameterisation::Post, &cfg.sampler, 77).unwrap();
    assert_eq!(a.truth.areal_phi, b.truth.areal_phi);
    assert_eq!(a.truth.gamma, b.truth.gamma);
    assert_eq!(b.truth.membership_phi[..4], a.truth.membership_phi[..]);
}
