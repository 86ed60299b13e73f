use proptest::prelude::*;
use sigmoid_core::autodiff::{Mlp, MlpSpec, Tensor};
use sigmoid_core::datagen::{generate_dataset, Dataset, NoiseModel, ScenarioConfig};
use sigmoid_core::hyperpinn::{
    build_training_set, loss_and_gradient, loss_data, loss_physics, output_normalization,
    HyperPinnModel, ParamBounds,
};
use sigmoid_core::ode::{make_system, OdeSystem, TimeGrid};
use sigmoid_core::rng::{normal_matrix, stream};
use sigmoid_core::wgan::{
    generate, generator_objective, gradient_penalty, loss_discriminator, loss_e,
    observed_variance, sample_latent, GanNets, WganConfig,
};

fn normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::from_vec(rows, cols, normal_matrix(&mut stream(seed), rows, cols)).unwrap()
}

fn critic(width: usize, hidden: &[usize], seed: u64) -> Mlp {
    Mlp::init(MlpSpec::new(width, hidden, 1).unwrap(), &mut stream(seed))
}

fn toy_dataset(n_obs: usize, sigma: f64, seed: u64) -> Dataset {
    let system = OdeSystem::exponential_decay();
    let grid = TimeGrid::uniform(0.0, 2.0, 11).unwrap();
    let scenario =
        ScenarioConfig::uniform(&system, &["y"], &grid, n_obs, NoiseModel::additive(sigma), seed);
    generate_dataset(&system, &scenario).unwrap()
}

#[test]
fn critic_loss_vanishes_on_identical_samples_without_penalty() {
    let real = normal(8, 5, 1);
    for seed in 0..5 {
        let d = critic(5, &[6, 4], seed);
        assert_eq!(loss_discriminator(&d, &real, &real, 0.0, seed).unwrap(), 0.0);
    }
}

#[test]
fn generator_loss_vanishes_on_identical_samples_without_noise_term() {
    let real = normal(8, 5, 2);
    let e = normal(8, 5, 3);
    let obs_var = vec![0.3; 5];
    for seed in 0..5 {
        let d = critic(5, &[6, 4], seed);
        assert_eq!(generator_objective(&d, &real, &real, &e, &obs_var, 0.0).unwrap(), 0.0);
    }
}

#[test]
fn linear_critic_penalty_is_unit_norm_gap() {
    let (real, fake) = (normal(7, 4, 4), normal(7, 4, 5));
    for seed in 0..5 {
        let d = critic(4, &[], 10 + seed);
        let w = &d.params[0];
        let expected = (w.norm() - 1.0).powi(2);
        for draw in 0..4 {
            let got = gradient_penalty(&d, &real, &fake, draw).unwrap();
            assert!((got - expected).abs() <= 1e-14 * expected.max(1.0), "{got} vs {expected}");
        }
    }
}

#[test]
fn critic_loss_splits_into_gap_and_weighted_penalty() {
    let (real, fake) = (normal(6, 3, 6), normal(6, 3, 7));
    let d = critic(3, &[5], 8);
    let base = loss_discriminator(&d, &real, &fake, 0.0, 9).unwrap();
    let penalty = gradient_penalty(&d, &real, &fake, 9).unwrap();
    let full = loss_discriminator(&d, &real, &fake, 10.0, 9).unwrap();
    assert!((full - (base + 10.0 * penalty)).abs() < 1e-12);
}

#[test]
fn solver_loss_is_weighted_sum_of_parts() {
    let system = make_system("fitzhugh_nagumo").unwrap();
    let bounds = ParamBounds::scaled(&system.true_params.0, 0.5, 1.5).unwrap();
    let set = build_training_set(&system, &bounds, 4, 6, 1).unwrap();
    let (c, s) = output_normalization(&set, system.d_y());
    let model = HyperPinnModel::init(&system, bounds, &[6], &[5], c, s, 2).unwrap();
    let batch: Vec<(usize, usize)> = (0..4).flat_map(|k| (0..6).map(move |j| (k, j))).collect();
    let data = loss_data(&model, &system, &set, &batch).unwrap();
    let physics = loss_physics(&model, &system, &set, &batch).unwrap();
    for (alpha, beta) in [(1.0, 0.001), (0.3, 2.0), (1.0, 0.0)] {
        let (parts, _) = loss_and_gradient(&model, &system, &set, &batch, alpha, beta).unwrap();
        let expected = alpha * data + beta * physics;
        assert!((parts.total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        assert!((parts.data - data).abs() <= 1e-12 * data.max(1.0));
    }
}

#[test]
fn noise_loss_matches_direct_formula() {
    let dataset = toy_dataset(20, 0.05, 3);
    let e = normal(30, dataset.flat_dim(), 4).map(|v| 0.1 * v + 0.01);
    let obs_var = observed_variance(&dataset).unwrap();
    let n = e.rows() as f64;
    let mut expected = 0.0;
    for c in 0..e.cols() {
        let col: Vec<f64> = (0..e.rows()).map(|r| e.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        expected += col.iter().map(|v| v * v).sum::<f64>() / n + (obs_var[c] - var).powi(2);
    }
    assert!((loss_e(&e, &dataset).unwrap() - expected).abs() < 1e-14);
}

#[test]
fn zero_noise_has_loss_equal_to_squared_observed_variance() {
    let dataset = toy_dataset(20, 0.05, 5);
    let obs_var = observed_variance(&dataset).unwrap();
    let e = Tensor::zeros(10, dataset.flat_dim());
    let expected: f64 = obs_var.iter().map(|v| v * v).sum();
    assert!((loss_e(&e, &dataset).unwrap() - expected).abs() < 1e-16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_parameters_stay_inside_the_box(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut config = WganConfig::new(1.0, 1e-4, 1, seed);
        config.noise_dim = 3;
        config.generator_p_hidden = vec![8];
        config.generator_e_hidden = vec![4];
        config.discriminator_hidden = vec![4];
        let mut nets = GanNets::init(&config, 3, 5).unwrap();
        // Blow up the weights so the squashing saturates.
        for t in &mut nets.generator_p.params {
            *t = t.map(|v| v * scale);
        }
        let bounds = ParamBounds::new(vec![0.1, -2.0, 3.0], vec![0.3, 5.0, 3.5]).unwrap();
        let z_p = sample_latent(64, 3, seed ^ 1);
        let z_e = sample_latent(64, 3, seed ^ 2);
        let (p, e) = generate(&nets, &z_p, &z_e, &bounds).unwrap();
        prop_assert_eq!(e.shape(), (64, 5));
        for r in 0..p.rows() {
            for c in 0..3 {
                let v = p.get(r, c);
                prop_assert!(v >= bounds.lower[c] && v <= bounds.upper[c], "{v} outside column {c}");
            }
        }
    }

    #[test]
    fn noise_loss_is_nonnegative(seed in any::<u64>(), s in 0.0f64..2.0) {
        let dataset = toy_dataset(5, 0.1, 7);
        let e = normal(6, dataset.flat_dim(), seed).map(|v| s * v);
        prop_assert!(loss_e(&e, &dataset).unwrap() >= 0.0);
    }
}
