use diffpolicy::aln::{train, TrainConfig, TrainMode};
use diffpolicy::denoiser::{init_params, DenoiserDims, DenoiserQuery};
use diffpolicy::diffusion::ScheduleConfig;
use diffpolicy::envbench::{generate_demos, DemoConfig};
use diffpolicy::nn::{AdamConfig, OptimizerState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fits 10 fixed `(input, noise)` pairs and returns the final loss.
fn memorize(dims: DenoiserDims, steps: usize) -> f64 {
    let mut params = init_params(7, dims, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10;
    let width = dims.action_len();
    let obs: Vec<Vec<f64>> = (0..n).map(|_| (0..dims.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let noisy: Vec<Vec<f64>> = (0..n).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ks: Vec<usize> = (0..n).map(|_| rng.random_range(1..=100)).collect();
    let targets = Array2::from_shape_fn((n, width), |_| rng.random_range(-1.0..1.0));
    let queries: Vec<DenoiserQuery> = (0..n)
        .map(|i| DenoiserQuery {
            obs: &obs[i],
            noisy: &noisy[i],
            k: ks[i],
        })
        .collect();
    let mut opt = OptimizerState::new(&params.net, AdamConfig::default());
    let mut loss = f64::INFINITY;
    for _ in 0..steps {
        let g = params.loss_and_grad(&queries, &targets).unwrap();
        loss = g.mean_loss;
        opt.apply(&mut params.net, &g.grads).unwrap();
    }
    loss
}

#[test]
fn two_layer_net_memorizes_ten_pairs() {
    let dims = DenoiserDims {
        obs_dim: 4,
        horizon: 4,
        action_dim: 2,
        embed_dim: 16,
        hidden: 64,
        hidden_layers: 2,
    };
    let loss = memorize(dims, 500);
    assert!(loss < 1e-3, "loss {loss}");
}

#[test]
fn default_net_memorizes_ten_pairs() {
    let loss = memorize(DenoiserDims::default(), 2000);
    assert!(loss < 1e-3, "loss {loss}");
}

#[test]
fn exact_target_has_zero_loss_and_gradient() {
    let dims = DenoiserDims {
        hidden: 16,
        embed_dim: 8,
        ..DenoiserDims::default()
    };
    let params = init_params(1, dims, 100).unwrap();
    let obs = vec![0.3; dims.obs_dim];
    let noisy = vec![-0.2; dims.action_len()];
    let q = [DenoiserQuery {
        obs: &obs,
        noisy: &noisy,
        k: 40,
    }];
    let out = params.predict_batch(&q).unwrap();
    let g = params.loss_and_grad(&q, &out).unwrap();
    assert_eq!(g.mean_loss, 0.0);
    assert!(g.grads.params().all(|&v| v == 0.0));
}

fn small_config(total_steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        batch_size: 8,
        warmup_steps: 20,
        dims: DenoiserDims {
            hidden: 32,
            embed_dim: 16,
            ..DenoiserDims::default()
        },
        schedule: ScheduleConfig::default(),
        snapshot_every: 10,
        ..TrainConfig::default()
    }
}

fn demos() -> diffpolicy::envbench::DemoDataset {
    generate_demos(&DemoConfig {
        episodes: 6,
        ..DemoConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_steps_returns_initial_params_and_empty_report() {
    let data = demos();
    let config = small_config(0);
    for mode in [TrainMode::UniformBaseline, TrainMode::Aln] {
        let config = TrainConfig {
            warmup_steps: 0,
            ..config.clone()
        };
        let (params, report) = train(&config, &data, mode).unwrap();
        let init = init_params(config.seed, config.dims, config.schedule.steps).unwrap();
        assert_eq!(params.net, init.net);
        assert!(report.is_empty());
        assert_eq!(report.gradient_steps, 0);
    }
}

#[test]
fn modes_share_the_warmup_loss_trace() {
    let data = demos();
    let config = small_config(40);
    let (_, uniform) = train(&config, &data, TrainMode::UniformBaseline).unwrap();
    let (_, aln) = train(&config, &data, TrainMode::Aln).unwrap();
    let w = config.warmup_steps;
    assert_eq!(uniform.losses()[..w], aln.losses()[..w]);
    assert_eq!(uniform.losses().len(), 40);
    assert_eq!(aln.sampler_snapshots.len(), 4);
}

#[test]
fn training_is_deterministic() {
    let data = demos();
    let config = small_config(30);
    let (a, ra) = train(&config, &data, TrainMode::Aln).unwrap();
    let (b, rb) = train(&config, &data, TrainMode::Aln).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn training_reduces_loss() {
    let data = demos();
    let config = TrainConfig {
        batch_size: 32,
        ..small_config(600)
    };
    let (_, report) = train(&config, &data, TrainMode::UniformBaseline).unwrap();
    let l = report.losses();
    let head = l[..50].iter().sum::<f64>() / 50.0;
    let tail = l[l.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail < 0.7 * head, "head {head} tail {tail}");
}
