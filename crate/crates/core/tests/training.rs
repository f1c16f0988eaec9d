//! Training-behavior integration tests: overfit sanity on one fixed batch,
//! the analytic noisy-PSNR anchor, schedule neutrality of shapes,
//! determinism, and the divergence error path.

use kgt_core::attention::Backend;
use kgt_core::model::{Net, NetConfig};
use kgt_core::train::{
    add_noise, cosine_lr, psnr, run_training, synth_patch, train_step, Adam, TopkSchedule,
    TrainConfig,
};
use kgt_core::{KgtError, Tensor};

/// One fixed batch at the documented defaults must overfit: loss halves by
/// step 200 and drops below 20% of its initial value within 500 steps.
#[test]
fn overfit_single_fixed_batch() {
    let cfg = NetConfig::default();
    let mut net = Net::<f32>::init(&cfg).unwrap();
    let mut opt = Adam::new(&net);
    let batch: Vec<_> = (0..8)
        .map(|i| {
            let clean = synth_patch(9000 + i, 64).unwrap();
            let noisy = add_noise(&clean, 25.0, 9100 + i);
            (noisy, clean)
        })
        .collect();

    let total = 500usize;
    let mut loss1 = None;
    let mut loss200 = None;
    let mut reached_fifth = None;
    for step in 0..total {
        let k = [4usize, 8, 16, 32][step % 4];
        let lr = cosine_lr(2e-4, step, total);
        let loss = train_step(&mut net, &batch, &mut opt, lr, k, Backend::Gather).unwrap();
        let l1 = *loss1.get_or_insert(loss);
        if step + 1 == 200 {
            loss200 = Some(loss);
        }
        if loss < 0.2 * l1 && reached_fifth.is_none() {
            reached_fifth = Some(step + 1);
        }
        // both conditions observable once step 200 has been recorded
        if loss200.is_some() && reached_fifth.is_some() {
            break;
        }
    }
    let l1 = loss1.unwrap();
    let l200 = loss200.expect("ran at least 200 steps");
    assert!(
        l200 < 0.5 * l1,
        "loss at step 200 ({l200}) did not halve from step 1 ({l1})"
    );
    let hit = reached_fifth.expect("loss never fell below 20% of initial within 500 steps");
    println!("overfit: loss1 {l1:.5}, loss200 {l200:.5}, below 20% at step {hit}");
}

/// The measured PSNR of unclamped Gaussian noise matches the closed form
/// `10 log10(255^2 / sigma^2)` within 0.5 dB on 64x64 patches.
#[test]
fn noisy_psnr_matches_analytic_expectation() {
    for sigma in [15.0f64, 25.0, 50.0] {
        let analytic = 10.0 * (255.0 * 255.0 / (sigma * sigma)).log10();
        let mut acc = 0.0;
        let n = 12;
        for i in 0..n {
            let clean = synth_patch(7000 + i, 64).unwrap();
            let noisy = add_noise(&clean, sigma, 7100 + i);
            acc += psnr(&noisy, &clean);
        }
        let measured = acc / n as f64;
        assert!(
            (measured - analytic).abs() <= 0.5,
            "sigma {sigma}: measured {measured:.3} dB vs analytic {analytic:.3} dB"
        );
    }
    // the sigma=25 anchor specifically
    let analytic25 = 10.0 * (255.0f64 * 255.0 / (25.0 * 25.0)).log10();
    assert!((analytic25 - 20.172).abs() < 5e-3);
}

/// A checkpoint trained under the random schedule evaluates without error
/// at every k in [1, window^2 - 1].
#[test]
fn random_schedule_checkpoint_accepts_every_k() {
    let net_cfg = NetConfig {
        channels: 8,
        n_stages: 1,
        n_layers: 1,
        schedule: TopkSchedule::Random(vec![2, 4, 8]),
        ..NetConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: 3,
        batch: 2,
        patch: 16,
        schedule: TopkSchedule::Random(vec![2, 4, 8]),
        eval_every: 3,
        eval_count: 1,
        ..TrainConfig::default()
    };
    let mut net = Net::<f32>::init(&net_cfg).unwrap();
    run_training(&mut net, &train_cfg, &mut std::io::sink()).unwrap();

    let img = synth_patch(1234, 16).unwrap();
    let hw = net_cfg.window * net_cfg.window;
    for k in 1..hw {
        net.forward(&img, k, Backend::Streaming { block: 7 })
            .unwrap_or_else(|e| panic!("k={k} failed: {e}"));
    }
}

/// Identical seeds give bitwise-identical training trajectories.
#[test]
fn training_is_deterministic() {
    let net_cfg = NetConfig {
        channels: 8,
        n_stages: 1,
        n_layers: 2,
        seed: 3,
        ..NetConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: 5,
        batch: 3,
        patch: 16,
        seed: 17,
        eval_every: 2,
        eval_count: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = Net::<f32>::init(&net_cfg).unwrap();
        let mut log = Vec::new();
        run_training(&mut net, &train_cfg, &mut log).unwrap();
        (String::from_utf8(log).unwrap(), net.to_bytes())
    };
    let (log_a, bytes_a) = run();
    let (log_b, bytes_b) = run();
    assert_eq!(log_a, log_b, "loss trajectories must match");
    assert_eq!(bytes_a, bytes_b, "final weights must match bitwise");
}

/// lr = 0 leaves every parameter untouched.
#[test]
fn zero_learning_rate_changes_nothing() {
    let net_cfg = NetConfig {
        channels: 4,
        n_stages: 1,
        n_layers: 1,
        window: 4,
        ..NetConfig::default()
    };
    let mut net = Net::<f32>::init(&net_cfg).unwrap();
    let before = net.to_bytes();
    let mut opt = Adam::new(&net);
    let clean = synth_patch(1, 16).unwrap();
    let noisy = add_noise(&clean, 25.0, 2);
    train_step(&mut net, &[(noisy, clean)], &mut opt, 0.0, 3, Backend::Mask).unwrap();
    assert_eq!(net.to_bytes(), before);
}

/// A non-finite loss surfaces as a divergence error carrying the step.
#[test]
fn divergence_is_reported_with_step_index() {
    let net_cfg = NetConfig {
        channels: 4,
        n_stages: 1,
        n_layers: 1,
        window: 4,
        ..NetConfig::default()
    };
    let mut net = Net::<f32>::init(&net_cfg).unwrap();
    // poison one weight so the forward pass overflows
    net.extract_w.value = Tensor::full(&[4, 1, 3, 3], 1e30);
    let train_cfg = TrainConfig {
        steps: 2,
        batch: 1,
        patch: 16,
        eval_every: 10,
        eval_count: 1,
        ..TrainConfig::default()
    };
    let err = run_training(&mut net, &train_cfg, &mut std::io::sink()).unwrap_err();
    assert!(
        matches!(err, KgtError::Diverged { step: 0 }),
        "unexpected error {err:?}"
    );
}
