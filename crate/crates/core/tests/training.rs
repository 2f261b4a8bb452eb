use ffpe_core::autograd::{Exec, Graph};
use ffpe_core::losses::LossWeights;
use ffpe_core::tensor::Tensor;
use ffpe_core::train::{discriminator_step, tiny_config, train_step, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn constant(side: usize, v: f32) -> Tensor<f32> {
    Tensor::full(&[1, 3, side, side], v)
}

fn translate_in_graph(state: &TrainState<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let p = state.generator.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = state.generator.forward(&mut g, &p, &xv).unwrap();
    g.value(&y).clone()
}

#[test]
fn discriminator_alone_separates_bright_from_dark() {
    let cfg = tiny_config(1);
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    let generator = state.generator.params.clone();
    let bright = constant(32, 0.8);
    let fake = state.generator.translate(&constant(32, -0.8)).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..100 {
        last = discriminator_step(&mut state, &cfg, &bright, &fake, cfg.lr).unwrap();
    }
    let real = state.discriminator.score(&bright).unwrap().mean_f64();
    let faked = state.discriminator.score(&fake).unwrap().mean_f64();
    assert!(last < 0.05, "gan_D after 100 steps: {last}");
    assert!(real > faked, "real {real} vs fake {faked}");
    assert_eq!(state.generator.params, generator);
}

#[test]
fn self_regularization_alone_pulls_the_generator_to_identity() {
    let weights = LossWeights { lambda_gan: 0.0, lambda_x: 0.0, lambda_y: 0.0, ..Default::default() };
    let mut cfg = TrainConfig { loss_weights: weights, ..tiny_config(2) };
    cfg.generator.base_channels = 16;
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::rand_uniform(&[1, 3, 16, 16], -0.9, 0.9, &mut rng);
    let y = Tensor::rand_uniform(&[1, 3, 16, 16], -0.9, 0.9, &mut rng);
    let sreg = |s: &TrainState<f32>| {
        let gx = s.generator.translate(&x).unwrap();
        gx.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / x.numel() as f64
    };
    let initial = sreg(&state);
    for _ in 0..500 {
        let r = train_step(&mut state, &cfg, &x, &y, cfg.lr).unwrap();
        assert!((r.total - cfg.loss_weights.lambda_sreg * r.sreg).abs() < 1e-9);
    }
    let end = sreg(&state);
    assert!(end < 0.1 * initial, "sreg {initial} -> {end}");
}

#[test]
fn each_phase_only_moves_its_own_network() {
    let cfg = tiny_config(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::rand_uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
    let y = Tensor::rand_uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
    let start = TrainState::<f32>::new(&cfg).unwrap();

    let mut d_only = start.clone();
    let fake = translate_in_graph(&start, &x);
    discriminator_step(&mut d_only, &cfg, &y, &fake, cfg.lr).unwrap();
    assert_eq!(d_only.generator.params, start.generator.params);
    assert_eq!(d_only.heads.params, start.heads.params);
    assert_ne!(d_only.discriminator.params, start.discriminator.params);

    // The generator phase of a full step sees the updated discriminator and
    // leaves it as the discriminator phase left it.
    let mut full = start.clone();
    train_step(&mut full, &cfg, &x, &y, cfg.lr).unwrap();
    assert_eq!(full.discriminator.params, d_only.discriminator.params);
    assert_ne!(full.generator.params, start.generator.params);
    assert_ne!(full.heads.params, start.heads.params);
}

#[test]
fn repeated_steps_are_bit_identical() {
    let cfg = tiny_config(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::rand_uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
    let y = Tensor::rand_uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
    let mut a = TrainState::<f32>::new(&cfg).unwrap();
    let mut b = TrainState::<f32>::new(&cfg).unwrap();
    for _ in 0..5 {
        let ra = train_step(&mut a, &cfg, &x, &y, cfg.lr).unwrap();
        let rb = train_step(&mut b, &cfg, &x, &y, cfg.lr).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.snapshot(), b.snapshot());
}
