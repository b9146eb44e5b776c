use gaitmff::extractor::*;
use gaitmff::tensor::gradcheck::{GradCheckConfig, check_param_gradients};
use gaitmff::tensor::{ParamStore, Tape, Tensor, TensorError};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(config: &ExtractorConfig, seed: u64) -> (ParamStore<f64>, Extractor) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = build_extractor(config, "velocity", &mut store, &mut rng).unwrap();
    (store, ex)
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn run(store: &ParamStore<f64>, ex: &Extractor, x: Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let x = tape.constant(x);
    let y = ex.forward(&mut tape, &binding, x).unwrap();
    tape.value(y).clone()
}

#[test]
fn desk_default_output_shape() {
    let config = ExtractorConfig::desk(4);
    let (store, ex) = build(&config, 0);
    let y = run(&store, &ex, random_input(&[1, 4, 24, 16], 1));
    assert_eq!(y.shape(), &[1, 32, 12, 8]);
    assert_eq!(config.output_shape([1, 4, 24, 16]), [1, 32, 12, 8]);
}

#[test]
fn output_shape_matches_closed_form_over_a_config_matrix() {
    let stage_plans = [
        vec![StageSpec::new(1, 8, 1)],
        vec![StageSpec::new(1, 8, 2)],
        vec![StageSpec::new(2, 8, 1), StageSpec::new(1, 12, 2)],
        vec![
            StageSpec::new(1, 4, 2),
            StageSpec::new(1, 8, 2),
            StageSpec::new(1, 8, 1),
        ],
        vec![StageSpec::new(1, 6, 3)],
    ];
    for (k, stages) in stage_plans.into_iter().enumerate() {
        for (h, w) in [(10, 16), (18, 16), (24, 16), (7, 5)] {
            let config = ExtractorConfig {
                input_channels: 3,
                stem_channels: 4,
                stages: stages.clone(),
            };
            let (store, ex) = build(&config, k as u64);
            let y = run(&store, &ex, random_input(&[2, 3, h, w], 5));
            let want = config.output_shape([2, 3, h, w]);
            assert_eq!(y.shape(), &want, "plan {k} at {h}x{w}");
            let closed = config.stages.iter().fold((h, w), |(h, w), s| {
                ((h + 2 - 3) / s.stride + 1, (w + 2 - 3) / s.stride + 1)
            });
            assert_eq!((want[2], want[3]), closed);
        }
    }
}

#[test]
fn same_seed_same_parameters_and_stable_names() {
    let config = ExtractorConfig::desk(4);
    let (a, _) = build(&config, 42);
    let (b, _) = build(&config, 42);
    assert_eq!(a, b);
    let (c, _) = build(&config, 43);
    assert_ne!(a, c);
    let names: Vec<&str> = a.names().collect();
    assert_eq!(names[0], "extractor.velocity.stem");
    assert!(names.contains(&"extractor.velocity.stage0.block0.reduce"));
    assert!(names.contains(&"extractor.velocity.stage1.block0.project"));
    assert!(!names.contains(&"extractor.velocity.stage0.block0.project"));
    assert!(!names.contains(&"extractor.velocity.stage1.block1.project"));
    assert!(names.iter().all(|n| n.starts_with("extractor.velocity.")));
}

#[test]
fn projection_exists_exactly_when_shapes_change() {
    let (_, ex) = build(&ExtractorConfig::desk(4), 0);
    let flags: Vec<bool> = ex.blocks().map(|b| b.projection.is_some()).collect();
    assert_eq!(flags, vec![false, false, true, false]);
    let wider = ExtractorConfig {
        input_channels: 2,
        stem_channels: 8,
        stages: vec![StageSpec::new(2, 16, 1)],
    };
    let (_, ex) = build(&wider, 0);
    let flags: Vec<bool> = ex.blocks().map(|b| b.projection.is_some()).collect();
    assert_eq!(flags, vec![true, false]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut config = ExtractorConfig::desk(4);
    config.stages.clear();
    assert!(matches!(
        build_extractor(&config, "x", &mut store, &mut rng),
        Err(ExtractorError::InvalidConfig(_))
    ));
    let mut config = ExtractorConfig::desk(4);
    config.stages[1].width = 0;
    assert!(build_extractor(&config, "x", &mut store, &mut rng).is_err());
    assert!(store.is_empty());
}

#[test]
fn channel_mismatch_is_an_error() {
    let (store, ex) = build(&ExtractorConfig::desk(4), 0);
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let x = tape.constant(random_input(&[1, 3, 24, 16], 0));
    assert_eq!(
        ex.forward(&mut tape, &binding, x),
        Err(ExtractorError::ChannelMismatch {
            expected: 4,
            found: 3
        })
    );
    let flat = tape.constant(random_input(&[4, 24, 16], 0));
    assert!(matches!(
        ex.forward(&mut tape, &binding, flat),
        Err(ExtractorError::Tensor(TensorError::ShapeMismatch { .. }))
    ));
}

#[test]
fn zeroed_residual_block_is_the_identity_on_non_negative_input() {
    let config = ExtractorConfig {
        input_channels: 8,
        stem_channels: 8,
        stages: vec![StageSpec::new(1, 8, 1)],
    };
    let (mut store, ex) = build(&config, 3);
    let block = ex.block(0, 0).unwrap().clone();
    assert!(block.projection.is_none());
    for id in block.residual_params() {
        let shape = store.get(id).tensor.shape().to_vec();
        *store.tensor_mut(id) = Tensor::zeros(&shape);
    }
    let x = random_input(&[2, 8, 6, 5], 9).map(f64::abs);
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let xv = tape.variable(x.clone());
    let y = block.forward(&mut tape, &binding, xv).unwrap();
    assert_eq!(tape.value(y), &x);

    // the skip path carries the gradient unchanged where x > 0
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let gx = grads.get(xv).unwrap();
    for (&g, &v) in gx.data().iter().zip(x.data()) {
        assert_eq!(g, if v > 0.0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn outputs_are_finite_for_many_seeds() {
    let config = ExtractorConfig::desk(3);
    for seed in 0..100 {
        let (store, ex) = build(&config, seed);
        let y = run(
            &store,
            &ex,
            random_input(&[1, 3, 12, 16], 1000 + seed).map(|v| v * 10.0),
        );
        assert!(y.is_finite(), "seed {seed}");
    }
}

#[test]
fn stem_gradient_matches_finite_differences() {
    let config = ExtractorConfig {
        input_channels: 2,
        stem_channels: 4,
        stages: vec![StageSpec::new(1, 4, 1), StageSpec::new(1, 8, 2)],
    };
    let (store, ex) = build(&config, 11);
    let x = random_input(&[1, 2, 10, 16], 12);
    let check = GradCheckConfig {
        max_probes_per_input: 40,
        ..GradCheckConfig::default()
    };
    let report = check_param_gradients(
        &store,
        &check,
        |tape, binding| -> Result<_, ExtractorError> {
            let xv = tape.constant(x.clone());
            let y = ex.forward(tape, binding, xv)?;
            Ok(tape.mean(y))
        },
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert!(report.probed > 100);
}

#[test]
fn fifty_layer_plan_is_expressible() {
    let config = ExtractorConfig::fifty_layer(4);
    config.validate().unwrap();
    assert_eq!(config.weighted_layers(), 49);
    assert_eq!(config.output_shape([1, 4, 64, 32]), [1, 2048, 8, 4]);
    assert_eq!(bottleneck_width(256), 64);
}
