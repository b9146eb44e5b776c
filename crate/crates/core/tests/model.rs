use gaitmff::extractor::StageSpec;
use gaitmff::model::*;
use gaitmff::tensor::gradcheck::{GradCheckConfig, check_param_gradients};
use gaitmff::tensor::{ParamStore, Tape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn batch(n: usize, frames: usize, seed: u64) -> BranchBatch<f64> {
    BranchBatch {
        proportion: random(&[n, PROPORTION_CHANNELS, frames, 16], seed),
        velocity: random(&[n, VELOCITY_CHANNELS, frames - 6, 16], seed + 1),
        skeletal: random(&[n, SKELETAL_CHANNELS, frames, 16], seed + 2),
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        stages: vec![StageSpec::new(1, 4, 1)],
        reduction_ratio: 2,
    }
}

fn build(
    config: &ModelConfig,
    mask: BranchMask,
    classes: usize,
    seed: u64,
) -> (ParamStore<f64>, GaitModel) {
    let mut store = ParamStore::new();
    let model = build_model(
        config,
        mask,
        classes,
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    (store, model)
}

fn logits(
    store: &ParamStore<f64>,
    model: &GaitModel,
    b: &BranchBatch<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let out = model
        .forward::<f64, ChaCha8Rng>(&mut tape, &binding, b, None)
        .unwrap();
    (
        tape.value(out.global).clone(),
        tape.value(out.logits).clone(),
    )
}

#[test]
fn default_model_output_shapes() {
    let config = ModelConfig::default();
    let (store, model) = build(&config, BranchMask::ALL, 12, 0);
    let (global, logits) = logits(&store, &model, &batch(3, 20, 1));
    assert_eq!(global.shape(), &[3, config.embedding_dim()]);
    assert_eq!(logits.shape(), &[3, 12]);
    assert!(global.is_finite() && logits.is_finite());
    assert_eq!(model.embed(&store, &batch(3, 20, 1)).unwrap(), global);
}

#[test]
fn masked_branches_have_no_parameters() {
    for label in ["V", "P+S", "P+V", "S+V", "P+S+V"] {
        let mask: BranchMask = label.parse().unwrap();
        let (store, _) = build(&tiny(), mask, 3, 0);
        let has = |prefix: &str| store.names().any(|n| n.starts_with(prefix));
        assert_eq!(has("extractor.proportion."), mask.proportion, "{label}");
        assert_eq!(has("extractor.skeletal."), mask.skeletal, "{label}");
        assert_eq!(has("extractor.velocity."), mask.velocity, "{label}");
        assert!(has("mff.") && has("classifier."), "{label}");
    }
}

#[test]
fn velocity_only_ignores_spatial_inputs_and_zeroes_their_channels() {
    let config = tiny();
    let (store, model) = build(&config, BranchMask::VELOCITY, 4, 2);
    let a = batch(2, 12, 10);
    let mut b = a.clone();
    b.proportion = random(b.proportion.shape(), 99);
    b.skeletal = random(b.skeletal.shape(), 98);
    let (ga, la) = logits(&store, &model, &a);
    let (gb, lb) = logits(&store, &model, &b);
    assert_eq!(ga, gb);
    assert_eq!(la, lb);
    let cw = config.fusion().spatial_channels;
    let dim = config.embedding_dim();
    for n in 0..2 {
        assert!((0..cw).all(|c| ga.at(&[n, c]) == 0.0));
        assert!((cw..dim).any(|c| ga.at(&[n, c]) != 0.0));
    }
}

#[test]
fn same_seed_same_model() {
    let (a, _) = build(&tiny(), BranchMask::ALL, 5, 7);
    let (b, _) = build(&tiny(), BranchMask::ALL, 5, 7);
    let (c, _) = build(&tiny(), BranchMask::ALL, 5, 8);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_builds_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(build_model(&tiny(), BranchMask::ALL, 1, &mut store, &mut rng).is_err());
    let none = BranchMask::new(false, false, false);
    assert!(build_model(&tiny(), none, 3, &mut store, &mut rng).is_err());
    let bad = ModelConfig {
        reduction_ratio: 0,
        ..tiny()
    };
    assert!(build_model(&bad, BranchMask::ALL, 3, &mut store, &mut rng).is_err());
}

#[test]
fn mismatched_batch_sizes_are_rejected() {
    let (store, model) = build(&tiny(), BranchMask::ALL, 3, 0);
    let mut b = batch(2, 12, 0);
    b.velocity = random(&[3, VELOCITY_CHANNELS, 6, 16], 5);
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    assert!(
        model
            .forward::<f64, ChaCha8Rng>(&mut tape, &binding, &b, None)
            .is_err()
    );
}

#[test]
fn dropout_changes_training_forward_only() {
    let (store, model) = build(&tiny(), BranchMask::ALL, 3, 0);
    let b = batch(2, 12, 3);
    let (_, eval) = logits(&store, &model, &b);
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = model
        .forward(&mut tape, &binding, &b, Some((0.5, &mut rng)))
        .unwrap();
    assert_ne!(tape.value(out.logits), &eval);
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let config = GradCheckConfig {
        max_probes_per_input: 6,
        ..GradCheckConfig::default()
    };
    for seed in 0..3 {
        let (store, model) = build(&tiny(), BranchMask::ALL, 3, seed);
        let b = batch(2, 10, 100 + seed);
        let labels = [0usize, 2];
        let report =
            check_param_gradients(&store, &config, |tape, binding| -> Result<_, ModelError> {
                let out = model.forward::<f64, ChaCha8Rng>(tape, binding, &b, None)?;
                Ok(tape.softmax_cross_entropy(out.logits, &labels)?)
            })
            .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}
