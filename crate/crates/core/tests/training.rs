use ltlab::data::{synthesize_gaussian, Dataset, GaussianMixtureSpec};
use ltlab::eval::balanced_accuracy;
use ltlab::losses::{predict, ClassCounts, LossKind, LossSpec};
use ltlab::numerics::{Matrix, Rng};
use ltlab::sampling::SamplerPlan;
use ltlab::training::{
    crt_retrain, forward_logits, load_checkpoint, lws_retrain, mean_loss, save_checkpoint, train,
    ModelParams, TrainConfig,
};
use ltlab::Error;

fn mixture_data(counts: &[u64], seed: u64, radius: f64) -> (GaussianMixtureSpec, Dataset) {
    let counts = ClassCounts::new(counts.to_vec()).unwrap();
    let spec = GaussianMixtureSpec::ring(counts.k(), 2, radius, 1.0).unwrap();
    let data = synthesize_gaussian(&spec, &counts, &mut Rng::new(seed), true).unwrap();
    (spec, data)
}

fn balanced_acc(params: &ModelParams, data: &Dataset) -> f64 {
    let logits = forward_logits(params, data.features()).unwrap();
    let preds: Vec<usize> = (0..logits.rows()).map(|i| predict(logits.row(i))).collect();
    balanced_accuracy(&preds, data.labels(), data.k()).unwrap()
}

fn config(epochs: usize, hidden: Option<usize>) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.05,
        hidden_dim: hidden,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_two_class_problem_is_learned() {
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            vec![s * (2.0 + (i as f64) * 0.05), 0.3 * (i as f64).sin()]
        })
        .collect();
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let data = Dataset::new(Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap();
    let (params, _) = train(
        &data,
        &LossSpec::default(),
        &SamplerPlan::instance_balanced(),
        &config(50, None),
    )
    .unwrap();
    assert_eq!(balanced_acc(&params, &data), 1.0);
}

#[test]
fn same_seed_gives_bitwise_identical_models() {
    let (_, data) = mixture_data(&[200, 50, 10], 1, 2.0);
    for hidden in [None, Some(8)] {
        let run = || {
            train(
                &data,
                &LossSpec::new(LossKind::BalancedSoftmax),
                &SamplerPlan::repeat_factor(&data, 0.3).unwrap(),
                &config(5, hidden),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn balanced_softmax_on_balanced_data_matches_softmax_bitwise() {
    let (_, data) = mixture_data(&[80, 80, 80], 2, 1.5);
    let cfg = config(4, Some(6));
    let plan = SamplerPlan::instance_balanced();
    let a = train(&data, &LossSpec::new(LossKind::SoftmaxCe), &plan, &cfg).unwrap();
    let b = train(
        &data,
        &LossSpec::new(LossKind::BalancedSoftmax),
        &plan,
        &cfg,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn stage_two_keeps_frozen_parameters_bitwise() {
    let (_, data) = mixture_data(&[300, 60, 12], 3, 1.5);
    let (stage1, _) = train(
        &data,
        &LossSpec::default(),
        &SamplerPlan::instance_balanced(),
        &config(4, Some(8)),
    )
    .unwrap();
    let cfg = config(3, Some(8));
    let (crt, _) = crt_retrain(&stage1, &data, &LossSpec::default(), &cfg, false).unwrap();
    assert_eq!(crt.layers[0], stage1.layers[0]);
    assert_ne!(crt.layers[1], stage1.layers[1]);
    assert!(crt.lws_scales.is_none());

    let (lws, _) = lws_retrain(&stage1, &data, &LossSpec::default(), &cfg, false).unwrap();
    assert_eq!(lws.layers, stage1.layers);
    assert!(lws.lws_scales.unwrap().iter().any(|s| *s != 1.0));
}

#[test]
fn zero_epoch_stage_two_is_the_identity() {
    let (_, data) = mixture_data(&[100, 20], 4, 1.5);
    let (stage1, _) = train(
        &data,
        &LossSpec::default(),
        &SamplerPlan::instance_balanced(),
        &config(2, Some(4)),
    )
    .unwrap();
    let cfg = config(0, Some(4));
    let (crt, trace) = crt_retrain(&stage1, &data, &LossSpec::default(), &cfg, false).unwrap();
    assert_eq!(crt, stage1);
    assert!(trace.epoch_loss.is_empty());

    // Unit scales leave every logit untouched.
    let (lws, _) = lws_retrain(&stage1, &data, &LossSpec::default(), &cfg, false).unwrap();
    assert_eq!(lws.lws_scales.as_deref(), Some(&[1.0, 1.0][..]));
    assert_eq!(
        forward_logits(&lws, data.features()).unwrap(),
        forward_logits(&stage1, data.features()).unwrap()
    );
}

#[test]
fn linear_stage_one_has_no_backbone() {
    let (_, data) = mixture_data(&[50, 10], 5, 1.5);
    let (stage1, _) = train(
        &data,
        &LossSpec::default(),
        &SamplerPlan::instance_balanced(),
        &config(1, None),
    )
    .unwrap();
    let cfg = config(1, None);
    assert!(matches!(
        crt_retrain(&stage1, &data, &LossSpec::default(), &cfg, false),
        Err(Error::NoBackbone)
    ));
    assert!(crt_retrain(&stage1, &data, &LossSpec::default(), &cfg, true).is_ok());
}

#[test]
fn decoupling_helps_the_tail() {
    let counts = [1000, 300, 100, 30, 10];
    let (spec, data) = mixture_data(&counts, 6, 1.5);
    let test = synthesize_gaussian(
        &spec,
        &ClassCounts::uniform(5, 300).unwrap(),
        &mut Rng::new(60),
        false,
    )
    .unwrap();
    let (stage1, _) = train(
        &data,
        &LossSpec::default(),
        &SamplerPlan::instance_balanced(),
        &config(15, Some(16)),
    )
    .unwrap();
    let cfg = config(8, Some(16));
    let (crt, _) = crt_retrain(&stage1, &data, &LossSpec::default(), &cfg, false).unwrap();
    let (lws, _) = lws_retrain(&stage1, &data, &LossSpec::default(), &cfg, false).unwrap();
    let base = balanced_acc(&stage1, &test);
    assert!(balanced_acc(&crt, &test) > base);
    assert!(balanced_acc(&lws, &test) > base);

    let scales = lws.lws_scales.unwrap();
    assert!(scales[4] >= scales[0], "scales {scales:?}");
}

#[test]
fn convex_loss_trace_mostly_decreases() {
    let (_, data) = mixture_data(&[200, 100, 50], 7, 2.0);
    let (_, trace) = train(
        &data,
        &LossSpec::default(),
        &SamplerPlan::instance_balanced(),
        &TrainConfig {
            momentum: 0.0,
            learning_rate: 0.02,
            ..config(20, None)
        },
    )
    .unwrap();
    let rises = trace.epoch_loss[1..]
        .windows(2)
        .filter(|w| w[1] > w[0] * 1.05)
        .count();
    // Minibatch noise may cause an occasional rise; report rather than fail.
    if rises > 0 {
        eprintln!(
            "loss rose by more than 5% in {rises} epochs: {:?}",
            trace.epoch_loss
        );
    }
    assert!(trace.epoch_loss.last().unwrap() < &trace.epoch_loss[0]);
}

#[test]
fn checkpoints_round_trip_exactly() {
    let (_, data) = mixture_data(&[60, 20], 8, 1.5);
    let (params, _) = train(
        &data,
        &LossSpec::default(),
        &SamplerPlan::instance_balanced(),
        &config(2, Some(5)),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&params, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, params);
    let spec = LossSpec::default().prepare(data.counts()).unwrap();
    assert_eq!(
        mean_loss(&loaded, data.features(), data.labels(), &spec).unwrap(),
        mean_loss(&params, data.features(), data.labels(), &spec).unwrap()
    );
}
