use oraclebench_core::classifier::{
    accuracy, ece, ece_from_predictions, fit, Activation, LabelMode, SoftmaxClassifier, TrainSpec,
};
use oraclebench_core::inference::{annotate_posteriors, OraclePredictor, PosteriorConfig, PosteriorVector, Predictor};
use oraclebench_core::numcore::{RngStream, Tensor};
use oraclebench_core::oracle::{ClassPrior, GaussianOracle, LabeledSample, Oracle};
use proptest::prelude::*;

fn blobs(n: usize, seed: u64) -> Vec<LabeledSample> {
    let o = GaussianOracle::diagonal(
        ClassPrior::uniform(2),
        vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
        vec![vec![0.1, 0.3], vec![0.1, 0.3]],
    )
    .unwrap();
    Oracle::Gaussian(o)
        .sample_labeled(n, &mut RngStream::new(seed, 0))
        .unwrap()
}

#[test]
fn separable_blobs_reach_high_training_accuracy() {
    let data = blobs(400, 1);
    let spec = TrainSpec {
        label_mode: LabelMode::Sampled,
        epochs: 30,
        ..Default::default()
    };
    let (c, trace) = fit(2, 2, &data, &spec).unwrap();
    assert!(accuracy(&c, &data).unwrap() >= 0.99);
    assert!(trace.epoch_loss.last().unwrap() < &trace.epoch_loss[0]);
}

#[test]
fn uniform_soft_targets_give_log_k_loss() {
    let mut data = blobs(200, 2);
    for s in &mut data {
        s.posterior = Some(PosteriorVector::uniform(2));
    }
    let spec = TrainSpec {
        label_mode: LabelMode::Soft,
        epochs: 40,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let (_, trace) = fit(2, 2, &data, &spec).unwrap();
    let last = *trace.epoch_loss.last().unwrap();
    assert!((last - 2f64.ln()).abs() < 0.01, "final CE {last}");
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    let data = blobs(100, 3);
    let spec = TrainSpec {
        epochs: 3,
        seed: 17,
        ..Default::default()
    };
    let (a, ta) = fit(2, 2, &data, &spec).unwrap();
    let (b, tb) = fit(2, 2, &data, &spec).unwrap();
    let bits = |c: &SoftmaxClassifier| c.parameter_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ta, tb);
    let (c, _) = fit(2, 2, &data, &TrainSpec { seed: 18, ..spec }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn soft_label_optimum_is_the_target() {
    let target = PosteriorVector::new(vec![0.6, 0.3, 0.1]).unwrap();
    let data: Vec<_> = (0..64)
        .map(|_| LabeledSample {
            x: vec![0.5, -0.25],
            y: 0,
            posterior: Some(target.clone()),
        })
        .collect();
    let spec = TrainSpec {
        label_mode: LabelMode::Soft,
        epochs: 150,
        learning_rate: 1e-2,
        hidden: vec![8],
        ..Default::default()
    };
    let (c, _) = fit(2, 3, &data, &spec).unwrap();
    let q = c.predict_proba(&[0.5, -0.25]).unwrap();
    for (a, b) in q.probs().iter().zip(target.probs()) {
        assert!((a - b).abs() < 0.01, "{:?}", q.probs());
    }
}

#[test]
fn soft_mode_requires_posteriors() {
    let data = blobs(10, 4);
    let spec = TrainSpec {
        label_mode: LabelMode::Soft,
        epochs: 1,
        ..Default::default()
    };
    assert!(fit(2, 2, &data, &spec).is_err());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = RngStream::new(9, 9);
    for act in [Activation::Tanh, Activation::Relu] {
        let c = SoftmaxClassifier::new(3, 4, &[6, 5], act, &mut rng).unwrap();
        let x = Tensor::matrix(10, 3, rng.normal_vec(30)).unwrap();
        let t_rows: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let w: Vec<f64> = (0..4).map(|_| rng.uniform() + 0.05).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            })
            .collect();
        let t = Tensor::from_rows(&t_rows).unwrap();
        let (_, grads) = c.loss_and_gradients(&x, &t).unwrap();
        let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let theta = c.parameter_vector();
        let h = 1e-6;
        for j in 0..theta.len() {
            let mut cp = c.clone();
            let mut v = theta.clone();
            v[j] += h;
            cp.set_parameter_vector(&v).unwrap();
            let up = cp.loss_and_gradients(&x, &t).unwrap().0;
            v[j] -= 2.0 * h;
            cp.set_parameter_vector(&v).unwrap();
            let dn = cp.loss_and_gradients(&x, &t).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            let rel = (flat[j] - fd).abs() / flat[j].abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "{act:?} param {j}: {} vs {fd}", flat[j]);
        }
    }
}

#[test]
fn oracle_posterior_is_calibrated() {
    let o = Oracle::Gaussian(
        GaussianOracle::diagonal(
            ClassPrior::uniform(3),
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.5, 0.5]; 3],
        )
        .unwrap(),
    );
    let n = 20_000;
    let data = o.sample_labeled(n, &mut RngStream::new(12, 0)).unwrap();
    let e = ece(&OraclePredictor::new(&o), &data, 15).unwrap();
    assert!(e < 2.0 / (n as f64).sqrt(), "ece {e}");
}

#[test]
fn trained_model_is_worse_calibrated_with_hard_labels() {
    let o = Oracle::Gaussian(
        GaussianOracle::diagonal(
            ClassPrior::uniform(2),
            vec![vec![-0.5], vec![0.5]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap(),
    );
    let mut rng = RngStream::new(13, 0);
    let mut train = o.sample_labeled(500, &mut rng).unwrap();
    annotate_posteriors(&o, &mut train, &PosteriorConfig::new(o.prior().clone()), 64).unwrap();
    let test = o.sample_labeled(4000, &mut rng).unwrap();
    let base = TrainSpec {
        epochs: 40,
        hidden: vec![16],
        ..Default::default()
    };
    let (hard, _) = fit(
        1,
        2,
        &train,
        &TrainSpec {
            label_mode: LabelMode::Hard,
            ..base.clone()
        },
    )
    .unwrap();
    let (soft, _) = fit(
        1,
        2,
        &train,
        &TrainSpec {
            label_mode: LabelMode::Soft,
            ..base
        },
    )
    .unwrap();
    assert!(ece(&soft, &test, 15).unwrap() < ece(&hard, &test, 15).unwrap());
}

proptest! {
    #[test]
    fn ece_is_bounded_and_order_free(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0usize..3), 1..60), seed in 0u64..1000) {
        let preds: Vec<_> = raw.iter().map(|&(a, b, y)| {
            let w = [a + 1e-3, b + 1e-3, 1.0 - a.max(b) + 1e-3];
            let s: f64 = w.iter().sum();
            (PosteriorVector::new(w.iter().map(|v| v / s).collect()).unwrap(), y)
        }).collect();
        let e = ece_from_predictions(&preds, 15).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let mut shuffled = preds.clone();
        RngStream::new(seed, 0).shuffle(&mut shuffled);
        let e2 = ece_from_predictions(&shuffled, 15).unwrap();
        prop_assert!((e - e2).abs() < 1e-12);
    }
}
