use oraclebench_core::experiments::scaling::Variant;
use oraclebench_core::numcore::{AdamConfig, RngStream};
use oraclebench_core::oracle::{ClassPrior, FlowConfig, FlowOracle, FlowTrainConfig, GaussianOracle, Oracle};
use oraclebench_core::validate::{
    memorization_check, self_validation, self_validation_oracle, variance_ratio, MemThreshold, SelfValidationConfig,
};

/// Points on a noisy ring of radius 2.
fn ring(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = RngStream::new(seed, 77);
    (0..n)
        .map(|_| {
            let a = 2.0 * std::f64::consts::PI * r.uniform();
            let rad = 2.0 + 0.2 * r.normal();
            vec![rad * a.cos(), rad * a.sin()]
        })
        .collect()
}

fn trained_flow(data: &[Vec<f64>], epochs: usize, batch: usize, seed: u64) -> Oracle {
    let mut rng = RngStream::new(seed, 1);
    let mut o = FlowOracle::new(
        ClassPrior::uniform(1),
        2,
        FlowConfig {
            layers: 4,
            hidden: 32,
            s_max: 5.0,
        },
        &mut rng,
    )
    .unwrap();
    o.train_class(
        0,
        data,
        &FlowTrainConfig {
            adam: AdamConfig {
                learning_rate: 5e-3,
                ..Default::default()
            },
            epochs,
            batch_size: batch,
            seed,
            shuffle: true,
        },
    )
    .unwrap();
    Oracle::Flow(o.freeze())
}

#[test]
fn overfit_flow_memorizes_more() {
    for seed in 0..3 {
        let small = ring(20, seed);
        let large = ring(2000, seed + 100);
        let overfit = trained_flow(&small, 3000, 20, seed);
        let general = trained_flow(&large, 30, 128, seed);
        let mut rng = RngStream::new(seed, 9);
        let g_over = overfit.sample_class(0, 500, &mut rng).unwrap();
        let g_gen = general.sample_class(0, 500, &mut rng).unwrap();
        let m_over = memorization_check(&small, &g_over, MemThreshold::default()).unwrap();
        let m_gen = memorization_check(&large, &g_gen, MemThreshold::default()).unwrap();
        assert!(
            m_over.rate > m_gen.rate,
            "seed {seed}: {} vs {}",
            m_over.rate,
            m_gen.rate
        );

        let r = variance_ratio(&large, &g_gen).unwrap();
        assert!(r.variance_ratio > 0.5 && r.variance_ratio < 1.2, "seed {seed}: {r:?}");
    }
}

fn separable() -> Oracle {
    Oracle::Gaussian(
        GaussianOracle::diagonal(
            ClassPrior::uniform(2),
            vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            vec![vec![0.25, 0.25]; 2],
        )
        .unwrap(),
    )
}

fn sv_cfg(n_train: usize) -> SelfValidationConfig {
    SelfValidationConfig {
        n_train,
        variants: vec![
            Variant {
                id: "wide".into(),
                hidden: vec![64, 64],
                activation: Default::default(),
            },
            Variant {
                id: "narrow".into(),
                hidden: vec![8],
                activation: Default::default(),
            },
        ],
        n_test: 2000,
        mc_samples: 20_000,
        epochs: 5,
        learning_rate: 1e-3,
        batch_size: 32,
        seed: 4,
    }
}

#[test]
fn separable_world_is_learnable_to_the_bound() {
    let o = separable();
    let sv = self_validation(&o, &sv_cfg(10_000)).unwrap();
    for e in &sv.entries {
        assert!(e.gap_pp < 3.0, "{e:?}");
        assert!(e.gap_pp >= -3.0 * e.se_pp, "{e:?}");
    }
    let perfect = self_validation_oracle(&o, &sv_cfg(10)).unwrap();
    assert!(perfect.bayes.bayes_acc > 0.9999);
    for e in &perfect.entries {
        assert!(e.gap_pp.abs() <= 3.0 * e.se_pp + 1e-9, "{e:?}");
    }
}

#[test]
fn oracle_classifier_never_beats_bayes_beyond_noise() {
    let o = Oracle::Gaussian(
        GaussianOracle::diagonal(ClassPrior::uniform(2), vec![vec![-0.5], vec![0.5]], vec![vec![1.0]; 2]).unwrap(),
    );
    let sv = self_validation_oracle(&o, &sv_cfg(10)).unwrap();
    for e in &sv.entries {
        assert!(e.gap_pp >= -3.0 * e.se_pp, "{e:?}");
    }
}
