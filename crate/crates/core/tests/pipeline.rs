use hatesub_core::classifier::{
    predict_unseen_user, Block, ClassifierConfig, FeatureMask, MaskMode, Sample,
};
use hatesub_core::data::UserProfile;
use hatesub_core::factor::TrainConfig;
use hatesub_core::pipeline::{recoverability_report, Experiment, LatticeOptions, MatrixOptions};
use hatesub_core::subspace::{pool, MixingWeights, Pooling};
use hatesub_core::synthetic::{generate, AttributeSpec, GeneratorConfig, GroundTruth, PlantedEffect};

fn experiment(effects: Vec<PlantedEffect>, seed: u64) -> (Experiment, GroundTruth) {
    let config = GeneratorConfig {
        n_users: 120,
        n_posts: 150,
        effects,
        label_noise: 0.1,
        seed,
        ..Default::default()
    };
    let (ds, truth) = generate(&config).unwrap();
    let factor = TrainConfig {
        dim: 8,
        epochs: 60,
        ..Default::default()
    };
    let exp = Experiment::new(ds, &LatticeOptions::default(), &MatrixOptions::default(), &factor, true).unwrap();
    (exp, truth)
}

/// Four attributes and `d = 4`: each user's 15 combination rows live in a
/// 5-dimensional space, so leverage scores are not all 1.
fn leverage_experiment(effects: Vec<PlantedEffect>, seed: u64) -> (Experiment, GroundTruth) {
    let config = GeneratorConfig {
        n_users: 120,
        n_posts: 150,
        attributes: vec![
            AttributeSpec::new("A", 2),
            AttributeSpec::new("B", 3),
            AttributeSpec::new("C", 2),
            AttributeSpec::new("D", 3),
        ],
        effects,
        label_noise: 0.1,
        seed,
        ..Default::default()
    };
    let (ds, truth) = generate(&config).unwrap();
    let factor = TrainConfig {
        dim: 4,
        epochs: 60,
        ..Default::default()
    };
    let exp = Experiment::new(ds, &LatticeOptions::default(), &MatrixOptions::default(), &factor, true).unwrap();
    (exp, truth)
}

fn head_config() -> ClassifierConfig {
    ClassifierConfig {
        hidden: 16,
        learning_rate: 5e-3,
        max_epochs: 15,
        ..Default::default()
    }
}

#[test]
fn accumulation_endpoints_match_reference_runs() {
    let (exp, _) = experiment(vec![PlantedEffect::new(&[("A", "a0")], 3.0)], 0);
    let ordering: Vec<usize> = exp.global_ordering().unwrap().into_iter().map(|(l, _)| l).collect();
    let z = exp.universe.z();
    let config = head_config();
    let points = exp.accumulate_performance(&ordering, &[0, z, z + 10], &config).unwrap();
    assert_eq!(points[2].count, z);

    let full = exp.run(&config).unwrap();
    assert_eq!(points[1].metrics, full);
    assert_eq!(points[2].metrics, full);
    assert!(points[1].frobenius_error < 1e-8);

    for mode in [MaskMode::Drop, MaskMode::Zero] {
        let no_hp = exp
            .run(&ClassifierConfig {
                mask: FeatureMask::all().without(Block::Hp),
                mask_mode: mode,
                ..config.clone()
            })
            .unwrap();
        assert_eq!(points[0].metrics, no_hp, "{mode:?}");
    }
}

#[test]
fn sum_pooling_equals_weighted_with_unit_alpha() {
    let (mut exp, _) = experiment(vec![PlantedEffect::new(&[("B", "b2")], 2.0)], 1);
    exp.initial_weights = MixingWeights::constant(exp.universe.z(), 1.0);
    let base = ClassifierConfig {
        learn_alpha: false,
        ..head_config()
    };
    let weighted = exp.run(&ClassifierConfig { pooling: Pooling::Weighted, ..base.clone() }).unwrap();
    let sum = exp.run(&ClassifierConfig { pooling: Pooling::Sum, ..base }).unwrap();
    assert_eq!(weighted, sum);
}

#[test]
fn full_pipeline_is_deterministic() {
    let a = {
        let (exp, _) = experiment(vec![], 4);
        exp.run(&head_config()).unwrap()
    };
    let (exp, _) = experiment(vec![], 4);
    assert_eq!(exp.run(&head_config()).unwrap(), a);
}

#[test]
fn random_labels_give_majority_rate_accuracy() {
    let config = GeneratorConfig {
        n_users: 120,
        n_posts: 600,
        seed: 5,
        ..Default::default()
    };
    let (ds, _) = generate(&config).unwrap();
    let factor = TrainConfig {
        dim: 8,
        epochs: 60,
        ..Default::default()
    };
    let mut exp = Experiment::new(ds, &LatticeOptions::default(), &MatrixOptions::default(), &factor, true).unwrap();
    // Replace every label by a coin flip independent of the features.
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut coin = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state & 1 == 1
    };
    for split in [&mut exp.data.train, &mut exp.data.val, &mut exp.data.test] {
        for s in split.iter_mut() {
            s.label = coin();
        }
    }
    let metrics = exp.run(&head_config()).unwrap();
    let pos = exp.data.test.iter().filter(|s| s.label).count() as f64 / exp.data.test.len() as f64;
    let majority = pos.max(1.0 - pos);
    assert!((metrics.accuracy - majority).abs() <= 0.05, "{} vs {majority}", metrics.accuracy);
}

#[test]
fn unseen_user_prediction_uses_overlap() {
    let (exp, _) = experiment(vec![PlantedEffect::new(&[("A", "a0")], 3.0)], 6);
    let classifier = exp.train(&head_config()).unwrap();
    let features = &exp.data.features;
    let post = 3;
    let q = features.post_factors.row(post);
    let s = features.text.row(post);

    // A training user goes through the standard path unchanged.
    let user = &exp.dataset.users[0];
    let standard = classifier.probability(features, &Sample { user: 0, post, label: true });
    let unseen = predict_unseen_user(&classifier, user, (q, s), &exp.model, &exp.universe).unwrap();
    assert_eq!(standard, unseen);

    // Partial overlap: only the singleton A=a0 exists in the universe.
    let partial = UserProfile::from_pairs("new", &[("A", "a0"), ("Z", "novel")]).unwrap();
    let overlap = exp.universe.observed_overlap(&partial);
    assert_eq!(overlap.len(), 1);
    assert_eq!(exp.universe.combination(overlap[0]).unwrap().to_string(), "{A=a0}");
    let hp = pool(&overlap, &exp.model, &classifier.weights, classifier.pooling).vector;
    let expected: Vec<f64> = exp
        .model
        .combination_row(overlap[0])
        .iter()
        .map(|v| v * classifier.weights.get(overlap[0]))
        .collect();
    assert_eq!(hp, expected);

    // No overlap: the prediction depends only on the post features.
    let a = UserProfile::from_pairs("x", &[("Z", "1")]).unwrap();
    let b = UserProfile::from_pairs("y", &[("Y", "2"), ("W", "3")]).unwrap();
    let pa = predict_unseen_user(&classifier, &a, (q, s), &exp.model, &exp.universe).unwrap();
    let pb = predict_unseen_user(&classifier, &b, (q, s), &exp.model, &exp.universe).unwrap();
    assert_eq!(pa, pb);
    let other = predict_unseen_user(&classifier, &a, (features.post_factors.row(4), features.text.row(4)), &exp.model, &exp.universe).unwrap();
    assert_ne!(pa, other);
}

#[test]
fn strong_planted_effect_ranks_in_top_decile() {
    let (exp, truth) = leverage_experiment(vec![PlantedEffect::new(&[("A", "a0")], 3.0)], 7);
    let report = recoverability_report(&exp, &truth, &head_config(), &[1]).unwrap();
    assert!(report.planted[0].in_top_decile, "{:?}", report.planted);
}

#[test]
fn larger_effect_ranks_no_worse_mostly() {
    let mut wins = 0;
    for seed in 0..20 {
        let (exp, truth) = leverage_experiment(
            vec![
                PlantedEffect::new(&[("A", "a0")], 3.0),
                PlantedEffect::new(&[("C", "c1")], 1.0),
            ],
            100 + seed,
        );
        let ordering = exp.global_ordering().unwrap();
        let rank = |e: &PlantedEffect| {
            let l = exp.universe.index_of(&e.to_combination().unwrap()).unwrap();
            ordering.iter().position(|&(i, _)| i == l).unwrap()
        };
        if rank(&truth.effects[0]) <= rank(&truth.effects[1]) {
            wins += 1;
        }
    }
    assert!(wins >= 16, "{wins}/20");
}

#[test]
fn null_effect_gap_is_small() {
    let (exp, truth) = experiment(vec![], 8);
    let report = recoverability_report(&exp, &truth, &head_config(), &[1, 2, 3]).unwrap();
    assert!(report.lift_points.abs() < 1.0, "{}", report.lift_points);
}
