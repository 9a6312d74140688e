use std::collections::BTreeSet;

use hatesub_core::data::{load_annotations, load_embeddings, Schema};
use hatesub_core::synthetic::{
    generate, load_ground_truth, write_synthetic, GeneratorConfig, PlantedEffect, ANNOTATIONS_FILE,
    EMBEDDINGS_FILE, GROUND_TRUTH_FILE, SCHEMA_FILE,
};

fn rate(labels: impl Iterator<Item = bool>) -> (f64, usize) {
    let (mut hate, mut n) = (0usize, 0usize);
    for l in labels {
        hate += l as usize;
        n += 1;
    }
    (hate as f64 / n as f64, n)
}

#[test]
fn balanced_base_rate_without_effects() {
    let config = GeneratorConfig {
        n_users: 100,
        n_posts: 200,
        annotators_per_post: None,
        base_rate: 0.5,
        label_noise: 0.0,
        ..Default::default()
    };
    let (ds, _) = generate(&config).unwrap();
    let (r, n) = rate(ds.annotations.iter().map(|a| a.hateful));
    assert!(n >= 10_000);
    assert!((r - 0.5).abs() < 0.02, "rate {r}");
}

#[test]
fn planted_effect_raises_group_rate() {
    let config = GeneratorConfig {
        n_users: 200,
        n_posts: 300,
        effects: vec![PlantedEffect::new(&[("A", "a0")], 3.0)],
        ..Default::default()
    };
    let (ds, _) = generate(&config).unwrap();
    let holds: BTreeSet<&str> = ds
        .users
        .iter()
        .filter(|u| u.get("A") == Some("a0"))
        .map(|u| u.user_id.as_str())
        .collect();
    let (r1, n1) = rate(ds.annotations.iter().filter(|a| holds.contains(a.user_id.as_str())).map(|a| a.hateful));
    let (r0, n0) = rate(ds.annotations.iter().filter(|a| !holds.contains(a.user_id.as_str())).map(|a| a.hateful));
    assert!(n1 >= 1000 && n0 >= 1000);
    // two-proportion z-test, one-sided p < 0.01
    let pooled = (r1 * n1 as f64 + r0 * n0 as f64) / (n1 + n0) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n0 as f64)).sqrt();
    let z = (r1 - r0) / se;
    assert!(r1 > r0 && z > 2.327, "rates {r1} vs {r0}, z {z}");
}

#[test]
fn group_rates_match_logistic_probabilities() {
    // Without post scores every label of a group has the same probability.
    for (n_posts, seed) in [(50, 1u64), (400, 2)] {
        let config = GeneratorConfig {
            n_users: 60,
            n_posts,
            post_score_std: 0.0,
            annotators_per_post: None,
            base_rate: 0.3,
            label_noise: 0.1,
            effects: vec![PlantedEffect::new(&[("B", "b1")], 1.5)],
            seed,
            ..Default::default()
        };
        let (ds, truth) = generate(&config).unwrap();
        let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
        for held in [true, false] {
            let users: BTreeSet<&str> = ds
                .users
                .iter()
                .filter(|u| (u.get("B") == Some("b1")) == held)
                .map(|u| u.user_id.as_str())
                .collect();
            let p_clean = logistic(truth.base_logit + if held { 1.5 } else { 0.0 });
            let p = p_clean * 0.9 + (1.0 - p_clean) * 0.1;
            let (r, n) = rate(ds.annotations.iter().filter(|a| users.contains(a.user_id.as_str())).map(|a| a.hateful));
            let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!((r - p).abs() < tol, "held={held} n={n}: {r} vs {p}");
        }
    }
}

#[test]
fn written_files_load_back() {
    let config = GeneratorConfig {
        n_users: 15,
        n_posts: 12,
        effects: vec![PlantedEffect::new(&[("A", "a1"), ("C", "c0")], 1.0)],
        ..Default::default()
    };
    let (ds, truth) = generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), &ds, &truth).unwrap();

    let schema = Schema::load(dir.path().join(SCHEMA_FILE)).unwrap();
    let mut loaded = load_annotations(dir.path().join(ANNOTATIONS_FILE), &schema).unwrap();
    loaded.attach_embeddings(&load_embeddings(dir.path().join(EMBEDDINGS_FILE)).unwrap());

    let key = |d: &hatesub_core::data::Dataset| {
        let mut a: Vec<_> = d.annotations.iter().map(|a| (a.user_id.clone(), a.post_id.clone(), a.hateful)).collect();
        a.sort();
        a
    };
    assert_eq!(key(&loaded), key(&ds));
    assert_eq!(loaded.splits, ds.splits);
    let mut users = loaded.users.clone();
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let annotated: BTreeSet<&str> = ds.annotations.iter().map(|a| a.user_id.as_str()).collect();
    let expected: Vec<_> = ds.users.iter().filter(|u| annotated.contains(u.user_id.as_str())).cloned().collect();
    assert_eq!(users, expected);
    for post in &loaded.posts {
        let orig = ds.posts.iter().find(|p| p.post_id == post.post_id).unwrap();
        assert_eq!(post.text_embedding, orig.text_embedding);
    }
    assert_eq!(load_ground_truth(dir.path().join(GROUND_TRUTH_FILE)).unwrap(), truth);
}
