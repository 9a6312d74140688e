//! Synthetic annotator populations with planted cultural effects.
//!
//! Each user draws one value per attribute uniformly. Each post gets a
//! latent offensiveness score, and user `u` labels post `j` hateful with
//! probability `logistic(base + score_j + sum of effects whose combination
//! the user holds)`, after which the label flips with probability
//! `label_noise`. Text embeddings are a noisy projection of the post score,
//! so text carries the post signal while only the annotator's attributes
//! carry the planted effects.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    split_posts, write_annotations, write_embeddings, AnnotationRecord, AttributeValue, Dataset,
    Embeddings, Post, Schema, UserProfile,
};
use crate::error::{Error, Result};
use crate::lattice::Combination;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub cardinality: usize,
}

impl AttributeSpec {
    pub fn new(name: &str, cardinality: usize) -> Self {
        AttributeSpec {
            name: name.into(),
            cardinality,
        }
    }

    /// Value `i` of this attribute, e.g. `A` value 0 is `a0`.
    pub fn value(&self, i: usize) -> String {
        format!("{}{i}", self.name.to_ascii_lowercase())
    }
}

/// A log-odds shift applied to everyone holding `combination`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    /// Members as `attribute=value` pairs.
    pub combination: Vec<(String, String)>,
    pub effect: f64,
}

impl PlantedEffect {
    pub fn new(members: &[(&str, &str)], effect: f64) -> Self {
        PlantedEffect {
            combination: members
                .iter()
                .map(|(a, v)| (a.to_string(), v.to_string()))
                .collect(),
            effect,
        }
    }

    pub fn to_combination(&self) -> Result<Combination> {
        let members = self
            .combination
            .iter()
            .map(|(a, v)| AttributeValue::new(a, v))
            .collect::<Result<Vec<_>>>()?;
        Combination::new(members)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_posts: usize,
    pub attributes: Vec<AttributeSpec>,
    pub effects: Vec<PlantedEffect>,
    pub base_rate: f64,
    pub label_noise: f64,
    /// Standard deviation of the latent post score.
    pub post_score_std: f64,
    /// Annotators drawn per post; `None` means every user labels every post.
    pub annotators_per_post: Option<usize>,
    pub embedding_dim: usize,
    /// Per-coordinate noise added to the text embeddings.
    pub embedding_noise: f64,
    pub split_ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_users: 200,
            n_posts: 300,
            attributes: vec![
                AttributeSpec::new("A", 2),
                AttributeSpec::new("B", 3),
                AttributeSpec::new("C", 2),
            ],
            effects: Vec::new(),
            base_rate: 0.5,
            label_noise: 0.0,
            post_score_std: 1.0,
            annotators_per_post: Some(10),
            embedding_dim: 8,
            embedding_noise: 0.1,
            split_ratios: (0.7, 0.15, 0.15),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.attributes.is_empty() {
            return bad("at least one attribute is required");
        }
        if self.attributes.iter().any(|a| a.cardinality == 0 || a.name.trim().is_empty()) {
            return bad("attributes need a name and at least one value");
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad("base_rate must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1)");
        }
        if !(self.post_score_std.is_finite() && self.post_score_std >= 0.0)
            || !(self.embedding_noise.is_finite() && self.embedding_noise >= 0.0)
        {
            return bad("standard deviations must be finite and non-negative");
        }
        if self.n_users == 0 || self.n_posts < 3 {
            return bad("need at least one user and three posts");
        }
        if self.annotators_per_post == Some(0) {
            return bad("annotators_per_post must be positive");
        }
        for e in &self.effects {
            if !e.effect.is_finite() {
                return bad("planted effects must be finite");
            }
            let combo = e.to_combination()?;
            for m in combo.members() {
                let known = self.attributes.iter().any(|a| {
                    a.name == m.attribute && (0..a.cardinality).any(|i| a.value(i) == m.value)
                });
                if !known {
                    return bad(&format!("planted effect uses unknown value {}={}", m.attribute, m.value));
                }
            }
        }
        Ok(())
    }
}

/// What the generator planted, written next to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub base_logit: f64,
    pub effects: Vec<PlantedEffect>,
    pub post_scores: BTreeMap<String, f64>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-odds shift for `user` from every planted effect they hold.
pub fn user_effect(user: &UserProfile, effects: &[PlantedEffect]) -> f64 {
    effects
        .iter()
        .filter(|e| e.combination.iter().all(|(a, v)| user.get(a) == Some(v.as_str())))
        .map(|e| e.effect)
        .sum()
}

pub fn generate(config: &GeneratorConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let users = (0..config.n_users)
        .map(|i| {
            let attrs = config
                .attributes
                .iter()
                .map(|a| AttributeValue::new(&a.name, &a.value(rng.random_range(0..a.cardinality))))
                .collect::<Result<Vec<_>>>()?;
            UserProfile::new(format!("u{i:05}"), attrs)
        })
        .collect::<Result<Vec<_>>>()?;

    let score_dist = Normal::new(0.0, config.post_score_std).expect("validated std");
    let noise = Normal::new(0.0, config.embedding_noise).expect("validated std");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut direction: Vec<f64> = (0..config.embedding_dim)
        .map(|_| std_normal.sample(&mut rng))
        .collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        direction.iter_mut().for_each(|v| *v /= norm);
    }

    let mut posts = Vec::with_capacity(config.n_posts);
    let mut post_scores = BTreeMap::new();
    for j in 0..config.n_posts {
        let id = format!("p{j:05}");
        let score = score_dist.sample(&mut rng);
        let embedding = direction
            .iter()
            .map(|d| d * score + noise.sample(&mut rng))
            .collect();
        post_scores.insert(id.clone(), score);
        posts.push(Post {
            post_id: id,
            text: None,
            text_embedding: Some(embedding),
        });
    }

    let base_logit = (config.base_rate / (1.0 - config.base_rate)).ln();
    let shifts: Vec<f64> = users.iter().map(|u| user_effect(u, &config.effects)).collect();
    let per_post = config
        .annotators_per_post
        .unwrap_or(config.n_users)
        .min(config.n_users);
    let mut annotations = Vec::with_capacity(per_post * config.n_posts);
    for post in &posts {
        let mut chosen = sample(&mut rng, config.n_users, per_post).into_vec();
        chosen.sort_unstable();
        for u in chosen {
            let p = logistic(base_logit + post_scores[&post.post_id] + shifts[u]);
            let mut hateful = rng.random::<f64>() < p;
            if rng.random::<f64>() < config.label_noise {
                hateful = !hateful;
            }
            annotations.push(AnnotationRecord {
                user_id: users[u].user_id.clone(),
                post_id: post.post_id.clone(),
                hateful,
            });
        }
    }

    let dataset = Dataset {
        users,
        posts,
        annotations,
        splits: BTreeMap::new(),
    };
    let dataset = split_posts(dataset, config.split_ratios, config.seed)?;
    let truth = GroundTruth {
        config: config.clone(),
        base_logit,
        effects: config.effects.clone(),
        post_scores,
    };
    Ok((dataset, truth))
}

pub const ANNOTATIONS_FILE: &str = "annotations.tsv";
pub const SCHEMA_FILE: &str = "schema.toml";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Writes annotations, schema, embeddings and ground truth into `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, dataset: &Dataset, truth: &GroundTruth) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_annotations(dataset, dir.join(ANNOTATIONS_FILE))?;
    let schema_path = dir.join(SCHEMA_FILE);
    fs::write(&schema_path, Schema::default_for(dataset).to_toml_string())
        .map_err(|e| Error::io(&schema_path, e))?;
    let embeddings = Embeddings {
        dim: truth.config.embedding_dim,
        vectors: dataset
            .posts
            .iter()
            .filter_map(|p| p.text_embedding.clone().map(|v| (p.post_id.clone(), v)))
            .collect(),
    };
    write_embeddings(&embeddings, dir.join(EMBEDDINGS_FILE))?;
    let truth_path = dir.join(GROUND_TRUTH_FILE);
    let json = serde_json::to_string_pretty(truth).expect("ground truth serializes");
    fs::write(&truth_path, json + "\n").map_err(|e| Error::io(&truth_path, e))
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        line: e.line(),
        message: e.to_string(),
    })
}
