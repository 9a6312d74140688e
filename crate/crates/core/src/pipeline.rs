//! In-memory end-to-end runs: universe and matrix, factorization, then
//! classifier training and evaluation, plus the analyses built on top.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::classifier::{
    evaluate_on, prepare, train_on, Block, ClassifierConfig, Metrics, PreparedData,
    TrainedClassifier,
};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::factor::{fit, FactorModel, TrainConfig};
use crate::interaction::{aggregate, build_matrix, idf_strategy, tf_strategy, InteractionMatrix};
use crate::lattice::{build_annotator_universe, build_universe, CombinationUniverse};
use crate::subspace::{global_leverage_ordering, mean_reconstruction_curve, MixingWeights};
use crate::synthetic::GroundTruth;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeOptions {
    pub max_order: Option<usize>,
    /// Annotator-level universe instead of the combination lattice.
    pub annotator_level: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixOptions {
    pub tf: String,
    pub idf: String,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            tf: "fraction".into(),
            idf: "smooth".into(),
        }
    }
}

pub fn build_lattice(dataset: &Dataset, options: &LatticeOptions) -> CombinationUniverse {
    if options.annotator_level {
        build_annotator_universe(&dataset.users)
    } else {
        build_universe(&dataset.users, options.max_order)
    }
}

/// Interaction matrix from the training split.
pub fn build_interactions(
    dataset: &Dataset,
    universe: &CombinationUniverse,
    options: &MatrixOptions,
) -> Result<InteractionMatrix> {
    let tf = tf_strategy(&options.tf)?;
    let idf = idf_strategy(&options.idf)?;
    let cells = aggregate(dataset, universe, true);
    build_matrix(&cells, universe.z(), dataset.posts.len(), tf.as_ref(), idf.as_ref())
}

/// Everything the classifier stage needs, with the factor model frozen.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub dataset: Dataset,
    pub universe: CombinationUniverse,
    pub matrix: InteractionMatrix,
    pub model: FactorModel,
    pub data: PreparedData,
    pub initial_weights: MixingWeights,
}

impl Experiment {
    /// Builds the universe and matrix, fits the factor model and prepares
    /// classifier inputs. Text embeddings are required when `require_text`.
    pub fn new(
        dataset: Dataset,
        lattice: &LatticeOptions,
        matrix: &MatrixOptions,
        factor: &TrainConfig,
        require_text: bool,
    ) -> Result<Self> {
        let universe = build_lattice(&dataset, lattice);
        let matrix = build_interactions(&dataset, &universe, matrix)?;
        let model = fit(&matrix, factor)?;
        Self::from_parts(dataset, universe, matrix, model, require_text)
    }

    pub fn from_parts(
        dataset: Dataset,
        universe: CombinationUniverse,
        matrix: InteractionMatrix,
        model: FactorModel,
        require_text: bool,
    ) -> Result<Self> {
        let data = prepare(&dataset, &model, &universe, require_text)?;
        let initial_weights = MixingWeights::initial(&universe);
        Ok(Experiment {
            dataset,
            universe,
            matrix,
            model,
            data,
            initial_weights,
        })
    }

    pub fn train(&self, config: &ClassifierConfig) -> Result<TrainedClassifier> {
        train_on(
            &self.data.features,
            &self.data.train,
            &self.data.val,
            &self.initial_weights,
            config,
        )
    }

    pub fn evaluate(&self, classifier: &TrainedClassifier, split: Split, config: &ClassifierConfig) -> Result<Metrics> {
        let samples = self.data.split(split);
        if samples.is_empty() {
            return Err(Error::EmptySplit(split.as_str()));
        }
        Ok(evaluate_on(classifier, &self.data.features, samples, config.averaging))
    }

    /// Trains with `config` and reports test-split metrics.
    pub fn run(&self, config: &ClassifierConfig) -> Result<Metrics> {
        let classifier = self.train(config)?;
        self.evaluate(&classifier, Split::Test, config)
    }

    /// Combination indices by descending summed leverage over all users.
    pub fn global_ordering(&self) -> Result<Vec<(usize, f64)>> {
        global_leverage_ordering(&self.dataset.users, &self.universe, &self.model)
    }

    /// For each `t` in `checkpoints`, restricts every user to the first `t`
    /// combinations of `ordering`, retrains the classifier and evaluates it
    /// on the test split. Checkpoints beyond the universe size are clamped.
    pub fn accumulate_performance(
        &self,
        ordering: &[usize],
        checkpoints: &[usize],
        config: &ClassifierConfig,
    ) -> Result<Vec<CurvePoint>> {
        let z = self.universe.z();
        let counts: Vec<usize> = checkpoints
            .iter()
            .map(|&t| {
                if t > z {
                    log::warn!("checkpoint {t} exceeds the {z} combinations; using {z}");
                }
                t.min(z)
            })
            .collect();
        let errors = mean_reconstruction_curve(
            &self.dataset.users,
            &self.universe,
            &self.model,
            ordering,
            &counts,
        );
        let mut out = Vec::with_capacity(counts.len());
        for (&t, (_, frobenius_error)) in counts.iter().zip(errors) {
            let keep: BTreeSet<usize> = ordering.iter().take(t).copied().collect();
            let features = self.data.features.restrict(|l| keep.contains(&l));
            let classifier = train_on(
                &features,
                &self.data.train,
                &self.data.val,
                &self.initial_weights,
                config,
            )?;
            if self.data.test.is_empty() {
                return Err(Error::EmptySplit("test"));
            }
            let metrics = evaluate_on(&classifier, &features, &self.data.test, config.averaging);
            out.push(CurvePoint {
                count: t,
                frobenius_error,
                metrics,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub count: usize,
    pub frobenius_error: f64,
    pub metrics: Metrics,
}

/// Parses `1,5,10,50`.
pub fn parse_checkpoints(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad checkpoint {s:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRank {
    pub combination: String,
    pub effect: f64,
    /// 1-based position in the global leverage ordering; `None` when the
    /// combination never occurs in the universe.
    pub rank: Option<usize>,
    pub in_top_decile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityReport {
    pub universe_size: usize,
    pub planted: Vec<PlantedRank>,
    pub seeds: Vec<u64>,
    pub full_accuracy: Vec<f64>,
    pub no_hp_accuracy: Vec<f64>,
    pub mean_full_accuracy: f64,
    pub mean_no_hp_accuracy: f64,
    /// Mean accuracy difference, in percentage points.
    pub lift_points: f64,
}

/// Ranks the planted combinations in the global leverage ordering and
/// compares the full classifier with the one lacking the hate-perception
/// block, over `seeds`.
pub fn recoverability_report(
    experiment: &Experiment,
    truth: &GroundTruth,
    config: &ClassifierConfig,
    seeds: &[u64],
) -> Result<RecoverabilityReport> {
    let ordering = experiment.global_ordering()?;
    let z = experiment.universe.z();
    let decile = z.div_ceil(10);
    let mut planted = Vec::new();
    for effect in &truth.effects {
        let combo = effect.to_combination()?;
        let rank = experiment
            .universe
            .index_of(&combo)
            .and_then(|l| ordering.iter().position(|&(i, _)| i == l))
            .map(|p| p + 1);
        planted.push(PlantedRank {
            combination: combo.to_string(),
            effect: effect.effect,
            rank,
            in_top_decile: rank.is_some_and(|r| r <= decile),
        });
    }

    let full_cfg = ClassifierConfig {
        mask: config.mask.with(Block::Hp),
        ..config.clone()
    };
    let no_hp_cfg = ClassifierConfig {
        mask: config.mask.without(Block::Hp),
        ..config.clone()
    };
    let mut full_accuracy = Vec::new();
    let mut no_hp_accuracy = Vec::new();
    for &seed in seeds {
        full_accuracy.push(experiment.run(&ClassifierConfig { seed, ..full_cfg.clone() })?.accuracy);
        no_hp_accuracy.push(experiment.run(&ClassifierConfig { seed, ..no_hp_cfg.clone() })?.accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mean_full_accuracy = mean(&full_accuracy);
    let mean_no_hp_accuracy = mean(&no_hp_accuracy);
    Ok(RecoverabilityReport {
        universe_size: z,
        planted,
        seeds: seeds.to_vec(),
        full_accuracy,
        no_hp_accuracy,
        mean_full_accuracy,
        mean_no_hp_accuracy,
        lift_points: 100.0 * (mean_full_accuracy - mean_no_hp_accuracy),
    })
}
