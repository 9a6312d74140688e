use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hatesub_core::classifier::{Averaging, Block, ClassifierConfig, FeatureMask, MaskMode};
use hatesub_core::factor::TrainConfig;
use hatesub_core::pipeline::{parse_checkpoints, LatticeOptions, MatrixOptions};
use hatesub_core::subspace::Pooling;
use hatesub_core::synthetic::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub annotations: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Side file from `generate`, enabling the recoverability report.
    pub ground_truth: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            annotations: None,
            schema: None,
            embeddings: None,
            ground_truth: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    /// Used when the annotation file carries no split column.
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            split_ratios: [0.7, 0.15, 0.15],
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub hidden: usize,
    /// `weighted`, `sum`, `mean` or `anno` (annotator-level universe).
    pub pooling: String,
    /// Feature variants; each names the blocks removed (`hp`, `q+s`), or `full`.
    pub variants: Vec<String>,
    pub mask_mode: MaskMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub averaging: Averaging,
    pub learn_alpha: bool,
    pub seeds: Vec<u64>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let base = ClassifierConfig::default();
        ClassifierSection {
            hidden: base.hidden,
            pooling: "weighted".into(),
            variants: vec!["full".into()],
            mask_mode: base.mask_mode,
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            patience: base.patience,
            averaging: base.averaging,
            learn_alpha: base.learn_alpha,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub checkpoints: Vec<usize>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            checkpoints: vec![1, 5, 10, 50],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub data: DataOptions,
    pub lattice: LatticeOptions,
    pub matrix: MatrixOptions,
    pub factorization: TrainConfig,
    pub classifier: ClassifierSection,
    pub analysis: AnalysisOptions,
    pub generate: GeneratorConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub mask: Option<String>,
    pub pooling: Option<String>,
    pub checkpoints: Option<String>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.paths.annotations);
        resolve(base, &mut cfg.paths.schema);
        resolve(base, &mut cfg.paths.embeddings);
        resolve(base, &mut cfg.paths.ground_truth);
        if cfg.paths.out_dir.is_relative() {
            cfg.paths.out_dir = base.join(&cfg.paths.out_dir);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.factorization.seed = seed;
            self.data.split_seed = seed;
            self.generate.seed = seed;
            self.classifier.seeds = vec![seed];
        }
        if let Some(dir) = &o.out_dir {
            self.paths.out_dir = dir.clone();
        }
        if let Some(mask) = &o.mask {
            self.classifier.variants = mask
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
        }
        if let Some(p) = &o.pooling {
            self.classifier.pooling = p.clone();
        }
        if let Some(c) = &o.checkpoints {
            self.analysis.checkpoints = parse_checkpoints(c)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.pooling()?;
        let variants = self.variants()?;
        if variants.is_empty() {
            bail!("classifier.variants must name at least one variant");
        }
        if self.classifier.seeds.is_empty() {
            bail!("classifier.seeds must not be empty");
        }
        let r = self.data.split_ratios;
        if r.iter().any(|x| !(x.is_finite() && *x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!("data.split_ratios must be positive and sum to 1, got {r:?}");
        }
        Ok(())
    }

    /// Pooling mode plus whether the annotator-level universe is in use.
    pub fn pooling(&self) -> Result<(Pooling, bool)> {
        match self.classifier.pooling.as_str() {
            "anno" => Ok((Pooling::Weighted, true)),
            other => Ok((other.parse()?, self.lattice.annotator_level)),
        }
    }

    pub fn lattice_options(&self) -> Result<LatticeOptions> {
        Ok(LatticeOptions {
            annotator_level: self.pooling()?.1,
            ..self.lattice.clone()
        })
    }

    pub fn variants(&self) -> Result<Vec<FeatureMask>> {
        self.classifier.variants.iter().map(|v| parse_variant(v)).collect()
    }

    /// Whether any variant feeds text embeddings to the classifier.
    pub fn needs_text(&self) -> Result<bool> {
        Ok(self.variants()?.iter().any(|m| m.s))
    }

    pub fn classifier_config(&self, mask: FeatureMask, seed: u64) -> Result<ClassifierConfig> {
        let c = &self.classifier;
        Ok(ClassifierConfig {
            hidden: c.hidden,
            pooling: self.pooling()?.0,
            mask,
            mask_mode: c.mask_mode,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            seed,
            averaging: c.averaging,
            learn_alpha: c.learn_alpha,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `full`, or the removed blocks joined by `+` (a `no-` prefix is accepted).
pub fn parse_variant(text: &str) -> Result<FeatureMask> {
    let t = text.trim();
    if t == "full" || t == "none" {
        return Ok(FeatureMask::all());
    }
    let body = t.strip_prefix("no-").unwrap_or(t);
    let mut mask = FeatureMask::all();
    for part in body.split(['+', '-']) {
        mask = mask.without(Block::parse(part)?);
    }
    if !(mask.hp || mask.q || mask.s) {
        bail!("variant {text:?} removes every feature block");
    }
    Ok(mask)
}
