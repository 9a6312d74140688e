//! Personalized hate classifier.
//!
//! The head is a two-layer feed-forward network over the concatenation of
//! an annotator's hate-perception vector `HP(u)`, the post's interaction
//! embedding `q_j` and its text embedding `s_j`, squashed by a logistic
//! output. It is trained with binary cross-entropy by seeded mini-batch
//! Adam, updating the network and the shared mixing weights together while
//! the factor model stays frozen. Any block can be switched off for
//! ablations, either by dropping it from the input or by feeding zeros.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, UserProfile};
use crate::error::{Error, Result};
use crate::factor::FactorModel;
use crate::lattice::CombinationUniverse;
use crate::matrix::{dot, DenseMatrix};
use crate::subspace::{pooling_coefficients, MixingWeights, Pooling};

/// Which input blocks feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub hp: bool,
    pub q: bool,
    pub s: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Hp,
    Q,
    S,
}

impl Block {
    pub fn parse(s: &str) -> Result<Block> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hp" => Ok(Block::Hp),
            "q" => Ok(Block::Q),
            "s" => Ok(Block::S),
            other => Err(Error::Unknown {
                kind: "feature block",
                name: other.into(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Hp => "hp",
            Block::Q => "q",
            Block::S => "s",
        }
    }
}

impl FeatureMask {
    pub fn all() -> Self {
        FeatureMask {
            hp: true,
            q: true,
            s: true,
        }
    }

    pub fn without(self, block: Block) -> Self {
        let mut m = self;
        match block {
            Block::Hp => m.hp = false,
            Block::Q => m.q = false,
            Block::S => m.s = false,
        }
        m
    }

    pub fn with(self, block: Block) -> Self {
        let mut m = self;
        match block {
            Block::Hp => m.hp = true,
            Block::Q => m.q = true,
            Block::S => m.s = true,
        }
        m
    }

    pub fn enabled(self, block: Block) -> bool {
        match block {
            Block::Hp => self.hp,
            Block::Q => self.q,
            Block::S => self.s,
        }
    }

    /// `full`, or `no-hp`, `no-hp-s`, ... naming the removed blocks.
    pub fn label(self) -> String {
        let removed: Vec<&str> = [Block::Hp, Block::Q, Block::S]
            .into_iter()
            .filter(|b| !self.enabled(*b))
            .map(Block::name)
            .collect();
        if removed.is_empty() {
            "full".into()
        } else {
            format!("no-{}", removed.join("-"))
        }
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// How a disabled block is realized in the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Disabled blocks contribute zero-length segments.
    #[default]
    Drop,
    /// Disabled blocks keep their width and are fed zeros.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Unweighted mean over the hateful and non-hateful classes.
    #[default]
    Macro,
    /// Hateful class only.
    Binary,
}

/// Widths of the three input blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub hp: usize,
    pub q: usize,
    pub s: usize,
}

impl FeatureDims {
    fn of(self, block: Block) -> usize {
        match block {
            Block::Hp => self.hp,
            Block::Q => self.q,
            Block::S => self.s,
        }
    }

    fn total(self) -> usize {
        self.hp + self.q + self.s
    }
}

/// Input layout of a head: block widths, which blocks are on, and how the
/// off ones are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub dims: FeatureDims,
    pub mask: FeatureMask,
    pub mode: MaskMode,
}

const BLOCKS: [Block; 3] = [Block::Hp, Block::Q, Block::S];

impl InputLayout {
    pub fn input_dim(&self) -> usize {
        BLOCKS.iter().map(|&b| self.width(b)).sum()
    }

    fn width(&self, block: Block) -> usize {
        match (self.mask.enabled(block), self.mode) {
            (true, _) | (false, MaskMode::Zero) => self.dims.of(block),
            (false, MaskMode::Drop) => 0,
        }
    }

    /// Offset of `block` inside the input, when it occupies any width.
    fn offset(&self, block: Block) -> usize {
        BLOCKS
            .iter()
            .take_while(|&&b| b != block)
            .map(|&b| self.width(b))
            .sum()
    }

    /// Writes the input vector for the given blocks into `out`.
    fn assemble(&self, hp: &[f64], q: &[f64], s: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (block, values) in [(Block::Hp, hp), (Block::Q, q), (Block::S, s)] {
            match (self.mask.enabled(block), self.mode) {
                (true, _) => out.extend_from_slice(values),
                (false, MaskMode::Zero) => out.extend(std::iter::repeat_n(0.0, self.dims.of(block))),
                (false, MaskMode::Drop) => {}
            }
        }
    }
}

/// Classifier inputs for one `(user, post)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub hp: Vec<f64>,
    pub q: Vec<f64>,
    pub s: Vec<f64>,
    pub mask: FeatureMask,
}

impl FeatureVector {
    /// Concatenation of the enabled blocks.
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.mask.hp {
            out.extend_from_slice(&self.hp);
        }
        if self.mask.q {
            out.extend_from_slice(&self.q);
        }
        if self.mask.s {
            out.extend_from_slice(&self.s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub layout: InputLayout,
    /// `hidden x input`.
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl ClassifierHead {
    /// All-zero head; predicts 0.5 everywhere.
    pub fn zeros(layout: InputLayout, hidden: usize) -> Self {
        ClassifierHead {
            layout,
            w1: DenseMatrix::zeros(hidden, layout.input_dim()),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Xavier-uniform initialization. Weights are always drawn for the full
    /// `hp | q | s` width and the columns of dropped blocks discarded, so a
    /// given seed yields the same weights for the enabled blocks in every
    /// mask mode.
    pub fn init(layout: InputLayout, hidden: usize, rng: &mut impl Rng) -> Self {
        let full = layout.dims.total();
        let a = (6.0 / (full + hidden) as f64).sqrt();
        let full_w1 = DenseMatrix::from_fn(hidden, full, |_, _| rng.random_range(-a..a));
        let b = (6.0 / (hidden + 1) as f64).sqrt();
        let w2 = (0..hidden).map(|_| rng.random_range(-b..b)).collect();

        let mut keep = Vec::new();
        let mut col = 0;
        for block in BLOCKS {
            let w = layout.dims.of(block);
            if layout.width(block) > 0 {
                keep.extend(col..col + w);
            }
            col += w;
        }
        let w1 = DenseMatrix::from_fn(hidden, keep.len(), |r, c| full_w1.get(r, keep[c]));
        ClassifierHead {
            layout,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    fn forward(&self, x: &[f64], hidden: &mut [f64]) -> f64 {
        for (r, h) in hidden.iter_mut().enumerate() {
            *h = (dot(self.w1.row(r), x) + self.b1[r]).tanh();
        }
        dot(&self.w2, hidden) + self.b2
    }

    fn logit(&self, x: &[f64]) -> f64 {
        let mut hidden = vec![0.0; self.hidden()];
        self.forward(x, &mut hidden)
    }

    fn is_finite(&self) -> bool {
        self.b2.is_finite()
            && self.w1.as_slice().iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
    }
}

/// `P(hate | user, post)` for one feature vector.
pub fn predict(head: &ClassifierHead, features: &FeatureVector) -> Result<f64> {
    let dims = head.layout.dims;
    for (got, want) in [
        (features.hp.len(), dims.hp),
        (features.q.len(), dims.q),
        (features.s.len(), dims.s),
    ] {
        if got != want {
            return Err(Error::FeatureDimension {
                expected: want,
                actual: got,
            });
        }
    }
    if features.mask != head.layout.mask {
        let expected = head.layout.input_dim();
        let actual = features.concat().len();
        if expected != actual || head.layout.mode == MaskMode::Zero {
            return Err(Error::FeatureDimension { expected, actual });
        }
    }
    let mut x = Vec::with_capacity(head.input_dim());
    head.layout.assemble(&features.hp, &features.q, &features.s, &mut x);
    Ok(sigmoid(head.logit(&x)))
}

/// Hateful iff `probability >= 0.5`.
pub fn decide(probability: f64) -> bool {
    probability >= 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Metrics {
    /// Metrics from confusion counts. Undefined ratios count as 0.
    pub fn from_confusion(tp: usize, fp: usize, tn: usize, fn_: usize, averaging: Averaging) -> Self {
        let total = tp + fp + tn + fn_;
        let (p1, r1) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let (precision, recall, f1) = match averaging {
            Averaging::Binary => (p1, r1, harmonic(p1, r1)),
            Averaging::Macro => {
                let (p0, r0) = (ratio(tn, tn + fn_), ratio(tn, tn + fp));
                (
                    (p0 + p1) / 2.0,
                    (r0 + r1) / 2.0,
                    (harmonic(p0, r0) + harmonic(p1, r1)) / 2.0,
                )
            }
        };
        Metrics {
            accuracy: ratio(tp + tn, total),
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
        }
    }

    pub fn from_predictions(
        pairs: impl IntoIterator<Item = (bool, bool)>,
        averaging: Averaging,
    ) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Metrics::from_confusion(tp, fp, tn, fn_, averaging)
    }
}

/// One labeled `(user, post)` pair, by index into a [`Features`] table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub post: usize,
    pub label: bool,
}

/// Frozen inputs for classifier training: the combination rows
/// `[p_l ; b_c[l]]`, each user's combination list, and per-post `q_j` and
/// `s_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub combination_rows: DenseMatrix,
    pub user_combinations: Vec<Vec<usize>>,
    pub post_factors: DenseMatrix,
    pub text: DenseMatrix,
}

impl Features {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            hp: self.combination_rows.cols(),
            q: self.post_factors.cols(),
            s: self.text.cols(),
        }
    }

    /// Copy in which every user keeps only the combinations `keep` accepts.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> Features {
        Features {
            user_combinations: self
                .user_combinations
                .iter()
                .map(|c| c.iter().copied().filter(|&l| keep(l)).collect())
                .collect(),
            ..self.clone()
        }
    }

    pub fn hate_perception(&self, user: usize, weights: &MixingWeights, pooling: Pooling) -> Vec<f64> {
        self.pool(&self.user_combinations[user], weights, pooling)
    }

    fn pool(&self, combos: &[usize], weights: &MixingWeights, pooling: Pooling) -> Vec<f64> {
        let mut hp = vec![0.0; self.combination_rows.cols()];
        if combos.is_empty() {
            return hp;
        }
        let coeffs = pooling_coefficients(combos, weights, pooling);
        for (&l, &a) in combos.iter().zip(&coeffs) {
            for (h, r) in hp.iter_mut().zip(self.combination_rows.row(l)) {
                *h += a * r;
            }
        }
        hp
    }

    pub fn feature_vector(
        &self,
        sample: &Sample,
        weights: &MixingWeights,
        pooling: Pooling,
        mask: FeatureMask,
    ) -> FeatureVector {
        FeatureVector {
            hp: self.hate_perception(sample.user, weights, pooling),
            q: self.post_factors.row(sample.post).to_vec(),
            s: self.text.row(sample.post).to_vec(),
            mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub pooling: Pooling,
    pub mask: FeatureMask,
    pub mask_mode: MaskMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation macro-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub averaging: Averaging,
    /// Train the mixing weights with the head. When off they stay at their
    /// initial values.
    pub learn_alpha: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 256,
            pooling: Pooling::Weighted,
            mask: FeatureMask::all(),
            mask_mode: MaskMode::Drop,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 1,
            averaging: Averaging::Macro,
            learn_alpha: true,
        }
    }
}

impl ClassifierConfig {
    fn validate(&self, dims: FeatureDims) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden width and batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("classifier learning_rate must be positive".into()));
        }
        let enabled: usize = BLOCKS
            .iter()
            .filter(|&&b| self.mask.enabled(b))
            .map(|&b| dims.of(b))
            .sum();
        if enabled == 0 {
            return Err(Error::Config("at least one non-empty feature block must be enabled".into()));
        }
        Ok(())
    }
}

/// A trained head together with the mixing weights it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub head: ClassifierHead,
    pub weights: MixingWeights,
    pub pooling: Pooling,
}

impl TrainedClassifier {
    pub fn probability(&self, features: &Features, sample: &Sample) -> f64 {
        let hp = if self.head.layout.mask.hp {
            features.hate_perception(sample.user, &self.weights, self.pooling)
        } else {
            vec![0.0; features.dims().hp]
        };
        let mut x = Vec::with_capacity(self.head.input_dim());
        self.head.layout.assemble(
            &hp,
            features.post_factors.row(sample.post),
            features.text.row(sample.post),
            &mut x,
        );
        sigmoid(self.head.logit(&x))
    }
}

/// Gradient buffers shaped like the trainable parameters.
#[derive(Debug, Clone)]
struct Grads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    alpha: Vec<f64>,
}

impl Grads {
    fn zeros(head: &ClassifierHead, z: usize) -> Self {
        Grads {
            w1: vec![0.0; head.w1.as_slice().len()],
            b1: vec![0.0; head.hidden()],
            w2: vec![0.0; head.hidden()],
            b2: 0.0,
            alpha: vec![0.0; z],
        }
    }

    fn clear(&mut self) {
        self.w1.iter_mut().for_each(|v| *v = 0.0);
        self.b1.iter_mut().for_each(|v| *v = 0.0);
        self.w2.iter_mut().for_each(|v| *v = 0.0);
        self.b2 = 0.0;
        self.alpha.iter_mut().for_each(|v| *v = 0.0);
    }

    fn scale(&mut self, k: f64) {
        self.w1.iter_mut().for_each(|v| *v *= k);
        self.b1.iter_mut().for_each(|v| *v *= k);
        self.w2.iter_mut().for_each(|v| *v *= k);
        self.b2 *= k;
        self.alpha.iter_mut().for_each(|v| *v *= k);
    }
}

/// Mean binary cross-entropy over `samples`.
pub fn batch_loss(
    head: &ClassifierHead,
    weights: &MixingWeights,
    pooling: Pooling,
    features: &Features,
    samples: &[Sample],
) -> f64 {
    let trained = TrainedClassifier {
        head: head.clone(),
        weights: weights.clone(),
        pooling,
    };
    let mut x = Vec::new();
    let mut total = 0.0;
    for s in samples {
        let hp = if head.layout.mask.hp {
            features.hate_perception(s.user, weights, pooling)
        } else {
            vec![0.0; features.dims().hp]
        };
        trained.head.layout.assemble(
            &hp,
            features.post_factors.row(s.post),
            features.text.row(s.post),
            &mut x,
        );
        let o = head.logit(&x);
        let y = if s.label { 1.0 } else { 0.0 };
        total += softplus(o) - y * o;
    }
    total / samples.len().max(1) as f64
}

/// Adds the gradient of the summed cross-entropy over `samples` to `grads`.
fn accumulate_gradient(
    head: &ClassifierHead,
    weights: &MixingWeights,
    pooling: Pooling,
    features: &Features,
    samples: &[Sample],
    learn_alpha: bool,
    grads: &mut Grads,
) {
    let hidden = head.hidden();
    let input = head.input_dim();
    let learn_alpha = learn_alpha && pooling.is_learned() && head.layout.mask.hp;
    let hp_offset = head.layout.offset(Block::Hp);
    let hp_dim = features.dims().hp;

    let mut x = Vec::with_capacity(input);
    let mut h = vec![0.0; hidden];
    let mut delta = vec![0.0; hidden];
    let mut g_hp = vec![0.0; hp_dim];
    for s in samples {
        let hp = if head.layout.mask.hp {
            features.hate_perception(s.user, weights, pooling)
        } else {
            vec![0.0; hp_dim]
        };
        head.layout.assemble(
            &hp,
            features.post_factors.row(s.post),
            features.text.row(s.post),
            &mut x,
        );
        let o = head.forward(&x, &mut h);
        let y = if s.label { 1.0 } else { 0.0 };
        let d_o = sigmoid(o) - y;

        grads.b2 += d_o;
        for r in 0..hidden {
            grads.w2[r] += d_o * h[r];
            delta[r] = d_o * head.w2[r] * (1.0 - h[r] * h[r]);
            grads.b1[r] += delta[r];
            let row = &mut grads.w1[r * input..(r + 1) * input];
            for (g, xi) in row.iter_mut().zip(&x) {
                *g += delta[r] * xi;
            }
        }

        if learn_alpha {
            let combos = &features.user_combinations[s.user];
            if combos.is_empty() {
                continue;
            }
            g_hp.iter_mut().for_each(|v| *v = 0.0);
            for (r, &dr) in delta.iter().enumerate() {
                let w = &head.w1.row(r)[hp_offset..hp_offset + hp_dim];
                for (g, wi) in g_hp.iter_mut().zip(w) {
                    *g += dr * wi;
                }
            }
            for &l in combos {
                grads.alpha[l] += dot(&g_hp, features.combination_rows.row(l));
            }
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            **p -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn flat_params<'a>(
    head: &'a mut ClassifierHead,
    alpha: &'a mut MixingWeights,
) -> Vec<&'a mut f64> {
    let mut out: Vec<&mut f64> = head.w1.as_mut_slice().iter_mut().collect();
    out.extend(head.b1.iter_mut());
    out.extend(head.w2.iter_mut());
    out.push(&mut head.b2);
    out.extend(alpha.as_mut_slice().iter_mut());
    out
}

fn flat_grads(g: &Grads) -> Vec<f64> {
    let mut out = g.w1.clone();
    out.extend(&g.b1);
    out.extend(&g.w2);
    out.push(g.b2);
    out.extend(&g.alpha);
    out
}

/// Trains a head on `train`, early-stopping on validation macro-F1 (or
/// the configured averaging) when `val` is non-empty.
pub fn train_on(
    features: &Features,
    train: &[Sample],
    val: &[Sample],
    initial_weights: &MixingWeights,
    config: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let dims = features.dims();
    config.validate(dims)?;
    let layout = InputLayout {
        dims,
        mask: config.mask,
        mode: config.mask_mode,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = TrainedClassifier {
        head: ClassifierHead::init(layout, config.hidden, &mut rng),
        weights: initial_weights.clone(),
        pooling: config.pooling,
    };
    let z = current.weights.len();
    let mut grads = Grads::zeros(&current.head, z);
    let mut adam = Adam::new(flat_grads(&grads).len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);

    let mut best: Option<(f64, TrainedClassifier)> = None;
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            grads.clear();
            accumulate_gradient(
                &current.head,
                &current.weights,
                current.pooling,
                features,
                &batch,
                config.learn_alpha,
                &mut grads,
            );
            grads.scale(1.0 / batch.len() as f64);
            let flat = flat_grads(&grads);
            let mut params = flat_params(&mut current.head, &mut current.weights);
            adam.step(&mut params, &flat, config.learning_rate);
        }
        if !current.head.is_finite() || current.weights.as_slice().iter().any(|a| !a.is_finite()) {
            return Err(Error::Diverged {
                stage: "classifier training",
                epoch,
                learning_rate: config.learning_rate,
            });
        }

        if val.is_empty() {
            continue;
        }
        let score = evaluate_on(&current, features, val, config.averaging).f1;
        log::debug!("classifier epoch {epoch}: validation f1 {score:.4}");
        match &best {
            Some((b, _)) if score <= *b => {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((score, current.clone()));
                stale = 0;
            }
        }
    }
    Ok(best.map(|(_, c)| c).unwrap_or(current))
}

pub fn evaluate_on(
    classifier: &TrainedClassifier,
    features: &Features,
    samples: &[Sample],
    averaging: Averaging,
) -> Metrics {
    Metrics::from_predictions(
        samples
            .iter()
            .map(|s| (decide(classifier.probability(features, s)), s.label)),
        averaging,
    )
}

/// Largest relative error between the analytic gradient of the mean
/// cross-entropy and central finite differences, over every network
/// parameter and, under weighted pooling, every mixing weight.
pub fn gradient_check(
    classifier: &TrainedClassifier,
    features: &Features,
    samples: &[Sample],
    epsilon: f64,
) -> f64 {
    let z = classifier.weights.len();
    let mut grads = Grads::zeros(&classifier.head, z);
    accumulate_gradient(
        &classifier.head,
        &classifier.weights,
        classifier.pooling,
        features,
        samples,
        true,
        &mut grads,
    );
    grads.scale(1.0 / samples.len() as f64);
    let analytic = flat_grads(&grads);

    let mut probe = classifier.clone();
    let n_theta = analytic.len() - z;
    let learn_alpha = classifier.pooling.is_learned() && classifier.head.layout.mask.hp;
    let count = if learn_alpha { analytic.len() } else { n_theta };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate().take(count) {
        let orig = *flat_params(&mut probe.head, &mut probe.weights)[i];
        let eval = |v: f64, p: &mut TrainedClassifier| {
            *flat_params(&mut p.head, &mut p.weights)[i] = v;
            batch_loss(&p.head, &p.weights, p.pooling, features, samples)
        };
        let up = eval(orig + epsilon, &mut probe);
        let down = eval(orig - epsilon, &mut probe);
        eval(orig, &mut probe);
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Classifier inputs and labeled samples derived from a dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub features: Features,
    pub user_index: HashMap<String, usize>,
    pub post_index: HashMap<String, usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds [`Features`] and per-split samples. Posts follow `dataset.posts`
/// order, matching the interaction matrix columns. Text embeddings are
/// required for every post when `require_text` is set.
pub fn prepare(
    dataset: &Dataset,
    model: &FactorModel,
    universe: &CombinationUniverse,
    require_text: bool,
) -> Result<PreparedData> {
    if model.m() != dataset.posts.len() {
        return Err(Error::Config(format!(
            "factor model has {} posts, dataset has {}",
            model.m(),
            dataset.posts.len()
        )));
    }
    if model.z() != universe.z() {
        return Err(Error::Config(format!(
            "factor model has {} combinations, universe has {}",
            model.z(),
            universe.z()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..model.z()).map(|l| model.combination_row(l)).collect();
    let combination_rows = if rows.is_empty() {
        DenseMatrix::zeros(0, model.dim() + 1)
    } else {
        DenseMatrix::from_rows(&rows)
    };

    let text_dim = dataset
        .posts
        .iter()
        .find_map(|p| p.text_embedding.as_ref().map(Vec::len))
        .unwrap_or(0);
    let mut text = DenseMatrix::zeros(dataset.posts.len(), text_dim);
    for (j, post) in dataset.posts.iter().enumerate() {
        match &post.text_embedding {
            Some(v) if v.len() == text_dim => text.row_mut(j).copy_from_slice(v),
            Some(v) => {
                return Err(Error::EmbeddingDimension {
                    post_id: post.post_id.clone(),
                    expected: text_dim,
                    actual: v.len(),
                })
            }
            None if require_text => return Err(Error::MissingEmbedding(post.post_id.clone())),
            None => {}
        }
    }

    let user_combinations = dataset
        .users
        .iter()
        .map(|u| universe.observed_overlap(u))
        .collect();
    let features = Features {
        combination_rows,
        user_combinations,
        post_factors: model.post_factors.clone(),
        text,
    };

    let user_index: HashMap<String, usize> = dataset
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.user_id.clone(), i))
        .collect();
    let post_index: HashMap<String, usize> = dataset
        .posts
        .iter()
        .enumerate()
        .map(|(i, p)| (p.post_id.clone(), i))
        .collect();
    let mut data = PreparedData {
        features,
        user_index,
        post_index,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ann in &dataset.annotations {
        let Some(split) = dataset.split_of(&ann.post_id) else {
            continue;
        };
        let sample = Sample {
            user: data.user_index[&ann.user_id],
            post: data.post_index[&ann.post_id],
            label: ann.hateful,
        };
        match split {
            Split::Train => data.train.push(sample),
            Split::Val => data.val.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    Ok(data)
}

/// Trains on the dataset's train split with validation early stopping.
pub fn train(
    dataset: &Dataset,
    model: &FactorModel,
    universe: &CombinationUniverse,
    weights: &MixingWeights,
    config: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    let data = prepare(dataset, model, universe, config.mask.s)?;
    train_on(&data.features, &data.train, &data.val, weights, config)
}

/// Metrics of `classifier` over every annotation in `split`.
pub fn evaluate(
    classifier: &TrainedClassifier,
    dataset: &Dataset,
    model: &FactorModel,
    universe: &CombinationUniverse,
    split: Split,
    averaging: Averaging,
) -> Result<Metrics> {
    let data = prepare(dataset, model, universe, classifier.head.layout.mask.s)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    Ok(evaluate_on(classifier, &data.features, samples, averaging))
}

/// Prediction for an annotator outside the training population, from the
/// combinations their profile shares with the universe. With no overlap
/// the hate-perception block is zero.
pub fn predict_unseen_user(
    classifier: &TrainedClassifier,
    profile: &UserProfile,
    post_features: (&[f64], &[f64]),
    model: &FactorModel,
    universe: &CombinationUniverse,
) -> Result<f64> {
    let (q, s) = post_features;
    let hp = crate::subspace::hate_perception(
        profile,
        model,
        universe,
        &classifier.weights,
        classifier.pooling,
    );
    let features = FeatureVector {
        hp: hp.vector,
        q: q.to_vec(),
        s: s.to_vec(),
        mask: classifier.head.layout.mask,
    };
    predict(&classifier.head, &features)
}

/// Mean and sample standard deviation of each metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: (f64, f64),
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub f1: (f64, f64),
}

pub fn summarize(runs: &[Metrics]) -> MetricSummary {
    let stat = |f: fn(&Metrics) -> f64| {
        let n = runs.len() as f64;
        if runs.is_empty() {
            return (0.0, 0.0);
        }
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    MetricSummary {
        accuracy: stat(|m| m.accuracy),
        precision: stat(|m| m.precision),
        recall: stat(|m| m.recall),
        f1: stat(|m| m.f1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(hp: usize, q: usize, s: usize) -> InputLayout {
        InputLayout {
            dims: FeatureDims { hp, q, s },
            mask: FeatureMask::all(),
            mode: MaskMode::Drop,
        }
    }

    #[test]
    fn zero_head_predicts_half() {
        let head = ClassifierHead::zeros(layout(2, 1, 1), 4);
        let f = FeatureVector {
            hp: vec![3.0, -1.0],
            q: vec![0.5],
            s: vec![9.0],
            mask: FeatureMask::all(),
        };
        assert_eq!(predict(&head, &f).unwrap(), 0.5);
    }

    #[test]
    fn hand_set_two_two_one_network() {
        // input (1, 2); hidden = tanh(W1 x + b1); out = sigmoid(w2 . h + b2)
        let mut head = ClassifierHead::zeros(layout(1, 1, 0), 2);
        head.w1 = DenseMatrix::from_rows(&[vec![0.5, -0.25], vec![1.0, 1.0]]);
        head.b1 = vec![0.1, -2.0];
        head.w2 = vec![2.0, -1.0];
        head.b2 = 0.3;
        let f = FeatureVector {
            hp: vec![1.0],
            q: vec![2.0],
            s: vec![],
            mask: FeatureMask::all(),
        };
        let h1 = (0.5f64 - 0.5 + 0.1).tanh();
        let h2 = (1.0f64 + 2.0 - 2.0).tanh();
        let expected = 1.0 / (1.0 + (-(2.0 * h1 - h2 + 0.3)).exp());
        let got = predict(&head, &f).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert_eq!(predict(&head, &f).unwrap(), got);
    }

    #[test]
    fn dimension_mismatch_names_dims() {
        let head = ClassifierHead::zeros(layout(3, 2, 0), 2);
        let f = FeatureVector {
            hp: vec![0.0; 2],
            q: vec![0.0; 2],
            s: vec![],
            mask: FeatureMask::all(),
        };
        match predict(&head, &f) {
            Err(Error::FeatureDimension { expected: 3, actual: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decide_threshold() {
        assert!(decide(0.5));
        assert!(!decide(0.4999));
        assert!(decide(1.0));
        assert!(!decide(0.0));
    }

    #[test]
    fn metric_cases() {
        let perfect = Metrics::from_predictions([(true, true), (false, false)], Averaging::Macro);
        assert_eq!(
            (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1),
            (1.0, 1.0, 1.0, 1.0)
        );

        let m = Metrics::from_confusion(1, 1, 1, 1, Averaging::Macro);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));

        let all_pos = Metrics::from_predictions(
            [(true, true), (true, true), (true, false), (true, false)],
            Averaging::Macro,
        );
        assert_eq!(all_pos.accuracy, 0.5);
        // class 1: p = 0.5, r = 1; class 0: p = r = 0
        assert_eq!(all_pos.precision, 0.25);
        assert_eq!(all_pos.recall, 0.5);
        assert!((all_pos.f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);

        let b = Metrics::from_confusion(3, 1, 4, 2, Averaging::Binary);
        assert_eq!(b.precision, 0.75);
        assert_eq!(b.recall, 0.6);
    }

    #[test]
    fn mask_labels() {
        assert_eq!(FeatureMask::all().label(), "full");
        assert_eq!(FeatureMask::all().without(Block::Hp).label(), "no-hp");
        assert!(Block::parse("x").is_err());
    }

    #[test]
    fn summary_uses_sample_std() {
        let a = Metrics { accuracy: 0.5, ..Default::default() };
        let b = Metrics { accuracy: 0.7, ..Default::default() };
        let s = summarize(&[a, b]);
        assert!((s.accuracy.0 - 0.6).abs() < 1e-15);
        assert!((s.accuracy.1 - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[a]).accuracy.1, 0.0);
    }
}
