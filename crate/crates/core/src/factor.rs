//! Biased matrix factorization of the interaction matrix.
//!
//! The prediction for cell `(l, j)` is
//! `mu + b_c[l] + b_w[j] + <q_j, p_l>` and training minimizes, over the
//! observed cells only,
//!
//! ```text
//! sum_(l,j) (Y[l,j] - pred(l,j))^2 + lambda * (b_c[l]^2 + b_w[j]^2 + |q_j|^2 + |p_l|^2)
//! ```
//!
//! with the penalty accumulated once per observed cell. `mu` is the mean of
//! the observed values and stays fixed; everything else is learned by
//! per-cell SGD in a seeded shuffled order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::InteractionMatrix;
use crate::matrix::{dot, norm_sq, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularization {
    /// Penalty added once for every observed cell a parameter touches.
    #[default]
    PerCell,
    /// Each parameter touched by at least one observed cell is penalized once.
    PerParameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Stop once an epoch improves the loss by less than this fraction.
    pub tolerance: f64,
    pub regularization: Regularization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 128,
            learning_rate: 0.01,
            lambda: 0.01,
            epochs: 200,
            seed: 0,
            init_scale: 0.01,
            tolerance: 1e-6,
            regularization: Regularization::PerCell,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("factor dimension must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub mu: f64,
    /// `z x d` combination embeddings.
    pub combination_factors: DenseMatrix,
    /// `m x d` post embeddings.
    pub post_factors: DenseMatrix,
    pub combination_bias: Vec<f64>,
    pub post_bias: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(z: usize, m: usize, dim: usize, mu: f64) -> Self {
        FactorModel {
            mu,
            combination_factors: DenseMatrix::zeros(z, dim),
            post_factors: DenseMatrix::zeros(m, dim),
            combination_bias: vec![0.0; z],
            post_bias: vec![0.0; m],
        }
    }

    pub fn z(&self) -> usize {
        self.combination_bias.len()
    }

    pub fn m(&self) -> usize {
        self.post_bias.len()
    }

    pub fn dim(&self) -> usize {
        self.combination_factors.cols()
    }

    fn predict_unchecked(&self, l: usize, j: usize) -> f64 {
        self.mu
            + self.combination_bias[l]
            + self.post_bias[j]
            + dot(self.post_factors.row(j), self.combination_factors.row(l))
    }

    /// `[p_l ; b_c[l]]`, the row a combination contributes to a hate subspace.
    pub fn combination_row(&self, l: usize) -> Vec<f64> {
        let mut row = self.combination_factors.row(l).to_vec();
        row.push(self.combination_bias[l]);
        row
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite()
            && self.combination_bias.iter().all(|v| v.is_finite())
            && self.post_bias.iter().all(|v| v.is_finite())
            && self.combination_factors.as_slice().iter().all(|v| v.is_finite())
            && self.post_factors.as_slice().iter().all(|v| v.is_finite())
    }

    /// Text checkpoint: a `z= m= d= mu=` header, then `B_c`, `B_w`, `P` and
    /// `Q` sections with one row per line at 17 significant digits.
    pub fn to_checkpoint(&self) -> String {
        let num = |v: f64| format!("{v:.16e}");
        let mut out = format!(
            "z={} m={} d={} mu={}\n",
            self.z(),
            self.m(),
            self.dim(),
            num(self.mu)
        );
        out.push_str("B_c\n");
        for v in &self.combination_bias {
            writeln!(out, "{}", num(*v)).unwrap();
        }
        out.push_str("B_w\n");
        for v in &self.post_bias {
            writeln!(out, "{}", num(*v)).unwrap();
        }
        for (name, m) in [("P", &self.combination_factors), ("Q", &self.post_factors)] {
            writeln!(out, "{name}").unwrap();
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| num(*v)).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn parse_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let fmt_err = |line: usize, message: String| Error::Format { line, message };

        let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "empty checkpoint".into()))?;
        let mut z = None;
        let mut m = None;
        let mut d = None;
        let mut mu = None;
        for part in header.split_whitespace() {
            match part.split_once('=') {
                Some(("z", v)) => z = v.parse::<usize>().ok(),
                Some(("m", v)) => m = v.parse::<usize>().ok(),
                Some(("d", v)) => d = v.parse::<usize>().ok(),
                Some(("mu", v)) => mu = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        let (Some(z), Some(m), Some(d), Some(mu)) = (z, m, d, mu) else {
            return Err(fmt_err(1, format!("bad checkpoint header {header:?}")));
        };

        let mut section = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
            match lines.next() {
                Some((_, l)) if l.trim() == name => {}
                Some((i, l)) => return Err(fmt_err(i + 1, format!("expected {name}, got {l:?}"))),
                None => return Err(fmt_err(0, format!("missing section {name}"))),
            }
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (i, line) = lines
                    .next()
                    .ok_or_else(|| fmt_err(0, format!("section {name} truncated")))?;
                let row = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| fmt_err(i + 1, e.to_string()))?;
                if row.len() != cols {
                    return Err(fmt_err(
                        i + 1,
                        format!("expected {cols} values in {name}, got {}", row.len()),
                    ));
                }
                values.extend(row);
            }
            Ok(values)
        };

        let combination_bias = section("B_c", z, 1)?;
        let post_bias = section("B_w", m, 1)?;
        let p = section("P", z, d)?;
        let q = section("Q", m, d)?;
        let mut model = FactorModel::zeros(z, m, d, mu);
        model.combination_bias = combination_bias;
        model.post_bias = post_bias;
        model.combination_factors.as_mut_slice().copy_from_slice(&p);
        model.post_factors.as_mut_slice().copy_from_slice(&q);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FactorModel::parse_checkpoint(&text)
    }
}

/// Predicted score for combination `l` on post `j`.
pub fn predict_cell(model: &FactorModel, l: usize, j: usize) -> Result<f64> {
    if l >= model.z() {
        return Err(Error::IndexOutOfRange {
            what: "combination",
            index: l,
            size: model.z(),
        });
    }
    if j >= model.m() {
        return Err(Error::IndexOutOfRange {
            what: "post",
            index: j,
            size: model.m(),
        });
    }
    Ok(model.predict_unchecked(l, j))
}

fn check_shapes(model: &FactorModel, matrix: &InteractionMatrix) -> Result<()> {
    if model.z() != matrix.z() || model.m() != matrix.m() {
        return Err(Error::Config(format!(
            "model shape {}x{} does not match matrix {}x{}",
            model.z(),
            model.m(),
            matrix.z(),
            matrix.m()
        )));
    }
    Ok(())
}

/// Per-row and per-column counts of observed cells.
fn occupancy(matrix: &InteractionMatrix) -> (Vec<usize>, Vec<usize>) {
    let mut rows = vec![0; matrix.z()];
    let mut cols = vec![0; matrix.m()];
    for e in matrix.entries() {
        rows[e.row] += 1;
        cols[e.col] += 1;
    }
    (rows, cols)
}

/// Objective value with per-cell penalty accumulation.
pub fn loss(model: &FactorModel, matrix: &InteractionMatrix, lambda: f64) -> f64 {
    loss_with(model, matrix, lambda, Regularization::PerCell)
}

pub fn loss_with(
    model: &FactorModel,
    matrix: &InteractionMatrix,
    lambda: f64,
    regularization: Regularization,
) -> f64 {
    let mut total = 0.0;
    for e in matrix.entries() {
        let r = e.weight - model.predict_unchecked(e.row, e.col);
        total += r * r;
        if regularization == Regularization::PerCell {
            total += lambda
                * (model.combination_bias[e.row].powi(2)
                    + model.post_bias[e.col].powi(2)
                    + norm_sq(model.post_factors.row(e.col))
                    + norm_sq(model.combination_factors.row(e.row)));
        }
    }
    if regularization == Regularization::PerParameter {
        let (rows, cols) = occupancy(matrix);
        for (l, &n) in rows.iter().enumerate() {
            if n > 0 {
                total += lambda
                    * (model.combination_bias[l].powi(2)
                        + norm_sq(model.combination_factors.row(l)));
            }
        }
        for (j, &n) in cols.iter().enumerate() {
            if n > 0 {
                total += lambda * (model.post_bias[j].powi(2) + norm_sq(model.post_factors.row(j)));
            }
        }
    }
    total
}

/// Full-batch gradient of [`loss_with`], laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub combination_factors: DenseMatrix,
    pub post_factors: DenseMatrix,
    pub combination_bias: Vec<f64>,
    pub post_bias: Vec<f64>,
}

pub fn gradient(
    model: &FactorModel,
    matrix: &InteractionMatrix,
    lambda: f64,
    regularization: Regularization,
) -> Gradient {
    let d = model.dim();
    let mut g = Gradient {
        combination_factors: DenseMatrix::zeros(model.z(), d),
        post_factors: DenseMatrix::zeros(model.m(), d),
        combination_bias: vec![0.0; model.z()],
        post_bias: vec![0.0; model.m()],
    };
    let (rows, cols) = occupancy(matrix);
    for e in matrix.entries() {
        let (l, j) = (e.row, e.col);
        let (wl, wj) = penalty_weights(lambda, regularization, rows[l], cols[j]);
        let r = e.weight - model.predict_unchecked(l, j);
        g.combination_bias[l] += -2.0 * r + 2.0 * wl * model.combination_bias[l];
        g.post_bias[j] += -2.0 * r + 2.0 * wj * model.post_bias[j];
        for f in 0..d {
            let p = model.combination_factors.get(l, f);
            let q = model.post_factors.get(j, f);
            let gp = g.combination_factors.get(l, f) - 2.0 * r * q + 2.0 * wl * p;
            let gq = g.post_factors.get(j, f) - 2.0 * r * p + 2.0 * wj * q;
            g.combination_factors.set(l, f, gp);
            g.post_factors.set(j, f, gq);
        }
    }
    g
}

/// Penalty weights applied per visited cell for the row and column
/// parameters. Spreading `lambda` over a parameter's cells makes the
/// per-parameter objective decompose into per-cell terms.
fn penalty_weights(
    lambda: f64,
    regularization: Regularization,
    row_count: usize,
    col_count: usize,
) -> (f64, f64) {
    match regularization {
        Regularization::PerCell => (lambda, lambda),
        Regularization::PerParameter => (lambda / row_count as f64, lambda / col_count as f64),
    }
}

/// Loss after each completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

pub fn fit(matrix: &InteractionMatrix, config: &TrainConfig) -> Result<FactorModel> {
    fit_traced(matrix, config).map(|(m, _)| m)
}

/// Per-cell SGD over the observed cells. Training stops after `epochs`, when
/// an epoch improves the loss by less than `tolerance` (relative), or when an
/// epoch raises it; in the last case the parameters of the previous epoch
/// are kept. A loss above the initial one, or any non-finite value, is
/// reported as divergence.
pub fn fit_traced(
    matrix: &InteractionMatrix,
    config: &TrainConfig,
) -> Result<(FactorModel, FitTrace)> {
    config.validate()?;
    if matrix.is_empty() {
        return Err(Error::Config("interaction matrix has no observed cells".into()));
    }
    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.init_scale;
    let mut init = |_: usize, _: usize| {
        if s > 0.0 {
            rng.random_range(-s..s)
        } else {
            0.0
        }
    };
    let mut model = FactorModel {
        mu: matrix.mean(),
        combination_factors: DenseMatrix::from_fn(matrix.z(), d, &mut init),
        post_factors: DenseMatrix::from_fn(matrix.m(), d, &mut init),
        combination_bias: (0..matrix.z()).map(|i| init(i, 0)).collect(),
        post_bias: (0..matrix.m()).map(|i| init(i, 0)).collect(),
    };

    let lr = config.learning_rate;
    let (rows, cols) = occupancy(matrix);
    let entries = matrix.entries();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let initial_loss = loss_with(&model, matrix, config.lambda, config.regularization);
    let mut prev = initial_loss;
    let mut epoch_losses = Vec::new();

    for epoch in 0..config.epochs {
        let last = model.clone();
        order.shuffle(&mut rng);
        for &i in &order {
            let e = entries[i];
            let (l, j) = (e.row, e.col);
            let (wl, wj) = penalty_weights(config.lambda, config.regularization, rows[l], cols[j]);
            let r = e.weight - model.predict_unchecked(l, j);

            let bc = model.combination_bias[l];
            let bw = model.post_bias[j];
            model.combination_bias[l] = bc - lr * (-2.0 * r + 2.0 * wl * bc);
            model.post_bias[j] = bw - lr * (-2.0 * r + 2.0 * wj * bw);

            let (p_row, q_row) = (l * d, j * d);
            let p = model.combination_factors.as_mut_slice();
            let q = model.post_factors.as_mut_slice();
            for f in 0..d {
                let pv = p[p_row + f];
                let qv = q[q_row + f];
                p[p_row + f] = pv - lr * (-2.0 * r * qv + 2.0 * wl * pv);
                q[q_row + f] = qv - lr * (-2.0 * r * pv + 2.0 * wj * qv);
            }
        }

        let current = loss_with(&model, matrix, config.lambda, config.regularization);
        if !current.is_finite() || !model.is_finite() {
            return Err(Error::Diverged {
                stage: "factorization",
                epoch,
                learning_rate: lr,
            });
        }
        if current > prev {
            if current > initial_loss {
                return Err(Error::Diverged {
                    stage: "factorization",
                    epoch,
                    learning_rate: lr,
                });
            }
            // Keep the last epoch that did not raise the loss.
            model = last;
            break;
        }
        epoch_losses.push(current);
        log::debug!("factorization epoch {epoch}: loss {current:.6e}");
        let improvement = (prev - current) / prev.abs().max(f64::MIN_POSITIVE);
        prev = current;
        if improvement < config.tolerance {
            break;
        }
    }
    Ok((
        model,
        FitTrace {
            initial_loss,
            epoch_losses,
        },
    ))
}

/// Root mean squared error of the model over the matrix's stored cells.
pub fn rmse(model: &FactorModel, matrix: &InteractionMatrix) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    let sse: f64 = matrix
        .entries()
        .iter()
        .map(|e| (e.weight - model.predict_unchecked(e.row, e.col)).powi(2))
        .sum();
    (sse / matrix.nnz() as f64).sqrt()
}

/// Largest relative disagreement between [`gradient`] and central finite
/// differences of [`loss`] with step `epsilon`, over every learned
/// parameter. Differences below an absolute floor of `1e-6` in the
/// denominator are treated as absolute errors so that near-zero gradients
/// do not inflate the ratio.
pub fn gradient_check(
    model: &FactorModel,
    matrix: &InteractionMatrix,
    lambda: f64,
    epsilon: f64,
) -> Result<f64> {
    gradient_check_with(model, matrix, lambda, epsilon, Regularization::PerCell)
}

pub fn gradient_check_with(
    model: &FactorModel,
    matrix: &InteractionMatrix,
    lambda: f64,
    epsilon: f64,
    regularization: Regularization,
) -> Result<f64> {
    check_shapes(model, matrix)?;
    let analytic = gradient(model, matrix, lambda, regularization);
    let mut probe = model.clone();
    let mut worst = 0.0f64;

    let mut compare = |analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    };
    let objective = |m: &FactorModel| loss_with(m, matrix, lambda, regularization);

    macro_rules! probe_param {
        ($get:expr, $set:expr, $a:expr) => {{
            let orig = $get(&probe);
            $set(&mut probe, orig + epsilon);
            let up = objective(&probe);
            $set(&mut probe, orig - epsilon);
            let down = objective(&probe);
            $set(&mut probe, orig);
            compare($a, (up - down) / (2.0 * epsilon));
        }};
    }

    for l in 0..model.z() {
        probe_param!(
            |m: &FactorModel| m.combination_bias[l],
            |m: &mut FactorModel, v| m.combination_bias[l] = v,
            analytic.combination_bias[l]
        );
        for f in 0..model.dim() {
            probe_param!(
                |m: &FactorModel| m.combination_factors.get(l, f),
                |m: &mut FactorModel, v| m.combination_factors.set(l, f, v),
                analytic.combination_factors.get(l, f)
            );
        }
    }
    for j in 0..model.m() {
        probe_param!(
            |m: &FactorModel| m.post_bias[j],
            |m: &mut FactorModel, v| m.post_bias[j] = v,
            analytic.post_bias[j]
        );
        for f in 0..model.dim() {
            probe_param!(
                |m: &FactorModel| m.post_factors.get(j, f),
                |m: &mut FactorModel, v| m.post_factors.set(j, f, v),
                analytic.post_factors.get(j, f)
            );
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::Entry;

    fn matrix(z: usize, m: usize, cells: &[(usize, usize, f64)]) -> InteractionMatrix {
        InteractionMatrix::from_entries(
            z,
            m,
            cells
                .iter()
                .map(|&(row, col, weight)| Entry { row, col, weight })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn predict_cell_cases() {
        let zero = FactorModel::zeros(2, 3, 2, 0.4);
        for l in 0..2 {
            for j in 0..3 {
                assert_eq!(predict_cell(&zero, l, j).unwrap(), 0.4);
            }
        }

        let mut m = FactorModel::zeros(1, 1, 2, 0.0);
        m.combination_bias[0] = 0.1;
        m.post_bias[0] = 0.2;
        m.combination_factors.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.post_factors.row_mut(0).copy_from_slice(&[3.0, 5.0]);
        assert!((predict_cell(&m, 0, 0).unwrap() - 3.3).abs() < 1e-12);

        let mut o = FactorModel::zeros(1, 1, 2, 1.0);
        o.combination_factors.row_mut(0).copy_from_slice(&[1.0, 1.0]);
        o.post_factors.row_mut(0).copy_from_slice(&[1.0, -1.0]);
        assert_eq!(predict_cell(&o, 0, 0).unwrap(), 1.0);

        assert!(matches!(predict_cell(&o, 1, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(predict_cell(&o, 0, 1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn loss_cases() {
        let y = matrix(1, 1, &[(0, 0, 1.0)]);
        assert_eq!(loss(&FactorModel::zeros(1, 1, 1, 0.0), &y, 0.0), 1.0);
        assert_eq!(loss(&FactorModel::zeros(1, 1, 1, 1.0), &y, 0.0), 0.0);

        // two cells sharing row 0:
        // residuals 1 - (0.5 + 0.25 + 0.1 + 1*2) = -1.85, 0 - (0.5 + 0.25 - 0.2 + 1*(-1)) = 0.45
        // penalties 0.1*(0.0625 + 0.01 + 4 + 1) + 0.1*(0.0625 + 0.04 + 1 + 1)
        let y = matrix(1, 2, &[(0, 0, 1.0), (0, 1, 0.0)]);
        let mut m = FactorModel::zeros(1, 2, 1, 0.5);
        m.combination_bias[0] = 0.25;
        m.post_bias = vec![0.1, -0.2];
        m.combination_factors.set(0, 0, 1.0);
        m.post_factors.set(0, 0, 2.0);
        m.post_factors.set(1, 0, -1.0);
        let expected = 1.85f64.powi(2) + 0.45f64.powi(2) + 0.1 * 5.0725 + 0.1 * 2.1025;
        assert!((loss(&m, &y, 0.1) - expected).abs() < 1e-12);

        // per-parameter: the row is penalized once
        let expected_once = 1.85f64.powi(2)
            + 0.45f64.powi(2)
            + 0.1 * (0.0625 + 1.0)
            + 0.1 * (0.01 + 4.0)
            + 0.1 * (0.04 + 1.0);
        let got = loss_with(&m, &y, 0.1, Regularization::PerParameter);
        assert!((got - expected_once).abs() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic() {
        let y = matrix(3, 3, &[(0, 0, 1.0), (1, 1, 0.5), (2, 2, 0.25), (0, 2, 0.0)]);
        let cfg = TrainConfig {
            dim: 4,
            seed: 11,
            epochs: 30,
            ..Default::default()
        };
        let a = fit(&y, &cfg).unwrap();
        let b = fit(&y, &cfg).unwrap();
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
        assert_eq!(a, b);
    }

    #[test]
    fn constant_matrix_is_absorbed_by_mu() {
        let cells: Vec<(usize, usize, f64)> = (0..5)
            .flat_map(|l| (0..4).map(move |j| (l, j, 0.7)))
            .filter(|&(l, j, _)| (l + j) % 2 == 0)
            .collect();
        let y = matrix(5, 4, &cells);
        let cfg = TrainConfig {
            dim: 3,
            lambda: 0.05,
            epochs: 500,
            ..Default::default()
        };
        let model = fit(&y, &cfg).unwrap();
        assert!((model.mu - 0.7).abs() < 1e-15);
        for e in y.entries() {
            assert!((predict_cell(&model, e.row, e.col).unwrap() - 0.7).abs() < 1e-3);
        }
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let cells: Vec<(usize, usize, f64)> = (0..8)
            .flat_map(|l| (0..6).map(move |j| (l, j, ((l * 7 + j * 3) % 5) as f64 / 4.0)))
            .collect();
        let y = matrix(8, 6, &cells);
        let cfg = TrainConfig {
            dim: 3,
            epochs: 100,
            init_scale: 0.1,
            ..Default::default()
        };
        let (_, trace) = fit_traced(&y, &cfg).unwrap();
        let mut prev = trace.initial_loss;
        for &l in &trace.epoch_losses {
            assert!(l <= prev + 1e-9, "loss rose from {prev} to {l}");
            prev = l;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let y = matrix(2, 2, &[(0, 0, 100.0), (1, 1, 0.0), (0, 1, 50.0)]);
        let cfg = TrainConfig {
            dim: 2,
            learning_rate: 5.0,
            epochs: 50,
            tolerance: f64::NEG_INFINITY,
            ..Default::default()
        };
        match fit(&y, &cfg) {
            Err(Error::Diverged { learning_rate, .. }) => assert_eq!(learning_rate, 5.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_matrix_and_bad_config_rejected() {
        let empty = matrix(1, 1, &[]);
        assert!(fit(&empty, &TrainConfig::default()).is_err());
        let y = matrix(1, 1, &[(0, 0, 1.0)]);
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(fit(&y, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let y = matrix(3, 2, &[(0, 0, 1.0), (1, 1, 0.3), (2, 0, 0.7)]);
        let cfg = TrainConfig {
            dim: 3,
            epochs: 5,
            init_scale: 0.3,
            ..Default::default()
        };
        let model = fit(&y, &cfg).unwrap();
        let back = FactorModel::parse_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back, model);
        for (a, b) in back
            .combination_factors
            .as_slice()
            .iter()
            .zip(model.combination_factors.as_slice())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gradient_at_stationary_point_and_pure_penalty() {
        // perfect fit with lambda = 0: gradient vanishes
        let y = matrix(1, 1, &[(0, 0, 0.5)]);
        let m = FactorModel::zeros(1, 1, 2, 0.5);
        let g = gradient(&m, &y, 0.0, Regularization::PerCell);
        assert!(g.combination_bias[0].abs() < 1e-15);
        assert!(gradient_check(&m, &y, 0.0, 1e-5).unwrap() < 1e-4);

        // perfect fit with lambda = 1: gradient of the penalty is 2 * parameter
        let mut m = FactorModel::zeros(1, 1, 1, 0.0);
        m.combination_bias[0] = 0.3;
        m.post_bias[0] = -0.3;
        m.combination_factors.set(0, 0, 0.0);
        m.post_factors.set(0, 0, 0.8);
        let y = matrix(1, 1, &[(0, 0, 0.0)]);
        let g = gradient(&m, &y, 1.0, Regularization::PerCell);
        assert!((g.combination_bias[0] - 0.6).abs() < 1e-15);
        assert!((g.post_bias[0] + 0.6).abs() < 1e-15);
        assert!((g.post_factors.get(0, 0) - 1.6).abs() < 1e-15);
        assert!(gradient_check(&m, &y, 1.0, 1e-5).unwrap() < 1e-4);
    }
}
