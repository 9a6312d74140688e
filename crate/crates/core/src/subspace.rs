//! Per-annotator hate subspaces.
//!
//! A user's subspace is spanned by the rows `[p_l ; b_c[l]]` of the
//! combinations they hold. Their hate-perception vector is a linear
//! combination of those rows with one globally shared coefficient per
//! combination. The analysis half of this module measures how much each row
//! matters to the span (leverage scores) and how quickly a prefix of rows
//! reconstructs the whole subspace.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::UserProfile;
use crate::error::{Error, Result};
use crate::factor::FactorModel;
use crate::lattice::CombinationUniverse;
use crate::matrix::{dot, norm_sq, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Learned coefficient per combination.
    #[default]
    Weighted,
    /// Every coefficient fixed at 1.
    Sum,
    /// Every coefficient fixed at `1 / n` for a user with `n` combinations.
    Mean,
}

impl Pooling {
    pub fn is_learned(self) -> bool {
        self == Pooling::Weighted
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Pooling::Weighted),
            "sum" => Ok(Pooling::Sum),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Unknown {
                kind: "pooling mode",
                name: s.into(),
            }),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Weighted => "weighted",
            Pooling::Sum => "sum",
            Pooling::Mean => "mean",
        })
    }
}

/// One mixing coefficient per combination, shared by every user holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingWeights {
    alpha: Vec<f64>,
}

impl MixingWeights {
    pub fn constant(z: usize, value: f64) -> Self {
        MixingWeights {
            alpha: vec![value; z],
        }
    }

    /// Every coefficient at `1 / n`, `n` being the mean number of
    /// combinations per user in the universe's population.
    pub fn initial(universe: &CombinationUniverse) -> Self {
        let counts: Vec<usize> = universe
            .by_user()
            .values()
            .map(Vec::len)
            .filter(|&n| n > 0)
            .collect();
        let mean = if counts.is_empty() {
            1.0
        } else {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64
        };
        MixingWeights::constant(universe.z(), 1.0 / mean)
    }

    pub fn from_vec(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("mixing weights must be finite".into()));
        }
        Ok(MixingWeights { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn get(&self, l: usize) -> f64 {
        self.alpha[l]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.alpha
    }
}

/// Effective coefficients applied to `indices` under `pooling`.
pub fn pooling_coefficients(indices: &[usize], weights: &MixingWeights, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::Weighted => indices.iter().map(|&l| weights.get(l)).collect(),
        Pooling::Sum => vec![1.0; indices.len()],
        Pooling::Mean => vec![1.0 / indices.len() as f64; indices.len()],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HatePerception {
    /// Length `d + 1`.
    pub vector: Vec<f64>,
    /// Set when the user had no combination in the universe; `vector` is then zero.
    pub cold_start: bool,
}

/// Pools the rows of `indices` with the coefficients `pooling` prescribes.
pub fn pool(
    indices: &[usize],
    model: &FactorModel,
    weights: &MixingWeights,
    pooling: Pooling,
) -> HatePerception {
    let d = model.dim();
    let mut vector = vec![0.0; d + 1];
    if indices.is_empty() {
        return HatePerception {
            vector,
            cold_start: true,
        };
    }
    let coeffs = pooling_coefficients(indices, weights, pooling);
    for (&l, &a) in indices.iter().zip(&coeffs) {
        for (v, p) in vector[..d].iter_mut().zip(model.combination_factors.row(l)) {
            *v += a * p;
        }
        vector[d] += a * model.combination_bias[l];
    }
    HatePerception {
        vector,
        cold_start: false,
    }
}

/// Hate-perception vector of `user` from the combinations they share with
/// the universe.
pub fn hate_perception(
    user: &UserProfile,
    model: &FactorModel,
    universe: &CombinationUniverse,
    weights: &MixingWeights,
    pooling: Pooling,
) -> HatePerception {
    pool(&universe.observed_overlap(user), model, weights, pooling)
}

/// A user's combinations and the stacked `[p_l ; b_c[l]]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HateSubspace {
    pub user_id: String,
    pub combination_indices: Vec<usize>,
    pub stacked: DenseMatrix,
}

impl HateSubspace {
    pub fn new(user_id: impl Into<String>, combination_indices: Vec<usize>, model: &FactorModel) -> Self {
        let rows: Vec<Vec<f64>> = combination_indices
            .iter()
            .map(|&l| model.combination_row(l))
            .collect();
        let stacked = if rows.is_empty() {
            DenseMatrix::zeros(0, model.dim() + 1)
        } else {
            DenseMatrix::from_rows(&rows)
        };
        HateSubspace {
            user_id: user_id.into(),
            combination_indices,
            stacked,
        }
    }

    pub fn for_user(user: &UserProfile, universe: &CombinationUniverse, model: &FactorModel) -> Self {
        HateSubspace::new(user.user_id.clone(), universe.observed_overlap(user), model)
    }

    pub fn len(&self) -> usize {
        self.combination_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combination_indices.is_empty()
    }
}

/// Leverage score of each row of `subspace`, aligned with its
/// `combination_indices`.
pub fn leverage_scores(subspace: &HateSubspace) -> Result<Vec<f64>> {
    row_leverage(&subspace.stacked)
}

/// Squared row norms of the left singular vectors whose singular values
/// exceed `max(n, p) * eps * sigma_max`.
///
/// Rows are decomposed in a canonical (sorted) order, so permuting the
/// input permutes the scores bit-for-bit; identical rows share one score.
pub fn row_leverage(matrix: &DenseMatrix) -> Result<Vec<f64>> {
    let (n, p) = (matrix.rows(), matrix.cols());
    if n == 0 || p == 0 {
        return Err(Error::Config("leverage scores need a non-empty matrix".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp_rows(matrix.row(a), matrix.row(b)));

    let sorted = DMatrix::from_fn(n, p, |r, c| matrix.get(order[r], c));
    let svd = sorted
        .try_svd(true, false, f64::EPSILON, 10_000)
        .ok_or(Error::SvdNonConvergence)?;
    let u = svd.u.as_ref().ok_or(Error::SvdNonConvergence)?;
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = n.max(p) as f64 * f64::EPSILON * sigma_max;
    let kept: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();

    let mut sorted_scores: Vec<f64> = (0..n)
        .map(|r| kept.iter().map(|&c| u[(r, c)].powi(2)).sum::<f64>().min(1.0))
        .collect();

    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && cmp_rows(matrix.row(order[start]), matrix.row(order[end])).is_eq() {
            end += 1;
        }
        if end - start > 1 {
            let mean = sorted_scores[start..end].iter().sum::<f64>() / (end - start) as f64;
            sorted_scores[start..end].iter_mut().for_each(|s| *s = mean);
        }
        start = end;
    }

    let mut scores = vec![0.0; n];
    for (pos, &row) in order.iter().enumerate() {
        scores[row] = sorted_scores[pos];
    }
    Ok(scores)
}

fn cmp_rows(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Numerical rank under the same tolerance [`row_leverage`] uses.
pub fn numerical_rank(matrix: &DenseMatrix) -> usize {
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return 0;
    }
    let m = DMatrix::from_row_slice(matrix.rows(), matrix.cols(), matrix.as_slice());
    let sv = m.singular_values();
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = matrix.rows().max(matrix.cols()) as f64 * f64::EPSILON * sigma_max;
    sv.iter().filter(|&&s| s > tol).count()
}

/// `||S - P_t S||_F` for `t = 0..=n`, where `P_t` projects onto the span of
/// the first `t` rows named by `row_order`.
pub fn reconstruction_errors(matrix: &DenseMatrix, row_order: &[usize]) -> Vec<f64> {
    let n = matrix.rows();
    let scale = (0..n)
        .map(|r| norm_sq(matrix.row(r)).sqrt())
        .fold(0.0, f64::max);
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);

    let mut residual = matrix.clone();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let frob = |m: &DenseMatrix| norm_sq(m.as_slice()).sqrt();
    let mut errors = Vec::with_capacity(row_order.len() + 1);
    errors.push(frob(&residual));

    for &r in row_order {
        let mut v = residual.row(r).to_vec();
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let nv = norm_sq(&v).sqrt();
        if nv > tol {
            v.iter_mut().for_each(|x| *x /= nv);
            for i in 0..n {
                let row = residual.row_mut(i);
                let c = dot(row, &v);
                row.iter_mut().zip(&v).for_each(|(x, y)| *x -= c * y);
            }
            basis.push(v);
        }
        // projection residuals cannot grow; clamp rounding noise
        let prev = *errors.last().unwrap();
        errors.push(frob(&residual).min(prev));
    }
    errors
}

/// Reconstruction error after each prefix of `ordering`, which must be a
/// permutation of the subspace's combination indices. Returns
/// `(count, error)` for `count = 0..=n`.
pub fn reconstruction_curve(subspace: &HateSubspace, ordering: &[usize]) -> Result<Vec<(usize, f64)>> {
    let position: HashMap<usize, usize> = subspace
        .combination_indices
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let mut seen = vec![false; subspace.len()];
    let mut rows = Vec::with_capacity(ordering.len());
    for &l in ordering {
        match position.get(&l) {
            Some(&i) if !seen[i] => {
                seen[i] = true;
                rows.push(i);
            }
            _ => {
                return Err(Error::Config(format!(
                    "ordering is not a permutation of the subspace's combinations (at {l})"
                )))
            }
        }
    }
    if rows.len() != subspace.len() {
        return Err(Error::Config("ordering misses combinations of the subspace".into()));
    }
    Ok(reconstruction_errors(&subspace.stacked, &rows)
        .into_iter()
        .enumerate()
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceAnalysis {
    pub leverage: Vec<(usize, f64)>,
    /// Combination indices by descending leverage.
    pub ordering: Vec<usize>,
    pub recon_error_curve: Vec<(usize, f64)>,
}

/// Sorts `(index, score)` pairs by descending score, ties by index.
fn rank_descending(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Leverage scores of one subspace and its leverage-ordered reconstruction curve.
pub fn analyze(subspace: &HateSubspace) -> Result<SubspaceAnalysis> {
    let scores = leverage_scores(subspace)?;
    let leverage: Vec<(usize, f64)> = subspace
        .combination_indices
        .iter()
        .copied()
        .zip(scores)
        .collect();
    let mut ranked = leverage.clone();
    rank_descending(&mut ranked);
    let ordering: Vec<usize> = ranked.iter().map(|&(l, _)| l).collect();
    let recon_error_curve = reconstruction_curve(subspace, &ordering)?;
    Ok(SubspaceAnalysis {
        leverage,
        ordering,
        recon_error_curve,
    })
}

/// Global ranking of every combination in the universe: each combination's
/// leverage is summed over all users whose subspace contains it. Returns
/// `(index, summed leverage)` by descending score.
pub fn global_leverage_ordering(
    users: &[UserProfile],
    universe: &CombinationUniverse,
    model: &FactorModel,
) -> Result<Vec<(usize, f64)>> {
    let mut totals = vec![0.0; universe.z()];
    for user in users {
        let subspace = HateSubspace::for_user(user, universe, model);
        if subspace.is_empty() {
            continue;
        }
        for (&l, s) in subspace
            .combination_indices
            .iter()
            .zip(leverage_scores(&subspace)?)
        {
            totals[l] += s;
        }
    }
    let mut ranked: Vec<(usize, f64)> = totals.into_iter().enumerate().collect();
    rank_descending(&mut ranked);
    Ok(ranked)
}

/// Mean over users of the reconstruction error when each subspace keeps only
/// its combinations among the first `t` of the global `ordering`, for every
/// `t` in `checkpoints`.
pub fn mean_reconstruction_curve(
    users: &[UserProfile],
    universe: &CombinationUniverse,
    model: &FactorModel,
    ordering: &[usize],
    checkpoints: &[usize],
) -> Vec<(usize, f64)> {
    let mut rank = vec![usize::MAX; universe.z()];
    for (pos, &l) in ordering.iter().enumerate() {
        rank[l] = pos;
    }
    let mut sums = vec![0.0; checkpoints.len()];
    let mut count = 0usize;
    for user in users {
        let subspace = HateSubspace::for_user(user, universe, model);
        if subspace.is_empty() {
            continue;
        }
        count += 1;
        let mut rows: Vec<usize> = (0..subspace.len()).collect();
        rows.sort_by_key(|&i| rank[subspace.combination_indices[i]]);
        let errors = reconstruction_errors(&subspace.stacked, &rows);
        for (sum, &t) in sums.iter_mut().zip(checkpoints) {
            let kept = rows
                .iter()
                .filter(|&&i| rank[subspace.combination_indices[i]] < t)
                .count();
            *sum += errors[kept];
        }
    }
    checkpoints
        .iter()
        .zip(sums)
        .map(|(&t, s)| (t, if count == 0 { 0.0 } else { s / count as f64 }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_with_rows(rows: &[(Vec<f64>, f64)]) -> FactorModel {
        let d = rows[0].0.len();
        let mut m = FactorModel::zeros(rows.len(), 1, d, 0.0);
        for (l, (p, b)) in rows.iter().enumerate() {
            m.combination_factors.row_mut(l).copy_from_slice(p);
            m.combination_bias[l] = *b;
        }
        m
    }

    #[test]
    fn singleton_pooling_returns_the_row() {
        let m = model_with_rows(&[(vec![0.5, -1.0], 0.25)]);
        let w = MixingWeights::constant(1, 1.0);
        let hp = pool(&[0], &m, &w, Pooling::Weighted);
        assert_eq!(hp.vector, vec![0.5, -1.0, 0.25]);
        assert!(!hp.cold_start);
    }

    #[test]
    fn weighted_pooling_matches_hand_sum() {
        let m = model_with_rows(&[(vec![1.0, 2.0], 4.0), (vec![-2.0, 0.0], 8.0)]);
        let w = MixingWeights::from_vec(vec![0.25, 0.75]).unwrap();
        let hp = pool(&[0, 1], &m, &w, Pooling::Weighted);
        assert_eq!(hp.vector, vec![0.25 - 1.5, 0.5, 1.0 + 6.0]);
    }

    #[test]
    fn mean_of_identical_rows() {
        let m = model_with_rows(&[
            (vec![0.3, 0.6], 0.9),
            (vec![0.3, 0.6], 0.9),
            (vec![0.3, 0.6], 0.9),
        ]);
        let w = MixingWeights::constant(3, 7.0);
        let hp = pool(&[0, 1, 2], &m, &w, Pooling::Mean);
        for (a, b) in hp.vector.iter().zip([0.3, 0.6, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_equals_weighted_with_unit_alpha() {
        let m = model_with_rows(&[(vec![0.1, 0.7], -0.2), (vec![0.4, -0.3], 0.5)]);
        let ones = MixingWeights::constant(2, 1.0);
        let noise = MixingWeights::constant(2, 3.3);
        assert_eq!(
            pool(&[0, 1], &m, &ones, Pooling::Weighted),
            pool(&[0, 1], &m, &noise, Pooling::Sum)
        );
    }

    #[test]
    fn cold_start_is_zero() {
        let m = model_with_rows(&[(vec![1.0], 1.0)]);
        let hp = pool(&[], &m, &MixingWeights::constant(1, 1.0), Pooling::Weighted);
        assert!(hp.cold_start);
        assert_eq!(hp.vector, vec![0.0, 0.0]);
    }

    #[test]
    fn orthonormal_rows_have_unit_leverage() {
        let m = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]);
        for s in row_leverage(&m).unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_rows_split_leverage() {
        let m = DenseMatrix::from_rows(&[
            vec![0.0, 2.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
        ]);
        let s = row_leverage(&m).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!((s[2] - 0.5).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_zero_leverage() {
        let m = DenseMatrix::zeros(3, 2);
        assert_eq!(row_leverage(&m).unwrap(), vec![0.0; 3]);
        assert!(row_leverage(&DenseMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn rank_one_curve_drops_at_first_row() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![-0.5, -1.0]]);
        let e = reconstruction_errors(&m, &[1, 0, 2]);
        assert!(e[0] > 1.0);
        assert!(e[1] < 1e-12 && e[2] < 1e-12 && e[3] < 1e-12);
    }

    #[test]
    fn curve_requires_permutation() {
        let m = model_with_rows(&[(vec![1.0], 0.0), (vec![0.0], 1.0)]);
        let s = HateSubspace::new("u", vec![0, 1], &m);
        assert!(reconstruction_curve(&s, &[0]).is_err());
        assert!(reconstruction_curve(&s, &[0, 0]).is_err());
        assert!(reconstruction_curve(&s, &[1, 5]).is_err());
        let c = reconstruction_curve(&s, &[1, 0]).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[2].1, 0.0);
    }

    #[test]
    fn analysis_orders_by_leverage() {
        let m = model_with_rows(&[
            (vec![1.0, 0.0], 0.0),
            (vec![1.0, 0.0], 0.0),
            (vec![0.0, 1.0], 0.0),
        ]);
        let s = HateSubspace::new("u", vec![0, 1, 2], &m);
        let a = analyze(&s).unwrap();
        assert_eq!(a.ordering, vec![2, 0, 1]);
        assert!(a.recon_error_curve.last().unwrap().1 < 1e-12);
    }
}
