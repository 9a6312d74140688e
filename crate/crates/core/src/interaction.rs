//! Combination-level label aggregation and the TF-IDF weighted
//! culture-post interaction matrix.
//!
//! Every annotation propagates downward: a user's label on post `j` counts
//! toward each of that user's combinations. Cell `(l, j)` then holds the
//! labels of all users possessing combination `l` who annotated post `j`.
//! Rows are treated as documents and posts as terms: the term frequency is
//! the hate fraction inside a cell and the document frequency of post `j` is
//! the number of combinations with a non-zero term frequency for it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::lattice::CombinationUniverse;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationCell {
    pub combination: usize,
    pub post: usize,
    /// Sorted ids of the users behind this cell.
    pub contributing_users: Vec<String>,
    pub hate_count: usize,
    pub total_count: usize,
}

/// Pools labels per `(combination, post)`.
///
/// Post indices follow `dataset.posts`. With `train_only`, only annotations
/// on training-split posts are used. Cells come back sorted by
/// `(combination, post)`.
pub fn aggregate(
    dataset: &Dataset,
    universe: &CombinationUniverse,
    train_only: bool,
) -> Vec<AggregationCell> {
    let post_index = dataset.post_index();
    let mut user_combos: HashMap<&str, Vec<usize>> = HashMap::new();
    for user in &dataset.users {
        let combos = match universe.user_combinations(&user.user_id) {
            Some(c) => c.to_vec(),
            None => universe.observed_overlap(user),
        };
        user_combos.insert(user.user_id.as_str(), combos);
    }

    let mut cells: BTreeMap<(usize, usize), (BTreeSet<&str>, usize)> = BTreeMap::new();
    for ann in &dataset.annotations {
        if train_only && dataset.split_of(&ann.post_id) != Some(Split::Train) {
            continue;
        }
        let (Some(&j), Some(combos)) = (
            post_index.get(ann.post_id.as_str()),
            user_combos.get(ann.user_id.as_str()),
        ) else {
            continue;
        };
        for &l in combos {
            let cell = cells.entry((l, j)).or_default();
            if cell.0.insert(ann.user_id.as_str()) && ann.hateful {
                cell.1 += 1;
            }
        }
    }

    cells
        .into_iter()
        .map(|((l, j), (users, hate))| AggregationCell {
            combination: l,
            post: j,
            total_count: users.len(),
            contributing_users: users.into_iter().map(str::to_string).collect(),
            hate_count: hate,
        })
        .collect()
}

/// Term-frequency strategy over a cell's label counts.
pub trait TermFrequency: Send + Sync {
    fn name(&self) -> &'static str;
    fn tf(&self, hate_count: usize, total_count: usize) -> f64;
}

/// Inverse-document-frequency strategy for a post given its document
/// frequency `df` among `z` combinations.
pub trait InverseDocumentFrequency: Send + Sync {
    fn name(&self) -> &'static str;
    fn idf(&self, df: usize, z: usize) -> f64;
}

/// Fraction of contributing users who labeled the post hateful.
#[derive(Debug, Clone, Copy, Default)]
pub struct HateFraction;

impl TermFrequency for HateFraction {
    fn name(&self) -> &'static str {
        "fraction"
    }

    fn tf(&self, hate_count: usize, total_count: usize) -> f64 {
        debug_assert!(total_count > 0 && hate_count <= total_count);
        hate_count as f64 / total_count as f64
    }
}

/// 1 if anyone in the cell labeled the post hateful, else 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnyHate;

impl TermFrequency for AnyHate {
    fn name(&self) -> &'static str {
        "binary"
    }

    fn tf(&self, hate_count: usize, _total_count: usize) -> f64 {
        if hate_count > 0 {
            1.0
        } else {
            0.0
        }
    }
}

/// `ln((1 + z) / (1 + df)) + 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SmoothIdf;

impl InverseDocumentFrequency for SmoothIdf {
    fn name(&self) -> &'static str {
        "smooth"
    }

    fn idf(&self, df: usize, z: usize) -> f64 {
        ((1.0 + z as f64) / (1.0 + df as f64)).ln() + 1.0
    }
}

/// Constant 1; leaves the term frequency unweighted.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitIdf;

impl InverseDocumentFrequency for UnitIdf {
    fn name(&self) -> &'static str {
        "none"
    }

    fn idf(&self, _df: usize, _z: usize) -> f64 {
        1.0
    }
}

pub fn tf_strategy(name: &str) -> Result<Box<dyn TermFrequency>> {
    match name {
        "fraction" => Ok(Box::new(HateFraction)),
        "binary" => Ok(Box::new(AnyHate)),
        _ => Err(Error::Unknown {
            kind: "tf strategy",
            name: name.into(),
        }),
    }
}

pub fn idf_strategy(name: &str) -> Result<Box<dyn InverseDocumentFrequency>> {
    match name {
        "smooth" => Ok(Box::new(SmoothIdf)),
        "none" => Ok(Box::new(UnitIdf)),
        _ => Err(Error::Unknown {
            kind: "idf strategy",
            name: name.into(),
        }),
    }
}

/// Default term frequency of a cell: its hate fraction.
pub fn tf(cell: &AggregationCell) -> f64 {
    HateFraction.tf(cell.hate_count, cell.total_count)
}

/// Default inverse document frequency of post `post` over `cells`.
pub fn idf(post: usize, cells: &[AggregationCell], z: usize) -> f64 {
    let df = cells.iter().filter(|c| c.post == post && tf(c) > 0.0).count();
    SmoothIdf.idf(df, z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// Sparse `z x m` matrix of observed cells. Observed zeros are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    z: usize,
    m: usize,
    entries: Vec<Entry>,
}

impl InteractionMatrix {
    /// Validates and sorts `entries`; duplicate coordinates, out-of-range
    /// indices and negative or non-finite weights are rejected.
    pub fn from_entries(z: usize, m: usize, mut entries: Vec<Entry>) -> Result<Self> {
        entries.sort_by_key(|e| (e.row, e.col));
        for (i, e) in entries.iter().enumerate() {
            if e.row >= z {
                return Err(Error::IndexOutOfRange {
                    what: "combination",
                    index: e.row,
                    size: z,
                });
            }
            if e.col >= m {
                return Err(Error::IndexOutOfRange {
                    what: "post",
                    index: e.col,
                    size: m,
                });
            }
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(Error::Config(format!(
                    "cell ({}, {}) has invalid weight {}",
                    e.row, e.col, e.weight
                )));
            }
            if i > 0 && (entries[i - 1].row, entries[i - 1].col) == (e.row, e.col) {
                return Err(Error::Config(format!("duplicate cell ({}, {})", e.row, e.col)));
            }
        }
        Ok(InteractionMatrix { z, m, entries })
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&(row, col), |e| (e.row, e.col))
            .ok()
            .map(|i| self.entries[i].weight)
    }

    pub fn mean(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.weight).sum::<f64>() / self.entries.len() as f64
    }

    /// Header `z=<z> m=<m>`, then `l<TAB>j<TAB>weight` per stored cell.
    pub fn to_triplets(&self) -> String {
        let mut out = format!("z={} m={}\n", self.z, self.m);
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.row, e.col, e.weight).unwrap();
        }
        out
    }

    pub fn parse_triplets(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        let mut z = None;
        let mut m = None;
        for part in header.split_whitespace() {
            match part.split_once('=') {
                Some(("z", v)) => z = v.parse::<usize>().ok(),
                Some(("m", v)) => m = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (Some(z), Some(m)) = (z, m) else {
            return Err(Error::Format {
                line: 1,
                message: format!("expected `z=<z> m=<m>` header, got {header:?}"),
            });
        };
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format {
                line: i + 1,
                message: format!("expected l<TAB>j<TAB>weight, got {line:?}"),
            };
            let mut parts = line.split('\t');
            let row = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let col = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let weight = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            entries.push(Entry { row, col, weight });
        }
        InteractionMatrix::from_entries(z, m, entries)
    }
}

/// `Y[l, j] = tf(l, j) * idf(j)` for every aggregated cell.
pub fn build_matrix(
    cells: &[AggregationCell],
    z: usize,
    m: usize,
    tf: &dyn TermFrequency,
    idf: &dyn InverseDocumentFrequency,
) -> Result<InteractionMatrix> {
    let tfs: Vec<f64> = cells.iter().map(|c| tf.tf(c.hate_count, c.total_count)).collect();
    let mut df = vec![0usize; m];
    for (c, &t) in cells.iter().zip(&tfs) {
        if c.post >= m {
            return Err(Error::IndexOutOfRange {
                what: "post",
                index: c.post,
                size: m,
            });
        }
        if t > 0.0 {
            df[c.post] += 1;
        }
    }
    let idfs: Vec<f64> = df.iter().map(|&d| idf.idf(d, z)).collect();
    let entries = cells
        .iter()
        .zip(&tfs)
        .map(|(c, &t)| Entry {
            row: c.combination,
            col: c.post,
            weight: t * idfs[c.post],
        })
        .collect();
    InteractionMatrix::from_entries(z, m, entries)
}

/// Aggregates training annotations and builds the default TF-IDF matrix.
pub fn build_default(dataset: &Dataset, universe: &CombinationUniverse) -> Result<InteractionMatrix> {
    let cells = aggregate(dataset, universe, true);
    build_matrix(&cells, universe.z(), dataset.posts.len(), &HateFraction, &SmoothIdf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnnotationRecord, Post, UserProfile};
    use crate::lattice::build_universe;

    fn dataset(users: Vec<UserProfile>, labels: &[(&str, &str, bool)]) -> Dataset {
        let posts: Vec<Post> = {
            let mut seen = BTreeSet::new();
            labels
                .iter()
                .filter(|l| seen.insert(l.1))
                .map(|l| Post {
                    post_id: l.1.into(),
                    text: None,
                    text_embedding: None,
                })
                .collect()
        };
        let splits = posts.iter().map(|p| (p.post_id.clone(), Split::Train)).collect();
        Dataset {
            users,
            posts,
            annotations: labels
                .iter()
                .map(|(u, p, h)| AnnotationRecord {
                    user_id: u.to_string(),
                    post_id: p.to_string(),
                    hateful: *h,
                })
                .collect(),
            splits,
        }
    }

    #[test]
    fn single_user_propagates_to_all_subsets() {
        let u = UserProfile::from_pairs("u", &[("a", "1"), ("b", "1")]).unwrap();
        let ds = dataset(vec![u], &[("u", "p", true)]);
        let universe = build_universe(&ds.users, None);
        let cells = aggregate(&ds, &universe, true);
        assert_eq!(cells.len(), 3);
        assert!(cells.iter().all(|c| c.hate_count == 1 && c.total_count == 1));
    }

    #[test]
    fn shared_value_pools_labels() {
        let u1 = UserProfile::from_pairs("u1", &[("a", "A"), ("b", "x")]).unwrap();
        let u2 = UserProfile::from_pairs("u2", &[("a", "A"), ("b", "y")]).unwrap();
        let ds = dataset(vec![u1, u2], &[("u1", "p", true), ("u2", "p", false)]);
        let universe = build_universe(&ds.users, None);
        let cells = aggregate(&ds, &universe, true);
        let a = universe
            .index_of(&crate::lattice::Combination::new(vec![
                crate::data::AttributeValue::new("a", "A").unwrap(),
            ]).unwrap())
            .unwrap();
        let cell = cells.iter().find(|c| c.combination == a).unwrap();
        assert_eq!((cell.hate_count, cell.total_count), (1, 2));
        assert_eq!(cell.contributing_users, vec!["u1", "u2"]);
    }

    #[test]
    fn no_training_annotations() {
        let u = UserProfile::from_pairs("u", &[("a", "1")]).unwrap();
        let mut ds = dataset(vec![u], &[("u", "p", true)]);
        ds.splits.insert("p".into(), Split::Test);
        let universe = build_universe(&ds.users, None);
        assert!(aggregate(&ds, &universe, true).is_empty());
        assert_eq!(aggregate(&ds, &universe, false).len(), 1);
    }

    #[test]
    fn tf_values() {
        let cell = |h, t| AggregationCell {
            combination: 0,
            post: 0,
            contributing_users: vec![],
            hate_count: h,
            total_count: t,
        };
        assert_eq!(tf(&cell(1, 1)), 1.0);
        assert_eq!(tf(&cell(1, 2)), 0.5);
        assert_eq!(tf(&cell(3, 4)), 0.75);
    }

    #[test]
    fn idf_values() {
        assert_eq!(SmoothIdf.idf(5, 5), 1.0);
        assert!((SmoothIdf.idf(0, 3) - (1.0 + 4f64.ln())).abs() < 1e-15);
        assert!((SmoothIdf.idf(0, 3) - 2.3863).abs() < 1e-4);
        assert!((SmoothIdf.idf(9, 100) - 3.3125).abs() < 1e-4);
    }

    #[test]
    fn single_cell_matrix() {
        let cells = vec![AggregationCell {
            combination: 0,
            post: 0,
            contributing_users: vec!["u".into()],
            hate_count: 1,
            total_count: 1,
        }];
        let y = build_matrix(&cells, 1, 1, &HateFraction, &SmoothIdf).unwrap();
        assert_eq!(y.get(0, 0), Some(1.0));
    }

    #[test]
    fn all_negative_dataset_stores_zeros() {
        let u = UserProfile::from_pairs("u", &[("a", "1"), ("b", "2")]).unwrap();
        let ds = dataset(vec![u], &[("u", "p", false), ("u", "q", false)]);
        let universe = build_universe(&ds.users, None);
        let y = build_default(&ds, &universe).unwrap();
        assert_eq!(y.nnz(), 6);
        assert!(y.entries().iter().all(|e| e.weight == 0.0));
    }

    #[test]
    fn triplets_round_trip() {
        let y = InteractionMatrix::from_entries(
            3,
            2,
            vec![
                Entry { row: 2, col: 1, weight: 0.1 + 0.2 },
                Entry { row: 0, col: 0, weight: 1.0 / 3.0 },
            ],
        )
        .unwrap();
        let text = y.to_triplets();
        assert!(text.starts_with("z=3 m=2\n0\t0\t"));
        assert_eq!(InteractionMatrix::parse_triplets(&text).unwrap(), y);
    }

    #[test]
    fn invalid_entries_rejected() {
        let e = |row, col, weight| Entry { row, col, weight };
        assert!(InteractionMatrix::from_entries(1, 1, vec![e(1, 0, 1.0)]).is_err());
        assert!(InteractionMatrix::from_entries(1, 1, vec![e(0, 0, f64::NAN)]).is_err());
        assert!(InteractionMatrix::from_entries(1, 1, vec![e(0, 0, -1.0)]).is_err());
        assert!(InteractionMatrix::from_entries(1, 1, vec![e(0, 0, 1.0), e(0, 0, 2.0)]).is_err());
    }

    #[test]
    fn strategy_lookup() {
        assert_eq!(tf_strategy("binary").unwrap().tf(1, 4), 1.0);
        assert_eq!(idf_strategy("none").unwrap().idf(3, 9), 1.0);
        assert!(tf_strategy("bogus").is_err());
    }
}
