//! Annotation datasets: domain types, file ingestion and post-level splits.
//!
//! An annotation file is delimited text (tab or comma, detected from the
//! header line) with one `(user, post, label)` judgment per row. Which
//! columns hold what is described by a [`Schema`], itself a small TOML file.
//! Cultural attribute columns are categorical; numeric columns are accepted
//! only when the schema declares bin edges for them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One categorical cultural attribute, e.g. `country=US`.
///
/// Both parts are stored trimmed. Ordering is by attribute name, then value,
/// which is the canonical member order used by the lattice.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributeValue {
    pub attribute: String,
    pub value: String,
}

impl AttributeValue {
    pub fn new(attribute: &str, value: &str) -> Result<Self> {
        let attribute = attribute.trim();
        let value = value.trim();
        if attribute.is_empty() || value.is_empty() {
            return Err(Error::InvalidAttribute(format!(
                "attribute name and value must be non-empty (got {attribute:?}={value:?})"
            )));
        }
        Ok(AttributeValue {
            attribute: attribute.to_string(),
            value: value.to_string(),
        })
    }
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.attribute, self.value)
    }
}

/// An annotator and their cultural background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    attributes: Vec<AttributeValue>,
}

impl UserProfile {
    /// Builds a profile, rejecting two values for the same attribute.
    /// Attributes are kept in canonical order.
    pub fn new(user_id: impl Into<String>, attributes: Vec<AttributeValue>) -> Result<Self> {
        let mut attributes = attributes;
        attributes.sort();
        attributes.dedup();
        for pair in attributes.windows(2) {
            if pair[0].attribute == pair[1].attribute {
                return Err(Error::InvalidAttribute(format!(
                    "attribute {:?} has two values ({:?}, {:?})",
                    pair[0].attribute, pair[0].value, pair[1].value
                )));
            }
        }
        Ok(UserProfile {
            user_id: user_id.into(),
            attributes,
        })
    }

    /// Convenience constructor from `(attribute, value)` string pairs.
    pub fn from_pairs(user_id: impl Into<String>, pairs: &[(&str, &str)]) -> Result<Self> {
        let attributes = pairs
            .iter()
            .map(|(a, v)| AttributeValue::new(a, v))
            .collect::<Result<Vec<_>>>()?;
        UserProfile::new(user_id, attributes)
    }

    pub fn attributes(&self) -> &[AttributeValue] {
        &self.attributes
    }

    pub fn get(&self, attribute: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|a| a.attribute == attribute)
            .map(|a| a.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub user_id: String,
    pub post_id: String,
    pub hateful: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub text: Option<String>,
    pub text_embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(token: &str) -> Option<Split> {
        match token.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" | "dev" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub users: Vec<UserProfile>,
    pub posts: Vec<Post>,
    pub annotations: Vec<AnnotationRecord>,
    /// Post-level split assignment.
    pub splits: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.user_id.as_str(), i))
            .collect()
    }

    pub fn post_index(&self) -> HashMap<&str, usize> {
        self.posts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.post_id.as_str(), i))
            .collect()
    }

    pub fn split_of(&self, post_id: &str) -> Option<Split> {
        self.splits.get(post_id).copied()
    }

    /// Annotations whose post belongs to `split`.
    pub fn annotations_in(&self, split: Split) -> impl Iterator<Item = &AnnotationRecord> + '_ {
        self.annotations
            .iter()
            .filter(move |a| self.split_of(&a.post_id) == Some(split))
    }

    /// Users with at least one annotation in `split`, in dataset order.
    pub fn users_in(&self, split: Split) -> Vec<&UserProfile> {
        let active: BTreeSet<&str> = self
            .annotations_in(split)
            .map(|a| a.user_id.as_str())
            .collect();
        self.users
            .iter()
            .filter(|u| active.contains(u.user_id.as_str()))
            .collect()
    }

    pub fn post_ids(&self) -> Vec<String> {
        self.posts.iter().map(|p| p.post_id.clone()).collect()
    }

    /// Copies vectors from `embeddings` onto the matching posts.
    pub fn attach_embeddings(&mut self, embeddings: &Embeddings) {
        for post in &mut self.posts {
            if let Some(v) = embeddings.vectors.get(&post.post_id) {
                post.text_embedding = Some(v.clone());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DedupPolicy {
    /// Conflicting duplicate labels are an error.
    #[default]
    #[serde(rename = "error")]
    Error,
    /// The last row for a `(user, post)` pair wins.
    #[serde(rename = "keep-last")]
    KeepLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    /// Ascending bin edges; a value `v` falls into `[edges[i], edges[i+1])`.
    pub edges: Vec<f64>,
}

impl BinSpec {
    pub fn label(&self, v: f64) -> String {
        let edges = &self.edges;
        if v < edges[0] {
            return format!("<{}", edges[0]);
        }
        for w in edges.windows(2) {
            if v >= w[0] && v < w[1] {
                return format!("{}-{}", w[0], w[1]);
            }
        }
        format!(">={}", edges[edges.len() - 1])
    }
}

const DEFAULT_TRUE_TOKENS: &[&str] = &["1", "true", "yes", "hate", "hateful"];
const DEFAULT_FALSE_TOKENS: &[&str] = &["0", "false", "no", "non-hate", "not-hate", "nonhateful"];

/// Column mapping for an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub user_id_col: String,
    pub post_id_col: String,
    pub label_col: String,
    #[serde(default)]
    pub text_col: Option<String>,
    /// Optional column holding a precomputed train/val/test assignment.
    #[serde(default)]
    pub split_col: Option<String>,
    #[serde(default)]
    pub attribute_cols: Vec<String>,
    #[serde(default)]
    pub label_true_tokens: Option<Vec<String>>,
    #[serde(default)]
    pub label_false_tokens: Option<Vec<String>>,
    #[serde(default)]
    pub dedup: DedupPolicy,
    #[serde(default)]
    pub bins: BTreeMap<String, BinSpec>,
}

impl Schema {
    pub fn new(user_id_col: &str, post_id_col: &str, label_col: &str) -> Self {
        Schema {
            user_id_col: user_id_col.into(),
            post_id_col: post_id_col.into(),
            label_col: label_col.into(),
            text_col: None,
            split_col: None,
            attribute_cols: Vec::new(),
            label_true_tokens: None,
            label_false_tokens: None,
            dedup: DedupPolicy::Error,
            bins: BTreeMap::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Schema::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn validate(&self) -> Result<()> {
        for (col, spec) in &self.bins {
            if !self.attribute_cols.contains(col) {
                return Err(Error::Schema(format!(
                    "bins declared for {col:?}, which is not an attribute column"
                )));
            }
            if spec.edges.is_empty()
                || spec.edges.iter().any(|e| !e.is_finite())
                || spec.edges.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::Schema(format!(
                    "bins for {col:?} need finite, strictly ascending edges"
                )));
            }
        }
        Ok(())
    }

    fn true_tokens(&self) -> Vec<String> {
        tokens_or_default(&self.label_true_tokens, DEFAULT_TRUE_TOKENS)
    }

    fn false_tokens(&self) -> Vec<String> {
        tokens_or_default(&self.label_false_tokens, DEFAULT_FALSE_TOKENS)
    }
}

fn tokens_or_default(tokens: &Option<Vec<String>>, default: &[&str]) -> Vec<String> {
    match tokens {
        Some(t) => t.iter().map(|s| s.trim().to_lowercase()).collect(),
        None => default.iter().map(|s| s.to_string()).collect(),
    }
}

fn detect_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Reads an annotation file into a validated [`Dataset`].
pub fn load_annotations(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, schema)
}

/// Parses annotation text; see [`load_annotations`].
pub fn parse_annotations(text: &str, schema: &Schema) -> Result<Dataset> {
    let header_line = text.lines().next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(header_line))
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} not found in header")))
    };
    let user_col = column(&schema.user_id_col)?;
    let post_col = column(&schema.post_id_col)?;
    let label_col = column(&schema.label_col)?;
    let text_col = schema.text_col.as_deref().map(column).transpose()?;
    let split_col = schema.split_col.as_deref().map(column).transpose()?;
    let attr_cols = schema
        .attribute_cols
        .iter()
        .map(|name| column(name).map(|i| (name.as_str(), i)))
        .collect::<Result<Vec<_>>>()?;

    let true_tokens = schema.true_tokens();
    let false_tokens = schema.false_tokens();

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((row, record));
    }

    reject_unbinned_numeric(schema, &attr_cols, &rows)?;

    let mut users: Vec<UserProfile> = Vec::new();
    let mut user_attrs: HashMap<String, BTreeMap<String, String>> = HashMap::new();
    let mut user_order: Vec<String> = Vec::new();
    let mut posts: Vec<Post> = Vec::new();
    let mut post_pos: HashMap<String, usize> = HashMap::new();
    let mut labels: Vec<AnnotationRecord> = Vec::new();
    let mut label_pos: HashMap<(String, String), usize> = HashMap::new();
    let mut splits: BTreeMap<String, Split> = BTreeMap::new();

    for (row, record) in &rows {
        let row = *row;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let user_id = field(user_col);
        let post_id = field(post_col);
        if user_id.is_empty() || post_id.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty user or post id".into(),
            });
        }
        let token = field(label_col).to_lowercase();
        let hateful = if true_tokens.contains(&token) {
            true
        } else if false_tokens.contains(&token) {
            false
        } else {
            let mut accepted = true_tokens.clone();
            accepted.extend(false_tokens.iter().cloned());
            return Err(Error::UnknownLabel {
                row,
                token,
                accepted: accepted.join(", "),
            });
        };

        let attrs = user_attrs.entry(user_id.to_string()).or_insert_with(|| {
            user_order.push(user_id.to_string());
            BTreeMap::new()
        });
        for (name, i) in &attr_cols {
            let raw = field(*i);
            if raw.is_empty() {
                continue;
            }
            let value = match schema.bins.get(*name) {
                Some(spec) => {
                    let v: f64 = raw.parse().map_err(|_| Error::MalformedRow {
                        row,
                        message: format!("binned column {name:?} holds non-numeric value {raw:?}"),
                    })?;
                    spec.label(v)
                }
                None => raw.to_string(),
            };
            match attrs.get(*name) {
                Some(prev) if *prev != value => {
                    return Err(Error::MalformedRow {
                        row,
                        message: format!(
                            "user {user_id:?} has conflicting values for {name:?} ({prev:?} vs {value:?})"
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    attrs.insert(name.to_string(), value);
                }
            }
        }

        let pidx = *post_pos.entry(post_id.to_string()).or_insert_with(|| {
            posts.push(Post {
                post_id: post_id.to_string(),
                text: None,
                text_embedding: None,
            });
            posts.len() - 1
        });
        if let Some(tc) = text_col {
            let t = field(tc);
            if posts[pidx].text.is_none() && !t.is_empty() {
                posts[pidx].text = Some(t.to_string());
            }
        }
        if let Some(sc) = split_col {
            let raw = field(sc);
            let split = Split::parse(raw).ok_or_else(|| Error::MalformedRow {
                row,
                message: format!("unknown split {raw:?}"),
            })?;
            if let Some(prev) = splits.insert(post_id.to_string(), split) {
                if prev != split {
                    return Err(Error::MalformedRow {
                        row,
                        message: format!("post {post_id:?} assigned to both {prev} and {split}"),
                    });
                }
            }
        }

        let key = (user_id.to_string(), post_id.to_string());
        match label_pos.get(&key) {
            Some(&i) if labels[i].hateful == hateful => {}
            Some(&i) => match schema.dedup {
                DedupPolicy::Error => {
                    return Err(Error::ConflictingDuplicate {
                        row,
                        user_id: key.0,
                        post_id: key.1,
                    })
                }
                DedupPolicy::KeepLast => labels[i].hateful = hateful,
            },
            None => {
                label_pos.insert(key, labels.len());
                labels.push(AnnotationRecord {
                    user_id: user_id.to_string(),
                    post_id: post_id.to_string(),
                    hateful,
                });
            }
        }
    }

    for user_id in user_order {
        let attrs = &user_attrs[&user_id];
        let attributes = attrs
            .iter()
            .map(|(a, v)| AttributeValue::new(a, v))
            .collect::<Result<Vec<_>>>()?;
        users.push(UserProfile::new(user_id, attributes)?);
    }

    Ok(Dataset {
        users,
        posts,
        annotations: labels,
        splits,
    })
}

fn reject_unbinned_numeric(
    schema: &Schema,
    attr_cols: &[(&str, usize)],
    rows: &[(usize, csv::StringRecord)],
) -> Result<()> {
    for (name, i) in attr_cols {
        if schema.bins.contains_key(*name) {
            continue;
        }
        let mut values = rows
            .iter()
            .map(|(_, r)| r.get(*i).unwrap_or("").trim())
            .filter(|v| !v.is_empty())
            .peekable();
        if values.peek().is_none() {
            continue;
        }
        if values.all(|v| v.parse::<f64>().is_ok()) {
            return Err(Error::Schema(format!(
                "attribute column {name:?} is numeric; declare [bins.{name}] edges to use it"
            )));
        }
    }
    Ok(())
}

/// Writes a dataset as a tab-separated annotation file readable with
/// [`Schema::default_for`].
pub fn write_annotations(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let attr_names: BTreeSet<&str> = dataset
        .users
        .iter()
        .flat_map(|u| u.attributes().iter().map(|a| a.attribute.as_str()))
        .collect();
    let users = dataset.user_index();
    let posts = dataset.post_index();
    let mut out = String::new();
    out.push_str("user_id\tpost_id\tlabel\ttext\tsplit");
    for a in &attr_names {
        out.push('\t');
        out.push_str(a);
    }
    out.push('\n');
    for ann in &dataset.annotations {
        let user = &dataset.users[users[ann.user_id.as_str()]];
        let post = &dataset.posts[posts[ann.post_id.as_str()]];
        let split = dataset
            .split_of(&ann.post_id)
            .map(Split::as_str)
            .unwrap_or("");
        let text = post.text.as_deref().unwrap_or("").replace(['\t', '\n'], " ");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}",
            ann.user_id, ann.post_id, ann.hateful as u8, text, split
        ));
        for a in &attr_names {
            out.push('\t');
            out.push_str(user.get(a).unwrap_or(""));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl Schema {
    /// Schema matching the layout produced by [`write_annotations`].
    pub fn default_for(dataset: &Dataset) -> Schema {
        let attr_names: BTreeSet<String> = dataset
            .users
            .iter()
            .flat_map(|u| u.attributes().iter().map(|a| a.attribute.clone()))
            .collect();
        let mut schema = Schema::new("user_id", "post_id", "label");
        schema.text_col = Some("text".into());
        schema.attribute_cols = attr_names.into_iter().collect();
        let fully_split = !dataset.posts.is_empty()
            && dataset.posts.iter().all(|p| dataset.splits.contains_key(&p.post_id));
        if fully_split {
            schema.split_col = Some("split".into());
        }
        schema
    }
}

/// Precomputed text embeddings keyed by post id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embeddings {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

/// Reads an embedding file: a `dim=<e>` header, then
/// `post_id<TAB>v1 v2 ... ve` per line.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => {
            return Err(Error::Format {
                line: 1,
                message: "missing dim=<e> header".into(),
            })
        }
    };
    let dim = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::Format {
            line: 1,
            message: format!("expected dim=<e> header, got {header:?}"),
        })?;

    let mut vectors = BTreeMap::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (post_id, body) = line.split_once('\t').ok_or_else(|| Error::Format {
            line: lineno,
            message: "expected post_id<TAB>values".into(),
        })?;
        let post_id = post_id.trim().to_string();
        let values = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                line: lineno,
                message: format!("bad float: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::EmbeddingDimension {
                post_id,
                expected: dim,
                actual: values.len(),
            });
        }
        if vectors.contains_key(&post_id) {
            return Err(Error::DuplicateEmbedding(post_id));
        }
        vectors.insert(post_id, values);
    }
    Ok(Embeddings { dim, vectors })
}

pub fn write_embeddings(embeddings: &Embeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "dim={}", embeddings.dim).unwrap();
    for (id, v) in &embeddings.vectors {
        let body: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{id}\t{}", body.join(" ")).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Split sizes by largest remainder: each split gets `floor(r * n)`, and the
/// leftover posts go to the splits with the largest fractional parts (ties
/// to the earlier split). Ten posts at 0.7/0.15/0.15 give 7/2/1.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Assigns each post to train/val/test by a seeded shuffle.
pub fn split_posts(mut dataset: Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::InvalidRatios(format!("{r:?} must all be positive")));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("{r:?} must sum to 1")));
    }
    let n = dataset.posts.len();
    if n < 3 {
        return Err(Error::TooFewPosts(n));
    }
    let mut ids = dataset.post_ids();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let [n_train, n_val, _] = split_sizes(n, ratios);
    dataset.splits = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    Ok(dataset)
}
