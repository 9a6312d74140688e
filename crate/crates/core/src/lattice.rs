//! Cultural-background combinations and the universe of observed ones.
//!
//! A combination is a non-empty subset of one annotator's attribute values.
//! Every annotator contributes the `2^k - 1` non-empty subsets of their `k`
//! attributes; the universe is the deduplicated union, indexed in
//! lexicographic order of the canonical member lists so that indices do not
//! depend on the order users were seen in.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::data::{AttributeValue, UserProfile};
use crate::error::{Error, Result};

/// Attribute name used to tag combinations in the annotator-level variant.
pub const ANNOTATOR_ATTRIBUTE: &str = "@annotator";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Combination {
    members: Vec<AttributeValue>,
}

impl Combination {
    /// Builds a combination in canonical member order.
    pub fn new(members: Vec<AttributeValue>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidAttribute("combination must be non-empty".into()));
        }
        let mut members = members;
        members.sort();
        members.dedup();
        if members.windows(2).any(|w| w[0].attribute == w[1].attribute) {
            return Err(Error::InvalidAttribute(
                "combination holds two values for one attribute".into(),
            ));
        }
        Ok(Combination { members })
    }

    pub fn members(&self) -> &[AttributeValue] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// True when every member of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &Combination) -> bool {
        self.members.iter().all(|m| other.members.binary_search(m).is_ok())
    }

    /// True when the combination is contained in the profile's attributes.
    pub fn is_held_by(&self, profile: &UserProfile) -> bool {
        self.members
            .iter()
            .all(|m| profile.attributes().binary_search(m).is_ok())
    }

    /// `attr=val;attr=val` with `%`, `=`, `;`, tab and newlines percent-escaped.
    pub fn to_manifest_string(&self) -> String {
        self.members
            .iter()
            .map(|m| format!("{}={}", escape(&m.attribute), escape(&m.value)))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse_manifest_string(s: &str) -> Result<Self> {
        let members = s
            .split(';')
            .map(|part| {
                let (a, v) = part.split_once('=').ok_or_else(|| {
                    Error::InvalidAttribute(format!("expected attr=value, got {part:?}"))
                })?;
                AttributeValue::new(&unescape(a)?, &unescape(v)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Combination::new(members)
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.members.iter().map(|m| m.to_string()).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' | '=' | ';' | '\t' | '\n' | '\r' => out.push_str(&format!("%{:02X}", c as u32)),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '%' {
            let hex: String = chars.by_ref().take(2).collect();
            let code = u8::from_str_radix(&hex, 16)
                .map_err(|_| Error::InvalidAttribute(format!("bad escape %{hex} in {s:?}")))?;
            out.push(code as char);
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

/// All non-empty subsets of the profile's attributes, ordered by size and
/// then by bitmask over the canonical attribute order. Empty profiles yield
/// an empty list.
pub fn power_set(profile: &UserProfile) -> Vec<Combination> {
    subsets(profile.attributes(), None)
}

/// Non-empty subsets with at most `max_order` members (all when `None`).
pub fn subsets(attributes: &[AttributeValue], max_order: Option<usize>) -> Vec<Combination> {
    let k = attributes.len();
    assert!(k < 32, "profiles with {k} attributes are beyond the lattice's range");
    let cap = max_order.unwrap_or(k).min(k);
    let mut masks: Vec<u32> = (1u32..(1u32 << k))
        .filter(|m| m.count_ones() as usize <= cap)
        .collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    masks
        .into_iter()
        .map(|mask| Combination {
            members: (0..k)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| attributes[i].clone())
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UniverseKind {
    /// Rows are cultural-background combinations.
    #[default]
    Combinations,
    /// One row per annotator: the full attribute set tagged with the user id.
    Annotators,
}

#[derive(Debug, Clone)]
pub struct CombinationUniverse {
    kind: UniverseKind,
    max_order: Option<usize>,
    combinations: Vec<Combination>,
    lookup: HashMap<Combination, usize>,
    by_user: BTreeMap<String, Vec<usize>>,
}

impl CombinationUniverse {
    fn from_set(
        kind: UniverseKind,
        max_order: Option<usize>,
        set: BTreeSet<Combination>,
        users: &[UserProfile],
    ) -> Self {
        let combinations: Vec<Combination> = set.into_iter().collect();
        let lookup = combinations
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        let mut universe = CombinationUniverse {
            kind,
            max_order,
            combinations,
            lookup,
            by_user: BTreeMap::new(),
        };
        for user in users {
            let indices = universe.observed_overlap(user);
            universe.by_user.insert(user.user_id.clone(), indices);
        }
        universe
    }

    /// Rebuilds a universe from its combination list, e.g. after reading a
    /// manifest. The list is re-sorted into canonical order.
    pub fn from_combinations(
        combinations: Vec<Combination>,
        users: &[UserProfile],
    ) -> Result<Self> {
        let annotator = combinations
            .iter()
            .any(|c| c.members.iter().any(|m| m.attribute == ANNOTATOR_ATTRIBUTE));
        let kind = if annotator {
            UniverseKind::Annotators
        } else {
            UniverseKind::Combinations
        };
        let max_order = combinations.iter().map(Combination::len).max();
        let n = combinations.len();
        let set: BTreeSet<Combination> = combinations.into_iter().collect();
        if set.len() != n {
            return Err(Error::InvalidAttribute("duplicate combination in universe".into()));
        }
        Ok(Self::from_set(kind, max_order, set, users))
    }

    pub fn kind(&self) -> UniverseKind {
        self.kind
    }

    pub fn max_order(&self) -> Option<usize> {
        self.max_order
    }

    /// Total number of combinations.
    pub fn z(&self) -> usize {
        self.combinations.len()
    }

    pub fn combinations(&self) -> &[Combination] {
        &self.combinations
    }

    pub fn combination(&self, index: usize) -> Option<&Combination> {
        self.combinations.get(index)
    }

    pub fn index_of(&self, combination: &Combination) -> Option<usize> {
        self.lookup.get(combination).copied()
    }

    /// Combination indices of each user the universe was built from.
    pub fn by_user(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_user
    }

    pub fn user_combinations(&self, user_id: &str) -> Option<&[usize]> {
        self.by_user.get(user_id).map(Vec::as_slice)
    }

    /// Candidate combinations a profile could hold under this universe's kind.
    fn candidates(&self, profile: &UserProfile) -> Vec<Combination> {
        match self.kind {
            UniverseKind::Combinations => subsets(profile.attributes(), self.max_order),
            UniverseKind::Annotators => vec![annotator_combination(profile)],
        }
    }

    /// Indices of the profile's combinations that exist in the universe,
    /// ascending. Empty when nothing overlaps.
    pub fn observed_overlap(&self, profile: &UserProfile) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .candidates(profile)
            .iter()
            .filter_map(|c| self.index_of(c))
            .collect();
        out.sort_unstable();
        out
    }

    /// One line per combination: `index<TAB>attr=val;attr=val`.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.combinations.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\n", c.to_manifest_string()));
        }
        out
    }

    pub fn parse_manifest(text: &str, users: &[UserProfile]) -> Result<Self> {
        let mut combinations = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let format_err = |message: String| Error::Format {
                line: lineno + 1,
                message,
            };
            let (idx, body) = line
                .split_once('\t')
                .ok_or_else(|| format_err("expected index<TAB>members".into()))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| format_err(format!("bad index {idx:?}")))?;
            if idx != combinations.len() {
                return Err(format_err(format!(
                    "index {idx} out of sequence (expected {})",
                    combinations.len()
                )));
            }
            combinations.push(
                Combination::parse_manifest_string(body).map_err(|e| format_err(e.to_string()))?,
            );
        }
        let universe = Self::from_combinations(combinations.clone(), users)?;
        if universe.combinations != combinations {
            return Err(Error::Format {
                line: 0,
                message: "manifest is not in canonical order".into(),
            });
        }
        Ok(universe)
    }
}

fn annotator_combination(profile: &UserProfile) -> Combination {
    let mut members = profile.attributes().to_vec();
    members.push(AttributeValue {
        attribute: ANNOTATOR_ATTRIBUTE.to_string(),
        value: profile.user_id.clone(),
    });
    members.sort();
    Combination { members }
}

/// Deduplicated union of every user's combinations, optionally capped at
/// `max_order` members per combination.
pub fn build_universe(users: &[UserProfile], max_order: Option<usize>) -> CombinationUniverse {
    let set: BTreeSet<Combination> = users
        .iter()
        .flat_map(|u| subsets(u.attributes(), max_order))
        .collect();
    CombinationUniverse::from_set(UniverseKind::Combinations, max_order, set, users)
}

/// Annotator-level universe: each user's only combination is their full
/// attribute set tagged with their identity.
pub fn build_annotator_universe(users: &[UserProfile]) -> CombinationUniverse {
    let set: BTreeSet<Combination> = users.iter().map(annotator_combination).collect();
    CombinationUniverse::from_set(UniverseKind::Annotators, None, set, users)
}
