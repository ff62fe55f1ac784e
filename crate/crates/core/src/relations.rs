//! Canonical spatial ontology, relation-phrase normalization, grid offsets
//! and the rule-based predicate checker.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::Gateway;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("relation phrase '{0}' has no canonical mapping")]
    NonCanonicalRelation(String),
    #[error("empty relation phrase")]
    EmptyPhrase,
    #[error("invalid relation table: {0}")]
    InvalidTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalRelation {
    Above,
    Below,
    AtLeftOf,
    AtRightOf,
    OnTopOf,
}

impl CanonicalRelation {
    pub const ALL: [CanonicalRelation; 5] = [
        CanonicalRelation::Above,
        CanonicalRelation::Below,
        CanonicalRelation::AtLeftOf,
        CanonicalRelation::AtRightOf,
        CanonicalRelation::OnTopOf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CanonicalRelation::Above => "above",
            CanonicalRelation::Below => "below",
            CanonicalRelation::AtLeftOf => "at_left_of",
            CanonicalRelation::AtRightOf => "at_right_of",
            CanonicalRelation::OnTopOf => "on_top_of",
        }
    }

    pub fn offset(self) -> GridOffset {
        let (dx, dy) = match self {
            CanonicalRelation::AtLeftOf => (-3, 0),
            CanonicalRelation::AtRightOf => (3, 0),
            CanonicalRelation::Above => (0, -3),
            CanonicalRelation::Below => (0, 3),
            CanonicalRelation::OnTopOf => (0, 0),
        };
        GridOffset {
            dx,
            dy,
            overlap: self == CanonicalRelation::OnTopOf,
        }
    }
}

impl fmt::Display for CanonicalRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CanonicalRelation {
    type Err = RelationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_lowercase().replace([' ', '-'], "_");
        CanonicalRelation::ALL
            .into_iter()
            .find(|r| r.as_str() == key)
            .ok_or_else(|| RelationError::NonCanonicalRelation(s.to_string()))
    }
}

/// Displacement of a subject relative to its anchor. Y grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridOffset {
    pub dx: i32,
    pub dy: i32,
    pub overlap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }
}

/// A cell plus the depth of the layer the object sits in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: i32,
    pub y: i32,
    pub layer: u8,
}

impl Position {
    pub fn new(x: i32, y: i32, layer: u8) -> Self {
        Position { x, y, layer }
    }

    pub fn cell(self) -> Cell {
        Cell::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffsetTarget {
    pub cell: Cell,
    /// Set for `OnTopOf`: same cell, the subject goes to a higher layer.
    pub layer_shift: bool,
}

pub fn apply_offset(anchor: Cell, relation: CanonicalRelation) -> OffsetTarget {
    let off = relation.offset();
    OffsetTarget {
        cell: Cell::new(anchor.x + off.dx, anchor.y + off.dy),
        layer_shift: off.overlap,
    }
}

/// Directional check of `a R b`.
pub fn check_predicate(a: Position, b: Position, relation: CanonicalRelation) -> bool {
    match relation {
        CanonicalRelation::AtLeftOf => a.x < b.x,
        CanonicalRelation::AtRightOf => a.x > b.x,
        CanonicalRelation::Above => a.y < b.y,
        CanonicalRelation::Below => a.y > b.y,
        CanonicalRelation::OnTopOf => a.x == b.x && a.y == b.y && a.layer > b.layer,
    }
}

/// A table entry. `reversed` swaps subject and object before the canonical
/// relation applies ("X contains Y" means Y sits on top of X).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMapping {
    pub relation: CanonicalRelation,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reversed: bool,
}

impl RelationMapping {
    pub fn plain(relation: CanonicalRelation) -> Self {
        RelationMapping {
            relation,
            reversed: false,
        }
    }

    pub fn reversed(relation: CanonicalRelation) -> Self {
        RelationMapping {
            relation,
            reversed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingSource {
    Table,
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RelationMapTable {
    entries: BTreeMap<String, RelationMapping>,
}

/// Lowercase, `_` as space, collapsed whitespace.
pub fn normalize_phrase(phrase: &str) -> String {
    phrase
        .to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl RelationMapTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Canonical names, common spellings of them, and the fallback table for
    /// the phrases seen in the bundled stories.
    pub fn builtin() -> Self {
        use CanonicalRelation::*;
        let mut t = Self::empty();
        for (phrase, rel) in [
            ("above", Above),
            ("below", Below),
            ("under", Below),
            ("beneath", Below),
            ("at left of", AtLeftOf),
            ("at the left of", AtLeftOf),
            ("left of", AtLeftOf),
            ("to the left of", AtLeftOf),
            ("at right of", AtRightOf),
            ("at the right of", AtRightOf),
            ("right of", AtRightOf),
            ("to the right of", AtRightOf),
            ("on top of", OnTopOf),
            ("sits atop", OnTopOf),
            ("on", OnTopOf),
            ("stands near", AtLeftOf),
            ("next to", AtRightOf),
            ("walks along", OnTopOf),
            ("stands before", AtLeftOf),
            ("leads to", AtRightOf),
            ("hide behind", AtRightOf),
            ("glows with", OnTopOf),
            ("filters through", Above),
        ] {
            t.insert(phrase, RelationMapping::plain(rel));
        }
        t.insert("contains", RelationMapping::reversed(OnTopOf));
        t
    }

    pub fn insert(&mut self, phrase: &str, mapping: RelationMapping) {
        self.entries.insert(normalize_phrase(phrase), mapping);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RelationMapping)> {
        self.entries.iter()
    }

    /// Exact lookup, then the first word with and without a trailing `s`
    /// ("lead to" finds "leads to").
    pub fn lookup(&self, phrase: &str) -> Option<RelationMapping> {
        let key = normalize_phrase(phrase);
        if let Some(m) = self.entries.get(&key) {
            return Some(*m);
        }
        let (first, rest) = match key.split_once(' ') {
            Some((f, r)) => (f.to_string(), format!(" {r}")),
            None => (key.clone(), String::new()),
        };
        let alt = match first.strip_suffix('s') {
            Some(stem) if !stem.is_empty() => format!("{stem}{rest}"),
            _ => format!("{first}s{rest}"),
        };
        self.entries.get(&alt).copied()
    }

    /// Reads a phrase -> mapping document. Values are either a canonical
    /// name or `{"relation": name, "reversed": bool}`.
    pub fn from_json(text: &str) -> Result<Self, RelationError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Entry {
            Name(String),
            Full { relation: String, #[serde(default)] reversed: bool },
        }
        let raw: BTreeMap<String, Entry> =
            serde_json::from_str(text).map_err(|e| RelationError::InvalidTable(e.to_string()))?;
        let mut t = Self::empty();
        for (phrase, entry) in raw {
            let (name, reversed) = match entry {
                Entry::Name(n) => (n, false),
                Entry::Full { relation, reversed } => (relation, reversed),
            };
            let relation = name
                .parse()
                .map_err(|_| RelationError::InvalidTable(format!("'{phrase}': unknown relation '{name}'")))?;
            if normalize_phrase(&phrase).is_empty() {
                return Err(RelationError::InvalidTable("empty phrase key".into()));
            }
            t.insert(&phrase, RelationMapping { relation, reversed });
        }
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        let doc: BTreeMap<&String, serde_json::Value> = self
            .entries
            .iter()
            .map(|(k, m)| {
                let v = if m.reversed {
                    serde_json::json!({"relation": m.relation.as_str(), "reversed": true})
                } else {
                    serde_json::Value::String(m.relation.as_str().to_string())
                };
                (k, v)
            })
            .collect();
        serde_json::to_string_pretty(&doc).expect("table serializes")
    }

    /// Overlays `other` on top of this table.
    pub fn merged_with(&self, other: &RelationMapTable) -> RelationMapTable {
        let mut out = self.clone();
        out.entries
            .extend(other.entries.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }
}

/// Table hit wins; on a miss the gateway is asked when one is configured.
pub fn normalize_relation(
    phrase: &str,
    table: &RelationMapTable,
    gateway: Option<&Gateway>,
) -> Result<(RelationMapping, MappingSource), RelationError> {
    if normalize_phrase(phrase).is_empty() {
        return Err(RelationError::EmptyPhrase);
    }
    if let Some(m) = table.lookup(phrase) {
        return Ok((m, MappingSource::Table));
    }
    if let Some(gw) = gateway {
        if let Ok(Some(rel)) = gw.map_relation(&normalize_phrase(phrase)) {
            return Ok((RelationMapping::plain(rel), MappingSource::Gateway));
        }
    }
    Err(RelationError::NonCanonicalRelation(phrase.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use CanonicalRelation::*;

    #[test]
    fn builtin_table_examples() {
        let t = RelationMapTable::builtin();
        let (m, src) = normalize_relation("contains", &t, None).unwrap();
        assert_eq!(m.relation, OnTopOf);
        assert_eq!(src, MappingSource::Table);
        assert_eq!(normalize_relation("above", &t, None).unwrap().0.relation, Above);
        assert_eq!(normalize_relation("Stands  Near", &t, None).unwrap().0.relation, AtLeftOf);
        assert_eq!(normalize_relation("lead to", &t, None).unwrap().0.relation, AtRightOf);
        assert_eq!(normalize_relation("hides behind", &t, None).unwrap().0.relation, AtRightOf);
        assert!(matches!(
            normalize_relation("dances wildly around", &t, None),
            Err(RelationError::NonCanonicalRelation(_))
        ));
        assert!(matches!(normalize_relation("  ", &t, None), Err(RelationError::EmptyPhrase)));
    }

    #[test]
    fn offsets_match_table() {
        let a = Cell::new(10, 10);
        assert_eq!(apply_offset(a, AtLeftOf).cell, Cell::new(7, 10));
        assert_eq!(apply_offset(a, AtRightOf).cell, Cell::new(13, 10));
        assert_eq!(apply_offset(Cell::new(5, 8), Above).cell, Cell::new(5, 5));
        assert_eq!(apply_offset(a, Below).cell, Cell::new(10, 13));
        let top = apply_offset(Cell::new(4, 4), OnTopOf);
        assert_eq!(top.cell, Cell::new(4, 4));
        assert!(top.layer_shift);
        for r in CanonicalRelation::ALL {
            let o = r.offset();
            if r == OnTopOf {
                assert!(o.overlap && o.dx == 0 && o.dy == 0);
            } else {
                assert!(!o.overlap);
                assert_eq!(o.dx.abs() + o.dy.abs(), 3);
            }
        }
    }

    #[test]
    fn checker_examples() {
        assert!(check_predicate(Position::new(7, 10, 1), Position::new(10, 10, 1), AtLeftOf));
        assert!(!check_predicate(Position::new(4, 4, 2), Position::new(4, 4, 2), OnTopOf));
        assert!(check_predicate(Position::new(4, 4, 3), Position::new(4, 4, 2), OnTopOf));
        assert!(check_predicate(Position::new(5, 5, 1), Position::new(5, 8, 1), Above));
    }

    #[test]
    fn table_file_round_trip() {
        let t = RelationMapTable::builtin();
        let back = RelationMapTable::from_json(&t.to_json()).unwrap();
        assert_eq!(t, back);
        let custom = RelationMapTable::from_json(r#"{"stands near": "at_right_of"}"#).unwrap();
        let merged = t.merged_with(&custom);
        assert_eq!(merged.lookup("stands near").unwrap().relation, AtRightOf);
        assert!(RelationMapTable::from_json(r#"{"x": "beside"}"#).is_err());
    }

    proptest! {
        #[test]
        fn inverse_pair(x in -50i32..50, y in -50i32..50, layer in 0u8..4) {
            let anchor = Position::new(x, y, layer);
            for r in CanonicalRelation::ALL {
                let t = apply_offset(anchor.cell(), r);
                let layer_a = if t.layer_shift { layer + 1 } else { layer };
                prop_assert!(check_predicate(Position::new(t.cell.x, t.cell.y, layer_a), anchor, r));
            }
        }

        #[test]
        fn directional_antisymmetry(ax in -9i32..9, ay in -9i32..9, bx in -9i32..9, by in -9i32..9) {
            let a = Position::new(ax, ay, 1);
            let b = Position::new(bx, by, 1);
            for r in [Above, Below, AtLeftOf, AtRightOf] {
                prop_assert!(!(check_predicate(a, b, r) && check_predicate(b, a, r)));
            }
        }

        #[test]
        fn translation_equivariance(x in -50i32..50, y in -50i32..50, tx in -20i32..20, ty in -20i32..20) {
            for r in CanonicalRelation::ALL {
                let moved = apply_offset(Cell::new(x + tx, y + ty), r);
                let base = apply_offset(Cell::new(x, y), r);
                prop_assert_eq!(moved.cell, Cell::new(base.cell.x + tx, base.cell.y + ty));
                prop_assert_eq!(moved.layer_shift, base.layer_shift);
            }
        }
    }
}
