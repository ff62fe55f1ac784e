//! Per-frame knowledge graphs and the merged temporal graph.
//!
//! Merged node ids are frame-scoped (`"<frame index>:<entity>"`); each frame
//! also gets an anchor node (`"frame:<index>"`) and consecutive anchors are
//! chained with `precedes` edges. Occurrences of the same entity in
//! different frames are tied together by identity links, which are kept
//! apart from the relation edges.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::ClassificationResult;
use crate::narrative::{normalize_entity_name, AffordanceType, SceneFrame};
use crate::relations::{CanonicalRelation, RelationMapTable};
use crate::tiles::MatchResult;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("cannot merge an empty list of graphs")]
    NoFrames,
    #[error("invalid graph document: {0}")]
    InvalidDocument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KgNode {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affordance: Option<AffordanceType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KgEdge {
    pub subject: String,
    pub object: String,
    pub relation_raw: String,
    pub relation_canonical: Option<CanonicalRelation>,
}

/// One frame's graph. Edges are kept sorted so that equal inputs give equal
/// graphs regardless of triple order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneKG {
    pub frame: String,
    pub nodes: BTreeMap<String, KgNode>,
    pub edges: Vec<KgEdge>,
}

fn key(raw: &str) -> String {
    normalize_entity_name(raw).unwrap_or_else(|_| raw.trim().to_lowercase())
}

pub fn build_scene_kg(
    frame: &SceneFrame,
    matches: &BTreeMap<String, MatchResult>,
    classifications: &BTreeMap<String, ClassificationResult>,
    table: &RelationMapTable,
) -> SceneKG {
    let mut nodes: BTreeMap<String, KgNode> = BTreeMap::new();
    let mut touch = |k: &str, affordance: Option<AffordanceType>| {
        let node = nodes.entry(k.to_string()).or_default();
        node.affordance = node
            .affordance
            .or(affordance)
            .or_else(|| classifications.get(k).map(|c| c.affordance));
        if node.tile_id.is_none() {
            node.tile_id = matches.get(k).map(|m| m.tile_id.clone());
        }
    };
    for obj in &frame.objects {
        touch(&key(&obj.name), obj.affordance);
    }
    let mut edges = Vec::with_capacity(frame.triples.len());
    for t in &frame.triples {
        let (s, o) = (key(&t.subject), key(&t.object));
        touch(&s, None);
        touch(&o, None);
        edges.push(KgEdge {
            subject: s,
            object: o,
            relation_raw: t.relation.clone(),
            relation_canonical: table.lookup(&t.relation).map(|m| m.relation),
        });
    }
    edges.sort();
    SceneKG {
        frame: frame.name.clone(),
        nodes,
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedNode {
    pub frame_index: usize,
    pub entity: String,
    #[serde(flatten)]
    pub attrs: KgNode,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergedEdge {
    pub frame_index: usize,
    pub subject: String,
    pub object: String,
    pub relation_raw: String,
    pub relation_canonical: Option<CanonicalRelation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedKG {
    pub frames: Vec<String>,
    /// Frame-scoped entity nodes.
    pub nodes: BTreeMap<String, MergedNode>,
    /// One anchor id per frame, in chronological order.
    pub anchors: Vec<String>,
    pub edges: Vec<MergedEdge>,
    /// (earlier anchor, later anchor).
    pub precedes: Vec<(String, String)>,
    /// (earlier occurrence, next occurrence) of the same entity.
    pub identity_links: Vec<(String, String)>,
}

pub fn scoped_id(frame_index: usize, entity: &str) -> String {
    format!("{frame_index}:{entity}")
}

pub fn anchor_id(frame_index: usize) -> String {
    format!("frame:{frame_index}")
}

pub fn merge_kgs(kgs: &[SceneKG]) -> Result<MergedKG, KgError> {
    if kgs.is_empty() {
        return Err(KgError::NoFrames);
    }
    let mut nodes = BTreeMap::new();
    let mut edges = Vec::new();
    let mut last_seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut identity_links = Vec::new();
    for (k, kg) in kgs.iter().enumerate() {
        for (entity, attrs) in &kg.nodes {
            nodes.insert(
                scoped_id(k, entity),
                MergedNode {
                    frame_index: k,
                    entity: entity.clone(),
                    attrs: attrs.clone(),
                },
            );
            if let Some(prev) = last_seen.insert(entity, k) {
                identity_links.push((scoped_id(prev, entity), scoped_id(k, entity)));
            }
        }
        edges.extend(kg.edges.iter().map(|e| MergedEdge {
            frame_index: k,
            subject: scoped_id(k, &e.subject),
            object: scoped_id(k, &e.object),
            relation_raw: e.relation_raw.clone(),
            relation_canonical: e.relation_canonical,
        }));
    }
    identity_links.sort();
    let anchors: Vec<String> = (0..kgs.len()).map(anchor_id).collect();
    let precedes = anchors.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    Ok(MergedKG {
        frames: kgs.iter().map(|kg| kg.frame.clone()).collect(),
        nodes,
        anchors,
        edges,
        precedes,
        identity_links,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineEntry {
    pub frame_index: usize,
    pub frame: String,
    pub edges: Vec<KgEdge>,
}

impl MergedKG {
    /// Relation edges plus precedes edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len() + self.precedes.len()
    }

    /// The frame's graph with scopes stripped.
    pub fn frame_subgraph(&self, frame_index: usize) -> Option<SceneKG> {
        let frame = self.frames.get(frame_index)?;
        let prefix = format!("{frame_index}:");
        let strip = |id: &str| id.strip_prefix(&prefix).unwrap_or(id).to_string();
        let nodes = self
            .nodes
            .values()
            .filter(|n| n.frame_index == frame_index)
            .map(|n| (n.entity.clone(), n.attrs.clone()))
            .collect();
        let mut edges: Vec<KgEdge> = self
            .edges
            .iter()
            .filter(|e| e.frame_index == frame_index)
            .map(|e| KgEdge {
                subject: strip(&e.subject),
                object: strip(&e.object),
                relation_raw: e.relation_raw.clone(),
                relation_canonical: e.relation_canonical,
            })
            .collect();
        edges.sort();
        Some(SceneKG {
            frame: frame.clone(),
            nodes,
            edges,
        })
    }

    /// Frames, in precedes order, where `entity` appears, with its incident edges.
    pub fn query_entity_timeline(&self, entity: &str) -> Vec<TimelineEntry> {
        let entity = key(entity);
        (0..self.frames.len())
            .filter(|k| self.nodes.contains_key(&scoped_id(*k, &entity)))
            .map(|k| {
                let sub = self.frame_subgraph(k).expect("frame exists");
                TimelineEntry {
                    frame_index: k,
                    frame: sub.frame,
                    edges: sub
                        .edges
                        .into_iter()
                        .filter(|e| e.subject == entity || e.object == entity)
                        .collect(),
                }
            })
            .collect()
    }

    pub fn to_document(&self) -> KgDocument {
        let mut nodes: Vec<DocNode> = self
            .nodes
            .values()
            .map(|n| DocNode {
                frame: n.frame_index,
                entity: n.entity.clone(),
                affordance: n.attrs.affordance,
                tile_id: n.attrs.tile_id.clone(),
            })
            .collect();
        nodes.sort_by(|a, b| (a.frame, &a.entity).cmp(&(b.frame, &b.entity)));
        let mut triples: Vec<DocTriple> = self
            .edges
            .iter()
            .map(|e| DocTriple {
                frame: e.frame_index,
                subject: self.nodes[&e.subject].entity.clone(),
                relation_raw: e.relation_raw.clone(),
                relation_canonical: e.relation_canonical,
                object: self.nodes[&e.object].entity.clone(),
            })
            .collect();
        triples.sort();
        KgDocument {
            frames: self.frames.clone(),
            nodes,
            triples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, KgError> {
        let doc: KgDocument =
            serde_json::from_str(text).map_err(|e| KgError::InvalidDocument(e.to_string()))?;
        doc.into_merged()
    }

    /// DOT text: one cluster per frame, anchors chained by precedes, dashed
    /// identity links between frames.
    pub fn to_dot(&self) -> String {
        let q = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        let mut out = String::from("digraph narrative {\n  rankdir=LR;\n  node [shape=box];\n");
        for (k, frame) in self.frames.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_{k} {{");
            let _ = writeln!(out, "    label={};", q(frame));
            let _ = writeln!(out, "    {} [shape=ellipse, label={}];", q(&anchor_id(k)), q(&format!("frame {}", k + 1)));
            for (id, n) in self.nodes.iter().filter(|(_, n)| n.frame_index == k) {
                let label = match n.attrs.affordance {
                    Some(a) => format!("{}\\n{}", n.entity, a.as_str()),
                    None => n.entity.clone(),
                };
                let _ = writeln!(out, "    {} [label=\"{}\"];", q(id), label.replace('"', "\\\""));
            }
            let mut edges: Vec<&MergedEdge> = self.edges.iter().filter(|e| e.frame_index == k).collect();
            edges.sort();
            for e in edges {
                let label = match e.relation_canonical {
                    Some(c) => format!("{} ({})", e.relation_raw, c),
                    None => e.relation_raw.clone(),
                };
                let _ = writeln!(out, "    {} -> {} [label={}];", q(&e.subject), q(&e.object), q(&label));
            }
            out.push_str("  }\n");
        }
        for (a, b) in &self.precedes {
            let _ = writeln!(out, "  {} -> {} [label=\"precedes\", style=bold];", q(a), q(b));
        }
        for (a, b) in &self.identity_links {
            let _ = writeln!(out, "  {} -> {} [style=dashed, arrowhead=none];", q(a), q(b));
        }
        out.push_str("}\n");
        out
    }
}

/// Exported triple-list form of a merged graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgDocument {
    pub frames: Vec<String>,
    pub nodes: Vec<DocNode>,
    pub triples: Vec<DocTriple>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocNode {
    pub frame: usize,
    pub entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affordance: Option<AffordanceType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocTriple {
    pub frame: usize,
    pub subject: String,
    pub relation_raw: String,
    pub relation_canonical: Option<CanonicalRelation>,
    pub object: String,
}

impl KgDocument {
    pub fn into_merged(self) -> Result<MergedKG, KgError> {
        let mut kgs: Vec<SceneKG> = self
            .frames
            .iter()
            .map(|f| SceneKG {
                frame: f.clone(),
                nodes: BTreeMap::new(),
                edges: Vec::new(),
            })
            .collect();
        let n = kgs.len();
        let frame_of = |k: usize| {
            if k < n {
                Ok(k)
            } else {
                Err(KgError::InvalidDocument(format!("frame index {k} out of range")))
            }
        };
        for node in self.nodes {
            let k = frame_of(node.frame)?;
            kgs[k].nodes.insert(
                node.entity,
                KgNode {
                    affordance: node.affordance,
                    tile_id: node.tile_id,
                },
            );
        }
        for t in self.triples {
            let kg = &mut kgs[frame_of(t.frame)?];
            if !kg.nodes.contains_key(&t.subject) || !kg.nodes.contains_key(&t.object) {
                return Err(KgError::InvalidDocument(format!(
                    "triple '{} {} {}' references an unknown node",
                    t.subject, t.relation_raw, t.object
                )));
            }
            kg.edges.push(KgEdge {
                subject: t.subject,
                object: t.object,
                relation_raw: t.relation_raw,
                relation_canonical: t.relation_canonical,
            });
        }
        for kg in &mut kgs {
            kg.edges.sort();
        }
        merge_kgs(&kgs)
    }
}
