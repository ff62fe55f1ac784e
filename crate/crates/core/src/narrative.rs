//! Stories, scene frames, predicate triples and entity-name normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NarrativeError {
    #[error("malformed story document: {0}")]
    MalformedDocument(String),
    #[error("story has no usable frames: {0}")]
    EmptyFrames(String),
    #[error("frame '{frame}': triple references '{entity}' which is not in the object list")]
    DanglingEntity { frame: String, entity: String },
    #[error("'{0}' is empty after normalization")]
    EmptyAfterNormalization(String),
}

/// Gameplay role of a tile or narrative object.
///
/// The declaration order is also the compositing order of object layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffordanceType {
    #[serde(alias = "Terrain")]
    Terrain,
    #[serde(alias = "environment", alias = "environmental", alias = "environment_object")]
    EnvironmentalObject,
    #[serde(alias = "interactive")]
    InteractiveObject,
    #[serde(alias = "item", alias = "collectible", alias = "item/collectible")]
    ItemCollectible,
    #[serde(alias = "character", alias = "creature", alias = "character/creature")]
    CharacterCreature,
}

impl AffordanceType {
    pub const ALL: [AffordanceType; 5] = [
        AffordanceType::Terrain,
        AffordanceType::EnvironmentalObject,
        AffordanceType::InteractiveObject,
        AffordanceType::ItemCollectible,
        AffordanceType::CharacterCreature,
    ];

    /// Machine name used in files.
    pub fn as_str(self) -> &'static str {
        match self {
            AffordanceType::Terrain => "terrain",
            AffordanceType::EnvironmentalObject => "environmental_object",
            AffordanceType::InteractiveObject => "interactive_object",
            AffordanceType::ItemCollectible => "item_collectible",
            AffordanceType::CharacterCreature => "character_creature",
        }
    }

    /// Human-readable label, used when building embedding text.
    pub fn label(self) -> &'static str {
        match self {
            AffordanceType::Terrain => "terrain",
            AffordanceType::EnvironmentalObject => "environmental object",
            AffordanceType::InteractiveObject => "interactive object",
            AffordanceType::ItemCollectible => "item/collectible",
            AffordanceType::CharacterCreature => "character/creature",
        }
    }

    /// Semantic depth: terrain 0, environment 1, interactive 2, item 3, character 4.
    pub fn depth(self) -> u8 {
        match self {
            AffordanceType::Terrain => 0,
            AffordanceType::EnvironmentalObject => 1,
            AffordanceType::InteractiveObject => 2,
            AffordanceType::ItemCollectible => 3,
            AffordanceType::CharacterCreature => 4,
        }
    }
}

impl fmt::Display for AffordanceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AffordanceType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        match key.as_str() {
            "terrain" => Ok(AffordanceType::Terrain),
            "environmental_object" | "environment_object" | "environmental" | "environment" => {
                Ok(AffordanceType::EnvironmentalObject)
            }
            "interactive_object" | "interactive" => Ok(AffordanceType::InteractiveObject),
            "item_collectible" | "item" | "collectible" => Ok(AffordanceType::ItemCollectible),
            "character_creature" | "character" | "creature" => Ok(AffordanceType::CharacterCreature),
            _ => Err(format!("unknown affordance type '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl PredicateTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        PredicateTriple {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
        }
    }
}

impl fmt::Display for PredicateTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] [{}] [{}]", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarrativeObject {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affordance: Option<AffordanceType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_terrain: Option<String>,
}

impl NarrativeObject {
    pub fn named(name: &str) -> Self {
        NarrativeObject {
            name: name.to_string(),
            affordance: None,
            suggested_terrain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFrame {
    pub name: String,
    #[serde(default)]
    pub scene_break: bool,
    pub triples: Vec<PredicateTriple>,
    #[serde(default)]
    pub objects: Vec<NarrativeObject>,
}

impl SceneFrame {
    /// Looks up an object by its normalized key.
    pub fn object(&self, key: &str) -> Option<&NarrativeObject> {
        self.objects
            .iter()
            .find(|o| normalize_entity_name(&o.name).ok().as_deref() == Some(key))
    }

    /// Normalized keys of the frame objects, in listed order.
    pub fn object_keys(&self) -> Vec<String> {
        self.objects
            .iter()
            .filter_map(|o| normalize_entity_name(&o.name).ok())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryBundle {
    pub title: String,
    #[serde(rename = "story")]
    pub story_text: String,
    pub frames: Vec<SceneFrame>,
}

impl StoryBundle {
    pub fn triple_count(&self) -> usize {
        self.frames.iter().map(|f| f.triples.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("story bundle serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Auto-create missing object entries for triple entities instead of
    /// raising `DanglingEntity`.
    pub permissive: bool,
}

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Canonical entity key: lowercase, `_`/`-` as spaces, punctuation dropped,
/// whitespace collapsed, leading articles stripped.
pub fn normalize_entity_name(raw: &str) -> Result<String, NarrativeError> {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter_map(|c| {
            if c == '_' || c == '-' || c.is_whitespace() {
                Some(' ')
            } else if c.is_alphanumeric() {
                Some(c)
            } else {
                None
            }
        })
        .collect();
    let mut words: Vec<&str> = cleaned.split_whitespace().collect();
    let lead = words.iter().take_while(|w| ARTICLES.contains(w)).count();
    words.drain(..lead);
    if words.is_empty() {
        return Err(NarrativeError::EmptyAfterNormalization(raw.to_string()));
    }
    Ok(words.join(" "))
}

/// Parses and validates a story document. Names are kept as written.
pub fn parse_story_bundle(text: &str, opts: ParseOptions) -> Result<StoryBundle, NarrativeError> {
    let bundle: StoryBundle =
        serde_json::from_str(text).map_err(|e| NarrativeError::MalformedDocument(e.to_string()))?;
    validate_bundle(bundle, opts)
}

/// Validation shared by the file parser and LLM extraction.
pub fn validate_bundle(
    mut bundle: StoryBundle,
    opts: ParseOptions,
) -> Result<StoryBundle, NarrativeError> {
    if bundle.frames.is_empty() {
        return Err(NarrativeError::EmptyFrames(format!(
            "story '{}' has no frames",
            bundle.title
        )));
    }
    let mut names = BTreeSet::new();
    for frame in &mut bundle.frames {
        if frame.name.trim().is_empty() {
            return Err(NarrativeError::MalformedDocument("frame with empty name".into()));
        }
        if !names.insert(frame.name.clone()) {
            return Err(NarrativeError::MalformedDocument(format!(
                "duplicate frame name '{}'",
                frame.name
            )));
        }
        if frame.triples.is_empty() {
            return Err(NarrativeError::EmptyFrames(format!(
                "frame '{}' has no triples",
                frame.name
            )));
        }
        for t in &frame.triples {
            if [&t.subject, &t.relation, &t.object].iter().any(|f| f.trim().is_empty()) {
                return Err(NarrativeError::MalformedDocument(format!(
                    "frame '{}': triple with an empty field",
                    frame.name
                )));
            }
        }
        for o in &frame.objects {
            normalize_entity_name(&o.name).map_err(|_| {
                NarrativeError::MalformedDocument(format!(
                    "frame '{}': object name '{}' is empty",
                    frame.name, o.name
                ))
            })?;
        }
        link_objects(frame, opts)?;
    }
    Ok(bundle)
}

fn link_objects(frame: &mut SceneFrame, opts: ParseOptions) -> Result<(), NarrativeError> {
    let mut known: BTreeSet<String> = frame.object_keys().into_iter().collect();
    let mut missing = Vec::new();
    for t in &frame.triples {
        for entity in [&t.subject, &t.object] {
            let key = normalize_entity_name(entity).map_err(|_| {
                NarrativeError::MalformedDocument(format!(
                    "frame '{}': entity '{}' is empty after normalization",
                    frame.name, entity
                ))
            })?;
            if !known.contains(&key) {
                if !opts.permissive {
                    return Err(NarrativeError::DanglingEntity {
                        frame: frame.name.clone(),
                        entity: entity.clone(),
                    });
                }
                known.insert(key);
                missing.push(entity.clone());
            }
        }
    }
    frame
        .objects
        .extend(missing.iter().map(|n| NarrativeObject::named(n)));
    Ok(())
}

/// Replaces every entity name by its normalized key followed by a single
/// alias lookup. Objects that collapse onto the same key are merged, first
/// non-empty attribute wins.
pub fn apply_alias_map(
    bundle: &StoryBundle,
    aliases: &BTreeMap<String, String>,
) -> Result<StoryBundle, NarrativeError> {
    let lookup: BTreeMap<String, String> = aliases
        .iter()
        .filter_map(|(k, v)| normalize_entity_name(k).ok().map(|k| (k, v.clone())))
        .collect();
    let canon = |raw: &str| -> Result<String, NarrativeError> {
        let key = normalize_entity_name(raw)?;
        Ok(lookup.get(&key).cloned().unwrap_or(key))
    };

    let mut out = bundle.clone();
    for frame in &mut out.frames {
        for t in &mut frame.triples {
            t.subject = canon(&t.subject)?;
            t.object = canon(&t.object)?;
        }
        let mut merged: Vec<NarrativeObject> = Vec::new();
        for o in &frame.objects {
            let name = canon(&o.name)?;
            match merged.iter_mut().find(|m| m.name == name) {
                Some(m) => {
                    m.affordance = m.affordance.or(o.affordance);
                    if m.suggested_terrain.is_none() {
                        m.suggested_terrain = o.suggested_terrain.clone();
                    }
                }
                None => merged.push(NarrativeObject {
                    name,
                    ..o.clone()
                }),
            }
        }
        frame.objects = merged;
        for t in &frame.triples {
            for e in [&t.subject, &t.object] {
                if !frame.objects.iter().any(|o| &o.name == e) {
                    return Err(NarrativeError::DanglingEntity {
                        frame: frame.name.clone(),
                        entity: e.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}
