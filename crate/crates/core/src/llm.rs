//! LLM access for story generation, frame extraction, object classification
//! and relation mapping. Three transports: live HTTP, cassette replay, and a
//! keyword fallback that needs no model at all.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::narrative::{validate_bundle, AffordanceType, ParseOptions, StoryBundle};
use crate::relations::CanonicalRelation;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(String),
    #[error("replay miss for template '{template}' (fingerprint {fingerprint})")]
    ReplayMiss { template: String, fingerprint: String },
    #[error("unparseable LLM response ({reason}): {raw}")]
    UnparseableResponse { reason: String, raw: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("cassette error: {0}")]
    Cassette(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub template_text: &'static str,
}

impl PromptTemplate {
    /// Replaces `{name}` placeholders.
    pub fn fill(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.template_text.to_string();
        for (k, v) in vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}

pub const STORY_PROMPT: PromptTemplate = PromptTemplate {
    id: "prompt_1",
    template_text: "Generate a short adventure story (about 100 words).{seed}",
};

pub const FRAMES_PROMPT: PromptTemplate = PromptTemplate {
    id: "prompt_2",
    template_text: "Extract three key time frames and describe each with [Object] [Relation] [Object] triplets.\n\
Answer with a single JSON object: {\"title\": text, \"frames\": [{\"name\": text, \"scene_break\": bool, \
\"triples\": [{\"subject\": text, \"relation\": text, \"object\": text}], \
\"objects\": [{\"name\": text}]}]}. List every subject and object in \"objects\".\n\nStory:\n{story}",
};

pub const CLASSIFY_PROMPT: PromptTemplate = PromptTemplate {
    id: "classify_object",
    template_text: "For the object below, give its affordance type (one of terrain, environmental object, \
interactive object, item/collectible, or character/creature) and a suggested terrain: a free-text label \
describing the implied environment (e.g. \"forest\", \"desert\").\n\
Answer with JSON: {\"affordance\": text, \"suggested_terrain\": text}.\n\nObject: {name}\n\nStory:\n{story}",
};

pub const RELATION_PROMPT: PromptTemplate = PromptTemplate {
    id: "normalize_relation",
    template_text: "Map the spatial relation phrase to exactly one of: above, below, at_left_of, at_right_of, \
on_top_of. Answer with the name only.\n\nPhrase: {phrase}",
};

/// Hex SHA-256 over template id and filled prompt.
pub fn fingerprint(template_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(template_id.as_bytes());
    h.update([0x1f]);
    h.update(prompt.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayCassette {
    pub records: Vec<CassetteRecord>,
}

impl ReplayCassette {
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let c: ReplayCassette =
            serde_json::from_str(text).map_err(|e| LlmError::Cassette(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for r in &c.records {
            if !seen.insert(r.fingerprint.as_str()) {
                return Err(LlmError::Cassette(format!("duplicate fingerprint {}", r.fingerprint)));
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cassette serializes")
    }

    /// Adds or replaces the record for `template`/`prompt`.
    pub fn put(&mut self, template: &PromptTemplate, prompt: &str, response: &str) {
        let fp = fingerprint(template.id, prompt);
        self.records.retain(|r| r.fingerprint != fp);
        self.records.push(CassetteRecord {
            fingerprint: fp,
            template: Some(template.id.to_string()),
            response: response.to_string(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Live,
    Replay,
    #[default]
    Fallback,
}

impl std::str::FromStr for LlmMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(LlmMode::Live),
            "replay" => Ok(LlmMode::Replay),
            "fallback" => Ok(LlmMode::Fallback),
            _ => Err(format!("unknown llm mode '{s}' (live, replay, fallback)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveSettings {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub object_name: String,
    pub affordance: AffordanceType,
    pub suggested_terrain: String,
}

/// Tokens that make an object a terrain patch candidate.
pub const DEFAULT_TERRAIN_KEYWORDS: [&str; 8] =
    ["path", "road", "trail", "floor", "alley", "ground", "dune", "stairs"];

const BASE_TERRAIN_WORDS: &[(&str, &str)] = &[
    ("forest", "forest"),
    ("woods", "forest"),
    ("canopy", "forest"),
    ("jungle", "forest"),
    ("grove", "forest"),
    ("desert", "desert"),
    ("sand", "desert"),
    ("sahara", "desert"),
    ("wasteland", "wasteland"),
    ("sea", "water"),
    ("ocean", "water"),
    ("waves", "water"),
    ("river", "water"),
    ("lake", "water"),
    ("water", "water"),
    ("abyss", "water"),
    ("cave", "cave"),
    ("cavern", "cave"),
    ("tomb", "stone"),
    ("pyramid", "stone"),
    ("mountain", "mountain"),
    ("snow", "snow"),
    ("swamp", "swamp"),
    ("city", "city"),
    ("street", "city"),
    ("skyline", "city"),
    ("town", "city"),
    ("village", "village"),
    ("grass", "grass"),
    ("meadow", "grass"),
    ("field", "grass"),
    ("ruins", "ruins"),
    ("library", "indoor"),
    ("warehouse", "indoor"),
    ("apartment", "indoor"),
    ("deck", "wood"),
];

const CHARACTER_WORDS: &[&str] = &[
    "dragon", "creature", "guardian", "hero", "heroine", "girl", "boy", "man", "woman", "knight",
    "wizard", "witch", "sorcerer", "captain", "pirate", "sailor", "crew", "gangster", "beast",
    "leviathan", "monster", "goblin", "shopkeeper", "villager", "merchant", "journalist", "hacker",
    "archaeologist", "raider", "figure", "society", "explorer", "traveler", "thief", "guard",
];

const ITEM_WORDS: &[&str] = &[
    "map", "key", "amulet", "sword", "coin", "book", "note", "scroll", "potion", "artifact",
    "relic", "treasure", "compass", "gem", "message", "file", "paper", "code", "hieroglyph",
    "ring", "crown", "letter",
];

const INTERACTIVE_WORDS: &[&str] = &[
    "door", "chest", "lever", "throne", "gate", "entrance", "terminal", "desk", "elevator",
    "mainframe", "bookshelf", "sarcophagus", "lock", "trap", "mechanism", "switch", "keyboard",
    "screen", "can", "ship", "vessel", "cobblestone", "barrel",
];

fn token_matches(token: &str, word: &str) -> bool {
    token == word
        || token.strip_suffix('s') == Some(word)
        || token.strip_suffix("es") == Some(word)
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn base_terrain_of(token: &str) -> Option<&'static str> {
    BASE_TERRAIN_WORDS
        .iter()
        .find(|(w, _)| token_matches(token, w))
        .map(|(_, label)| *label)
}

/// Keyword table used when no model answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordClassifier {
    pub terrain_keywords: Vec<String>,
    pub default_terrain: String,
}

impl Default for KeywordClassifier {
    fn default() -> Self {
        KeywordClassifier {
            terrain_keywords: DEFAULT_TERRAIN_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            default_terrain: "grass".into(),
        }
    }
}

impl KeywordClassifier {
    /// Token-level check, tolerant of plural `s`/`es`.
    pub fn is_patch_candidate(&self, name: &str) -> bool {
        tokens(name)
            .iter()
            .any(|t| self.terrain_keywords.iter().any(|k| token_matches(t, k)))
    }

    pub fn classify(&self, name: &str, context: &str) -> ClassificationResult {
        let toks = tokens(name);
        let result = |affordance, terrain: String| ClassificationResult {
            object_name: name.to_string(),
            affordance,
            suggested_terrain: terrain,
        };

        if self.is_patch_candidate(name) {
            let modifiers: Vec<&str> = toks
                .iter()
                .filter(|t| !self.terrain_keywords.iter().any(|k| token_matches(t, k)))
                .map(String::as_str)
                .collect();
            let label = if modifiers.is_empty() {
                toks.last().cloned().unwrap_or_default()
            } else {
                modifiers.join(" ")
            };
            return result(AffordanceType::EnvironmentalObject, label);
        }

        let name_terrain = toks.iter().rev().find_map(|t| base_terrain_of(t));
        if let Some(label) = toks.last().and_then(|t| base_terrain_of(t)) {
            return result(AffordanceType::Terrain, label.to_string());
        }
        let terrain = name_terrain
            .map(str::to_string)
            .unwrap_or_else(|| self.context_terrain(context));

        let has = |words: &[&str]| toks.iter().any(|t| words.iter().any(|w| token_matches(t, w)));
        let affordance = if has(CHARACTER_WORDS) || self.is_proper_name(name, context) {
            AffordanceType::CharacterCreature
        } else if has(ITEM_WORDS) {
            AffordanceType::ItemCollectible
        } else if has(INTERACTIVE_WORDS) {
            AffordanceType::InteractiveObject
        } else {
            AffordanceType::EnvironmentalObject
        };
        result(affordance, terrain)
    }

    /// Single-token names written capitalized in the story are taken as characters.
    fn is_proper_name(&self, name: &str, context: &str) -> bool {
        let toks = tokens(name);
        if toks.len() != 1 {
            return false;
        }
        context
            .split(|c: char| !c.is_alphanumeric())
            .any(|w| w.to_lowercase() == toks[0] && w.chars().next().is_some_and(char::is_uppercase))
    }

    fn context_terrain(&self, context: &str) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens(context) {
            if let Some(label) = base_terrain_of(&t) {
                *counts.entry(label).or_default() += 1;
            }
        }
        // BTreeMap iteration is lexicographic, so max_by keeps the first maximum
        // only if we compare counts strictly.
        let mut best: Option<(&str, usize)> = None;
        for (label, n) in counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((label, n));
            }
        }
        best.map(|(l, _)| l.to_string())
            .unwrap_or_else(|| self.default_terrain.clone())
    }
}

enum Transport {
    Live(LiveSettings),
    Replay(BTreeMap<String, String>),
    Fallback,
}

/// Shareable gateway handle. Internal state is behind mutexes.
pub struct Gateway {
    transport: Transport,
    fallback_enabled: bool,
    classifier: KeywordClassifier,
    recorded: Option<Mutex<ReplayCassette>>,
    misses: Mutex<Vec<String>>,
}

impl Gateway {
    pub fn live(settings: LiveSettings) -> Self {
        Self::with_transport(Transport::Live(settings))
    }

    pub fn replay(cassette: ReplayCassette) -> Self {
        let map = cassette
            .records
            .into_iter()
            .map(|r| (r.fingerprint, r.response))
            .collect();
        Self::with_transport(Transport::Replay(map))
    }

    pub fn fallback() -> Self {
        Self::with_transport(Transport::Fallback)
    }

    fn with_transport(transport: Transport) -> Self {
        Gateway {
            transport,
            fallback_enabled: true,
            classifier: KeywordClassifier::default(),
            recorded: None,
            misses: Mutex::new(Vec::new()),
        }
    }

    /// When disabled, classification and relation mapping surface transport
    /// errors instead of dropping to the keyword table.
    pub fn with_fallback(mut self, enabled: bool) -> Self {
        self.fallback_enabled = enabled;
        self
    }

    pub fn with_classifier(mut self, classifier: KeywordClassifier) -> Self {
        self.classifier = classifier;
        self
    }

    /// Keeps every live response so it can be saved as a cassette.
    pub fn recording(mut self) -> Self {
        self.recorded = Some(Mutex::new(ReplayCassette::default()));
        self
    }

    pub fn recorded_cassette(&self) -> Option<ReplayCassette> {
        self.recorded
            .as_ref()
            .map(|m| m.lock().expect("recorder lock").clone())
    }

    pub fn classifier(&self) -> &KeywordClassifier {
        &self.classifier
    }

    pub fn mode(&self) -> LlmMode {
        match self.transport {
            Transport::Live(_) => LlmMode::Live,
            Transport::Replay(_) => LlmMode::Replay,
            Transport::Fallback => LlmMode::Fallback,
        }
    }

    /// Fingerprints that were requested but absent from the cassette.
    pub fn replay_misses(&self) -> Vec<String> {
        self.misses.lock().expect("miss lock").clone()
    }

    fn complete(&self, template: &PromptTemplate, prompt: &str) -> Result<String, LlmError> {
        match &self.transport {
            Transport::Fallback => Err(LlmError::GatewayUnavailable(
                "no model configured (fallback mode)".into(),
            )),
            Transport::Replay(map) => {
                let fp = fingerprint(template.id, prompt);
                match map.get(&fp) {
                    Some(r) => Ok(r.clone()),
                    None => {
                        self.misses.lock().expect("miss lock").push(fp.clone());
                        Err(LlmError::ReplayMiss {
                            template: template.id.to_string(),
                            fingerprint: fp,
                        })
                    }
                }
            }
            Transport::Live(settings) => {
                let text = live_request(settings, prompt)?;
                if let Some(rec) = &self.recorded {
                    rec.lock().expect("recorder lock").put(template, prompt, &text);
                }
                Ok(text)
            }
        }
    }

    pub fn generate_story(&self, seed_prompt: &str) -> Result<String, LlmError> {
        let seed = if seed_prompt.trim().is_empty() {
            String::new()
        } else {
            format!(" {}", seed_prompt.trim())
        };
        let prompt = STORY_PROMPT.fill(&[("seed", &seed)]);
        let text = self.complete(&STORY_PROMPT, &prompt)?;
        let story = text.trim();
        if story.is_empty() {
            return Err(LlmError::UnparseableResponse {
                reason: "empty story".into(),
                raw: text,
            });
        }
        Ok(story.to_string())
    }

    pub fn extract_frames(&self, story: &str) -> Result<StoryBundle, LlmError> {
        if story.trim().is_empty() {
            return Err(LlmError::InvalidInput("story text is empty".into()));
        }
        let prompt = FRAMES_PROMPT.fill(&[("story", story)]);
        let raw = self.complete(&FRAMES_PROMPT, &prompt)?;
        parse_frames_response(&raw, story)
    }

    pub fn classify_object(&self, name: &str, context: &str) -> Result<ClassificationResult, LlmError> {
        if name.trim().is_empty() {
            return Err(LlmError::InvalidInput("object name is empty".into()));
        }
        if matches!(self.transport, Transport::Fallback) {
            return Ok(self.classifier.classify(name, context));
        }
        let prompt = CLASSIFY_PROMPT.fill(&[("name", name), ("story", context)]);
        match self.complete(&CLASSIFY_PROMPT, &prompt) {
            Ok(raw) => parse_classification(name, &raw),
            Err(LlmError::GatewayUnavailable(_) | LlmError::ReplayMiss { .. }) if self.fallback_enabled => {
                log::warn!("classification of '{name}' fell back to the keyword table");
                Ok(self.classifier.classify(name, context))
            }
            Err(e) => Err(e),
        }
    }

    /// `Ok(None)` when no model is available and fallback is allowed.
    pub fn map_relation(&self, phrase: &str) -> Result<Option<CanonicalRelation>, LlmError> {
        if matches!(self.transport, Transport::Fallback) {
            return Ok(None);
        }
        let prompt = RELATION_PROMPT.fill(&[("phrase", phrase)]);
        match self.complete(&RELATION_PROMPT, &prompt) {
            Ok(raw) => {
                let name = raw.trim().trim_matches(|c: char| c == '"' || c == '.' || c == '`');
                name.parse().map(Some).map_err(|_| LlmError::UnparseableResponse {
                    reason: "not a canonical relation".into(),
                    raw,
                })
            }
            Err(LlmError::GatewayUnavailable(_) | LlmError::ReplayMiss { .. }) if self.fallback_enabled => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn live_request(settings: &LiveSettings, prompt: &str) -> Result<String, LlmError> {
    let body = serde_json::json!({
        "model": settings.model,
        "temperature": 0,
        "messages": [{"role": "user", "content": prompt}],
    });
    let mut req = ureq::post(&settings.endpoint).timeout(Duration::from_secs(settings.timeout_secs));
    if let Some(var) = &settings.api_key_env {
        let key = std::env::var(var)
            .map_err(|_| LlmError::GatewayUnavailable(format!("environment variable {var} is not set")))?;
        req = req.set("Authorization", &format!("Bearer {key}"));
    }
    let resp = req
        .send_json(body)
        .map_err(|e| LlmError::GatewayUnavailable(e.to_string()))?;
    let raw = resp
        .into_string()
        .map_err(|e| LlmError::GatewayUnavailable(e.to_string()))?;
    let v: serde_json::Value = serde_json::from_str(&raw).map_err(|e| LlmError::UnparseableResponse {
        reason: format!("response body is not JSON: {e}"),
        raw: raw.clone(),
    })?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or(LlmError::UnparseableResponse {
            reason: "missing choices[0].message.content".into(),
            raw,
        })
}

/// Pulls the outermost `{...}` block out of a reply that may carry prose or
/// code fences around it.
fn json_block(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

fn unparseable(reason: impl Into<String>, raw: &str) -> LlmError {
    LlmError::UnparseableResponse {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// The reply goes through the same strict validation as story files.
pub fn parse_frames_response(raw: &str, story: &str) -> Result<StoryBundle, LlmError> {
    let block = json_block(raw).ok_or_else(|| unparseable("no JSON object in reply", raw))?;
    let mut v: serde_json::Value =
        serde_json::from_str(block).map_err(|e| unparseable(format!("invalid JSON: {e}"), raw))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| unparseable("reply is not a JSON object", raw))?;
    let frames = obj
        .get("frames")
        .and_then(|f| f.as_array())
        .ok_or_else(|| unparseable("missing frames array", raw))?;
    if frames.iter().any(|f| f.get("triples").and_then(|t| t.as_array()).is_none()) {
        return Err(unparseable("frame without a triples block", raw));
    }
    if !obj.contains_key("title") {
        obj.insert("title".into(), serde_json::Value::String("untitled".into()));
    }
    obj.insert("story".into(), serde_json::Value::String(story.to_string()));
    let bundle: StoryBundle =
        serde_json::from_value(v).map_err(|e| unparseable(e.to_string(), raw))?;
    validate_bundle(bundle, ParseOptions::default()).map_err(|e| unparseable(e.to_string(), raw))
}

fn parse_classification(name: &str, raw: &str) -> Result<ClassificationResult, LlmError> {
    #[derive(Deserialize)]
    struct Reply {
        affordance: String,
        suggested_terrain: String,
    }
    let block = json_block(raw).ok_or_else(|| unparseable("no JSON object in reply", raw))?;
    let reply: Reply = serde_json::from_str(block).map_err(|e| unparseable(e.to_string(), raw))?;
    let affordance = reply.affordance.parse().map_err(|e: String| unparseable(e, raw))?;
    Ok(ClassificationResult {
        object_name: name.to_string(),
        affordance,
        suggested_terrain: reply.suggested_terrain.trim().to_lowercase(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    const FRAMES_REPLY: &str = r#"Here you go:
```json
{"title": "Test", "frames": [{"name": "f1", "scene_break": false,
  "triples": [{"subject": "Elara", "relation": "stands near", "object": "hollow oak"}],
  "objects": [{"name": "Elara"}, {"name": "hollow oak"}]}]}
```"#;

    #[test]
    fn templates_carry_the_original_prompts() {
        assert!(STORY_PROMPT
            .template_text
            .starts_with("Generate a short adventure story (about 100 words)."));
        assert!(FRAMES_PROMPT.template_text.starts_with(
            "Extract three key time frames and describe each with [Object] [Relation] [Object] triplets."
        ));
    }

    #[test]
    fn fingerprint_is_stable_and_keyed_by_template() {
        let a = fingerprint("prompt_1", "x");
        assert_eq!(a, fingerprint("prompt_1", "x"));
        assert_ne!(a, fingerprint("prompt_2", "x"));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn replay_is_deterministic_and_order_free() {
        let mut c = ReplayCassette::default();
        c.put(&FRAMES_PROMPT, &FRAMES_PROMPT.fill(&[("story", "s")]), FRAMES_REPLY);
        c.put(&STORY_PROMPT, &STORY_PROMPT.fill(&[("seed", "")]), "Once upon a time.");
        let gw = Gateway::replay(c);
        assert_eq!(gw.generate_story("").unwrap(), "Once upon a time.");
        assert_eq!(gw.generate_story("").unwrap(), "Once upon a time.");
        let b = gw.extract_frames("s").unwrap();
        assert_eq!(b.frames.len(), 1);
        assert_eq!(b.story_text, "s");
        assert!(matches!(gw.generate_story("dragons"), Err(LlmError::ReplayMiss { .. })));
        assert_eq!(gw.replay_misses().len(), 1);
    }

    #[test]
    fn duplicate_fingerprints_rejected() {
        let text = r#"{"records":[{"fingerprint":"ab","response":"x"},{"fingerprint":"ab","response":"y"}]}"#;
        assert!(matches!(ReplayCassette::from_json(text), Err(LlmError::Cassette(_))));
    }

    #[test]
    fn malformed_frames_reply() {
        assert!(matches!(
            parse_frames_response(r#"{"frames":[{"name":"f","objects":[]}]}"#, "s"),
            Err(LlmError::UnparseableResponse { .. })
        ));
        match parse_frames_response("I cannot do that", "s") {
            Err(LlmError::UnparseableResponse { raw, .. }) => assert_eq!(raw, "I cannot do that"),
            other => panic!("{other:?}"),
        }
        // strict parser: dangling entity is not tolerated
        assert!(parse_frames_response(
            r#"{"frames":[{"name":"f","triples":[{"subject":"a","relation":"on","object":"b"}],"objects":[{"name":"a"}]}]}"#,
            "s"
        )
        .is_err());
        assert!(matches!(
            Gateway::fallback().extract_frames("  "),
            Err(LlmError::InvalidInput(_))
        ));
    }

    #[test]
    fn keyword_classifier() {
        let k = KeywordClassifier::default();
        let r = k.classify("rocky path", "");
        assert_eq!(r.suggested_terrain, "rocky");
        assert_ne!(r.affordance, AffordanceType::Terrain);
        assert!(k.is_patch_candidate("treacherous paths"));
        assert!(!k.is_patch_candidate("background"));
        assert_eq!(k.classify("forest canopy", "").affordance, AffordanceType::Terrain);
        assert_eq!(k.classify("forest canopy", "").suggested_terrain, "forest");
        assert_eq!(k.classify("guardian dragon", "").affordance, AffordanceType::CharacterCreature);
        assert_eq!(k.classify("ancient map", "").affordance, AffordanceType::ItemCollectible);
        assert_eq!(k.classify("crystal throne", "").affordance, AffordanceType::InteractiveObject);
        let ctx = "In the forest, young Elara found a map in the forest.";
        let elara = k.classify("elara", ctx);
        assert_eq!(elara.affordance, AffordanceType::CharacterCreature);
        assert_eq!(elara.suggested_terrain, "forest");
        assert_eq!(k.classify("lamp", "").suggested_terrain, "grass");
    }

    #[test]
    fn classify_modes() {
        assert!(matches!(
            Gateway::fallback().classify_object("", "ctx"),
            Err(LlmError::InvalidInput(_))
        ));
        let gw = Gateway::replay(ReplayCassette::default());
        assert_eq!(
            gw.classify_object("rocky path", "").unwrap().suggested_terrain,
            "rocky"
        );
        let strict = Gateway::replay(ReplayCassette::default()).with_fallback(false);
        assert!(matches!(strict.classify_object("x", ""), Err(LlmError::ReplayMiss { .. })));

        let mut c = ReplayCassette::default();
        let prompt = CLASSIFY_PROMPT.fill(&[("name", "guardian dragon"), ("story", "ctx")]);
        c.put(&CLASSIFY_PROMPT, &prompt, r#"{"affordance": "character/creature", "suggested_terrain": "Cave"}"#);
        let r = Gateway::replay(c).classify_object("guardian dragon", "ctx").unwrap();
        assert_eq!(r.affordance, AffordanceType::CharacterCreature);
        assert_eq!(r.suggested_terrain, "cave");
    }

    #[test]
    fn relation_mapping_via_replay() {
        let mut c = ReplayCassette::default();
        c.put(&RELATION_PROMPT, &RELATION_PROMPT.fill(&[("phrase", "perches over")]), " above\n");
        let gw = Gateway::replay(c);
        assert_eq!(gw.map_relation("perches over").unwrap(), Some(CanonicalRelation::Above));
        assert_eq!(gw.map_relation("floats by").unwrap(), None);
        assert_eq!(Gateway::fallback().map_relation("x").unwrap(), None);
    }

    fn unreachable_settings() -> LiveSettings {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        LiveSettings {
            endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            model: "m".into(),
            api_key_env: None,
            timeout_secs: 2,
        }
    }

    #[test]
    fn live_endpoint_down() {
        let gw = Gateway::live(unreachable_settings());
        assert!(matches!(gw.generate_story(""), Err(LlmError::GatewayUnavailable(_))));
        let strict = Gateway::live(unreachable_settings()).with_fallback(false);
        assert!(matches!(strict.classify_object("tree", ""), Err(LlmError::GatewayUnavailable(_))));
    }

    #[test]
    fn live_round_trip_against_local_server() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let server = std::thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut req = Vec::new();
            loop {
                let n = sock.read(&mut buf).unwrap();
                req.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&req);
                if let Some(idx) = text.find("\r\n\r\n") {
                    let len: usize = text
                        .lines()
                        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                        .unwrap_or(0);
                    if req.len() >= idx + 4 + len {
                        break;
                    }
                }
            }
            let body = r#"{"choices":[{"message":{"role":"assistant","content":"A tale."}}]}"#;
            write!(
                sock,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            String::from_utf8(req).unwrap()
        });
        let gw = Gateway::live(LiveSettings {
            endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            model: "test-model".into(),
            api_key_env: None,
            timeout_secs: 5,
        })
        .recording();
        assert_eq!(gw.generate_story("").unwrap(), "A tale.");
        let request = server.join().unwrap();
        assert!(request.contains("\"temperature\":0"));
        assert!(request.contains("test-model"));
        let cassette = gw.recorded_cassette().unwrap();
        assert_eq!(Gateway::replay(cassette).generate_story("").unwrap(), "A tale.");
    }
}
