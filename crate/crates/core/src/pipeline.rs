//! Configuration and the on-disk stage sequence that turns a story into a
//! run directory.
//!
//! Every stage reads the artifacts of the previous ones from the run
//! directory and writes its own, so running the stages one by one produces
//! the same bytes as a fused `generate`.
//!
//! Run directory layout:
//!
//! ```text
//! story.json               parsed (and aliased) story bundle
//! classifications.json     entity -> affordance + suggested terrain
//! relations.json           effective relation table
//! relations_review.json    how each phrase of the story was mapped
//! terrain_plan.json        frame groups, base and patch terrain
//! matches.json             top-k tiles per frame object
//! frame_<k>.layers         layered occupancy grid
//! frame_<k>.placement.json refinement report
//! frame_<k>.kg             single-frame graph
//! frame_<k>.png, frame_<k>.meta.json
//! merged.kg, merged.dot    temporal graph
//! report.md, report.csv, metrics.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{emit_report, score_story, EvalError, FrameScoreInput, ReportFormat, StoryMetrics};
use crate::llm::{ClassificationResult, Gateway, KeywordClassifier, LiveSettings, LlmError, LlmMode, ReplayCassette};
use crate::narrative::{apply_alias_map, normalize_entity_name, parse_story_bundle, NarrativeError, ParseOptions, StoryBundle};
use crate::placement::{apply_spatial_relations, initial_place, PlacementError, PlacementReport, RefinementMode};
use crate::relations::{normalize_phrase, normalize_relation, CanonicalRelation, MappingSource, RelationError, RelationMapTable};
use crate::render::{export_layer_bundle, import_layers, RenderConfig, RenderError, SpriteTable};
use crate::scene_kg::{build_scene_kg, merge_kgs, KgError};
use crate::terrain::{generate_base_mask, infer_terrain_plan, insert_patch, CAParams, TerrainError, TerrainPlan, TerrainSettings};
use crate::tiles::{
    attach_embeddings, build_index, load_embedding_sidecar, load_tileset, HashingProvider, MatchResult, TileError,
    TileRecord,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("i/o failure at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corrupt artifact {path}: {message}")]
    CorruptArtifact { path: PathBuf, message: String },
    #[error("narrative: {0}")]
    Narrative(#[from] NarrativeError),
    #[error("llm: {0}")]
    Llm(#[from] LlmError),
    #[error("relations: {0}")]
    Relations(#[from] RelationError),
    #[error("tiles: {0}")]
    Tiles(#[from] TileError),
    #[error("terrain: {0}")]
    Terrain(#[from] TerrainError),
    #[error("placement: {0}")]
    Placement(#[from] PlacementError),
    #[error("kg: {0}")]
    Kg(#[from] KgError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("evaluate: {0}")]
    Evaluate(#[from] EvalError),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: LlmMode,
    pub cassette: Option<PathBuf>,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Fall back to the keyword classifier on replay misses / outages.
    pub fallback: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            mode: LlmMode::Fallback,
            cassette: None,
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 60,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    pub width: usize,
    pub height: usize,
    pub p_init: f64,
    pub iterations: u32,
    pub birth: u8,
    pub max_retries: u32,
    pub patch_fraction: f64,
    pub default_base: String,
    /// Pins the terrain stream independently of the master seed.
    pub seed: Option<u64>,
    pub keywords: Vec<String>,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        let p = CAParams::default();
        TerrainConfig {
            width: p.width,
            height: p.height,
            p_init: p.initial_walkable_prob,
            iterations: p.iterations,
            birth: p.birth_threshold,
            max_retries: p.max_retries,
            patch_fraction: 0.15,
            default_base: "grass".into(),
            seed: None,
            keywords: KeywordClassifier::default().terrain_keywords,
        }
    }
}

impl TerrainConfig {
    pub fn ca_params(&self) -> CAParams {
        CAParams {
            width: self.width,
            height: self.height,
            initial_walkable_prob: self.p_init,
            iterations: self.iterations,
            birth_threshold: self.birth,
            max_retries: self.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub lambda: f64,
    pub k: usize,
    pub dimension: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            lambda: 0.1,
            k: 5,
            dimension: crate::tiles::DEFAULT_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub refinement: RefinementMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// JSONL tileset; the built-in curated tileset when absent.
    pub tileset: Option<PathBuf>,
    /// Optional float32 sidecar (`<path>` + `<path>.ids`).
    pub embeddings: Option<PathBuf>,
    pub sprites: Option<PathBuf>,
    /// JSON object alias -> canonical name.
    pub aliases: Option<PathBuf>,
    /// JSON relation table merged over the built-in one.
    pub relations: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub llm: LlmConfig,
    pub terrain: TerrainConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub layout: LayoutConfig,
    pub render: RenderConfig,
    pub paths: PathsConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.llm.cassette);
        for p in [
            &mut cfg.paths.tileset,
            &mut cfg.paths.embeddings,
            &mut cfg.paths.sprites,
            &mut cfg.paths.aliases,
            &mut cfg.paths.relations,
            &mut cfg.paths.out,
        ] {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks parameter ranges and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        self.terrain.ca_params().validate()?;
        if !(self.terrain.patch_fraction > 0.0 && self.terrain.patch_fraction < 1.0) {
            return Err(PipelineError::Config(format!(
                "terrain.patch_fraction {} outside (0, 1)",
                self.terrain.patch_fraction
            )));
        }
        if self.matching.k == 0 {
            return Err(PipelineError::Config("match.k must be positive".into()));
        }
        if !(self.matching.lambda.is_finite() && self.matching.lambda >= 0.0) {
            return Err(PipelineError::Config(format!("match.lambda {} must be >= 0", self.matching.lambda)));
        }
        if self.matching.dimension == 0 {
            return Err(PipelineError::Config("match.dimension must be positive".into()));
        }
        self.render.validate()?;
        let inputs = [
            ("paths.tileset", &self.paths.tileset),
            ("paths.embeddings", &self.paths.embeddings),
            ("paths.sprites", &self.paths.sprites),
            ("paths.aliases", &self.paths.aliases),
            ("paths.relations", &self.paths.relations),
            ("llm.cassette", &self.llm.cassette),
        ];
        for (name, p) in inputs {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(PipelineError::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        if self.llm.mode == LlmMode::Replay && self.llm.cassette.is_none() {
            return Err(PipelineError::Config("replay mode needs llm.cassette".into()));
        }
        Ok(())
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Seed of the terrain stream: the pinned value or one derived from the master seed.
    pub fn terrain_seed(&self) -> u64 {
        self.terrain.seed.unwrap_or_else(|| derive_seed(self.master_seed(), "terrain"))
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let gw = match self.llm.mode {
            LlmMode::Fallback => Gateway::fallback(),
            LlmMode::Replay => {
                let path = self.llm.cassette.as_ref().ok_or_else(|| PipelineError::Config("replay mode needs llm.cassette".into()))?;
                Gateway::replay(ReplayCassette::load(path)?)
            }
            LlmMode::Live => Gateway::live(LiveSettings {
                endpoint: self.llm.endpoint.clone(),
                model: self.llm.model.clone(),
                api_key_env: self.llm.api_key_env.clone(),
                timeout_secs: self.llm.timeout_secs,
            }),
        };
        let classifier = KeywordClassifier {
            terrain_keywords: self.terrain.keywords.clone(),
            ..KeywordClassifier::default()
        };
        Ok(gw.with_fallback(self.llm.fallback).with_classifier(classifier))
    }

    fn relation_table(&self) -> Result<RelationMapTable> {
        let builtin = RelationMapTable::builtin();
        match &self.paths.relations {
            Some(p) => Ok(builtin.merged_with(&RelationMapTable::from_json(&read_text(p)?)?)),
            None => Ok(builtin),
        }
    }

    fn tileset(&self) -> Result<Vec<TileRecord>> {
        let mut records = match &self.paths.tileset {
            Some(p) => load_tileset(p)?,
            None => crate::fixtures::story_tileset(),
        };
        if let Some(p) = &self.paths.embeddings {
            let mut ids = p.clone().into_os_string();
            ids.push(".ids");
            let rows = load_embedding_sidecar(p, Path::new(&ids), self.matching.dimension)?;
            attach_embeddings(&mut records, &rows);
        }
        Ok(records)
    }
}

/// Independent RNG stream per concern: first 8 bytes of
/// sha256(label 0x1f master_le).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0x1f]);
    h.update(master.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Warnings gathered over a run; a non-empty list maps to exit status 2.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Warnings(pub Vec<String>);

impl Warnings {
    pub fn push(&mut self, stage: &str, message: impl Into<String>) {
        let m = format!("{stage}: {}", message.into());
        log::warn!("{m}");
        self.0.push(m);
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| PipelineError::CorruptArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"))
}

pub mod artifact {
    pub const STORY: &str = "story.json";
    pub const CLASSIFICATIONS: &str = "classifications.json";
    pub const RELATIONS: &str = "relations.json";
    pub const RELATIONS_REVIEW: &str = "relations_review.json";
    pub const TERRAIN_PLAN: &str = "terrain_plan.json";
    pub const MATCHES: &str = "matches.json";
    pub const MERGED_KG: &str = "merged.kg";
    pub const MERGED_DOT: &str = "merged.dot";
    pub const REPORT_MD: &str = "report.md";
    pub const REPORT_CSV: &str = "report.csv";
    pub const METRICS: &str = "metrics.json";

    pub fn placement(k: usize) -> String {
        format!("frame_{k}.placement.json")
    }

    pub fn frame_kg(k: usize) -> String {
        format!("frame_{k}.kg")
    }

    pub fn layers(k: usize) -> String {
        format!("frame_{k}.layers")
    }
}

/// Where the story comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoryInput {
    /// A story bundle document (JSON with frames).
    BundleFile(PathBuf),
    /// Plain narrative text; frames are extracted by the gateway.
    TextFile(PathBuf),
    /// A seed prompt; the gateway writes the story, then extracts frames.
    Prompt(String),
}

impl StoryInput {
    /// A file whose content is a JSON object is a bundle, anything else is text.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let is_json = serde_json::from_str::<serde_json::Value>(&text).is_ok_and(|v| v.is_object());
        Ok(if is_json {
            StoryInput::BundleFile(path.to_path_buf())
        } else {
            StoryInput::TextFile(path.to_path_buf())
        })
    }
}

/// Stage 1: story.json.
pub fn stage_prepare(cfg: &PipelineConfig, gw: &Gateway, input: &StoryInput, dir: &Path) -> Result<StoryBundle> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let bundle = match input {
        StoryInput::BundleFile(p) => parse_story_bundle(&read_text(p)?, ParseOptions::default())?,
        StoryInput::TextFile(p) => gw.extract_frames(&read_text(p)?)?,
        StoryInput::Prompt(prompt) => {
            let story = gw.generate_story(prompt)?;
            gw.extract_frames(&story)?
        }
    };
    let bundle = match &cfg.paths.aliases {
        Some(p) => {
            let aliases: BTreeMap<String, String> = read_json(p)?;
            apply_alias_map(&bundle, &aliases)?
        }
        None => bundle,
    };
    write_text(&dir.join(artifact::STORY), &bundle.to_json())?;
    Ok(bundle)
}

fn load_story(dir: &Path) -> Result<StoryBundle> {
    Ok(parse_story_bundle(&read_text(&dir.join(artifact::STORY))?, ParseOptions::default())?)
}

/// Stage 2: classifications.json. Objects that already carry an affordance
/// keep it; everything else goes through the gateway once per entity.
pub fn stage_classify(cfg: &PipelineConfig, gw: &Gateway, dir: &Path, warnings: &mut Warnings) -> Result<BTreeMap<String, ClassificationResult>> {
    let bundle = load_story(dir)?;
    let mut out: BTreeMap<String, ClassificationResult> = BTreeMap::new();
    let misses_before = gw.replay_misses().len();
    for obj in bundle.frames.iter().flat_map(|f| &f.objects) {
        let key = normalize_entity_name(&obj.name)?;
        if out.contains_key(&key) {
            continue;
        }
        let result = match obj.affordance {
            Some(a) => ClassificationResult {
                object_name: obj.name.clone(),
                affordance: a,
                suggested_terrain: obj
                    .suggested_terrain
                    .clone()
                    .unwrap_or_else(|| gw.classifier().classify(&obj.name, &bundle.story_text).suggested_terrain),
            },
            None => gw.classify_object(&obj.name, &bundle.story_text)?,
        };
        out.insert(key, result);
    }
    let misses = gw.replay_misses().len() - misses_before;
    if misses > 0 {
        warnings.push("classify", format!("{misses} replay misses answered by the keyword fallback"));
    }
    let _ = cfg;
    write_json(&dir.join(artifact::CLASSIFICATIONS), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationReviewEntry {
    pub phrase: String,
    pub relation: Option<CanonicalRelation>,
    #[serde(default)]
    pub reversed: bool,
    pub source: Option<MappingSource>,
}

/// Stage 3: relations.json + relations_review.json. Gateway answers are
/// added to the effective table; unmapped phrases are warnings.
pub fn stage_relations(cfg: &PipelineConfig, gw: &Gateway, dir: &Path, warnings: &mut Warnings) -> Result<RelationMapTable> {
    let bundle = load_story(dir)?;
    let mut table = cfg.relation_table()?;
    let mut review: BTreeMap<String, RelationReviewEntry> = BTreeMap::new();
    for t in bundle.frames.iter().flat_map(|f| &f.triples) {
        let phrase = normalize_phrase(&t.relation);
        if review.contains_key(&phrase) {
            continue;
        }
        let entry = match normalize_relation(&t.relation, &table, Some(gw)) {
            Ok((m, source)) => {
                if source == MappingSource::Gateway {
                    table.insert(&phrase, m);
                }
                RelationReviewEntry { phrase: phrase.clone(), relation: Some(m.relation), reversed: m.reversed, source: Some(source) }
            }
            Err(RelationError::NonCanonicalRelation(_)) => {
                warnings.push("relations", format!("no canonical relation for '{phrase}'"));
                RelationReviewEntry { phrase: phrase.clone(), relation: None, reversed: false, source: None }
            }
            Err(e) => return Err(e.into()),
        };
        review.insert(phrase, entry);
    }
    write_text(&dir.join(artifact::RELATIONS), &(table.to_json() + "\n"))?;
    write_json(&dir.join(artifact::RELATIONS_REVIEW), &review.into_values().collect::<Vec<_>>())?;
    Ok(table)
}

fn load_relations(dir: &Path) -> Result<RelationMapTable> {
    Ok(RelationMapTable::from_json(&read_text(&dir.join(artifact::RELATIONS))?)?)
}

fn load_classifications(dir: &Path) -> Result<BTreeMap<String, ClassificationResult>> {
    read_json(&dir.join(artifact::CLASSIFICATIONS))
}

/// The story with every object's affordance and terrain filled in.
fn annotated_story(dir: &Path) -> Result<(StoryBundle, BTreeMap<String, ClassificationResult>)> {
    let mut bundle = load_story(dir)?;
    let cls = load_classifications(dir)?;
    for obj in bundle.frames.iter_mut().flat_map(|f| f.objects.iter_mut()) {
        let key = normalize_entity_name(&obj.name)?;
        let c = cls.get(&key).ok_or_else(|| PipelineError::CorruptArtifact {
            path: dir.join(artifact::CLASSIFICATIONS),
            message: format!("no classification for '{key}'"),
        })?;
        obj.affordance = Some(c.affordance);
        obj.suggested_terrain = Some(c.suggested_terrain.clone());
    }
    Ok((bundle, cls))
}

/// Stage 4: terrain_plan.json.
pub fn stage_terrain(cfg: &PipelineConfig, dir: &Path, warnings: &mut Warnings) -> Result<TerrainPlan> {
    let (bundle, cls) = annotated_story(dir)?;
    let settings = TerrainSettings {
        default_base: cfg.terrain.default_base.clone(),
        classifier: KeywordClassifier {
            terrain_keywords: cfg.terrain.keywords.clone(),
            ..KeywordClassifier::default()
        },
    };
    let plan = infer_terrain_plan(&bundle, &cls, &settings)?;
    for w in &plan.warnings {
        warnings.push("terrain", w.clone());
    }
    write_json(&dir.join(artifact::TERRAIN_PLAN), &plan)?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMatches {
    pub frame: String,
    /// Entity -> candidates, best first.
    pub objects: BTreeMap<String, Vec<MatchResult>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchLog {
    pub provider: String,
    pub lambda: f64,
    pub k: usize,
    pub frames: Vec<FrameMatches>,
}

impl MatchLog {
    /// Top-1 match per entity of frame `k` (0-based).
    pub fn top1(&self, k: usize) -> BTreeMap<String, MatchResult> {
        self.frames
            .get(k)
            .map(|f| f.objects.iter().filter_map(|(e, c)| c.first().map(|m| (e.clone(), m.clone()))).collect())
            .unwrap_or_default()
    }
}

/// Stage 5: matches.json.
pub fn stage_match(cfg: &PipelineConfig, dir: &Path) -> Result<MatchLog> {
    let (bundle, _) = annotated_story(dir)?;
    let provider = HashingProvider::new(cfg.matching.dimension);
    let index = build_index(cfg.tileset()?, &provider)?;
    let mut frames = Vec::with_capacity(bundle.frames.len());
    for frame in &bundle.frames {
        let mut objects = BTreeMap::new();
        for obj in &frame.objects {
            let key = normalize_entity_name(&obj.name)?;
            objects.insert(key, index.query(&provider, obj, cfg.matching.k, cfg.matching.lambda)?);
        }
        frames.push(FrameMatches { frame: frame.name.clone(), objects });
    }
    let log = MatchLog {
        provider: index.provider_id().to_string(),
        lambda: cfg.matching.lambda,
        k: cfg.matching.k,
        frames,
    };
    write_json(&dir.join(artifact::MATCHES), &log)?;
    Ok(log)
}

fn load_matches(dir: &Path) -> Result<MatchLog> {
    read_json(&dir.join(artifact::MATCHES))
}

/// Stage 6: frame_<k>.layers + frame_<k>.placement.json (k is 1-based).
pub fn stage_layout(cfg: &PipelineConfig, dir: &Path, warnings: &mut Warnings) -> Result<Vec<PlacementReport>> {
    let (bundle, _) = annotated_story(dir)?;
    let plan: TerrainPlan = read_json(&dir.join(artifact::TERRAIN_PLAN))?;
    let matches = load_matches(dir)?;
    let table = load_relations(dir)?;
    if plan.scenes.len() != bundle.frames.len() || matches.frames.len() != bundle.frames.len() {
        return Err(PipelineError::CorruptArtifact {
            path: dir.to_path_buf(),
            message: "frame counts of story, terrain plan and matches differ".into(),
        });
    }
    let params = cfg.terrain.ca_params();
    let terrain_seed = cfg.terrain_seed();
    let patch_seed = derive_seed(terrain_seed, "patch");
    let place_seed = derive_seed(cfg.master_seed(), "placement");
    let mut reports = Vec::new();
    for (i, frame) in bundle.frames.iter().enumerate() {
        let scene = &plan.scenes[i];
        let mask = generate_base_mask(&params, terrain_seed.wrapping_add(i as u64))?;
        let mut grid = initial_place(frame, &matches.top1(i), &mask, &scene.base_terrain, place_seed.wrapping_add(i as u64))?;
        for (j, label) in scene.patch_labels.iter().enumerate() {
            let seed = patch_seed.wrapping_add((i as u64) << 16).wrapping_add(j as u64);
            let patch = insert_patch(&mask, label, cfg.terrain.patch_fraction, seed)?;
            if patch.short {
                warnings.push("terrain", format!("frame {}: patch '{label}' is smaller than requested", i + 1));
            }
            grid.patches.push(patch);
        }
        let (grid, report) = apply_spatial_relations(grid, frame, &table, cfg.layout.refinement);
        log::info!(
            "frame {}: {}/{} relations hold after refinement",
            i + 1,
            report.final_satisfied,
            report.records.len()
        );
        if report.empty_frame {
            warnings.push("layout", format!("frame {} has no predicates and scores 0", i + 1));
        }
        write_text(&dir.join(artifact::layers(i + 1)), &crate::placement::LayersDocument::from_grid(&grid).to_json())?;
        write_json(&dir.join(artifact::placement(i + 1)), &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Stage 7: frame_<k>.kg, merged.kg, merged.dot.
pub fn stage_kg(dir: &Path) -> Result<crate::scene_kg::MergedKG> {
    let (bundle, cls) = annotated_story(dir)?;
    let matches = load_matches(dir)?;
    let table = load_relations(dir)?;
    let kgs: Vec<_> = bundle
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| build_scene_kg(f, &matches.top1(i), &cls, &table))
        .collect();
    for (i, kg) in kgs.iter().enumerate() {
        write_text(&dir.join(artifact::frame_kg(i + 1)), &merge_kgs(std::slice::from_ref(kg))?.to_json())?;
    }
    let merged = merge_kgs(&kgs)?;
    write_text(&dir.join(artifact::MERGED_KG), &merged.to_json())?;
    write_text(&dir.join(artifact::MERGED_DOT), &merged.to_dot())?;
    Ok(merged)
}

fn frame_count(dir: &Path) -> Result<usize> {
    Ok(load_story(dir)?.frames.len())
}

/// Stage 8: frame_<k>.png + frame_<k>.meta.json from the layer documents.
pub fn stage_render(cfg: &PipelineConfig, dir: &Path, warnings: &mut Warnings) -> Result<()> {
    let n = frame_count(dir)?;
    let bundle = load_story(dir)?;
    let sprites = match &cfg.paths.sprites {
        Some(sdir) => {
            let (table, missing) = SpriteTable::load(sdir, &cfg.tileset()?);
            if !missing.is_empty() {
                warnings.push("render", format!("{} sprites could not be loaded", missing.len()));
            }
            table
        }
        None => SpriteTable::new(),
    };
    for k in 1..=n {
        let grid = import_layers(&dir.join(artifact::layers(k)))?;
        let (_, meta) = export_layer_bundle(&grid, &bundle.frames[k - 1].name, k, &sprites, &cfg.render, dir)?;
        if cfg.paths.sprites.is_some() && !meta.placeholders.is_empty() {
            warnings.push("render", format!("frame {k}: {} objects drawn as placeholders", meta.placeholders.len()));
        }
    }
    Ok(())
}

/// Scores one run directory; the story id is the bundle title, or the
/// directory name for untitled bundles.
pub fn score_run(dir: &Path) -> Result<StoryMetrics> {
    let (bundle, _) = annotated_story(dir)?;
    let matches = load_matches(dir)?;
    let table = load_relations(dir)?;
    let mut grids = Vec::new();
    let mut tops = Vec::new();
    for k in 0..bundle.frames.len() {
        grids.push(import_layers(&dir.join(artifact::layers(k + 1)))?);
        tops.push(matches.top1(k));
    }
    let inputs: Vec<FrameScoreInput<'_>> = bundle
        .frames
        .iter()
        .enumerate()
        .map(|(k, frame)| FrameScoreInput { frame, matches: &tops[k], grid: &grids[k] })
        .collect();
    let story = if bundle.title.trim().is_empty() {
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "story".into())
    } else {
        bundle.title.clone()
    };
    Ok(score_story(&story, &inputs, &table)?)
}

/// Stage 9: report.md, report.csv and metrics.json for one or more runs,
/// written to `out`.
pub fn stage_evaluate(runs: &[PathBuf], out: &Path) -> Result<Vec<StoryMetrics>> {
    if runs.is_empty() {
        return Err(PipelineError::MissingArtifact(out.join(artifact::STORY)));
    }
    let metrics = runs.iter().map(|r| score_run(r)).collect::<Result<Vec<_>>>()?;
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_text(&out.join(artifact::REPORT_MD), &emit_report(&metrics, ReportFormat::Markdown)?)?;
    write_text(&out.join(artifact::REPORT_CSV), &emit_report(&metrics, ReportFormat::Csv)?)?;
    write_json(&out.join(artifact::METRICS), &metrics)?;
    Ok(metrics)
}

/// Run directories below `root`: `root` itself if it holds a story, else
/// its immediate subdirectories that do, sorted by name.
pub fn discover_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(artifact::STORY).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| io_err(root, e))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(artifact::STORY).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(PipelineError::MissingArtifact(root.join(artifact::STORY)));
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub frames: usize,
    pub metrics: StoryMetrics,
    pub warnings: Warnings,
}

/// All stages in order into `dir`.
pub fn run_generate(cfg: &PipelineConfig, input: &StoryInput, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let gw = cfg.gateway()?;
    let mut warnings = Warnings::default();
    let bundle = stage_prepare(cfg, &gw, input, dir)?;
    log::info!("prepared {} frames into {}", bundle.frames.len(), dir.display());
    stage_classify(cfg, &gw, dir, &mut warnings)?;
    stage_relations(cfg, &gw, dir, &mut warnings)?;
    stage_terrain(cfg, dir, &mut warnings)?;
    stage_match(cfg, dir)?;
    stage_layout(cfg, dir, &mut warnings)?;
    stage_kg(dir)?;
    stage_render(cfg, dir, &mut warnings)?;
    let metrics = stage_evaluate(&[dir.to_path_buf()], dir)?.remove(0);
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        frames: bundle.frames.len(),
        metrics,
        warnings,
    })
}
