//! Built-in fixture data: a synthetic tileset generator, a curated tileset
//! for the bundled stories, and the bundled story documents.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::llm::{ReplayCassette, CLASSIFY_PROMPT, FRAMES_PROMPT, STORY_PROMPT};
use crate::narrative::{
    normalize_entity_name, parse_story_bundle, AffordanceType, NarrativeObject, ParseOptions, PredicateTriple,
    SceneFrame, StoryBundle,
};
use crate::tiles::TileRecord;

const ADJECTIVES: &[&str] = &[
    "old", "mossy", "wooden", "stone", "iron", "golden", "broken", "ancient", "small", "large",
    "red", "blue", "dark", "bright", "cracked", "twisted", "frozen", "burning", "hidden", "royal",
];

const NOUNS: &[(&str, &str, &str, AffordanceType)] = &[
    ("grass", "ground", "nature", AffordanceType::Terrain),
    ("sand", "ground", "nature", AffordanceType::Terrain),
    ("water", "liquid", "nature", AffordanceType::Terrain),
    ("cobble floor", "floor", "building", AffordanceType::Terrain),
    ("tree", "plant", "nature", AffordanceType::EnvironmentalObject),
    ("bush", "plant", "nature", AffordanceType::EnvironmentalObject),
    ("rock", "mineral", "nature", AffordanceType::EnvironmentalObject),
    ("fence", "structure", "building", AffordanceType::EnvironmentalObject),
    ("statue", "decoration", "building", AffordanceType::EnvironmentalObject),
    ("door", "entrance", "building", AffordanceType::InteractiveObject),
    ("chest", "container", "furniture", AffordanceType::InteractiveObject),
    ("lever", "mechanism", "furniture", AffordanceType::InteractiveObject),
    ("barrel", "container", "furniture", AffordanceType::InteractiveObject),
    ("potion", "consumable", "item", AffordanceType::ItemCollectible),
    ("scroll", "document", "item", AffordanceType::ItemCollectible),
    ("sword", "weapon", "item", AffordanceType::ItemCollectible),
    ("coin", "treasure", "item", AffordanceType::ItemCollectible),
    ("goblin", "monster", "character", AffordanceType::CharacterCreature),
    ("knight", "human", "character", AffordanceType::CharacterCreature),
    ("dragon", "monster", "character", AffordanceType::CharacterCreature),
];

/// `n` tiles with ids `syn-00000..`, reproducible from `seed`.
pub fn synthetic_tileset(n: usize, seed: u64) -> Vec<TileRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let adj = ADJECTIVES.choose(&mut rng).expect("non-empty");
            let (noun, group, sup, aff) = *NOUNS.choose(&mut rng).expect("non-empty");
            // occasional relabel keeps affordance from being a pure function of the noun
            let affordance = if rng.random_bool(0.1) {
                *AffordanceType::ALL.choose(&mut rng).expect("non-empty")
            } else {
                aff
            };
            TileRecord {
                id: format!("syn-{i:05}"),
                name: format!("{adj} {noun}"),
                group_label: group.to_string(),
                supercategory: sup.to_string(),
                affordance,
                sprite_path: None,
                embedding: None,
            }
        })
        .collect()
}

/// (id, name, group, supercategory, affordance) rows of the curated tileset.
const STORY_TILES: &[(&str, &str, &str, &str, AffordanceType)] = {
    use AffordanceType::*;
    &[
        ("t-grass", "grass", "ground", "nature", Terrain),
        ("t-forest-floor", "forest floor", "ground", "nature", Terrain),
        ("t-sand", "desert sand", "ground", "nature", Terrain),
        ("t-water", "sea water", "liquid", "nature", Terrain),
        ("t-cave-floor", "cave floor", "ground", "underground", Terrain),
        ("t-stone-floor", "stone floor", "floor", "building", Terrain),
        ("t-city-street", "city street", "road", "urban", Terrain),
        ("t-wood-deck", "wooden deck", "floor", "ship", Terrain),
        ("t-rocky-path", "rocky path", "road", "nature", Terrain),
        ("t-dune", "sand dune", "ground", "nature", Terrain),
        ("e-oak", "hollow oak tree", "tree", "nature", EnvironmentalObject),
        ("e-tree", "tree", "tree", "nature", EnvironmentalObject),
        ("e-stump", "tree stump", "tree", "nature", EnvironmentalObject),
        ("e-flower", "flower", "plant", "nature", EnvironmentalObject),
        ("e-bush", "dense bushes", "plant", "nature", EnvironmentalObject),
        ("e-canopy", "forest canopy leaves", "tree", "nature", EnvironmentalObject),
        ("e-sunbeam", "sunlight beam", "light", "effect", EnvironmentalObject),
        ("e-glow", "shimmering light glow", "light", "effect", EnvironmentalObject),
        ("e-moonlight", "moonlight", "light", "effect", EnvironmentalObject),
        ("e-crystal", "crystal cluster", "mineral", "underground", EnvironmentalObject),
        ("e-rock", "rock boulder", "mineral", "nature", EnvironmentalObject),
        ("e-house", "house", "building", "building", EnvironmentalObject),
        ("e-statue-guardian", "guardian statue", "decoration", "building", EnvironmentalObject),
        ("e-streetlight", "streetlight lamp", "light", "urban", EnvironmentalObject),
        ("e-pyramid", "pyramid", "building", "desert", EnvironmentalObject),
        ("e-skyscraper", "skyscraper building", "building", "urban", EnvironmentalObject),
        ("e-wall", "stone wall", "structure", "building", EnvironmentalObject),
        ("e-palm", "palm tree oasis", "tree", "desert", EnvironmentalObject),
        ("e-wave", "ocean waves", "liquid", "nature", EnvironmentalObject),
        ("e-storm", "storm cloud", "weather", "effect", EnvironmentalObject),
        ("i-barrel", "barrel", "container", "furniture", InteractiveObject),
        ("i-chest", "treasure chest", "container", "furniture", InteractiveObject),
        ("i-door", "door", "entrance", "building", InteractiveObject),
        ("i-cave-entrance", "crystal cavern entrance", "entrance", "underground", InteractiveObject),
        ("i-throne", "crystal throne", "furniture", "building", InteractiveObject),
        ("i-desk", "desk", "furniture", "building", InteractiveObject),
        ("i-bookshelf", "dusty bookshelf", "furniture", "building", InteractiveObject),
        ("i-terminal", "computer terminal", "machine", "tech", InteractiveObject),
        ("i-mainframe", "mainframe server", "machine", "tech", InteractiveObject),
        ("i-trash-can", "trash can", "container", "urban", InteractiveObject),
        ("i-sarcophagus", "stone sarcophagus", "container", "tomb", InteractiveObject),
        ("i-lever", "lever mechanism", "mechanism", "tomb", InteractiveObject),
        ("i-ship", "sailing ship", "vehicle", "ship", InteractiveObject),
        ("i-elevator", "elevator", "machine", "building", InteractiveObject),
        ("i-cobblestone", "loose cobblestone", "mechanism", "urban", InteractiveObject),
        ("c-elara", "young girl adventurer elara", "human", "character", CharacterCreature),
        ("c-dragon", "guardian dragon", "monster", "character", CharacterCreature),
        ("c-wolf", "wild creatures wolf", "animal", "character", CharacterCreature),
        ("c-hero", "hero man", "human", "character", CharacterCreature),
        ("c-captain", "pirate captain", "human", "character", CharacterCreature),
        ("c-gangster", "gangster thug", "human", "character", CharacterCreature),
        ("c-sorcerer", "sinister sorcerer", "human", "character", CharacterCreature),
        ("c-serpent", "sea monster leviathan", "monster", "character", CharacterCreature),
        ("c-mummy", "tomb guardian mummy", "monster", "character", CharacterCreature),
        ("c-scorpion", "venomous creature scorpion", "animal", "character", CharacterCreature),
        ("c-mutant", "mutant creature", "monster", "character", CharacterCreature),
        ("m-map", "ancient map", "document", "item", ItemCollectible),
        ("m-scroll", "scroll note", "document", "item", ItemCollectible),
        ("m-amulet", "amulet", "jewelry", "item", ItemCollectible),
        ("m-book", "old book", "document", "item", ItemCollectible),
        ("m-compass", "compass", "tool", "item", ItemCollectible),
        ("m-artifact", "glowing artifact relic", "treasure", "item", ItemCollectible),
        ("m-treasure", "gold treasure", "treasure", "item", ItemCollectible),
        ("m-files", "encrypted files disk", "data", "item", ItemCollectible),
        ("m-key", "key", "tool", "item", ItemCollectible),
    ]
};

/// Curated tileset covering the vocabulary of the bundled stories.
pub fn story_tileset() -> Vec<TileRecord> {
    STORY_TILES
        .iter()
        .map(|(id, name, group, sup, aff)| TileRecord {
            id: id.to_string(),
            name: name.to_string(),
            group_label: group.to_string(),
            supercategory: sup.to_string(),
            affordance: *aff,
            sprite_path: None,
            embedding: None,
        })
        .collect()
}

/// The four-predicate teaser scene: house, tree, barrel, flower, stump.
pub fn teaser_frame() -> SceneFrame {
    use AffordanceType::*;
    let obj = |name: &str, a| NarrativeObject {
        name: name.to_string(),
        affordance: Some(a),
        suggested_terrain: Some("grass".to_string()),
    };
    SceneFrame {
        name: "teaser".into(),
        scene_break: false,
        triples: vec![
            PredicateTriple::new("house", "below", "tree"),
            PredicateTriple::new("tree", "to the right of", "barrel"),
            PredicateTriple::new("flower", "above", "tree"),
            PredicateTriple::new("tree stump", "to the left of", "tree"),
        ],
        objects: vec![
            obj("house", EnvironmentalObject),
            obj("tree", EnvironmentalObject),
            obj("barrel", InteractiveObject),
            obj("flower", EnvironmentalObject),
            obj("tree stump", EnvironmentalObject),
        ],
    }
}

pub const ELARA_STORY: &str = include_str!("../../../fixtures/stories/elara.json");

/// Ten sample stories, pre-extracted.
pub const SAMPLE_STORIES: [(&str, &str); 10] = [
    ("story01", include_str!("../../../fixtures/stories/story01.json")),
    ("story02", include_str!("../../../fixtures/stories/story02.json")),
    ("story03", include_str!("../../../fixtures/stories/story03.json")),
    ("story04", include_str!("../../../fixtures/stories/story04.json")),
    ("story05", include_str!("../../../fixtures/stories/story05.json")),
    ("story06", include_str!("../../../fixtures/stories/story06.json")),
    ("story07", include_str!("../../../fixtures/stories/story07.json")),
    ("story08", include_str!("../../../fixtures/stories/story08.json")),
    ("story09", include_str!("../../../fixtures/stories/story09.json")),
    ("story10", include_str!("../../../fixtures/stories/story10.json")),
];

/// Seed prompt whose recorded story is the Elara narrative.
pub const ELARA_PROMPT: &str = "A young girl named Elara finds an ancient map in an enchanted forest.";

/// Recorded classification replies for the Elara objects: (key, affordance, terrain).
pub const ELARA_CLASSIFICATIONS: &[(&str, &str, &str)] = &[
    ("hollow oak", "environmental object", "forest"),
    ("ancient map", "item/collectible", "forest"),
    ("elara", "character/creature", "forest"),
    ("sunlight", "environmental object", "forest"),
    ("forest canopy", "terrain", "forest"),
    ("rocky path", "environmental object", "rocky"),
    ("wild creatures", "character/creature", "forest"),
    ("dense bushes", "environmental object", "forest"),
    ("treacherous paths", "terrain", "forest"),
    ("crystal cavern", "interactive object", "cave"),
    ("crystal cavern entrance", "interactive object", "cave"),
    ("shimmering light", "environmental object", "cave"),
    ("guardian dragon", "character/creature", "cave"),
    ("crystal throne", "interactive object", "cave"),
];

/// The Elara bundle as stored on disk.
pub fn elara_bundle() -> StoryBundle {
    parse_story_bundle(ELARA_STORY, ParseOptions::default()).expect("bundled Elara story is valid")
}

/// Replay cassette for the Elara run: story for `ELARA_PROMPT`, the frame
/// extraction reply, and one classification per distinct object (named as
/// at its first occurrence).
pub fn elara_cassette() -> ReplayCassette {
    let bundle = elara_bundle();
    let mut c = ReplayCassette::default();
    c.put(
        &STORY_PROMPT,
        &STORY_PROMPT.fill(&[("seed", &format!(" {ELARA_PROMPT}"))]),
        &bundle.story_text,
    );
    let mut reply = serde_json::to_value(&bundle).expect("bundle serializes");
    reply.as_object_mut().expect("object").remove("story");
    c.put(
        &FRAMES_PROMPT,
        &FRAMES_PROMPT.fill(&[("story", &bundle.story_text)]),
        &serde_json::to_string_pretty(&reply).expect("reply serializes"),
    );
    let mut seen = std::collections::BTreeSet::new();
    for obj in bundle.frames.iter().flat_map(|f| &f.objects) {
        let key = normalize_entity_name(&obj.name).expect("valid name");
        if !seen.insert(key.clone()) {
            continue;
        }
        let (_, aff, terrain) = ELARA_CLASSIFICATIONS
            .iter()
            .find(|(k, _, _)| *k == key)
            .unwrap_or_else(|| panic!("no recorded classification for '{key}'"));
        c.put(
            &CLASSIFY_PROMPT,
            &CLASSIFY_PROMPT.fill(&[("name", &obj.name), ("story", &bundle.story_text)]),
            &format!("{{\"affordance\": \"{aff}\", \"suggested_terrain\": \"{terrain}\"}}"),
        );
    }
    c
}

/// Three frames, nine predicates, two of them contradicting an earlier
/// predicate of the same frame: at most seven can hold at once.
pub const SAT_FIXTURE: &str = include_str!("../../../fixtures/stories/sat_fixture.json");
