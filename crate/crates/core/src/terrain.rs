//! Base/patch terrain inference over frame groups, cellular-automata base
//! masks, and patch growth inside them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ClassificationResult, KeywordClassifier};
use crate::narrative::{normalize_entity_name, AffordanceType, StoryBundle};

#[derive(Debug, Error, PartialEq)]
pub enum TerrainError {
    #[error("mask generation failed after {retries} attempts (last walkable fraction {last_fraction:.3})")]
    GenerationFailed { retries: u32, last_fraction: f64 },
    #[error("invalid CA parameters: {0}")]
    InvalidParams(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("object '{0}' has no classification")]
    Unclassified(String),
    #[error("patch fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
}

pub const MIN_WALKABLE_FRACTION: f64 = 0.35;
pub const MAX_WALKABLE_FRACTION: f64 = 0.90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAParams {
    pub width: usize,
    pub height: usize,
    pub initial_walkable_prob: f64,
    pub iterations: u32,
    pub birth_threshold: u8,
    pub max_retries: u32,
}

impl Default for CAParams {
    fn default() -> Self {
        CAParams {
            width: 20,
            height: 20,
            initial_walkable_prob: 0.55,
            iterations: 4,
            birth_threshold: 5,
            max_retries: 10,
        }
    }
}

impl CAParams {
    pub fn validate(&self) -> Result<(), TerrainError> {
        if self.width < 8 || self.height < 8 {
            return Err(TerrainError::InvalidParams(format!(
                "grid {}x{} is smaller than 8x8",
                self.width, self.height
            )));
        }
        if !(self.initial_walkable_prob > 0.0 && self.initial_walkable_prob <= 1.0) {
            return Err(TerrainError::InvalidParams(format!(
                "initial_walkable_prob {} outside (0, 1]",
                self.initial_walkable_prob
            )));
        }
        if self.birth_threshold > 9 {
            return Err(TerrainError::InvalidParams("birth_threshold above 9".into()));
        }
        if self.max_retries == 0 {
            return Err(TerrainError::InvalidParams("max_retries must be positive".into()));
        }
        Ok(())
    }
}

/// Walkable/blocked grid whose walkable cells form one 4-connected region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMask {
    width: usize,
    height: usize,
    cells: Vec<bool>,
    pub seed: u64,
    pub params: CAParams,
}

impl BaseMask {
    /// Validating constructor; rejects masks that are empty or split into
    /// several components. The walkable-fraction window is a generator
    /// acceptance rule, not part of this check.
    pub fn from_cells(
        width: usize,
        height: usize,
        cells: Vec<bool>,
        seed: u64,
        params: CAParams,
    ) -> Result<Self, TerrainError> {
        if cells.len() != width * height {
            return Err(TerrainError::InvalidMask(format!(
                "{} cells for a {}x{} grid",
                cells.len(),
                width,
                height
            )));
        }
        let mask = BaseMask { width, height, cells, seed, params };
        let walkable = mask.walkable_count();
        if walkable == 0 {
            return Err(TerrainError::InvalidMask("no walkable cells".into()));
        }
        let components = components(width, height, &mask.cells);
        if components.len() != 1 {
            return Err(TerrainError::InvalidMask(format!(
                "{} walkable components",
                components.len()
            )));
        }
        Ok(mask)
    }

    /// Parses rows of `#` (blocked) and `.` (walkable).
    pub fn from_ascii(rows: &[&str]) -> Result<Self, TerrainError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(TerrainError::InvalidMask("ragged rows".into()));
        }
        let cells = rows.iter().flat_map(|r| r.chars().map(|c| c == '.')).collect();
        let params = CAParams { width, height, ..CAParams::default() };
        Self::from_cells(width, height, cells, 0, params)
    }

    /// Every cell walkable.
    pub fn open(width: usize, height: usize) -> Self {
        let params = CAParams { width, height, ..CAParams::default() };
        Self::from_cells(width, height, vec![true; width * height], 0, params)
            .expect("open grid is connected")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn in_bounds(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn is_walkable(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y) && self.cells[y as usize * self.width + x as usize]
    }

    pub fn walkable_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn walkable_fraction(&self) -> f64 {
        self.walkable_count() as f64 / self.cells.len() as f64
    }

    /// Walkable cells in row-major order.
    pub fn walkable_cells(&self) -> Vec<(i32, i32)> {
        (0..self.cells.len())
            .filter(|i| self.cells[*i])
            .map(|i| ((i % self.width) as i32, (i / self.width) as i32))
            .collect()
    }

    /// `#`/`.` rows, the inverse of `from_ascii`.
    pub fn to_ascii(&self) -> Vec<String> {
        self.cells
            .chunks(self.width)
            .map(|row| row.iter().map(|c| if *c { '.' } else { '#' }).collect())
            .collect()
    }
}

const ORTHOGONAL: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// 4-connected components of `cells`, each listed as flat indices, in
/// discovery order of a row-major scan.
fn components(width: usize, height: usize, cells: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; cells.len()];
    let mut out = Vec::new();
    for start in 0..cells.len() {
        if !cells[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = ((i % width) as i32, (i / width) as i32);
            for (dx, dy) in ORTHOGONAL {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if cells[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn smooth(width: usize, height: usize, cells: &[bool], birth: u8) -> Vec<bool> {
    let mut next = vec![false; cells.len()];
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            // 3x3 window including the cell; out-of-bounds counts as blocked
            let mut count = 0u8;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0
                        && ny >= 0
                        && (nx as usize) < width
                        && (ny as usize) < height
                        && cells[ny as usize * width + nx as usize]
                    {
                        count += 1;
                    }
                }
            }
            next[y as usize * width + x as usize] = count >= birth;
        }
    }
    next
}

fn synthesize(params: &CAParams, seed: u64) -> Vec<bool> {
    let (w, h) = (params.width, params.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<bool> = (0..w * h)
        .map(|_| rng.random::<f64>() < params.initial_walkable_prob)
        .collect();
    for _ in 0..params.iterations {
        cells = smooth(w, h, &cells, params.birth_threshold);
    }
    // keep the largest component; ties go to the first discovered
    let comps = components(w, h, &cells);
    let mut keep = vec![false; cells.len()];
    if let Some(best) = comps
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(_, c)| c)
    {
        for &i in best {
            keep[i] = true;
        }
    }
    keep
}

/// Retries with `seed + 1, seed + 2, ...` while the walkable fraction falls
/// outside `[0.35, 0.90]`.
pub fn generate_base_mask(params: &CAParams, seed: u64) -> Result<BaseMask, TerrainError> {
    params.validate()?;
    let mut last_fraction = 0.0;
    for attempt in 0..params.max_retries {
        let s = seed.wrapping_add(attempt as u64);
        let cells = synthesize(params, s);
        let walkable = cells.iter().filter(|c| **c).count();
        last_fraction = walkable as f64 / cells.len() as f64;
        if walkable > 0 && (MIN_WALKABLE_FRACTION..=MAX_WALKABLE_FRACTION).contains(&last_fraction) {
            return BaseMask::from_cells(params.width, params.height, cells, s, params.clone());
        }
    }
    Err(TerrainError::GenerationFailed {
        retries: params.max_retries,
        last_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub label: String,
    pub cells: BTreeSet<(i32, i32)>,
    /// Set when the blob could not reach its target size.
    #[serde(default)]
    pub short: bool,
}

/// BFS blob from a random walkable cell, grown until it covers
/// `ceil(target_fraction * walkable)` cells or runs out of frontier.
pub fn insert_patch(
    mask: &BaseMask,
    label: &str,
    target_fraction: f64,
    seed: u64,
) -> Result<PatchRegion, TerrainError> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(TerrainError::InvalidFraction(target_fraction));
    }
    let walkable = mask.walkable_cells();
    let target = ((target_fraction * walkable.len() as f64).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = walkable[rng.random_range(0..walkable.len())];

    let mut cells = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    'grow: while let Some((x, y)) = queue.pop_front() {
        for (dx, dy) in ORTHOGONAL {
            if cells.len() >= target {
                break 'grow;
            }
            let n = (x + dx, y + dy);
            if mask.is_walkable(n.0, n.1) && cells.insert(n) {
                queue.push_back(n);
            }
        }
    }
    let short = cells.len() < target;
    if short {
        log::warn!("patch '{label}' reached {} of {target} cells", cells.len());
    }
    Ok(PatchRegion {
        label: label.to_string(),
        cells,
        short,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneTerrain {
    pub frame: String,
    pub group_id: usize,
    pub base_terrain: String,
    pub patch_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerrainPlan {
    pub scenes: Vec<SceneTerrain>,
    /// Human-readable notes, e.g. groups that fell back to the default base.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TerrainSettings {
    pub default_base: String,
    pub classifier: KeywordClassifier,
}

impl Default for TerrainSettings {
    fn default() -> Self {
        TerrainSettings {
            default_base: "grass".into(),
            classifier: KeywordClassifier::default(),
        }
    }
}

/// Most frequent label; ties go to the lexicographically smallest.
fn dominant(votes: &BTreeMap<String, usize>) -> Option<String> {
    let mut best: Option<(&String, usize)> = None;
    for (label, n) in votes {
        if best.is_none_or(|(_, b)| *n > b) {
            best = Some((label, *n));
        }
    }
    best.map(|(l, _)| l.clone())
}

/// Groups consecutive frames into locations and assigns base and patch
/// terrain per group. Classifications are keyed by normalized entity name.
pub fn infer_terrain_plan(
    bundle: &StoryBundle,
    classifications: &BTreeMap<String, ClassificationResult>,
    settings: &TerrainSettings,
) -> Result<TerrainPlan, TerrainError> {
    struct FrameEvidence {
        votes: BTreeMap<String, usize>,
        patches: Vec<String>,
    }
    let mut evidence = Vec::new();
    for frame in &bundle.frames {
        let mut ev = FrameEvidence { votes: BTreeMap::new(), patches: Vec::new() };
        for obj in &frame.objects {
            let key = normalize_entity_name(&obj.name)
                .map_err(|_| TerrainError::Unclassified(obj.name.clone()))?;
            let c = classifications
                .get(&key)
                .ok_or_else(|| TerrainError::Unclassified(key.clone()))?;
            let label = c.suggested_terrain.trim().to_lowercase();
            if c.affordance == AffordanceType::Terrain {
                if !label.is_empty() {
                    *ev.votes.entry(label).or_default() += 1;
                }
            } else if settings.classifier.is_patch_candidate(&key) && !label.is_empty() {
                ev.patches.push(label);
            }
        }
        evidence.push(ev);
    }

    // consecutive frames merge unless a scene break or a conflicting dominant terrain
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_votes: BTreeMap<String, usize> = BTreeMap::new();
    for (i, frame) in bundle.frames.iter().enumerate() {
        let frame_dom = dominant(&evidence[i].votes);
        let group_dom = dominant(&group_votes);
        let conflict = matches!((&frame_dom, &group_dom), (Some(a), Some(b)) if a != b);
        if groups.is_empty() || frame.scene_break || conflict {
            groups.push(vec![i]);
            group_votes.clear();
        } else {
            groups.last_mut().expect("non-empty").push(i);
        }
        for (label, n) in &evidence[i].votes {
            *group_votes.entry(label.clone()).or_default() += n;
        }
    }

    let mut scenes: Vec<Option<SceneTerrain>> = vec![None; bundle.frames.len()];
    let mut warnings = Vec::new();
    for (gid, members) in groups.iter().enumerate() {
        let mut votes = BTreeMap::new();
        let mut patches: Vec<String> = Vec::new();
        for &i in members {
            for (label, n) in &evidence[i].votes {
                *votes.entry(label.clone()).or_default() += n;
            }
            for p in &evidence[i].patches {
                if !patches.contains(p) {
                    patches.push(p.clone());
                }
            }
        }
        let base = match dominant(&votes) {
            Some(b) => b,
            None => {
                let w = format!(
                    "no terrain evidence for frame group {gid}; using default base '{}'",
                    settings.default_base
                );
                log::warn!("{w}");
                warnings.push(w);
                settings.default_base.clone()
            }
        };
        for &i in members {
            scenes[i] = Some(SceneTerrain {
                frame: bundle.frames[i].name.clone(),
                group_id: gid,
                base_terrain: base.clone(),
                patch_labels: patches.clone(),
            });
        }
    }
    Ok(TerrainPlan {
        scenes: scenes.into_iter().map(|s| s.expect("every frame grouped")).collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::narrative::{NarrativeObject, PredicateTriple, SceneFrame};
    use proptest::prelude::*;

    /// Independent flood fill over the walkable cells.
    fn flood_fill_oracle(mask: &BaseMask) -> usize {
        let w = mask.width() as i32;
        let h = mask.height() as i32;
        let start = (0..w * h)
            .map(|i| (i % w, i / w))
            .find(|&(x, y)| mask.is_walkable(x, y))
            .unwrap();
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some((x, y)) = stack.pop() {
            for (nx, ny) in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
                if mask.is_walkable(nx, ny) && seen.insert((nx, ny)) {
                    stack.push((nx, ny));
                }
            }
        }
        seen.len()
    }

    #[test]
    fn default_mask_seed_42_is_connected() {
        let m = generate_base_mask(&CAParams::default(), 42).unwrap();
        assert_eq!(flood_fill_oracle(&m), m.walkable_count());
        let f = m.walkable_fraction();
        assert!((0.35..=0.90).contains(&f), "{f}");
        assert_eq!(m.width(), 20);
    }

    #[test]
    fn fully_walkable_start_exhausts_retries() {
        let p = CAParams {
            initial_walkable_prob: 1.0,
            iterations: 0,
            ..CAParams::default()
        };
        assert_eq!(
            generate_base_mask(&p, 1),
            Err(TerrainError::GenerationFailed { retries: 10, last_fraction: 1.0 })
        );
    }

    #[test]
    fn invalid_params() {
        let p = CAParams { width: 4, ..CAParams::default() };
        assert!(matches!(generate_base_mask(&p, 1), Err(TerrainError::InvalidParams(_))));
        let p = CAParams { initial_walkable_prob: 0.0, ..CAParams::default() };
        assert!(matches!(generate_base_mask(&p, 1), Err(TerrainError::InvalidParams(_))));
    }

    #[test]
    fn mask_validation_rejects_split_regions() {
        assert!(BaseMask::from_ascii(&["..#.", "..#.", "####", "####"]).is_err());
        assert!(BaseMask::from_ascii(&["####", "####"]).is_err());
        let m = BaseMask::from_ascii(&["..#", ".##", "..."]).unwrap();
        assert_eq!(m.walkable_count(), 6);
        assert_eq!(m.to_ascii(), vec!["..#", ".##", "..."]);
    }

    /// A 20x20 mask with exactly 240 walkable cells: rows 2..14 fully open.
    fn mask_240() -> BaseMask {
        let rows: Vec<String> = (0..20)
            .map(|y| if (2..14).contains(&y) { ".".repeat(20) } else { "#".repeat(20) })
            .collect();
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        BaseMask::from_ascii(&refs).unwrap()
    }

    #[test]
    fn patch_reaches_target() {
        let m = mask_240();
        assert_eq!(m.walkable_count(), 240);
        let p = insert_patch(&m, "rocky", 0.15, 3).unwrap();
        // ceil(0.15 * 240) = 36
        assert_eq!(p.cells.len(), 36);
        assert!(!p.short);
        assert!(p.cells.iter().all(|&(x, y)| m.is_walkable(x, y)));
    }

    #[test]
    fn patch_on_single_cell_mask() {
        let m = BaseMask::from_ascii(&["#####", "##.##", "#####"]).unwrap();
        let p = insert_patch(&m, "mud", 0.5, 0).unwrap();
        assert_eq!(p.cells, BTreeSet::from([(2, 1)]));
        assert!(!p.short);
        let bad = insert_patch(&m, "mud", 1.0, 0);
        assert_eq!(bad, Err(TerrainError::InvalidFraction(1.0)));
    }

    #[test]
    fn patch_short_when_frontier_exhausted() {
        let m = BaseMask::from_ascii(&["#####", "#...#", "#####"]).unwrap();
        // target ceil(0.9 * 3) = 3, reachable 3
        assert_eq!(insert_patch(&m, "x", 0.9, 0).unwrap().cells.len(), 3);
    }

    fn classified(name: &str, a: AffordanceType, terrain: &str) -> (String, ClassificationResult) {
        (
            name.to_string(),
            ClassificationResult {
                object_name: name.to_string(),
                affordance: a,
                suggested_terrain: terrain.to_string(),
            },
        )
    }

    fn frame(name: &str, brk: bool, objects: &[&str]) -> SceneFrame {
        SceneFrame {
            name: name.into(),
            scene_break: brk,
            triples: vec![PredicateTriple::new(objects[0], "above", objects[0])],
            objects: objects.iter().map(|o| NarrativeObject::named(o)).collect(),
        }
    }

    #[test]
    fn base_is_majority_vote() {
        use AffordanceType::*;
        let bundle = StoryBundle {
            title: "t".into(),
            story_text: "s".into(),
            frames: vec![
                frame("f1", false, &["oak", "pine", "elara"]),
                frame("f2", false, &["birch", "cedar", "dune"]),
            ],
        };
        let cls: BTreeMap<_, _> = [
            classified("oak", Terrain, "forest"),
            classified("pine", Terrain, "forest"),
            classified("birch", Terrain, "forest"),
            classified("cedar", Terrain, "forest"),
            classified("dune", Terrain, "desert"),
            classified("elara", CharacterCreature, "forest"),
        ]
        .into();
        let plan = infer_terrain_plan(&bundle, &cls, &TerrainSettings::default()).unwrap();
        assert_eq!(plan.scenes[0].group_id, plan.scenes[1].group_id);
        assert!(plan.scenes.iter().all(|s| s.base_terrain == "forest"));
        assert!(plan.warnings.is_empty());
    }

    #[test]
    fn default_base_when_no_evidence() {
        let bundle = StoryBundle {
            title: "t".into(),
            story_text: "s".into(),
            frames: vec![frame("f1", false, &["lamp"])],
        };
        let cls: BTreeMap<_, _> =
            [classified("lamp", AffordanceType::EnvironmentalObject, "grass")].into();
        let plan = infer_terrain_plan(&bundle, &cls, &TerrainSettings::default()).unwrap();
        assert_eq!(plan.scenes[0].base_terrain, "grass");
        assert_eq!(plan.warnings.len(), 1);
    }

    #[test]
    fn patches_propagate_across_group() {
        use AffordanceType::*;
        let bundle = StoryBundle {
            title: "t".into(),
            story_text: "s".into(),
            frames: vec![
                frame("f1", false, &["canopy"]),
                frame("f2", false, &["rocky path"]),
                frame("f3", false, &["elara"]),
            ],
        };
        let cls: BTreeMap<_, _> = [
            classified("canopy", Terrain, "forest"),
            classified("rocky path", EnvironmentalObject, "rocky"),
            classified("elara", CharacterCreature, "forest"),
        ]
        .into();
        let plan = infer_terrain_plan(&bundle, &cls, &TerrainSettings::default()).unwrap();
        for s in &plan.scenes {
            assert_eq!(s.group_id, 0);
            assert_eq!(s.patch_labels, vec!["rocky".to_string()]);
        }
    }

    #[test]
    fn scene_break_and_conflict_split_groups() {
        use AffordanceType::*;
        let bundle = StoryBundle {
            title: "t".into(),
            story_text: "s".into(),
            frames: vec![
                frame("f1", false, &["woods"]),
                frame("f2", false, &["sand"]),
                frame("f3", true, &["sand"]),
            ],
        };
        let cls: BTreeMap<_, _> = [
            classified("woods", Terrain, "forest"),
            classified("sand", Terrain, "desert"),
        ]
        .into();
        let plan = infer_terrain_plan(&bundle, &cls, &TerrainSettings::default()).unwrap();
        let ids: Vec<usize> = plan.scenes.iter().map(|s| s.group_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(plan.scenes[1].base_terrain, "desert");

        let missing = infer_terrain_plan(&bundle, &BTreeMap::new(), &TerrainSettings::default());
        assert!(matches!(missing, Err(TerrainError::Unclassified(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masks_are_deterministic_and_connected(seed in any::<u64>()) {
            let p = CAParams::default();
            let a = generate_base_mask(&p, seed).unwrap();
            let b = generate_base_mask(&p, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(flood_fill_oracle(&a), a.walkable_count());
        }

        #[test]
        fn patches_stay_inside_mask(seed in any::<u64>(), frac in 0.01f64..0.99) {
            let m = generate_base_mask(&CAParams::default(), seed).unwrap();
            let p = insert_patch(&m, "p", frac, seed ^ 0xabc).unwrap();
            prop_assert_eq!(&p, &insert_patch(&m, "p", frac, seed ^ 0xabc).unwrap());
            prop_assert!(p.cells.iter().all(|&(x, y)| m.is_walkable(x, y)));
            let blob: Vec<bool> = (0..400).map(|i| p.cells.contains(&(i % 20, i / 20))).collect();
            prop_assert_eq!(components(20, 20, &blob).len(), 1);
        }

        #[test]
        fn grouping_is_contiguous_partition(breaks in prop::collection::vec(any::<bool>(), 1..6),
                                            terrains in prop::collection::vec(0usize..3, 1..6)) {
            let n = breaks.len().min(terrains.len());
            let labels = ["forest", "desert", "cave"];
            let frames: Vec<SceneFrame> = (0..n).map(|i| frame(&format!("f{i}"), breaks[i], &[&format!("t{i}")])).collect();
            let cls: BTreeMap<_, _> = (0..n)
                .map(|i| classified(&format!("t{i}"), AffordanceType::Terrain, labels[terrains[i]]))
                .collect();
            let bundle = StoryBundle { title: "t".into(), story_text: "s".into(), frames };
            let plan = infer_terrain_plan(&bundle, &cls, &TerrainSettings::default()).unwrap();
            prop_assert_eq!(plan.scenes.len(), n);
            prop_assert_eq!(plan.scenes[0].group_id, 0);
            for w in plan.scenes.windows(2) {
                prop_assert!(w[1].group_id == w[0].group_id || w[1].group_id == w[0].group_id + 1);
                if w[1].group_id == w[0].group_id {
                    prop_assert_eq!(&w[0].base_terrain, &w[1].base_terrain);
                }
            }
        }
    }
}
