//! Layered occupancy grid: random initial placement on walkable cells, then a
//! single pass of symbolic refinement driven by the frame's triples.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::narrative::{normalize_entity_name, AffordanceType, PredicateTriple, SceneFrame};
use crate::relations::{apply_offset, check_predicate, CanonicalRelation, Cell, Position, RelationMapTable};
use crate::terrain::{BaseMask, PatchRegion, TerrainError};
use crate::tiles::MatchResult;

#[derive(Debug, Error, PartialEq)]
pub enum PlacementError {
    #[error("layer {layer} has no free walkable cell left for '{entity}'")]
    GridFull { entity: String, layer: u8 },
    #[error("object '{0}' has no affordance")]
    Unclassified(String),
    #[error("bad entity name '{0}'")]
    BadEntity(String),
    #[error("invalid layers document: {0}")]
    InvalidDocument(String),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

/// Object layers are depths 1..=4; depth 0 is terrain and holds no objects.
pub const OBJECT_LAYERS: [u8; 4] = [1, 2, 3, 4];
pub const TOP_LAYER: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub x: i32,
    pub y: i32,
    pub layer: u8,
    pub slot: u32,
    pub affordance: AffordanceType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_id: Option<String>,
}

impl PlacedObject {
    pub fn position(&self) -> Position {
        Position::new(self.x, self.y, self.layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrid {
    pub base: BaseMask,
    pub base_terrain: String,
    pub patches: Vec<PatchRegion>,
    /// Slot ids per object layer (index = depth - 1), row-major, 0 = empty.
    layers: [Vec<u32>; 4],
    object_positions: BTreeMap<String, PlacedObject>,
    /// Terrain-affordance entities; they shape the ground, not the layers.
    pub terrain_entities: Vec<String>,
}

impl SceneGrid {
    pub fn empty(base: BaseMask, base_terrain: &str) -> Self {
        let n = base.width() * base.height();
        SceneGrid {
            base,
            base_terrain: base_terrain.to_string(),
            patches: Vec::new(),
            layers: std::array::from_fn(|_| vec![0; n]),
            object_positions: BTreeMap::new(),
            terrain_entities: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.base.width()
    }

    pub fn height(&self) -> usize {
        self.base.height()
    }

    pub fn objects(&self) -> &BTreeMap<String, PlacedObject> {
        &self.object_positions
    }

    pub fn object(&self, key: &str) -> Option<&PlacedObject> {
        self.object_positions.get(key)
    }

    pub fn layer_matrix(&self, layer: u8) -> &[u32] {
        &self.layers[layer as usize - 1]
    }

    pub fn slot_at(&self, x: i32, y: i32, layer: u8) -> u32 {
        if !self.base.in_bounds(x, y) || !(1..=TOP_LAYER).contains(&layer) {
            return 0;
        }
        self.layers[layer as usize - 1][self.index(x, y)]
    }

    fn index(&self, x: i32, y: i32) -> usize {
        y as usize * self.width() + x as usize
    }

    fn is_free(&self, x: i32, y: i32, layer: u8) -> bool {
        self.slot_at(x, y, layer) == 0
    }

    /// Adds an object; the caller guarantees the cell is walkable and free.
    fn insert(&mut self, key: &str, obj: PlacedObject) {
        let i = self.index(obj.x, obj.y);
        self.layers[obj.layer as usize - 1][i] = obj.slot;
        self.object_positions.insert(key.to_string(), obj);
    }

    fn relocate(&mut self, key: &str, x: i32, y: i32, layer: u8) {
        let (ox, oy, ol, slot) = {
            let o = &self.object_positions[key];
            (o.x, o.y, o.layer, o.slot)
        };
        let old = self.index(ox, oy);
        self.layers[ol as usize - 1][old] = 0;
        let new = self.index(x, y);
        self.layers[layer as usize - 1][new] = slot;
        let o = self.object_positions.get_mut(key).expect("present");
        o.x = x;
        o.y = y;
        o.layer = layer;
    }

    /// Verifies the occupancy invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen_slots = BTreeMap::new();
        for (key, o) in &self.object_positions {
            if !self.base.is_walkable(o.x, o.y) {
                return Err(format!("'{key}' on non-walkable ({}, {})", o.x, o.y));
            }
            if !(1..=TOP_LAYER).contains(&o.layer) {
                return Err(format!("'{key}' in layer {}", o.layer));
            }
            if o.slot == 0 || seen_slots.insert(o.slot, key).is_some() {
                return Err(format!("'{key}' has a bad or duplicate slot {}", o.slot));
            }
            if self.slot_at(o.x, o.y, o.layer) != o.slot {
                return Err(format!("matrix disagrees with position of '{key}'"));
            }
        }
        let nonzero: usize = self.layers.iter().map(|l| l.iter().filter(|s| **s != 0).count()).sum();
        if nonzero != self.object_positions.len() {
            return Err(format!(
                "{nonzero} occupied matrix cells for {} objects",
                self.object_positions.len()
            ));
        }
        Ok(())
    }
}

fn entity_key(raw: &str) -> Result<String, PlacementError> {
    normalize_entity_name(raw).map_err(|_| PlacementError::BadEntity(raw.to_string()))
}

/// Each non-terrain object gets a uniformly random free walkable cell in the
/// layer of its affordance. Objects are visited in frame order; keys are
/// normalized entity names. `matches` supplies tile ids where available.
pub fn initial_place(
    frame: &SceneFrame,
    matches: &BTreeMap<String, MatchResult>,
    mask: &BaseMask,
    base_terrain: &str,
    seed: u64,
) -> Result<SceneGrid, PlacementError> {
    let mut grid = SceneGrid::empty(mask.clone(), base_terrain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walkable = mask.walkable_cells();
    let mut next_slot = 1u32;
    for obj in &frame.objects {
        let key = entity_key(&obj.name)?;
        let affordance = obj.affordance.ok_or_else(|| PlacementError::Unclassified(key.clone()))?;
        if affordance == AffordanceType::Terrain {
            if !grid.terrain_entities.contains(&key) {
                grid.terrain_entities.push(key);
            }
            continue;
        }
        if grid.object_positions.contains_key(&key) {
            continue;
        }
        let layer = affordance.depth();
        let free: Vec<(i32, i32)> = walkable
            .iter()
            .copied()
            .filter(|&(x, y)| grid.is_free(x, y, layer))
            .collect();
        if free.is_empty() {
            return Err(PlacementError::GridFull { entity: key, layer });
        }
        let (x, y) = free[rng.random_range(0..free.len())];
        let placed = PlacedObject {
            x,
            y,
            layer,
            slot: next_slot,
            affordance,
            tile_id: matches.get(&key).map(|m| m.tile_id.clone()),
        };
        next_slot += 1;
        grid.insert(&key, placed);
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementAction {
    /// The subject stayed where it was (already satisfying, or already on the target cell).
    Placed,
    Moved,
    /// The subject had no valid cell, so the anchor was moved instead.
    MovedAnchor,
    SkippedOob,
    SkippedBlocked,
    SkippedOverlap,
    /// Every otherwise-valid cell would break a predicate that currently holds.
    SkippedConflict,
    /// OnTopOf anchor already sits in the top layer.
    SkippedLayer,
    /// The relation phrase has no canonical mapping.
    SkippedRelation,
    EntityMissing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    /// Exact offset cell only, as in the reference algorithm.
    Literal,
    /// Exact offset cell first, then the nearest cells that satisfy the
    /// triple; a move is committed only if no currently satisfied triple of
    /// the frame breaks. When the subject has nowhere to go, the anchor is
    /// tried under the same rule (not for OnTopOf).
    #[default]
    Repair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub triple: PredicateTriple,
    pub canonical: Option<CanonicalRelation>,
    #[serde(default)]
    pub reversed: bool,
    pub satisfied_before: bool,
    pub satisfied_after: bool,
    pub action: PlacementAction,
    /// Layer the subject was promoted to by an OnTopOf placement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promoted_layer: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub frame: String,
    pub records: Vec<TripleRecord>,
    pub initial_satisfied: usize,
    pub final_satisfied: usize,
    /// Set when the frame has no triples and therefore scores zero.
    #[serde(default)]
    pub empty_frame: bool,
}

/// A triple resolved against the table: subject moves relative to anchor.
#[derive(Debug, Clone)]
struct Resolved {
    subject: String,
    anchor: String,
    relation: CanonicalRelation,
    reversed: bool,
}

fn resolve(triple: &PredicateTriple, table: &RelationMapTable) -> Option<Resolved> {
    let mapping = table.lookup(&triple.relation)?;
    let s = normalize_entity_name(&triple.subject).ok()?;
    let o = normalize_entity_name(&triple.object).ok()?;
    let (subject, anchor) = if mapping.reversed { (o, s) } else { (s, o) };
    Some(Resolved {
        subject,
        anchor,
        relation: mapping.relation,
        reversed: mapping.reversed,
    })
}

fn holds(grid: &SceneGrid, r: &Resolved) -> bool {
    match (grid.object(&r.subject), grid.object(&r.anchor)) {
        (Some(a), Some(b)) => check_predicate(a.position(), b.position(), r.relation),
        _ => false,
    }
}

/// Fraction of triples whose entities are placed and satisfy the checker.
/// Unmapped relations and missing entities count as unsatisfied; a frame
/// without triples scores 0.
pub fn satisfaction_rate(grid: &SceneGrid, frame: &SceneFrame, table: &RelationMapTable) -> f64 {
    let (sat, total) = satisfied_counts(grid, frame, table);
    if total == 0 {
        0.0
    } else {
        sat as f64 / total as f64
    }
}

/// (satisfied, total) over the frame's triples.
pub fn satisfied_counts(grid: &SceneGrid, frame: &SceneFrame, table: &RelationMapTable) -> (usize, usize) {
    let sat = frame
        .triples
        .iter()
        .filter(|t| resolve(t, table).is_some_and(|r| holds(grid, &r)))
        .count();
    (sat, frame.triples.len())
}

/// Cells ordered by Manhattan distance to `target`, ties by row then column.
fn cells_by_distance(mask: &BaseMask, target: Cell) -> Vec<(i32, i32)> {
    let mut cells = mask.walkable_cells();
    cells.sort_by_key(|&(x, y)| ((x - target.x).abs() + (y - target.y).abs(), y, x));
    cells
}

/// Runs the triples of `frame` once, in order, moving each subject relative
/// to its anchor.
pub fn apply_spatial_relations(
    mut grid: SceneGrid,
    frame: &SceneFrame,
    table: &RelationMapTable,
    mode: RefinementMode,
) -> (SceneGrid, PlacementReport) {
    let resolved: Vec<Option<Resolved>> = frame.triples.iter().map(|t| resolve(t, table)).collect();
    let initial_satisfied = resolved.iter().flatten().filter(|r| holds(&grid, r)).count();
    let mut records = Vec::with_capacity(frame.triples.len());

    for (i, triple) in frame.triples.iter().enumerate() {
        let Some(r) = &resolved[i] else {
            log::warn!("no canonical relation for '{}'", triple.relation);
            records.push(TripleRecord {
                triple: triple.clone(),
                canonical: None,
                reversed: false,
                satisfied_before: false,
                satisfied_after: false,
                action: PlacementAction::SkippedRelation,
                promoted_layer: None,
            });
            continue;
        };
        let mut record = TripleRecord {
            triple: triple.clone(),
            canonical: Some(r.relation),
            reversed: r.reversed,
            satisfied_before: false,
            satisfied_after: false,
            action: PlacementAction::EntityMissing,
            promoted_layer: None,
        };
        let (Some(a), Some(b)) = (grid.object(&r.subject).cloned(), grid.object(&r.anchor).cloned()) else {
            records.push(record);
            continue;
        };
        if r.subject == r.anchor {
            // self-relations can never hold; leave the object alone
            record.action = PlacementAction::SkippedConflict;
            records.push(record);
            continue;
        }
        record.satisfied_before = holds(&grid, r);

        let action = match mode {
            RefinementMode::Literal => refine_literal(&mut grid, r, &a, &b, &mut record.promoted_layer),
            RefinementMode::Repair => {
                if record.satisfied_before {
                    PlacementAction::Placed
                } else {
                    refine_repair(&mut grid, r, &resolved, &a, &b, &mut record.promoted_layer)
                }
            }
        };
        record.action = action;
        record.satisfied_after = holds(&grid, r);
        records.push(record);
    }

    let final_satisfied = resolved.iter().flatten().filter(|r| holds(&grid, r)).count();
    let report = PlacementReport {
        frame: frame.name.clone(),
        records,
        initial_satisfied,
        final_satisfied,
        empty_frame: frame.triples.is_empty(),
    };
    (grid, report)
}

/// Target layer for an OnTopOf placement: the subject's own layer if it is
/// already above the anchor, else one above the anchor.
fn on_top_layer(a: &PlacedObject, b: &PlacedObject) -> Option<u8> {
    if a.affordance.depth() > b.layer {
        Some(a.affordance.depth())
    } else if b.layer < TOP_LAYER {
        Some(b.layer + 1)
    } else {
        None
    }
}

fn refine_literal(
    grid: &mut SceneGrid,
    r: &Resolved,
    a: &PlacedObject,
    b: &PlacedObject,
    promoted: &mut Option<u8>,
) -> PlacementAction {
    let target = apply_offset(b.position().cell(), r.relation);
    let (x, y) = (target.cell.x, target.cell.y);
    let layer = if target.layer_shift {
        match on_top_layer(a, b) {
            Some(l) => l,
            None => return PlacementAction::SkippedLayer,
        }
    } else {
        a.layer
    };
    if (a.x, a.y, a.layer) == (x, y, layer) {
        return PlacementAction::Placed;
    }
    if !grid.base.in_bounds(x, y) {
        return PlacementAction::SkippedOob;
    }
    if !grid.base.is_walkable(x, y) {
        return PlacementAction::SkippedBlocked;
    }
    if !grid.is_free(x, y, layer) {
        return PlacementAction::SkippedOverlap;
    }
    if layer != a.affordance.depth() {
        *promoted = Some(layer);
    }
    grid.relocate(&r.subject, x, y, layer);
    PlacementAction::Moved
}

fn refine_repair(
    grid: &mut SceneGrid,
    r: &Resolved,
    all: &[Option<Resolved>],
    a: &PlacedObject,
    b: &PlacedObject,
    promoted: &mut Option<u8>,
) -> PlacementAction {
    let target = apply_offset(b.position().cell(), r.relation);
    let exact = target.cell;
    // triples touching the subject that hold right now must keep holding
    let protected: Vec<&Resolved> = all
        .iter()
        .flatten()
        .filter(|o| (o.subject == r.subject || o.anchor == r.subject) && holds(grid, o))
        .collect();
    let try_cell = |grid: &mut SceneGrid, x: i32, y: i32, layer: u8| -> bool {
        let (ox, oy, ol) = (a.x, a.y, a.layer);
        grid.relocate(&r.subject, x, y, layer);
        if holds(grid, r) && protected.iter().all(|p| holds(grid, p)) {
            true
        } else {
            grid.relocate(&r.subject, ox, oy, ol);
            false
        }
    };

    if target.layer_shift {
        let Some(layer) = on_top_layer(a, b) else {
            return PlacementAction::SkippedLayer;
        };
        if !grid.is_free(exact.x, exact.y, layer) {
            return PlacementAction::SkippedOverlap;
        }
        if try_cell(grid, exact.x, exact.y, layer) {
            if layer != a.affordance.depth() {
                *promoted = Some(layer);
            }
            return PlacementAction::Moved;
        }
        return PlacementAction::SkippedConflict;
    }

    let exact_failure = if !grid.base.in_bounds(exact.x, exact.y) {
        Some(PlacementAction::SkippedOob)
    } else if !grid.base.is_walkable(exact.x, exact.y) {
        Some(PlacementAction::SkippedBlocked)
    } else if !grid.is_free(exact.x, exact.y, a.layer) && (exact.x, exact.y) != (a.x, a.y) {
        Some(PlacementAction::SkippedOverlap)
    } else {
        None
    };
    for (x, y) in cells_by_distance(&grid.base, exact) {
        if (x, y) == (a.x, a.y) || !grid.is_free(x, y, a.layer) {
            continue;
        }
        if try_cell(grid, x, y, a.layer) {
            return PlacementAction::Moved;
        }
    }
    if move_anchor(grid, r, all, b) {
        return PlacementAction::MovedAnchor;
    }
    exact_failure.unwrap_or(PlacementAction::SkippedConflict)
}

/// Nearest cell for the anchor (from where it stands) that satisfies the
/// triple without breaking a currently satisfied predicate.
fn move_anchor(grid: &mut SceneGrid, r: &Resolved, all: &[Option<Resolved>], b: &PlacedObject) -> bool {
    let protected: Vec<&Resolved> = all
        .iter()
        .flatten()
        .filter(|o| (o.subject == r.anchor || o.anchor == r.anchor) && holds(grid, o))
        .collect();
    for (x, y) in cells_by_distance(&grid.base, b.position().cell()) {
        if (x, y) == (b.x, b.y) || !grid.is_free(x, y, b.layer) {
            continue;
        }
        grid.relocate(&r.anchor, x, y, b.layer);
        if holds(grid, r) && protected.iter().all(|p| holds(grid, p)) {
            return true;
        }
        grid.relocate(&r.anchor, b.x, b.y, b.layer);
    }
    false
}

/// Serializable snapshot of a grid: dims, mask bit-rows, patches and one
/// sparse list per object layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayersDocument {
    pub width: usize,
    pub height: usize,
    pub mask_seed: u64,
    pub mask_params: crate::terrain::CAParams,
    pub base_terrain: String,
    /// `.` walkable, `#` blocked.
    pub base_mask: Vec<String>,
    pub patches: Vec<PatchRegion>,
    pub terrain_entities: Vec<String>,
    pub layers: Vec<LayerEntries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntries {
    pub layer: u8,
    pub name: String,
    pub objects: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub entity: String,
    pub slot: u32,
    pub affordance: AffordanceType,
    pub tile_id: Option<String>,
    pub x: i32,
    pub y: i32,
}

pub fn layer_name(layer: u8) -> &'static str {
    match layer {
        1 => "environment",
        2 => "interactive",
        3 => "item",
        4 => "character",
        _ => "terrain",
    }
}

impl LayersDocument {
    pub fn from_grid(grid: &SceneGrid) -> Self {
        let layers = OBJECT_LAYERS
            .iter()
            .map(|&layer| {
                let mut objects: Vec<LayerEntry> = grid
                    .objects()
                    .iter()
                    .filter(|(_, o)| o.layer == layer)
                    .map(|(k, o)| LayerEntry {
                        entity: k.clone(),
                        slot: o.slot,
                        affordance: o.affordance,
                        tile_id: o.tile_id.clone(),
                        x: o.x,
                        y: o.y,
                    })
                    .collect();
                objects.sort_by_key(|e| e.slot);
                LayerEntries {
                    layer,
                    name: layer_name(layer).to_string(),
                    objects,
                }
            })
            .collect();
        LayersDocument {
            width: grid.width(),
            height: grid.height(),
            mask_seed: grid.base.seed,
            mask_params: grid.base.params.clone(),
            base_terrain: grid.base_terrain.clone(),
            base_mask: grid.base.to_ascii(),
            patches: grid.patches.clone(),
            terrain_entities: grid.terrain_entities.clone(),
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layers document serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, PlacementError> {
        serde_json::from_str(text).map_err(|e| PlacementError::InvalidDocument(e.to_string()))
    }

    pub fn to_grid(&self) -> Result<SceneGrid, PlacementError> {
        let rows: Vec<&str> = self.base_mask.iter().map(String::as_str).collect();
        if rows.len() != self.height || rows.iter().any(|r| r.len() != self.width) {
            return Err(PlacementError::InvalidDocument("mask does not match dimensions".into()));
        }
        let cells = rows.iter().flat_map(|r| r.chars().map(|c| c == '.')).collect();
        let mask = BaseMask::from_cells(self.width, self.height, cells, self.mask_seed, self.mask_params.clone())?;
        let mut grid = SceneGrid::empty(mask, &self.base_terrain);
        grid.patches = self.patches.clone();
        grid.terrain_entities = self.terrain_entities.clone();
        for l in &self.layers {
            if !(1..=TOP_LAYER).contains(&l.layer) {
                return Err(PlacementError::InvalidDocument(format!("layer {}", l.layer)));
            }
            for e in &l.objects {
                if !grid.base.is_walkable(e.x, e.y) || !grid.is_free(e.x, e.y, l.layer) {
                    return Err(PlacementError::InvalidDocument(format!(
                        "'{}' at ({}, {}) is blocked or overlapping",
                        e.entity, e.x, e.y
                    )));
                }
                grid.insert(
                    &e.entity,
                    PlacedObject {
                        x: e.x,
                        y: e.y,
                        layer: l.layer,
                        slot: e.slot,
                        affordance: e.affordance,
                        tile_id: e.tile_id.clone(),
                    },
                );
            }
        }
        grid.check_invariants().map_err(PlacementError::InvalidDocument)?;
        Ok(grid)
    }
}
