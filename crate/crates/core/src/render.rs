//! Layered compositing of a scene grid into a PNG, plus the on-disk layer
//! bundle (`frame_<k>.layers`, `frame_<k>.png`, `frame_<k>.meta.json`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageEncoder, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::placement::{LayersDocument, PlacementError, SceneGrid, OBJECT_LAYERS};
use crate::tiles::TileRecord;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error("i/o failure at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("png encoding failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Layers(#[from] PlacementError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RenderError {
    RenderError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_px: u32,
    pub object_scale: f64,
    pub base_walkable_color: Rgb,
    pub base_blocked_color: Rgb,
    pub patch_color: Rgb,
    /// Blend weight of the patch tint over the walkable color.
    pub patch_alpha: f64,
    pub placeholder_palette: Vec<Rgb>,
    /// Optional walkable color per base terrain label.
    pub terrain_colors: BTreeMap<String, Rgb>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_px: 32,
            object_scale: 1.5,
            base_walkable_color: [124, 176, 90],
            base_blocked_color: [52, 56, 64],
            patch_color: [168, 132, 84],
            patch_alpha: 0.4,
            placeholder_palette: vec![
                [230, 25, 75],
                [60, 180, 75],
                [255, 225, 25],
                [0, 130, 200],
                [245, 130, 48],
                [145, 30, 180],
                [70, 240, 240],
                [240, 50, 230],
                [250, 190, 212],
                [0, 128, 128],
            ],
            terrain_colors: BTreeMap::from([
                ("grass".to_string(), [124, 176, 90]),
                ("forest".to_string(), [66, 122, 58]),
                ("desert".to_string(), [222, 196, 132]),
                ("cave".to_string(), [98, 90, 84]),
                ("water".to_string(), [64, 120, 200]),
                ("city".to_string(), [150, 150, 156]),
                ("snow".to_string(), [236, 240, 246]),
            ]),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.tile_px < 8 {
            return Err(RenderError::InvalidConfig(format!("tile_px {} < 8", self.tile_px)));
        }
        if !(self.object_scale > 0.0 && self.object_scale.is_finite()) {
            return Err(RenderError::InvalidConfig(format!("object_scale {}", self.object_scale)));
        }
        if !(0.0..=1.0).contains(&self.patch_alpha) {
            return Err(RenderError::InvalidConfig(format!("patch_alpha {}", self.patch_alpha)));
        }
        if self.placeholder_palette.is_empty() {
            return Err(RenderError::InvalidConfig("empty placeholder palette".into()));
        }
        Ok(())
    }

    /// Edge length of a drawn object, in pixels.
    pub fn sprite_px(&self) -> u32 {
        ((self.tile_px as f64 * self.object_scale).round() as u32).max(1)
    }

    /// Deterministic placeholder color for an entity.
    pub fn placeholder_color(&self, entity: &str) -> Rgb {
        let digest = Sha256::digest(entity.as_bytes());
        let n = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        self.placeholder_palette[(n % self.placeholder_palette.len() as u64) as usize]
    }
}

/// tile id → decoded sprite.
#[derive(Debug, Clone, Default)]
pub struct SpriteTable {
    sprites: BTreeMap<String, RgbaImage>,
}

impl SpriteTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tile_id: &str, image: RgbaImage) {
        self.sprites.insert(tile_id.to_string(), image);
    }

    pub fn get(&self, tile_id: &str) -> Option<&RgbaImage> {
        self.sprites.get(tile_id)
    }

    pub fn len(&self) -> usize {
        self.sprites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sprites.is_empty()
    }

    /// Loads every record's `sprite_path` relative to `dir`. Records without
    /// a path or whose file is missing/undecodable are skipped; their ids
    /// are returned so callers can warn.
    pub fn load(dir: &Path, records: &[TileRecord]) -> (Self, Vec<String>) {
        let mut table = SpriteTable::new();
        let mut missing = Vec::new();
        for r in records {
            let Some(rel) = &r.sprite_path else { continue };
            match image::open(dir.join(rel)) {
                Ok(img) => table.insert(&r.id, img.to_rgba8()),
                Err(e) => {
                    log::warn!("sprite for '{}' unavailable: {e}", r.id);
                    missing.push(r.id.clone());
                }
            }
        }
        (table, missing)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RenderStats {
    /// Entities drawn as placeholder squares.
    pub placeholders: Vec<String>,
}

fn blend(under: Rgb, over: Rgb, alpha: f64) -> Rgb {
    std::array::from_fn(|i| (under[i] as f64 * (1.0 - alpha) + over[i] as f64 * alpha).round() as u8)
}

fn fill_cell(canvas: &mut RgbaImage, x0: i64, y0: i64, size: u32, color: Rgb) {
    let (w, h) = (canvas.width() as i64, canvas.height() as i64);
    for y in y0.max(0)..(y0 + size as i64).min(h) {
        for x in x0.max(0)..(x0 + size as i64).min(w) {
            canvas.put_pixel(x as u32, y as u32, Rgba([color[0], color[1], color[2], 255]));
        }
    }
}

/// Source-over compositing with clipping at the canvas edge.
fn draw_sprite(canvas: &mut RgbaImage, sprite: &RgbaImage, x0: i64, y0: i64) {
    let (w, h) = (canvas.width() as i64, canvas.height() as i64);
    for (sx, sy, px) in sprite.enumerate_pixels() {
        let (x, y) = (x0 + sx as i64, y0 + sy as i64);
        if x < 0 || y < 0 || x >= w || y >= h {
            continue;
        }
        let a = px[3] as u32;
        if a == 0 {
            continue;
        }
        let dst = canvas.get_pixel_mut(x as u32, y as u32);
        for c in 0..3 {
            dst[c] = ((px[c] as u32 * a + dst[c] as u32 * (255 - a) + 127) / 255) as u8;
        }
        dst[3] = 255;
    }
}

/// Base mask, then patch tint, then object layers from environment up to
/// character. Objects are drawn `object_scale` times the tile size and
/// centered on their cell.
pub fn render_scene(grid: &SceneGrid, sprites: &SpriteTable, cfg: &RenderConfig) -> Result<(RgbaImage, RenderStats), RenderError> {
    cfg.validate()?;
    let t = cfg.tile_px;
    let mut canvas = RgbaImage::new(grid.width() as u32 * t, grid.height() as u32 * t);
    let walk = *cfg.terrain_colors.get(&grid.base_terrain).unwrap_or(&cfg.base_walkable_color);
    for y in 0..grid.height() as i32 {
        for x in 0..grid.width() as i32 {
            let c = if grid.base.is_walkable(x, y) { walk } else { cfg.base_blocked_color };
            fill_cell(&mut canvas, (x as u32 * t) as i64, (y as u32 * t) as i64, t, c);
        }
    }
    let tint = blend(walk, cfg.patch_color, cfg.patch_alpha);
    for patch in &grid.patches {
        for &(x, y) in &patch.cells {
            fill_cell(&mut canvas, (x as u32 * t) as i64, (y as u32 * t) as i64, t, tint);
        }
    }

    let size = cfg.sprite_px();
    let offset = (t as i64 - size as i64) / 2;
    let mut resized: BTreeMap<&str, RgbaImage> = BTreeMap::new();
    let mut stats = RenderStats::default();
    for layer in OBJECT_LAYERS {
        // slot order within a layer keeps drawing deterministic
        let mut objs: Vec<(&String, &crate::placement::PlacedObject)> =
            grid.objects().iter().filter(|(_, o)| o.layer == layer).collect();
        objs.sort_by_key(|(_, o)| o.slot);
        for (entity, o) in objs {
            let x0 = o.x as i64 * t as i64 + offset;
            let y0 = o.y as i64 * t as i64 + offset;
            let sprite = o.tile_id.as_deref().and_then(|id| sprites.get(id).map(|s| (id, s)));
            match sprite {
                Some((id, img)) => {
                    let scaled = resized
                        .entry(id)
                        .or_insert_with(|| imageops::resize(img, size, size, FilterType::Nearest));
                    draw_sprite(&mut canvas, scaled, x0, y0);
                }
                None => {
                    fill_cell(&mut canvas, x0, y0, size, cfg.placeholder_color(entity));
                    stats.placeholders.push(entity.clone());
                }
            }
        }
    }
    if !stats.placeholders.is_empty() {
        log::debug!("{} objects drawn as placeholders", stats.placeholders.len());
    }
    Ok((canvas, stats))
}

/// PNG bytes with fixed encoder settings.
pub fn encode_png(image: &RgbaImage) -> Result<Vec<u8>, RenderError> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, PngFilter::Adaptive)
        .write_image(image.as_raw(), image.width(), image.height(), ExtendedColorType::Rgba8)
        .map_err(|e| RenderError::Encode(e.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame: String,
    pub index: usize,
    pub width_px: u32,
    pub height_px: u32,
    pub tile_px: u32,
    pub placed_objects: usize,
    pub nonzero_cells: usize,
    pub placeholders: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundlePaths {
    pub layers: PathBuf,
    pub png: PathBuf,
    pub meta: PathBuf,
}

impl BundlePaths {
    /// `frame_<index>.*` under `dir`; indices are 1-based.
    pub fn new(dir: &Path, index: usize) -> Self {
        BundlePaths {
            layers: dir.join(format!("frame_{index}.layers")),
            png: dir.join(format!("frame_{index}.png")),
            meta: dir.join(format!("frame_{index}.meta.json")),
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RenderError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Renders `grid` and writes the layers document, PNG and metadata.
pub fn export_layer_bundle(
    grid: &SceneGrid,
    frame_name: &str,
    index: usize,
    sprites: &SpriteTable,
    cfg: &RenderConfig,
    dir: &Path,
) -> Result<(BundlePaths, FrameMeta), RenderError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let paths = BundlePaths::new(dir, index);
    let (image, stats) = render_scene(grid, sprites, cfg)?;
    write(&paths.layers, LayersDocument::from_grid(grid).to_json().as_bytes())?;
    write(&paths.png, &encode_png(&image)?)?;
    let nonzero_cells = OBJECT_LAYERS
        .iter()
        .map(|&l| grid.layer_matrix(l).iter().filter(|s| **s != 0).count())
        .sum();
    let meta = FrameMeta {
        frame: frame_name.to_string(),
        index,
        width_px: image.width(),
        height_px: image.height(),
        tile_px: cfg.tile_px,
        placed_objects: grid.objects().len(),
        nonzero_cells,
        placeholders: stats.placeholders,
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write(&paths.meta, text.as_bytes())?;
    Ok((paths, meta))
}

/// Reads a `frame_<k>.layers` document back into a grid.
pub fn import_layers(path: &Path) -> Result<SceneGrid, RenderError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(LayersDocument::from_json(&text)?.to_grid()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::teaser_frame;
    use crate::narrative::{AffordanceType, NarrativeObject, PredicateTriple, SceneFrame};
    use crate::placement::{apply_spatial_relations, initial_place, RefinementMode};
    use crate::relations::RelationMapTable;
    use crate::terrain::{generate_base_mask, insert_patch, BaseMask, CAParams};
    use crate::tiles::MatchResult;

    fn px(img: &RgbaImage, x: u32, y: u32) -> Rgb {
        let p = img.get_pixel(x, y);
        [p[0], p[1], p[2]]
    }

    fn matched(id: &str) -> MatchResult {
        MatchResult { tile_id: id.into(), cosine: 1.0, boosted_score: 1.0, affordance_matched: true }
    }

    #[test]
    fn canvas_dimensions() {
        let grid = SceneGrid::empty(BaseMask::open(20, 20), "grass");
        let (img, _) = render_scene(&grid, &SpriteTable::new(), &RenderConfig::default()).unwrap();
        assert_eq!(img.dimensions(), (640, 640));
        assert_eq!(RenderConfig::default().sprite_px(), 48);
    }

    #[test]
    fn bad_config_rejected() {
        let grid = SceneGrid::empty(BaseMask::open(8, 8), "grass");
        let cfg = RenderConfig { tile_px: 4, ..RenderConfig::default() };
        assert!(render_scene(&grid, &SpriteTable::new(), &cfg).is_err());
        let cfg = RenderConfig { object_scale: 0.0, ..RenderConfig::default() };
        assert!(render_scene(&grid, &SpriteTable::new(), &cfg).is_err());
    }

    /// Knight stacked on a chest: the character is composited last.
    fn stacked() -> (SceneGrid, SceneFrame) {
        let f = SceneFrame {
            name: "stack".into(),
            scene_break: false,
            triples: vec![PredicateTriple::new("knight", "on top of", "chest")],
            objects: vec![
                NarrativeObject { name: "chest".into(), affordance: Some(AffordanceType::InteractiveObject), suggested_terrain: None },
                NarrativeObject { name: "knight".into(), affordance: Some(AffordanceType::CharacterCreature), suggested_terrain: None },
            ],
        };
        let matches = BTreeMap::from([("chest".to_string(), matched("i-chest")), ("knight".to_string(), matched("c-hero"))]);
        let g = initial_place(&f, &matches, &BaseMask::open(10, 10), "grass", 4).unwrap();
        let (g, _) = apply_spatial_relations(g, &f, &RelationMapTable::builtin(), RefinementMode::Repair);
        (g, f)
    }

    #[test]
    fn character_drawn_over_interactive() {
        let (g, _) = stacked();
        let (k, c) = (g.object("knight").unwrap(), g.object("chest").unwrap());
        assert_eq!((k.x, k.y), (c.x, c.y));
        let mut sprites = SpriteTable::new();
        sprites.insert("i-chest", RgbaImage::from_pixel(16, 16, Rgba([200, 0, 0, 255])));
        sprites.insert("c-hero", RgbaImage::from_pixel(16, 16, Rgba([0, 0, 200, 255])));
        let (img, stats) = render_scene(&g, &sprites, &RenderConfig::default()).unwrap();
        assert!(stats.placeholders.is_empty());
        assert_eq!(px(&img, k.x as u32 * 32 + 16, k.y as u32 * 32 + 16), [0, 0, 200]);
    }

    #[test]
    fn scaled_sprite_overhangs_eight_pixels() {
        let f = SceneFrame {
            name: "one".into(),
            scene_break: false,
            triples: vec![],
            objects: vec![NarrativeObject { name: "rock".into(), affordance: Some(AffordanceType::EnvironmentalObject), suggested_terrain: None }],
        };
        let g = initial_place(&f, &BTreeMap::from([("rock".to_string(), matched("e-rock"))]), &BaseMask::open(12, 12), "grass", 0).unwrap();
        let o = g.object("rock").unwrap().clone();
        let mut sprites = SpriteTable::new();
        sprites.insert("e-rock", RgbaImage::from_pixel(32, 32, Rgba([9, 9, 9, 255])));
        let (img, _) = render_scene(&g, &sprites, &RenderConfig::default()).unwrap();
        let (cx, cy) = (o.x as i64 * 32, o.y as i64 * 32);
        // the 48px sprite spans [cell-8, cell+40)
        for (dx, inside) in [(-9, false), (-8, true), (39, true), (40, false)] {
            let x = cx + dx;
            if x < 0 || x >= img.width() as i64 {
                continue;
            }
            assert_eq!(px(&img, x as u32, (cy + 16) as u32) == [9, 9, 9], inside, "dx {dx}");
        }
    }

    #[test]
    fn pixel_ownership_and_determinism() {
        let mask = generate_base_mask(&CAParams::default(), 8).unwrap();
        let f = teaser_frame();
        let mut g = initial_place(&f, &BTreeMap::new(), &mask, "grass", 8).unwrap();
        g.patches.push(insert_patch(&mask, "rocky", 0.15, 8).unwrap());
        let cfg = RenderConfig::default();
        let (img, stats) = render_scene(&g, &SpriteTable::new(), &cfg).unwrap();
        assert_eq!(stats.placeholders.len(), 5);
        for (entity, o) in g.objects() {
            let alone = OBJECT_LAYERS.iter().filter(|&&l| g.slot_at(o.x, o.y, l) != 0).count() == 1;
            if alone {
                assert_eq!(px(&img, o.x as u32 * 32 + 16, o.y as u32 * 32 + 16), cfg.placeholder_color(entity));
            }
        }
        assert_eq!(encode_png(&img).unwrap(), encode_png(&render_scene(&g, &SpriteTable::new(), &cfg).unwrap().0).unwrap());
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (g, f) = stacked();
        let (paths, meta) = export_layer_bundle(&g, &f.name, 1, &SpriteTable::new(), &RenderConfig::default(), dir.path()).unwrap();
        assert_eq!(import_layers(&paths.layers).unwrap(), g);
        assert_eq!(meta.nonzero_cells, meta.placed_objects);
        assert_eq!(meta.placed_objects, 2);
        let decoded = image::open(&paths.png).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (320, 320));

        let empty = SceneGrid::empty(BaseMask::open(8, 8), "grass");
        let (paths, meta) = export_layer_bundle(&empty, "empty", 2, &SpriteTable::new(), &RenderConfig::default(), dir.path()).unwrap();
        assert_eq!(meta.nonzero_cells, 0);
        assert_eq!(import_layers(&paths.layers).unwrap(), empty);
    }

    #[test]
    fn sprite_table_loads_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        RgbaImage::from_pixel(4, 4, Rgba([1, 2, 3, 255])).save(dir.path().join("tree.png")).unwrap();
        let mut rec: Vec<TileRecord> = crate::fixtures::story_tileset().into_iter().take(2).collect();
        rec[0].sprite_path = Some("tree.png".into());
        rec[1].sprite_path = Some("absent.png".into());
        let (table, missing) = SpriteTable::load(dir.path(), &rec);
        assert_eq!(table.len(), 1);
        assert_eq!(missing, vec![rec[1].id.clone()]);
    }
}
