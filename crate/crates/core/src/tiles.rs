//! Embedding-based tile retrieval with an additive affordance boost.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::narrative::{AffordanceType, NarrativeObject};

#[derive(Debug, Error)]
pub enum TileError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("tile '{id}': embedding has {got} dimensions, index uses {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("tile '{id}': embedding has zero norm")]
    ZeroEmbedding { id: String },
    #[error("duplicate tile id '{0}'")]
    DuplicateId(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be positive")]
    InvalidK,
    #[error("query provider '{query}' differs from index provider '{index}'")]
    ProviderMismatch { query: String, index: String },
    #[error("tileset line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Text embedder producing unit vectors of a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, TileError>;
}

/// Embeds and L2-normalizes `text`.
pub fn embed_text(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f32>, TileError> {
    if text.trim().is_empty() {
        return Err(TileError::EmptyText);
    }
    let v = provider.embed_raw(text)?;
    normalize(v).ok_or(TileError::EmptyText)
}

fn normalize(v: Vec<f32>) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| ((*x as f64) / norm) as f32).collect())
}

/// Signed feature hashing over lowercase alphanumeric tokens.
#[derive(Debug, Clone)]
pub struct HashingProvider {
    dimension: usize,
    id: String,
}

pub const DEFAULT_DIMENSION: usize = 384;

impl HashingProvider {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        HashingProvider {
            dimension,
            id: format!("hashing-{dimension}"),
        }
    }
}

impl Default for HashingProvider {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

fn digest_u64(prefix: &[u8], token: &str) -> u64 {
    let d = Sha256::new().chain_update(prefix).chain_update(token.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl EmbeddingProvider for HashingProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, TileError> {
        let mut v = vec![0f32; self.dimension];
        let lower = text.to_lowercase();
        let mut any = false;
        for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            any = true;
            let bucket = (digest_u64(b"bucket:", tok) % self.dimension as u64) as usize;
            let sign = if digest_u64(b"sign:", tok) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        if !any {
            return Err(TileError::EmptyText);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub id: String,
    pub name: String,
    #[serde(rename = "group")]
    pub group_label: String,
    pub supercategory: String,
    pub affordance: AffordanceType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sprite_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl TileRecord {
    /// "name. group. supercategory. affordance"
    pub fn embedding_text(&self) -> String {
        [
            self.name.as_str(),
            self.group_label.as_str(),
            self.supercategory.as_str(),
            self.affordance.label(),
        ]
        .join(". ")
    }
}

/// "name. affordance" when the affordance is known, else the name.
pub fn object_query_text(object: &NarrativeObject) -> String {
    match object.affordance {
        Some(a) => format!("{}. {}", object.name, a.label()),
        None => object.name.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tile_id: String,
    pub cosine: f64,
    pub boosted_score: f64,
    pub affordance_matched: bool,
}

/// Immutable after build; records are kept sorted by id.
#[derive(Debug, Clone)]
pub struct TileIndex {
    records: Vec<TileRecord>,
    dimension: usize,
    provider_id: String,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

pub fn build_index<I>(tiles: I, provider: &dyn EmbeddingProvider) -> Result<TileIndex, TileError>
where
    I: IntoIterator<Item = TileRecord>,
{
    let dim = provider.dimension();
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for mut t in tiles {
        if !seen.insert(t.id.clone()) {
            return Err(TileError::DuplicateId(t.id));
        }
        let emb = match t.embedding.take() {
            Some(e) => {
                if e.len() != dim {
                    return Err(TileError::DimensionMismatch {
                        id: t.id,
                        expected: dim,
                        got: e.len(),
                    });
                }
                let norm = cosine(&e, &e).sqrt();
                if (norm - 1.0).abs() <= 1e-6 {
                    e
                } else {
                    normalize(e).ok_or_else(|| TileError::ZeroEmbedding { id: t.id.clone() })?
                }
            }
            None => embed_text(provider, &t.embedding_text())?,
        };
        t.embedding = Some(emb);
        records.push(t);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(TileIndex {
        records,
        dimension: dim,
        provider_id: provider.id().to_string(),
    })
}

impl TileIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn records(&self) -> &[TileRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&TileRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Exhaustive scan. Sorted by boosted score descending, then tile id.
    /// `k` larger than the index is clamped.
    pub fn query_vector(
        &self,
        query: &[f32],
        affordance: Option<AffordanceType>,
        k: usize,
        lambda: f64,
    ) -> Result<Vec<MatchResult>, TileError> {
        if self.records.is_empty() {
            return Err(TileError::EmptyIndex);
        }
        if k == 0 {
            return Err(TileError::InvalidK);
        }
        if query.len() != self.dimension {
            return Err(TileError::DimensionMismatch {
                id: "<query>".into(),
                expected: self.dimension,
                got: query.len(),
            });
        }
        let mut scored: Vec<MatchResult> = self
            .records
            .iter()
            .map(|r| {
                let cos = cosine(query, r.embedding.as_deref().expect("indexed records carry embeddings"));
                let matched = affordance == Some(r.affordance);
                MatchResult {
                    tile_id: r.id.clone(),
                    cosine: cos,
                    boosted_score: cos + if matched { lambda } else { 0.0 },
                    affordance_matched: matched,
                }
            })
            .collect();
        scored.sort_by(|a, b| {
            b.boosted_score
                .total_cmp(&a.boosted_score)
                .then_with(|| a.tile_id.cmp(&b.tile_id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn query(
        &self,
        provider: &dyn EmbeddingProvider,
        object: &NarrativeObject,
        k: usize,
        lambda: f64,
    ) -> Result<Vec<MatchResult>, TileError> {
        if provider.id() != self.provider_id {
            return Err(TileError::ProviderMismatch {
                query: provider.id().to_string(),
                index: self.provider_id.clone(),
            });
        }
        if self.records.is_empty() {
            return Err(TileError::EmptyIndex);
        }
        let v = embed_text(provider, &object_query_text(object))?;
        self.query_vector(&v, object.affordance, k, lambda)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TileError {
    TileError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// One JSON record per line; blank lines and `#` comments are skipped.
pub fn parse_tileset(text: &str) -> Result<Vec<TileRecord>, TileError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TileError::BadRecord {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_tileset(path: &Path) -> Result<Vec<TileRecord>, TileError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_tileset(&text)
}

pub fn write_tileset(path: &Path, records: &[TileRecord]) -> Result<(), TileError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("tile record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads float32 little-endian rows, one per id listed in the manifest
/// (one id per line).
pub fn load_embedding_sidecar(
    rows_path: &Path,
    manifest_path: &Path,
    dimension: usize,
) -> Result<BTreeMap<String, Vec<f32>>, TileError> {
    let manifest = std::fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let ids: Vec<&str> = manifest.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let bytes = std::fs::read(rows_path).map_err(|e| io_err(rows_path, e))?;
    let row_len = dimension * 4;
    if bytes.len() != ids.len() * row_len {
        return Err(io_err(
            rows_path,
            format!("expected {} rows of {} floats, file has {} bytes", ids.len(), dimension, bytes.len()),
        ));
    }
    let mut out = BTreeMap::new();
    for (id, row) in ids.iter().zip(bytes.chunks_exact(row_len)) {
        let v = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.insert(id.to_string(), v).is_some() {
            return Err(TileError::DuplicateId(id.to_string()));
        }
    }
    Ok(out)
}

pub fn write_embedding_sidecar(
    rows_path: &Path,
    manifest_path: &Path,
    rows: &BTreeMap<String, Vec<f32>>,
) -> Result<(), TileError> {
    let mut bytes = Vec::new();
    let mut manifest = String::new();
    for (id, v) in rows {
        manifest.push_str(id);
        manifest.push('\n');
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(rows_path, bytes).map_err(|e| io_err(rows_path, e))?;
    std::fs::write(manifest_path, manifest).map_err(|e| io_err(manifest_path, e))
}

/// Fills missing record embeddings from a sidecar map.
pub fn attach_embeddings(records: &mut [TileRecord], rows: &BTreeMap<String, Vec<f32>>) {
    for r in records.iter_mut().filter(|r| r.embedding.is_none()) {
        if let Some(v) = rows.get(&r.id) {
            r.embedding = Some(v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synthetic_tileset;
    use proptest::prelude::*;

    fn tile(id: &str, name: &str, affordance: AffordanceType) -> TileRecord {
        TileRecord {
            id: id.into(),
            name: name.into(),
            group_label: "g".into(),
            supercategory: "s".into(),
            affordance,
            sprite_path: None,
            embedding: None,
        }
    }

    #[test]
    fn hashing_embeddings_are_deterministic_unit_vectors() {
        let p = HashingProvider::default();
        let a = embed_text(&p, "hollow oak").unwrap();
        assert_eq!(a, embed_text(&p, "hollow oak").unwrap());
        assert_eq!(a.len(), 384);
        assert!((cosine(&a, &a).sqrt() - 1.0).abs() < 1e-6);
        assert!(matches!(embed_text(&p, "   "), Err(TileError::EmptyText)));
        assert!(matches!(embed_text(&p, "..."), Err(TileError::EmptyText)));
    }

    #[test]
    fn tree_vs_trees_matches_dot_product_oracle() {
        let p = HashingProvider::default();
        let tree = embed_text(&p, "tree").unwrap();
        let trees = embed_text(&p, "trees").unwrap();
        let mut oracle = 0.0f64;
        for i in 0..tree.len() {
            oracle += tree[i] as f64 * trees[i] as f64;
        }
        let idx = build_index(
            vec![TileRecord { embedding: Some(trees.clone()), ..tile("t", "trees", AffordanceType::EnvironmentalObject) }],
            &p,
        )
        .unwrap();
        let r = idx.query_vector(&tree, None, 1, 0.0).unwrap();
        assert!((r[0].cosine - oracle).abs() < 1e-9);
    }

    #[test]
    fn build_errors() {
        let p = HashingProvider::default();
        let dup = vec![tile("a", "x", AffordanceType::Terrain), tile("a", "y", AffordanceType::Terrain)];
        assert!(matches!(build_index(dup, &p), Err(TileError::DuplicateId(id)) if id == "a"));
        let short = TileRecord { embedding: Some(vec![1.0; 10]), ..tile("a", "x", AffordanceType::Terrain) };
        assert!(matches!(build_index(vec![short], &p), Err(TileError::DimensionMismatch { got: 10, .. })));
        let empty = build_index(Vec::new(), &p).unwrap();
        assert!(matches!(
            empty.query(&p, &NarrativeObject::named("x"), 1, 0.0),
            Err(TileError::EmptyIndex)
        ));
    }

    #[test]
    fn precomputed_unit_embedding_kept_unchanged() {
        let p = HashingProvider::default();
        let mut v = vec![0f32; 384];
        v[7] = 0.6;
        v[100] = -0.8;
        let r = TileRecord { embedding: Some(v.clone()), ..tile("a", "x", AffordanceType::Terrain) };
        let idx = build_index(vec![r], &p).unwrap();
        assert_eq!(idx.get("a").unwrap().embedding.as_ref().unwrap(), &v);
    }

    #[test]
    fn self_match_ranks_first() {
        let p = HashingProvider::default();
        let idx = build_index(synthetic_tileset(200, 3), &p).unwrap();
        let target = &idx.records()[57];
        let q = target.embedding.clone().unwrap();
        let r = idx.query_vector(&q, None, 3, 0.0).unwrap();
        assert_eq!(r[0].tile_id, target.id);
        assert!((r[0].cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn affordance_boost_disambiguates_guardian() {
        let p = HashingProvider::default();
        // identical text apart from affordance, so raw cosines against a
        // name-only query are equal
        let mut statue = tile("a-statue", "guardian", AffordanceType::EnvironmentalObject);
        let mut creature = tile("b-creature", "guardian", AffordanceType::CharacterCreature);
        let v = embed_text(&p, "guardian").unwrap();
        statue.embedding = Some(v.clone());
        creature.embedding = Some(v.clone());
        let idx = build_index(vec![statue, creature], &p).unwrap();
        let no_boost = idx.query_vector(&v, Some(AffordanceType::CharacterCreature), 2, 0.0).unwrap();
        assert_eq!(no_boost[0].tile_id, "a-statue");
        let boosted = idx.query_vector(&v, Some(AffordanceType::CharacterCreature), 2, 0.1).unwrap();
        assert_eq!(boosted[0].tile_id, "b-creature");
        assert_eq!(boosted[0].cosine, boosted[1].cosine);
        assert!(boosted[0].affordance_matched);
        assert!((boosted[0].boosted_score - boosted[0].cosine - 0.1).abs() < 1e-12);
    }

    #[test]
    fn tileset_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = synthetic_tileset(20, 1);
        let path = dir.path().join("tiles.jsonl");
        write_tileset(&path, &records).unwrap();
        assert_eq!(load_tileset(&path).unwrap(), records);

        let p = HashingProvider::new(8);
        let rows: BTreeMap<String, Vec<f32>> = records
            .iter()
            .map(|r| (r.id.clone(), embed_text(&p, &r.embedding_text()).unwrap()))
            .collect();
        let (bin, man) = (dir.path().join("emb.bin"), dir.path().join("emb.ids"));
        write_embedding_sidecar(&bin, &man, &rows).unwrap();
        let back = load_embedding_sidecar(&bin, &man, 8).unwrap();
        assert_eq!(back, rows);
        assert!(load_embedding_sidecar(&bin, &man, 9).is_err());

        let mut recs = records.clone();
        attach_embeddings(&mut recs, &back);
        assert!(recs.iter().all(|r| r.embedding.is_some()));
        assert!(matches!(parse_tileset("{\"id\": 1}\n"), Err(TileError::BadRecord { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn lambda_zero_is_cosine_order(seed in 0u64..50, qseed in 0u64..1000) {
            let p = HashingProvider::default();
            let idx = build_index(synthetic_tileset(60, seed), &p).unwrap();
            let q = embed_text(&p, &format!("query {qseed} stone")).unwrap();
            let r = idx.query_vector(&q, Some(AffordanceType::Terrain), 60, 0.0).unwrap();
            for w in r.windows(2) {
                prop_assert!(w[0].cosine >= w[1].cosine);
                prop_assert!(w[0].cosine <= 1.0 + 1e-9 && w[0].cosine >= -1.0 - 1e-9);
            }
        }

        #[test]
        fn build_is_order_independent(seed in 0u64..50, shift in 0usize..40) {
            let p = HashingProvider::default();
            let tiles = synthetic_tileset(40, seed);
            let mut rotated = tiles.clone();
            rotated.rotate_left(shift);
            rotated.reverse();
            let a = build_index(tiles, &p).unwrap();
            let b = build_index(rotated, &p).unwrap();
            let q = embed_text(&p, "old wooden barrel").unwrap();
            prop_assert_eq!(
                a.query_vector(&q, Some(AffordanceType::InteractiveObject), 10, 0.1).unwrap(),
                b.query_vector(&q, Some(AffordanceType::InteractiveObject), 10, 0.1).unwrap()
            );
        }

        #[test]
        fn cosine_symmetric_and_bounded(a in "[a-z ]{1,20}", b in "[a-z ]{1,20}") {
            let p = HashingProvider::new(64);
            if let (Ok(u), Ok(v)) = (embed_text(&p, &a), embed_text(&p, &b)) {
                let c = cosine(&u, &v);
                prop_assert_eq!(c, cosine(&v, &u));
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
            }
        }
    }
}
