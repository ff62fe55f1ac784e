//! Narrative-to-scene generation: predicate triples extracted from a story
//! become layered tile scenes, knowledge graphs and evaluation reports.

pub mod llm;
pub mod narrative;
pub mod relations;
pub mod fixtures;
pub mod terrain;
pub mod tiles;
pub mod placement;
pub mod scene_kg;
pub mod render;
pub mod evaluator;
pub mod pipeline;
