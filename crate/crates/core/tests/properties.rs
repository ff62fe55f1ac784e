//! Cross-module properties exercised through the public API.

use std::collections::{BTreeMap, BTreeSet};

use narrascene::evaluator::{score_story, FrameScoreInput};
use narrascene::fixtures::{synthetic_tileset, SAMPLE_STORIES};
use narrascene::llm::{Gateway, KeywordClassifier, ReplayCassette, CLASSIFY_PROMPT, STORY_PROMPT};
use narrascene::narrative::{parse_story_bundle, AffordanceType, NarrativeObject, ParseOptions, SceneFrame};
use narrascene::placement::{
    apply_spatial_relations, initial_place, satisfaction_rate, satisfied_counts, PlacementAction, RefinementMode,
};
use narrascene::relations::RelationMapTable;
use narrascene::render::{encode_png, render_scene, RenderConfig, SpriteTable};
use narrascene::scene_kg::{build_scene_kg, merge_kgs, MergedKG};
use narrascene::terrain::{generate_base_mask, CAParams};
use narrascene::tiles::{build_index, HashingProvider, MatchResult};
use proptest::prelude::*;

/// Sample story frames with every object classified by the keyword table.
fn classified_frames() -> Vec<SceneFrame> {
    let cls = &KeywordClassifier::default();
    SAMPLE_STORIES
        .iter()
        .flat_map(|(_, text)| {
            let b = parse_story_bundle(text, ParseOptions::default()).unwrap();
            let story = b.story_text.clone();
            b.frames.into_iter().map(move |mut f| {
                for o in &mut f.objects {
                    o.affordance = Some(cls.classify(&o.name, &story).affordance);
                }
                f
            })
        })
        .collect()
}

fn affordance() -> impl Strategy<Value = AffordanceType> {
    prop::sample::select(AffordanceType::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retrieval_matches_brute_force(
        tiles_seed in any::<u64>(),
        name in "[a-z]{3,8}( [a-z]{3,8})?",
        aff in prop::option::of(affordance()),
        lambda in 0.0f64..0.5,
        k in 1usize..8,
    ) {
        let provider = HashingProvider::new(64);
        let index = build_index(synthetic_tileset(120, tiles_seed), &provider).unwrap();
        let obj = NarrativeObject { name, affordance: aff, suggested_terrain: None };
        let got = index.query(&provider, &obj, k, lambda).unwrap();
        let all = index.query(&provider, &obj, index.len(), lambda).unwrap();
        prop_assert_eq!(got.len(), k);
        prop_assert_eq!(&got[..], &all[..k]);
        let best = all.iter().map(|m| m.boosted_score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(got[0].boosted_score, best);
        for m in &all {
            let tile = index.get(&m.tile_id).unwrap();
            let emb = tile.embedding.as_ref().unwrap();
            let norm = emb.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-6);
            prop_assert_eq!(m.affordance_matched, aff == Some(tile.affordance));
            let boost = if m.affordance_matched { lambda } else { 0.0 };
            prop_assert_eq!(m.boosted_score, m.cosine + boost);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&m.cosine));
        }
    }

    #[test]
    fn layout_keeps_grid_invariants(frame_idx in 0usize..30, seed in any::<u64>(), literal in any::<bool>()) {
        let frame = &classified_frames()[frame_idx];
        let mask = generate_base_mask(&CAParams::default(), seed).unwrap();
        let grid = initial_place(frame, &BTreeMap::new(), &mask, "grass", seed).unwrap();
        prop_assert_eq!(grid.check_invariants(), Ok(()));
        let mode = if literal { RefinementMode::Literal } else { RefinementMode::Repair };
        let (grid, rep) = apply_spatial_relations(grid, frame, &RelationMapTable::builtin(), mode);
        prop_assert_eq!(grid.check_invariants(), Ok(()));
        for r in &rep.records {
            if matches!(r.action, PlacementAction::Moved | PlacementAction::MovedAnchor) {
                prop_assert!(r.satisfied_after, "{:?}", r);
            }
        }
        if mode == RefinementMode::Repair {
            prop_assert!(rep.final_satisfied >= rep.initial_satisfied);
        }
        let (sat, total) = satisfied_counts(&grid, frame, &RelationMapTable::builtin());
        prop_assert_eq!(sat, rep.final_satisfied);
        prop_assert_eq!(satisfaction_rate(&grid, frame, &RelationMapTable::builtin()), if total == 0 { 0.0 } else { sat as f64 / total as f64 });
    }

    #[test]
    fn story_metrics_agree_with_placement(story in 0usize..10, seed in any::<u64>(), ids in prop::collection::vec(0u8..6, 1..20)) {
        let frames = &classified_frames()[story * 3..story * 3 + 3];
        let table = RelationMapTable::builtin();
        let mut grids = Vec::new();
        let mut matches: Vec<BTreeMap<String, MatchResult>> = Vec::new();
        let mut next = ids.iter().cycle();
        for (i, f) in frames.iter().enumerate() {
            let mask = generate_base_mask(&CAParams::default(), seed.wrapping_add(i as u64)).unwrap();
            let g = initial_place(f, &BTreeMap::new(), &mask, "grass", seed).unwrap();
            grids.push(apply_spatial_relations(g, f, &table, RefinementMode::Repair).0);
            matches.push(f.object_keys().into_iter().map(|k| {
                let id = format!("t{}", next.next().unwrap());
                (k, MatchResult { tile_id: id, cosine: 0.5, boosted_score: 0.5, affordance_matched: false })
            }).collect());
        }
        let inputs: Vec<FrameScoreInput<'_>> = frames.iter().enumerate()
            .map(|(i, frame)| FrameScoreInput { frame, matches: &matches[i], grid: &grids[i] })
            .collect();
        let m = score_story("s", &inputs, &table).unwrap();
        let (mut sat, mut total) = (0, 0);
        for (f, g) in frames.iter().zip(&grids) {
            let (s, t) = satisfied_counts(g, f, &table);
            sat += s;
            total += t;
        }
        prop_assert_eq!(m.sat, sat as f64 / total as f64);
        let all: Vec<&String> = matches.iter().flat_map(|m| m.values().map(|r| &r.tile_id)).collect();
        let unique: BTreeSet<_> = all.iter().collect();
        let div = m.div.unwrap();
        prop_assert!(div <= 1.0);
        prop_assert_eq!(div == 1.0, unique.len() == all.len());
    }

    #[test]
    fn render_is_deterministic_and_sized(frame_idx in 0usize..30, seed in any::<u64>(), tile_px in 8u32..24) {
        let frame = &classified_frames()[frame_idx];
        let mask = generate_base_mask(&CAParams::default(), seed).unwrap();
        let grid = initial_place(frame, &BTreeMap::new(), &mask, "grass", seed).unwrap();
        let cfg = RenderConfig { tile_px, ..RenderConfig::default() };
        let (a, _) = render_scene(&grid, &SpriteTable::new(), &cfg).unwrap();
        let (b, _) = render_scene(&grid, &SpriteTable::new(), &cfg).unwrap();
        prop_assert_eq!((a.width(), a.height()), (20 * tile_px, 20 * tile_px));
        prop_assert_eq!(encode_png(&a).unwrap(), encode_png(&b).unwrap());
    }

    #[test]
    fn replay_ignores_record_order(responses in prop::collection::vec("[a-z ]{1,20}", 2..6), rotate in 0usize..6) {
        let names: Vec<String> = (0..responses.len()).map(|i| format!("thing{i}")).collect();
        let build = |order: &[usize]| {
            let mut c = ReplayCassette::default();
            c.put(&STORY_PROMPT, &STORY_PROMPT.fill(&[("seed", " x")]), "A tale.");
            for &i in order {
                let prompt = CLASSIFY_PROMPT.fill(&[("name", &names[i]), ("story", "ctx")]);
                let reply = format!(r#"{{"affordance": "item/collectible", "suggested_terrain": "{}"}}"#, responses[i]);
                c.put(&CLASSIFY_PROMPT, &prompt, &reply);
            }
            c
        };
        let forward: Vec<usize> = (0..responses.len()).collect();
        let mut rotated = forward.clone();
        rotated.rotate_left(rotate % responses.len());
        let a = Gateway::replay(build(&forward)).with_fallback(false);
        let b = Gateway::replay(build(&rotated)).with_fallback(false);
        prop_assert_eq!(a.generate_story("x").unwrap(), b.generate_story("x").unwrap());
        for n in &names {
            let ra = a.classify_object(n, "ctx").unwrap();
            prop_assert_eq!(&ra, &b.classify_object(n, "ctx").unwrap());
            prop_assert_eq!(ra.affordance, AffordanceType::ItemCollectible);
        }
    }
}

#[test]
fn kg_file_round_trip_for_every_sample_story() {
    let table = RelationMapTable::builtin();
    let frames = classified_frames();
    for story in frames.chunks(3) {
        let kgs: Vec<_> = story.iter().map(|f| build_scene_kg(f, &BTreeMap::new(), &BTreeMap::new(), &table)).collect();
        let merged = merge_kgs(&kgs).unwrap();
        assert_eq!(MergedKG::from_json(&merged.to_json()).unwrap(), merged);
        assert_eq!(merged.precedes.len(), 2);
        for (k, kg) in kgs.iter().enumerate() {
            assert_eq!(merged.frame_subgraph(k).as_ref(), Some(kg));
        }
    }
}
