use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use narrascene::fixtures::{elara_cassette, story_tileset, ELARA_PROMPT, ELARA_STORY};
use narrascene::llm::LlmMode;
use narrascene::pipeline::{
    discover_runs, run_generate, stage_classify, stage_evaluate, stage_kg, stage_layout, stage_match, stage_prepare,
    stage_relations, stage_render, stage_terrain, PipelineConfig, StoryInput, Warnings,
};
use narrascene::placement::RefinementMode;
use narrascene::tiles::write_tileset;

#[derive(Parser)]
#[command(name = "narrascene", version, about = "Story-to-tile-scene pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pin the terrain stream independently of --seed.
    #[arg(long, global = true)]
    terrain_seed: Option<u64>,
    /// JSONL tileset (defaults to the built-in curated set).
    #[arg(long, global = true)]
    tileset: Option<PathBuf>,
    /// Directory with sprite PNGs.
    #[arg(long, global = true)]
    sprites: Option<PathBuf>,
    /// live | replay | fallback
    #[arg(long, global = true)]
    llm_mode: Option<LlmMode>,
    /// Replay cassette (implies --llm-mode replay unless given).
    #[arg(long, global = true)]
    cassette: Option<PathBuf>,
    /// Grid size, e.g. 20x20.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Affordance boost.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// literal | repair
    #[arg(long, global = true, value_parser = parse_refinement)]
    refinement: Option<RefinementMode>,
}

#[derive(Args, Clone)]
struct InputOpts {
    /// Seed prompt for story generation.
    #[arg(long, conflicts_with = "story")]
    prompt: Option<String>,
    /// Story bundle (JSON) or plain narrative text.
    #[arg(long)]
    story: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage into one run directory.
    Generate {
        #[command(flatten)]
        input: InputOpts,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Parse / extract the story into <out>/story.json.
    Prepare {
        #[command(flatten)]
        input: InputOpts,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Classify objects of a prepared run.
    Classify(StageArgs),
    /// Map relation phrases of a prepared run.
    Relations(StageArgs),
    /// Group frames and pick base and patch terrain.
    Terrain(StageArgs),
    /// Retrieve tiles for every object.
    Match(StageArgs),
    /// Generate masks, place objects and refine relations.
    Layout(StageArgs),
    /// Build per-frame and merged knowledge graphs.
    Kg(StageArgs),
    /// Render frames to PNG.
    Render(StageArgs),
    /// Score one or more run directories (or a directory of runs).
    Evaluate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where the report goes (defaults to the single run, or the parent directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled fixture files (tileset, Elara cassette and story, config).
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonOpts,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    Ok((w, h))
}

fn parse_refinement(s: &str) -> Result<RefinementMode, String> {
    match s {
        "literal" => Ok(RefinementMode::Literal),
        "repair" => Ok(RefinementMode::Repair),
        _ => Err(format!("unknown refinement '{s}' (literal, repair)")),
    }
}

fn load_config(o: &CommonOpts) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = o.terrain_seed {
        cfg.terrain.seed = Some(s);
    }
    if let Some(p) = &o.tileset {
        cfg.paths.tileset = Some(p.clone());
    }
    if let Some(p) = &o.sprites {
        cfg.paths.sprites = Some(p.clone());
    }
    if let Some(p) = &o.cassette {
        cfg.llm.cassette = Some(p.clone());
        if o.llm_mode.is_none() {
            cfg.llm.mode = LlmMode::Replay;
        }
    }
    if let Some(m) = o.llm_mode {
        cfg.llm.mode = m;
    }
    if let Some((w, h)) = o.grid {
        cfg.terrain.width = w;
        cfg.terrain.height = h;
    }
    if let Some(l) = o.lambda {
        cfg.matching.lambda = l;
    }
    if let Some(r) = o.refinement {
        cfg.layout.refinement = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn story_input(i: &InputOpts) -> anyhow::Result<StoryInput> {
    match (&i.prompt, &i.story) {
        (Some(p), None) => Ok(StoryInput::Prompt(p.clone())),
        (None, Some(path)) => Ok(StoryInput::from_file(path)?),
        _ => bail!("give exactly one of --prompt or --story"),
    }
}

fn print_warnings(w: &Warnings) {
    for m in &w.0 {
        eprintln!("warning: {m}");
    }
}

fn run_stage(args: &StageArgs, f: impl FnOnce(&PipelineConfig, &Path, &mut Warnings) -> anyhow::Result<()>) -> anyhow::Result<Warnings> {
    let cfg = load_config(&args.common)?;
    let mut w = Warnings::default();
    f(&cfg, &args.out, &mut w)?;
    Ok(w)
}

fn write_fixtures(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_tileset(&dir.join("tileset.jsonl"), &story_tileset())?;
    fs::write(dir.join("elara.cassette.json"), elara_cassette().to_json() + "\n")?;
    let stories = dir.join("stories");
    fs::create_dir_all(&stories)?;
    fs::write(stories.join("elara.json"), ELARA_STORY)?;
    let cfg = format!(
        "# Replays the Elara run offline:\n#   narrascene generate --config elara.toml --prompt \"{ELARA_PROMPT}\" --out runs/elara\nseed = 42\n\n[llm]\nmode = \"replay\"\ncassette = \"elara.cassette.json\"\nfallback = false\n\n[paths]\ntileset = \"tileset.jsonl\"\n"
    );
    fs::write(dir.join("elara.toml"), cfg)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<Warnings> {
    match cli.command {
        Command::Generate { input, out, common } => {
            let cfg = load_config(&common)?;
            let out = out.or_else(|| cfg.paths.out.clone()).context("--out (or paths.out) is required")?;
            let summary = run_generate(&cfg, &story_input(&input)?, &out)?;
            println!(
                "{} frames -> {} (sat {}/{}, cos {:.2}, afford {:.2})",
                summary.frames,
                out.display(),
                summary.metrics.satisfied_predicates,
                summary.metrics.predicates,
                summary.metrics.cos_sim,
                summary.metrics.afford
            );
            Ok(summary.warnings)
        }
        Command::Prepare { input, out, common } => {
            let cfg = load_config(&common)?;
            let gw = cfg.gateway()?;
            let bundle = stage_prepare(&cfg, &gw, &story_input(&input)?, &out)?;
            println!("{} frames, {} triples", bundle.frames.len(), bundle.triple_count());
            Ok(Warnings::default())
        }
        Command::Classify(a) => run_stage(&a, |cfg, dir, w| {
            stage_classify(cfg, &cfg.gateway()?, dir, w)?;
            Ok(())
        }),
        Command::Relations(a) => run_stage(&a, |cfg, dir, w| {
            stage_relations(cfg, &cfg.gateway()?, dir, w)?;
            Ok(())
        }),
        Command::Terrain(a) => run_stage(&a, |cfg, dir, w| {
            stage_terrain(cfg, dir, w)?;
            Ok(())
        }),
        Command::Match(a) => run_stage(&a, |cfg, dir, _| {
            stage_match(cfg, dir)?;
            Ok(())
        }),
        Command::Layout(a) => run_stage(&a, |cfg, dir, w| {
            for (k, r) in stage_layout(cfg, dir, w)?.iter().enumerate() {
                println!("frame {}: {}/{} relations hold", k + 1, r.final_satisfied, r.records.len());
            }
            Ok(())
        }),
        Command::Kg(a) => run_stage(&a, |_, dir, _| {
            let kg = stage_kg(dir)?;
            println!("{} nodes, {} edges", kg.nodes.len(), kg.edge_count());
            Ok(())
        }),
        Command::Render(a) => run_stage(&a, |cfg, dir, w| {
            stage_render(cfg, dir, w)?;
            Ok(())
        }),
        Command::Evaluate { runs, out } => {
            let dirs = if runs.len() == 1 { discover_runs(&runs[0])? } else { runs.clone() };
            let out = match out {
                Some(o) => o,
                None if dirs.len() == 1 => dirs[0].clone(),
                None => runs[0].clone(),
            };
            stage_evaluate(&dirs, &out)?;
            print!("{}", fs::read_to_string(out.join("report.md"))?);
            Ok(Warnings::default())
        }
        Command::Fixtures { out } => {
            write_fixtures(&out)?;
            Ok(Warnings::default())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    match run(Cli::parse()) {
        Ok(w) if w.is_empty() => ExitCode::SUCCESS,
        Ok(w) => {
            print_warnings(&w);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
