//! Story-level metrics (CosSim, Afford, Div, Sat), aggregates and report
//! tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::narrative::SceneFrame;
use crate::placement::{satisfied_counts, SceneGrid};
use crate::relations::RelationMapTable;
use crate::tiles::MatchResult;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("story '{0}' has no matched objects")]
    NoMatches(String),
    #[error("no stories to aggregate")]
    NoStories,
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryMetrics {
    pub story: String,
    pub cos_sim: f64,
    pub afford: f64,
    /// Absent when nothing was matched.
    pub div: Option<f64>,
    pub sat: f64,
    #[serde(default)]
    pub matched_objects: usize,
    #[serde(default)]
    pub predicates: usize,
    #[serde(default)]
    pub satisfied_predicates: usize,
}

impl StoryMetrics {
    /// A row given directly as values, e.g. a reference table.
    pub fn from_values(story: &str, cos_sim: f64, afford: f64, div: f64, sat: f64) -> Self {
        StoryMetrics {
            story: story.to_string(),
            cos_sim,
            afford,
            div: Some(div),
            sat,
            matched_objects: 0,
            predicates: 0,
            satisfied_predicates: 0,
        }
    }
}

/// One evaluated frame: its matches (keyed by entity) and the refined grid.
#[derive(Debug, Clone, Copy)]
pub struct FrameScoreInput<'a> {
    pub frame: &'a SceneFrame,
    pub matches: &'a BTreeMap<String, MatchResult>,
    pub grid: &'a SceneGrid,
}

/// Pools objects and predicates over all frames of a story.
pub fn score_story(story: &str, frames: &[FrameScoreInput<'_>], table: &RelationMapTable) -> Result<StoryMetrics, EvalError> {
    let matches: Vec<&MatchResult> = frames.iter().flat_map(|f| f.matches.values()).collect();
    if matches.is_empty() {
        return Err(EvalError::NoMatches(story.to_string()));
    }
    let n = matches.len() as f64;
    let cos_sim = matches.iter().map(|m| m.cosine).sum::<f64>() / n;
    let afford = matches.iter().filter(|m| m.affordance_matched).count() as f64 / n;
    let unique: BTreeSet<&str> = matches.iter().map(|m| m.tile_id.as_str()).collect();
    let (mut satisfied, mut predicates) = (0, 0);
    for f in frames {
        let (s, t) = satisfied_counts(f.grid, f.frame, table);
        satisfied += s;
        predicates += t;
    }
    Ok(StoryMetrics {
        story: story.to_string(),
        cos_sim,
        afford,
        div: Some(unique.len() as f64 / n),
        sat: if predicates == 0 { 0.0 } else { satisfied as f64 / predicates as f64 },
        matched_objects: matches.len(),
        predicates,
        satisfied_predicates: satisfied,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn stat(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub stories: usize,
    pub cos_sim: Stat,
    pub afford: Stat,
    /// Over stories that report a diversity value.
    pub div: Option<Stat>,
    pub sat: Stat,
}

/// Mean and population std per metric, folded in story-id order.
pub fn aggregate(stories: &[StoryMetrics]) -> Result<AggregateMetrics, EvalError> {
    if stories.is_empty() {
        return Err(EvalError::NoStories);
    }
    let mut sorted: Vec<&StoryMetrics> = stories.iter().collect();
    sorted.sort_by(|a, b| a.story.cmp(&b.story));
    let col = |f: fn(&StoryMetrics) -> f64| sorted.iter().map(|s| f(s)).collect::<Vec<_>>();
    let divs: Vec<f64> = sorted.iter().filter_map(|s| s.div).collect();
    Ok(AggregateMetrics {
        stories: sorted.len(),
        cos_sim: stat(&col(|s| s.cos_sim)),
        afford: stat(&col(|s| s.afford)),
        div: (!divs.is_empty()).then(|| stat(&divs)),
        sat: stat(&col(|s| s.sat)),
    })
}

/// Fixed-point formatting with round-half-away-from-zero applied to the
/// shortest decimal representation of `x` (so 0.415 gives "0.42", even
/// though the nearest double is slightly below 0.415).
pub fn format_fixed(x: f64, dp: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let repr = format!("{}", x.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(dp)).map(|b| b - b'0').collect();
    let round_up = frac_part.as_bytes().get(dp).is_some_and(|d| *d >= b'5');
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - dp;
    let int_str: String = digits[..split].iter().map(|d| (d + b'0') as char).collect();
    let frac_str: String = digits[split..].iter().map(|d| (d + b'0') as char).collect();
    let body = if dp == 0 { int_str } else { format!("{int_str}.{frac_str}") };
    let is_zero = digits.iter().all(|d| *d == 0);
    if x.is_sign_negative() && !is_zero {
        format!("-{body}")
    } else {
        body
    }
}

pub fn format_2dp(x: f64) -> String {
    format_fixed(x, 2)
}

/// Rate in [0, 1] as a whole percent.
pub fn format_percent(rate: f64) -> String {
    format_fixed(rate * 100.0, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

fn div_cell(d: Option<f64>) -> String {
    d.map_or_else(|| "n/a".to_string(), format_2dp)
}

/// Per-story table plus an Overall row (column means); the markdown form
/// adds a mean/std table.
pub fn emit_report(stories: &[StoryMetrics], format: ReportFormat) -> Result<String, EvalError> {
    let agg = aggregate(stories)?;
    let mut sorted: Vec<&StoryMetrics> = stories.iter().collect();
    sorted.sort_by(|a, b| a.story.cmp(&b.story));
    let overall = [
        "Overall".to_string(),
        format_2dp(agg.cos_sim.mean),
        format_2dp(agg.afford.mean),
        div_cell(agg.div.map(|d| d.mean)),
        format_percent(agg.sat.mean),
    ];
    let rows: Vec<[String; 5]> = sorted
        .iter()
        .map(|s| [s.story.clone(), format_2dp(s.cos_sim), format_2dp(s.afford), div_cell(s.div), format_percent(s.sat)])
        .chain(std::iter::once(overall))
        .collect();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("story,cos_sim,afford,div,sat_pct\n");
            for r in rows {
                let _ = writeln!(out, "{}", r.join(","));
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Story | CosSim | Afford | Div | Sat (%) |\n|---|---|---|---|---|\n");
            for r in rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
            out.push_str("\n| Metric | Mean | Std. Dev. |\n|---|---|---|\n");
            let _ = writeln!(out, "| Cosine similarity | {} | {} |", format_2dp(agg.cos_sim.mean), format_2dp(agg.cos_sim.std));
            let _ = writeln!(out, "| Affordance match | {} | {} |", format_2dp(agg.afford.mean), format_2dp(agg.afford.std));
            match agg.div {
                Some(d) => {
                    let _ = writeln!(out, "| Diversity | {} | {} |", format_2dp(d.mean), format_2dp(d.std));
                }
                None => out.push_str("| Diversity | n/a | n/a |\n"),
            }
        }
    }
    Ok(out)
}

/// A parsed row of the CSV report (values as printed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub story: String,
    pub cos_sim: f64,
    pub afford: f64,
    pub div: Option<f64>,
    pub sat_pct: u32,
}

pub fn read_report_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("story,cos_sim,afford,div,sat_pct") => {}
        other => return Err(EvalError::MalformedReport(format!("unexpected header {other:?}"))),
    }
    let bad = |line: &str| EvalError::MalformedReport(format!("bad row '{line}'"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(ReportRow {
                story: f[0].to_string(),
                cos_sim: num(f[1])?,
                afford: num(f[2])?,
                div: if f[3] == "n/a" { None } else { Some(num(f[3])?) },
                sat_pct: f[4].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}
