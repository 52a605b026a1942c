//! Synthetic "remove the X" dataset with a scenario that scripts every mock.
//!
//! Each image has a flat gray background, a target shape on the left and a
//! distractor of another color on the right. The scenario makes the
//! reflective pipeline find the exact target while single-shot variants land
//! on coarser or wrong edits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fill, FillRule, JudgeRule, MockScenario, RegionRule, ScriptedMetricValues, Shape};
use crate::backends::ScoreStage;
use crate::eval::{ManifestEntry, TaskTag, MANIFEST_FILE};
use crate::image::{BinaryMask, ImageBuf, ImageError};

pub const FIXTURE_SIZE: u32 = 96;
pub const BACKGROUND: [u8; 3] = [128, 128, 128];
pub const SCENARIO_FILE: &str = "scenario.json";

const PALETTE: [(&str, [u8; 3]); 5] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 200, 40]),
    ("purple", [150, 60, 200]),
];
const SHAPES: [&str; 2] = ["circle", "square"];
const PLACES: [&str; 2] = ["near the top", "near the bottom"];
const TASKS: [TaskTag; 4] = [
    TaskTag::Understanding,
    TaskTag::Reasoning,
    TaskTag::Responsible,
    TaskTag::Other,
];

/// Upper bound on `n`: one sample per (color, shape, place) combination.
pub const MAX_FIXTURES: usize = PALETTE.len() * SHAPES.len() * PLACES.len();

/// Index of the removal plan among the scripted modification prompts.
pub const REMOVAL_PLAN: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("at most {MAX_FIXTURES} fixtures can be generated (asked for {0})")]
    TooMany(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct FixtureSample {
    pub entry: ManifestEntry,
    pub image: ImageBuf,
    pub gt_mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub samples: Vec<FixtureSample>,
    pub scenario: MockScenario,
}

#[derive(Debug, Clone, Copy)]
struct Figure {
    square: bool,
    cx: i64,
    cy: i64,
    r: i64,
}

impl Figure {
    fn contains(&self, x: i64, y: i64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if self.square {
            dx.abs() <= self.r && dy.abs() <= self.r
        } else {
            dx * dx + dy * dy <= self.r * self.r
        }
    }

    /// Bounding box grown by `margin` pixels.
    fn coarse_rect(&self, margin: i64) -> Shape {
        let half = self.r + margin;
        Shape::Rect {
            x: self.cx - half,
            y: self.cy - half,
            w: 2 * half + 1,
            h: 2 * half + 1,
        }
    }
}

/// Builds `n` samples in memory. Same `(n, seed)` gives identical output.
pub fn build_fixtures(n: usize, seed: u64) -> Result<FixtureSet, FixtureError> {
    if n > MAX_FIXTURES {
        return Err(FixtureError::TooMany(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, usize, usize)> = (0..PALETTE.len())
        .flat_map(|c| (0..SHAPES.len()).flat_map(move |s| (0..PLACES.len()).map(move |p| (c, s, p))))
        .collect();
    combos.shuffle(&mut rng);

    let full = FIXTURE_SIZE as i64;
    let mut scenario = MockScenario {
        default_region: Some(Shape::Rect { x: 0, y: 0, w: full, h: full }),
        default_fill: Some(Fill::Stamp),
        judge: Some(JudgeRule::EditedFraction { max_fraction: 0.5 }),
        metrics: ScriptedMetricValues {
            lpips: Some(0.047),
            clip: Some(21.86),
        },
        ..MockScenario::default()
    }
    .with_scores(ScoreStage::LocPrompt, &[0.4, 0.9, 0.3, 0.2, 0.1])
    .with_scores(ScoreStage::Mask, &[0.6, 0.95, 0.5, 0.5, 0.5])
    .with_scores(ScoreStage::MdfPrompt, &[0.3, 0.5, 0.9, 0.2, 0.1])
    .with_scores(ScoreStage::EditedImage, &[0.8, 0.7, 0.7, 0.7, 0.7]);

    let mut samples = Vec::with_capacity(n);
    for (i, &(color, shape, place)) in combos.iter().take(n).enumerate() {
        let (color_name, rgb) = PALETTE[color];
        let mut other = rng.gen_range(0..PALETTE.len() - 1);
        if other >= color {
            other += 1;
        }
        let square = shape == 1;
        let cy_range = if place == 0 { 18..=40 } else { 56..=78 };
        let target = Figure {
            square,
            cx: rng.gen_range(18..=26),
            cy: rng.gen_range(cy_range),
            r: rng.gen_range(6..=10),
        };
        let distractor = Figure {
            square: rng.gen_bool(0.5),
            cx: rng.gen_range(70..=78),
            cy: rng.gen_range(16..=80),
            r: rng.gen_range(5..=9),
        };

        let mut image = ImageBuf::filled(FIXTURE_SIZE, FIXTURE_SIZE, BACKGROUND)?;
        for y in 0..FIXTURE_SIZE {
            for x in 0..FIXTURE_SIZE {
                let (xi, yi) = (x as i64, y as i64);
                if target.contains(xi, yi) {
                    image.set_pixel(x, y, rgb);
                } else if distractor.contains(xi, yi) {
                    image.set_pixel(x, y, PALETTE[other].1);
                }
            }
        }
        let gt_mask = BinaryMask::from_fn(FIXTURE_SIZE, FIXTURE_SIZE, |x, y| {
            target.contains(x as i64, y as i64)
        })?;

        let noun = format!("{color_name} {}", SHAPES[shape]);
        let instruction = format!("remove the {noun} {}", PLACES[place]);
        let precise = format!("the {noun} on the left, {}", PLACES[place]);
        scenario.localization_by_instruction.insert(
            instruction.clone(),
            vec![
                format!("the {}", SHAPES[shape]),
                precise.clone(),
                format!("{color_name} things"),
                "the left half".to_owned(),
                "every object".to_owned(),
            ],
        );
        scenario.regions.push(RegionRule {
            prompt: precise.clone(),
            seed: Some(0),
            shape: target.coarse_rect(4),
        });
        scenario.regions.push(RegionRule {
            prompt: precise,
            seed: None,
            shape: Shape::Color(rgb),
        });
        let plans = vec![
            format!("paint over the {noun}"),
            format!("replace the {noun} with a pattern"),
            format!("erase the {noun} and fill with the gray background"),
            format!("blur the {noun}"),
            format!("cover the {noun} with a sticker"),
        ];
        scenario.fills.push(FillRule {
            prompt: plans[REMOVAL_PLAN].clone(),
            fill: Fill::Solid { rgb: BACKGROUND },
        });
        scenario
            .modification_by_instruction
            .insert(instruction.clone(), plans);

        let id = format!("fx{i:03}");
        samples.push(FixtureSample {
            entry: ManifestEntry {
                image: format!("images/{id}.png"),
                gt_mask: Some(format!("masks/{id}.png")),
                id,
                instruction,
                task: TASKS[i % TASKS.len()],
            },
            image,
            gt_mask,
        });
    }
    Ok(FixtureSet { samples, scenario })
}

/// Writes `images/`, `masks/`, `manifest.json` and `scenario.json` under `dir`.
pub fn write_fixtures(set: &FixtureSet, dir: &Path) -> Result<(), FixtureError> {
    let write = |rel: &str, bytes: &[u8]| {
        let path = dir.join(rel);
        let io = |source| FixtureError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        std::fs::write(&path, bytes).map_err(io)
    };
    for s in &set.samples {
        write(&s.entry.image, &s.image.to_png()?)?;
        if let Some(mask) = &s.entry.gt_mask {
            write(mask, &s.gt_mask.to_png()?)?;
        }
    }
    let entries: Vec<&ManifestEntry> = set.samples.iter().map(|s| &s.entry).collect();
    write(MANIFEST_FILE, &serde_json::to_vec_pretty(&entries)?)?;
    write(SCENARIO_FILE, &serde_json::to_vec_pretty(&set.scenario)?)?;
    Ok(())
}

pub fn make_fixture_dataset(n: usize, seed: u64, dir: &Path) -> Result<FixtureSet, FixtureError> {
    let set = build_fixtures(n, seed)?;
    write_fixtures(&set, dir)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::load_dataset;

    #[test]
    fn reproducible_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_fixture_dataset(6, 11, a.path()).unwrap();
        make_fixture_dataset(6, 11, b.path()).unwrap();
        for rel in ["manifest.json", "scenario.json", "images/fx003.png", "masks/fx005.png"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        let c = build_fixtures(6, 12).unwrap();
        let d = build_fixtures(6, 11).unwrap();
        assert_ne!(c.samples[0].image, d.samples[0].image);
    }

    #[test]
    fn masks_match_target_pixels() {
        let set = build_fixtures(MAX_FIXTURES, 3).unwrap();
        for s in &set.samples {
            // oracle: pixels that differ from the background on the left half
            let left = (0..FIXTURE_SIZE)
                .flat_map(|y| (0..FIXTURE_SIZE / 2).map(move |x| (x, y)))
                .filter(|&(x, y)| s.image.pixel(x, y) != BACKGROUND)
                .count();
            assert_eq!(left, s.gt_mask.popcount(), "{}", s.entry.id);
            assert!(s.gt_mask.popcount() > 0);
        }
        let instructions: std::collections::BTreeSet<_> =
            set.samples.iter().map(|s| &s.entry.instruction).collect();
        assert_eq!(instructions.len(), MAX_FIXTURES);
        assert!(matches!(build_fixtures(MAX_FIXTURES + 1, 0), Err(FixtureError::TooMany(_))));
    }

    #[test]
    fn dataset_loads_and_scenario_parses() {
        let dir = tempfile::tempdir().unwrap();
        let set = make_fixture_dataset(8, 5, dir.path()).unwrap();
        let samples = load_dataset(dir.path()).unwrap();
        assert_eq!(samples.len(), 8);
        assert_eq!(samples[2].task, TaskTag::Responsible);
        let text = std::fs::read_to_string(dir.path().join(SCENARIO_FILE)).unwrap();
        assert_eq!(MockScenario::from_json(&text).unwrap(), set.scenario);
    }
}
