//! Deterministic stand-ins for the external models.
//!
//! All mocks are pure functions of their inputs and a [`MockScenario`].
//! Anything a scenario does not script is an error ([`BackendError::ScenarioMiss`])
//! so that tests never pass on hidden defaults.

pub mod fixtures;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{
    BackendError, CallCounts, Candidates, Inpainter, Reasoner, ScoreContext, ScoreStage, Segmenter, Verdict,
};
use crate::image::{BinaryMask, ImageBuf};
use crate::metrics::MetricBackend;
use crate::prompt::{Instruction, Prompt, PromptKind};

pub const SCENARIO_VERSION: u32 = 1;

/// Region produced by the geometric segmenter. Shapes are clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect { x: i64, y: i64, w: i64, h: i64 },
    Circle { cx: i64, cy: i64, r: i64 },
    /// Every pixel exactly equal to this color.
    Color([u8; 3]),
    None,
}

impl Shape {
    pub fn contains(&self, image: &ImageBuf, x: u32, y: u32) -> bool {
        let (xi, yi) = (x as i64, y as i64);
        match *self {
            Shape::Rect { x, y, w, h } => xi >= x && xi < x + w && yi >= y && yi < y + h,
            Shape::Circle { cx, cy, r } => {
                let (dx, dy) = (xi - cx, yi - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Color(rgb) => image.pixel(x, y) == rgb,
            Shape::None => false,
        }
    }

    pub fn rasterize(&self, image: &ImageBuf) -> BinaryMask {
        BinaryMask::from_fn(image.width(), image.height(), |x, y| {
            self.contains(image, x, y)
        })
        .expect("image dims are non-zero")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Rect { x, y, w, h } => write!(f, "rect {x} {y} {w} {h}"),
            Shape::Circle { cx, cy, r } => write!(f, "circle {cx} {cy} {r}"),
            Shape::Color([r, g, b]) => write!(f, "color {r} {g} {b}"),
            Shape::None => f.write_str("none"),
        }
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut words = s.split_whitespace();
        let head = words.next().ok_or("empty shape directive")?;
        let nums: Vec<i64> = words
            .map(|w| w.parse::<i64>().map_err(|e| format!("{w:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let arity = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(format!("`{head}` takes {n} numbers, got {}", nums.len()))
            }
        };
        match head {
            "rect" => {
                arity(4)?;
                if nums[2] < 0 || nums[3] < 0 {
                    return Err("rect size must be non-negative".into());
                }
                Ok(Shape::Rect {
                    x: nums[0],
                    y: nums[1],
                    w: nums[2],
                    h: nums[3],
                })
            }
            "circle" => {
                arity(3)?;
                if nums[2] < 0 {
                    return Err("circle radius must be non-negative".into());
                }
                Ok(Shape::Circle {
                    cx: nums[0],
                    cy: nums[1],
                    r: nums[2],
                })
            }
            "color" => {
                arity(3)?;
                let c = |v: i64| u8::try_from(v).map_err(|_| format!("color channel {v} out of range"));
                Ok(Shape::Color([c(nums[0])?, c(nums[1])?, c(nums[2])?]))
            }
            "none" => {
                arity(0)?;
                Ok(Shape::None)
            }
            other => Err(format!("unknown shape `{other}`")),
        }
    }
}

impl Serialize for Shape {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Shape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How the mock inpainter fills masked pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Fill {
    /// First three bytes of SHA-256(prompt text ‖ seed as little-endian u64).
    #[default]
    Stamp,
    /// Returns the input unchanged.
    Identity,
    Solid { rgb: [u8; 3] },
}

/// Stamp color for a (prompt, seed) pair.
pub fn stamp_color(prompt: &str, seed: u64) -> [u8; 3] {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    [d[0], d[1], d[2]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRule {
    pub prompt: String,
    /// `None` matches every variant seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillRule {
    pub prompt: String,
    pub fill: Fill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum JudgeRule {
    Always {
        value: bool,
    },
    ByInstruction {
        verdicts: BTreeMap<String, bool>,
        #[serde(default)]
        default: Option<bool>,
    },
    /// Success iff the fraction of changed pixels lies in `(0, max_fraction]`.
    EditedFraction {
        max_fraction: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedMetricValues {
    #[serde(default)]
    pub lpips: Option<f64>,
    #[serde(default)]
    pub clip: Option<f64>,
}

/// Script driving all mocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScenario {
    pub version: u32,
    #[serde(default)]
    pub localization_prompts: Vec<String>,
    #[serde(default)]
    pub localization_by_instruction: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub modification_prompts: Vec<String>,
    #[serde(default)]
    pub modification_by_instruction: BTreeMap<String, Vec<String>>,
    /// Judge scores keyed by stage, then candidate index. A missing index
    /// scores 0; a missing stage is a scenario miss.
    #[serde(default)]
    pub scores: BTreeMap<ScoreStage, BTreeMap<usize, f64>>,
    #[serde(default)]
    pub regions: Vec<RegionRule>,
    #[serde(default)]
    pub default_region: Option<Shape>,
    #[serde(default)]
    pub fills: Vec<FillRule>,
    #[serde(default)]
    pub default_fill: Option<Fill>,
    #[serde(default)]
    pub judge: Option<JudgeRule>,
    #[serde(default)]
    pub refuse_instructions: Vec<String>,
    #[serde(default)]
    pub metrics: ScriptedMetricValues,
}

impl Default for MockScenario {
    fn default() -> Self {
        Self {
            version: SCENARIO_VERSION,
            localization_prompts: Vec::new(),
            localization_by_instruction: BTreeMap::new(),
            modification_prompts: Vec::new(),
            modification_by_instruction: BTreeMap::new(),
            scores: BTreeMap::new(),
            regions: Vec::new(),
            default_region: None,
            fills: Vec::new(),
            default_fill: None,
            judge: None,
            refuse_instructions: Vec::new(),
            metrics: ScriptedMetricValues::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario schema version {found} is not supported (expected {SCENARIO_VERSION})")]
    Version { found: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("could not read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("could not parse scenario: {0}")]
    Json(#[from] serde_json::Error),
}

impl MockScenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCENARIO_VERSION {
            return Err(ScenarioError::Version { found });
        }
        let s: MockScenario = serde_json::from_value(raw)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version {
                found: self.version,
            });
        }
        let lists = std::iter::once(&self.localization_prompts)
            .chain(self.localization_by_instruction.values())
            .chain(std::iter::once(&self.modification_prompts))
            .chain(self.modification_by_instruction.values());
        for list in lists {
            if list.iter().any(|t| t.trim().is_empty()) {
                return Err(ScenarioError::Invalid("scripted prompt text is empty".into()));
            }
        }
        for (stage, table) in &self.scores {
            if let Some((i, s)) = table.iter().find(|(_, s)| !s.is_finite()) {
                return Err(ScenarioError::Invalid(format!(
                    "score {stage}[{i}] = {s} is not finite"
                )));
            }
        }
        if let Some(JudgeRule::EditedFraction { max_fraction }) = &self.judge {
            if !(0.0..=1.0).contains(max_fraction) {
                return Err(ScenarioError::Invalid("max_fraction must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn refuses(&self, instruction: &str) -> bool {
        self.refuse_instructions.iter().any(|r| r == instruction)
    }

    /// Sets the score table of one stage from a list (index i gets `scores[i]`).
    pub fn with_scores(mut self, stage: ScoreStage, scores: &[f64]) -> Self {
        self.scores
            .insert(stage, scores.iter().copied().enumerate().collect());
        self
    }
}

#[derive(Debug, Default)]
struct Counters {
    propose_localization: AtomicU64,
    propose_modification: AtomicU64,
    score: AtomicU64,
    judge: AtomicU64,
    segment: AtomicU64,
    inpaint: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> CallCounts {
        CallCounts {
            propose_localization: self.propose_localization.load(Ordering::SeqCst),
            propose_modification: self.propose_modification.load(Ordering::SeqCst),
            score: self.score.load(Ordering::SeqCst),
            judge: self.judge.load(Ordering::SeqCst),
            segment: self.segment.load(Ordering::SeqCst),
            inpaint: self.inpaint.load(Ordering::SeqCst),
        }
    }

    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::SeqCst);
    }
}

/// Reasoner answering from a scenario's tables.
#[derive(Debug)]
pub struct ScriptedReasoner {
    scenario: MockScenario,
    counters: Counters,
}

impl ScriptedReasoner {
    pub fn new(scenario: MockScenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        Ok(Self {
            scenario,
            counters: Counters::default(),
        })
    }

    pub fn counts(&self) -> CallCounts {
        self.counters.snapshot()
    }

    fn scripted(
        &self,
        by_instruction: &BTreeMap<String, Vec<String>>,
        global: &[String],
        instruction: &Instruction,
        kind: PromptKind,
        n: usize,
    ) -> Result<Vec<Prompt>, BackendError> {
        if self.scenario.refuses(instruction.as_str()) {
            return Err(BackendError::Refused(instruction.to_string()));
        }
        let list = by_instruction
            .get(instruction.as_str())
            .map(Vec::as_slice)
            .unwrap_or(global);
        if list.len() < n {
            return Err(BackendError::ScenarioMiss(format!(
                "{n} {kind:?} prompts for {:?} ({} scripted)",
                instruction.as_str(),
                list.len()
            )));
        }
        list[..n]
            .iter()
            .map(|t| Prompt::new(kind, t.clone()).map_err(|e| BackendError::BadResponse(e.to_string())))
            .collect()
    }
}

impl Reasoner for ScriptedReasoner {
    fn id(&self) -> &str {
        "scripted-reasoner"
    }

    fn propose_localization(
        &self,
        _image: &ImageBuf,
        instruction: &Instruction,
        n: usize,
        _seed: u64,
    ) -> Result<Vec<Prompt>, BackendError> {
        Counters::bump(&self.counters.propose_localization);
        self.scripted(
            &self.scenario.localization_by_instruction,
            &self.scenario.localization_prompts,
            instruction,
            PromptKind::Localization,
            n,
        )
    }

    fn propose_modification(
        &self,
        _image: &ImageBuf,
        instruction: &Instruction,
        _mask: &BinaryMask,
        n: usize,
        _seed: u64,
    ) -> Result<Vec<Prompt>, BackendError> {
        Counters::bump(&self.counters.propose_modification);
        self.scripted(
            &self.scenario.modification_by_instruction,
            &self.scenario.modification_prompts,
            instruction,
            PromptKind::Modification,
            n,
        )
    }

    fn score_candidates(
        &self,
        stage: ScoreStage,
        _context: &ScoreContext<'_>,
        candidates: Candidates<'_>,
    ) -> Result<Vec<f64>, BackendError> {
        Counters::bump(&self.counters.score);
        let table = self
            .scenario
            .scores
            .get(&stage)
            .ok_or_else(|| BackendError::ScenarioMiss(format!("score table `{stage}`")))?;
        Ok((0..candidates.len())
            .map(|i| table.get(&i).copied().unwrap_or(0.0))
            .collect())
    }

    fn judge_success(
        &self,
        original: &ImageBuf,
        edited: &ImageBuf,
        instruction: &Instruction,
    ) -> Result<Verdict, BackendError> {
        Counters::bump(&self.counters.judge);
        let rule = self
            .scenario
            .judge
            .as_ref()
            .ok_or_else(|| BackendError::ScenarioMiss("judge rule".into()))?;
        let (success, rationale) = match rule {
            JudgeRule::Always { value } => (*value, "scripted verdict".to_owned()),
            JudgeRule::ByInstruction { verdicts, default } => {
                let v = verdicts
                    .get(instruction.as_str())
                    .copied()
                    .or(*default)
                    .ok_or_else(|| {
                        BackendError::ScenarioMiss(format!("verdict for {:?}", instruction.as_str()))
                    })?;
                (v, format!("scripted verdict for {:?}", instruction.as_str()))
            }
            JudgeRule::EditedFraction { max_fraction } => {
                original.dims().ensure_eq(edited.dims()).map_err(|e| {
                    BackendError::Precondition(e.to_string())
                })?;
                let changed = original
                    .pixels()
                    .chunks_exact(3)
                    .zip(edited.pixels().chunks_exact(3))
                    .filter(|(a, b)| a != b)
                    .count();
                let fraction = changed as f64 / original.dims().area() as f64;
                (
                    changed > 0 && fraction <= *max_fraction,
                    format!("{changed} pixels changed ({fraction:.4} of the image)"),
                )
            }
        };
        Ok(Verdict { success, rationale })
    }
}

/// Segmenter that rasterizes scripted shapes.
#[derive(Debug)]
pub struct GeometricSegmenter {
    scenario: MockScenario,
    counters: Counters,
}

impl GeometricSegmenter {
    pub fn new(scenario: MockScenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        Ok(Self {
            scenario,
            counters: Counters::default(),
        })
    }

    pub fn counts(&self) -> CallCounts {
        self.counters.snapshot()
    }

    /// Exact (prompt, seed) rule first, then a seed-agnostic rule for the
    /// prompt, then the scenario default.
    pub fn shape_for(&self, prompt: &str, seed: u64) -> Option<Shape> {
        let rules = &self.scenario.regions;
        rules
            .iter()
            .find(|r| r.prompt == prompt && r.seed == Some(seed))
            .or_else(|| rules.iter().find(|r| r.prompt == prompt && r.seed.is_none()))
            .map(|r| r.shape)
            .or(self.scenario.default_region)
    }
}

impl Segmenter for GeometricSegmenter {
    fn id(&self) -> &str {
        "geometric-segmenter"
    }

    fn segment(
        &self,
        image: &ImageBuf,
        prompt: &Prompt,
        variant_seed: u64,
    ) -> Result<BinaryMask, BackendError> {
        Counters::bump(&self.counters.segment);
        let shape = self.shape_for(prompt.text(), variant_seed).ok_or_else(|| {
            BackendError::ScenarioMiss(format!(
                "region for {:?} (seed {variant_seed})",
                prompt.text()
            ))
        })?;
        Ok(shape.rasterize(image))
    }
}

/// Inpainter that only ever writes masked pixels.
#[derive(Debug)]
pub struct StampInpainter {
    scenario: MockScenario,
    counters: Counters,
}

impl StampInpainter {
    pub fn new(scenario: MockScenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        Ok(Self {
            scenario,
            counters: Counters::default(),
        })
    }

    pub fn counts(&self) -> CallCounts {
        self.counters.snapshot()
    }

    fn fill_for(&self, prompt: &str) -> Fill {
        self.scenario
            .fills
            .iter()
            .find(|r| r.prompt == prompt)
            .map(|r| r.fill)
            .or(self.scenario.default_fill)
            .unwrap_or_default()
    }
}

impl Inpainter for StampInpainter {
    fn id(&self) -> &str {
        "stamp-inpainter"
    }

    fn inpaint(
        &self,
        image: &ImageBuf,
        mask: &BinaryMask,
        prompt: &Prompt,
        seed: u64,
    ) -> Result<ImageBuf, BackendError> {
        Counters::bump(&self.counters.inpaint);
        image
            .dims()
            .ensure_eq(mask.dims())
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        if self.scenario.refuses(prompt.text()) {
            return Err(BackendError::Refused(prompt.text().to_owned()));
        }
        let rgb = match self.fill_for(prompt.text()) {
            Fill::Identity => return Ok(image.clone()),
            Fill::Stamp => stamp_color(prompt.text(), seed),
            Fill::Solid { rgb } => rgb,
        };
        let mut pixels = image.pixels().to_vec();
        for (px, set) in pixels.chunks_exact_mut(3).zip(mask.bits()) {
            if *set {
                px.copy_from_slice(&rgb);
            }
        }
        Ok(ImageBuf::new(image.width(), image.height(), pixels).expect("same dims"))
    }
}

/// Metric backend returning scripted values.
#[derive(Debug)]
pub struct ScriptedMetrics {
    values: ScriptedMetricValues,
}

impl ScriptedMetrics {
    pub fn new(values: ScriptedMetricValues) -> Self {
        Self { values }
    }
}

impl MetricBackend for ScriptedMetrics {
    fn lpips(&self, a: &ImageBuf, b: &ImageBuf) -> Result<f64, BackendError> {
        if a == b {
            return Ok(0.0);
        }
        self.values
            .lpips
            .ok_or_else(|| BackendError::ScenarioMiss("lpips value".into()))
    }

    fn clip(&self, _image: &ImageBuf, _text: &str) -> Result<f64, BackendError> {
        self.values
            .clip
            .ok_or_else(|| BackendError::ScenarioMiss("clip value".into()))
    }
}

/// The three scripted model mocks built from one scenario.
#[derive(Debug)]
pub struct MockSuite {
    pub reasoner: std::sync::Arc<ScriptedReasoner>,
    pub segmenter: std::sync::Arc<GeometricSegmenter>,
    pub inpainter: std::sync::Arc<StampInpainter>,
    pub metrics: std::sync::Arc<ScriptedMetrics>,
}

impl MockSuite {
    pub fn new(scenario: MockScenario) -> Result<Self, ScenarioError> {
        Ok(Self {
            reasoner: std::sync::Arc::new(ScriptedReasoner::new(scenario.clone())?),
            segmenter: std::sync::Arc::new(GeometricSegmenter::new(scenario.clone())?),
            metrics: std::sync::Arc::new(ScriptedMetrics::new(scenario.metrics.clone())),
            inpainter: std::sync::Arc::new(StampInpainter::new(scenario)?),
        })
    }

    /// Calls made so far across all three mocks.
    pub fn counts(&self) -> CallCounts {
        let r = self.reasoner.counts();
        CallCounts {
            segment: self.segmenter.counts().segment,
            inpaint: self.inpainter.counts().inpaint,
            ..r
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{checked_inpaint, checked_segment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img16() -> ImageBuf {
        ImageBuf::filled(16, 16, [10, 20, 30]).unwrap()
    }

    fn instr(s: &str) -> Instruction {
        Instruction::new(s).unwrap()
    }

    #[test]
    fn shape_directives_parse_and_print() {
        for s in ["rect 2 2 4 4", "circle 5 5 3", "color 1 2 3", "none"] {
            assert_eq!(s.parse::<Shape>().unwrap().to_string(), s);
        }
        assert!("rect 1 2".parse::<Shape>().is_err());
        assert!("hexagon 1".parse::<Shape>().is_err());
        assert!("color 300 0 0".parse::<Shape>().is_err());
    }

    #[test]
    fn rect_directive_sets_exactly_its_pixels() {
        let scenario = MockScenario {
            regions: vec![RegionRule {
                prompt: "box".into(),
                seed: None,
                shape: "rect 2 2 4 4".parse().unwrap(),
            }],
            ..Default::default()
        };
        let seg = GeometricSegmenter::new(scenario).unwrap();
        let mask = checked_segment(&seg, &img16(), &Prompt::localization("box").unwrap(), 0).unwrap();
        assert_eq!(mask.popcount(), 16);
        for y in 0..16 {
            for x in 0..16 {
                let inside = (2..6).contains(&x) && (2..6).contains(&y);
                assert_eq!(mask.get(x, y), inside);
            }
        }
    }

    #[test]
    fn shapes_are_clipped() {
        let img = img16();
        let m = "rect -3 -3 6 6".parse::<Shape>().unwrap().rasterize(&img);
        assert_eq!(m.popcount(), 9);
        let c = "circle 0 0 2".parse::<Shape>().unwrap().rasterize(&img);
        // (0,0),(1,0),(2,0),(0,1),(1,1),(0,2)
        assert_eq!(c.popcount(), 6);
    }

    #[test]
    fn none_directive_and_variant_seeds() {
        let scenario = MockScenario {
            regions: vec![
                RegionRule { prompt: "p".into(), seed: Some(0), shape: "rect 0 0 2 2".parse().unwrap() },
                RegionRule { prompt: "p".into(), seed: Some(1), shape: "rect 4 4 3 3".parse().unwrap() },
                RegionRule { prompt: "nothing".into(), seed: None, shape: Shape::None },
            ],
            ..Default::default()
        };
        let seg = GeometricSegmenter::new(scenario).unwrap();
        let p = Prompt::localization("p").unwrap();
        let a = seg.segment(&img16(), &p, 0).unwrap();
        let b = seg.segment(&img16(), &p, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(seg.segment(&img16(), &p, 0).unwrap(), a);
        let none = seg
            .segment(&img16(), &Prompt::localization("nothing").unwrap(), 5)
            .unwrap();
        assert!(none.is_empty());
        assert!(matches!(
            seg.segment(&img16(), &p, 2),
            Err(BackendError::ScenarioMiss(_))
        ));
        assert_eq!(seg.counts().segment, 5);
    }

    #[test]
    fn scripted_prompts_in_order() {
        let scenario = MockScenario {
            localization_prompts: vec!["the red car".into(), "the left car".into()],
            modification_prompts: vec![
                "replace modern furniture with rustic wooden elements".into(),
                "b".into(),
            ],
            ..Default::default()
        };
        let r = ScriptedReasoner::new(scenario).unwrap();
        assert_eq!(r.counts(), CallCounts::default());
        let img = img16();
        let got = r.propose_localization(&img, &instr("x"), 2, 0).unwrap();
        let texts: Vec<&str> = got.iter().map(|p| p.text()).collect();
        assert_eq!(texts, ["the red car", "the left car"]);
        assert_eq!(r.propose_localization(&img, &instr("x"), 1, 0).unwrap().len(), 1);
        let mask = BinaryMask::empty(16, 16).unwrap();
        let plan = r.propose_modification(&img, &instr("x"), &mask, 1, 0).unwrap();
        assert_eq!(plan[0].text(), "replace modern furniture with rustic wooden elements");
        assert_eq!(plan[0].kind(), PromptKind::Modification);
        let both = r.propose_modification(&img, &instr("x"), &mask, 2, 0).unwrap();
        assert_ne!(both[0], both[1]);
        assert!(matches!(
            r.propose_localization(&img, &instr("x"), 3, 0),
            Err(BackendError::ScenarioMiss(_))
        ));
        assert_eq!(r.counts().propose_localization, 3);
        assert_eq!(r.counts().propose_modification, 2);
    }

    #[test]
    fn score_tables() {
        let scenario = MockScenario::default().with_scores(ScoreStage::Mask, &[3.0, 9.0, 5.0]);
        let r = ScriptedReasoner::new(scenario).unwrap();
        let img = img16();
        let ctx = ScoreContext { image: &img, instruction: None, selected_prompt: None, mask: None };
        let masks = vec![BinaryMask::empty(16, 16).unwrap(); 3];
        assert_eq!(
            r.score_candidates(ScoreStage::Mask, &ctx, Candidates::Masks(&masks)).unwrap(),
            vec![3.0, 9.0, 5.0]
        );
        assert_eq!(
            r.score_candidates(ScoreStage::Mask, &ctx, Candidates::Masks(&masks[..1])).unwrap(),
            vec![3.0]
        );
        assert!(matches!(
            r.score_candidates(ScoreStage::LocPrompt, &ctx, Candidates::Masks(&masks)),
            Err(BackendError::ScenarioMiss(_))
        ));
    }

    #[test]
    fn score_lengths_match_for_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let table: Vec<f64> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..11) as f64).collect();
            let n = rng.gen_range(1..10);
            let r = ScriptedReasoner::new(
                MockScenario::default().with_scores(ScoreStage::EditedImage, &table),
            )
            .unwrap();
            let img = img16();
            let ctx = ScoreContext { image: &img, instruction: None, selected_prompt: None, mask: None };
            let images = vec![img.clone(); n];
            let scores = r
                .score_candidates(ScoreStage::EditedImage, &ctx, Candidates::Images(&images))
                .unwrap();
            assert_eq!(scores.len(), n);
            for (i, s) in scores.iter().enumerate() {
                assert_eq!(*s, table.get(i).copied().unwrap_or(0.0));
            }
        }
    }

    #[test]
    fn judge_verdicts() {
        let img = img16();
        for v in [true, false] {
            let r = ScriptedReasoner::new(MockScenario {
                judge: Some(JudgeRule::Always { value: v }),
                ..Default::default()
            })
            .unwrap();
            assert_eq!(r.judge_success(&img, &img, &instr("x")).unwrap().success, v);
        }
        let r = ScriptedReasoner::new(MockScenario::default()).unwrap();
        assert!(matches!(
            r.judge_success(&img, &img, &instr("x")),
            Err(BackendError::ScenarioMiss(_))
        ));
        let small = ImageBuf::filled(2, 2, [0, 0, 0]).unwrap();
        assert!(matches!(
            crate::backends::checked_judge(&r, &img, &small, &instr("x")),
            Err(BackendError::Precondition(_))
        ));
    }

    #[test]
    fn edited_fraction_judge() {
        let r = ScriptedReasoner::new(MockScenario {
            judge: Some(JudgeRule::EditedFraction { max_fraction: 0.5 }),
            ..Default::default()
        })
        .unwrap();
        let img = img16();
        let mut small_edit = img.clone();
        small_edit.set_pixel(0, 0, [0, 0, 0]);
        let all = ImageBuf::filled(16, 16, [0, 0, 0]).unwrap();
        assert!(!r.judge_success(&img, &img, &instr("x")).unwrap().success);
        assert!(r.judge_success(&img, &small_edit, &instr("x")).unwrap().success);
        assert!(!r.judge_success(&img, &all, &instr("x")).unwrap().success);
    }

    #[test]
    fn stamp_respects_mask_and_is_reproducible() {
        let inp = StampInpainter::new(MockScenario::default()).unwrap();
        let img = img16();
        let plan = Prompt::modification("paint it").unwrap();
        let empty = BinaryMask::empty(16, 16).unwrap();
        assert_eq!(inp.inpaint(&img, &empty, &plan, 3).unwrap(), img);
        let full = crate::image::full_mask(16, 16).unwrap();
        let a = inp.inpaint(&img, &full, &plan, 3).unwrap();
        let b = inp.inpaint(&img, &full, &plan, 3).unwrap();
        assert_eq!(a, b);
        let c = stamp_color("paint it", 3);
        assert!(a.pixels().chunks_exact(3).all(|p| p == c));
    }

    #[test]
    fn stamp_never_touches_unmasked_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inp = StampInpainter::new(MockScenario::default()).unwrap();
        for _ in 0..50 {
            let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));
            let px: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
            let img = ImageBuf::new(w, h, px).unwrap();
            let mask = BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(0.3)).unwrap();
            let plan = Prompt::modification(format!("plan {}", rng.gen::<u32>())).unwrap();
            let out = checked_inpaint(&inp, &img, &mask, &plan, rng.gen()).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(x, y) {
                        assert_eq!(out.pixel(x, y), img.pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn fill_rules() {
        let inp = StampInpainter::new(MockScenario {
            fills: vec![FillRule { prompt: "keep".into(), fill: Fill::Identity }],
            default_fill: Some(Fill::Solid { rgb: [1, 2, 3] }),
            ..Default::default()
        })
        .unwrap();
        let img = img16();
        let full = crate::image::full_mask(16, 16).unwrap();
        assert_eq!(
            inp.inpaint(&img, &full, &Prompt::modification("keep").unwrap(), 0).unwrap(),
            img
        );
        let other = inp
            .inpaint(&img, &full, &Prompt::modification("x").unwrap(), 0)
            .unwrap();
        assert_eq!(other.pixel(3, 3), [1, 2, 3]);
    }

    #[test]
    fn scenario_json_round_trip_and_version_check() {
        let s = MockScenario {
            localization_prompts: vec!["a".into()],
            regions: vec![RegionRule { prompt: "a".into(), seed: Some(2), shape: "circle 1 1 1".parse().unwrap() }],
            judge: Some(JudgeRule::EditedFraction { max_fraction: 0.25 }),
            ..Default::default()
        }
        .with_scores(ScoreStage::LocPrompt, &[1.0, 2.0]);
        let text = serde_json::to_string_pretty(&s).unwrap();
        assert_eq!(MockScenario::from_json(&text).unwrap(), s);
        let wrong = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            MockScenario::from_json(&wrong),
            Err(ScenarioError::Version { found: 9 })
        ));
    }

    #[test]
    fn scripted_metrics() {
        let m = ScriptedMetrics::new(ScriptedMetricValues { lpips: Some(0.047), clip: Some(21.860) });
        let img = img16();
        let other = ImageBuf::filled(16, 16, [0, 0, 0]).unwrap();
        assert_eq!(m.lpips(&img, &img).unwrap(), 0.0);
        assert_eq!(m.lpips(&img, &other).unwrap(), 0.047);
        assert_eq!(m.clip(&img, "x").unwrap(), 21.860);
    }
}
