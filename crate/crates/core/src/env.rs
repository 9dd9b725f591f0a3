//! Synthetic referring-segmentation scenes, the action grammar and its parser.
//!
//! A scene is a small grid holding non-overlapping coloured rectangles and a
//! three-token instruction that refers to one of them. Two annotation
//! conventions exist: `source` labels the full rectangle, `target` labels the
//! rectangle with its one-cell outer ring removed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng;

/// Inclusive cell bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl Rect {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2);
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1 + 1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// True when the rectangles are closer than `gap` empty cells.
    fn too_close(&self, other: &Rect, gap: usize) -> bool {
        self.x1 <= other.x2 + gap && other.x1 <= self.x2 + gap && self.y1 <= other.y2 + gap && other.y1 <= self.y2 + gap
    }

    /// One-cell erosion; `None` when the rectangle is thinner than 3 cells.
    pub fn eroded(&self) -> Option<Rect> {
        (self.width() >= 3 && self.height() >= 3).then(|| Rect::new(self.x1 + 1, self.y1 + 1, self.x2 - 1, self.y2 - 1))
    }

    /// Best IoU a source-convention mask of this rectangle can reach against the target convention.
    pub fn erosion_ceiling(&self) -> f64 {
        let (w, h) = (self.width() as f64, self.height() as f64);
        ((w - 2.0).max(0.0) * (h - 2.0).max(0.0)) / (w * h)
    }

    pub fn flipped_h(&self, width: usize) -> Rect {
        Rect::new(width - 1 - self.x2, self.y1, width - 1 - self.x1, self.y2)
    }
}

/// Binary mask over an `height × width` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, cells: vec![false; width * height] }
    }

    pub fn from_rects(width: usize, height: usize, rects: &[Rect]) -> Self {
        let mut m = Self::empty(width, height);
        for r in rects {
            for y in r.y1..=r.y2 {
                for x in r.x1..=r.x2 {
                    m.cells[y * width + x] = true;
                }
            }
        }
        m
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())
            .expect("mask dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn index(self) -> usize {
        match self {
            SizeClass::Small => 0,
            SizeClass::Large => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::usage(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrammarKind {
    /// `[color, size|any, x1, y1, x2, y2, EOS]`
    Standard,
    /// `[concept, preset-box]`
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub colors: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Objects with area at most this many cells are `small`.
    pub area_threshold: usize,
    pub grammar: GrammarKind,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            colors: 4,
            min_objects: 2,
            max_objects: 4,
            min_side: 3,
            max_side: 7,
            area_threshold: 20,
            grammar: GrammarKind::Standard,
        }
    }
}

impl EnvConfig {
    /// Small-grid configuration with the two-token grammar used by the enumeration oracle.
    pub fn micro() -> Self {
        Self {
            width: 8,
            height: 8,
            colors: 4,
            min_objects: 2,
            max_objects: 3,
            min_side: 3,
            max_side: 4,
            area_threshold: 9,
            grammar: GrammarKind::Micro,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.width < 6 || self.height < 6 {
            errs.push(format!("env: grid {}x{} smaller than 6x6", self.width, self.height));
        }
        if self.colors == 0 {
            errs.push("env.colors must be ≥ 1".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            errs.push(format!("env: object range {}..={} invalid", self.min_objects, self.max_objects));
        }
        if self.min_side < 3 || self.min_side > self.max_side {
            errs.push(format!("env: side range {}..={} invalid (min 3)", self.min_side, self.max_side));
        }
        if self.max_side > self.width.min(self.height) {
            errs.push("env.max_side exceeds the grid".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn grammar(&self) -> ActionGrammar {
        ActionGrammar::new(self)
    }

    pub fn instruction_vocab(&self) -> usize {
        INSTR_FIXED_WORDS + self.colors
    }

    pub fn observation_dim(&self) -> usize {
        self.width * self.height * (self.colors + 1) + INSTRUCTION_LEN * self.instruction_vocab()
    }

    /// Stable hex digest of the canonical JSON form.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub rect: Rect,
    pub color: usize,
    pub size_class: SizeClass,
}

/// Instruction words. Colors follow the fixed words.
pub const WORD_THE: usize = 0;
pub const WORD_SMALL: usize = 1;
pub const WORD_LARGE: usize = 2;
pub const WORD_OBJECT: usize = 3;
pub const WORD_ONE: usize = 4;
const INSTR_FIXED_WORDS: usize = 5;
pub const INSTRUCTION_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "the <color> object", color unique in the scene
    Color,
    /// "<size> <color> object", unique among objects
    SizedColor,
    /// "the <color> one", several matches, the largest is meant
    Ambiguous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub instruction: Vec<usize>,
    pub template: Template,
    pub target_ids: Vec<usize>,
    pub gt_mask_source: Mask,
    pub gt_mask_target: Mask,
    pub seed: u64,
    pub domain: Domain,
}

impl GridScene {
    /// Ground truth under the scene's reward convention.
    pub fn official_gt(&self) -> &Mask {
        match self.domain {
            Domain::Source => &self.gt_mask_source,
            Domain::Target => &self.gt_mask_target,
        }
    }

    pub fn target(&self) -> &SceneObject {
        &self.objects[self.target_ids[0]]
    }

    /// Colour index per cell, `None` for background.
    pub fn color_at(&self, x: usize, y: usize) -> Option<usize> {
        self.objects.iter().find(|o| o.rect.contains(x, y)).map(|o| o.color)
    }

    /// Mean erosion ceiling over the referred objects.
    pub fn erosion_ceiling(&self) -> f64 {
        let ids = &self.target_ids;
        ids.iter().map(|&i| self.objects[i].rect.erosion_ceiling()).sum::<f64>() / ids.len() as f64
    }

    /// Mirror image along the vertical axis.
    pub fn flipped_h(&self) -> GridScene {
        let mut s = self.clone();
        for o in &mut s.objects {
            o.rect = o.rect.flipped_h(self.width);
        }
        let flip = |m: &Mask| {
            let mut out = Mask::empty(m.width, m.height);
            for y in 0..m.height {
                for x in 0..m.width {
                    out.cells[y * m.width + x] = m.get(m.width - 1 - x, y);
                }
            }
            out
        };
        s.gt_mask_source = flip(&self.gt_mask_source);
        s.gt_mask_target = flip(&self.gt_mask_target);
        s
    }
}

fn size_class(rect: &Rect, config: &EnvConfig) -> SizeClass {
    if rect.area() <= config.area_threshold {
        SizeClass::Small
    } else {
        SizeClass::Large
    }
}

fn place_objects(rng: &mut rng::StreamRng, config: &EnvConfig, count: usize) -> Option<Vec<Rect>> {
    let mut rects: Vec<Rect> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..200 {
            let w = rng.gen_range(config.min_side..=config.max_side);
            let h = rng.gen_range(config.min_side..=config.max_side);
            let x1 = rng.gen_range(0..=config.width - w);
            let y1 = rng.gen_range(0..=config.height - h);
            let r = Rect::new(x1, y1, x1 + w - 1, y1 + h - 1);
            if rects.iter().all(|o| !o.too_close(&r, 1)) {
                rects.push(r);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(rects)
}

/// Deterministic scene for `(seed, domain, config)`.
pub fn generate_scene(seed: u64, domain: Domain, config: &EnvConfig) -> Result<GridScene> {
    config.check()?;
    for attempt in 0u64.. {
        let mut rng = rng::stream(seed, "scene", &[attempt]);
        let count = rng.gen_range(config.min_objects..=config.max_objects);
        let Some(rects) = place_objects(&mut rng, config, count) else { continue };
        let mut colors: Vec<usize> = (0..count).map(|_| rng.gen_range(0..config.colors)).collect();

        let template = match rng.gen_range(0..3) {
            0 => Template::Color,
            1 => Template::SizedColor,
            _ if count >= 2 => Template::Ambiguous,
            _ => Template::Color,
        };
        let pick = rng.gen_range(0..count);
        let size = |i: usize| size_class(&rects[i], config);
        let target = match template {
            Template::Color => {
                if config.colors < 2 && count > 1 {
                    continue;
                }
                for i in 0..count {
                    while i != pick && colors[i] == colors[pick] {
                        colors[i] = rng.gen_range(0..config.colors);
                    }
                }
                pick
            }
            Template::SizedColor => {
                for i in 0..count {
                    while i != pick && colors[i] == colors[pick] && size(i) == size(pick) {
                        colors[i] = rng.gen_range(0..config.colors);
                        if config.colors < 2 {
                            break;
                        }
                    }
                }
                if (0..count).any(|i| i != pick && colors[i] == colors[pick] && size(i) == size(pick)) {
                    continue;
                }
                pick
            }
            Template::Ambiguous => {
                let mut other = rng.gen_range(0..count - 1);
                if other >= pick {
                    other += 1;
                }
                colors[other] = colors[pick];
                let c = colors[pick];
                // largest matching object, lowest index on ties
                (0..count)
                    .filter(|&i| colors[i] == c)
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if rects[b].area() >= rects[i].area() => Some(b),
                        _ => Some(i),
                    })
                    .expect("at least two matches")
            }
        };

        let objects: Vec<SceneObject> = rects
            .iter()
            .zip(&colors)
            .map(|(r, &c)| SceneObject { rect: *r, color: c, size_class: size_class(r, config) })
            .collect();
        let color_word = INSTR_FIXED_WORDS + objects[target].color;
        let instruction = match template {
            Template::Color => vec![WORD_THE, color_word, WORD_OBJECT],
            Template::SizedColor => {
                let w = match objects[target].size_class {
                    SizeClass::Small => WORD_SMALL,
                    SizeClass::Large => WORD_LARGE,
                };
                vec![w, color_word, WORD_OBJECT]
            }
            Template::Ambiguous => vec![WORD_THE, color_word, WORD_ONE],
        };
        let rect = objects[target].rect;
        let eroded = rect.eroded().expect("min_side ≥ 3 keeps erosion non-empty");
        return Ok(GridScene {
            width: config.width,
            height: config.height,
            gt_mask_source: Mask::from_rects(config.width, config.height, &[rect]),
            gt_mask_target: Mask::from_rects(config.width, config.height, &[eroded]),
            objects,
            instruction,
            template,
            target_ids: vec![target],
            seed,
            domain,
        });
    }
    unreachable!("scene generation loop exits by return")
}

/// Flattened per-cell one-hot occupancy (background first) followed by one-hot instruction tokens.
pub fn render_observation(scene: &GridScene, config: &EnvConfig) -> Tensor {
    let channels = config.colors + 1;
    let vocab = config.instruction_vocab();
    let mut v = vec![0.0; config.observation_dim()];
    for y in 0..scene.height {
        for x in 0..scene.width {
            let ch = scene.color_at(x, y).map_or(0, |c| c + 1);
            v[(y * scene.width + x) * channels + ch] = 1.0;
        }
    }
    let base = scene.width * scene.height * channels;
    for (i, &tok) in scene.instruction.iter().enumerate() {
        v[base + i * vocab + tok] = 1.0;
    }
    Tensor::vector(v)
}

/// What the policy hands to the tool.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolPrompt {
    pub color: usize,
    /// `None` is the size wildcard.
    pub size: Option<SizeClass>,
    pub boxes: Vec<Rect>,
}

impl ToolPrompt {
    /// Row of the concept embedding table: `color * 3 + {small, large, any}`.
    pub fn concept_index(&self) -> usize {
        self.color * 3 + self.size.map_or(2, SizeClass::index)
    }

    pub fn in_boxes(&self, x: usize, y: usize) -> bool {
        self.boxes.iter().any(|b| b.contains(x, y))
    }
}

/// Fixed-length token grammar; token values index each step's vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionGrammar {
    pub kind: GrammarKind,
    pub step_vocab: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub presets: Vec<Rect>,
}

pub const SIZE_TOKEN_ANY: usize = 2;

impl ActionGrammar {
    pub fn new(config: &EnvConfig) -> Self {
        match config.grammar {
            GrammarKind::Standard => Self {
                kind: GrammarKind::Standard,
                step_vocab: vec![config.colors, 3, config.width, config.height, config.width, config.height, 1],
                width: config.width,
                height: config.height,
                presets: Vec::new(),
            },
            GrammarKind::Micro => {
                let cuts = |n: usize| -> Vec<(usize, usize)> { (0..3).map(|i| (i * n / 3, (i + 1) * n / 3 - 1)).collect() };
                let (xs, ys) = (cuts(config.width), cuts(config.height));
                let presets = ys.iter().flat_map(|&(y1, y2)| xs.iter().map(move |&(x1, x2)| Rect::new(x1, y1, x2, y2))).collect();
                Self {
                    kind: GrammarKind::Micro,
                    step_vocab: vec![config.colors, 9],
                    width: config.width,
                    height: config.height,
                    presets,
                }
            }
        }
    }

    pub fn max_len(&self) -> usize {
        self.step_vocab.len()
    }

    /// Total width of the concatenated per-step one-hot prefix.
    pub fn prefix_dim(&self) -> usize {
        self.step_vocab.iter().sum()
    }

    pub fn prefix_offset(&self, step: usize) -> usize {
        self.step_vocab[..step].iter().sum()
    }

    /// Number of token sequences.
    pub fn sequence_count(&self) -> u128 {
        self.step_vocab.iter().map(|&v| v as u128).product()
    }

    /// Parses a token sequence; `Ok(None)` means a well-formed but invalid prompt.
    pub fn parse(&self, tokens: &[usize]) -> Result<Option<ToolPrompt>> {
        if tokens.len() != self.max_len() {
            return Err(Error::usage(format!("expected {} tokens, got {}", self.max_len(), tokens.len())));
        }
        if tokens.iter().zip(&self.step_vocab).any(|(&t, &v)| t >= v) {
            return Ok(None);
        }
        Ok(match self.kind {
            GrammarKind::Standard => {
                let (x1, y1, x2, y2) = (tokens[2], tokens[3], tokens[4], tokens[5]);
                if x1 > x2 || y1 > y2 || x2 >= self.width || y2 >= self.height {
                    return Ok(None);
                }
                let size = match tokens[1] {
                    0 => Some(SizeClass::Small),
                    1 => Some(SizeClass::Large),
                    _ => None,
                };
                Some(ToolPrompt { color: tokens[0], size, boxes: vec![Rect::new(x1, y1, x2, y2)] })
            }
            GrammarKind::Micro => Some(ToolPrompt { color: tokens[0], size: None, boxes: vec![self.presets[tokens[1]]] }),
        })
    }

    /// Canonical tokens for a prompt (inverse of `parse` on valid sequences).
    pub fn tokens_for(&self, scene: &GridScene, object: usize) -> Vec<usize> {
        let o = &scene.objects[object];
        match self.kind {
            GrammarKind::Standard => vec![o.color, o.size_class.index(), o.rect.x1, o.rect.y1, o.rect.x2, o.rect.y2, 0],
            GrammarKind::Micro => {
                let gt = Mask::from_rects(scene.width, scene.height, &[o.rect]);
                let best = (0..self.presets.len())
                    .max_by(|&a, &b| {
                        let ia = crate::objectives::mask_iou(&Mask::from_rects(self.width, self.height, &[self.presets[a]]), &gt).unwrap();
                        let ib = crate::objectives::mask_iou(&Mask::from_rects(self.width, self.height, &[self.presets[b]]), &gt).unwrap();
                        ia.partial_cmp(&ib).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                vec![o.color, best]
            }
        }
    }

    /// Fraction of uniformly drawn sequences that parse as valid.
    pub fn uniform_validity(&self) -> f64 {
        match self.kind {
            GrammarKind::Micro => 1.0,
            GrammarKind::Standard => {
                let ordered = |n: usize| (n + 1) as f64 / (2 * n) as f64;
                ordered(self.width) * ordered(self.height)
            }
        }
    }
}

/// Tokens describing the scene's first referred object, each replaced with
/// probability `noise` by a uniform draw from its step vocabulary.
pub fn scripted_demonstration(scene: &GridScene, grammar: &ActionGrammar, noise: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut tokens = grammar.tokens_for(scene, scene.target_ids[0]);
    for (t, &v) in tokens.iter_mut().zip(&grammar.step_vocab) {
        if rng.gen::<f64>() < noise {
            *t = rng.gen_range(0..v);
        }
    }
    tokens
}
