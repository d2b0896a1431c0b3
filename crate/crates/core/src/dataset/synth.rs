//! Procedural garden scenes: a paper-toned (or night) background with a
//! handful of silhouettes, each placed on the left or right half.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetRecord, Example};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    Pavilion,
    Bridge,
    Pond,
    Pine,
    Rock,
    Moon,
}

pub const ELEMENTS: [Element; 6] = [
    Element::Pavilion,
    Element::Bridge,
    Element::Pond,
    Element::Pine,
    Element::Rock,
    Element::Moon,
];

impl Element {
    pub fn word(self) -> &'static str {
        match self {
            Element::Pavilion => "pavilion",
            Element::Bridge => "bridge",
            Element::Pond => "pond",
            Element::Pine => "pine",
            Element::Rock => "rock",
            Element::Moon => "moon",
        }
    }

    pub fn is_architecture(self) -> bool {
        matches!(self, Element::Pavilion | Element::Bridge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    /// Dark blue-black ground with pale silhouettes.
    InkNight,
    /// Warm paper ground with ink silhouettes.
    Paper,
}

impl Style {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Style::Paper),
            "ink-night" | "ink_night" => Ok(Style::InkNight),
            other => Err(Error::Config(format!("unknown style `{other}` (expected paper or ink-night)"))),
        }
    }

    fn background(self) -> [f32; 3] {
        match self {
            Style::Paper => [0.86, 0.78, 0.62],
            Style::InkNight => [0.07, 0.09, 0.17],
        }
    }

    fn color(self, e: Element) -> [f32; 3] {
        match (self, e) {
            (Style::Paper, Element::Pavilion) => [0.55, 0.16, 0.12],
            (Style::Paper, Element::Bridge) => [0.30, 0.22, 0.16],
            (Style::Paper, Element::Pond) => [0.38, 0.58, 0.62],
            (Style::Paper, Element::Pine) => [0.12, 0.30, 0.16],
            (Style::Paper, Element::Rock) => [0.45, 0.45, 0.48],
            (Style::Paper, Element::Moon) => [0.97, 0.93, 0.80],
            (Style::InkNight, Element::Pavilion) => [0.88, 0.52, 0.30],
            (Style::InkNight, Element::Bridge) => [0.70, 0.70, 0.78],
            (Style::InkNight, Element::Pond) => [0.20, 0.32, 0.55],
            (Style::InkNight, Element::Pine) => [0.35, 0.62, 0.45],
            (Style::InkNight, Element::Rock) => [0.55, 0.50, 0.62],
            (Style::InkNight, Element::Moon) => [1.00, 0.96, 0.72],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Left,
    Right,
}

impl Placement {
    pub fn word(self) -> &'static str {
        match self {
            Placement::Left => "left",
            Placement::Right => "right",
        }
    }
}

/// Per-element inclusion probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementProbabilities(pub [f64; 6]);

impl Default for ElementProbabilities {
    fn default() -> Self {
        ElementProbabilities([0.5, 0.35, 0.45, 0.5, 0.35, 0.3])
    }
}

impl ElementProbabilities {
    pub fn get(&self, e: Element) -> f64 {
        self.0[e as usize]
    }
}

/// One drawn element with its jittered geometry in unit coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placed {
    pub element: Element,
    pub side: Placement,
    /// Horizontal center in `[0, 1]`.
    pub cx: f32,
    /// Size multiplier around 1.
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub elements: Vec<Placed>,
    pub style: Style,
}

fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws the scene layout for record `index`; independent of rendering so
/// layout statistics can be checked cheaply.
pub fn sample_scene(seed: u64, index: u64, probs: &ElementProbabilities, style: Style) -> SceneSpec {
    let mut rng = record_rng(seed, index);
    let mut elements = Vec::new();
    for e in ELEMENTS {
        // Always consume the same number of draws per element so one
        // element's inclusion never shifts another's geometry.
        let include = rng.random::<f64>() < probs.get(e);
        let side = if rng.random::<bool>() { Placement::Left } else { Placement::Right };
        let offset: f32 = rng.random_range(0.12..0.38);
        let scale: f32 = rng.random_range(0.85..1.15);
        if include {
            let cx = match side {
                Placement::Left => offset,
                Placement::Right => 1.0 - offset,
            };
            elements.push(Placed {
                element: e,
                side,
                cx,
                scale,
            });
        }
    }
    SceneSpec { elements, style }
}

/// Deterministic caption naming every drawn element and its side.
pub fn caption_for(scene: &SceneSpec) -> String {
    if scene.elements.is_empty() {
        return "an empty garden scene".to_string();
    }
    let parts: Vec<String> = scene
        .elements
        .iter()
        .map(|p| format!("a {} on the {}", p.element.word(), p.side.word()))
        .collect();
    let list = match parts.len() {
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    };
    format!("a garden scene with {list}")
}

/// Vocabulary covering every word the caption grammar can emit, so toy
/// corpora of any size or style share one tokenizer.
pub fn toy_vocab() -> Vocab {
    let all = |side| SceneSpec {
        elements: ELEMENTS
            .iter()
            .map(|&element| Placed {
                element,
                side,
                cx: 0.5,
                scale: 1.0,
            })
            .collect(),
        style: Style::Paper,
    };
    let empty = SceneSpec {
        elements: Vec::new(),
        style: Style::Paper,
    };
    let texts = [caption_for(&empty), caption_for(&all(Placement::Left)), caption_for(&all(Placement::Right))];
    Vocab::build(texts.iter().map(String::as_str))
}

struct Canvas {
    side: usize,
    rgb: Vec<[f32; 3]>,
}

const SUPER: usize = 3;

impl Canvas {
    /// Paints every pixel whose sub-samples fall inside `inside(x, y)`,
    /// blending by coverage; coordinates are in `[0, 1]`.
    fn fill(&mut self, color: [f32; 3], inside: impl Fn(f32, f32) -> bool) {
        let n = self.side as f32;
        for py in 0..self.side {
            for px in 0..self.side {
                let mut hits = 0;
                for sy in 0..SUPER {
                    for sx in 0..SUPER {
                        let x = (px as f32 + (sx as f32 + 0.5) / SUPER as f32) / n;
                        let y = (py as f32 + (sy as f32 + 0.5) / SUPER as f32) / n;
                        if inside(x, y) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f32 / (SUPER * SUPER) as f32;
                    let dst = &mut self.rgb[py * self.side + px];
                    for c in 0..3 {
                        dst[c] = dst[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }
}

fn draw(canvas: &mut Canvas, p: &Placed, color: [f32; 3]) {
    let (cx, s) = (p.cx, p.scale);
    match p.element {
        Element::Moon => {
            let (cy, r) = (0.16, 0.09 * s);
            canvas.fill(color, |x, y| (x - cx).powi(2) + (y - cy).powi(2) < r * r);
        }
        Element::Pine => {
            let (w, top, base) = (0.13 * s, 0.30, 0.72);
            canvas.fill(color, |x, y| {
                if !(top..base).contains(&y) {
                    return false;
                }
                let half = w * (y - top) / (base - top);
                (x - cx).abs() < half
            });
            canvas.fill(color, |x, y| (x - cx).abs() < 0.018 && (0.70..0.80).contains(&y));
        }
        Element::Rock => {
            let (cy, rx, ry) = (0.78, 0.08 * s, 0.06 * s);
            canvas.fill(color, |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) < 1.0);
        }
        Element::Pond => {
            let (cy, rx, ry) = (0.88, 0.17 * s, 0.06);
            canvas.fill(color, |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) < 1.0);
        }
        Element::Bridge => {
            let (cy, r_out, r_in) = (0.74, 0.16 * s, 0.11 * s);
            canvas.fill(color, |x, y| {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2) * 2.2;
                y < cy && d2 < r_out * r_out && d2 > r_in * r_in
            });
        }
        Element::Pavilion => {
            let w = 0.15 * s;
            // roof: a wide trapezoid with upturned eaves
            canvas.fill(color, |x, y| {
                let (top, bot) = (0.36, 0.47);
                (top..bot).contains(&y) && (x - cx).abs() < w * (0.35 + 0.75 * (y - top) / (bot - top))
            });
            // pillars and base
            canvas.fill(color, |x, y| {
                let dx = (x - cx).abs();
                ((0.47..0.62).contains(&y) && (w * 0.55..w * 0.72).contains(&dx))
                    || ((0.62..0.66).contains(&y) && dx < w * 0.95)
            });
        }
    }
}

/// Renders a scene at `side`×`side`.
pub fn render_scene(scene: &SceneSpec, side: usize) -> Result<ImageTensor> {
    if side < 8 {
        return Err(Error::Config(format!("scene side {side} is below 8")));
    }
    let bg = scene.style.background();
    let mut canvas = Canvas {
        side,
        rgb: vec![bg; side * side],
    };
    // faint horizon wash so empty scenes are not perfectly flat
    let wash = match scene.style {
        Style::Paper => [0.80, 0.73, 0.58],
        Style::InkNight => [0.10, 0.12, 0.22],
    };
    canvas.fill(wash, |_, y| y > 0.66);
    // Far-to-near order keeps overlaps consistent regardless of list order.
    let order = [
        Element::Moon,
        Element::Pond,
        Element::Pine,
        Element::Pavilion,
        Element::Bridge,
        Element::Rock,
    ];
    for e in order {
        for p in scene.elements.iter().filter(|p| p.element == e) {
            draw(&mut canvas, p, scene.style.color(e));
        }
    }
    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] * 2.0 - 1.0;
        }
    }
    ImageTensor::new(side, side, data)
}

/// `n` scenes named `{index:06}.png`; same arguments give bit-identical output.
pub fn synth_toy_dataset(n: usize, seed: u64, side: usize, style: Style) -> Result<Vec<Example>> {
    synth_toy_range(0, n, seed, side, style)
}

/// Records `start..start + n` of the seeded corpus. Each record depends only
/// on `(seed, index)`, so ranges that do not overlap are disjoint slices of
/// the same corpus.
pub fn synth_toy_range(start: usize, n: usize, seed: u64, side: usize, style: Style) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one record".into()));
    }
    let probs = ElementProbabilities::default();
    (start..start + n)
        .map(|i| {
            let scene = sample_scene(seed, i as u64, &probs, style);
            let image = render_scene(&scene, side)?;
            let has_architecture = scene.elements.iter().any(|p| p.element.is_architecture());
            Ok(Example {
                record: DatasetRecord::new(format!("{i:06}.png"), caption_for(&scene), has_architecture),
                image,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_vocab_covers_generated_captions() {
        let v = toy_vocab();
        for style in [Style::Paper, Style::InkNight] {
            for ex in synth_toy_dataset(40, 11, 8, style).unwrap() {
                let ids = v.tokenize(&ex.record.caption, 64);
                assert!(!ids.contains(&crate::networks::UNK), "{}", ex.record.caption);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_records() {
        let a = synth_toy_dataset(1, 7, 32, Style::Paper).unwrap();
        let b = synth_toy_dataset(1, 7, 32, Style::Paper).unwrap();
        assert_eq!(a[0].image.to_rgb8(), b[0].image.to_rgb8());
        assert_eq!(a[0].record, b[0].record);
    }

    #[test]
    fn caption_names_exactly_the_drawn_elements() {
        let probs = ElementProbabilities::default();
        for i in 0..300 {
            let scene = sample_scene(11, i, &probs, Style::Paper);
            let cap = caption_for(&scene);
            for e in ELEMENTS {
                let drawn = scene.elements.iter().any(|p| p.element == e);
                assert_eq!(cap.contains(e.word()), drawn, "{cap}");
            }
        }
    }

    #[test]
    fn caption_grammar() {
        let mk = |els: &[(Element, Placement)]| SceneSpec {
            elements: els
                .iter()
                .map(|&(element, side)| Placed {
                    element,
                    side,
                    cx: 0.5,
                    scale: 1.0,
                })
                .collect(),
            style: Style::Paper,
        };
        assert_eq!(caption_for(&mk(&[])), "an empty garden scene");
        assert_eq!(
            caption_for(&mk(&[(Element::Moon, Placement::Left)])),
            "a garden scene with a moon on the left"
        );
        assert_eq!(
            caption_for(&mk(&[
                (Element::Pavilion, Placement::Left),
                (Element::Pond, Placement::Right),
                (Element::Moon, Placement::Left)
            ])),
            "a garden scene with a pavilion on the left, a pond on the right and a moon on the left"
        );
    }

    #[test]
    fn every_element_changes_pixels() {
        for e in ELEMENTS {
            let base = SceneSpec {
                elements: vec![],
                style: Style::Paper,
            };
            let with = SceneSpec {
                elements: vec![Placed {
                    element: e,
                    side: Placement::Left,
                    cx: 0.3,
                    scale: 1.0,
                }],
                style: Style::Paper,
            };
            let a = render_scene(&base, 32).unwrap();
            let b = render_scene(&with, 32).unwrap();
            assert!(a.mean_abs_diff(&b).unwrap() > 0.002, "{e:?} invisible");
        }
    }

    #[test]
    fn styles_differ() {
        let a = synth_toy_dataset(3, 1, 32, Style::Paper).unwrap();
        let b = synth_toy_dataset(3, 1, 32, Style::InkNight).unwrap();
        assert_eq!(a[0].record.caption, b[0].record.caption);
        assert!(a[0].image.mean_abs_diff(&b[0].image).unwrap() > 0.5);
        assert!(matches!(Style::parse("sepia"), Err(Error::Config(_))));
    }
}
