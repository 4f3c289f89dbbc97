//! Prompt triplets over the toy world's vocabulary.
//!
//! Catalog files hold one triplet per line, `input | edit | edited`; blank
//! lines and lines starting with `#` are skipped.

use serde::{Deserialize, Serialize};

use super::world::{SceneSpec, Shape, Texture};
use crate::error::{Error, Result};
use crate::palette::Color;
use crate::rng::SeededRng;
use crate::text::{fnv1a, tokenize};

const IDENTITY_WORDS: &[&str] = &["keep", "unchanged", "same", "as", "leave", "nothing"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTriplet {
    pub input: String,
    pub edit: String,
    pub edited: String,
}

impl PromptTriplet {
    pub fn new(input: impl Into<String>, edit: impl Into<String>, edited: impl Into<String>) -> Result<Self> {
        let t = Self { input: input.into(), edit: edit.into(), edited: edited.into() };
        t.validate()?;
        Ok(t)
    }

    /// An edit whose content words only ask to keep things as they are.
    pub fn is_identity_edit(&self) -> bool {
        tokenize(&self.edit).iter().all(|w| IDENTITY_WORDS.contains(&w.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("input", &self.input), ("edit", &self.edit), ("edited", &self.edited)] {
            if p.trim().is_empty() {
                return Err(Error::Param(format!("{name} prompt is empty")));
            }
        }
        if tokenize(&self.input) == tokenize(&self.edited) && !self.is_identity_edit() {
            return Err(Error::Param(format!("edit {:?} leaves the prompt {:?} unchanged", self.edit, self.input)));
        }
        Ok(())
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split('|').map(str::trim).collect();
        match parts[..] {
            [input, edit, edited] => Self::new(input, edit, edited),
            _ => Err(Error::Param(format!("catalog line needs `input | edit | edited`: {line:?}"))),
        }
    }

    pub fn to_line(&self) -> String {
        format!("{} | {} | {}", self.input, self.edit, self.edited)
    }
}

pub fn parse_catalog(text: &str) -> Result<Vec<PromptTriplet>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(PromptTriplet::parse_line)
        .collect()
}

pub fn format_catalog(triplets: &[PromptTriplet]) -> String {
    triplets.iter().map(|t| t.to_line() + "\n").collect()
}

/// Scene attributes a prompt mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PromptScene {
    pub object_color: Option<Color>,
    pub shape: Option<Shape>,
    pub background: Option<Color>,
    pub texture: Option<Texture>,
}

impl PromptScene {
    /// The object color is the last color word before the shape word; the
    /// background color is the last color word after it (or before
    /// "background" when no shape is named).
    pub fn parse(words: &[String]) -> Self {
        let shape_at = words.iter().position(|w| Shape::from_name(w).is_some());
        let colors: Vec<(usize, Color)> =
            words.iter().enumerate().filter_map(|(i, w)| Color::from_name(w).map(|c| (i, c))).collect();
        let (object_color, background) = match shape_at {
            Some(s) => (
                colors.iter().rev().find(|(i, _)| *i < s).map(|&(_, c)| c),
                colors.iter().rev().find(|(i, _)| *i > s).map(|&(_, c)| c),
            ),
            None => {
                let bg_at = words.iter().position(|w| w == "background").unwrap_or(words.len());
                (None, colors.iter().rev().find(|(i, _)| *i < bg_at).map(|&(_, c)| c))
            }
        };
        Self {
            object_color,
            shape: shape_at.map(|s| Shape::from_name(&words[s]).unwrap()),
            background,
            texture: words.iter().find_map(|w| Texture::from_name(w)),
        }
    }

    /// Index of the word bound to the object color, if any.
    pub fn object_color_index(words: &[String]) -> Option<usize> {
        let s = words.iter().position(|w| Shape::from_name(w).is_some())?;
        (0..s).rev().find(|&i| Color::from_name(&words[i]).is_some())
    }

    /// Index of the word bound to the background color, if any.
    pub fn background_color_index(words: &[String]) -> Option<usize> {
        let start = words.iter().position(|w| Shape::from_name(w).is_some()).map_or(0, |s| s + 1);
        let end = words.iter().position(|w| w == "background").map_or(words.len(), |b| b + 1).max(start);
        (start..end.min(words.len())).rev().find(|&i| Color::from_name(&words[i]).is_some())
    }
}

/// Deterministic object geometry for a prompt at a given resolution; the
/// prompt's own attributes fill the rest (with fixed fallbacks).
pub fn geometry_for(prompt: &str, frames: usize, h: usize, w: usize) -> SceneSpec {
    let ps = PromptScene::parse(&tokenize(prompt));
    let mut rng = SeededRng::new(fnv1a(prompt));
    let size = rng.uniform_range(0.15, 0.22) as f32;
    let start = (rng.uniform_range(0.35, 0.65) as f32, rng.uniform_range(0.35, 0.65) as f32);
    let pan = [(0, 0), (0, 1), (1, 0), (0, -1)][rng.index(4)];
    let moving = rng.bernoulli(0.5);
    let dir = (rng.uniform_range(-1.0, 1.0) as f32, rng.uniform_range(-1.0, 1.0) as f32);
    let mut spec = SceneSpec {
        shape: ps.shape.unwrap_or(Shape::Circle),
        object_color: ps.object_color.unwrap_or(Color::White),
        size,
        start,
        velocity: (0.0, 0.0),
        background: ps.background.unwrap_or(Color::Black),
        texture: ps.texture.unwrap_or(Texture::Plain),
        pan,
        frames,
        allow_exit: false,
    };
    if moving {
        // shrink the velocity until the whole trajectory fits
        let mut scale = 0.5f32;
        for _ in 0..12 {
            spec.velocity = (dir.0 * scale, dir.1 * scale);
            if spec.validate(h, w).is_ok() {
                return spec;
            }
            scale *= 0.5;
        }
        spec.velocity = (0.0, 0.0);
    }
    spec
}

/// The fifteen base scenes of the default catalog.
pub fn default_scenes() -> Vec<SceneSpec> {
    let backgrounds = [Color::Blue, Color::White, Color::Black, Color::Yellow, Color::Green];
    let objects = [Color::Red, Color::Orange, Color::Purple, Color::Green, Color::Yellow, Color::Blue];
    (0..15)
        .map(|i| {
            let background = backgrounds[i % backgrounds.len()];
            let mut object_color = objects[i % objects.len()];
            if object_color == background {
                object_color = objects[(i + 1) % objects.len()];
            }
            SceneSpec {
                shape: Shape::ALL[i % 3],
                object_color,
                size: 0.2,
                start: (0.5, 0.5),
                velocity: (0.0, 0.0),
                background,
                texture: Texture::ALL[(i / 3) % 4],
                pan: (0, 0),
                frames: 16,
                allow_exit: false,
            }
        })
        .collect()
}

fn next_color(after: Color, avoid: &[Color]) -> Color {
    let start = after.index();
    (1..=Color::ALL.len())
        .map(|k| Color::ALL[(start + k) % Color::ALL.len()])
        .find(|c| !avoid.contains(c))
        .expect("palette has more colors than any scene uses")
}

/// Four edits per base scene: object color, background color, shape and texture.
pub fn default_catalog() -> Vec<PromptTriplet> {
    let mut out = Vec::with_capacity(60);
    for scene in default_scenes() {
        let input = scene.describe();
        let avoid = [scene.object_color, scene.background];
        let mut edits: Vec<(String, SceneSpec)> = Vec::with_capacity(4);
        let c = next_color(scene.object_color, &avoid);
        let obj = SceneSpec { object_color: c, ..scene.clone() };
        edits.push((format!("make the {} {}", scene.shape.name(), c.name()), obj));
        let c = next_color(scene.background, &avoid);
        let bg = SceneSpec { background: c, ..scene.clone() };
        edits.push((format!("make the background {}", c.name()), bg));
        let s = Shape::ALL[(Shape::ALL.iter().position(|&s| s == scene.shape).unwrap() + 1) % 3];
        let sh = SceneSpec { shape: s, ..scene.clone() };
        edits.push((format!("turn the {} into a {}", scene.shape.name(), s.name()), sh));
        let t = Texture::ALL[(Texture::ALL.iter().position(|&t| t == scene.texture).unwrap() + 1) % 4];
        let tx = SceneSpec { texture: t, ..scene.clone() };
        edits.push((format!("make the background {}", t.name()), tx));
        for (edit, edited) in edits {
            out.push(PromptTriplet::new(input.clone(), edit, edited.describe()).unwrap());
        }
    }
    out
}
