//! Embedding-based quality filter for generated pairs.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::tensor::VideoLatent;

use super::catalog::PromptTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Mean cosine between input frames and the input prompt.
    pub text_in: f64,
    /// Mean cosine between edited frames and the edited prompt.
    pub text_out: f64,
    /// Mean cosine between the frame embedding change and the prompt embedding change.
    pub direction: f64,
    /// Mean cosine between corresponding input and edited frames.
    pub frame: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub text: f64,
    pub direction: f64,
    pub frame: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { text: 0.2, direction: 0.2, frame: 0.5 }
    }
}

impl Thresholds {
    /// Thresholds every sample passes.
    pub fn keep_all() -> Self {
        Self { text: -1.0, direction: -1.0, frame: -1.0 }
    }

    /// All four tests are strict inequalities.
    pub fn passes(&self, s: &Scores) -> bool {
        s.text_in > self.text && s.text_out > self.text && s.direction > self.direction && s.frame > self.frame
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub input: VideoLatent,
    pub edited: VideoLatent,
    pub triplet: PromptTriplet,
    pub scores: Option<Scores>,
    pub kept: bool,
}

impl PairedSample {
    pub fn new(input: VideoLatent, edited: VideoLatent, triplet: PromptTriplet) -> Self {
        Self { input, edited, triplet, scores: None, kept: false }
    }
}

fn difference(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn compute_scores(
    input: &VideoLatent,
    edited: &VideoLatent,
    triplet: &PromptTriplet,
    embedder: &dyn Embedder,
) -> Result<Scores> {
    input.check_same_dims(edited, "paired sample")?;
    let d = input.dims();
    if d.b != 1 || d.f == 0 {
        return Err(Error::Shape(format!("paired sample must hold one video with frames, got {:?}", d)));
    }
    let t_in = embedder.embed_text(&triplet.input)?;
    let t_out = embedder.embed_text(&triplet.edited)?;
    let t_dir = difference(&t_out, &t_in);
    let mut acc = [0.0f64; 4];
    for k in 0..d.f {
        let e_in = embedder.embed_image(&input.frame(0, k))?;
        let e_out = embedder.embed_image(&edited.frame(0, k))?;
        acc[0] += cosine(&e_in, &t_in);
        acc[1] += cosine(&e_out, &t_out);
        // a zero difference on either side scores 0
        acc[2] += cosine(&difference(&e_out, &e_in), &t_dir);
        acc[3] += cosine(&e_in, &e_out);
    }
    let n = d.f as f64;
    Ok(Scores { text_in: acc[0] / n, text_out: acc[1] / n, direction: acc[2] / n, frame: acc[3] / n })
}

pub fn score_and_filter(mut sample: PairedSample, embedder: &dyn Embedder, th: &Thresholds) -> Result<PairedSample> {
    let s = compute_scores(&sample.input, &sample.edited, &sample.triplet, embedder)?;
    sample.kept = th.passes(&s);
    sample.scores = Some(s);
    Ok(sample)
}

/// A labelled corpus whose keep/drop outcome is forced by the toy embedding
/// geometry: four object recolors (kept) and eight pairs that each break at
/// least one test by a wide margin. Each entry carries its intended outcome.
pub fn crafted_corpus(frames: usize, h: usize, w: usize) -> Result<Vec<(PairedSample, bool)>> {
    use super::world::{render_scene, SceneSpec, Shape, Texture};
    use crate::palette::Color::{self, *};

    let scene = |shape: Shape, object_color: Color, background: Color, texture: Texture| SceneSpec {
        shape,
        object_color,
        size: 0.2,
        start: (0.5, 0.5),
        velocity: (0.0, 0.0),
        background,
        texture,
        pan: (0, 1),
        frames,
        allow_exit: false,
    };
    let base = scene(Shape::Circle, Red, Blue, Texture::Plain);
    let recolored = scene(Shape::Circle, Green, Blue, Texture::Plain);
    // (input scene, edited scene, input prompt override, edited prompt override, keep)
    #[allow(clippy::type_complexity)]
    let cases: Vec<(SceneSpec, SceneSpec, Option<&str>, Option<&str>, bool)> = vec![
        (base.clone(), recolored.clone(), None, None, true),
        (
            scene(Shape::Triangle, Purple, Yellow, Texture::Plain),
            scene(Shape::Triangle, Blue, Yellow, Texture::Plain),
            None,
            None,
            true,
        ),
        (
            scene(Shape::Square, Orange, White, Texture::Plain),
            scene(Shape::Square, Purple, White, Texture::Plain),
            None,
            None,
            true,
        ),
        (
            scene(Shape::Circle, Yellow, Black, Texture::Checkered),
            scene(Shape::Circle, Red, Black, Texture::Checkered),
            None,
            None,
            true,
        ),
        // identical videos and prompts: no direction at all
        (base.clone(), base.clone(), None, None, false),
        // prompt asks for a recolor the video does not show
        (base.clone(), base.clone(), None, Some("a green circle on a blue background"), false),
        // the video changes opposite to the prompt change
        (
            base.clone(),
            recolored.clone(),
            Some("a green circle on a blue background"),
            Some("a red circle on a blue background"),
            false,
        ),
        // background swap: frames no longer correspond
        (
            scene(Shape::Square, Orange, White, Texture::Plain),
            scene(Shape::Square, Orange, Black, Texture::Plain),
            None,
            None,
            false,
        ),
        // everything changes at once
        (base.clone(), scene(Shape::Square, Yellow, White, Texture::Plain), None, None, false),
        // edited prompt names a different background than the video shows
        (
            base.clone(),
            scene(Shape::Circle, Red, Yellow, Texture::Plain),
            None,
            Some("a red circle on a white background"),
            false,
        ),
        // input prompt does not describe the input video
        (
            base.clone(),
            recolored.clone(),
            Some("a white square on a yellow background"),
            Some("a green square on a yellow background"),
            false,
        ),
        // edited prompt does not describe the edited video
        (base.clone(), recolored, None, Some("a black triangle on a white background"), false),
    ];
    cases
        .into_iter()
        .map(|(a, b, pin, pout, keep)| {
            let input = pin.map_or_else(|| a.describe(), String::from);
            let edited = pout.map_or_else(|| b.describe(), String::from);
            let triplet = PromptTriplet { input, edit: "apply the change".into(), edited };
            Ok((PairedSample::new(render_scene(&a, h, w)?, render_scene(&b, h, w)?, triplet), keep))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::ToyEmbedder;

    #[test]
    fn crafted_corpus_outcomes_are_reproduced() {
        let e = ToyEmbedder::default();
        let corpus = crafted_corpus(16, 16, 16).unwrap();
        assert_eq!(corpus.iter().filter(|(_, k)| *k).count(), 4);
        for (i, (sample, keep)) in corpus.into_iter().enumerate() {
            let out = score_and_filter(sample, &e, &Thresholds::default()).unwrap();
            assert_eq!(out.kept, keep, "sample {i}: {:?}", out.scores);
        }
    }

    #[test]
    fn identical_pair_has_zero_direction() {
        let e = ToyEmbedder::default();
        let (sample, _) = crafted_corpus(4, 12, 12).unwrap().swap_remove(4);
        let out = score_and_filter(sample, &e, &Thresholds::default()).unwrap();
        let s = out.scores.unwrap();
        assert_eq!(s.direction, 0.0);
        assert!((s.frame - 1.0).abs() < 1e-9);
        assert!(!out.kept);
    }

    #[test]
    fn keep_all_thresholds_keep_everything() {
        let e = ToyEmbedder::default();
        for (sample, _) in crafted_corpus(2, 12, 12).unwrap() {
            assert!(score_and_filter(sample, &e, &Thresholds::keep_all()).unwrap().kept);
        }
    }

    #[test]
    fn mismatched_videos_are_rejected() {
        let e = ToyEmbedder::default();
        let mut corpus = crafted_corpus(2, 12, 12).unwrap();
        let (mut s, _) = corpus.swap_remove(0);
        s.edited = s.edited.slice_frames(0..1).unwrap();
        assert!(matches!(score_and_filter(s, &e, &Thresholds::default()), Err(Error::Shape(_))));
    }
}
