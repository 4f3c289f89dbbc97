//! The procedural toy world: one colored shape over a textured background,
//! with optional object motion and camera pan.
//!
//! A frame is rendered in world coordinates and then shifted by the camera
//! pan with wrap-around, so a pan of `(vy, vx)` px/frame makes frame `k`
//! exactly frame 0 translated by `(k·vy, k·vx)` when the object is static.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palette::Color;
use crate::tensor::{Dims, VideoLatent};
use crate::text::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the offset `(dy, dx)` from the center, in units of the
    /// object radius, lies inside the shape.
    fn contains(self, dy: f32, dx: f32) -> bool {
        match self {
            Shape::Circle => dy * dy + dx * dx <= 1.0,
            Shape::Square => dy.abs() <= 0.85 && dx.abs() <= 0.85,
            // apex up, base at dy = 1
            Shape::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Plain,
    Striped,
    Checkered,
    Speckled,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Plain, Texture::Striped, Texture::Checkered, Texture::Speckled];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Plain => "plain",
            Texture::Striped => "striped",
            Texture::Checkered => "checkered",
            Texture::Speckled => "speckled",
        }
    }

    pub fn from_name(s: &str) -> Option<Texture> {
        Texture::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Multiplicative shade of the background at world pixel `(y, x)`.
    pub fn shade(self, y: usize, x: usize) -> f32 {
        match self {
            Texture::Plain => 1.0,
            Texture::Striped => {
                if (x / 2).is_multiple_of(2) {
                    1.0
                } else {
                    0.7
                }
            }
            Texture::Checkered => {
                if (y / 3 + x / 3).is_multiple_of(2) {
                    1.0
                } else {
                    0.7
                }
            }
            Texture::Speckled => {
                let h = fnv1a(&format!("{y},{x}"));
                0.8 + 0.2 * ((h >> 11) as f64 / (1u64 << 53) as f64) as f32
            }
        }
    }
}

/// A toy-world scene. Positions and sizes are fractions of the frame;
/// velocities are pixels per frame at the rendered resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub object_color: Color,
    /// Object radius as a fraction of the shorter frame side.
    pub size: f32,
    /// Initial object center `(y, x)` as fractions of the frame.
    pub start: (f32, f32),
    /// Object velocity `(vy, vx)` in world coordinates.
    #[serde(default)]
    pub velocity: (f32, f32),
    pub background: Color,
    #[serde(default = "plain")]
    pub texture: Texture,
    /// Camera pan `(vy, vx)`; whole pixels so that panning is an exact shift.
    #[serde(default)]
    pub pan: (i64, i64),
    pub frames: usize,
    /// Allows the object trajectory to leave the frame.
    #[serde(default)]
    pub allow_exit: bool,
}

fn plain() -> Texture {
    Texture::Plain
}

impl SceneSpec {
    fn radius_px(&self, h: usize, w: usize) -> f32 {
        self.size * h.min(w) as f32
    }

    /// Object center in world pixels at frame `k`.
    pub fn center(&self, k: usize, h: usize, w: usize) -> (f32, f32) {
        (self.start.0 * h as f32 + self.velocity.0 * k as f32, self.start.1 * w as f32 + self.velocity.1 * k as f32)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.frames == 0 || h == 0 || w == 0 {
            return Err(Error::Param("scene needs at least one frame and a non-empty resolution".into()));
        }
        if !(self.size > 0.0 && self.size.is_finite()) {
            return Err(Error::Param(format!("object size {} must be positive", self.size)));
        }
        if !self.allow_exit {
            let r = self.radius_px(h, w);
            for k in 0..self.frames {
                let (cy, cx) = self.center(k, h, w);
                if cy - r < 1.0 || cx - r < 1.0 || cy + r > h as f32 - 1.0 || cx + r > w as f32 - 1.0 {
                    return Err(Error::Param(format!(
                        "object leaves the {h}x{w} frame at frame {k}; set allow_exit to permit this"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Prompt describing the scene, e.g. "a red circle on a striped blue background".
    pub fn describe(&self) -> String {
        let texture = match self.texture {
            Texture::Plain => String::new(),
            t => format!("{} ", t.name()),
        };
        let name = self.object_color.name();
        let article = if name.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
        format!("{article} {name} {} on a {}{} background", self.shape.name(), texture, self.background.name())
    }
}

/// Per-pixel object coverage and background shade of one scene, before color.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub dims: Dims,
    /// Object coverage in `[0, 1]`, `(f, h, w)` row-major.
    pub coverage: Vec<f32>,
    /// Background shade, `(f, h, w)` row-major.
    pub shade: Vec<f32>,
}

const SUPERSAMPLE: usize = 4;

pub fn scene_layout(spec: &SceneSpec, shape: Option<Shape>, texture: Texture, h: usize, w: usize) -> SceneLayout {
    let f = spec.frames;
    let r = spec.radius_px(h, w);
    let mut coverage = vec![0.0f32; f * h * w];
    let mut shade = vec![0.0f32; f * h * w];
    for k in 0..f {
        let (cy, cx) = spec.center(k, h, w);
        let (py, px) = (spec.pan.0 * k as i64, spec.pan.1 * k as i64);
        for y in 0..h {
            for x in 0..w {
                // world pixel shown at screen (y, x)
                let wy = (y as i64 - py).rem_euclid(h as i64) as usize;
                let wx = (x as i64 - px).rem_euclid(w as i64) as usize;
                let i = (k * h + y) * w + x;
                shade[i] = texture.shade(wy, wx);
                if let Some(shape) = shape {
                    let mut hits = 0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let yy = wy as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                            let xx = wx as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                            hits += shape.contains((yy - cy) / r, (xx - cx) / r) as usize;
                        }
                    }
                    coverage[i] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                }
            }
        }
    }
    SceneLayout { dims: Dims::new(1, 3, f, h, w), coverage, shade }
}

/// Rasterizes the scene into a `(1, 3, frames, h, w)` video in `[0, 1]`.
pub fn render_scene(spec: &SceneSpec, h: usize, w: usize) -> Result<VideoLatent> {
    spec.validate(h, w)?;
    let layout = scene_layout(spec, Some(spec.shape), spec.texture, h, w);
    let (obj, bg) = (spec.object_color.rgb(), spec.background.rgb());
    let plane = h * w;
    Ok(VideoLatent::from_fn(layout.dims, |_, c, k, y, x| {
        let i = k * plane + y * w + x;
        let a = layout.coverage[i];
        (a * obj[c] + (1.0 - a) * (bg[c] * layout.shade[i])).clamp(0.0, 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            shape: Shape::Circle,
            object_color: Color::Red,
            size: 0.2,
            start: (0.5, 0.5),
            velocity: (0.0, 0.0),
            background: Color::Blue,
            texture: Texture::Striped,
            pan: (0, 0),
            frames: 5,
            allow_exit: false,
        }
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let v = render_scene(&spec(), 16, 16).unwrap();
        for k in 1..5 {
            assert_eq!(v.slice_frames(k..k + 1).unwrap(), v.slice_frames(0..1).unwrap());
        }
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn pan_is_an_exact_wrapped_shift() {
        for texture in Texture::ALL {
            let s = SceneSpec { pan: (1, 0), texture, ..spec() };
            let v = render_scene(&s, 12, 14).unwrap();
            for k in 0..5 {
                for y in 0..12 {
                    for x in 0..14 {
                        for c in 0..3 {
                            assert_eq!(v.get(0, c, k, y, x), v.get(0, c, 0, (y + 12 - k) % 12, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn object_must_stay_inside_unless_allowed() {
        let s = SceneSpec { velocity: (0.0, 2.0), frames: 8, ..spec() };
        assert!(render_scene(&s, 16, 16).is_err());
        let s = SceneSpec { allow_exit: true, ..s };
        assert!(render_scene(&s, 16, 16).is_ok());
    }

    #[test]
    fn object_color_shows_at_center() {
        let v = render_scene(&spec(), 16, 16).unwrap();
        let red = Color::Red.rgb();
        for (c, &want) in red.iter().enumerate() {
            assert!((v.get(0, c, 0, 8, 8) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn describe_mentions_attributes() {
        assert_eq!(spec().describe(), "a red circle on a striped blue background");
        let s = SceneSpec { texture: Texture::Plain, ..spec() };
        assert_eq!(s.describe(), "a red circle on a blue background");
    }

    #[test]
    fn spec_deserializes_with_defaults() {
        let s: SceneSpec = serde_json::from_str(
            r#"{"shape":"square","object_color":"green","size":0.2,"start":[0.5,0.5],"background":"white","frames":3}"#,
        )
        .unwrap();
        assert_eq!(s.texture, Texture::Plain);
        assert_eq!(s.pan, (0, 0));
    }
}
