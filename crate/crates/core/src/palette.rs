//! The eight named colors shared by the toy world, the prompt vocabulary and
//! the palette backbone.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
        Color::Black,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.15, 0.15],
            Color::Green => [0.15, 0.75, 0.20],
            Color::Blue => [0.15, 0.25, 0.90],
            Color::Yellow => [0.95, 0.90, 0.15],
            Color::Purple => [0.60, 0.20, 0.75],
            Color::Orange => [0.95, 0.55, 0.10],
            Color::White => [0.95, 0.95, 0.95],
            Color::Black => [0.08, 0.08, 0.08],
        }
    }

    pub fn from_name(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).unwrap()
    }
}

impl std::fmt::Display for Color {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
