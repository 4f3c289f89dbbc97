//! Prompt tokenization and the deterministic toy text encoder.
//!
//! Prompts become at most [`MAX_PROMPT_TOKENS`] content words (lowercased,
//! punctuation and function words dropped) behind a BOS token. Each token maps
//! to a unit vector of width [`EMBED_DIM`]. Color words carry their RGB value
//! in the first three components and a flag of 0.5 in the fourth, so models
//! can read colors straight off the embedding; every other token only uses
//! the remaining components, derived from a hash of the word.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palette::Color;
use crate::rng::SeededRng;

pub const EMBED_DIM: usize = 16;
pub const MAX_PROMPT_TOKENS: usize = 7;
pub const BOS: &str = "<bos>";
const COLOR_FLAG: f32 = 0.5;

const STOPWORDS: &[&str] =
    &["a", "an", "the", "on", "of", "to", "it", "into", "make", "turn", "change", "with", "and", "is", "in"];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .take(MAX_PROMPT_TOKENS)
        .collect()
}

/// 64-bit FNV-1a, used to derive per-word seeds.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Unit-norm `EMBED_DIM` vector for one token.
pub fn token_vector(token: &str) -> Vec<f32> {
    let mut v = vec![0.0f32; EMBED_DIM];
    let mut head = 0.0f64;
    if let Some(c) = Color::from_name(token) {
        let rgb = c.rgb();
        for k in 0..3 {
            v[k] = 0.5 * (rgb[k] - 0.5);
        }
        v[3] = COLOR_FLAG;
        head = v[..4].iter().map(|x| (*x as f64).powi(2)).sum();
    }
    let mut rng = SeededRng::new(fnv1a(token));
    let filler: Vec<f64> = (4..EMBED_DIM).map(|_| rng.normal() as f64).collect();
    let norm = filler.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = (1.0 - head).sqrt() / norm;
    for (k, x) in filler.iter().enumerate() {
        v[4 + k] = (x * scale) as f32;
    }
    v
}

/// `L × d` sequence of unit vectors, BOS first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    tokens: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl PromptEmbedding {
    pub fn encode(text: &str) -> Self {
        Self::from_tokens(&tokenize(text))
    }

    pub fn from_tokens(words: &[String]) -> Self {
        let mut tokens = vec![BOS.to_string()];
        tokens.extend(words.iter().take(MAX_PROMPT_TOKENS).cloned());
        let data = tokens.iter().flat_map(|t| token_vector(t)).collect();
        Self { tokens, dim: EMBED_DIM, data }
    }

    /// The embedding of the empty prompt; stands in for a null text condition.
    pub fn empty() -> Self {
        Self::from_tokens(&[])
    }

    /// Arbitrary embedding; rows must be unit norm.
    pub fn from_raw(tokens: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if tokens.is_empty() || dim == 0 || data.len() != tokens.len() * dim {
            return Err(Error::Shape(format!(
                "prompt embedding: {} tokens of width {dim} cannot hold {} values",
                tokens.len(),
                data.len()
            )));
        }
        for row in data.chunks(dim) {
            let n = row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::Param(format!("prompt embedding row has norm {n}")));
            }
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content words without BOS.
    pub fn words(&self) -> &[String] {
        &self.tokens[1..]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// RGB carried by token `i`, if it is a color word.
    pub fn color_of(&self, i: usize) -> Option<[f32; 3]> {
        if self.dim < 4 {
            return None;
        }
        let r = self.row(i);
        ((r[3] - COLOR_FLAG).abs() < 1e-4).then(|| [r[0] / 0.5 + 0.5, r[1] / 0.5 + 0.5, r[2] / 0.5 + 0.5])
    }
}
