//! The denoiser contract `ε_θ(z_t, t, c_V, c_T)` and its implementations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::VideoLatent;
use crate::text::PromptEmbedding;

pub mod analytic;
pub mod nn;
pub mod toy;
pub mod train;

pub use analytic::{analytic_gaussian_predict, CoherentGaussianDenoiser, GaussianDenoiser};
pub use toy::{ToyConfig, ToyDenoiser};
pub use train::{train_step, Adam, TrainConfig, TrainingExample};

/// The video and text conditions; either may be null.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionPair {
    pub video: Option<VideoLatent>,
    pub text: Option<PromptEmbedding>,
}

impl ConditionPair {
    pub fn new(video: Option<VideoLatent>, text: Option<PromptEmbedding>) -> Self {
        Self { video, text }
    }

    pub fn full(video: VideoLatent, text: PromptEmbedding) -> Self {
        Self { video: Some(video), text: Some(text) }
    }

    pub fn null() -> Self {
        Self::default()
    }

    pub fn without_text(&self) -> Self {
        Self { video: self.video.clone(), text: None }
    }

    /// The text condition, with null encoded as the empty prompt.
    pub fn text_or_empty(&self) -> std::borrow::Cow<'_, PromptEmbedding> {
        match &self.text {
            Some(e) => std::borrow::Cow::Borrowed(e),
            None => std::borrow::Cow::Owned(PromptEmbedding::empty()),
        }
    }

    pub fn require_full(&self) -> Result<(&VideoLatent, &PromptEmbedding)> {
        let v = self.video.as_ref().ok_or(Error::NullCondition("c_V"))?;
        let t = self.text.as_ref().ok_or(Error::NullCondition("c_T"))?;
        Ok((v, t))
    }
}

/// Independently nulls the video condition with probability `p_v` and the
/// text condition with probability `p_t`.
pub fn condition_dropout(cond: &ConditionPair, rng: &mut SeededRng, p_v: f64, p_t: f64) -> Result<ConditionPair> {
    for p in [p_v, p_t] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1]")));
        }
    }
    let drop_v = rng.bernoulli(p_v);
    let drop_t = rng.bernoulli(p_t);
    Ok(ConditionPair {
        video: if drop_v { None } else { cond.video.clone() },
        text: if drop_t { None } else { cond.text.clone() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    Spatial,
    Cross,
    Temporal,
}

/// Identifies one attention layer call inside a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttentionSite {
    pub kind: AttentionKind,
    pub layer: usize,
}

/// Post-softmax probabilities of one attention call: `mats` stacked
/// `rows × cols` matrices. For cross-attention the columns are the prompt
/// tokens in order, followed by any keys intrinsic to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbs {
    pub mats: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl AttentionProbs {
    pub fn row(&self, m: usize, r: usize) -> &[f32] {
        let s = (m * self.rows + r) * self.cols;
        &self.data[s..s + self.cols]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.data.chunks(self.cols).map(|r| (r.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Hook invoked after every attention softmax. Implementations may record
/// the probabilities or overwrite them in place.
pub trait AttentionControl {
    fn on_attention(&mut self, site: AttentionSite, probs: &mut AttentionProbs) -> Result<()>;
}

/// Control that leaves attention untouched.
pub struct NoControl;

impl AttentionControl for NoControl {
    fn on_attention(&mut self, _: AttentionSite, _: &mut AttentionProbs) -> Result<()> {
        Ok(())
    }
}

pub trait Denoiser: Send + Sync {
    /// Noise prediction with the shape of `z_t`.
    fn predict(&self, z_t: &VideoLatent, t: usize, cond: &ConditionPair) -> Result<VideoLatent>;

    /// Prediction with an attention hook. Models without attention ignore it.
    fn predict_controlled(
        &self,
        z_t: &VideoLatent,
        t: usize,
        cond: &ConditionPair,
        control: &mut dyn AttentionControl,
    ) -> Result<VideoLatent> {
        let _ = control;
        self.predict(z_t, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, z_t: &VideoLatent, t: usize, cond: &ConditionPair) -> Result<VideoLatent> {
        (**self).predict(z_t, t, cond)
    }

    fn predict_controlled(
        &self,
        z_t: &VideoLatent,
        t: usize,
        cond: &ConditionPair,
        control: &mut dyn AttentionControl,
    ) -> Result<VideoLatent> {
        (**self).predict_controlled(z_t, t, cond, control)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, z_t: &VideoLatent, t: usize, cond: &ConditionPair) -> Result<VideoLatent> {
        (**self).predict(z_t, t, cond)
    }

    fn predict_controlled(
        &self,
        z_t: &VideoLatent,
        t: usize,
        cond: &ConditionPair,
        control: &mut dyn AttentionControl,
    ) -> Result<VideoLatent> {
        (**self).predict_controlled(z_t, t, cond, control)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict(&self, z_t: &VideoLatent, t: usize, cond: &ConditionPair) -> Result<VideoLatent> {
        (**self).predict(z_t, t, cond)
    }

    fn predict_controlled(
        &self,
        z_t: &VideoLatent,
        t: usize,
        cond: &ConditionPair,
        control: &mut dyn AttentionControl,
    ) -> Result<VideoLatent> {
        (**self).predict_controlled(z_t, t, cond, control)
    }
}

/// Checks the output half of the contract.
pub(crate) fn check_output(z_t: &VideoLatent, out: &VideoLatent, origin: &'static str) -> Result<()> {
    if out.dims() != z_t.dims() {
        return Err(Error::Shape(format!("{origin}: output {} for input {}", out.dims(), z_t.dims())));
    }
    out.ensure_finite(origin)
}
