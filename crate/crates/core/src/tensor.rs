//! Video tensors and the inflation reshapes.
//!
//! A [`VideoLatent`] is a dense row-major tensor with dims `(b, c, f, h, w)`.
//! Per-frame layers see it as a [`FrameBatch`] of `b·f` images, temporal
//! layers see it as a [`TokenSeq`] of `b·h·w` sequences of `f` tokens. Both
//! views are materialized copies so the inverse reshape restores the original
//! bits exactly.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub b: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(b: usize, c: usize, f: usize, h: usize, w: usize) -> Self {
        Self { b, c, f, h, w }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.f * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_f(self, f: usize) -> Self {
        Self { f, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    pub fn as_array(&self) -> [usize; 5] {
        [self.b, self.c, self.f, self.h, self.w]
    }

    fn check_positive(&self) -> Result<()> {
        if self.as_array().contains(&0) {
            return Err(Error::Shape(format!("dims must be positive, got {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.b, self.c, self.f, self.h, self.w)
    }
}

/// Five-dimensional `(b, c, f, h, w)` video or latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    dims: Dims,
    data: Vec<f32>,
}

impl VideoLatent {
    /// Wraps `data`, validating length and finiteness.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.check_positive()?;
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims} ({} elements)",
                data.len(),
                dims.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("VideoLatent::new"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        assert!(dims.as_array().iter().all(|&d| d > 0), "dims must be positive");
        Self { dims, data: vec![value; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize, usize) -> f32) -> Self {
        let mut out = Self::zeros(dims);
        let mut i = 0;
        for b in 0..dims.b {
            for c in 0..dims.c {
                for fr in 0..dims.f {
                    for y in 0..dims.h {
                        for x in 0..dims.w {
                            out.data[i] = f(b, c, fr, y, x);
                            i += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-crate kernels; callers re-check finiteness.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, f: usize, y: usize, x: usize) -> usize {
        let d = &self.dims;
        (((b * d.c + c) * d.f + f) * d.h + y) * d.w + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, f: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(b, c, f, y, x)]
    }

    pub fn ensure_finite(&self, origin: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(origin))
        }
    }

    pub fn check_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{what}: {} vs {}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_same_dims(other, "zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { dims: self.dims, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different dims");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Frames `range` of every batch entry.
    pub fn slice_frames(&self, range: Range<usize>) -> Result<Self> {
        let d = self.dims;
        if range.start >= range.end || range.end > d.f {
            return Err(Error::Shape(format!("frame range {range:?} outside 0..{}", d.f)));
        }
        let nf = range.end - range.start;
        let plane = d.pixels();
        let mut data = Vec::with_capacity(d.b * d.c * nf * plane);
        for b in 0..d.b {
            for c in 0..d.c {
                let start = self.offset(b, c, range.start, 0, 0);
                data.extend_from_slice(&self.data[start..start + nf * plane]);
            }
        }
        Ok(Self { dims: d.with_f(nf), data })
    }

    /// Concatenates along the frame axis.
    pub fn concat_frames(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let d0 = first.dims;
        for p in parts {
            let d = p.dims;
            if (d.b, d.c, d.h, d.w) != (d0.b, d0.c, d0.h, d0.w) {
                return Err(Error::Shape(format!("concat_frames: {d0} vs {d}")));
            }
        }
        let total_f: usize = parts.iter().map(|p| p.dims.f).sum();
        let plane = d0.pixels();
        let mut data = Vec::with_capacity(d0.b * d0.c * total_f * plane);
        for b in 0..d0.b {
            for c in 0..d0.c {
                for p in parts {
                    let start = p.offset(b, c, 0, 0, 0);
                    data.extend_from_slice(&p.data[start..start + p.dims.f * plane]);
                }
            }
        }
        Ok(Self { dims: d0.with_f(total_f), data })
    }

    /// Entries `idx` along the batch axis, in that order.
    pub fn select_batch(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dims;
        let per = d.c * d.f * d.pixels();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &b in idx {
            if b >= d.b {
                return Err(Error::Shape(format!("batch index {b} outside 0..{}", d.b)));
            }
            data.extend_from_slice(&self.data[b * per..(b + 1) * per]);
        }
        Ok(Self { dims: Dims { b: idx.len(), ..d }, data })
    }

    pub fn frame(&self, b: usize, f: usize) -> Image {
        let d = self.dims;
        let plane = d.pixels();
        let mut data = Vec::with_capacity(d.c * plane);
        for c in 0..d.c {
            let start = self.offset(b, c, f, 0, 0);
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        Image { c: d.c, h: d.h, w: d.w, data }
    }

    /// Builds a single-entry video from equally sized frames.
    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Shape("no frames".into()))?;
        let (c, h, w) = (first.c, first.h, first.w);
        if frames.iter().any(|im| (im.c, im.h, im.w) != (c, h, w)) {
            return Err(Error::Shape("frames differ in size".into()));
        }
        let dims = Dims::new(1, c, frames.len(), h, w);
        let plane = h * w;
        let mut data = vec![0.0; dims.len()];
        for (f, im) in frames.iter().enumerate() {
            for ch in 0..c {
                let dst = (ch * frames.len() + f) * plane;
                data[dst..dst + plane].copy_from_slice(&im.data[ch * plane..(ch + 1) * plane]);
            }
        }
        Self::new(dims, data)
    }

    /// Bilinear resize of every frame (half-pixel centers, clamped borders).
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape("resize target must be positive".into()));
        }
        let d = self.dims;
        if (d.h, d.w) == (h, w) {
            return Ok(self.clone());
        }
        let sy = d.h as f32 / h as f32;
        let sx = d.w as f32 / w as f32;
        let mut out = Self::zeros(d.with_hw(h, w));
        let mut i = 0;
        for b in 0..d.b {
            for c in 0..d.c {
                for f in 0..d.f {
                    let base = self.offset(b, c, f, 0, 0);
                    let plane = &self.data[base..base + d.pixels()];
                    for y in 0..h {
                        let fy = (y as f32 + 0.5) * sy - 0.5;
                        for x in 0..w {
                            let fx = (x as f32 + 0.5) * sx - 0.5;
                            out.data[i] = bilinear_clamped(plane, d.h, d.w, fy, fx);
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Bilinear sample of a single `h×w` plane with coordinates clamped to the border.
#[inline]
pub fn bilinear_clamped(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = y - y0 as f32;
    let tx = x - x0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

/// One `(c, h, w)` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!("image data {} != {c}x{h}x{w}", data.len())));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f32) -> Self {
        Self { c, h, w, data: vec![value; c * h * w] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    /// Channel mean; the luminance proxy used for matching.
    pub fn to_gray(&self) -> Vec<f32> {
        let n = self.h * self.w;
        let mut out = vec![0.0f32; n];
        for c in 0..self.c {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.c as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// `(b·f, c, h, w)` view produced by [`reshape_spatial`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub b: usize,
    pub f: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FrameBatch {
    pub fn n(&self) -> usize {
        self.b * self.f
    }

    pub fn dims4(&self) -> [usize; 4] {
        [self.n(), self.c, self.h, self.w]
    }
}

/// `(b·h·w, f, c)` view produced by [`reshape_temporal`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl TokenSeq {
    pub fn dims3(&self) -> [usize; 3] {
        [self.b * self.h * self.w, self.f, self.c]
    }
}

/// Element `(b, c, f, y, x)` moves to `(b·f + f, c, y, x)`.
pub fn reshape_spatial(v: &VideoLatent) -> FrameBatch {
    let d = v.dims;
    let plane = d.pixels();
    let mut data = vec![0.0; d.len()];
    for b in 0..d.b {
        for c in 0..d.c {
            for f in 0..d.f {
                let src = v.offset(b, c, f, 0, 0);
                let dst = (((b * d.f + f) * d.c) + c) * plane;
                data[dst..dst + plane].copy_from_slice(&v.data[src..src + plane]);
            }
        }
    }
    FrameBatch { b: d.b, f: d.f, c: d.c, h: d.h, w: d.w, data }
}

pub fn inverse_spatial(fb: &FrameBatch) -> VideoLatent {
    let dims = Dims::new(fb.b, fb.c, fb.f, fb.h, fb.w);
    let plane = dims.pixels();
    let mut out = VideoLatent::zeros(dims);
    for b in 0..fb.b {
        for c in 0..fb.c {
            for f in 0..fb.f {
                let src = (((b * fb.f + f) * fb.c) + c) * plane;
                let dst = out.offset(b, c, f, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&fb.data[src..src + plane]);
            }
        }
    }
    out
}

/// Element `(b, c, f, y, x)` moves to `(b·h·w + y·w + x, f, c)`.
pub fn reshape_temporal(v: &VideoLatent) -> TokenSeq {
    let d = v.dims;
    let mut data = vec![0.0; d.len()];
    for b in 0..d.b {
        for c in 0..d.c {
            for f in 0..d.f {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let seq = (b * d.h + y) * d.w + x;
                        data[(seq * d.f + f) * d.c + c] = v.get(b, c, f, y, x);
                    }
                }
            }
        }
    }
    TokenSeq { b: d.b, h: d.h, w: d.w, f: d.f, c: d.c, data }
}

pub fn inverse_temporal(ts: &TokenSeq) -> VideoLatent {
    let dims = Dims::new(ts.b, ts.c, ts.f, ts.h, ts.w);
    let mut out = VideoLatent::zeros(dims);
    for b in 0..ts.b {
        for c in 0..ts.c {
            for f in 0..ts.f {
                for y in 0..ts.h {
                    for x in 0..ts.w {
                        let seq = (b * ts.h + y) * ts.w + x;
                        let o = out.offset(b, c, f, y, x);
                        out.data[o] = ts.data[(seq * ts.f + f) * ts.c + c];
                    }
                }
            }
        }
    }
    out
}

/// Channel-concatenates the video condition onto the noisy latent. A null
/// condition is encoded as zeros with `cond_channels` channels.
pub fn concat_condition(z_t: &VideoLatent, c_v: Option<&VideoLatent>, cond_channels: usize) -> Result<VideoLatent> {
    let dz = z_t.dims;
    let zeros;
    let cv = match c_v {
        Some(cv) => {
            let dc = cv.dims;
            if (dc.b, dc.f, dc.h, dc.w) != (dz.b, dz.f, dz.h, dz.w) {
                return Err(Error::Shape(format!("concat_condition: latent {dz} vs condition {dc}")));
            }
            cv
        }
        None => {
            zeros = VideoLatent::zeros(dz.with_c(cond_channels));
            &zeros
        }
    };
    let dims = dz.with_c(dz.c + cv.dims.c);
    let chunk = dz.f * dz.pixels();
    let mut data = Vec::with_capacity(dims.len());
    for b in 0..dz.b {
        let zs = b * dz.c * chunk;
        data.extend_from_slice(&z_t.data[zs..zs + dz.c * chunk]);
        let cs = b * cv.dims.c * chunk;
        data.extend_from_slice(&cv.data[cs..cs + cv.dims.c * chunk]);
    }
    Ok(VideoLatent { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random(dims: Dims, seed: u64) -> VideoLatent {
        SeededRng::new(seed).gaussian(dims)
    }

    #[test]
    fn spatial_dims() {
        let v = VideoLatent::zeros(Dims::new(1, 3, 16, 32, 32));
        assert_eq!(reshape_spatial(&v).dims4(), [16, 3, 32, 32]);
        let v = VideoLatent::zeros(Dims::new(2, 4, 8, 8, 8));
        assert_eq!(reshape_spatial(&v).dims4(), [16, 4, 8, 8]);
    }

    #[test]
    fn temporal_dims() {
        let v = VideoLatent::zeros(Dims::new(1, 3, 16, 32, 32));
        assert_eq!(reshape_temporal(&v).dims3(), [1024, 16, 3]);
        let v = VideoLatent::zeros(Dims::new(1, 3, 1, 4, 4));
        assert_eq!(reshape_temporal(&v).dims3(), [16, 1, 3]);
    }

    #[test]
    fn spatial_index_mapping() {
        let d = Dims::new(2, 3, 4, 5, 6);
        let v = random(d, 1);
        let fb = reshape_spatial(&v);
        let (bi, ci, fi, hi, wi) = (1, 2, 3, 4, 5);
        let n = bi * d.f + fi;
        let idx = ((n * d.c + ci) * d.h + hi) * d.w + wi;
        assert_eq!(fb.data[idx], v.get(bi, ci, fi, hi, wi));
    }

    #[test]
    fn temporal_index_mapping() {
        let d = Dims::new(2, 3, 4, 5, 6);
        let v = random(d, 2);
        let ts = reshape_temporal(&v);
        let (bi, ci, fi, hi, wi) = (1, 1, 2, 3, 4);
        let seq = (bi * d.h + hi) * d.w + wi;
        assert_eq!(ts.data[(seq * d.f + fi) * d.c + ci], v.get(bi, ci, fi, hi, wi));
    }

    #[test]
    fn concat_condition_channels() {
        let d = Dims::new(1, 4, 16, 32, 32);
        let z = random(d, 3);
        let c = random(d, 4);
        let out = concat_condition(&z, Some(&c), 4).unwrap();
        assert_eq!(out.dims(), Dims::new(1, 8, 16, 32, 32));
        assert_eq!(out.get(0, 5, 3, 2, 1), c.get(0, 1, 3, 2, 1));
        assert_eq!(out.get(0, 2, 3, 2, 1), z.get(0, 2, 3, 2, 1));
    }

    #[test]
    fn null_condition_is_zero() {
        let d = Dims::new(2, 4, 3, 4, 4);
        let z = random(d, 5);
        let out = concat_condition(&z, None, 4).unwrap();
        for b in 0..2 {
            for c in 4..8 {
                for f in 0..3 {
                    assert_eq!(out.frame(b, f).plane(c), &[0.0; 16][..]);
                }
            }
        }
    }

    #[test]
    fn concat_condition_rejects_frame_mismatch() {
        let z = VideoLatent::zeros(Dims::new(1, 4, 16, 8, 8));
        let c = VideoLatent::zeros(Dims::new(1, 4, 15, 8, 8));
        assert!(matches!(concat_condition(&z, Some(&c), 4), Err(Error::Shape(_))));
    }

    #[test]
    fn new_rejects_nan_and_bad_length() {
        let d = Dims::new(1, 1, 1, 1, 2);
        assert!(VideoLatent::new(d, vec![0.0]).is_err());
        assert!(VideoLatent::new(d, vec![0.0, f32::NAN]).is_err());
        assert!(VideoLatent::new(d, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn slice_and_concat_frames_roundtrip() {
        let v = random(Dims::new(2, 3, 7, 4, 5), 6);
        let a = v.slice_frames(0..3).unwrap();
        let b = v.slice_frames(3..7).unwrap();
        assert_eq!(VideoLatent::concat_frames(&[&a, &b]).unwrap(), v);
    }

    #[test]
    fn frames_roundtrip() {
        let v = random(Dims::new(1, 3, 4, 5, 6), 7);
        let frames: Vec<_> = (0..4).map(|f| v.frame(0, f)).collect();
        assert_eq!(VideoLatent::from_frames(&frames).unwrap(), v);
    }

    #[test]
    fn resize_constant_is_constant() {
        let v = VideoLatent::filled(Dims::new(1, 3, 2, 8, 8), 0.25);
        let r = v.resize(13, 5).unwrap();
        assert!(r.data().iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    fn dims_strategy() -> impl Strategy<Value = Dims> {
        (1usize..3, 1usize..5, 1usize..9, 1usize..9, 1usize..9).prop_map(|(b, c, f, h, w)| Dims::new(b, c, f, h, w))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reshapes_are_bitwise_inverses(d in dims_strategy(), seed in any::<u64>()) {
            let v = random(d, seed);
            prop_assert_eq!(&inverse_spatial(&reshape_spatial(&v)), &v);
            prop_assert_eq!(&inverse_temporal(&reshape_temporal(&v)), &v);
        }

        #[test]
        fn per_frame_map_commutes_with_spatial_reshape(d in dims_strategy(), seed in any::<u64>()) {
            let v = random(d, seed);
            // a map that depends on the frame's own content only
            let mut fb = reshape_spatial(&v);
            let per = fb.c * fb.h * fb.w;
            for frame in fb.data.chunks_mut(per) {
                let m = frame.iter().copied().fold(f32::MIN, f32::max);
                frame.iter_mut().for_each(|x| *x = (*x - m).tanh());
            }
            let via_view = inverse_spatial(&fb);
            let direct = {
                let mut out = v.clone();
                for b in 0..d.b {
                    for f in 0..d.f {
                        let m = (0..d.c).flat_map(|c| v.frame(b, f).plane(c).to_vec()).fold(f32::MIN, f32::max);
                        for c in 0..d.c {
                            for y in 0..d.h {
                                for x in 0..d.w {
                                    let o = out.offset(b, c, f, y, x);
                                    out.data[o] = (v.get(b, c, f, y, x) - m).tanh();
                                }
                            }
                        }
                    }
                }
                out
            };
            prop_assert_eq!(via_view, direct);
        }
    }

    #[test]
    fn reshapes_roundtrip_large_dims() {
        // dims up to 64 on the spatial axes
        let v = random(Dims::new(1, 2, 3, 64, 64), 11);
        assert_eq!(inverse_spatial(&reshape_spatial(&v)), v);
        assert_eq!(inverse_temporal(&reshape_temporal(&v)), v);
    }
}
