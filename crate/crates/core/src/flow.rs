//! Classical optical flow, backward warping and the flow-aware metrics.
//!
//! Flow follows the backward-mapping convention: for `flow = estimate_flow(a, b)`,
//! sampling `b` at `x + flow(x)` reconstructs `a`.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_clamped, Image, VideoLatent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub block: usize,
    pub radius: usize,
    pub levels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { block: 8, radius: 4, levels: 3 }
    }
}

impl FlowConfig {
    /// Largest displacement the pyramid search can produce.
    pub fn max_displacement(&self) -> usize {
        self.radius * ((1 << self.levels.max(1)) - 1)
    }
}

/// Per-pixel displacement `(dx, dy)` stored as `(h, w, 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w * 2] }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        let mut data = Vec::with_capacity(h * w * 2);
        for _ in 0..h * w {
            data.push(dx);
            data.push(dy);
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.w + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        let i = (y * self.w + x) * 2;
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }

    pub fn max_magnitude(&self) -> f32 {
        self.data.chunks(2).map(|v| v[0].hypot(v[1])).fold(0.0, f32::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Gray plane with its size.
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at_clamped(&self, y: i64, x: i64) -> f32 {
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        self.data[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let s = self.data[2 * y * self.w + 2 * x]
                    + self.data[2 * y * self.w + 2 * x + 1]
                    + self.data[(2 * y + 1) * self.w + 2 * x]
                    + self.data[(2 * y + 1) * self.w + 2 * x + 1];
                data[y * w + x] = 0.25 * s;
            }
        }
        Plane { h, w, data }
    }
}

/// Coarse-to-fine block matching. Each level tiles the image into
/// `block × block` tiles, searches integer offsets within `radius` around the
/// upsampled coarser estimate and keeps the minimum-SAD offset (ties go to the
/// smallest total displacement). The result is constant per finest-level block.
pub fn estimate_flow(a: &Image, b: &Image, cfg: &FlowConfig) -> Result<FlowField> {
    if (a.c, a.h, a.w) != (b.c, b.h, b.w) {
        return Err(Error::Shape(format!("flow frames differ: {}x{}x{} vs {}x{}x{}", a.c, a.h, a.w, b.c, b.h, b.w)));
    }
    if cfg.block == 0 || cfg.levels == 0 {
        return Err(Error::Param("flow block size and level count must be positive".into()));
    }
    if a.h < cfg.block || a.w < cfg.block {
        return Err(Error::FrameTooSmall { h: a.h, w: a.w, block: cfg.block });
    }
    let mut pa = vec![Plane { h: a.h, w: a.w, data: a.to_gray() }];
    let mut pb = vec![Plane { h: b.h, w: b.w, data: b.to_gray() }];
    while pa.len() < cfg.levels {
        let next = pa.last().unwrap().downsample();
        if next.h < cfg.block || next.w < cfg.block {
            break;
        }
        pa.push(next);
        pb.push(pb.last().unwrap().downsample());
    }

    // per-block integer vectors of the previous (coarser) level
    #[allow(clippy::type_complexity)]
    let mut coarse: Option<(usize, usize, Vec<(i64, i64)>)> = None;
    let r = cfg.radius as i64;
    for level in (0..pa.len()).rev() {
        let (la, lb) = (&pa[level], &pb[level]);
        let by = la.h.div_ceil(cfg.block);
        let bx = la.w.div_ceil(cfg.block);
        let mut vecs = Vec::with_capacity(by * bx);
        for iy in 0..by {
            for ix in 0..bx {
                let y0 = iy * cfg.block;
                let x0 = ix * cfg.block;
                let y1 = (y0 + cfg.block).min(la.h);
                let x1 = (x0 + cfg.block).min(la.w);
                let pred = match &coarse {
                    None => (0, 0),
                    Some((cby, cbx, cv)) => {
                        let cy = ((y0 + y1) / 2 / 2 / cfg.block).min(cby - 1);
                        let cx = ((x0 + x1) / 2 / 2 / cfg.block).min(cbx - 1);
                        let (dx, dy) = cv[cy * cbx + cx];
                        (2 * dx, 2 * dy)
                    }
                };
                let mut best = (f64::INFINITY, i64::MAX, pred);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (vx, vy) = (pred.0 + dx, pred.1 + dy);
                        let mut sad = 0.0f64;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let va = la.data[y * la.w + x];
                                let vb = lb.at_clamped(y as i64 + vy, x as i64 + vx);
                                sad += (va - vb).abs() as f64;
                            }
                        }
                        let mag = vx * vx + vy * vy;
                        if sad < best.0 || (sad == best.0 && mag < best.1) {
                            best = (sad, mag, (vx, vy));
                        }
                    }
                }
                vecs.push(best.2);
            }
        }
        coarse = Some((by, bx, vecs));
    }
    let (_, bx, vecs) = coarse.expect("at least one level");
    let mut flow = FlowField::zeros(a.h, a.w);
    for y in 0..a.h {
        for x in 0..a.w {
            let (dx, dy) = vecs[(y / cfg.block) * bx + x / cfg.block];
            flow.set(y, x, dx as f32, dy as f32);
        }
    }
    Ok(flow)
}

/// Backward bilinear warp of one plane: `out(x) = src(x + flow(x))`, clamped at the border.
pub fn warp_plane(src: &[f32], h: usize, w: usize, flow: &FlowField) -> Result<Vec<f32>> {
    if (flow.h, flow.w) != (h, w) || src.len() != h * w {
        return Err(Error::Shape(format!("warp: plane {h}x{w} vs flow {}x{}", flow.h, flow.w)));
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.get(y, x);
            out[y * w + x] = if dx == 0.0 && dy == 0.0 {
                src[y * w + x]
            } else {
                bilinear_clamped(src, h, w, y as f32 + dy, x as f32 + dx)
            };
        }
    }
    Ok(out)
}

pub fn warp_image(src: &Image, flow: &FlowField) -> Result<Image> {
    let mut data = Vec::with_capacity(src.data.len());
    for c in 0..src.c {
        data.extend(warp_plane(src.plane(c), src.h, src.w, flow)?);
    }
    Image::new(src.c, src.h, src.w, data)
}

/// Warps every `h×w` plane of `src` with the same field.
pub fn warp_frames(src: &VideoLatent, flow: &FlowField) -> Result<VideoLatent> {
    let d = src.dims();
    let mut data = Vec::with_capacity(d.len());
    let plane = d.pixels();
    for chunk in src.data().chunks(plane) {
        data.extend(warp_plane(chunk, d.h, d.w, flow)?);
    }
    VideoLatent::new(d, data)
}

/// Motion-aware MSE between frames `i` and `j` of batch entry 0: estimates
/// the flow from frame `i` to frame `j`, warps `j` onto `i` and averages the
/// squared error over pixels whose sample position lies inside the frame.
/// Reported in percent.
pub fn mamse(video: &VideoLatent, boundary: (usize, usize), cfg: &FlowConfig) -> Result<f64> {
    let d = video.dims();
    let (i, j) = boundary;
    if i >= d.f || j >= d.f {
        return Err(Error::Param(format!("boundary ({i}, {j}) outside 0..{}", d.f)));
    }
    let (a, b) = (video.frame(0, i), video.frame(0, j));
    let flow = estimate_flow(&a, &b, cfg)?;
    let warped = warp_image(&b, &flow)?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for y in 0..d.h {
        for x in 0..d.w {
            let (dx, dy) = flow.get(y, x);
            let (sy, sx) = (y as f32 + dy, x as f32 + dx);
            if sy < 0.0 || sx < 0.0 || sy > (d.h - 1) as f32 || sx > (d.w - 1) as f32 {
                continue;
            }
            for c in 0..d.c {
                let e = a.get(c, y, x) as f64 - warped.get(c, y, x) as f64;
                sum += e * e;
            }
            count += d.c;
        }
    }
    if count == 0 {
        return Err(Error::Param("mamse: no valid pixels after warping".into()));
    }
    Ok(100.0 * sum / count as f64)
}

/// Mean cosine similarity of the embeddings of consecutive frames (batch entry 0).
pub fn frame_consistency(video: &VideoLatent, embedder: &dyn Embedder) -> Result<f64> {
    let d = video.dims();
    if d.f < 2 {
        return Err(Error::Param("frame consistency needs at least 2 frames".into()));
    }
    let embs = (0..d.f).map(|f| embedder.embed_image(&video.frame(0, f))).collect::<Result<Vec<_>>>()?;
    let total: f64 = embs.windows(2).map(|p| cosine(&p[0], &p[1])).sum();
    Ok(total / (d.f - 1) as f64)
}
