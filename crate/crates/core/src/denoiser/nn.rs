//! Layer primitives with hand-written gradients.
//!
//! Activations are channel-last: `n` frames × `h·w` positions × `c`
//! channels. Reductions accumulate in `f64`; parameter gradients are `f64`
//! accumulators.

/// `n × h × w × c` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn like(&self, c: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.rows() * c);
        Self { n: self.n, h: self.h, w: self.w, c, data }
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// 3×3 convolution with zero padding; weights laid out `(3, 3, cin, cout)`.
pub fn conv3x3(x: &Act, weight: &[f32], bias: &[f32], cout: usize) -> Act {
    let cin = x.c;
    debug_assert_eq!(weight.len(), 9 * cin * cout);
    let mut out = Act::zeros(x.n, x.h, x.w, cout);
    let mut acc = vec![0.0f64; cout];
    for n in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                acc.iter_mut().zip(bias).for_each(|(a, &b)| *a = b as f64);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= x.w as isize {
                            continue;
                        }
                        let src = ((n * x.h + sy as usize) * x.w + sx as usize) * cin;
                        let wk = (ky * 3 + kx) * cin * cout;
                        for i in 0..cin {
                            let v = x.data[src + i] as f64;
                            let wrow = &weight[wk + i * cout..wk + (i + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += v * wv as f64;
                            }
                        }
                    }
                }
                let dst = ((n * x.h + y) * x.w + xx) * cout;
                for (o, a) in out.data[dst..dst + cout].iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3`]; returns the input gradient.
pub fn conv3x3_backward(x: &Act, weight: &[f32], dy: &Act, gw: &mut [f64], gb: &mut [f64]) -> Act {
    let (cin, cout) = (x.c, dy.c);
    let mut dx = vec![0.0f64; x.data.len()];
    for n in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let g = &dy.data[((n * x.h + y) * x.w + xx) * cout..][..cout];
                for (b, &gv) in gb.iter_mut().zip(g) {
                    *b += gv as f64;
                }
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= x.w as isize {
                            continue;
                        }
                        let src = ((n * x.h + sy as usize) * x.w + sx as usize) * cin;
                        let wk = (ky * 3 + kx) * cin * cout;
                        for i in 0..cin {
                            let v = x.data[src + i] as f64;
                            let wrow = &weight[wk + i * cout..wk + (i + 1) * cout];
                            let gwrow = &mut gw[wk + i * cout..wk + (i + 1) * cout];
                            let mut s = 0.0f64;
                            for o in 0..cout {
                                let gv = g[o] as f64;
                                gwrow[o] += v * gv;
                                s += wrow[o] as f64 * gv;
                            }
                            dx[src + i] += s;
                        }
                    }
                }
            }
        }
    }
    x.like(cin, dx.into_iter().map(|v| v as f32).collect())
}

/// `rows × cin` times `cin × cout`.
pub fn matmul(x: &[f32], rows: usize, cin: usize, w: &[f32], cout: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), rows * cin);
    debug_assert_eq!(w.len(), cin * cout);
    let mut out = vec![0.0f32; rows * cout];
    let mut acc = vec![0.0f64; cout];
    for r in 0..rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..cin {
            let v = x[r * cin + i] as f64;
            if v == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&w[i * cout..(i + 1) * cout]) {
                *a += v * wv as f64;
            }
        }
        for (o, a) in out[r * cout..(r + 1) * cout].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    out
}

/// Gradients of [`matmul`]: accumulates into `gw`, returns `dx` when asked.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    x: &[f32],
    rows: usize,
    cin: usize,
    w: &[f32],
    cout: usize,
    dy: &[f32],
    gw: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f32>> {
    for r in 0..rows {
        let g = &dy[r * cout..(r + 1) * cout];
        for i in 0..cin {
            let v = x[r * cin + i] as f64;
            if v == 0.0 {
                continue;
            }
            for (gwv, &gv) in gw[i * cout..(i + 1) * cout].iter_mut().zip(g) {
                *gwv += v * gv as f64;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0f32; rows * cin];
        for r in 0..rows {
            let g = &dy[r * cout..(r + 1) * cout];
            for i in 0..cin {
                let s: f64 = w[i * cout..(i + 1) * cout].iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
                dx[r * cin + i] = s as f32;
            }
        }
        dx
    })
}

/// Softmax of `logits` in place over entries where `valid` holds; invalid
/// entries become exactly zero.
fn softmax_masked(logits: &mut [f64], valid: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &l) in logits.iter().enumerate() {
        if valid(j) && l > max {
            max = l;
        }
    }
    let mut sum = 0.0f64;
    for (j, l) in logits.iter_mut().enumerate() {
        if valid(j) {
            *l = (*l - max).exp();
            sum += *l;
        } else {
            *l = 0.0;
        }
    }
    logits.iter_mut().for_each(|l| *l /= sum);
}

/// Key positions of a windowed attention: `(2r+1)²` offsets around each query.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub h: usize,
    pub w: usize,
    pub radius: usize,
}

impl Window {
    pub fn size(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    /// Position index of key slot `j` for query `p`, if inside the frame.
    #[inline]
    pub fn key(&self, p: usize, j: usize) -> Option<usize> {
        let side = 2 * self.radius + 1;
        let (y, x) = ((p / self.w) as isize, (p % self.w) as isize);
        let ky = y + (j / side) as isize - self.radius as isize;
        let kx = x + (j % side) as isize - self.radius as isize;
        (ky >= 0 && kx >= 0 && (ky as usize) < self.h && (kx as usize) < self.w)
            .then(|| ky as usize * self.w + kx as usize)
    }
}

/// Windowed self-attention within each frame. `q`, `k`, `v` are
/// `n × (h·w) × a`; returns probabilities `n × (h·w) × window`.
pub fn window_attention_probs(q: &[f32], k: &[f32], n: usize, win: Window, a: usize) -> Vec<f32> {
    let p_count = win.h * win.w;
    let kk = win.size();
    let scale = 1.0 / (a as f64).sqrt();
    let mut probs = vec![0.0f32; n * p_count * kk];
    let mut logits = vec![0.0f64; kk];
    for fr in 0..n {
        let base = fr * p_count;
        for p in 0..p_count {
            let qrow = &q[(base + p) * a..(base + p + 1) * a];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = match win.key(p, j) {
                    Some(kp) => {
                        let krow = &k[(base + kp) * a..(base + kp + 1) * a];
                        qrow.iter().zip(krow).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() * scale
                    }
                    None => 0.0,
                };
            }
            softmax_masked(&mut logits, |j| win.key(p, j).is_some());
            for (o, l) in probs[(base + p) * kk..(base + p + 1) * kk].iter_mut().zip(&logits) {
                *o = *l as f32;
            }
        }
    }
    probs
}

pub fn window_attention_apply(probs: &[f32], v: &[f32], n: usize, win: Window, a: usize) -> Vec<f32> {
    let p_count = win.h * win.w;
    let kk = win.size();
    let mut out = vec![0.0f32; n * p_count * a];
    let mut acc = vec![0.0f64; a];
    for fr in 0..n {
        let base = fr * p_count;
        for p in 0..p_count {
            acc.iter_mut().for_each(|x| *x = 0.0);
            let prow = &probs[(base + p) * kk..(base + p + 1) * kk];
            for (j, &pj) in prow.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                if let Some(kp) = win.key(p, j) {
                    for (x, &vv) in acc.iter_mut().zip(&v[(base + kp) * a..(base + kp + 1) * a]) {
                        *x += pj as f64 * vv as f64;
                    }
                }
            }
            for (o, x) in out[(base + p) * a..(base + p + 1) * a].iter_mut().zip(&acc) {
                *o = *x as f32;
            }
        }
    }
    out
}

/// Gradients of windowed attention; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    n: usize,
    win: Window,
    a: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let p_count = win.h * win.w;
    let kk = win.size();
    let scale = 1.0 / (a as f64).sqrt();
    let mut dq = vec![0.0f64; q.len()];
    let mut dk = vec![0.0f64; k.len()];
    let mut dv = vec![0.0f64; v.len()];
    let mut dp = vec![0.0f64; kk];
    for fr in 0..n {
        let base = fr * p_count;
        for p in 0..p_count {
            let prow = &probs[(base + p) * kk..(base + p + 1) * kk];
            let g = &dout[(base + p) * a..(base + p + 1) * a];
            let mut dot = 0.0f64;
            for j in 0..kk {
                dp[j] = 0.0;
                if let Some(kp) = win.key(p, j) {
                    let vrow = &v[(base + kp) * a..(base + kp + 1) * a];
                    dp[j] = g.iter().zip(vrow).map(|(&x, &y)| x as f64 * y as f64).sum();
                    dot += prow[j] as f64 * dp[j];
                    for (d, &gv) in dv[(base + kp) * a..(base + kp + 1) * a].iter_mut().zip(g) {
                        *d += prow[j] as f64 * gv as f64;
                    }
                }
            }
            for j in 0..kk {
                if let Some(kp) = win.key(p, j) {
                    let ds = prow[j] as f64 * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..a {
                        dq[(base + p) * a + c] += ds * k[(base + kp) * a + c] as f64;
                        dk[(base + kp) * a + c] += ds * q[(base + p) * a + c] as f64;
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    (cast(dq), cast(dk), cast(dv))
}

/// Dense attention of `rows` queries against shared `keys` per group.
/// `q` is `groups × rows × a`, `k` and `v` are `groups_kv × keys × a` where a
/// group uses key set `group % groups_kv`. Returns probabilities
/// `groups × rows × keys`.
pub fn dense_attention_probs(
    q: &[f32],
    k: &[f32],
    groups: usize,
    groups_kv: usize,
    rows: usize,
    keys: usize,
    a: usize,
) -> Vec<f32> {
    let scale = 1.0 / (a as f64).sqrt();
    let mut probs = vec![0.0f32; groups * rows * keys];
    let mut logits = vec![0.0f64; keys];
    for gi in 0..groups {
        let kb = (gi % groups_kv) * keys;
        for r in 0..rows {
            let qrow = &q[(gi * rows + r) * a..(gi * rows + r + 1) * a];
            for (j, l) in logits.iter_mut().enumerate() {
                let krow = &k[(kb + j) * a..(kb + j + 1) * a];
                *l = qrow.iter().zip(krow).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() * scale;
            }
            softmax_masked(&mut logits, |_| true);
            for (o, l) in probs[(gi * rows + r) * keys..(gi * rows + r + 1) * keys].iter_mut().zip(&logits) {
                *o = *l as f32;
            }
        }
    }
    probs
}

pub fn dense_attention_apply(
    probs: &[f32],
    v: &[f32],
    groups: usize,
    groups_kv: usize,
    rows: usize,
    keys: usize,
    a: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; groups * rows * a];
    let mut acc = vec![0.0f64; a];
    for gi in 0..groups {
        let kb = (gi % groups_kv) * keys;
        for r in 0..rows {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..keys {
                let pj = probs[(gi * rows + r) * keys + j] as f64;
                if pj == 0.0 {
                    continue;
                }
                for (x, &vv) in acc.iter_mut().zip(&v[(kb + j) * a..(kb + j + 1) * a]) {
                    *x += pj * vv as f64;
                }
            }
            for (o, x) in out[(gi * rows + r) * a..(gi * rows + r + 1) * a].iter_mut().zip(&acc) {
                *o = *x as f32;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dense_attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    groups: usize,
    groups_kv: usize,
    rows: usize,
    keys: usize,
    a: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let scale = 1.0 / (a as f64).sqrt();
    let mut dq = vec![0.0f64; q.len()];
    let mut dk = vec![0.0f64; k.len()];
    let mut dv = vec![0.0f64; v.len()];
    let mut dp = vec![0.0f64; keys];
    for gi in 0..groups {
        let kb = (gi % groups_kv) * keys;
        for r in 0..rows {
            let row = gi * rows + r;
            let prow = &probs[row * keys..(row + 1) * keys];
            let g = &dout[row * a..(row + 1) * a];
            let mut dot = 0.0f64;
            for j in 0..keys {
                let vrow = &v[(kb + j) * a..(kb + j + 1) * a];
                dp[j] = g.iter().zip(vrow).map(|(&x, &y)| x as f64 * y as f64).sum();
                dot += prow[j] as f64 * dp[j];
                for (d, &gv) in dv[(kb + j) * a..(kb + j + 1) * a].iter_mut().zip(g) {
                    *d += prow[j] as f64 * gv as f64;
                }
            }
            for j in 0..keys {
                let ds = prow[j] as f64 * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..a {
                    dq[row * a + c] += ds * k[(kb + j) * a + c] as f64;
                    dk[(kb + j) * a + c] += ds * q[row * a + c] as f64;
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    (cast(dq), cast(dk), cast(dv))
}

/// Reorders `(b·f) × p × a` frame-major rows into `(b·p) × f × a` sequences.
pub fn to_sequences(x: &[f32], b: usize, f: usize, p: usize, a: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for fi in 0..f {
            for pi in 0..p {
                let src = ((bi * f + fi) * p + pi) * a;
                let dst = ((bi * p + pi) * f + fi) * a;
                out[dst..dst + a].copy_from_slice(&x[src..src + a]);
            }
        }
    }
    out
}

/// Inverse of [`to_sequences`].
pub fn from_sequences(x: &[f32], b: usize, f: usize, p: usize, a: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for fi in 0..f {
            for pi in 0..p {
                let dst = ((bi * f + fi) * p + pi) * a;
                let src = ((bi * p + pi) * f + fi) * a;
                out[dst..dst + a].copy_from_slice(&x[src..src + a]);
            }
        }
    }
    out
}
