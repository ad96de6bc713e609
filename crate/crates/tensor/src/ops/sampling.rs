//! Bilinear sampling with normalized coordinates.
//!
//! Normalized `(0,0)` is the center of pixel `(0,0)` and `(1,1)` the center of
//! pixel `(H-1,W-1)`, i.e. `px = x·(W-1)`, `py = y·(H-1)`. Taps that fall
//! outside the map read zero.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
}

impl LevelShape {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

/// The four taps around a sampling point. `idx` is `None` for padding taps.
struct Taps {
    idx: [Option<usize>; 4],
    fx: f64,
    fy: f64,
}

impl Taps {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let px = x * (w as f64 - 1.0);
        let py = y * (h as f64 - 1.0);
        let x0 = px.floor();
        let y0 = py.floor();
        let (fx, fy) = (px - x0, py - y0);
        let at = |dx: isize, dy: isize| {
            let xi = x0 as isize + dx;
            let yi = y0 as isize + dy;
            (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h)
                .then(|| yi as usize * w + xi as usize)
        };
        Taps {
            idx: [at(0, 0), at(1, 0), at(0, 1), at(1, 1)],
            fx,
            fy,
        }
    }

    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    /// Value, d/dpx, d/dpy for one channel given a tap reader.
    fn eval(&self, read: impl Fn(usize) -> f64) -> (f64, f64, f64) {
        let v: [f64; 4] = std::array::from_fn(|i| self.idx[i].map_or(0.0, &read));
        let wts = self.weights();
        let val = wts.iter().zip(&v).map(|(a, b)| a * b).sum();
        let dpx = (1.0 - self.fy) * (v[1] - v[0]) + self.fy * (v[3] - v[2]);
        let dpy = (1.0 - self.fx) * (v[2] - v[0]) + self.fx * (v[3] - v[1]);
        (val, dpx, dpy)
    }
}

/// Samples every channel of a `[C,H,W]` map at a normalized point `xy: [2]`.
pub fn bilinear_sample(map: &Tensor, xy: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *map.shape() else {
        return Err(invalid("bilinear_sample", format!("map must be [C,H,W], got {:?}", map.shape())));
    };
    if xy.numel() != 2 {
        return Err(shape_err("bilinear_sample", map.shape(), xy.shape()));
    }
    let (x, y) = (xy.data()[0], xy.data()[1]);
    let taps = Taps::new(x, y, h, w);
    let hw = h * w;
    let src = map.data();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        out.push(taps.eval(|i| src[ch * hw + i]).0);
    }
    let m = map.clone();
    Ok(Tensor::from_op(vec![c], out, &[map, xy], move || {
        Box::new(move |g| {
            let src = m.data();
            let mut gmap = vec![0.0; c * hw];
            let wts = taps.weights();
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                for (t, wt) in taps.idx.iter().zip(wts) {
                    if let Some(i) = t {
                        gmap[ch * hw + i] += g[ch] * wt;
                    }
                }
                let (_, dpx, dpy) = taps.eval(|i| src[ch * hw + i]);
                gx += g[ch] * dpx * (w as f64 - 1.0);
                gy += g[ch] * dpy * (h as f64 - 1.0);
            }
            vec![Some(gmap), Some(vec![gx, gy])]
        })
    }))
}

/// Multi-scale, multi-head weighted sampling.
///
/// * `value`: `[S, D]` tokens of all levels, level-major, row-major inside a level.
/// * `locations`: `[N, M·L·K·2]`, laid out `(head, level, point, xy)`.
/// * `weights`: `[N, M·L·K]`, same ordering without the xy axis.
///
/// Head `m` reads channels `m·D/M .. (m+1)·D/M`. Output is `[N, D]`.
pub fn ms_deform_sample(
    value: &Tensor,
    levels: &[LevelShape],
    locations: &Tensor,
    weights: &Tensor,
    heads: usize,
    points: usize,
) -> Result<Tensor> {
    const OP: &str = "ms_deform_sample";
    let (s, d) = value.expect_2d(OP)?;
    let (n, loc_cols) = locations.expect_2d(OP)?;
    let (n2, w_cols) = weights.expect_2d(OP)?;
    let l = levels.len();
    if heads == 0 || d % heads != 0 {
        return Err(invalid(OP, format!("{d} channels not divisible by {heads} heads")));
    }
    let total: usize = levels.iter().map(LevelShape::cells).sum();
    if total != s {
        return Err(invalid(OP, format!("levels hold {total} cells but value has {s} tokens")));
    }
    let per_query = heads * l * points;
    if n != n2 || loc_cols != per_query * 2 || w_cols != per_query {
        return Err(shape_err(OP, locations.shape(), weights.shape()));
    }
    let dh = d / heads;
    let mut starts = Vec::with_capacity(l);
    let mut acc = 0;
    for lv in levels {
        starts.push(acc);
        acc += lv.cells();
    }

    let v = value.data();
    let loc = locations.data();
    let wt = weights.data();
    let mut out = vec![0.0; n * d];
    for q in 0..n {
        for m in 0..heads {
            let orow = &mut out[q * d + m * dh..q * d + (m + 1) * dh];
            for (li, lv) in levels.iter().enumerate() {
                for k in 0..points {
                    let slot = (m * l + li) * points + k;
                    let a = wt[q * per_query + slot];
                    let taps = Taps::new(loc[(q * per_query + slot) * 2], loc[(q * per_query + slot) * 2 + 1], lv.h, lv.w);
                    for (t, tw) in taps.idx.iter().zip(taps.weights()) {
                        let Some(i) = t else { continue };
                        let base = (starts[li] + i) * d + m * dh;
                        let f = a * tw;
                        for (o, vv) in orow.iter_mut().zip(&v[base..base + dh]) {
                            *o += f * vv;
                        }
                    }
                }
            }
        }
    }

    let (val_t, loc_t, wt_t) = (value.clone(), locations.clone(), weights.clone());
    let levels = levels.to_vec();
    Ok(Tensor::from_op(vec![n, d], out, &[value, locations, weights], move || {
        Box::new(move |g| {
            let v = val_t.data();
            let loc = loc_t.data();
            let wt = wt_t.data();
            let mut gv = vec![0.0; s * d];
            let mut gloc = vec![0.0; n * loc_cols];
            let mut gw = vec![0.0; n * w_cols];
            for q in 0..n {
                for m in 0..heads {
                    let grow = &g[q * d + m * dh..q * d + (m + 1) * dh];
                    for (li, lv) in levels.iter().enumerate() {
                        for k in 0..points {
                            let slot = (m * l + li) * points + k;
                            let a = wt[q * per_query + slot];
                            let li_off = (q * per_query + slot) * 2;
                            let taps = Taps::new(loc[li_off], loc[li_off + 1], lv.h, lv.w);
                            let tw = taps.weights();
                            let (mut ga, mut gpx, mut gpy) = (0.0, 0.0, 0.0);
                            for (c, &go) in grow.iter().enumerate() {
                                let ch = m * dh + c;
                                let (val, dpx, dpy) =
                                    taps.eval(|i| v[(starts[li] + i) * d + ch]);
                                ga += go * val;
                                gpx += go * dpx;
                                gpy += go * dpy;
                                for (t, w_) in taps.idx.iter().zip(tw) {
                                    if let Some(i) = t {
                                        gv[(starts[li] + i) * d + ch] += a * w_ * go;
                                    }
                                }
                            }
                            gw[q * per_query + slot] = ga;
                            gloc[li_off] = a * gpx * (lv.w as f64 - 1.0);
                            gloc[li_off + 1] = a * gpy * (lv.h as f64 - 1.0);
                        }
                    }
                }
            }
            vec![Some(gv), Some(gloc), Some(gw)]
        })
    }))
}
