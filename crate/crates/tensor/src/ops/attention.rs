use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Scaled dot-product attention split into `heads` column groups.
/// `q: [N,D]`, `k, v: [T,D]` → `[N,D]`, scaling `1/sqrt(D/heads)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    const OP: &str = "multi_head_attention";
    let (n, d) = q.expect_2d(OP)?;
    let (t, dk) = k.expect_2d(OP)?;
    if dk != d {
        return Err(shape_err(OP, q.shape(), k.shape()));
    }
    k.expect_same_shape(v, OP)?;
    if heads == 0 || d % heads != 0 {
        return Err(invalid(OP, format!("{d} channels not divisible by {heads} heads")));
    }
    if t == 0 {
        return Err(invalid(OP, "no keys"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    // probs[h][i*t + j]
    let mut probs = vec![0.0; heads * n * t];
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let c0 = h * dh;
        let p = &mut probs[h * n * t..(h + 1) * n * t];
        for i in 0..n {
            let qi = &qd[i * d + c0..i * d + c0 + dh];
            let row = &mut p[i * t..(i + 1) * t];
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &kd[j * d + c0..j * d + c0 + dh];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*r);
            }
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            let orow = &mut out[i * d + c0..i * d + c0 + dh];
            for (j, r) in row.iter_mut().enumerate() {
                *r /= z;
                for (o, vv) in orow.iter_mut().zip(&vd[j * d + c0..j * d + c0 + dh]) {
                    *o += *r * vv;
                }
            }
        }
    }

    let (qt, kt, vt) = (q.clone(), k.clone(), v.clone());
    Ok(Tensor::from_op(vec![n, d], out, &[q, k, v], move || {
        Box::new(move |g| {
            let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
            let mut gq = vec![0.0; n * d];
            let mut gk = vec![0.0; t * d];
            let mut gv = vec![0.0; t * d];
            let mut ds = vec![0.0; t];
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[h * n * t..(h + 1) * n * t];
                for i in 0..n {
                    let gi = &g[i * d + c0..i * d + c0 + dh];
                    let prow = &p[i * t..(i + 1) * t];
                    let mut dot = 0.0;
                    for j in 0..t {
                        let vj = &vd[j * d + c0..j * d + c0 + dh];
                        let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        for (gvv, gg) in gv[j * d + c0..j * d + c0 + dh].iter_mut().zip(gi) {
                            *gvv += prow[j] * gg;
                        }
                    }
                    for j in 0..t {
                        let s = prow[j] * (ds[j] - dot) * scale;
                        for c in 0..dh {
                            gq[i * d + c0 + c] += s * kd[j * d + c0 + c];
                            gk[j * d + c0 + c] += s * qd[i * d + c0 + c];
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        })
    }))
}
