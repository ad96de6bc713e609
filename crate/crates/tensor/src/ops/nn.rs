use crate::error::{invalid, shape_err, Result, TensorError};
use crate::tensor::Tensor;

impl Tensor {
    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let n = self.shape()[axis];
        if n == 0 {
            return Err(invalid("softmax", "empty axis"));
        }
        if !self.is_finite() {
            return Err(TensorError::NonFinite("softmax input".into()));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - max).exp();
                    y[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    y[at(i)] /= z;
                }
            }
        }
        let saved = y.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self], move || {
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[at(i)] * saved[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] = saved[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Normalizes each row of a 2-d tensor, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.expect_2d("layer_norm")?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(shape_err("layer_norm", self.shape(), gamma.shape()));
        }
        let stats = normalize_blocks(self.data(), m, n, eps);
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = stats.xhat[i * n + j] * gamma.data()[j] + beta.data()[j];
            }
        }
        let gam = gamma.clone();
        Ok(Tensor::from_op(vec![m, n], y, &[self, gamma, beta], move || {
            Box::new(move |g| {
                let mut gxhat = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let k = i * n + j;
                        gxhat[k] = g[k] * gam.data()[j];
                        gg[j] += g[k] * stats.xhat[k];
                        gb[j] += g[k];
                    }
                }
                let gx = stats.backward(&gxhat, m, n);
                vec![Some(gx), Some(gg), Some(gb)]
            })
        }))
    }

    /// Group normalization of a `[C,H,W]` map with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let [c, h, w] = *self.shape() else {
            return Err(invalid("group_norm", format!("expected [C,H,W], got {:?}", self.shape())));
        };
        if groups == 0 || c % groups != 0 {
            return Err(invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if gamma.numel() != c || beta.numel() != c {
            return Err(shape_err("group_norm", self.shape(), gamma.shape()));
        }
        let hw = h * w;
        let block = c / groups * hw;
        let stats = normalize_blocks(self.data(), groups, block, eps);
        let mut y = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                let k = ch * hw + p;
                y[k] = stats.xhat[k] * gamma.data()[ch] + beta.data()[ch];
            }
        }
        let gam = gamma.clone();
        Ok(Tensor::from_op(vec![c, h, w], y, &[self, gamma, beta], move || {
            Box::new(move |g| {
                let mut gxhat = vec![0.0; c * hw];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..hw {
                        let k = ch * hw + p;
                        gxhat[k] = g[k] * gam.data()[ch];
                        gg[ch] += g[k] * stats.xhat[k];
                        gb[ch] += g[k];
                    }
                }
                let gx = stats.backward(&gxhat, groups, block);
                vec![Some(gx), Some(gg), Some(gb)]
            })
        }))
    }
}

struct BlockStats {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn normalize_blocks(x: &[f64], blocks: usize, len: usize, eps: f64) -> BlockStats {
    let mut xhat = vec![0.0; blocks * len];
    let mut inv_std = vec![0.0; blocks];
    for b in 0..blocks {
        let s = &x[b * len..(b + 1) * len];
        let mean = s.iter().sum::<f64>() / len as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[b] = is;
        for (o, v) in xhat[b * len..(b + 1) * len].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
    }
    BlockStats { xhat, inv_std }
}

impl BlockStats {
    fn backward(&self, gxhat: &[f64], blocks: usize, len: usize) -> Vec<f64> {
        let mut gx = vec![0.0; blocks * len];
        for b in 0..blocks {
            let r = b * len..(b + 1) * len;
            let gh = &gxhat[r.clone()];
            let xh = &self.xhat[r.clone()];
            let mean_g = gh.iter().sum::<f64>() / len as f64;
            let mean_gx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
            for ((o, g), x) in gx[r].iter_mut().zip(gh).zip(xh) {
                *o = self.inv_std[b] * (g - mean_g - x * mean_gx);
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    #[test]
    fn uniform_softmax() {
        let y = Tensor::from_vec(vec![0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let y = Tensor::from_vec(vec![1000.0, 0.0]).softmax(0).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(Tensor::from_vec(vec![f64::NAN, 0.0]).softmax(0).is_err());
    }

    #[test]
    fn softmax_middle_axis_gradient() {
        let x = Tensor::param(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.9).sin() * 2.0).collect()).unwrap();
        let w = Tensor::new(&[2, 3, 2], (0..12).map(|i| i as f64 - 4.0).collect()).unwrap();
        let r = check_gradients(|t| t[0].softmax(1).unwrap().mul(&w).unwrap().sum(), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn layer_norm_gradient() {
        let x = Tensor::param(&[3, 4], (0..12).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let g = Tensor::param(&[4], vec![1.0, 0.5, -0.3, 2.0]).unwrap();
        let b = Tensor::param(&[4], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let w = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let r = check_gradients(
            |t| t[0].layer_norm(&t[1], &t[2], 1e-5).unwrap().mul(&w).unwrap().sum(),
            &[x, g, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn group_norm_gradient() {
        let x = Tensor::param(&[4, 2, 3], (0..24).map(|i| (i as f64 * 0.77).sin()).collect()).unwrap();
        let g = Tensor::param(&[4], vec![1.0, 0.5, -0.3, 2.0]).unwrap();
        let b = Tensor::param(&[4], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let w = Tensor::new(&[4, 2, 3], (0..24).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        for groups in [1, 2, 4] {
            let r = check_gradients(
                |t| t[0].group_norm(groups, &t[1], &t[2], 1e-5).unwrap().mul(&w).unwrap().sum(),
                &[x.clone(), g.clone(), b.clone()],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "groups={groups} {r:?}");
        }
    }
}
