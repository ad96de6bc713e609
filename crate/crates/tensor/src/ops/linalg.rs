use crate::error::{shape_err, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

impl Tensor {
    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = rhs.expect_2d("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(), rhs.data(), &mut out);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(vec![m, n], out, &[self, rhs], move || {
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, k, n, g, b.data(), &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(m, k, n, a.data(), g, &mut gb);
                    gb
                });
                vec![ga, gb]
            })
        }))
    }

    /// Affine map `x·W + b` with `W: [in, out]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("linear")?;
        let (k2, n) = weight.expect_2d("linear")?;
        if k != k2 || bias.numel() != n {
            return Err(shape_err("linear", self.shape(), weight.shape()));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias.data());
        }
        gemm_nn(m, k, n, self.data(), weight.data(), &mut out);
        let (x, w) = (self.clone(), weight.clone());
        let b_rg = bias.requires_grad();
        Ok(Tensor::from_op(vec![m, n], out, &[self, weight, bias], move || {
            Box::new(move |g| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![0.0; m * k];
                    gemm_nt(m, k, n, g, w.data(), &mut gx);
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![0.0; k * n];
                    gemm_tn(m, k, n, x.data(), g, &mut gw);
                    gw
                });
                let gb = b_rg.then(|| {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            })
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("transpose")?;
        let src = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::from_op(vec![n, m], out, &[self], move || {
            Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(gx)]
            })
        }))
    }
}
