use crate::error::{invalid, shape_err, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_row, col, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.ow + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution of a `[C_in,H,W]` map with `[C_out,C_in,kh,kw]` weights.
/// Output side is `floor((H + 2·padding − kh)/stride) + 1`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [cin, h, w] = *x.shape() else {
        return Err(invalid("conv2d", format!("input must be [C,H,W], got {:?}", x.shape())));
    };
    let [cout, cin2, kh, kw] = *weight.shape() else {
        return Err(invalid("conv2d", format!("weight must be 4-d, got {:?}", weight.shape())));
    };
    if cin != cin2 {
        return Err(shape_err("conv2d", x.shape(), weight.shape()));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(shape_err("conv2d", weight.shape(), b.shape()));
        }
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh > ph || kw > pw {
        return Err(invalid(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}: non-positive output size"),
        ));
    }
    let geo = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    };
    let (rows, cols) = (geo.rows(), geo.cols());
    let mut im2col = vec![0.0; rows * cols];
    let src = x.data();
    geo.for_each_tap(|r, c, i| im2col[r * cols + c] = src[i]);

    let mut out = vec![0.0; cout * cols];
    if let Some(b) = bias {
        for (o, bv) in out.chunks_mut(cols).zip(b.data()) {
            o.fill(*bv);
        }
    }
    gemm_nn(cout, rows, cols, weight.data(), &im2col, &mut out);

    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let has_bias = bias.is_some();
    let (xr, wt) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(vec![cout, geo.oh, geo.ow], out, &inputs, move || {
        Box::new(move |g| {
            let gw = wt.requires_grad().then(|| {
                let mut gw = vec![0.0; cout * rows];
                gemm_nt(cout, rows, cols, g, &im2col, &mut gw);
                gw
            });
            let gx = xr.requires_grad().then(|| {
                let mut gcol = vec![0.0; rows * cols];
                gemm_tn(cout, rows, cols, wt.data(), g, &mut gcol);
                let mut gx = vec![0.0; geo.cin * geo.h * geo.w];
                geo.for_each_tap(|r, c, i| gx[i] += gcol[r * cols + c]);
                gx
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(g.chunks(cols).map(|c| c.iter().sum()).collect()));
            }
            grads
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    #[test]
    fn ones_kernel_center_sums_neighbourhood() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn pointwise_kernel_scales() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn strided_output_shape() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert_eq!(conv2d(&x, &w, None, 2, 1).unwrap().shape(), &[2, 2, 2]);
    }

    #[test]
    fn oversized_kernel_is_a_shape_error() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn conv_gradient() {
        let x = Tensor::param(&[2, 5, 4], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::param(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.21).cos()).collect()).unwrap();
        let b = Tensor::param(&[3], vec![0.1, -0.1, 0.2]).unwrap();
        let r = check_gradients(
            |t| {
                let y = conv2d(&t[0], &t[1], Some(&t[2]), 2, 1).unwrap();
                y.mul(&y).unwrap().sum()
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
