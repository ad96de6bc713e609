use crate::error::{shape_err, Result};
use crate::kernels::{sigmoid, softplus};
use crate::tensor::Tensor;

/// Focal loss of one sigmoid logit against a binary target.
pub fn focal_term(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    if target {
        // -log p = softplus(-x)
        alpha * (1.0 - p).powf(gamma) * softplus(-logit)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(logit)
    }
}

fn focal_grad(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    if target {
        let log_p = -softplus(-logit);
        alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p))
    } else {
        let log_q = -softplus(logit);
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q)
    }
}

/// Sum of focal terms over every logit. `targets` holds 0/1 per element.
pub fn sigmoid_focal_loss(logits: &Tensor, targets: &[f64], alpha: f64, gamma: f64) -> Result<Tensor> {
    if targets.len() != logits.numel() {
        return Err(shape_err("sigmoid_focal_loss", logits.shape(), &[targets.len()]));
    }
    let total = logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&x, &t)| focal_term(x, t > 0.5, alpha, gamma))
        .sum();
    let (x, t) = (logits.clone(), targets.to_vec());
    Ok(Tensor::from_op(Vec::new(), vec![total], &[logits], move || {
        Box::new(move |g| {
            let gx = x
                .data()
                .iter()
                .zip(&t)
                .map(|(&x, &t)| g[0] * focal_grad(x, t > 0.5, alpha, gamma))
                .collect();
            vec![Some(gx)]
        })
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiouParts {
    pub iou: f64,
    pub giou: f64,
}

/// GIoU of two `[x1,y1,x2,y2]` boxes (no clamping).
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> GiouParts {
    let (parts, _, _) = giou_with_grad(a, b);
    parts
}

fn giou_with_grad(a: [f64; 4], b: [f64; 4]) -> (GiouParts, [f64; 4], [f64; 4]) {
    let (aw, ah) = (a[2] - a[0], a[3] - a[1]);
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    let (area_a, area_b) = (aw * ah, bw * bh);

    let a_right_inner = a[2] <= b[2];
    let a_left_inner = a[0] >= b[0];
    let a_bottom_inner = a[3] <= b[3];
    let a_top_inner = a[1] >= b[1];
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let carea = ew * eh;

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let giou = if carea > 0.0 { iou - (carea - union) / carea } else { iou };
    let mut ga = [0.0; 4];
    let mut gb = [0.0; 4];
    if union <= 0.0 || carea <= 0.0 {
        return (GiouParts { iou, giou }, ga, gb);
    }

    let g_inter = (union + inter) / (union * union) - 1.0 / carea;
    let g_area = -inter / (union * union) + 1.0 / carea;
    let g_carea = -union / (carea * carea);

    for (g, w, h) in [(&mut ga, aw, ah), (&mut gb, bw, bh)] {
        g[0] -= g_area * h;
        g[2] += g_area * h;
        g[1] -= g_area * w;
        g[3] += g_area * w;
    }
    if iw > 0.0 && ih > 0.0 {
        let (giw, gih) = (g_inter * ih, g_inter * iw);
        if a_right_inner { ga[2] += giw } else { gb[2] += giw }
        if a_left_inner { ga[0] -= giw } else { gb[0] -= giw }
        if a_bottom_inner { ga[3] += gih } else { gb[3] += gih }
        if a_top_inner { ga[1] -= gih } else { gb[1] -= gih }
    }
    let (gew, geh) = (g_carea * eh, g_carea * ew);
    if a[2] >= b[2] { ga[2] += gew } else { gb[2] += gew }
    if a[0] <= b[0] { ga[0] -= gew } else { gb[0] -= gew }
    if a[3] >= b[3] { ga[3] += geh } else { gb[3] += geh }
    if a[1] <= b[1] { ga[1] -= geh } else { gb[1] -= geh }
    (GiouParts { iou, giou }, ga, gb)
}

/// Clamped corners of a `(cx,cy,w,h)` row plus the clamp masks.
fn corners(b: &[f64]) -> ([f64; 4], [bool; 4]) {
    let raw = [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0];
    let clamped = raw.map(|v| v.clamp(0.0, 1.0));
    let inside = raw.map(|v| v > 0.0 && v < 1.0);
    (clamped, inside)
}

fn corner_grad_to_cxcywh(g: [f64; 4], inside: [bool; 4]) -> [f64; 4] {
    let g = std::array::from_fn::<f64, 4, _>(|i| if inside[i] { g[i] } else { 0.0 });
    [g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])]
}

impl Tensor {
    /// Row-wise GIoU between two `[P,4]` tensors of `(cx,cy,w,h)` boxes whose
    /// corners are clamped to the unit square. Returns `[P]`.
    pub fn giou_pairs(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "giou_pairs")?;
        let (p, four) = self.expect_2d("giou_pairs")?;
        if four != 4 {
            return Err(shape_err("giou_pairs", self.shape(), other.shape()));
        }
        let mut out = Vec::with_capacity(p);
        let mut grads = Vec::with_capacity(p);
        for (a, b) in self.data().chunks(4).zip(other.data().chunks(4)) {
            let (ca, ia) = corners(a);
            let (cb, ib) = corners(b);
            let (parts, ga, gb) = giou_with_grad(ca, cb);
            out.push(parts.giou);
            grads.push((corner_grad_to_cxcywh(ga, ia), corner_grad_to_cxcywh(gb, ib)));
        }
        Ok(Tensor::from_op(vec![p], out, &[self, other], move || {
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(p * 4);
                let mut gb = Vec::with_capacity(p * 4);
                for (gi, (da, db)) in g.iter().zip(&grads) {
                    ga.extend(da.iter().map(|v| v * gi));
                    gb.extend(db.iter().map(|v| v * gi));
                }
                vec![Some(ga), Some(gb)]
            })
        }))
    }
}
