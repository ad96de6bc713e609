use serde::{Deserialize, Serialize};

use detr_tensor::{giou_corners, GiouParts};

/// Normalized center-format box; all fields are fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCXCYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCXCYWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// `[x1,y1,x2,y2]`, clamped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        ]
    }

    pub fn from_corners(c: [f64; 4]) -> Self {
        Self::new((c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0, c[2] - c[0], c[3] - c[1])
    }

    pub fn iou(&self, other: &Self) -> f64 {
        self.giou_parts(other).iou
    }

    pub fn giou(&self, other: &Self) -> f64 {
        self.giou_parts(other).giou
    }

    fn giou_parts(&self, other: &Self) -> GiouParts {
        giou_corners(self.corners(), other.corners())
    }

    pub fn l1(&self, other: &Self) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }

    pub fn center_distance(&self, other: &Self) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// GIoU of two boxes given as pixel or unit corners, without clamping.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    giou_corners(a, b).giou
}
