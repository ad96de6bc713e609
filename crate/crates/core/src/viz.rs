//! Reference-point SVG rendering and the center-gathering statistic.

use std::fmt::Write as _;
use std::str::FromStr;

use detr_tensor::{no_grad, Tensor};

use crate::boxes::BoxCXCYWH;
use crate::data::{Dataset, GroundTruth};
use crate::error::{config_err, DetrError, Result};
use crate::matching::{hungarian, match_cost, LossWeights};
use crate::model::{Detector, ForwardOutput};
use crate::transformer::Reference;

pub const VIEWPORT: f64 = 512.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    /// Refined references after every decoder layer.
    PerLayer,
    Final,
}

impl FromStr for Stage {
    type Err = DetrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "init" => Ok(Stage::Init),
            "per-layer" => Ok(Stage::PerLayer),
            "final" => Ok(Stage::Final),
            other => Err(config_err(format!("unknown stage '{other}' (expected init, per-layer or final)"))),
        }
    }
}

fn rows(t: &Tensor) -> Vec<Reference> {
    let r = t.shape()[1];
    t.data()
        .chunks(r)
        .map(|c| if r == 4 { Reference::Box(BoxCXCYWH::from_slice(c)) } else { Reference::Point([c[0], c[1]]) })
        .collect()
}

/// Named reference sets for the requested stages, in drawing order. In
/// point mode later stages keep only the box centers.
pub fn stage_references(out: &ForwardOutput, stages: &[Stage]) -> Vec<(String, Vec<Reference>)> {
    let point = out.containers.refs.shape()[1] == 2;
    let refined = |t: &Tensor| {
        let r = rows(t);
        if point {
            r.into_iter().map(|x| Reference::Point(x.center())).collect()
        } else {
            r
        }
    };
    let mut v = Vec::new();
    for s in stages {
        match s {
            Stage::Init => v.push(("init".to_string(), rows(&out.containers.refs))),
            Stage::PerLayer => {
                for (i, l) in out.layers.iter().enumerate() {
                    v.push((format!("layer{}", i + 1), refined(&l.set.boxes)));
                }
            }
            Stage::Final => v.push(("final".to_string(), refined(&out.final_set().boxes))),
        }
    }
    v
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#d62728"];

fn color(name: &str, idx: usize) -> &'static str {
    match name {
        "init" => PALETTE[0],
        "final" => PALETTE[5],
        _ => PALETTE[1 + idx % 4],
    }
}

/// SVG with the image frame, dashed truth boxes and one circle per
/// reference center per stage. Box references also get a rectangle.
pub fn render_svg(stages: &[(String, Vec<Reference>)], truth: Option<&GroundTruth>) -> String {
    let s = VIEWPORT;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">"#);
    let _ = writeln!(svg, r##"  <rect class="frame" x="0" y="0" width="{s}" height="{s}" fill="#ffffff" stroke="#000000" stroke-width="2"/>"##);
    if let Some(t) = truth {
        let _ = writeln!(svg, r#"  <g class="truth">"#);
        for b in &t.boxes {
            let c = b.corners();
            let _ = writeln!(
                svg,
                r##"    <rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000000" stroke-dasharray="4 3"/>"##,
                c[0] * s,
                c[1] * s,
                (c[2] - c[0]) * s,
                (c[3] - c[1]) * s
            );
        }
        let _ = writeln!(svg, "  </g>");
    }
    for (i, (name, refs)) in stages.iter().enumerate() {
        let col = color(name, i);
        let _ = writeln!(svg, r#"  <g class="stage" data-stage="{name}" fill="{col}" stroke="{col}">"#);
        for r in refs {
            let [cx, cy] = r.center();
            let _ = writeln!(svg, r#"    <circle cx="{:.2}" cy="{:.2}" r="3" stroke="none"/>"#, cx * s, cy * s);
            if let Reference::Box(b) = r {
                let c = b.corners();
                let _ = writeln!(
                    svg,
                    r#"    <rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke-opacity="0.4"/>"#,
                    c[0] * s,
                    c[1] * s,
                    (c[2] - c[0]) * s,
                    (c[3] - c[1]) * s
                );
            }
        }
        let _ = writeln!(svg, "  </g>");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Runs the model on one image and renders the requested stages.
pub fn emit_reference_points(
    model: &Detector,
    image: &Tensor,
    k: usize,
    stages: &[Stage],
    truth: Option<&GroundTruth>,
) -> Result<String> {
    let out = no_grad(|| model.forward(image, k))?;
    Ok(render_svg(&stage_references(&out, stages), truth))
}

/// Mean distance from matched reference centers to their truth centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatherStats {
    pub pairs: usize,
    pub init_distance: f64,
    pub final_distance: f64,
}

/// Matches final predictions to truths and compares how far the initial
/// and the final references of matched containers sit from the truth centers.
pub fn gather_stats(model: &Detector, data: &Dataset, k: usize, w: &LossWeights) -> Result<GatherStats> {
    let (mut n, mut init, mut fin) = (0usize, 0.0, 0.0);
    for s in &data.samples {
        if s.truth.is_empty() {
            continue;
        }
        let out = no_grad(|| model.forward(&s.pixels, k))?;
        let set = out.final_set();
        let pairs = hungarian(&match_cost(set, &s.truth, w))?.pairs;
        let starts = out.containers.centers();
        let ends = set.box_list();
        for (p, t) in pairs {
            let g = s.truth.boxes[t];
            let dist = |c: [f64; 2]| (c[0] - g.cx).hypot(c[1] - g.cy);
            init += dist(starts[p]);
            fin += dist([ends[p].cx, ends[p].cy]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(DetrError::Dataset("no ground-truth objects to match".into()));
    }
    Ok(GatherStats { pairs: n, init_distance: init / n as f64, final_distance: fin / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitStrategy, ModelConfig, RefDim};

    fn model(init: InitStrategy, ref_dim: RefDim, layers: usize) -> Detector {
        let cfg = ModelConfig {
            d_model: 16,
            heads: 4,
            points: 2,
            head_hidden: 16,
            encoder_layers: 1,
            decoder_layers: layers,
            backbone_channels: [4, 8, 8, 8],
            init,
            ref_dim,
            ..ModelConfig::default()
        };
        Detector::new(&cfg, 100, 3).unwrap()
    }

    fn circles(svg: &str) -> Vec<(f64, f64)> {
        let doc = roxmltree::Document::parse(svg).unwrap();
        doc.descendants()
            .filter(|n| n.has_tag_name("circle"))
            .map(|n| (n.attribute("cx").unwrap().parse().unwrap(), n.attribute("cy").unwrap().parse().unwrap()))
            .collect()
    }

    #[test]
    fn init_stage_has_one_circle_per_container() {
        let m = model(InitStrategy::Learnable, RefDim::Box, 1);
        let svg = emit_reference_points(&m, &Tensor::zeros(&[3, 64, 64]), 100, &[Stage::Init], None).unwrap();
        assert_eq!(circles(&svg).len(), 100);
    }

    #[test]
    fn grid_circles_sit_on_grid_centers() {
        let m = model(InitStrategy::Grid, RefDim::Point, 1);
        let svg = emit_reference_points(&m, &Tensor::zeros(&[3, 64, 64]), 4, &[Stage::Init], None).unwrap();
        let mut got = circles(&svg);
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(128.0, 128.0), (128.0, 384.0), (384.0, 128.0), (384.0, 384.0)]);
    }

    #[test]
    fn per_layer_stages_and_rectangles() {
        let m = model(InitStrategy::Center, RefDim::Box, 2);
        let truth = GroundTruth { boxes: vec![BoxCXCYWH::new(0.5, 0.5, 0.25, 0.25)], labels: vec![0] };
        let svg = emit_reference_points(
            &m,
            &Tensor::zeros(&[3, 64, 64]),
            5,
            &[Stage::Init, Stage::PerLayer, Stage::Final],
            Some(&truth),
        )
        .unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let groups: Vec<_> = doc.descendants().filter_map(|n| n.attribute("data-stage")).collect();
        assert_eq!(groups, vec!["init", "layer1", "layer2", "final"]);
        assert_eq!(circles(&svg).len(), 20);
        // frame + 1 truth + one box per circle
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("rect")).count(), 22);
    }

    #[test]
    fn stage_names_parse() {
        assert_eq!("per-layer".parse::<Stage>().unwrap(), Stage::PerLayer);
        assert!("middle".parse::<Stage>().is_err());
    }
}
