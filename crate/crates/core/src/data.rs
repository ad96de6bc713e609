//! Synthetic shapes and COCO-style annotation files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use detr_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::boxes::BoxCXCYWH;
use crate::config::TrainConfig;
use crate::error::{config_err, DetrError, Result};

/// Shape kinds in class-index order.
pub const SHAPE_NAMES: [&str; 8] = ["rect", "disk", "triangle", "diamond", "ring", "cross", "frame", "ellipse"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BoxCXCYWH>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// `[3,H,W]`, values in `[0,1]`.
    pub pixels: Tensor,
    pub truth: GroundTruth,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn inside(kind: usize, u: f64, v: f64) -> bool {
    // (u,v) in [0,1]^2 relative to the shape's box.
    let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    match kind {
        0 => true,
        1 | 7 => a * a + b * b <= 1.0,
        2 => a.abs() <= v,
        3 => a.abs() + b.abs() <= 1.0,
        4 => {
            let r = a * a + b * b;
            r <= 1.0 && r >= 0.3
        }
        5 => a.abs() <= 0.34 || b.abs() <= 0.34,
        6 => a.abs() >= 0.5 || b.abs() >= 0.5,
        _ => unreachable!("shape kind {kind}"),
    }
}

/// Draws one image of random shapes on a noise background. Objects never
/// overlap, so each box is the tight bound of its own mask.
fn draw_image(rng: &mut ChaCha8Rng, size: usize, max_objects: usize, num_classes: usize) -> (Vec<f64>, GroundTruth) {
    let plane = size * size;
    let mut px: Vec<f64> = (0..3 * plane).map(|_| rng.gen_range(0.0..0.3)).collect();
    let n_obj = rng.gen_range(1..=max_objects);
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut truth = GroundTruth::default();
    let (lo, hi) = ((size as f64 * 0.2).round() as usize, (size as f64 * 0.45).round() as usize);
    for _ in 0..n_obj {
        for _attempt in 0..50 {
            let kind = rng.gen_range(0..num_classes);
            let w = rng.gen_range(lo..=hi);
            let h = if kind == 1 || kind == 4 { w } else { rng.gen_range(lo..=hi) };
            let x0 = rng.gen_range(0..=size - w);
            let y0 = rng.gen_range(0..=size - h);
            let cand = [x0, y0, x0 + w, y0 + h];
            let clear = placed
                .iter()
                .all(|p| cand[2] + 1 < p[0] || p[2] + 1 < cand[0] || cand[3] + 1 < p[1] || p[3] + 1 < cand[1]);
            if !clear {
                continue;
            }
            let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.45..1.0));
            let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let u = (x - x0) as f64 / (w - 1) as f64;
                    let v = (y - y0) as f64 / (h - 1) as f64;
                    if inside(kind, u, v) {
                        for (c, col) in color.iter().enumerate() {
                            px[c * plane + y * size + x] = *col;
                        }
                        bx0 = bx0.min(x);
                        by0 = by0.min(y);
                        bx1 = bx1.max(x + 1);
                        by1 = by1.max(y + 1);
                    }
                }
            }
            placed.push(cand);
            let s = size as f64;
            truth.boxes.push(BoxCXCYWH::from_corners([
                bx0 as f64 / s,
                by0 as f64 / s,
                bx1 as f64 / s,
                by1 as f64 / s,
            ]));
            truth.labels.push(kind);
            break;
        }
    }
    (px, truth)
}

/// Deterministic synthetic dataset. Class `c` is shape kind `SHAPE_NAMES[c]`.
pub fn generate_shapes(
    seed: u64,
    count: usize,
    image_size: usize,
    max_objects: usize,
    num_classes: usize,
) -> Result<Vec<ImageSample>> {
    if image_size < 32 {
        return Err(config_err(format!("image_size {image_size} is below the 32 px minimum")));
    }
    if max_objects == 0 {
        return Err(config_err("max_objects must be at least 1"));
    }
    if num_classes == 0 || num_classes > SHAPE_NAMES.len() {
        return Err(config_err(format!("num_classes must be in 1..=8, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (px, truth) = draw_image(&mut rng, image_size, max_objects, num_classes);
            Ok(ImageSample {
                id: format!("shape_{i:05}"),
                pixels: Tensor::new(&[3, image_size, image_size], px)?,
                truth,
            })
        })
        .collect()
}

pub fn synthetic_dataset(seed: u64, count: usize, image_size: usize, max_objects: usize, num_classes: usize) -> Result<Dataset> {
    Ok(Dataset {
        samples: generate_shapes(seed, count, image_size, max_objects, num_classes)?,
        class_names: SHAPE_NAMES[..num_classes].iter().map(|s| s.to_string()).collect(),
    })
}

/// Visiting order for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoImage {
    pub id: i64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

/// Parsed annotation file. Pixels are read separately by [`CocoDataset::load_samples`].
#[derive(Debug, Clone)]
pub struct CocoDataset {
    pub root: PathBuf,
    pub images: Vec<CocoImage>,
    pub truths: Vec<GroundTruth>,
    pub class_names: Vec<String>,
    /// Category id for each contiguous class index.
    pub category_ids: Vec<i64>,
    /// Boxes that extended past the image and were clamped.
    pub clamped: usize,
    /// Boxes dropped because nothing was left after clamping.
    pub dropped: usize,
}

fn parse_err(path: impl Into<String>, msg: impl Into<String>) -> DetrError {
    DetrError::Parse { path: path.into(), msg: msg.into() }
}

fn field<'a>(v: &'a Value, path: &str, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| parse_err(format!("{path}.{key}"), "missing key"))
}

fn array<'a>(v: &'a Value, path: &str, key: &str) -> Result<&'a Vec<Value>> {
    field(v, path, key)?
        .as_array()
        .ok_or_else(|| parse_err(format!("{path}.{key}"), "expected an array"))
}

fn int(v: &Value, path: &str, key: &str) -> Result<i64> {
    let f = field(v, path, key)?;
    f.as_i64()
        .or_else(|| f.as_f64().filter(|x| x.fract() == 0.0).map(|x| x as i64))
        .ok_or_else(|| parse_err(format!("{path}.{key}"), "expected an integer"))
}

fn string(v: &Value, path: &str, key: &str) -> Result<String> {
    field(v, path, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| parse_err(format!("{path}.{key}"), "expected a string"))
}

/// Parses COCO-style JSON text. `root` is where image files are looked up.
pub fn parse_coco(text: &str, root: &Path) -> Result<CocoDataset> {
    let doc: Value = serde_json::from_str(text).map_err(|e| parse_err("$", e.to_string()))?;
    let mut images = Vec::new();
    let mut by_id = HashMap::new();
    for (i, im) in array(&doc, "$", "images")?.iter().enumerate() {
        let p = format!("$.images[{i}]");
        let id = int(im, &p, "id")?;
        let width = int(im, &p, "width")?;
        let height = int(im, &p, "height")?;
        if width <= 0 || height <= 0 {
            return Err(parse_err(p, "image sides must be positive"));
        }
        if by_id.insert(id, i).is_some() {
            return Err(parse_err(format!("{p}.id"), format!("duplicate image id {id}")));
        }
        images.push(CocoImage {
            id,
            file_name: string(im, &p, "file_name")?,
            width: width as usize,
            height: height as usize,
        });
    }

    let mut cats = BTreeMap::new();
    for (i, c) in array(&doc, "$", "categories")?.iter().enumerate() {
        let p = format!("$.categories[{i}]");
        let id = int(c, &p, "id")?;
        if cats.insert(id, string(c, &p, "name")?).is_some() {
            return Err(parse_err(format!("{p}.id"), format!("duplicate category id {id}")));
        }
    }
    let category_ids: Vec<i64> = cats.keys().copied().collect();
    let class_of: HashMap<i64, usize> = category_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut truths = vec![GroundTruth::default(); images.len()];
    let (mut clamped, mut dropped) = (0, 0);
    for (i, a) in array(&doc, "$", "annotations")?.iter().enumerate() {
        let p = format!("$.annotations[{i}]");
        let image_id = int(a, &p, "image_id")?;
        let &img = by_id
            .get(&image_id)
            .ok_or_else(|| parse_err(format!("{p}.image_id"), format!("unknown image id {image_id}")))?;
        let cat = int(a, &p, "category_id")?;
        let &label = class_of
            .get(&cat)
            .ok_or_else(|| parse_err(format!("{p}.category_id"), format!("unknown category id {cat}")))?;
        let bbox = array(a, &p, "bbox")?;
        let vals: Vec<f64> = bbox.iter().filter_map(Value::as_f64).collect();
        if vals.len() != 4 || bbox.len() != 4 {
            return Err(parse_err(format!("{p}.bbox"), "expected four numbers [x,y,w,h]"));
        }
        let (iw, ih) = (images[img].width as f64, images[img].height as f64);
        let raw = [vals[0], vals[1], vals[0] + vals[2], vals[1] + vals[3]];
        let c = [raw[0].clamp(0.0, iw), raw[1].clamp(0.0, ih), raw[2].clamp(0.0, iw), raw[3].clamp(0.0, ih)];
        if c != raw {
            clamped += 1;
            log::warn!("{p}: box {vals:?} clamped to image {iw}x{ih}");
        }
        if c[2] <= c[0] || c[3] <= c[1] {
            dropped += 1;
            log::warn!("{p}: box is empty after clamping, dropped");
            continue;
        }
        truths[img].boxes.push(BoxCXCYWH::from_corners([c[0] / iw, c[1] / ih, c[2] / iw, c[3] / ih]));
        truths[img].labels.push(label);
    }

    Ok(CocoDataset {
        root: root.to_path_buf(),
        images,
        truths,
        class_names: cats.into_values().collect(),
        category_ids,
        clamped,
        dropped,
    })
}

pub fn load_coco_annotations(path: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DetrError::Dataset(format!("cannot read {}: {e}", path.display())))?;
    parse_coco(&text, path.parent().unwrap_or(Path::new(".")))
}

impl CocoDataset {
    /// Reads every image, resized to a square of `image_size` pixels.
    pub fn load_samples(&self, image_size: usize) -> Result<Dataset> {
        let samples = self
            .images
            .iter()
            .zip(&self.truths)
            .map(|(im, truth)| {
                let path = self.root.join(&im.file_name);
                let img = image::open(&path)
                    .map_err(|e| DetrError::Dataset(format!("cannot read image {}: {e}", path.display())))?
                    .to_rgb8();
                let img = image::imageops::resize(
                    &img,
                    image_size as u32,
                    image_size as u32,
                    image::imageops::FilterType::Triangle,
                );
                Ok(ImageSample {
                    id: im.id.to_string(),
                    pixels: Tensor::new(&[3, image_size, image_size], rgb_to_planes(&img))?,
                    truth: truth.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, class_names: self.class_names.clone() })
    }
}

fn rgb_to_planes(img: &image::RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * w * h + y as usize * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    out
}

/// A COCO annotation file, or `annotations.json` inside a directory.
pub fn load_coco_dataset(path: &Path, image_size: usize) -> Result<Dataset> {
    let file = if path.is_dir() { path.join("annotations.json") } else { path.to_path_buf() };
    if !file.exists() {
        return Err(DetrError::Dataset(format!("dataset not found: {}", file.display())));
    }
    load_coco_annotations(&file)?.load_samples(image_size)
}

/// Training and evaluation sets for a config. Without dataset paths the
/// synthetic generator is used, with `data_seed + 1` for held-out images.
pub fn datasets_for(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let classes = cfg.model.num_classes;
    let train = match &d.dataset {
        Some(p) => load_coco_dataset(p, d.image_size)?,
        None => synthetic_dataset(d.data_seed, d.train_images, d.image_size, d.max_objects, classes)?,
    };
    let eval = match (&d.eval_dataset, &d.dataset) {
        (Some(p), _) => load_coco_dataset(p, d.image_size)?,
        (None, Some(_)) => train.clone(),
        (None, None) => synthetic_dataset(d.data_seed + 1, d.eval_images, d.image_size, d.max_objects, classes)?,
    };
    for set in [&train, &eval] {
        if set.num_classes() > classes {
            return Err(config_err(format!(
                "dataset has {} classes but num_classes is {classes}",
                set.num_classes()
            )));
        }
    }
    Ok((train, eval))
}

/// Pixel-space `[x,y,w,h]` of a normalized box.
pub fn to_pixel_xywh(b: &BoxCXCYWH, width: usize, height: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [(b.cx - b.w / 2.0) * w, (b.cy - b.h / 2.0) * h, b.w * w, b.h * h]
}

/// Writes `images/<id>.png` plus `annotations.json` under `dir`.
pub fn write_coco(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut seen = HashSet::new();
    for (i, s) in data.samples.iter().enumerate() {
        if !seen.insert(&s.id) {
            return Err(DetrError::Dataset(format!("duplicate sample id {}", s.id)));
        }
        let (h, w) = (s.height(), s.width());
        let file_name = format!("images/{}.png", s.id);
        let px = s.pixels.data();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| (px[c * w * h + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([at(0), at(1), at(2)])
        });
        img.save(dir.join(&file_name))
            .map_err(|e| DetrError::Dataset(format!("cannot write {file_name}: {e}")))?;
        images.push(json!({"id": i + 1, "file_name": file_name, "width": w, "height": h}));
        for (b, &l) in s.truth.boxes.iter().zip(&s.truth.labels) {
            annotations.push(json!({
                "id": annotations.len() + 1,
                "image_id": i + 1,
                "bbox": to_pixel_xywh(b, w, h),
                "category_id": l + 1,
            }));
        }
    }
    let categories: Vec<Value> = data
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| json!({"id": i + 1, "name": n}))
        .collect();
    let doc = json!({"images": images, "annotations": annotations, "categories": categories});
    let path = dir.join("annotations.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("json value serializes"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = r#"{
        "images": [{"id": 3, "file_name": "a.png", "width": 100, "height": 200}],
        "annotations": [{"image_id": 3, "bbox": [10, 20, 30, 40], "category_id": 9}],
        "categories": [{"id": 9, "name": "thing"}]
    }"#;

    #[test]
    fn coco_bbox_normalizes() {
        let ds = parse_coco(FIXTURE, Path::new(".")).unwrap();
        let b = ds.truths[0].boxes[0];
        assert!((b.cx - 0.25).abs() < 1e-12);
        assert!((b.cy - 0.20).abs() < 1e-12);
        assert!((b.w - 0.30).abs() < 1e-12);
        assert!((b.h - 0.20).abs() < 1e-12);
        assert_eq!(ds.truths[0].labels, vec![0]);
    }

    #[test]
    fn empty_annotations_give_empty_truths() {
        let text = r#"{"images": [{"id": 1, "file_name": "x", "width": 4, "height": 4},
                                  {"id": 2, "file_name": "y", "width": 4, "height": 4}],
                       "annotations": [], "categories": []}"#;
        let ds = parse_coco(text, Path::new(".")).unwrap();
        assert_eq!(ds.truths.len(), 2);
        assert!(ds.truths.iter().all(GroundTruth::is_empty));
    }

    #[test]
    fn duplicate_image_ids_fail() {
        let text = r#"{"images": [{"id": 1, "file_name": "x", "width": 4, "height": 4},
                                  {"id": 1, "file_name": "y", "width": 4, "height": 4}],
                       "annotations": [], "categories": []}"#;
        let err = parse_coco(text, Path::new(".")).unwrap_err();
        assert!(matches!(&err, DetrError::Parse { path, .. } if path == "$.images[1].id"), "{err}");
    }

    #[test]
    fn missing_key_names_json_path() {
        let text = r#"{"images": [{"id": 1, "file_name": "x", "height": 4}], "annotations": [], "categories": []}"#;
        let err = parse_coco(text, Path::new(".")).unwrap_err();
        assert!(matches!(&err, DetrError::Parse { path, .. } if path == "$.images[0].width"), "{err}");
    }

    #[test]
    fn out_of_image_boxes_are_clamped_and_counted() {
        let text = r#"{"images": [{"id": 1, "file_name": "x", "width": 10, "height": 10}],
                       "annotations": [{"image_id": 1, "bbox": [-2, 5, 6, 10], "category_id": 1},
                                       {"image_id": 1, "bbox": [20, 20, 3, 3], "category_id": 1}],
                       "categories": [{"id": 1, "name": "a"}]}"#;
        let ds = parse_coco(text, Path::new(".")).unwrap();
        assert_eq!((ds.clamped, ds.dropped), (2, 1));
        let b = ds.truths[0].boxes[0];
        assert!(b.is_valid());
        assert!((b.w - 0.4).abs() < 1e-12 && (b.h - 0.5).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shapes(7, 20, 64, 3, 3).unwrap();
        let b = generate_shapes(7, 20, 64, 3, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels.data(), y.pixels.data());
            assert_eq!(x.truth, y.truth);
        }
    }

    #[test]
    fn single_object_single_class() {
        for s in generate_shapes(3, 50, 64, 1, 1).unwrap() {
            assert_eq!(s.truth.labels, vec![0]);
        }
    }

    #[test]
    fn degenerate_parameters_fail() {
        assert!(generate_shapes(0, 1, 16, 1, 1).is_err());
        assert!(generate_shapes(0, 1, 64, 0, 1).is_err());
        assert!(generate_shapes(0, 1, 64, 1, 9).is_err());
    }

    #[test]
    fn five_hundred_images_are_fast() {
        let t = std::time::Instant::now();
        let d = generate_shapes(7, 500, 64, 3, 3).unwrap();
        assert_eq!(d.len(), 500);
        assert!(t.elapsed().as_secs_f64() < 5.0);
    }

    #[test]
    fn coco_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_dataset(5, 6, 64, 3, 3).unwrap();
        let path = write_coco(dir.path(), &data).unwrap();
        let coco = load_coco_annotations(&path).unwrap();
        let back = coco.load_samples(64).unwrap();
        for (a, b) in data.samples.iter().zip(&back.samples) {
            assert_eq!(a.truth.labels, b.truth.labels);
            for (x, y) in a.truth.boxes.iter().zip(&b.truth.boxes) {
                let (px, py) = (to_pixel_xywh(x, 64, 64), to_pixel_xywh(y, 64, 64));
                assert!(px.iter().zip(&py).all(|(u, v)| (u - v).abs() <= 0.5));
            }
            let err = a.pixels.data().iter().zip(b.pixels.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.class_names, vec!["rect", "disk", "triangle"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn synthetic_boxes_are_valid_and_tight(seed in any::<u64>(), max_obj in 1usize..5, classes in 1usize..=8) {
            for s in generate_shapes(seed, 3, 64, max_obj, classes).unwrap() {
                prop_assert!(!s.truth.is_empty() && s.truth.len() <= max_obj);
                prop_assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
                for (b, &l) in s.truth.boxes.iter().zip(&s.truth.labels) {
                    prop_assert!(b.is_valid());
                    prop_assert!(l < classes);
                    // Box edges land on the pixel grid.
                    for v in to_pixel_xywh(b, 64, 64) {
                        prop_assert!((v - v.round()).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn pixel_round_trip_within_half_pixel(x in 0.0f64..90.0, y in 0.0f64..180.0, w in 1.0f64..10.0, h in 1.0f64..20.0) {
            let text = format!(r#"{{"images": [{{"id": 1, "file_name": "x", "width": 100, "height": 200}}],
                "annotations": [{{"image_id": 1, "bbox": [{x}, {y}, {w}, {h}], "category_id": 1}}],
                "categories": [{{"id": 1, "name": "a"}}]}}"#);
            let ds = parse_coco(&text, Path::new(".")).unwrap();
            let b = ds.truths[0].boxes[0];
            prop_assert!(b.is_valid());
            let back = to_pixel_xywh(&b, 100, 200);
            for (u, v) in back.iter().zip([x, y, w, h]) {
                prop_assert!((u - v).abs() <= 0.5);
            }
        }

        #[test]
        fn epoch_order_is_a_pure_permutation(seed in any::<u64>(), epoch in 0usize..100, len in 0usize..64) {
            let a = epoch_order(seed, epoch, len);
            prop_assert_eq!(&a, &epoch_order(seed, epoch, len));
            let mut sorted = a.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..len).collect::<Vec<_>>());
        }
    }
}
