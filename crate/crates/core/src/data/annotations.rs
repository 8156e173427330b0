//! Dataset indices from COCO-style JSON or YOLO text labels.
//!
//! Expected layouts under a dataset root:
//!
//! ```text
//! yolo:  classes.txt, <split>/images/*.{png,jpg,jpeg}, <split>/labels/<stem>.txt
//! coco:  <split>/annotations.json, <split>/images/<file_name>
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::GtBox;
use crate::boxes::BBox;
use crate::error::{io_err, DetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    CocoJson,
    YoloTxt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: usize,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    /// Boxes in original-image pixels, clamped to the image.
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_boxes(&self) -> usize {
        self.images.iter().map(|i| i.boxes.len()).sum()
    }
}

fn clamp_box(b: BBox, w: u32, h: u32) -> BBox {
    b.clip(w as f64, h as f64)
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Parses a COCO file. Category ids are mapped to contiguous indices in
/// ascending id order; image paths are resolved against `image_dir`.
pub fn parse_coco(json: &str, source: &Path, image_dir: &Path) -> Result<DatasetIndex> {
    let file: CocoFile = serde_json::from_str(json).map_err(|e| DetError::Annotation {
        path: source.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let err = |msg: String| DetError::Annotation {
        path: source.to_path_buf(),
        line: 0,
        msg,
    };
    let mut cats: Vec<&CocoCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let class_of: HashMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut images: Vec<ImageRecord> = Vec::with_capacity(file.images.len());
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for im in &file.images {
        if slot.insert(im.id, images.len()).is_some() {
            return Err(err(format!("duplicate image id {}", im.id)));
        }
        images.push(ImageRecord {
            id: images.len(),
            path: image_dir.join(&im.file_name),
            width: im.width,
            height: im.height,
            boxes: Vec::new(),
        });
    }
    for (k, a) in file.annotations.iter().enumerate() {
        let Some(&i) = slot.get(&a.image_id) else {
            return Err(err(format!("annotation {k} references unknown image {}", a.image_id)));
        };
        let Some(&class_id) = class_of.get(&a.category_id) else {
            return Err(err(format!("annotation {k} has unknown category {}", a.category_id)));
        };
        let [x, y, w, h] = a.bbox;
        let rec = &mut images[i];
        rec.boxes.push(GtBox {
            class_id,
            bbox: clamp_box(BBox::new(x, y, x + w, y + h), rec.width, rec.height),
        });
    }
    Ok(DatasetIndex {
        images,
        class_names: cats.iter().map(|c| c.name.clone()).collect(),
    })
}

pub fn load_coco(json_path: &Path, image_dir: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(json_path).map_err(io_err(format!("reading {}", json_path.display())))?;
    parse_coco(&text, json_path, image_dir)
}

/// Serialises an index as COCO JSON with category ids `1..=n` and file
/// names relative to `image_dir`.
pub fn to_coco_json(index: &DatasetIndex, image_dir: &Path) -> String {
    let file = CocoFile {
        images: index
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id as u64 + 1,
                file_name: im
                    .path
                    .strip_prefix(image_dir)
                    .unwrap_or(&im.path)
                    .to_string_lossy()
                    .into_owned(),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations: index
            .images
            .iter()
            .flat_map(|im| im.boxes.iter().map(move |b| (im.id, b)))
            .enumerate()
            .map(|(k, (id, b))| CocoAnnotation {
                id: k as u64 + 1,
                image_id: id as u64 + 1,
                category_id: b.class_id as u64 + 1,
                bbox: [b.bbox.x1, b.bbox.y1, b.bbox.width(), b.bbox.height()],
            })
            .collect(),
        categories: index
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("COCO structures serialise")
}

/// Parses one YOLO label file: `class cx cy w h` per line, normalised to the
/// image size. Blank lines are ignored.
pub fn parse_yolo_labels(text: &str, source: &Path, width: u32, height: u32, num_classes: usize) -> Result<Vec<GtBox>> {
    let (fw, fh) = (width as f64, height as f64);
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DetError::Annotation {
            path: source.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        if class_id >= num_classes {
            return Err(err(format!("class {class_id} out of range (have {num_classes} classes)")));
        }
        let mut v = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| err(format!("bad number {f:?}")))?;
        }
        let [cx, cy, w, h] = v;
        let b = BBox::new((cx - w / 2.0) * fw, (cy - h / 2.0) * fh, (cx + w / 2.0) * fw, (cy + h / 2.0) * fh);
        boxes.push(GtBox {
            class_id,
            bbox: clamp_box(b, width, height),
        });
    }
    Ok(boxes)
}

/// Inverse of [`parse_yolo_labels`].
pub fn to_yolo_labels(boxes: &[GtBox], width: u32, height: u32) -> String {
    let (fw, fh) = (width as f64, height as f64);
    boxes
        .iter()
        .map(|b| {
            let (cx, cy) = b.bbox.center();
            format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                b.class_id,
                cx / fw,
                cy / fh,
                b.bbox.width() / fw,
                b.bbox.height() / fh
            )
        })
        .collect()
}

pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn load_yolo(root: &Path, split: &str) -> Result<DatasetIndex> {
    let class_names = read_class_names(&root.join("classes.txt"))?;
    let image_dir = root.join(split).join("images");
    let label_dir = root.join(split).join("labels");
    let entries = std::fs::read_dir(&image_dir).map_err(io_err(format!("listing {}", image_dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    for (id, path) in paths.into_iter().enumerate() {
        let (width, height) = image::image_dimensions(&path).map_err(|e| DetError::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let stem = path.file_stem().unwrap_or_default();
        let label_path = label_dir.join(stem).with_extension("txt");
        let boxes = match std::fs::read_to_string(&label_path) {
            Ok(text) => parse_yolo_labels(&text, &label_path, width, height, class_names.len())?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(format!("reading {}", label_path.display()))(e)),
        };
        images.push(ImageRecord {
            id,
            path,
            width,
            height,
            boxes,
        });
    }
    Ok(DatasetIndex { images, class_names })
}

/// Loads `root/<split>` in the given layout.
pub fn load_split(root: &Path, split: &str, format: AnnotationFormat) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(DetError::Config(format!("dataset root {} does not exist", root.display())));
    }
    match format {
        AnnotationFormat::YoloTxt => load_yolo(root, split),
        AnnotationFormat::CocoJson => {
            let dir = root.join(split);
            load_coco(&dir.join("annotations.json"), &dir.join("images"))
        }
    }
}

/// Box count per class.
pub fn class_histogram(index: &DatasetIndex) -> BTreeMap<String, usize> {
    let mut h: BTreeMap<String, usize> = index.class_names.iter().map(|n| (n.clone(), 0)).collect();
    for im in &index.images {
        for b in &im.boxes {
            *h.entry(index.class_names[b.class_id].clone()).or_insert(0) += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yolo_line_to_pixels() {
        let b = parse_yolo_labels("0 0.5 0.5 0.5 0.5\n", Path::new("a.txt"), 640, 640, 1).unwrap();
        assert_eq!(b, vec![GtBox { class_id: 0, bbox: BBox::new(160.0, 160.0, 480.0, 480.0) }]);
    }

    #[test]
    fn empty_label_file_is_negative_sample() {
        assert!(parse_yolo_labels("", Path::new("a.txt"), 10, 10, 1).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_report_position() {
        let e = parse_yolo_labels("0 0.5 0.5 0.5 0.5\n0 0.5 x 0.1 0.1\n", Path::new("l.txt"), 10, 10, 1).unwrap_err();
        assert!(matches!(e, DetError::Annotation { line: 2, .. }), "{e}");
        let e = parse_yolo_labels("3 0.5 0.5 0.1 0.1", Path::new("l.txt"), 10, 10, 2).unwrap_err();
        assert!(e.to_string().contains("out of range"), "{e}");
    }

    #[test]
    fn coco_categories_are_sorted_and_boxes_clamped() {
        let json = r#"{
            "images": [{"id": 7, "file_name": "a.png", "width": 100, "height": 50}],
            "annotations": [
                {"id": 1, "image_id": 7, "category_id": 9, "bbox": [10, 5, 20, 10]},
                {"id": 2, "image_id": 7, "category_id": 3, "bbox": [90, 40, 30, 30]}
            ],
            "categories": [{"id": 9, "name": "pothole"}, {"id": 3, "name": "crack"}]
        }"#;
        let idx = parse_coco(json, Path::new("x.json"), Path::new("imgs")).unwrap();
        assert_eq!(idx.class_names, vec!["crack", "pothole"]);
        let b = &idx.images[0].boxes;
        assert_eq!(b[0], GtBox { class_id: 1, bbox: BBox::new(10.0, 5.0, 30.0, 15.0) });
        assert_eq!(b[1].bbox, BBox::new(90.0, 40.0, 100.0, 50.0));
        assert_eq!(idx.images[0].path, Path::new("imgs/a.png"));
    }

    #[test]
    fn coco_unknown_references_fail() {
        let json = r#"{"images": [], "annotations": [{"image_id": 1, "category_id": 1, "bbox": [0,0,1,1]}], "categories": []}"#;
        assert!(parse_coco(json, Path::new("x.json"), Path::new(".")).is_err());
    }
}
