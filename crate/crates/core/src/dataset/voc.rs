//! PASCAL VOC directory layout: `Annotations/<id>.xml`, `JPEGImages/`,
//! `ImageSets/Main/<split>.txt`.
//!
//! VOC pixel indices are 1-based and inclusive; internally boxes are 0-based
//! continuous, so `x1 = xmin - 1`, `y1 = ymin - 1`, `x2 = xmax`, `y2 = ymax`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AnnotatedBox, DataSplit, DatasetError, DatasetView, ImageRecord, PixelSource};
use crate::evaluation::BBox;

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .and_then(|c| c.text())
        .map(str::trim)
}

fn parse_annotation(
    path: &Path,
    id: &str,
    image_dir: &Path,
    classes: &[String],
) -> Result<ImageRecord, DatasetError> {
    let malformed = |reason: String| DatasetError::Malformed { path: path.to_path_buf(), reason };
    let text = fs::read_to_string(path)?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| malformed(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(malformed("root element is not <annotation>".into()));
    }
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| malformed("missing <size>".into()))?;
    let dim = |tag: &str| -> Result<u32, DatasetError> {
        child_text(size, tag)
            .and_then(|t| t.parse::<f64>().ok())
            .map(|v| v as u32)
            .filter(|v| *v >= 1)
            .ok_or_else(|| malformed(format!("bad <{tag}>")))
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let filename = child_text(root, "filename").map(str::to_string).unwrap_or_else(|| format!("{id}.jpg"));

    let mut boxes = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let label = child_text(obj, "name")
            .map(crate::registry::normalize_name)
            .ok_or_else(|| malformed("object without <name>".into()))?;
        if !classes.contains(&label) {
            return Err(DatasetError::UnknownLabel { path: path.to_path_buf(), label });
        }
        let difficult = child_text(obj, "difficult").map(|t| t == "1").unwrap_or(false);
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| malformed(format!("object '{label}' without <bndbox>")))?;
        let coord = |tag: &str| -> Result<f64, DatasetError> {
            child_text(bnd, tag)
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(format!("bad <{tag}> for '{label}'")))
        };
        let bbox = BBox::new(coord("xmin")? - 1.0, coord("ymin")? - 1.0, coord("xmax")?, coord("ymax")?)
            .clamp_to(width as f64, height as f64);
        if !bbox.is_valid() {
            return Err(malformed(format!("degenerate box for '{label}'")));
        }
        boxes.push(AnnotatedBox { bbox, label, difficult });
    }
    Ok(ImageRecord {
        image_id: id.to_string(),
        width,
        height,
        boxes,
        pixel_source: PixelSource::Path(image_dir.join(filename)),
    })
}

/// Reads every id listed in `ImageSets/Main/<split>.txt`.
///
/// `classes` is the closed label universe; any other object name is an error.
pub fn load_voc(root: &Path, split: DataSplit, classes: &[String]) -> Result<DatasetView, DatasetError> {
    let list = root.join("ImageSets").join("Main").join(format!("{}.txt", split.file_stem()));
    if !list.exists() {
        return Err(DatasetError::MissingFile(list));
    }
    let ids = fs::read_to_string(&list)?;
    let image_dir = root.join("JPEGImages");
    let mut records = Vec::new();
    for id in ids.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let ann = root.join("Annotations").join(format!("{id}.xml"));
        if !ann.exists() {
            return Err(DatasetError::MissingFile(ann));
        }
        records.push(parse_annotation(&ann, id, &image_dir, classes)?);
    }
    Ok(DatasetView { records, task: None, split })
}

fn annotation_xml(rec: &ImageRecord, filename: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<annotation>");
    let _ = writeln!(s, "  <folder>VOC2007</folder>");
    let _ = writeln!(s, "  <filename>{filename}</filename>");
    let _ = writeln!(s, "  <size>");
    let _ = writeln!(s, "    <width>{}</width>", rec.width);
    let _ = writeln!(s, "    <height>{}</height>", rec.height);
    let _ = writeln!(s, "    <depth>3</depth>");
    let _ = writeln!(s, "  </size>");
    for b in &rec.boxes {
        let _ = writeln!(s, "  <object>");
        let _ = writeln!(s, "    <name>{}</name>", b.label);
        let _ = writeln!(s, "    <pose>Unspecified</pose>");
        let _ = writeln!(s, "    <truncated>0</truncated>");
        let _ = writeln!(s, "    <difficult>{}</difficult>", u8::from(b.difficult));
        let _ = writeln!(s, "    <bndbox>");
        let _ = writeln!(s, "      <xmin>{}</xmin>", b.bbox.x1 + 1.0);
        let _ = writeln!(s, "      <ymin>{}</ymin>", b.bbox.y1 + 1.0);
        let _ = writeln!(s, "      <xmax>{}</xmax>", b.bbox.x2);
        let _ = writeln!(s, "      <ymax>{}</ymax>", b.bbox.y2);
        let _ = writeln!(s, "    </bndbox>");
        let _ = writeln!(s, "  </object>");
    }
    let _ = writeln!(s, "</annotation>");
    s
}

/// Writes a view in VOC layout. In-memory pixels are stored losslessly as PNG;
/// path-backed images are copied.
pub fn write_voc(view: &DatasetView, root: &Path) -> Result<(), DatasetError> {
    let ann_dir = root.join("Annotations");
    let img_dir = root.join("JPEGImages");
    let set_dir = root.join("ImageSets").join("Main");
    for d in [&ann_dir, &img_dir, &set_dir] {
        fs::create_dir_all(d)?;
    }
    let mut ids = String::new();
    for rec in &view.records {
        let filename = match &rec.pixel_source {
            PixelSource::Memory(img) => {
                let name = format!("{}.png", rec.image_id);
                let target = img_dir.join(&name);
                img.save(&target).map_err(|e| DatasetError::Image { path: target.clone(), reason: e.to_string() })?;
                name
            }
            PixelSource::Path(src) => {
                let name = src
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("{}.jpg", rec.image_id));
                let target: PathBuf = img_dir.join(&name);
                if src != &target {
                    fs::copy(src, &target)?;
                }
                name
            }
        };
        fs::write(ann_dir.join(format!("{}.xml", rec.image_id)), annotation_xml(rec, &filename))?;
        ids.push_str(&rec.image_id);
        ids.push('\n');
    }
    fs::write(set_dir.join(format!("{}.txt", view.split.file_stem())), ids)?;
    Ok(())
}
