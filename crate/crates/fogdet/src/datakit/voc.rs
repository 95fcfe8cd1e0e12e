//! VOC-style XML annotation reading and writing.
//!
//! Boxes are stored in files using the VOC convention (1-based inclusive
//! integer corners) and converted to this crate's 0-based half-open pixel
//! coordinates: `x_min = xmin - 1`, `x_max = xmax`.

use super::Annotation;
use crate::detection::{BBox, GtBox};
use crate::error::{Error, Result};
use roxmltree::{Document, Node};

/// Parse result: the kept annotation plus counts of dropped objects.
#[derive(Debug)]
pub struct VocParse {
    pub annotation: Annotation,
    /// Objects whose class is not in the configured list.
    pub skipped_unknown: usize,
    /// Objects marked difficult.
    pub skipped_difficult: usize,
}

fn line_of(doc: &Document, node: Node) -> usize {
    doc.text_pos_at(node.range().start).row as usize
}

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::AnnotationParse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

fn child<'a, 'i>(
    source: &str,
    doc: &Document<'i>,
    node: Node<'a, 'i>,
    name: &str,
) -> Result<Node<'a, 'i>> {
    node.children()
        .find(|n| n.has_tag_name(name))
        .ok_or_else(|| {
            parse_err(
                source,
                line_of(doc, node),
                format!("<{}> has no <{name}> child", node.tag_name().name()),
            )
        })
}

fn number<T: std::str::FromStr>(source: &str, doc: &Document, node: Node) -> Result<T> {
    let text = node.text().unwrap_or("").trim();
    text.parse().map_err(|_| {
        parse_err(
            source,
            line_of(doc, node),
            format!("<{}> is not a number: {text:?}", node.tag_name().name()),
        )
    })
}

/// Parses one VOC XML document. `source` labels error messages (usually
/// the file path); `classes` is the configured class-name list, and
/// objects outside it are skipped and counted.
pub fn parse_voc_annotation(source: &str, xml: &str, classes: &[String]) -> Result<VocParse> {
    let doc = Document::parse(xml)
        .map_err(|e| parse_err(source, e.pos().row as usize, e.to_string()))?;
    let root = doc.root_element();

    let image_id = root
        .children()
        .find(|n| n.has_tag_name("filename"))
        .and_then(|n| n.text())
        .map(|t| {
            let t = t.trim();
            t.rsplit_once('.').map_or(t, |(stem, _)| stem).to_string()
        })
        .unwrap_or_else(|| {
            std::path::Path::new(source)
                .file_stem()
                .map_or_else(|| "unknown".to_string(), |s| s.to_string_lossy().into_owned())
        });

    let size = child(source, &doc, root, "size")?;
    let width: usize = number(source, &doc, child(source, &doc, size, "width")?)?;
    let height: usize = number(source, &doc, child(source, &doc, size, "height")?)?;
    if width == 0 || height == 0 {
        return Err(parse_err(
            source,
            line_of(&doc, size),
            format!("image size {width}x{height} is empty"),
        ));
    }

    let mut boxes = Vec::new();
    let mut skipped_unknown = 0;
    let mut skipped_difficult = 0;
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name_node = child(source, &doc, obj, "name")?;
        let name = name_node.text().unwrap_or("").trim();
        let Some(class_id) = classes.iter().position(|c| c == name) else {
            skipped_unknown += 1;
            continue;
        };
        let difficult = obj
            .children()
            .find(|n| n.has_tag_name("difficult"))
            .and_then(|n| n.text())
            .map(str::trim);
        if difficult == Some("1") {
            skipped_difficult += 1;
            continue;
        }
        let bnd = child(source, &doc, obj, "bndbox")?;
        let corner = |tag| -> Result<f32> { number(source, &doc, child(source, &doc, bnd, tag)?) };
        let x_min = (corner("xmin")? - 1.0).clamp(0.0, width as f32);
        let y_min = (corner("ymin")? - 1.0).clamp(0.0, height as f32);
        let x_max = corner("xmax")?.clamp(0.0, width as f32);
        let y_max = corner("ymax")?.clamp(0.0, height as f32);
        if x_min >= x_max || y_min >= y_max {
            return Err(parse_err(
                source,
                line_of(&doc, bnd),
                format!("degenerate box after clipping: ({x_min}, {y_min}, {x_max}, {y_max})"),
            ));
        }
        boxes.push(GtBox {
            class_id,
            bbox: BBox {
                x_min,
                y_min,
                x_max,
                y_max,
            },
        });
    }

    let annotation = Annotation {
        image_id,
        width,
        height,
        boxes,
    };
    annotation.validate()?;
    Ok(VocParse {
        annotation,
        skipped_unknown,
        skipped_difficult,
    })
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Serializes an annotation as VOC XML, rounding corners to the integer
/// VOC convention.
pub fn write_voc_xml(ann: &Annotation, classes: &[String]) -> Result<String> {
    let mut out = String::new();
    out.push_str("<annotation>\n");
    out.push_str(&format!(
        "  <filename>{}.png</filename>\n",
        escape_xml(&ann.image_id)
    ));
    out.push_str(&format!(
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
        ann.width, ann.height
    ));
    for b in &ann.boxes {
        let name = classes.get(b.class_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "class id {} has no name in a {}-class list",
                b.class_id,
                classes.len()
            ))
        })?;
        out.push_str(&format!(
            "  <object>\n    <name>{}</name>\n    <difficult>0</difficult>\n    <bndbox>\n      \
             <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    \
             </bndbox>\n  </object>\n",
            escape_xml(name),
            (b.bbox.x_min + 1.0).round(),
            (b.bbox.y_min + 1.0).round(),
            b.bbox.x_max.round(),
            b.bbox.y_max.round(),
        ));
    }
    out.push_str("</annotation>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_classes() -> Vec<String> {
        ["car", "bus", "motorcycle", "bicycle", "person"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    const CAR_DOC: &str = r#"<annotation>
  <filename>000012.jpg</filename>
  <size><width>500</width><height>375</height><depth>3</depth></size>
  <object>
    <name>car</name>
    <difficult>0</difficult>
    <bndbox><xmin>48</xmin><ymin>240</ymin><xmax>195</xmax><ymax>371</ymax></bndbox>
  </object>
</annotation>"#;

    #[test]
    fn single_car_document_maps_directly() {
        let got = parse_voc_annotation("000012.xml", CAR_DOC, &five_classes()).unwrap();
        let ann = got.annotation;
        assert_eq!(ann.image_id, "000012");
        assert_eq!((ann.width, ann.height), (500, 375));
        assert_eq!(ann.boxes.len(), 1);
        let b = &ann.boxes[0];
        assert_eq!(b.class_id, 0);
        assert_eq!(
            (b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max),
            (47.0, 239.0, 195.0, 371.0)
        );
        assert_eq!(got.skipped_unknown, 0);
        assert_eq!(got.skipped_difficult, 0);
    }

    #[test]
    fn document_without_objects_gives_empty_annotation() {
        let doc = r#"<annotation>
  <filename>empty.png</filename>
  <size><width>10</width><height>10</height></size>
</annotation>"#;
        let got = parse_voc_annotation("x.xml", doc, &five_classes()).unwrap();
        assert!(got.annotation.boxes.is_empty());
    }

    #[test]
    fn unknown_classes_are_skipped_and_counted() {
        let doc = r#"<annotation>
  <size><width>100</width><height>100</height></size>
  <object><name>horse</name>
    <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>50</xmax><ymax>50</ymax></bndbox></object>
  <object><name>person</name>
    <bndbox><xmin>10</xmin><ymin>20</ymin><xmax>30</xmax><ymax>60</ymax></bndbox></object>
</annotation>"#;
        let got = parse_voc_annotation("x.xml", doc, &five_classes()).unwrap();
        assert_eq!(got.annotation.boxes.len(), 1);
        assert_eq!(got.annotation.boxes[0].class_id, 4);
        assert_eq!(got.skipped_unknown, 1);
    }

    #[test]
    fn difficult_objects_are_dropped_with_a_count() {
        let doc = r#"<annotation>
  <size><width>100</width><height>100</height></size>
  <object><name>car</name><difficult>1</difficult>
    <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>50</xmax><ymax>50</ymax></bndbox></object>
</annotation>"#;
        let got = parse_voc_annotation("x.xml", doc, &five_classes()).unwrap();
        assert!(got.annotation.boxes.is_empty());
        assert_eq!(got.skipped_difficult, 1);
    }

    #[test]
    fn malformed_xml_reports_the_line() {
        let doc = "<annotation>\n  <size><width>10</width>\n</annotation>";
        let err = parse_voc_annotation("bad.xml", doc, &five_classes()).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("bad.xml"), "{text}");
        assert!(text.contains("line"), "{text}");
    }

    #[test]
    fn missing_corner_and_bad_number_report_the_line() {
        let missing = r#"<annotation>
  <size><width>100</width><height>100</height></size>
  <object><name>car</name>
    <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>50</xmax></bndbox></object>
</annotation>"#;
        let err = parse_voc_annotation("x.xml", missing, &five_classes()).unwrap_err();
        assert!(err.to_string().contains("ymax"), "{err}");

        let bad = missing.replace("<xmax>50</xmax>", "<xmax>fifty</xmax><ymax>9</ymax>");
        let err = parse_voc_annotation("x.xml", &bad, &five_classes()).unwrap_err();
        assert!(err.to_string().contains("not a number"), "{err}");
    }

    #[test]
    fn corners_are_clamped_into_the_image() {
        let doc = r#"<annotation>
  <size><width>100</width><height>100</height></size>
  <object><name>car</name>
    <bndbox><xmin>90</xmin><ymin>1</ymin><xmax>130</xmax><ymax>50</ymax></bndbox></object>
</annotation>"#;
        let got = parse_voc_annotation("x.xml", doc, &five_classes()).unwrap();
        assert_eq!(got.annotation.boxes[0].bbox.x_max, 100.0);
    }

    #[test]
    fn write_then_parse_round_trips_integer_boxes() {
        let classes = five_classes();
        let ann = Annotation {
            image_id: "rt_0007".into(),
            width: 160,
            height: 120,
            boxes: vec![
                GtBox {
                    class_id: 2,
                    bbox: BBox {
                        x_min: 0.0,
                        y_min: 5.0,
                        x_max: 60.0,
                        y_max: 80.0,
                    },
                },
                GtBox {
                    class_id: 4,
                    bbox: BBox {
                        x_min: 31.0,
                        y_min: 40.0,
                        x_max: 160.0,
                        y_max: 120.0,
                    },
                },
            ],
        };
        let xml = write_voc_xml(&ann, &classes).unwrap();
        let got = parse_voc_annotation("rt.xml", &xml, &classes).unwrap();
        assert_eq!(got.annotation, ann);
    }
}
