//! Line-delimited JSON files for annotations and detections.
//!
//! Both formats start with a header line declaring the kind, a format
//! version, and the coordinate convention. Boxes are half-open; files
//! declaring `"coords": "inclusive"` get `+1` added to the max corner on
//! ingestion. Detections are validated against the annotation manifest,
//! which is the single source of image extents and the category dictionary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{DetRecord, GtRecord};
use crate::geometry::{Detection, ImageExtent, Rect};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema { path: String, line: usize, message: String },
}

impl FormatError {
    fn schema(path: &Path, line: usize, message: impl Into<String>) -> Self {
        FormatError::Schema { path: path.display().to_string(), line, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordConvention {
    #[default]
    Halfopen,
    /// VOC-style inclusive max corner; converted on load by adding one.
    Inclusive,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    #[serde(default)]
    coords: CoordConvention,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    categories: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum AnnotationLine {
    Image { id: String, path: String, width: u32, height: u32 },
    Object { image: String, category: u32, x1: i32, y1: i32, x2: i32, y2: i32 },
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionLine {
    image: String,
    category: u32,
    x1: i32,
    y1: i32,
    x2: i32,
    y2: i32,
    score: f64,
}

/// Category names; the index in the list is the category id and the list
/// length is `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryDict {
    names: Vec<String>,
}

impl CategoryDict {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInfo {
    pub id: String,
    /// Path relative to the annotation file's directory.
    pub path: PathBuf,
    pub extent: ImageExtent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub image: String,
    pub category: u32,
    pub rect: Rect,
}

/// Image manifest plus ground-truth boxes and the category dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub categories: CategoryDict,
    pub images: BTreeMap<String, ImageInfo>,
    pub objects: Vec<GtObject>,
}

impl Annotations {
    pub fn k(&self) -> usize {
        self.categories.len()
    }

    pub fn gt_records(&self) -> Vec<GtRecord> {
        self.objects
            .iter()
            .map(|o| GtRecord { image: o.image.clone(), category: o.category, rect: o.rect })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let io_err = |source| FormatError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut lines = BufReader::new(file).lines().enumerate();

        let header: Header = match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(io_err)?;
                parse_line(path, i + 1, &line)?
            }
            None => return Err(FormatError::schema(path, 1, "empty file; header expected")),
        };
        check_header(path, &header, "annotations")?;
        if header.categories.is_empty() {
            return Err(FormatError::schema(path, 1, "annotations must declare categories"));
        }
        let k = header.categories.len() as u32;

        let mut images = BTreeMap::new();
        let mut objects = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            match parse_line::<AnnotationLine>(path, lineno, &line)? {
                AnnotationLine::Image { id, path: img_path, width, height } => {
                    if width == 0 || height == 0 {
                        return Err(FormatError::schema(path, lineno, "zero image extent"));
                    }
                    let info = ImageInfo {
                        id: id.clone(),
                        path: PathBuf::from(img_path),
                        extent: ImageExtent::new(width, height),
                    };
                    if images.insert(id.clone(), info).is_some() {
                        return Err(FormatError::schema(path, lineno, format!("duplicate image id {id:?}")));
                    }
                }
                AnnotationLine::Object { image, category, x1, y1, x2, y2 } => {
                    if category >= k {
                        return Err(FormatError::schema(
                            path,
                            lineno,
                            format!("unknown category {category} (k = {k})"),
                        ));
                    }
                    let rect = convert_rect(path, lineno, header.coords, x1, y1, x2, y2)?;
                    let info: &ImageInfo = images.get(&image).ok_or_else(|| {
                        FormatError::schema(path, lineno, format!("object references unknown image {image:?}"))
                    })?;
                    if !info.extent.contains(rect) {
                        return Err(FormatError::schema(path, lineno, "box outside image extent"));
                    }
                    objects.push(GtObject { image, category, rect });
                }
            }
        }
        Ok(Annotations { categories: CategoryDict::new(header.categories), images, objects })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut text = String::new();
        let header = Header {
            kind: "annotations".into(),
            version: FORMAT_VERSION,
            coords: CoordConvention::Halfopen,
            categories: self.categories.names().to_vec(),
        };
        writeln!(text, "{}", serde_json::to_string(&header).expect("header serializes")).unwrap();
        for info in self.images.values() {
            let line = AnnotationLine::Image {
                id: info.id.clone(),
                path: info.path.display().to_string(),
                width: info.extent.width,
                height: info.extent.height,
            };
            writeln!(text, "{}", serde_json::to_string(&line).expect("line serializes")).unwrap();
        }
        for o in &self.objects {
            let line = AnnotationLine::Object {
                image: o.image.clone(),
                category: o.category,
                x1: o.rect.x1,
                y1: o.rect.y1,
                x2: o.rect.x2,
                y2: o.rect.y2,
            };
            writeln!(text, "{}", serde_json::to_string(&line).expect("line serializes")).unwrap();
        }
        write_atomic(path, text.as_bytes())
    }
}

/// One detection tied to an image id.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionItem {
    pub image: String,
    pub detection: Detection,
}

/// Detections validated against an annotation manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Detections {
    pub items: Vec<DetectionItem>,
}

impl Detections {
    pub fn det_records(&self) -> Vec<DetRecord> {
        self.items
            .iter()
            .map(|d| DetRecord {
                image: d.image.clone(),
                category: d.detection.category,
                rect: d.detection.rect,
                score: d.detection.score,
            })
            .collect()
    }

    /// Groups item indices by image id.
    pub fn by_image(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, item) in self.items.iter().enumerate() {
            map.entry(item.image.as_str()).or_default().push(i);
        }
        map
    }

    pub fn load(path: &Path, annotations: &Annotations) -> Result<Self, FormatError> {
        let io_err = |source| FormatError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut lines = BufReader::new(file).lines().enumerate();

        let header: Header = match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(io_err)?;
                parse_line(path, i + 1, &line)?
            }
            None => return Err(FormatError::schema(path, 1, "empty file; header expected")),
        };
        check_header(path, &header, "detections")?;
        let k = annotations.k() as u32;

        let mut items = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let d: DetectionLine = parse_line(path, lineno, &line)?;
            if d.category >= k {
                return Err(FormatError::schema(
                    path,
                    lineno,
                    format!("unknown category {} (k = {k})", d.category),
                ));
            }
            if !d.score.is_finite() {
                return Err(FormatError::schema(path, lineno, "non-finite score"));
            }
            let rect = convert_rect(path, lineno, header.coords, d.x1, d.y1, d.x2, d.y2)?;
            let info = annotations.images.get(&d.image).ok_or_else(|| {
                FormatError::schema(path, lineno, format!("detection references unknown image {:?}", d.image))
            })?;
            if !info.extent.contains(rect) {
                return Err(FormatError::schema(path, lineno, "box outside image extent"));
            }
            items.push(DetectionItem {
                image: d.image,
                detection: Detection::new(rect, d.score, d.category),
            });
        }
        Ok(Detections { items })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut text = String::new();
        let header = Header {
            kind: "detections".into(),
            version: FORMAT_VERSION,
            coords: CoordConvention::Halfopen,
            categories: Vec::new(),
        };
        writeln!(text, "{}", serde_json::to_string(&header).expect("header serializes")).unwrap();
        for item in &self.items {
            let d = &item.detection;
            let line = DetectionLine {
                image: item.image.clone(),
                category: d.category,
                x1: d.rect.x1,
                y1: d.rect.y1,
                x2: d.rect.x2,
                y2: d.rect.y2,
                score: d.score,
            };
            writeln!(text, "{}", serde_json::to_string(&line).expect("line serializes")).unwrap();
        }
        write_atomic(path, text.as_bytes())
    }
}

fn parse_line<T: serde::de::DeserializeOwned>(
    path: &Path,
    line: usize,
    text: &str,
) -> Result<T, FormatError> {
    serde_json::from_str(text).map_err(|source| FormatError::Parse {
        path: path.display().to_string(),
        line,
        source,
    })
}

fn check_header(path: &Path, header: &Header, kind: &str) -> Result<(), FormatError> {
    if header.kind != kind {
        return Err(FormatError::schema(
            path,
            1,
            format!("expected kind {kind:?}, found {:?}", header.kind),
        ));
    }
    if header.version != FORMAT_VERSION {
        return Err(FormatError::schema(
            path,
            1,
            format!("unsupported version {} (supported: {FORMAT_VERSION})", header.version),
        ));
    }
    Ok(())
}

fn convert_rect(
    path: &Path,
    line: usize,
    coords: CoordConvention,
    x1: i32,
    y1: i32,
    x2: i32,
    y2: i32,
) -> Result<Rect, FormatError> {
    let (x2, y2) = match coords {
        CoordConvention::Halfopen => (x2, y2),
        CoordConvention::Inclusive => (x2 + 1, y2 + 1),
    };
    Rect::checked(x1, y1, x2, y2).map_err(|e| FormatError::schema(path, line, e.to_string()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io_err = |source| FormatError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_annotations() -> Annotations {
        let mut images = BTreeMap::new();
        for (id, w, h) in [("a", 64u32, 48u32), ("b", 32, 32)] {
            images.insert(
                id.to_string(),
                ImageInfo {
                    id: id.to_string(),
                    path: PathBuf::from(format!("images/{id}.png")),
                    extent: ImageExtent::new(w, h),
                },
            );
        }
        Annotations {
            categories: CategoryDict::new(vec!["stripe".into(), "checker".into()]),
            images,
            objects: vec![
                GtObject { image: "a".into(), category: 0, rect: Rect::new(2, 3, 20, 21) },
                GtObject { image: "b".into(), category: 1, rect: Rect::new(0, 0, 16, 16) },
            ],
        }
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let ann = sample_annotations();
        ann.save(&path).unwrap();
        let loaded = Annotations::load(&path).unwrap();
        assert_eq!(loaded, ann);
    }

    #[test]
    fn detections_round_trip_including_empty() {
        let dir = tempfile::tempdir().unwrap();
        let ann = sample_annotations();
        let path = dir.path().join("det.jsonl");

        let empty = Detections::default();
        empty.save(&path).unwrap();
        assert_eq!(Detections::load(&path, &ann).unwrap(), empty);

        let dets = Detections {
            items: vec![
                DetectionItem {
                    image: "a".into(),
                    detection: Detection::new(Rect::new(1, 1, 10, 10), 0.75, 0),
                },
                DetectionItem {
                    image: "b".into(),
                    detection: Detection::new(Rect::new(4, 4, 30, 30), -0.25, 1),
                },
            ],
        };
        dets.save(&path).unwrap();
        assert_eq!(Detections::load(&path, &ann).unwrap(), dets);
    }

    #[test]
    fn inclusive_coordinates_convert_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let ann = sample_annotations();
        let path = dir.path().join("voc.jsonl");
        let text = concat!(
            "{\"kind\":\"detections\",\"version\":1,\"coords\":\"inclusive\"}\n",
            "{\"image\":\"a\",\"category\":0,\"x1\":2,\"y1\":3,\"x2\":9,\"y2\":11,\"score\":0.5}\n",
        );
        std::fs::write(&path, text).unwrap();
        let dets = Detections::load(&path, &ann).unwrap();
        // Inclusive (2,3)-(9,11) covers 8x9 pixels: half-open max corner is +1.
        assert_eq!(dets.items[0].detection.rect, Rect::new(2, 3, 10, 12));
        assert_eq!(dets.items[0].detection.rect.area(), 8 * 9);
    }

    #[test]
    fn malformed_lines_report_location() {
        let dir = tempfile::tempdir().unwrap();
        let ann = sample_annotations();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"kind\":\"detections\",\"version\":1}\n{\"image\":\"a\",\"category\":0,\"x1\":oops}\n",
        )
        .unwrap();
        let err = Detections::load(&path, &ann).unwrap_err();
        assert!(err.to_string().contains(":2"), "got: {err}");

        std::fs::write(
            &path,
            "{\"kind\":\"detections\",\"version\":1}\n{\"image\":\"a\",\"category\":7,\"x1\":0,\"y1\":0,\"x2\":5,\"y2\":5,\"score\":1.0}\n",
        )
        .unwrap();
        let err = Detections::load(&path, &ann).unwrap_err();
        assert!(err.to_string().contains("unknown category"), "got: {err}");

        std::fs::write(
            &path,
            "{\"kind\":\"detections\",\"version\":1}\n{\"image\":\"zz\",\"category\":0,\"x1\":0,\"y1\":0,\"x2\":5,\"y2\":5,\"score\":1.0}\n",
        )
        .unwrap();
        let err = Detections::load(&path, &ann).unwrap_err();
        assert!(err.to_string().contains("unknown image"), "got: {err}");

        std::fs::write(&path, "{\"kind\":\"detections\",\"version\":9}\n").unwrap();
        let err = Detections::load(&path, &ann).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "got: {err}");

        // Degenerate box.
        std::fs::write(
            &path,
            "{\"kind\":\"detections\",\"version\":1}\n{\"image\":\"a\",\"category\":0,\"x1\":5,\"y1\":0,\"x2\":5,\"y2\":5,\"score\":1.0}\n",
        )
        .unwrap();
        let err = Detections::load(&path, &ann).unwrap_err();
        assert!(err.to_string().contains("degenerate"), "got: {err}");

        // Out-of-extent box.
        std::fs::write(
            &path,
            "{\"kind\":\"detections\",\"version\":1}\n{\"image\":\"b\",\"category\":0,\"x1\":0,\"y1\":0,\"x2\":50,\"y2\":5,\"score\":1.0}\n",
        )
        .unwrap();
        let err = Detections::load(&path, &ann).unwrap_err();
        assert!(err.to_string().contains("outside image extent"), "got: {err}");
    }

    #[test]
    fn annotations_validate_objects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        // Object referencing an unknown image.
        std::fs::write(
            &path,
            concat!(
                "{\"kind\":\"annotations\",\"version\":1,\"categories\":[\"x\"]}\n",
                "{\"record\":\"object\",\"image\":\"ghost\",\"category\":0,\"x1\":0,\"y1\":0,\"x2\":5,\"y2\":5}\n",
            ),
        )
        .unwrap();
        let err = Annotations::load(&path).unwrap_err();
        assert!(err.to_string().contains("unknown image"));

        // Missing categories.
        std::fs::write(&path, "{\"kind\":\"annotations\",\"version\":1}\n").unwrap();
        let err = Annotations::load(&path).unwrap_err();
        assert!(err.to_string().contains("categories"));
    }
}
