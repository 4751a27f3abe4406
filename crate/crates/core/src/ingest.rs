//! Project ingestion: image manifest, human labels and detector output.
//!
//! The detector file is the batch output format of the common camera-trap
//! object detector: a JSON document with an `images` array, each entry holding
//! a `file` and a list of `detections` with `category`, `conf` and a normalized
//! `bbox` of `[x, y, width, height]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Reserved class name for images without animals.
pub const EMPTY: &str = "empty";

/// Rounding slack tolerated on detector boxes before they get clamped.
pub const BBOX_EPSILON: f64 = 1e-6;

/// Known labels keyed by image id.
pub type Labels = BTreeMap<String, String>;

/// Ordered set of class names; always contains [`EMPTY`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    classes: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Result<Self> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.len() < 2 {
            return Err(Error::InvalidLabelSpace(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &classes {
            if c.is_empty() {
                return Err(Error::InvalidLabelSpace("blank class name".into()));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::InvalidLabelSpace(format!("duplicate class {c:?}")));
            }
        }
        if !seen.contains(EMPTY) {
            return Err(Error::InvalidLabelSpace(format!(
                "missing reserved class {EMPTY:?}"
            )));
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn empty_index(&self) -> usize {
        self.index_of(EMPTY)
            .expect("label space always holds the empty class")
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;

    fn try_from(classes: Vec<String>) -> Result<Self> {
        LabelSpace::new(classes)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub station_id: String,
    pub file_path: Option<String>,
    pub label: Option<String>,
    pub capture_time: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorCategory {
    Animal,
    Person,
    Vehicle,
}

impl DetectorCategory {
    pub fn code(self) -> &'static str {
        match self {
            DetectorCategory::Animal => "1",
            DetectorCategory::Person => "2",
            DetectorCategory::Vehicle => "3",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "1" => Some(DetectorCategory::Animal),
            "2" => Some(DetectorCategory::Person),
            "3" => Some(DetectorCategory::Vehicle),
            _ => None,
        }
    }
}

/// Normalized rectangle, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn full() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x)
            && in_unit(self.y)
            && self.w > 0.0
            && self.h > 0.0
            && self.w <= 1.0 - self.x + BBOX_EPSILON
            && self.h <= 1.0 - self.y + BBOX_EPSILON
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub category: DetectorCategory,
}

impl Detection {
    pub fn animal(bbox: BBox, confidence: f64) -> Self {
        Self {
            bbox,
            confidence,
            category: DetectorCategory::Animal,
        }
    }

    /// Whether this box passes the detector threshold `alpha`. Only animal
    /// boxes are eligible; the comparison is inclusive.
    pub fn is_high_conf(&self, alpha: f64) -> bool {
        self.category == DetectorCategory::Animal && self.confidence >= alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            detections: Vec::new(),
        }
    }

    /// High-confidence boxes with their index in the original list.
    pub fn high_conf(&self, alpha: f64) -> impl Iterator<Item = (usize, &Detection)> + '_ {
        self.detections
            .iter()
            .enumerate()
            .filter(move |(_, d)| d.is_high_conf(alpha))
    }

    pub fn has_high_conf(&self, alpha: f64) -> bool {
        self.high_conf(alpha).next().is_some()
    }
}

/// Split `ds` into boxes that pass `alpha` and the rest, preserving order.
pub fn filter_high_conf(ds: &DetectionSet, alpha: f64) -> (Vec<Detection>, Vec<Detection>) {
    ds.detections
        .iter()
        .cloned()
        .partition(|d| d.is_high_conf(alpha))
}

/// Images, their detections and the label space of one project.
#[derive(Debug, Clone)]
pub struct Dataset {
    label_space: LabelSpace,
    images: Vec<ImageRecord>,
    detections: Vec<DetectionSet>,
    index: HashMap<String, usize>,
    /// Non-fatal issues found while loading (e.g. clamped boxes).
    pub warnings: Vec<String>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.label_space == other.label_space
            && self.images == other.images
            && self.detections == other.detections
    }
}

impl Dataset {
    /// Build a dataset; `detections` may list images in any order and may omit
    /// images, which then get an empty detection set.
    pub fn new(
        label_space: LabelSpace,
        images: Vec<ImageRecord>,
        detections: Vec<DetectionSet>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.station_id.is_empty() {
                return Err(Error::malformed("manifest", i, "empty station_id"));
            }
            if index.insert(img.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateImageId(img.image_id.clone()));
            }
            if let Some(label) = &img.label {
                label_space.require(label)?;
            }
        }
        let mut slots: Vec<Option<DetectionSet>> = vec![None; images.len()];
        for (i, ds) in detections.into_iter().enumerate() {
            let Some(&pos) = index.get(&ds.image_id) else {
                return Err(Error::malformed(
                    "detections",
                    i,
                    format!("image {:?} is not in the manifest", ds.image_id),
                ));
            };
            if slots[pos].is_some() {
                return Err(Error::malformed(
                    "detections",
                    i,
                    format!("duplicate entry for image {:?}", ds.image_id),
                ));
            }
            slots[pos] = Some(ds);
        }
        let detections = slots
            .into_iter()
            .zip(&images)
            .map(|(slot, img)| slot.unwrap_or_else(|| DetectionSet::empty(&img.image_id)))
            .collect();
        Ok(Self {
            label_space,
            images,
            detections,
            index,
            warnings: Vec::new(),
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn detection_sets(&self) -> &[DetectionSet] {
        &self.detections
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.position(image_id).map(|i| &self.images[i])
    }

    pub fn detections(&self, image_id: &str) -> Option<&DetectionSet> {
        self.position(image_id).map(|i| &self.detections[i])
    }

    pub fn entry(&self, image_id: &str) -> Option<(&ImageRecord, &DetectionSet)> {
        self.position(image_id)
            .map(|i| (&self.images[i], &self.detections[i]))
    }

    pub fn station_of(&self, image_id: &str) -> Option<&str> {
        self.image(image_id).map(|r| r.station_id.as_str())
    }

    pub fn stations(&self) -> BTreeSet<&str> {
        self.images.iter().map(|r| r.station_id.as_str()).collect()
    }

    /// Labels carried by the image records themselves.
    pub fn labels(&self) -> Labels {
        self.images
            .iter()
            .filter_map(|r| r.label.clone().map(|l| (r.image_id.clone(), l)))
            .collect()
    }

    pub fn labeled_ids(&self) -> Vec<String> {
        self.images
            .iter()
            .filter(|r| r.label.is_some())
            .map(|r| r.image_id.clone())
            .collect()
    }

    /// Replace the record labels with `labels` (unlisted images become unlabeled).
    pub fn with_labels(mut self, labels: &Labels) -> Result<Self> {
        for (id, label) in labels {
            if !self.index.contains_key(id) {
                return Err(Error::NotQueriedOrUnknown(id.clone()));
            }
            self.label_space.require(label)?;
        }
        for img in &mut self.images {
            img.label = labels.get(&img.image_id).cloned();
        }
        Ok(self)
    }

    /// Ids of images having at least one box at or above `alpha`.
    pub fn non_empty_at(&self, alpha: f64) -> BTreeSet<&str> {
        self.detections
            .iter()
            .filter(|ds| ds.has_high_conf(alpha))
            .map(|ds| ds.image_id.as_str())
            .collect()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    image_id: String,
    station_id: String,
    #[serde(default)]
    file_path: Option<String>,
    #[serde(default)]
    capture_time: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    image_id: String,
    label: String,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn non_blank(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::malformed("manifest", i, e.to_string()))?;
        out.push(ImageRecord {
            image_id: row.image_id,
            station_id: row.station_id,
            file_path: non_blank(row.file_path),
            label: None,
            capture_time: non_blank(row.capture_time),
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| Error::malformed("labels", i, e.to_string()))?;
        if row.label.is_empty() {
            continue;
        }
        out.push((row.image_id, row.label));
    }
    Ok(out)
}

fn number(v: &Value, idx: usize, what: &str) -> Result<f64> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
        Error::malformed("detections", idx, format!("{what} is not a finite number"))
    })
}

/// Parsed detector document: detection sets keyed by the `file` field.
pub struct DetectorFile {
    pub entries: Vec<(String, Vec<Detection>)>,
    pub warnings: Vec<String>,
}

pub fn parse_detector_json(text: &str) -> Result<DetectorFile> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| Error::malformed("detections", 0, e.to_string()))?;
    let images = doc
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::malformed("detections", 0, "missing top-level \"images\" array"))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut warnings = Vec::new();
    for (idx, entry) in images.iter().enumerate() {
        let file = entry
            .get("file")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::malformed("detections", idx, "missing \"file\""))?;
        let dets = match entry.get("detections") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a.clone(),
            Some(_) => {
                return Err(Error::malformed(
                    "detections",
                    idx,
                    "\"detections\" is not an array",
                ))
            }
        };
        let mut parsed = Vec::with_capacity(dets.len());
        for (j, det) in dets.iter().enumerate() {
            let cat = det
                .get("category")
                .and_then(Value::as_str)
                .and_then(DetectorCategory::from_code)
                .ok_or_else(|| {
                    Error::malformed("detections", idx, format!("detection {j}: bad category"))
                })?;
            let conf = det
                .get("conf")
                .ok_or_else(|| {
                    Error::malformed("detections", idx, format!("detection {j}: missing conf"))
                })
                .and_then(|v| number(v, idx, "conf"))?;
            if !(0.0..=1.0).contains(&conf) {
                return Err(Error::malformed(
                    "detections",
                    idx,
                    format!("detection {j}: conf {conf} outside [0,1]"),
                ));
            }
            let bbox = det
                .get("bbox")
                .and_then(Value::as_array)
                .filter(|a| a.len() == 4)
                .ok_or_else(|| {
                    Error::malformed(
                        "detections",
                        idx,
                        format!("detection {j}: bbox must have 4 numbers"),
                    )
                })?;
            let mut b = [0.0; 4];
            for (k, v) in bbox.iter().enumerate() {
                b[k] = number(v, idx, "bbox")?;
            }
            let (bbox, clamped) = clamp_bbox(BBox::new(b[0], b[1], b[2], b[3]));
            if clamped {
                warnings.push(format!(
                    "{file}: detection {j} bbox clamped to the unit square"
                ));
            }
            if !bbox.is_valid() {
                return Err(Error::malformed(
                    "detections",
                    idx,
                    format!("detection {j}: degenerate bbox {b:?}"),
                ));
            }
            parsed.push(Detection {
                bbox,
                confidence: conf,
                category: cat,
            });
        }
        entries.push((file.to_string(), parsed));
    }
    Ok(DetectorFile { entries, warnings })
}

/// Clamp a box that spills outside the unit square by more than
/// [`BBOX_EPSILON`]. Returns whether anything changed.
fn clamp_bbox(mut b: BBox) -> (BBox, bool) {
    let mut clamped = false;
    if b.x < -BBOX_EPSILON || b.x > 1.0 + BBOX_EPSILON {
        b.x = b.x.clamp(0.0, 1.0);
        clamped = true;
    } else {
        b.x = b.x.clamp(0.0, 1.0);
    }
    if b.y < -BBOX_EPSILON || b.y > 1.0 + BBOX_EPSILON {
        b.y = b.y.clamp(0.0, 1.0);
        clamped = true;
    } else {
        b.y = b.y.clamp(0.0, 1.0);
    }
    if b.w > 1.0 - b.x + BBOX_EPSILON {
        b.w = 1.0 - b.x;
        clamped = true;
    }
    if b.h > 1.0 - b.y + BBOX_EPSILON {
        b.h = 1.0 - b.y;
        clamped = true;
    }
    (b, clamped)
}

/// Load a project from its manifest, labels and detector files.
pub fn load_project(
    manifest_path: &Path,
    labels_path: Option<&Path>,
    detections_path: &Path,
    label_space: &LabelSpace,
) -> Result<Dataset> {
    let mut images = read_manifest(manifest_path)?;
    let labels = match labels_path {
        Some(p) => read_labels(p)?,
        None => Vec::new(),
    };
    let text =
        std::fs::read_to_string(detections_path).map_err(|e| Error::io(detections_path, e))?;
    let detector = parse_detector_json(&text)?;
    assemble(label_space, &mut images, labels, detector)
}

fn assemble(
    label_space: &LabelSpace,
    images: &mut Vec<ImageRecord>,
    labels: Vec<(String, String)>,
    detector: DetectorFile,
) -> Result<Dataset> {
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, img) in images.iter().enumerate() {
        if by_id.insert(img.image_id.as_str(), i).is_some() {
            return Err(Error::DuplicateImageId(img.image_id.clone()));
        }
    }
    let by_path: HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.file_path.as_deref().map(|p| (p, i)))
        .collect();

    let mut assigned: Vec<Option<String>> = vec![None; images.len()];
    for (i, (id, label)) in labels.into_iter().enumerate() {
        let Some(&pos) = by_id.get(id.as_str()) else {
            return Err(Error::malformed(
                "labels",
                i,
                format!("image {id:?} is not in the manifest"),
            ));
        };
        label_space.require(&label)?;
        assigned[pos] = Some(label);
    }

    let mut sets = Vec::with_capacity(detector.entries.len());
    for (idx, (file, dets)) in detector.entries.into_iter().enumerate() {
        let pos = by_path
            .get(file.as_str())
            .or_else(|| by_id.get(file.as_str()))
            .copied()
            .ok_or_else(|| {
                Error::malformed(
                    "detections",
                    idx,
                    format!("image {file:?} is not in the manifest"),
                )
            })?;
        sets.push(DetectionSet {
            image_id: images[pos].image_id.clone(),
            detections: dets,
        });
    }
    for (img, label) in images.iter_mut().zip(assigned) {
        img.label = label;
    }
    let covered: BTreeSet<&str> = sets.iter().map(|s| s.image_id.as_str()).collect();
    let mut warnings = detector.warnings;
    let missing = images
        .iter()
        .filter(|r| !covered.contains(r.image_id.as_str()))
        .count();
    if missing > 0 {
        warnings.push(format!(
            "{missing} manifest images have no detector entry; treated as empty"
        ));
    }
    let mut ds = Dataset::new(label_space.clone(), std::mem::take(images), sets)?;
    ds.warnings = warnings;
    Ok(ds)
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in ds.images() {
        w.serialize(ManifestRow {
            image_id: r.image_id.clone(),
            station_id: r.station_id.clone(),
            file_path: r.file_path.clone(),
            capture_time: r.capture_time.clone(),
        })
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels(labels: &Labels, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["image_id", "label"])
        .map_err(|e| csv_io(path, e))?;
    for (id, label) in labels {
        w.write_record([id, label]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Detector document for `ds`, in the same layout the detector emits.
pub fn detector_json(ds: &Dataset) -> Value {
    let images: Vec<Value> = ds
        .images()
        .iter()
        .zip(ds.detection_sets())
        .map(|(img, set)| {
            let dets: Vec<Value> = set
                .detections
                .iter()
                .map(|d| {
                    serde_json::json!({
                        "category": d.category.code(),
                        "conf": d.confidence,
                        "bbox": [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
                    })
                })
                .collect();
            serde_json::json!({
                "file": img.file_path.clone().unwrap_or_else(|| img.image_id.clone()),
                "detections": dets,
            })
        })
        .collect();
    serde_json::json!({
        "images": images,
        "detection_categories": {"1": "animal", "2": "person", "3": "vehicle"},
    })
}

pub fn write_detector_file(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &detector_json(ds))
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let rdr = BufReader::new(open(path)?);
    serde_json::from_reader(rdr)
        .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> LabelSpace {
        LabelSpace::new(["empty", "fox", "deer"]).unwrap()
    }

    fn set(confs: &[f64]) -> DetectionSet {
        DetectionSet {
            image_id: "a".into(),
            detections: confs
                .iter()
                .map(|&c| Detection::animal(BBox::new(0.1, 0.1, 0.2, 0.2), c))
                .collect(),
        }
    }

    fn confs(v: &[Detection]) -> Vec<f64> {
        v.iter().map(|d| d.confidence).collect()
    }

    #[test]
    fn label_space_validation() {
        assert!(LabelSpace::new(["fox", "deer"]).is_err());
        assert!(LabelSpace::new(["empty"]).is_err());
        assert!(LabelSpace::new(["empty", "fox", "fox"]).is_err());
        assert_eq!(space().empty_index(), 0);
        assert!(matches!(
            space().require("wolf"),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn filter_examples() {
        let (hi, lo) = filter_high_conf(&set(&[0.95, 0.40, 0.05]), 0.5);
        assert_eq!(confs(&hi), vec![0.95]);
        assert_eq!(confs(&lo), vec![0.40, 0.05]);

        let (hi, lo) = filter_high_conf(&DetectionSet::empty("x"), 0.3);
        assert!(hi.is_empty() && lo.is_empty());

        let (hi, lo) = filter_high_conf(&set(&[0.1, 0.3, 0.5, 0.7, 0.9]), 0.1);
        assert_eq!(hi.len(), 5);
        assert!(lo.is_empty());
    }

    #[test]
    fn non_animal_boxes_never_pass() {
        let mut s = set(&[0.99, 0.99]);
        s.detections[0].category = DetectorCategory::Person;
        s.detections[1].category = DetectorCategory::Vehicle;
        let (hi, lo) = filter_high_conf(&s, 0.0);
        assert!(hi.is_empty());
        assert_eq!(lo.len(), 2);
    }

    #[test]
    fn detector_parse_rejects_missing_conf() {
        let doc =
            r#"{"images":[{"file":"a.jpg","detections":[{"category":"1","bbox":[0,0,0.5,0.5]}]}]}"#;
        assert!(matches!(
            parse_detector_json(doc),
            Err(Error::MalformedRecord { index: 0, .. })
        ));
    }

    #[test]
    fn detector_parse_clamps_spill_and_ignores_extra_fields() {
        let doc = r#"{"info":{"format_version":"1.3"},"images":[
            {"file":"a.jpg","max_detection_conf":0.9,"detections":[
                {"category":"1","conf":0.9,"bbox":[0.6,0.5,0.5,0.5000001]}]},
            {"file":"b.jpg","failure":"Failed to load image"}]}"#;
        let parsed = parse_detector_json(doc).unwrap();
        assert_eq!(parsed.entries.len(), 2);
        let b = parsed.entries[0].1[0].bbox;
        assert!((b.w - 0.4).abs() < 1e-12);
        assert_eq!(b.h, 0.5000001);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.entries[1].1.is_empty());
    }

    #[test]
    fn dataset_rejects_duplicates_and_unknown_labels() {
        let rec = |id: &str, label: Option<&str>| ImageRecord {
            image_id: id.into(),
            station_id: "s1".into(),
            file_path: None,
            label: label.map(String::from),
            capture_time: None,
        };
        let err = Dataset::new(space(), vec![rec("a", None), rec("a", None)], vec![]).unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(id) if id == "a"));
        let err = Dataset::new(space(), vec![rec("a", Some("wolf"))], vec![]).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(l) if l == "wolf"));
        let err = Dataset::new(
            space(),
            vec![rec("a", None)],
            vec![DetectionSet::empty("zz")],
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { .. }));
    }
}
