//! Dataset manifests, annotations and persisted artifacts.
//!
//! Every JSON document carries a `format_version`; JSON-lines files carry it
//! on each line. Loaders return typed errors naming the file (and line for
//! JSON lines) instead of panicking on bad input.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detect::{ClickRecord, ColorModel, DetectError, Detection};
use crate::eval::MetricsCurve;
use crate::imaging::{BinaryMask, BoundingBox};
use crate::pipeline::PipelineConfig;
use crate::rle::Rle;
use crate::yieldmap::{render_yield_table, OverlapRecord, SideModel, YieldError, YieldReport};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}{}: {source}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Json {
        path: PathBuf,
        line: Option<usize>,
        source: serde_json::Error,
    },
    #[error("{path}: format_version {found:?} is not supported (expected {expected})")]
    IncompatibleFormat { path: PathBuf, found: Option<u64>, expected: u32 },
    #[error("{path}: {message}")]
    Validation { path: PathBuf, message: String },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn json(path: &Path, line: Option<usize>, source: serde_json::Error) -> Self {
        DataError::Json {
            path: path.to_path_buf(),
            line,
            source,
        }
    }

    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        DataError::Validation {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

fn read_json_value(path: &Path) -> Result<Value, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::json(path, None, e))
}

fn check_version(path: &Path, v: &Value) -> Result<(), DataError> {
    let found = v.get("format_version").and_then(Value::as_u64);
    if found != Some(u64::from(FORMAT_VERSION)) {
        return Err(DataError::IncompatibleFormat {
            path: path.to_path_buf(),
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Reads a versioned JSON document into `T` (extra `format_version` field
/// ignored by `T`).
fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let v = read_json_value(path)?;
    check_version(path, &v)?;
    serde_json::from_value(v).map_err(|e| DataError::json(path, None, e))
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    format_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    // Write then rename, so readers never observe a partial document.
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

fn save_versioned<T: Serialize>(path: &Path, body: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(&Versioned {
        format_version: FORMAT_VERSION,
        body,
    })
    .map_err(|e| DataError::json(path, None, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Writes any serializable body as a versioned JSON document.
pub fn save_document<T: Serialize>(path: impl AsRef<Path>, body: &T) -> Result<(), DataError> {
    save_versioned(path.as_ref(), body)
}

/// Reads a versioned JSON document written by [`save_document`].
pub fn load_document<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, DataError> {
    load_versioned(path.as_ref())
}

fn read_json_lines<T: DeserializeOwned>(path: &Path, versioned: bool) -> Result<Vec<T>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| DataError::json(path, Some(i + 1), e))?;
        if versioned {
            check_version(path, &v)?;
        }
        out.push(serde_json::from_value(v).map_err(|e| DataError::json(path, Some(i + 1), e))?);
    }
    Ok(out)
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T], versioned: bool) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for item in items {
        let line = if versioned {
            serde_json::to_vec(&Versioned {
                format_version: FORMAT_VERSION,
                body: item,
            })
        } else {
            serde_json::to_vec(item)
        }
        .map_err(|e| DataError::json(path, None, e))?;
        buf.extend_from_slice(&line);
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestSide {
    Front,
    Back,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub side: ManifestSide,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harvested: Option<usize>,
}

impl DatasetManifest {
    pub fn frame(&self, id: &str) -> Option<&FrameEntry> {
        self.frames.iter().find(|f| f.id == id)
    }
}

/// Loads and validates a manifest. Relative paths are resolved against the
/// manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    let path = path.as_ref();
    let mut m: DatasetManifest = load_versioned(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut ids = HashSet::new();
    for f in &mut m.frames {
        if !ids.insert(f.id.clone()) {
            return Err(DataError::invalid(path, format!("duplicate frame id {:?}", f.id)));
        }
        f.path = base.join(&f.path);
        if !f.path.is_file() {
            return Err(DataError::invalid(path, format!("frame {:?}: {} does not exist", f.id, f.path.display())));
        }
    }
    if let Some(a) = &mut m.annotations {
        *a = base.join(&*a);
        if !a.is_file() {
            return Err(DataError::invalid(path, format!("annotations {} do not exist", a.display())));
        }
    }
    Ok(m)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<(), DataError> {
    save_versioned(path.as_ref(), manifest)
}

// ---------------------------------------------------------------------------
// Polygon annotations (VGG Image Annotator export)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub frame: String,
    pub polygons: Vec<Vec<[f64; 2]>>,
}

fn frame_id_from_filename(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn number_list(v: Option<&Value>) -> Option<Vec<f64>> {
    v?.as_array()?.iter().map(Value::as_f64).collect()
}

fn parse_region(shape: &Value) -> Result<Vec<[f64; 2]>, String> {
    let name = shape.get("name").and_then(Value::as_str).unwrap_or("");
    match name {
        "polygon" | "polyline" => {
            let xs = number_list(shape.get("all_points_x")).ok_or("missing all_points_x")?;
            let ys = number_list(shape.get("all_points_y")).ok_or("missing all_points_y")?;
            if xs.len() != ys.len() {
                return Err(format!("{} x vs {} y coordinates", xs.len(), ys.len()));
            }
            Ok(xs.into_iter().zip(ys).map(|(x, y)| [x, y]).collect())
        }
        "rect" => {
            let get = |k: &str| shape.get(k).and_then(Value::as_f64).ok_or(format!("rect missing {k}"));
            let (x, y, w, h) = (get("x")?, get("y")?, get("width")?, get("height")?);
            Ok(vec![[x, y], [x + w, y], [x + w, y + h], [x, y + h]])
        }
        other => Err(format!("unsupported shape {other:?}")),
    }
}

/// Parses a VIA export. Both the bare image-metadata map and a full project
/// (`_via_img_metadata`) are accepted, with regions as a list or as a map.
/// Shapes that cannot be used are skipped and reported in the warning list.
pub fn parse_polygon_annotations(v: &Value) -> Result<(Vec<PolygonAnnotation>, Vec<String>), String> {
    let images = v.get("_via_img_metadata").unwrap_or(v);
    let images = images.as_object().ok_or("expected an object of images")?;
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (key, img) in images {
        let filename = img.get("filename").and_then(Value::as_str).unwrap_or(key);
        let frame = frame_id_from_filename(filename);
        let regions: Vec<&Value> = match img.get("regions") {
            Some(Value::Array(a)) => a.iter().collect(),
            Some(Value::Object(o)) => o.values().collect(),
            None | Some(Value::Null) => Vec::new(),
            Some(_) => return Err(format!("{frame}: regions must be a list or a map")),
        };
        let mut polygons = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            let shape = r.get("shape_attributes").unwrap_or(&Value::Null);
            match parse_region(shape) {
                Ok(p) if p.len() >= 3 => polygons.push(p),
                Ok(p) => warnings.push(format!("{frame} region {i}: {} vertices, need at least 3", p.len())),
                Err(e) => warnings.push(format!("{frame} region {i}: {e}")),
            }
        }
        out.push(PolygonAnnotation { frame, polygons });
    }
    Ok((out, warnings))
}

pub fn load_polygon_annotations(path: impl AsRef<Path>) -> Result<(Vec<PolygonAnnotation>, Vec<String>), DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    if text.trim().is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let v: Value = serde_json::from_str(&text).map_err(|e| DataError::json(path, None, e))?;
    parse_polygon_annotations(&v).map_err(|m| DataError::invalid(path, m))
}

/// Pixels whose centre lies inside the polygon (even-odd rule), filled one
/// scanline at a time.
pub fn rasterize_polygon(vertices: &[[f64; 2]], width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    let n = vertices.len();
    if n < 3 {
        return mask;
    }
    let mut xs = Vec::new();
    for y in 0..height {
        let cy = f64::from(y) + 0.5;
        xs.clear();
        for i in 0..n {
            let [x0, y0] = vertices[i];
            let [x1, y1] = vertices[(i + 1) % n];
            if (y0 <= cy) != (y1 <= cy) {
                xs.push(x0 + (cy - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // Pixel x is inside when pair[0] <= x + 0.5 < pair[1].
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(f64::from(width));
            let mut x = start;
            while x < end {
                mask.set(x as u32, y, true);
                x += 1.0;
            }
        }
    }
    mask
}

/// Tight pixel box around a polygon, clipped to the frame.
pub fn polygon_bbox(vertices: &[[f64; 2]], width: u32, height: u32) -> Option<BoundingBox> {
    if vertices.is_empty() {
        return None;
    }
    let min_x = vertices.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min).floor().max(0.0);
    let min_y = vertices.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min).floor().max(0.0);
    let max_x = vertices.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min(f64::from(width));
    let max_y = vertices.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min(f64::from(height));
    if max_x <= min_x || max_y <= min_y {
        return None;
    }
    Some(BoundingBox::new(min_x as u32, min_y as u32, (max_x - min_x) as u32, (max_y - min_y) as u32))
}

// ---------------------------------------------------------------------------
// Box annotations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub frame: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    frames: Vec<BoxAnnotation>,
}

pub fn load_bbox_annotations(path: impl AsRef<Path>) -> Result<Vec<BoxAnnotation>, DataError> {
    let path = path.as_ref();
    let file: BoxFile = load_versioned(path)?;
    let mut seen = HashSet::new();
    for a in &file.frames {
        if !seen.insert(a.frame.as_str()) {
            return Err(DataError::invalid(path, format!("duplicate frame {:?}", a.frame)));
        }
        if let Some(b) = a.boxes.iter().find(|b| !b.fits_within(a.width, a.height)) {
            return Err(DataError::invalid(
                path,
                format!("frame {:?}: box {b:?} exceeds the {}x{} frame", a.frame, a.width, a.height),
            ));
        }
    }
    Ok(file.frames)
}

pub fn save_bbox_annotations(path: impl AsRef<Path>, annotations: &[BoxAnnotation]) -> Result<(), DataError> {
    save_versioned(
        path.as_ref(),
        &BoxFile {
            frames: annotations.to_vec(),
        },
    )
}

// ---------------------------------------------------------------------------
// Clicks, color models, detections

pub fn load_clicks(path: impl AsRef<Path>) -> Result<Vec<ClickRecord>, DataError> {
    read_json_lines(path.as_ref(), false)
}

pub fn save_clicks(path: impl AsRef<Path>, clicks: &[ClickRecord]) -> Result<(), DataError> {
    write_json_lines(path.as_ref(), clicks, false)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: ColorModel,
}

pub fn save_color_model(path: impl AsRef<Path>, model: &ColorModel) -> Result<(), DataError> {
    save_versioned(path.as_ref(), &ModelFile { model: model.clone() })
}

pub fn load_color_model(path: impl AsRef<Path>) -> Result<ColorModel, DataError> {
    let path = path.as_ref();
    let file: ModelFile = load_versioned(path)?;
    file.model
        .validate()
        .map_err(|e: DetectError| DataError::invalid(path, e.to_string()))?;
    Ok(file.model)
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: String,
    pub bbox: BoundingBox,
    pub area: usize,
    /// Region pixels within `bbox`.
    pub mask_rle: Rle,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            frame: d.frame.clone(),
            bbox: d.bbox,
            area: d.area,
            mask_rle: Rle::encode(&d.mask),
        }
    }
}

impl DetectionRecord {
    pub fn to_detection(&self) -> Result<Detection, String> {
        let mask = self.mask_rle.decode().map_err(|e| e.to_string())?;
        if (mask.width(), mask.height()) != (self.bbox.w, self.bbox.h) {
            return Err("mask and bbox sizes differ".into());
        }
        if mask.count() != self.area {
            return Err(format!("area {} but mask has {} pixels", self.area, mask.count()));
        }
        Ok(Detection {
            frame: self.frame.clone(),
            bbox: self.bbox,
            mask,
            area: self.area,
        })
    }
}

pub fn write_detections(path: impl AsRef<Path>, detections: &[Detection]) -> Result<(), DataError> {
    let records: Vec<DetectionRecord> = detections.iter().map(DetectionRecord::from).collect();
    write_json_lines(path.as_ref(), &records, true)
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>, DataError> {
    let path = path.as_ref();
    let records: Vec<DetectionRecord> = read_json_lines(path, true)?;
    records
        .iter()
        .map(|r| r.to_detection().map_err(|m| DataError::invalid(path, m)))
        .collect()
}

// ---------------------------------------------------------------------------
// Scenes and reports

/// Both side models of a row plus their overlaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harvested: Option<usize>,
    pub front: SideModel,
    pub back: SideModel,
    pub overlaps: Vec<OverlapRecord>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<(), YieldError> {
        self.front.validate()?;
        self.back.validate()
    }
}

pub fn write_side_model(path: impl AsRef<Path>, bundle: &SceneBundle) -> Result<(), DataError> {
    save_versioned(path.as_ref(), bundle)
}

pub fn load_side_model(path: impl AsRef<Path>) -> Result<SceneBundle, DataError> {
    let path = path.as_ref();
    let bundle: SceneBundle = load_versioned(path)?;
    bundle.validate().map_err(|e| DataError::invalid(path, e.to_string()))?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub reports: Vec<YieldReport>,
}

/// Writes `<stem>.json` and the text table `<stem>.txt`.
pub fn write_report(stem: impl AsRef<Path>, reports: &[YieldReport]) -> Result<(PathBuf, PathBuf), DataError> {
    let stem = stem.as_ref();
    let json = stem.with_extension("json");
    let txt = stem.with_extension("txt");
    save_versioned(
        &json,
        &ReportFile {
            reports: reports.to_vec(),
        },
    )?;
    write_bytes(&txt, render_yield_table(reports).as_bytes())?;
    Ok((json, txt))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<Vec<YieldReport>, DataError> {
    Ok(load_versioned::<ReportFile>(path.as_ref())?.reports)
}

#[derive(Serialize, Deserialize)]
struct CurvesFile {
    curves: Vec<MetricsCurve>,
}

pub fn save_curves(path: impl AsRef<Path>, curves: &[MetricsCurve]) -> Result<(), DataError> {
    save_versioned(path.as_ref(), &CurvesFile { curves: curves.to_vec() })
}

pub fn load_curves(path: impl AsRef<Path>) -> Result<Vec<MetricsCurve>, DataError> {
    Ok(load_versioned::<CurvesFile>(path.as_ref())?.curves)
}

pub fn save_pipeline_config(path: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<(), DataError> {
    save_versioned(path.as_ref(), cfg)
}

pub fn load_pipeline_config(path: impl AsRef<Path>) -> Result<PipelineConfig, DataError> {
    let path = path.as_ref();
    let cfg: PipelineConfig = load_versioned(path)?;
    cfg.validate().map_err(|m| DataError::invalid(path, m))?;
    Ok(cfg)
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<(), DataError> {
    write_bytes(path.as_ref(), contents.as_bytes())
}

/// Appends one JSON line and flushes it to disk.
pub fn append_json_line<T: Serialize>(path: impl AsRef<Path>, item: &T) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut line = serde_json::to_vec(item).map_err(|e| DataError::json(path, None, e))?;
    line.push(b'\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DataError::io(path, e))?;
    f.write_all(&line).map_err(|e| DataError::io(path, e))?;
    f.sync_data().map_err(|e| DataError::io(path, e))
}

/// Reads a JSON-lines file without a version tag.
pub fn read_lines<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, DataError> {
    read_json_lines(path.as_ref(), false)
}
