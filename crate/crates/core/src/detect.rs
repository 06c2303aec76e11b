//! Color-cluster apple detection.
//!
//! Frames are over-segmented with SLIC and every superpixel is reduced to its
//! mean LAB color. A mixture fitted over the pooled colors of a few frames
//! gives the color classes; a human labels some of them as apple by clicking on
//! fruit. To classify a new frame, a mixture with the same number of
//! components is fitted to that frame's superpixel colors and each frame
//! component takes the label of the model component closest in KL divergence,
//! provided the divergence is below the match threshold.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{connected_components, BinaryMask, BoundingBox, Connectivity, LabImage};
use crate::mixture::{argmax, fit_gmm, kl_gaussian, responsibilities, EmConfig, MixtureError, MixtureModel};
use crate::slic::{slic_segment, SlicConfig, SlicError, SuperpixelMap};

pub const COLORSPACE: &str = "CIELAB-D65";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Slic(#[from] SlicError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error("{superpixels} superpixels are too few for {components} color classes")]
    InsufficientData { superpixels: usize, components: usize },
    #[error("no frames given")]
    NoFrames,
    #[error("frame {0:?} is not part of this session")]
    UnknownFrame(String),
    #[error("pixel ({x}, {y}) lies outside the {width}x{height} frame")]
    OutOfBounds { x: u32, y: u32, width: u32, height: u32 },
    #[error("component {0} does not exist")]
    UnknownComponent(usize),
    #[error("color model has no apple-labeled component")]
    EmptyModel,
    #[error("invalid color model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FruitLabel {
    Apple,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Trained live on the first frames of the video being processed.
    UserSupervised,
    /// Trained from recorded clicks on a separate training dataset.
    SemiSupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub slic: SlicConfig,
    /// EM settings for both the pooled color clusters and per-frame fits.
    pub em: EmConfig,
    /// Number of color classes.
    pub components: usize,
    /// A frame component inherits a model label only when its KL divergence
    /// to the closest model component is strictly below this.
    pub kl_threshold: f64,
    /// Connected regions smaller than this many pixels are not reported.
    pub min_area: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            slic: SlicConfig::default(),
            em: EmConfig {
                covariance_floor: 1.0,
                ..EmConfig::default()
            },
            components: 25,
            kl_threshold: 5.0,
            min_area: 20,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        self.slic.validate()?;
        self.em.validate()?;
        if self.components == 0 {
            return Err(DetectError::InvalidConfig("components must be >= 1".into()));
        }
        if !(self.kl_threshold >= 0.0) {
            return Err(DetectError::InvalidConfig("kl_threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// Labeled color classes ready for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorModel {
    mixture: MixtureModel,
    labels: Vec<FruitLabel>,
    provenance: Provenance,
    colorspace: String,
}

impl ColorModel {
    pub fn new(mixture: MixtureModel, labels: Vec<FruitLabel>, provenance: Provenance) -> Result<Self, DetectError> {
        let model = Self {
            mixture,
            labels,
            provenance,
            colorspace: COLORSPACE.to_string(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks invariants; used after deserialisation as well.
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.labels.len() != self.mixture.len() {
            return Err(DetectError::InvalidModel(format!(
                "{} labels for {} components",
                self.labels.len(),
                self.mixture.len()
            )));
        }
        if self.mixture.dim() != 3 {
            return Err(DetectError::InvalidModel(format!(
                "color mixture must be 3-D, got {}",
                self.mixture.dim()
            )));
        }
        if self.colorspace != COLORSPACE {
            return Err(DetectError::InvalidModel(format!(
                "unsupported colorspace {:?}",
                self.colorspace
            )));
        }
        if !self.labels.contains(&FruitLabel::Apple) {
            return Err(DetectError::EmptyModel);
        }
        Ok(())
    }

    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }

    pub fn labels(&self) -> &[FruitLabel] {
        &self.labels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn colorspace(&self) -> &str {
        &self.colorspace
    }

    pub fn apple_components(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == FruitLabel::Apple)
            .map(|(i, _)| i)
    }
}

fn fit_color_mixture(maps: &[SuperpixelMap], cfg: &DetectConfig) -> Result<MixtureModel, DetectError> {
    let colors: Vec<Vec<f64>> = maps.iter().flat_map(SuperpixelMap::mean_colors).collect();
    if colors.len() < cfg.components {
        return Err(DetectError::InsufficientData {
            superpixels: colors.len(),
            components: cfg.components,
        });
    }
    Ok(fit_gmm(&colors, cfg.components, &cfg.em)?.model)
}

/// SLICs every frame and fits `cfg.components` color classes over the pooled
/// superpixel mean colors.
pub fn build_color_clusters(frames: &[LabImage], cfg: &DetectConfig) -> Result<MixtureModel, DetectError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(DetectError::NoFrames);
    }
    let maps = frames
        .par_iter()
        .map(|f| slic_segment(f, &cfg.slic))
        .collect::<Result<Vec<_>, _>>()?;
    fit_color_mixture(&maps, cfg)
}

/// Most responsible component for each superpixel of `map`.
fn assign_superpixels(map: &SuperpixelMap, mixture: &MixtureModel) -> Result<Vec<usize>, DetectError> {
    Ok(responsibilities(mixture, &map.mean_colors())?
        .iter()
        .map(|row| argmax(row))
        .collect())
}

fn superpixel_union(map: &SuperpixelMap, selected: impl Fn(usize) -> bool) -> BinaryMask {
    let bits = map.labels.iter().map(|&l| selected(l as usize)).collect();
    BinaryMask::from_bits(map.width, map.height, bits).expect("label map covers the frame")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub frame: String,
    pub x: u32,
    pub y: u32,
    pub component: usize,
    /// Set once the clicked component receives a label.
    pub accepted: bool,
}

/// One line of a recorded click file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub frame: String,
    pub x: u32,
    pub y: u32,
    pub label: FruitLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickOutcome {
    pub component: usize,
    /// Superpixels of the clicked frame assigned to `component`.
    pub highlight: BinaryMask,
}

#[derive(Debug, Clone)]
struct SessionFrame {
    id: String,
    map: SuperpixelMap,
    assignment: Vec<usize>,
}

/// Interactive labeling state: the working color clusters over the session
/// frames, the clicks made so far and the labels assigned to components.
#[derive(Debug, Clone)]
pub struct SupervisionSession {
    dataset_id: String,
    frames: Vec<SessionFrame>,
    mixture: MixtureModel,
    labels: BTreeMap<usize, FruitLabel>,
    clicks: Vec<Click>,
}

impl SupervisionSession {
    pub fn new(dataset_id: impl Into<String>, frames: Vec<(String, LabImage)>, cfg: &DetectConfig) -> Result<Self, DetectError> {
        cfg.validate()?;
        if frames.is_empty() {
            return Err(DetectError::NoFrames);
        }
        let maps = frames
            .par_iter()
            .map(|(_, img)| slic_segment(img, &cfg.slic))
            .collect::<Result<Vec<_>, _>>()?;
        let mixture = fit_color_mixture(&maps, cfg)?;
        let frames = frames
            .into_iter()
            .zip(maps)
            .map(|((id, _), map)| {
                let assignment = assign_superpixels(&map, &mixture)?;
                Ok(SessionFrame { id, map, assignment })
            })
            .collect::<Result<Vec<_>, DetectError>>()?;
        Ok(Self {
            dataset_id: dataset_id.into(),
            frames,
            mixture,
            labels: BTreeMap::new(),
            clicks: Vec::new(),
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.id.as_str())
    }

    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn labels(&self) -> &BTreeMap<usize, FruitLabel> {
        &self.labels
    }

    fn frame(&self, id: &str) -> Result<&SessionFrame, DetectError> {
        self.frames
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| DetectError::UnknownFrame(id.to_string()))
    }

    /// Component most responsible for the superpixel under `(x, y)` and the
    /// frame's superpixels assigned to it. The click is recorded.
    pub fn click_to_cluster(&mut self, frame: &str, x: u32, y: u32) -> Result<ClickOutcome, DetectError> {
        let f = self.frame(frame)?;
        if x >= f.map.width || y >= f.map.height {
            return Err(DetectError::OutOfBounds {
                x,
                y,
                width: f.map.width,
                height: f.map.height,
            });
        }
        let component = f.assignment[f.map.label_at(x, y) as usize];
        let highlight = superpixel_union(&f.map, |s| f.assignment[s] == component);
        self.clicks.push(Click {
            frame: frame.to_string(),
            x,
            y,
            component,
            accepted: false,
        });
        Ok(ClickOutcome { component, highlight })
    }

    /// Superpixels of `frame` assigned to `component`.
    pub fn highlight(&self, frame: &str, component: usize) -> Result<BinaryMask, DetectError> {
        if component >= self.mixture.len() {
            return Err(DetectError::UnknownComponent(component));
        }
        let f = self.frame(frame)?;
        Ok(superpixel_union(&f.map, |s| f.assignment[s] == component))
    }

    /// Records `label` for `component`; the latest label wins.
    pub fn label_cluster(&mut self, component: usize, label: FruitLabel) -> Result<(), DetectError> {
        if component >= self.mixture.len() {
            return Err(DetectError::UnknownComponent(component));
        }
        self.labels.insert(component, label);
        if let Some(click) = self.clicks.iter_mut().rev().find(|c| c.component == component) {
            click.accepted = true;
        }
        Ok(())
    }

    /// Replays a recorded click file: every click is resolved to its component,
    /// which then receives the recorded label.
    pub fn apply_clicks(&mut self, records: &[ClickRecord]) -> Result<(), DetectError> {
        for r in records {
            let outcome = self.click_to_cluster(&r.frame, r.x, r.y)?;
            self.label_cluster(outcome.component, r.label)?;
        }
        Ok(())
    }

    /// Freezes the current labels into a model. Unlabeled components count as
    /// background. The session itself is left untouched.
    pub fn finalize_model(&self, provenance: Provenance) -> Result<ColorModel, DetectError> {
        let labels = (0..self.mixture.len())
            .map(|i| self.labels.get(&i).copied().unwrap_or(FruitLabel::Background))
            .collect();
        ColorModel::new(self.mixture.clone(), labels, provenance)
    }
}

/// Apple/background mask of one frame under `model`.
pub fn classify_frame(frame: &LabImage, model: &ColorModel, cfg: &DetectConfig) -> Result<BinaryMask, DetectError> {
    cfg.validate()?;
    model.validate()?;
    let map = slic_segment(frame, &cfg.slic)?;
    let apple = frame_component_labels(&map, model, cfg)?;
    let assignment = assign_superpixels(&map, &apple.0)?;
    Ok(superpixel_union(&map, |s| apple.1[assignment[s]]))
}

/// Fits the per-frame mixture and decides, for each of its components,
/// whether it matches an apple-labeled model component.
fn frame_component_labels(
    map: &SuperpixelMap,
    model: &ColorModel,
    cfg: &DetectConfig,
) -> Result<(MixtureModel, Vec<bool>), DetectError> {
    let colors = map.mean_colors();
    let k = model.mixture.len().min(colors.len());
    let frame_mixture = fit_gmm(&colors, k, &cfg.em)?.model;
    let is_apple = frame_mixture
        .components()
        .iter()
        .map(|fc| {
            let mut best: Option<(f64, usize)> = None;
            for (i, mc) in model.mixture.components().iter().enumerate() {
                let kl = kl_gaussian(fc, mc)?;
                if best.is_none_or(|(b, _)| kl < b) {
                    best = Some((kl, i));
                }
            }
            let (kl, i) = best.expect("model has at least one component");
            Ok(kl < cfg.kl_threshold && model.labels[i] == FruitLabel::Apple)
        })
        .collect::<Result<Vec<bool>, DetectError>>()?;
    Ok((frame_mixture, is_apple))
}

/// Classifies frames in parallel; results keep the input order.
pub fn classify_frames(frames: &[LabImage], model: &ColorModel, cfg: &DetectConfig) -> Vec<Result<BinaryMask, DetectError>> {
    frames.par_iter().map(|f| classify_frame(f, model, cfg)).collect()
}

/// One connected apple region.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: String,
    pub bbox: BoundingBox,
    /// Region pixels, cropped to `bbox`.
    pub mask: BinaryMask,
    pub area: usize,
}

/// 8-connected regions of at least `min_area` pixels, in raster order.
pub fn detections_from_mask(frame: &str, mask: &BinaryMask, min_area: usize) -> Vec<Detection> {
    let set = connected_components(mask, Connectivity::Eight);
    set.components
        .iter()
        .filter(|c| c.pixel_count >= min_area)
        .map(|c| {
            let b = c.bbox;
            let crop = BinaryMask::from_fn(b.w, b.h, |x, y| {
                set.labels[((b.y + y) * set.width + b.x + x) as usize] == c.id
            });
            Detection {
                frame: frame.to_string(),
                bbox: b,
                mask: crop,
                area: c.pixel_count,
            }
        })
        .collect()
}
