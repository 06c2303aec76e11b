//! Glue shared by the command line, the HTTP service and the end-to-end
//! tests: classify frames, recount cluster tracks from the resulting masks and
//! turn two side models into a yield report.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::count::{count_cluster, ClusterPatch, CountConfig};
use crate::detect::{
    classify_frame, detections_from_mask, ClickRecord, ColorModel, DetectConfig, DetectError, Detection, FruitLabel,
    SupervisionSession,
};
use crate::imaging::{BinaryMask, LabImage};
use crate::slic::SlicConfig;
use crate::yieldmap::{
    filter_ground_and_background, ObservationSource, OverlapRecord, SideModel, TrackObservation, YieldError, YieldReport,
};

/// Everything that influences detection and counting, so that a run can be
/// replayed from one file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detect: DetectConfig,
    pub count: CountConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.detect.validate().map_err(|e| e.to_string())?;
        self.count.em.validate().map_err(|e| e.to_string())?;
        if self.count.restarts == 0 {
            return Err("count.restarts must be >= 1".into());
        }
        if !(self.count.samples_per_fruit > 0.0) {
            return Err("count.samples_per_fruit must be > 0".into());
        }
        Ok(())
    }

    /// Replaces every EM seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.detect.em.rng_seed = seed;
        self.count.em.rng_seed = seed;
        self
    }
}

/// Detection settings for the simulator's small frames: superpixels of
/// about 64 pixels so that a 9-12 px radius apple spans several of them.
pub fn small_frame_detect_config(width: u32, height: u32) -> DetectConfig {
    DetectConfig {
        slic: SlicConfig {
            target_count: ((width as usize * height as usize) / 64).max(1),
            ..SlicConfig::default()
        },
        ..DetectConfig::default()
    }
}

pub struct FrameResult {
    pub mask: BinaryMask,
    pub detections: Vec<Detection>,
}

pub fn detect_frame(id: &str, frame: &LabImage, model: &ColorModel, cfg: &DetectConfig) -> Result<FrameResult, DetectError> {
    let mask = classify_frame(frame, model, cfg)?;
    let detections = detections_from_mask(id, &mask, cfg.min_area);
    Ok(FrameResult { mask, detections })
}

/// Classifies every frame in parallel, keyed by frame id.
pub fn classify_all(
    frames: &[(String, LabImage)],
    model: &ColorModel,
    cfg: &DetectConfig,
) -> Result<HashMap<String, BinaryMask>, DetectError> {
    frames
        .par_iter()
        .map(|(id, img)| Ok((id.clone(), classify_frame(img, model, cfg)?)))
        .collect()
}

/// Replaces every patch observation whose frame has a mask by the crop of that
/// mask over the patch's region, updating the observed area.
pub fn attach_masks(side: &mut SideModel, masks: &HashMap<String, BinaryMask>) {
    for t in &mut side.tracks {
        for o in &mut t.observations {
            if let (ObservationSource::Patch(p), Some(mask)) = (&o.source, masks.get(&o.frame)) {
                let patch = ClusterPatch::from_frame_mask(o.frame.clone(), mask, p.bbox);
                o.area = patch.area();
                o.source = ObservationSource::Patch(patch);
            }
        }
    }
}

fn observation_count(o: &TrackObservation, cfg: &CountConfig) -> usize {
    match &o.source {
        ObservationSource::Patch(p) => count_cluster(p, cfg).count,
        ObservationSource::Count(c) => *c,
    }
}

/// Resolves every track count by median-of-top-3 over its observations.
pub fn resolve_side(side: &mut SideModel, cfg: &CountConfig) {
    side.resolve_counts(|o| observation_count(o, cfg));
}

/// Removes flagged tracks from both sides along with overlaps that referred
/// to them.
pub fn filter_sides(front: &SideModel, back: &SideModel, overlaps: &[OverlapRecord]) -> (SideModel, SideModel, Vec<OverlapRecord>) {
    let f = SideModel {
        side: front.side,
        tracks: filter_ground_and_background(front.tracks.clone()),
    };
    let b = SideModel {
        side: back.side,
        tracks: filter_ground_and_background(back.tracks.clone()),
    };
    let fi: HashSet<&str> = f.tracks.iter().map(|t| t.id.as_str()).collect();
    let bi: HashSet<&str> = b.tracks.iter().map(|t| t.id.as_str()).collect();
    let o = overlaps
        .iter()
        .filter(|o| fi.contains(o.front.as_str()) && bi.contains(o.back.as_str()))
        .cloned()
        .collect();
    (f, b, o)
}

/// Filters, then merges resolved side models into a report.
pub fn yield_report(
    dataset: &str,
    method: &str,
    front: &SideModel,
    back: &SideModel,
    overlaps: &[OverlapRecord],
    harvested: Option<usize>,
) -> Result<YieldReport, YieldError> {
    let (f, b, o) = filter_sides(front, back, overlaps);
    YieldReport::build(dataset, method, &f, &b, &o, harvested)
}

/// `count` frame indices spread evenly over `n` frames.
pub fn spread_indices(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|i| i * n / count).collect()
}

/// A scripted annotator: walks the apple pixels of each session frame (every
/// `stride`-th one) and clicks wherever no apple-labeled color class covers
/// the pixel yet, labeling the hit class as apple. Stops after `budget`
/// clicks. Returns the clicks in replayable form.
pub fn simulated_user_clicks(
    session: &mut SupervisionSession,
    truth: &[(String, BinaryMask)],
    budget: usize,
    stride: usize,
) -> Result<Vec<ClickRecord>, DetectError> {
    let mut records = Vec::new();
    for (frame, mask) in truth {
        let mut covered = BinaryMask::new(mask.width(), mask.height());
        for (&c, &l) in session.labels() {
            if l == FruitLabel::Apple {
                covered.union_with(&session.highlight(frame, c)?).expect("same frame size");
            }
        }
        for (x, y) in mask.foreground().step_by(stride.max(1)) {
            if covered.get(x, y) {
                continue;
            }
            if records.len() == budget {
                return Ok(records);
            }
            let outcome = session.click_to_cluster(frame, x, y)?;
            session.label_cluster(outcome.component, FruitLabel::Apple)?;
            covered.union_with(&outcome.highlight).expect("same frame size");
            records.push(ClickRecord {
                frame: frame.clone(),
                x,
                y,
                label: FruitLabel::Apple,
            });
        }
    }
    Ok(records)
}
